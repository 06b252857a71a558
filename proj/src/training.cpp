#include "refcut/training.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "refcut/checkpoint.hpp"
#include "refcut/nn/kernels.hpp"

namespace refcut {

namespace k = nn::kernels;
using nn::Matrix;

namespace {

struct FocalTerms {
  double pt;
  bool clamped;
};

FocalTerms focal_pt(double p, bool positive, double eps) {
  const double pc = std::clamp(p, eps, 1.0 - eps);
  return {positive ? pc : 1.0 - pc, pc != p};
}

double focal_weight(double pt, double gamma) { return gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, gamma); }

}  // namespace

double normalized_focal_loss(const SoftMask& pred, const BitMask& gt, double gamma, double eps) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw MaskError("normalized_focal_loss: prediction is " + std::to_string(pred.height()) + "x" +
                    std::to_string(pred.width()) + ", ground truth is " +
                    std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  double weighted = 0, norm = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double pt = focal_pt(pred.data()[i], gt[i] != 0, eps).pt;
    const double beta = focal_weight(pt, gamma);
    weighted += beta * -std::log(pt);
    norm += beta;
  }
  return weighted / norm;
}

template <typename T>
double normalized_focal_loss_logits(const Matrix<T>& logits, const BitMask& gt, double gamma,
                                    Matrix<T>* dlogits, double eps) {
  if (logits.rows != gt.height() || logits.cols != gt.width()) {
    throw MaskError("normalized_focal_loss: logits do not match the ground truth size");
  }
  const std::size_t n = gt.size();
  std::vector<FocalTerms> terms(n);
  std::vector<double> prob(n);
  double weighted = 0, norm = 0;
  for (std::size_t i = 0; i < n; ++i) {
    prob[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i])));
    terms[i] = focal_pt(prob[i], gt[i] != 0, eps);
    const double beta = focal_weight(terms[i].pt, gamma);
    weighted += beta * -std::log(terms[i].pt);
    norm += beta;
  }
  const double loss = weighted / norm;
  if (dlogits) {
    *dlogits = Matrix<T>(logits.rows, logits.cols);
    for (std::size_t i = 0; i < n; ++i) {
      if (terms[i].clamped) continue;
      const double pt = terms[i].pt;
      const double beta = focal_weight(pt, gamma);
      const double dbeta = gamma == 0.0 ? 0.0 : -gamma * std::pow(1.0 - pt, gamma - 1.0);
      const double dA = dbeta * -std::log(pt) - beta / pt;
      const double dpt_dz = (gt[i] ? 1.0 : -1.0) * prob[i] * (1.0 - prob[i]);
      dlogits->data[i] = static_cast<T>((dA - loss * dbeta) / norm * dpt_dz);
    }
  }
  return loss;
}

ClickRollout simulate_training_clicks(const BitMask& gt, InteractiveSession& session,
                                      std::mt19937_64& rng, int max_k) {
  if (max_k < 1) throw std::invalid_argument("max_k must be at least 1");
  const int k = std::uniform_int_distribution<int>(1, max_k)(rng);
  ClickRollout out;
  out.prev = SoftMask(gt.height(), gt.width());
  out.clicks.push_back(first_click(gt));
  for (int i = 1; i < k; ++i) {
    SoftMask pred = session.predict(out.clicks, out.prev);
    if (!(pred.threshold(kPredictionThreshold) ^ gt).any()) break;
    out.clicks.push_back(next_click(pred, gt, out.clicks));
    out.intermediates.push_back(pred);
    out.prev = std::move(pred);
  }
  return out;
}

bool augment_pair(const TrainingPair& pair, int size, const AugmentConfig& cfg,
                  std::mt19937_64& rng, TrainingPair& out) {
  Image image = pair.image;
  BitMask gt = pair.gt;
  if (cfg.flip && std::bernoulli_distribution(0.5)(rng)) {
    image = flip_horizontal(image);
    gt = flip_horizontal(gt);
  }
  const double scale = std::uniform_real_distribution<double>(cfg.scale_min, cfg.scale_max)(rng);
  const int n = std::max(1, static_cast<int>(std::lround(size * scale)));
  image = resize_bilinear(image, n, n);
  gt = maskops::resize_nearest(gt, n, n);

  Image canvas(size, size, 0.5f);
  BitMask canvas_gt(size, size);
  // n >= size: crop window inside the scaled image; otherwise place it on the canvas.
  const int span = std::abs(n - size);
  const int dy = std::uniform_int_distribution<int>(0, span)(rng);
  const int dx = std::uniform_int_distribution<int>(0, span)(rng);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const int sr = n >= size ? r + dy : r - dy;
      const int sc = n >= size ? c + dx : c - dx;
      if (sr < 0 || sc < 0 || sr >= n || sc >= n) continue;
      for (int ch = 0; ch < 3; ++ch) canvas.at(r, c, ch) = image.at(sr, sc, ch);
      canvas_gt.set(r, c, gt.at(sr, sc));
    }
  if (!canvas_gt.any()) return false;
  out.target_id = pair.target_id;
  out.reference_id = pair.reference_id;
  out.selected_tags = pair.selected_tags;
  out.image = std::move(canvas);
  out.gt = std::move(canvas_gt);
  out.guidance = resize_guidance(pair.guidance, size);
  return true;
}

template <typename T>
double loss_and_gradients(const RefCutNet<T>& net, const TrainingSample& sample, double gamma,
                          ModelParams<T>& grads) {
  const ModelConfig& cfg = net.config();
  const ReferenceGuidance& g = sample.guidance;
  const bool use_pos = g.has_positive(), use_neg = g.has_negative();

  Matrix<T> ref_patches;
  BackboneTrace<T> ref_trace;
  GridFeature<T> ref_feature;
  PromptMlpTrace<T> pos_trace, neg_trace;
  SoftMask pos_weights, neg_weights;
  PromptPair<T> prompts;
  if (use_pos || use_neg) {
    ref_patches = net.patchify(g.image);
    ref_feature = net.backbone(net.embed_image_patches(ref_patches), &ref_trace);
    if (use_pos) {
      pos_weights = token_weights(g.positive, cfg.patch_size);
      prompts.positive = net.prompt_mlp(masked_representation(ref_feature, pos_weights),
                                        Polarity::Positive, &pos_trace);
    }
    if (use_neg) {
      neg_weights = token_weights(g.negative, cfg.patch_size);
      prompts.negative = net.prompt_mlp(masked_representation(ref_feature, neg_weights),
                                        Polarity::Negative, &neg_trace);
    }
  }

  const ExtraMaps maps = assemble_extra_maps(sample.clicks, sample.prev, cfg.click_radius);
  const Matrix<T> image_patches = net.patchify(sample.image);
  const Matrix<T> extra_patches = net.patchify(maps);
  const TokenFeature<T> extra{cfg.grid(), cfg.grid(),
                              k::linear(extra_patches, net.params().extra_embed.weight,
                                        net.params().extra_embed.bias)};
  const TokenFeature<T> fused =
      RefCutNet<T>::fuse(net.embed_image_patches(image_patches), extra, prompts);
  BackboneTrace<T> trace;
  const TokenFeature<T> features = net.backbone(fused, &trace);
  DecoderTrace<T> dtrace;
  const Matrix<T> logits = net.decode_logits(features, &dtrace);

  Matrix<T> dlogits;
  const double loss = normalized_focal_loss_logits(logits, sample.gt, gamma, &dlogits);
  if (!std::isfinite(loss)) return loss;

  const Matrix<T> dfeatures = net.decoder_backward(dtrace, dlogits, grads);
  const Matrix<T> dfused = net.backbone_backward(trace, dfeatures, grads);
  net.image_embed_backward(image_patches, dfused, grads);
  net.extra_embed_backward(extra_patches, dfused, grads);

  if (use_pos || use_neg) {
    const std::vector<T> dprompt = k::column_sums(dfused);
    Matrix<T> dref(ref_feature.tokens.rows, ref_feature.tokens.cols);
    if (use_pos) {
      const auto drep = net.prompt_mlp_backward(pos_trace, dprompt, Polarity::Positive, grads);
      dref += masked_representation_backward(ref_feature, pos_weights, drep);
    }
    if (use_neg) {
      const auto drep = net.prompt_mlp_backward(neg_trace, dprompt, Polarity::Negative, grads);
      dref += masked_representation_backward(ref_feature, neg_weights, drep);
    }
    net.image_embed_backward(ref_patches, net.backbone_backward(ref_trace, dref, grads), grads);
  }
  return loss;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (epochs < 1) fail("epochs must be >= 1");
  if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (!(decay_factor > 0 && decay_factor <= 1)) fail("decay_factor must be in (0, 1]");
  if (decay_epoch < 0 || decay_epoch > epochs) fail("decay_epoch must be in [0, epochs]");
  if (gamma < 0) fail("gamma must be >= 0");
  dropout.validate();
  if (no_reference_prob < 0 || no_reference_prob > 1) fail("no_reference_prob must be in [0, 1]");
  if (max_clicks < 1) fail("max_clicks must be >= 1");
  if (!(augment.scale_min > 0 && augment.scale_min <= augment.scale_max))
    fail("augment scale range is invalid");
  if (eval_every < 0 || checkpoint_every < 0) fail("intervals must be >= 0");
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::long_schedule() {
  TrainConfig c;
  c.epochs = 55;
  c.decay_epoch = 50;
  c.base_lr = 5e-6;
  c.decay_factor = 0.1;
  c.no_reference_prob = 0.0;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"steps_per_epoch", c.steps_per_epoch},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"decay_factor", c.decay_factor},
       {"decay_epoch", c.decay_epoch},
       {"gamma", c.gamma},
       {"dropout_positive_only", c.dropout.positive_only},
       {"dropout_negative_only", c.dropout.negative_only},
       {"no_reference_prob", c.no_reference_prob},
       {"max_clicks", c.max_clicks},
       {"augment_flip", c.augment.flip},
       {"augment_scale_min", c.augment.scale_min},
       {"augment_scale_max", c.augment.scale_max},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"eval_every", c.eval_every},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig base = c;
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "long") base = TrainConfig::long_schedule();
    else if (preset == "desk") base = TrainConfig::desk();
    else throw std::invalid_argument("unknown train preset '" + preset + "'");
  }
  nlohmann::json defaults = base;
  for (const auto& [key, value] : j.items()) {
    if (key == "preset") continue;
    if (!defaults.contains(key)) throw std::invalid_argument("unknown train config key '" + key + "'");
    defaults[key] = value;
  }
  const auto& d = defaults;
  c.epochs = d.at("epochs");
  c.steps_per_epoch = d.at("steps_per_epoch");
  c.batch_size = d.at("batch_size");
  c.base_lr = d.at("base_lr");
  c.decay_factor = d.at("decay_factor");
  c.decay_epoch = d.at("decay_epoch");
  c.gamma = d.at("gamma");
  c.dropout.positive_only = d.at("dropout_positive_only");
  c.dropout.negative_only = d.at("dropout_negative_only");
  c.no_reference_prob = d.at("no_reference_prob");
  c.max_clicks = d.at("max_clicks");
  c.augment.flip = d.at("augment_flip");
  c.augment.scale_min = d.at("augment_scale_min");
  c.augment.scale_max = d.at("augment_scale_max");
  c.adam_beta1 = d.at("adam_beta1");
  c.adam_beta2 = d.at("adam_beta2");
  c.adam_eps = d.at("adam_eps");
  c.eval_every = d.at("eval_every");
  c.checkpoint_every = d.at("checkpoint_every");
  c.seed = d.at("seed");
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read train config " + path.string());
  TrainConfig c = nlohmann::json::parse(in).get<TrainConfig>();
  c.validate();
  return c;
}

Adam::Adam(const ModelConfig& config, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(zero_params<float>(config)),
      v_(zero_params<float>(config)) {}

void Adam::step(ModelParams<float>& params, const ModelParams<float>& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  auto p = param_refs(params);
  const auto g = param_refs(grads);
  auto m = param_refs(m_);
  auto v = param_refs(v_);
  for (std::size_t a = 0; a < p.size(); ++a) {
    for (std::size_t i = 0; i < p[a].values.size(); ++i) {
      const double gi = g[a].values[i];
      const double mi = beta1_ * m[a].values[i] + (1.0 - beta1_) * gi;
      const double vi = beta2_ * v[a].values[i] + (1.0 - beta2_) * gi * gi;
      m[a].values[i] = static_cast<float>(mi);
      v[a].values[i] = static_cast<float>(vi);
      p[a].values[i] -= static_cast<float>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
    }
  }
}

Trainer::Trainer(const ModelConfig& config, ModelParams<float> init, const TrainConfig& train)
    : train_(train), net_(config, std::move(init)),
      adam_(config, train.adam_beta1, train.adam_beta2, train.adam_eps),
      grads_(zero_params<float>(config)) {}

double Trainer::step(std::span<const TrainingSample> batch, double lr) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  grads_ = zero_params<float>(net_.config());
  double total = 0;
  for (const auto& sample : batch) {
    const double loss = loss_and_gradients(net_, sample, train_.gamma, grads_);
    if (!std::isfinite(loss)) throw NonFiniteLoss(fmt::format("non-finite loss {}", loss));
    total += loss;
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (auto& ref : param_refs(grads_))
    for (float& v : ref.values) v *= inv;
  adam_.step(net_.mutable_params(), grads_, lr);
  return total / static_cast<double>(batch.size());
}

namespace {

class PromptedSession final : public InteractiveSession {
 public:
  PromptedSession(const RefCutNet<float>& net, const Image& image, const PromptPair<float>& prompts)
      : net_(net), image_(image), prompts_(prompts) {}
  SoftMask predict(std::span<const Click> clicks, const SoftMask& prev) override {
    return net_.predict(image_, clicks, prev, prompts_);
  }

 private:
  const RefCutNet<float>& net_;
  const Image& image_;
  const PromptPair<float>& prompts_;
};

}  // namespace

TrainingSample make_training_sample(const PairSampler& sampler, const RefCutNet<float>& net,
                                    const TrainConfig& cfg, std::mt19937_64& rng) {
  const int size = net.config().input_size;
  TrainingPair augmented;
  for (int attempt = 0;; ++attempt) {
    TrainingPair pair = sampler.sample(rng);
    if (std::bernoulli_distribution(cfg.no_reference_prob)(rng)) {
      pair.guidance.positive = BitMask();
      pair.guidance.negative = BitMask();
    }
    if (augment_pair(pair, size, cfg.augment, rng, augmented)) break;
    if (attempt > 100) throw SamplingError("augmentation keeps losing the target");
  }
  TrainingSample sample;
  sample.image = std::move(augmented.image);
  sample.gt = std::move(augmented.gt);
  sample.guidance = std::move(augmented.guidance);

  PromptPair<float> prompts;
  if (sample.guidance.has_positive() || sample.guidance.has_negative())
    prompts = generate_prompts(net, sample.guidance);
  PromptedSession session(net, sample.image, prompts);
  ClickRollout rollout = simulate_training_clicks(sample.gt, session, rng, cfg.max_clicks);
  sample.clicks = std::move(rollout.clicks);
  sample.prev = std::move(rollout.prev);
  return sample;
}

ModelParams<float> train(const Dataset& dataset, const ModelConfig& model_config,
                         ModelParams<float> init, const TrainConfig& cfg,
                         const TrainOptions& options) {
  cfg.validate();
  model_config.validate();
  const PairSampler sampler(dataset, cfg.dropout);
  Trainer trainer(model_config, std::move(init), cfg);
  std::mt19937_64 rng(cfg.seed);

  std::ofstream metrics;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    metrics.open(options.out_dir / "metrics.jsonl");
    if (!metrics) throw std::runtime_error("cannot write metrics in " + options.out_dir.string());
  }
  const nlohmann::json run_meta = {{"train_config", cfg}};

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate(epoch);
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      std::vector<TrainingSample> batch;
      batch.reserve(static_cast<std::size_t>(cfg.batch_size));
      for (int b = 0; b < cfg.batch_size; ++b)
        batch.push_back(make_training_sample(sampler, trainer.net(), cfg, rng));
      double loss = 0;
      try {
        loss = trainer.step(batch, lr);
      } catch (const NonFiniteLoss& e) {
        if (!options.out_dir.empty()) {
          nlohmann::json meta = run_meta;
          meta["step"] = step + 1;
          meta["epoch"] = epoch;
          meta["reason"] = e.what();
          save_checkpoint(options.out_dir / "diagnostic.safetensors", model_config,
                          trainer.net().params(), meta);
        }
        throw NonFiniteLoss(fmt::format("step {}: {}", step + 1, e.what()));
      }
      ++step;
      nlohmann::json line = {{"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}};
      if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && !options.held_out.empty()) {
        EvalConfig ec;
        ec.regime = GuidanceRegime::Both;
        ec.session.max_clicks = 1;
        const NetSessionModel model(trainer.net());
        line["held_out_iou_at_1"] = evaluate(model, options.held_out, ec).iou_at_1;
      }
      if (metrics.is_open()) metrics << line.dump() << '\n' << std::flush;
      if (options.on_metrics) options.on_metrics(line);
      if (step % 50 == 0 || line.contains("held_out_iou_at_1"))
        spdlog::info("epoch {} step {} loss {:.4f} lr {:.2e}", epoch, step, loss, lr);
    }
    if (!options.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      nlohmann::json meta = run_meta;
      meta["epoch"] = epoch + 1;
      meta["step"] = step;
      save_checkpoint(options.out_dir / fmt::format("epoch_{:03d}.safetensors", epoch + 1),
                      model_config, trainer.net().params(), meta);
    }
  }
  if (!options.out_dir.empty()) {
    nlohmann::json meta = run_meta;
    meta["step"] = step;
    save_checkpoint(options.out_dir / "final.safetensors", model_config, trainer.net().params(),
                    meta);
  }
  return trainer.net().params();
}

template double normalized_focal_loss_logits<float>(const Matrix<float>&, const BitMask&, double,
                                                    Matrix<float>*, double);
template double normalized_focal_loss_logits<double>(const Matrix<double>&, const BitMask&, double,
                                                     Matrix<double>*, double);
template double loss_and_gradients<float>(const RefCutNet<float>&, const TrainingSample&, double,
                                          ModelParams<float>&);
template double loss_and_gradients<double>(const RefCutNet<double>&, const TrainingSample&, double,
                                           ModelParams<double>&);

}  // namespace refcut
