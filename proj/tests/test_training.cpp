#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "refcut/checkpoint.hpp"
#include "refcut/training.hpp"

using namespace refcut;
using fixture::rect;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.input_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.decoder_dim = 4;
  c.click_radius = 2;
  return c;
}

SoftMask random_pred(int h, int w, std::mt19937_64& rng) {
  SoftMask p(h, w);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (double& v : p.data()) v = u(rng);
  return p;
}

Dataset chain_dataset() {
  Dataset d{fixture::chain3("chain_000"), fixture::chain3("chain_001"), fixture::chain3("chain_002")};
  sort_by_object_id(d);
  return d;
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("refcut_train_" + std::to_string(::getpid()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

// Records what it was asked and answers from a fixed random stream.
class NoisySession final : public InteractiveSession {
 public:
  explicit NoisySession(std::uint64_t seed) : rng_(seed) {}
  SoftMask predict(std::span<const Click>, const SoftMask& prev) override {
    return random_pred(prev.height(), prev.width(), rng_);
  }

 private:
  std::mt19937_64 rng_;
};

class PerfectSession final : public InteractiveSession {
 public:
  explicit PerfectSession(BitMask gt) : gt_(std::move(gt)) {}
  SoftMask predict(std::span<const Click>, const SoftMask&) override {
    SoftMask s(gt_.height(), gt_.width());
    for (int r = 0; r < gt_.height(); ++r)
      for (int c = 0; c < gt_.width(); ++c) s.at(r, c) = gt_.at(r, c);
    return s;
  }

 private:
  BitMask gt_;
};

}  // namespace

TEST_CASE("focal loss basics") {
  std::mt19937_64 rng(1);
  const BitMask gt = oracle::random_mask(12, 12, 0.4, rng);
  SoftMask perfect(12, 12);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) perfect.at(r, c) = gt.at(r, c) ? 1.0 : 0.0;
  CHECK(normalized_focal_loss(perfect, gt, 2.0) < 1e-5);
  const SoftMask pred = random_pred(12, 12, rng);
  CHECK(normalized_focal_loss(pred, gt, 2.0) > 0.0);
  CHECK_THROWS_AS(normalized_focal_loss(SoftMask(3, 3), gt, 2.0), MaskError);

  // gamma = 0 is the mean binary cross-entropy
  double bce = 0;
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) {
      const double p = pred.at(r, c);
      bce += gt.at(r, c) ? -std::log(p) : -std::log(1 - p);
    }
  CHECK(normalized_focal_loss(pred, gt, 0.0) == doctest::Approx(bce / 144).epsilon(1e-12));
}

TEST_CASE("focal loss is invariant to pixel duplication") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const BitMask gt = oracle::random_mask(9, 7, 0.3, rng);
    const SoftMask pred = random_pred(9, 7, rng);
    SoftMask up(18, 14);
    for (int r = 0; r < 18; ++r)
      for (int c = 0; c < 14; ++c) up.at(r, c) = pred.at(r / 2, c / 2);
    const BitMask gt_up = maskops::resize_nearest(gt, 18, 14);
    const double a = normalized_focal_loss(pred, gt, 2.0), b = normalized_focal_loss(up, gt_up, 2.0);
    CHECK(std::abs(a - b) / a < 1e-6);
  }
}

TEST_CASE("focal loss on logits: value and exact gradient") {
  std::mt19937_64 rng(3);
  const BitMask gt = oracle::random_mask(6, 5, 0.5, rng);
  nn::Matrix<double> logits(6, 5);
  std::normal_distribution<double> n(0, 2);
  for (double& v : logits.data) v = n(rng);
  SoftMask prob(6, 5);
  for (int i = 0; i < 30; ++i) prob.data()[i] = 1 / (1 + std::exp(-logits.data[i]));
  for (double gamma : {0.0, 1.0, 2.0}) {
    nn::Matrix<double> grad;
    const double loss = normalized_focal_loss_logits(logits, gt, gamma, &grad);
    CHECK(loss == doctest::Approx(normalized_focal_loss(prob, gt, gamma)).epsilon(1e-12));
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double keep = logits.data[i];
      logits.data[i] = keep + 1e-6;
      const double up = normalized_focal_loss_logits<double>(logits, gt, gamma, nullptr);
      logits.data[i] = keep - 1e-6;
      const double down = normalized_focal_loss_logits<double>(logits, gt, gamma, nullptr);
      logits.data[i] = keep;
      CHECK(grad.data[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-5));
    }
  }
}

TEST_CASE("training click rollout") {
  const BitMask gt = rect(16, 16, 3, 3, 12, 10);
  std::mt19937_64 rng(4);
  std::map<int, int> lengths;
  for (int run = 0; run < 300; ++run) {
    NoisySession session(run);
    const ClickRollout r = simulate_training_clicks(gt, session, rng, 4);
    ++lengths[static_cast<int>(r.clicks.size())];
    REQUIRE(r.clicks[0] == first_click(gt));
    REQUIRE(r.intermediates.size() + 1 == r.clicks.size());
    if (r.clicks.size() == 1) REQUIRE(r.prev.sum() == 0.0);
    else REQUIRE(r.prev == r.intermediates.back());
    for (std::size_t i = 1; i < r.clicks.size(); ++i) {
      const Click& c = r.clicks[i];
      const BitMask p = r.intermediates[i - 1].threshold(kPredictionThreshold);
      REQUIRE(p.at(c.row, c.col) != gt.at(c.row, c.col));
      REQUIRE((c.polarity == Polarity::Positive) == gt.at(c.row, c.col));
      REQUIRE(c.order == static_cast<int>(i) + 1);
    }
  }
  CHECK(lengths.size() == 4);

  // same seed, same sequence
  std::mt19937_64 a(9), b(9);
  NoisySession sa(1), sb(1);
  CHECK(simulate_training_clicks(gt, sa, a, 5).clicks == simulate_training_clicks(gt, sb, b, 5).clicks);

  PerfectSession perfect(gt);
  for (int i = 0; i < 20; ++i) CHECK(simulate_training_clicks(gt, perfect, rng, 5).clicks.size() == 1);
}

TEST_CASE("augmentation keeps the target and only resizes the reference") {
  const Dataset d = chain_dataset();
  std::mt19937_64 rng(5);
  const TrainingPair pair = sample_training_pair(d, rng, ReferenceDropout{0.0, 0.0});
  int kept = 0;
  for (int i = 0; i < 100; ++i) {
    TrainingPair out;
    if (!augment_pair(pair, 16, AugmentConfig{}, rng, out)) continue;
    ++kept;
    CHECK(out.image.height == 16);
    CHECK(out.gt.height() == 16);
    CHECK(out.gt.any());
    CHECK(out.guidance.positive == maskops::resize_nearest(pair.guidance.positive, 16, 16));
  }
  CHECK(kept > 50);
  TrainingPair out;
  AugmentConfig fixed{false, 1.0, 1.0};
  REQUIRE(augment_pair(pair, 8, fixed, rng, out));
  CHECK(out.gt == pair.gt);
  CHECK(out.image == pair.image);
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.epochs == 20);
  CHECK(c.steps_per_epoch == 500);
  CHECK(c.batch_size == 8);
  CHECK(c.base_lr == 3e-4);
  CHECK(c.adam_beta1 == 0.9);
  CHECK(c.adam_beta2 == 0.999);
  CHECK(c.dropout.positive_only + c.dropout.negative_only == 0.25);
  CHECK(c.learning_rate(c.decay_epoch - 1) == c.base_lr);
  CHECK(c.learning_rate(c.decay_epoch) == c.base_lr * c.decay_factor);

  const TrainConfig p = TrainConfig::long_schedule();
  CHECK(p.epochs == 55);
  CHECK(p.decay_epoch == 50);
  CHECK(p.base_lr == 5e-6);
  CHECK(p.decay_factor == 0.1);

  const nlohmann::json j = c;
  CHECK(j.get<TrainConfig>().base_lr == c.base_lr);
  CHECK(nlohmann::json{{"preset", "long"}, {"seed", 3}}.get<TrainConfig>().epochs == 55);
  CHECK_THROWS(nlohmann::json{{"epochs", 3}, {"learning_rat", 0.1}}.get<TrainConfig>());
  TrainConfig bad;
  bad.decay_epoch = bad.epochs + 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.dropout.positive_only = 0.9;
  CHECK_THROWS(bad.validate());

  TempDir dir;
  std::ofstream(dir.path / "c.json") << R"({"preset": "desk", "epochs": 3, "decay_epoch": 2})";
  const TrainConfig loaded = load_train_config(dir.path / "c.json");
  CHECK(loaded.epochs == 3);
  CHECK(loaded.decay_epoch == 2);
}

TEST_CASE("adam first step moves each weight by the learning rate") {
  const ModelConfig cfg = tiny();
  ModelParams<float> params = init_params<float>(cfg, 1);
  const ModelParams<float> before = params;
  ModelParams<float> grads = zero_params<float>(cfg);
  grads.pos_embed(0, 0) = 3.0f;
  grads.pos_embed(1, 0) = -0.01f;
  Adam adam(cfg, 0.9, 0.999, 1e-8);
  adam.step(params, grads, 1e-2);
  CHECK(params.pos_embed(0, 0) == doctest::Approx(before.pos_embed(0, 0) - 1e-2).epsilon(1e-4));
  CHECK(params.pos_embed(1, 0) == doctest::Approx(before.pos_embed(1, 0) + 1e-2).epsilon(1e-4));
  CHECK(params.pos_embed(2, 0) == before.pos_embed(2, 0));
  CHECK(adam.steps() == 1);
}

TEST_CASE("training loop: schedule, determinism, files, non-finite loss") {
  const Dataset d = chain_dataset();
  const ModelConfig cfg = tiny();
  TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 2;
  tc.batch_size = 2;
  tc.decay_epoch = 1;
  tc.eval_every = 2;
  tc.seed = 7;

  TempDir dir;
  std::vector<nlohmann::json> lines;
  TrainOptions opts;
  opts.out_dir = dir.path / "run";
  const auto held_out = build_eval_samples(d);
  opts.held_out = held_out;
  opts.on_metrics = [&](const nlohmann::json& j) { lines.push_back(j); };
  const auto params = train(d, cfg, init_params<float>(cfg, 1), tc, opts);
  REQUIRE(lines.size() == 4);
  CHECK(lines[1]["lr"].get<double>() == tc.base_lr);
  CHECK(lines[2]["lr"].get<double>() == tc.base_lr * tc.decay_factor);
  CHECK(lines[1].contains("held_out_iou_at_1"));
  CHECK(fs::exists(opts.out_dir / "metrics.jsonl"));
  CHECK(fs::exists(opts.out_dir / "epoch_001.safetensors"));
  CHECK(fs::exists(opts.out_dir / "epoch_002.safetensors"));
  const Checkpoint final_ckpt = load_checkpoint(opts.out_dir / "final.safetensors");
  CHECK(final_ckpt.params.pos_embed == params.pos_embed);

  std::vector<nlohmann::json> again;
  TrainOptions quiet;
  quiet.on_metrics = [&](const nlohmann::json& j) { again.push_back(j); };
  train(d, cfg, init_params<float>(cfg, 1), tc, quiet);
  CHECK(again[0]["loss"] == lines[0]["loss"]);

  // all parameter groups receive gradient after one step
  Trainer trainer(cfg, init_params<float>(cfg, 2), tc);
  std::mt19937_64 rng(3);
  const PairSampler sampler(d);
  std::vector<TrainingSample> batch;
  for (int i = 0; i < 2; ++i) batch.push_back(make_training_sample(sampler, trainer.net(), tc, rng));
  // make sure both prompt MLPs are exercised
  batch[0].guidance.positive = rect(16, 16, 2, 0, 14, 4);
  batch[0].guidance.negative = rect(16, 16, 2, 4, 14, 12);
  trainer.step(batch, 1e-3);
  std::map<ParamGroup, double> norm;
  for (const auto& r : param_refs(trainer.last_gradients()))
    for (float v : r.values) norm[group_of(r.name)] += static_cast<double>(v) * v;
  for (const auto& [g, n] : norm) {
    INFO(to_string(g));
    CHECK(n > 0.0);
  }

  batch[1].image.data[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(trainer.step(batch, 1e-3), NonFiniteLoss);
}
