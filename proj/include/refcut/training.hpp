#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "refcut/model.hpp"
#include "refcut/reference_dropout.hpp"
#include "refcut/robot_eval.hpp"
#include "refcut/sampling.hpp"

namespace refcut {

inline constexpr double kFocalEps = 1e-6;

/// Focal terms (1 - pt)^gamma * -log(pt) summed and divided by the sum of
/// the focal weights. `pred` is clamped to [eps, 1 - eps].
double normalized_focal_loss(const SoftMask& pred, const BitMask& gt, double gamma,
                             double eps = kFocalEps);

/// Same loss on sigmoid(logits); writes dL/dlogits when `dlogits` is set.
/// The normaliser is differentiated too, so the gradient is exact.
template <typename T>
double normalized_focal_loss_logits(const nn::Matrix<T>& logits, const BitMask& gt, double gamma,
                                    nn::Matrix<T>* dlogits, double eps = kFocalEps);

struct ClickRollout {
  std::vector<Click> clicks;
  SoftMask prev;                       // prediction before the final click
  std::vector<SoftMask> intermediates;  // prediction answered by clicks[i + 1]
};

/// k ~ U{1..max_k}; a center click followed by robot clicks against the
/// session's own predictions. Stops early if a prediction becomes perfect.
ClickRollout simulate_training_clicks(const BitMask& gt, InteractiveSession& session,
                                      std::mt19937_64& rng, int max_k);

struct AugmentConfig {
  bool flip = true;
  double scale_min = 0.75;
  double scale_max = 1.4;
};

/// Network-ready training example, everything at the model input size.
struct TrainingSample {
  Image image;
  BitMask gt;
  ReferenceGuidance guidance;
  std::vector<Click> clicks;
  SoftMask prev;
};

/// Random flip, scale and crop (or centre pad) of the target to size x size.
/// The reference is resized only. Returns false when the crop loses the target.
bool augment_pair(const TrainingPair& pair, int size, const AugmentConfig& cfg,
                  std::mt19937_64& rng, TrainingPair& out);

/// Forward and backward through both branches for one sample. Gradients are
/// accumulated into `grads`; returns the loss.
template <typename T>
double loss_and_gradients(const RefCutNet<T>& net, const TrainingSample& sample, double gamma,
                          ModelParams<T>& grads);

struct TrainConfig {
  int epochs = 20;
  int steps_per_epoch = 500;
  int batch_size = 8;
  double base_lr = 3e-4;
  double decay_factor = 0.1;
  int decay_epoch = 18;
  double gamma = 2.0;
  ReferenceDropout dropout;
  double no_reference_prob = 0.1;
  int max_clicks = 3;
  AugmentConfig augment;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int eval_every = 500;    // steps; 0 disables held-out evaluation
  int checkpoint_every = 1;  // epochs
  std::uint64_t seed = 0;

  double learning_rate(int epoch) const {
    return epoch >= decay_epoch ? base_lr * decay_factor : base_lr;
  }
  void validate() const;

  static TrainConfig desk();
  /// 55 epochs at a low learning rate, meant for a pretrained backbone.
  static TrainConfig long_schedule();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

class Adam {
 public:
  Adam(const ModelConfig& config, double beta1, double beta2, double eps);
  void step(ModelParams<float>& params, const ModelParams<float>& grads, double lr);
  int steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  ModelParams<float> m_;
  ModelParams<float> v_;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Owns the weights and the optimiser state. Per-sample gradients are summed
/// in batch order, so a step is deterministic.
class Trainer {
 public:
  Trainer(const ModelConfig& config, ModelParams<float> init, const TrainConfig& train);

  /// One optimiser step on the batch; returns the mean loss.
  double step(std::span<const TrainingSample> batch, double lr);

  const RefCutNet<float>& net() const { return net_; }
  const ModelParams<float>& last_gradients() const { return grads_; }

 private:
  TrainConfig train_;
  RefCutNet<float> net_;
  Adam adam_;
  ModelParams<float> grads_;
};

/// Builds one training sample: pair sampling, optional reference removal,
/// augmentation and a simulated click rollout with the current network.
TrainingSample make_training_sample(const PairSampler& sampler, const RefCutNet<float>& net,
                                    const TrainConfig& cfg, std::mt19937_64& rng);

struct TrainOptions {
  std::filesystem::path out_dir;          // empty: no files written
  std::vector<EvalSample> held_out;        // IoU&1 checks during training
  std::function<void(const nlohmann::json&)> on_metrics;
};

/// Full training run from `init`. Writes checkpoints, metrics.jsonl and, on a
/// non-finite loss, diagnostic.safetensors before throwing NonFiniteLoss.
ModelParams<float> train(const Dataset& dataset, const ModelConfig& model_config,
                         ModelParams<float> init, const TrainConfig& cfg,
                         const TrainOptions& options = {});

}  // namespace refcut
