#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refcut/click_encoding.hpp"
#include "refcut/model.hpp"
#include "refcut/reference_prompt.hpp"
#include "refcut/sampling.hpp"

namespace refcut {

inline constexpr int kMaxClicks = 20;
inline constexpr double kPredictionThreshold = 0.5;

/// Positive click at the interior center of the target.
Click first_click(const BitMask& gt);

/// Click at the interior center of the largest 4-connected error region of
/// the thresholded prediction; the polarity follows the ground truth there.
Click next_click(const SoftMask& pred, const BitMask& gt, std::span<const Click> prior);

/// A model bound to one image and one set of reference guidance.
class InteractiveSession {
 public:
  virtual ~InteractiveSession() = default;
  virtual SoftMask predict(std::span<const Click> clicks, const SoftMask& prev) = 0;
};

class SessionModel {
 public:
  virtual ~SessionModel() = default;
  /// Must be safe to call concurrently.
  virtual std::unique_ptr<InteractiveSession> start(const Image& image,
                                                    const ReferenceGuidance& guidance) const = 0;
};

/// Runs the network at its input size; prompts are generated once per session.
class NetSessionModel final : public SessionModel {
 public:
  explicit NetSessionModel(const RefCutNet<float>& net) : net_(&net) {}
  std::unique_ptr<InteractiveSession> start(const Image& image,
                                            const ReferenceGuidance& guidance) const override;

 private:
  const RefCutNet<float>* net_;
};

struct SessionTrace {
  std::string sample_id;
  std::vector<double> ious;
  std::vector<Click> clicks;
};

struct SessionOptions {
  int max_clicks = kMaxClicks;
  double stop_iou = 0.90;
};

SessionTrace run_session(const SessionModel& model, const Image& image, const BitMask& gt,
                         const ReferenceGuidance& guidance, const SessionOptions& options = {},
                         std::string sample_id = {});

/// Mean over traces of the first click count reaching `threshold`, or the
/// click cap when never reached.
double noc(std::span<const SessionTrace> traces, double threshold, int max_clicks = kMaxClicks);

struct NoCReport {
  double noc80 = 0;
  double noc85 = 0;
  double noc90 = 0;
  double iou_at_1 = 0;  // percent
  int failures80 = 0;
  int failures85 = 0;
  int failures90 = 0;
  int n_samples = 0;
  std::vector<SessionTrace> traces;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json(bool include_traces = true) const;
  /// Header plus one row, columns NoC@80, NoC@85, NoC@90, IoU&1.
  std::string to_csv_row(const std::string& label) const;
  static std::string csv_header();
};

NoCReport aggregate(std::vector<SessionTrace> traces, int max_clicks = kMaxClicks);

/// Reference-mask degradations for robustness sweeps. Level 0 / scale 1 are
/// the identity.
BitMask degrade_to_polygon(const BitMask& mask, int interval);
ReferenceGuidance downscale_reference(const ReferenceGuidance& guidance, double scale);

struct EvalConfig {
  GuidanceRegime regime = GuidanceRegime::Both;
  SessionOptions session;
  int workers = 1;
  int polygon_interval = 0;
  double reference_scale = 1.0;
};

NoCReport evaluate(const SessionModel& model, std::span<const EvalSample> samples,
                   const EvalConfig& config);

void write_report(const std::filesystem::path& path, const NoCReport& report);

struct SweepPoint {
  std::string axis;  // "polygon" or "scale"
  double level = 0;
  NoCReport report;
};

/// Re-runs `evaluate` once per degradation level, the other axis held at the
/// identity. Levels are taken as given, so include 0 / 1.0 for the baseline.
std::vector<SweepPoint> degradation_sweep(const SessionModel& model,
                                          std::span<const EvalSample> samples,
                                          const EvalConfig& base,
                                          std::span<const int> polygon_intervals,
                                          std::span<const double> reference_scales);

/// {"polygon": [[level, IoU&1], ...], "scale": [...]}
nlohmann::json sweep_curves(std::span<const SweepPoint> points);

}  // namespace refcut
