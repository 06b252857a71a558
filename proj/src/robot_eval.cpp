#include "refcut/robot_eval.hpp"

#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

namespace refcut {

Click first_click(const BitMask& gt) {
  if (!gt.any()) throw MaskError("first_click: ground truth is empty");
  const Pixel p = maskops::interior_center(gt);
  return Click{p.row, p.col, Polarity::Positive, 1};
}

Click next_click(const SoftMask& pred, const BitMask& gt, std::span<const Click> prior) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw MaskError("next_click: prediction and ground truth differ in size");
  }
  const BitMask error = pred.threshold(kPredictionThreshold) ^ gt;
  if (!error.any()) throw MaskError("next_click: prediction already matches the ground truth");
  const BitMask region = maskops::largest_component(error, Connectivity::Four);
  const Pixel p = maskops::interior_center(region);
  const int order = prior.empty() ? 1 : prior.back().order + 1;
  return Click{p.row, p.col, gt.at(p.row, p.col) ? Polarity::Positive : Polarity::Negative, order};
}

namespace {

class NetSession final : public InteractiveSession {
 public:
  NetSession(const RefCutNet<float>& net, Image image, PromptPair<float> prompts, int height,
             int width)
      : net_(net), image_(std::move(image)), prompts_(std::move(prompts)), height_(height),
        width_(width) {}

  SoftMask predict(std::span<const Click> clicks, const SoftMask& prev) override {
    const int s = net_.config().input_size;
    if (height_ == s && width_ == s) return net_.predict(image_, clicks, prev, prompts_);
    std::vector<Click> scaled(clicks.begin(), clicks.end());
    for (auto& c : scaled) {
      c.row = std::min(s - 1, static_cast<int>(static_cast<long>(c.row) * s / height_));
      c.col = std::min(s - 1, static_cast<int>(static_cast<long>(c.col) * s / width_));
    }
    const SoftMask out =
        net_.predict(image_, scaled, resize_bilinear(prev, s, s), prompts_);
    return resize_bilinear(out, height_, width_);
  }

 private:
  const RefCutNet<float>& net_;
  Image image_;
  PromptPair<float> prompts_;
  int height_;
  int width_;
};

}  // namespace

std::unique_ptr<InteractiveSession> NetSessionModel::start(const Image& image,
                                                           const ReferenceGuidance& guidance) const {
  const int s = net_->config().input_size;
  PromptPair<float> prompts;
  if (guidance.has_positive() || guidance.has_negative()) {
    prompts = generate_prompts(*net_, resize_guidance(guidance, s));
  }
  return std::make_unique<NetSession>(*net_, resize_bilinear(image, s, s), std::move(prompts),
                                      image.height, image.width);
}

SessionTrace run_session(const SessionModel& model, const Image& image, const BitMask& gt,
                         const ReferenceGuidance& guidance, const SessionOptions& options,
                         std::string sample_id) {
  if (options.max_clicks < 1) throw std::invalid_argument("max_clicks must be at least 1");
  if (gt.height() != image.height || gt.width() != image.width) {
    throw MaskError("run_session: ground truth does not match the image size");
  }
  SessionTrace trace;
  trace.sample_id = std::move(sample_id);
  auto session = model.start(image, guidance);
  SoftMask prev(image.height, image.width);
  trace.clicks.push_back(first_click(gt));
  for (;;) {
    SoftMask pred = session->predict(trace.clicks, prev);
    const double score = maskops::iou(pred.threshold(kPredictionThreshold), gt);
    trace.ious.push_back(score);
    if (score >= options.stop_iou || static_cast<int>(trace.clicks.size()) >= options.max_clicks ||
        score == 1.0) {
      break;
    }
    trace.clicks.push_back(next_click(pred, gt, trace.clicks));
    prev = std::move(pred);
  }
  return trace;
}

double noc(std::span<const SessionTrace> traces, double threshold, int max_clicks) {
  if (traces.empty()) throw std::invalid_argument("noc: no traces");
  double total = 0;
  for (const auto& t : traces) {
    int clicks = max_clicks;
    for (std::size_t k = 0; k < t.ious.size(); ++k) {
      if (t.ious[k] >= threshold) {
        clicks = static_cast<int>(k) + 1;
        break;
      }
    }
    total += clicks;
  }
  return total / static_cast<double>(traces.size());
}

NoCReport aggregate(std::vector<SessionTrace> traces, int max_clicks) {
  if (traces.empty()) throw std::invalid_argument("aggregate: no traces");
  NoCReport r;
  r.noc80 = noc(traces, 0.80, max_clicks);
  r.noc85 = noc(traces, 0.85, max_clicks);
  r.noc90 = noc(traces, 0.90, max_clicks);
  double first = 0;
  for (const auto& t : traces) {
    first += t.ious.front();
    auto reached = [&](double th) {
      for (double v : t.ious)
        if (v >= th) return true;
      return false;
    };
    r.failures80 += reached(0.80) ? 0 : 1;
    r.failures85 += reached(0.85) ? 0 : 1;
    r.failures90 += reached(0.90) ? 0 : 1;
  }
  r.iou_at_1 = 100.0 * first / static_cast<double>(traces.size());
  r.n_samples = static_cast<int>(traces.size());
  r.traces = std::move(traces);
  return r;
}

nlohmann::json NoCReport::to_json(bool include_traces) const {
  nlohmann::json j = {{"noc80", noc80},
                      {"noc85", noc85},
                      {"noc90", noc90},
                      {"iou_at_1", iou_at_1},
                      {"failures", {{"80", failures80}, {"85", failures85}, {"90", failures90}}},
                      {"n_samples", n_samples},
                      {"metadata", metadata}};
  if (include_traces) {
    auto arr = nlohmann::json::array();
    for (const auto& t : traces) {
      auto clicks = nlohmann::json::array();
      for (const auto& c : t.clicks) {
        clicks.push_back({{"row", c.row},
                          {"col", c.col},
                          {"polarity", to_string(c.polarity)},
                          {"order", c.order}});
      }
      arr.push_back({{"sample_id", t.sample_id}, {"ious", t.ious}, {"clicks", clicks}});
    }
    j["traces"] = std::move(arr);
  }
  return j;
}

std::string NoCReport::csv_header() { return "setting,NoC@80,NoC@85,NoC@90,IoU&1"; }

std::string NoCReport::to_csv_row(const std::string& label) const {
  return fmt::format("{},{:.2f},{:.2f},{:.2f},{:.2f}", label, noc80, noc85, noc90, iou_at_1);
}

BitMask degrade_to_polygon(const BitMask& mask, int interval) {
  if (interval <= 1 || !mask.any()) return mask;
  cv::Mat src(mask.height(), mask.width(), CV_8UC1);
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) src.at<std::uint8_t>(r, c) = mask.at(r, c) ? 255 : 0;
  std::vector<std::vector<cv::Point>> contours;
  cv::findContours(src, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
  std::vector<std::vector<cv::Point>> polygons;
  for (const auto& contour : contours) {
    std::vector<cv::Point> poly;
    for (std::size_t i = 0; i < contour.size(); i += static_cast<std::size_t>(interval))
      poly.push_back(contour[i]);
    polygons.push_back(std::move(poly));
  }
  cv::Mat dst = cv::Mat::zeros(mask.height(), mask.width(), CV_8UC1);
  cv::fillPoly(dst, polygons, cv::Scalar(255));
  BitMask out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) out.set(r, c, dst.at<std::uint8_t>(r, c) != 0);
  return out;
}

ReferenceGuidance downscale_reference(const ReferenceGuidance& guidance, double scale) {
  if (scale >= 1.0) return guidance;
  if (scale <= 0.0) throw std::invalid_argument("reference scale must be positive");
  const int h = guidance.image.height, w = guidance.image.width;
  const int nh = std::max(1, static_cast<int>(std::lround(h * scale)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * scale)));
  const int top = (h - nh) / 2, left = (w - nw) / 2;
  const Image small = resize_bilinear(guidance.image, nh, nw);

  ReferenceGuidance out;
  out.image = Image(h, w, 0.5f);
  for (int r = 0; r < nh; ++r)
    for (int c = 0; c < nw; ++c)
      for (int ch = 0; ch < 3; ++ch) out.image.at(top + r, left + c, ch) = small.at(r, c, ch);
  auto shrink = [&](const BitMask& m) {
    if (m.empty()) return m;
    const BitMask s = maskops::resize_nearest(m, nh, nw);
    BitMask placed(h, w);
    for (int r = 0; r < nh; ++r)
      for (int c = 0; c < nw; ++c) placed.set(top + r, left + c, s.at(r, c));
    return placed;
  };
  out.positive = shrink(guidance.positive);
  out.negative = shrink(guidance.negative);
  return out;
}

NoCReport evaluate(const SessionModel& model, std::span<const EvalSample> samples,
                   const EvalConfig& config) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  std::vector<SessionTrace> traces(samples.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const long n = static_cast<long>(samples.size());
#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, config.workers))
  for (long i = 0; i < n; ++i) {
    try {
      const EvalSample& s = samples[static_cast<std::size_t>(i)];
      ReferenceGuidance g = s.guidance(config.regime);
      if (config.polygon_interval > 1) {
        g.positive = degrade_to_polygon(g.positive, config.polygon_interval);
        g.negative = degrade_to_polygon(g.negative, config.polygon_interval);
      }
      g = downscale_reference(g, config.reference_scale);
      traces[static_cast<std::size_t>(i)] =
          run_session(model, s.target->image, s.gt, g, config.session, s.sample_id);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  NoCReport report = aggregate(std::move(traces), config.session.max_clicks);
  report.metadata = {{"regime", to_string(config.regime)},
                     {"click_center", "distance_transform"},
                     {"error_connectivity", 4},
                     {"prediction_threshold", kPredictionThreshold},
                     {"max_clicks", config.session.max_clicks},
                     {"stop_iou", config.session.stop_iou},
                     {"polygon_interval", config.polygon_interval},
                     {"reference_scale", config.reference_scale}};
  return report;
}

void write_report(const std::filesystem::path& path, const NoCReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << report.to_json().dump(2) << '\n';
}

std::vector<SweepPoint> degradation_sweep(const SessionModel& model,
                                          std::span<const EvalSample> samples,
                                          const EvalConfig& base,
                                          std::span<const int> polygon_intervals,
                                          std::span<const double> reference_scales) {
  std::vector<SweepPoint> points;
  for (int interval : polygon_intervals) {
    EvalConfig cfg = base;
    cfg.polygon_interval = interval;
    cfg.reference_scale = 1.0;
    points.push_back({"polygon", static_cast<double>(interval), evaluate(model, samples, cfg)});
  }
  for (double scale : reference_scales) {
    EvalConfig cfg = base;
    cfg.polygon_interval = 0;
    cfg.reference_scale = scale;
    points.push_back({"scale", scale, evaluate(model, samples, cfg)});
  }
  return points;
}

nlohmann::json sweep_curves(std::span<const SweepPoint> points) {
  nlohmann::json j = {{"polygon", nlohmann::json::array()}, {"scale", nlohmann::json::array()}};
  for (const auto& p : points) j[p.axis].push_back({p.level, p.report.iou_at_1});
  return j;
}

}  // namespace refcut
