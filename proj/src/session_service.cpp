#include "refcut/session_service.hpp"

#include <openssl/evp.h>
#include <openssl/rand.h>

#include <httplib.h>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace refcut {

using nlohmann::json;

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::string clean;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) throw ServiceError(400, "base64 payload has invalid length");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw ServiceError(400, "payload is not valid base64");
  std::size_t size = static_cast<std::size_t>(n);
  if (!clean.empty() && clean.back() == '=') --size;
  if (clean.size() >= 2 && clean[clean.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

namespace {

std::string new_session_id() {
  std::uint8_t raw[16];
  if (RAND_bytes(raw, sizeof raw) != 1) throw ServiceError(500, "cannot generate a session id");
  std::string id;
  for (std::uint8_t b : raw) id += fmt::format("{:02x}", b);
  return id;
}

std::string prompt_kind(const ReferenceGuidance& g) {
  if (g.has_positive() && g.has_negative()) return "both";
  if (g.has_positive()) return "pos";
  if (g.has_negative()) return "neg";
  return "none";
}

}  // namespace

Contours mask_contours(const BitMask& mask, double epsilon) {
  Contours out;
  if (!mask.any()) return out;
  cv::Mat m(mask.height(), mask.width(), CV_8UC1);
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) m.at<std::uint8_t>(r, c) = mask.at(r, c) ? 255 : 0;
  std::vector<std::vector<cv::Point>> contours;
  cv::findContours(m, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_SIMPLE);
  for (const auto& contour : contours) {
    std::vector<cv::Point> simple;
    cv::approxPolyDP(contour, simple, epsilon, true);
    std::vector<std::pair<int, int>> poly;
    for (const auto& p : simple) poly.emplace_back(p.x, p.y);
    out.push_back(std::move(poly));
  }
  return out;
}

SessionStore::SessionStore(std::shared_ptr<const RefCutNet<float>> net, ServiceConfig config)
    : net_(std::move(net)), config_(config), features_(16) {
  if (!net_) throw std::invalid_argument("session store needs a network");
}

std::shared_ptr<SessionStore::Session> SessionStore::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  evict_expired();
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session '" + id + "'");
  it->second->last_used = now();
  return it->second;
}

void SessionStore::evict_expired() {
  const auto t = now();
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (t - it->second->last_used > config_.ttl) {
      spdlog::info("session {} expired", it->first);
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
}

std::size_t SessionStore::size() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

std::string SessionStore::create(const Image& image) {
  if (image.empty()) throw ServiceError(400, "image is empty");
  const std::size_t pixels = static_cast<std::size_t>(image.height) * image.width;
  if (pixels > config_.max_pixels) {
    throw ServiceError(413, fmt::format("image has {} pixels, the limit is {}", pixels,
                                        config_.max_pixels));
  }
  const int s = net_->config().input_size;
  auto session = std::make_shared<Session>();
  session->height = image.height;
  session->width = image.width;
  session->image = resize_bilinear(image, s, s);
  session->prev = SoftMask(s, s);
  session->last_used = now();

  std::lock_guard lock(mutex_);
  evict_expired();
  if (sessions_.size() >= config_.max_sessions) {
    throw ServiceError(503, fmt::format("session limit of {} reached", config_.max_sessions));
  }
  std::string id;
  do id = new_session_id();
  while (sessions_.count(id));
  sessions_[id] = std::move(session);
  return id;
}

void SessionStore::set_reference(const std::string& id, const ReferenceGuidance& guidance,
                                 const std::string& label) {
  try {
    guidance.validate();
  } catch (const std::exception& e) {
    throw ServiceError(400, e.what());
  }
  auto session = find(id);
  const int s = net_->config().input_size;
  LabelState state;
  state.guidance = resize_guidance(guidance, s);
  state.kind = prompt_kind(state.guidance);
  if (state.kind == "none") {
    const auto c = static_cast<std::size_t>(net_->config().embed_dim);
    state.prompts = PromptPair<float>{std::vector<float>(c, 0.0f), std::vector<float>(c, 0.0f)};
  } else {
    const auto feature = features_.get_or_compute(*net_, state.guidance.image);
    state.prompts = generate_prompts(*net_, *feature, state.guidance);
  }
  std::lock_guard lock(session->mutex);
  session->labels[label] = std::move(state);
}

PromptPair<float> SessionStore::prompts(const std::string& id, const std::string& label) {
  auto session = find(id);
  std::lock_guard lock(session->mutex);
  auto it = session->labels.find(label);
  if (it == session->labels.end()) throw ServiceError(404, "no reference for label '" + label + "'");
  return it->second.prompts;
}

BitMask SessionStore::to_original(const Session& s, const SoftMask& pred) const {
  return maskops::resize_nearest(pred.threshold(0.5), s.height, s.width);
}

ClickResult SessionStore::add_click(const std::string& id, int row, int col, Polarity polarity,
                                    const std::optional<std::string>& label) {
  auto session = find(id);
  std::lock_guard lock(session->mutex);
  if (row < 0 || col < 0 || row >= session->height || col >= session->width) {
    throw ServiceError(400, fmt::format("click ({}, {}) is outside the {}x{} image", row, col,
                                        session->height, session->width));
  }
  const std::string active = label.value_or(session->active_label);
  const LabelState* state = nullptr;
  if (auto it = session->labels.find(active); it != session->labels.end()) state = &it->second;
  else if (label) throw ServiceError(404, "no reference for label '" + active + "'");

  const int s = net_->config().input_size;
  Click click;
  click.row = std::min(s - 1, static_cast<int>(static_cast<long>(row) * s / session->height));
  click.col = std::min(s - 1, static_cast<int>(static_cast<long>(col) * s / session->width));
  click.polarity = polarity;
  click.order = static_cast<int>(session->clicks.size()) + 1;

  std::vector<Click> clicks = session->clicks;
  clicks.push_back(click);
  const PromptPair<float> none;
  SoftMask pred = net_->predict(session->image, clicks, session->prev, state ? state->prompts : none);

  session->history.push_back({std::move(session->prev), session->active_label});
  session->clicks = std::move(clicks);
  session->active_label = active;
  session->prev = std::move(pred);

  ClickResult result;
  result.mask = to_original(*session, session->prev);
  result.contours = mask_contours(result.mask);
  result.clicks = static_cast<int>(session->clicks.size());
  result.prompts = state ? state->kind : "none";
  return result;
}

UndoResult SessionStore::undo(const std::string& id) {
  auto session = find(id);
  std::lock_guard lock(session->mutex);
  UndoResult result;
  if (!session->clicks.empty()) {
    session->clicks.pop_back();
    session->prev = std::move(session->history.back().prev);
    session->active_label = session->history.back().label;
    session->history.pop_back();
    result.undone = true;
  }
  result.mask = to_original(*session, session->prev);
  result.clicks = static_cast<int>(session->clicks.size());
  return result;
}

void SessionStore::reset(const std::string& id) {
  auto session = find(id);
  std::lock_guard lock(session->mutex);
  const int s = net_->config().input_size;
  session->clicks.clear();
  session->history.clear();
  session->prev = SoftMask(s, s);
  session->active_label = "default";
}

void SessionStore::remove(const std::string& id) {
  std::lock_guard lock(mutex_);
  if (!sessions_.erase(id)) throw ServiceError(404, "unknown session '" + id + "'");
}

namespace {

json parse_request(const httplib::Request& req) {
  json body;
  try {
    body = json::parse(req.body.empty() ? std::string("{}") : req.body);
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("malformed JSON: ") + e.what());
  }
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  if (!body.contains("api_version") || body["api_version"] != kApiVersion) {
    throw ServiceError(400, fmt::format("api_version {} required", kApiVersion));
  }
  return body;
}

Image decode_image_field(const json& body, const char* field) {
  if (!body.contains(field) || !body[field].is_string())
    throw ServiceError(400, std::string("missing '") + field + "' (base64 PNG)");
  const auto bytes = base64_decode(body[field].get<std::string>());
  try {
    return decode_png(bytes);
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("cannot decode '") + field + "': " + e.what());
  }
}

BitMask decode_mask_field(const json& body, const char* field) {
  if (!body.contains(field) || body[field].is_null()) return BitMask();
  try {
    return maskops::rle_decode(body[field].get<std::string>());
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("invalid '") + field + "' mask: " + e.what());
  }
}

json contours_json(const Contours& contours) {
  json out = json::array();
  for (const auto& poly : contours) {
    json pts = json::array();
    for (const auto& [x, y] : poly) pts.push_back({x, y});
    out.push_back(std::move(pts));
  }
  return out;
}

void reply(httplib::Response& res, int status, json body) {
  body["api_version"] = kApiVersion;
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      reply(res, e.status(), {{"error", e.what()}});
    } catch (const std::exception& e) {
      reply(res, 400, {{"error", e.what()}});
    }
  };
}

}  // namespace

SessionService::SessionService(std::shared_ptr<const RefCutNet<float>> net, ServiceConfig config)
    : store_(std::move(net), config), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

SessionService::~SessionService() { stop(); }

void SessionService::install_routes() {
  auto& srv = *server_;
  srv.Get("/healthz", guarded([this](const httplib::Request&, httplib::Response& res) {
    const auto& cfg = store_.net().config();
    reply(res, 200, {{"status", "ok"},
                     {"sessions", store_.size()},
                     {"input_size", cfg.input_size},
                     {"patch_size", cfg.patch_size}});
  }));
  srv.Post("/session", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const json body = parse_request(req);
    const Image image = decode_image_field(body, "image");
    const std::string id = store_.create(image);
    reply(res, 201, {{"session_id", id}, {"height", image.height}, {"width", image.width}});
  }));
  srv.Post(R"(/session/([^/]+)/reference)",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             const json body = parse_request(req);
             ReferenceGuidance g;
             g.image = decode_image_field(body, "image");
             g.positive = decode_mask_field(body, "positive");
             g.negative = decode_mask_field(body, "negative");
             const std::string label = body.value("label", std::string("default"));
             store_.set_reference(req.matches[1], g, label);
             reply(res, 200, {{"ok", true}, {"label", label}, {"prompts", prompt_kind(g)}});
           }));
  srv.Post(R"(/session/([^/]+)/click)",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             const json body = parse_request(req);
             if (!body.contains("row") || !body.contains("col"))
               throw ServiceError(400, "click requires 'row' and 'col'");
             const Polarity polarity =
                 polarity_from_string(body.value("polarity", std::string("positive")));
             std::optional<std::string> label;
             if (body.contains("label") && !body["label"].is_null())
               label = body["label"].get<std::string>();
             const ClickResult r = store_.add_click(req.matches[1], body["row"].get<int>(),
                                                    body["col"].get<int>(), polarity, label);
             reply(res, 200, {{"mask", maskops::rle_encode(r.mask)},
                              {"contours", contours_json(r.contours)},
                              {"clicks", r.clicks},
                              {"prompts", r.prompts}});
           }));
  srv.Post(R"(/session/([^/]+)/undo)",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             parse_request(req);
             const UndoResult r = store_.undo(req.matches[1]);
             reply(res, 200, {{"undone", r.undone},
                              {"mask", maskops::rle_encode(r.mask)},
                              {"contours", contours_json(mask_contours(r.mask))},
                              {"clicks", r.clicks}});
           }));
  srv.Post(R"(/session/([^/]+)/reset)",
           guarded([this](const httplib::Request& req, httplib::Response& res) {
             parse_request(req);
             store_.reset(req.matches[1]);
             reply(res, 200, {{"ok", true}, {"clicks", 0}});
           }));
  srv.Delete(R"(/session/([^/]+))",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               store_.remove(req.matches[1]);
               reply(res, 200, {{"ok", true}});
             }));
}

bool SessionService::listen(const std::string& host, int port) { return server_->listen(host, port); }

int SessionService::bind_any_port(const std::string& host) { return server_->bind_to_any_port(host); }

bool SessionService::listen_after_bind() { return server_->listen_after_bind(); }

void SessionService::stop() {
  if (server_) server_->stop();
}

}  // namespace refcut
