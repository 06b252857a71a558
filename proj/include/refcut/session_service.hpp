#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "refcut/model.hpp"
#include "refcut/reference_prompt.hpp"

namespace httplib {
class Server;
}

namespace refcut {

inline constexpr int kApiVersion = 1;

/// Carries the HTTP status the error maps to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

struct ServiceConfig {
  std::size_t max_sessions = 64;
  std::chrono::seconds ttl{1800};
  std::size_t max_pixels = 4096 * 4096;
};

/// Point lists (x = column, y = row) of the simplified outer contours.
using Contours = std::vector<std::vector<std::pair<int, int>>>;

struct ClickResult {
  BitMask mask;  // original image resolution
  Contours contours;
  int clicks = 0;
  std::string prompts;  // none / pos / neg / both
};

struct UndoResult {
  bool undone = false;
  BitMask mask;
  int clicks = 0;
};

/// In-memory interactive sessions over one shared, read-only network.
/// Calls for different sessions may run concurrently; calls for one session
/// are serialised by its own mutex.
class SessionStore {
 public:
  using Clock = std::chrono::steady_clock;

  SessionStore(std::shared_ptr<const RefCutNet<float>> net, ServiceConfig config);

  std::string create(const Image& image);
  void set_reference(const std::string& id, const ReferenceGuidance& guidance,
                     const std::string& label = "default");
  ClickResult add_click(const std::string& id, int row, int col, Polarity polarity,
                        const std::optional<std::string>& label = std::nullopt);
  UndoResult undo(const std::string& id);
  void reset(const std::string& id);
  void remove(const std::string& id);

  /// Prompts currently cached for `label` (throws if none were set).
  PromptPair<float> prompts(const std::string& id, const std::string& label = "default");
  std::size_t size() const;
  const RefCutNet<float>& net() const { return *net_; }

  /// Test hook: advances the clock used for TTL eviction.
  void advance_clock_for_testing(std::chrono::seconds dt) { skew_ += dt; }

 private:
  struct LabelState {
    ReferenceGuidance guidance;
    PromptPair<float> prompts;
    std::string kind;
  };
  struct Step {
    SoftMask prev;
    std::string label;
  };
  struct Session {
    std::mutex mutex;
    int height = 0;
    int width = 0;
    Image image;  // model resolution
    std::vector<Click> clicks;  // model resolution
    SoftMask prev;
    std::map<std::string, LabelState> labels;
    std::string active_label = "default";
    std::vector<Step> history;
    Clock::time_point last_used;
  };

  std::shared_ptr<Session> find(const std::string& id);
  void evict_expired();
  Clock::time_point now() const { return Clock::now() + skew_; }
  BitMask to_original(const Session& s, const SoftMask& pred) const;

  std::shared_ptr<const RefCutNet<float>> net_;
  ServiceConfig config_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  ReferenceFeatureCache<float> features_;
  Clock::duration skew_{0};
};

Contours mask_contours(const BitMask& mask, double epsilon = 1.0);

/// HTTP/JSON front end for a SessionStore.
class SessionService {
 public:
  SessionService(std::shared_ptr<const RefCutNet<float>> net, ServiceConfig config = {});
  ~SessionService();

  /// Binds and serves on the calling thread until stop().
  bool listen(const std::string& host, int port);
  /// Binds to a free port and returns it; serve with listen_after_bind().
  int bind_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();

  SessionStore& store() { return store_; }

 private:
  void install_routes();

  SessionStore store_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace refcut
