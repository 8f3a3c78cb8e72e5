#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <json.hpp>

#include "updiff/pipeline.hpp"

namespace httplib {
class Server;
}

namespace updiff {

/// Append-only what-if history. Layout:
///   <root>/<session>/index          one "<entry id>\t<timestamp ms>" line per entry
///   <root>/<session>/<entry id>.json
class SessionStore {
 public:
  SessionStore(std::filesystem::path root, std::size_t retention);

  /// Persists `entry` and returns its id.
  std::string append(const std::string& session, nlohmann::json entry);
  /// Newest first, at most `retention` entries. Throws std::out_of_range for unknown sessions.
  nlohmann::json list(const std::string& session) const;
  bool contains(const std::string& session) const;

  static bool valid_session_id(const std::string& id);

 private:
  std::filesystem::path root_;
  std::size_t retention_;
  mutable std::mutex mutex_;
};

struct ServiceConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path sessions = "sessions";
  std::string host = "127.0.0.1";
  int port = 8080;  ///< 0 picks a free port
  std::size_t retention = 100;
};

struct HttpResult {
  int status = 200;
  nlohmann::json body;
};

/// JSON-over-HTTP front end for a loaded model:
///   POST /predict, GET /health, GET /model-info, GET /sessions/{id}.
/// The listener comes up before the model; /predict answers 503 until it is loaded.
class InferenceService {
 public:
  explicit InferenceService(ServiceConfig config);
  ~InferenceService();
  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  /// Loads config.checkpoint.
  void load();
  /// Installs an already built model with its checkpoint manifest.
  void install(std::shared_ptr<UpDiffModel> model, nlohmann::json manifest);
  bool ready() const { return ready_.load(); }

  HttpResult predict(const std::string& body);
  HttpResult health() const;
  HttpResult model_info() const;
  HttpResult session(const std::string& id) const;

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  void stop();
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();

 private:
  ServiceConfig config_;
  SessionStore sessions_;
  std::shared_ptr<UpDiffModel> model_;
  nlohmann::json manifest_;
  std::atomic<bool> ready_{false};
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace updiff
