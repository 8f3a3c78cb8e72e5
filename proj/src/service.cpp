#include "updiff/service.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <httplib.h>

#include "updiff/image_io.hpp"

namespace updiff {

namespace fs = std::filesystem;

namespace {

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

HttpResult error(int status, const std::string& message) { return {status, {{"error", message}}}; }

struct BadRequest : std::runtime_error {
  int status;
  BadRequest(int s, const std::string& m) : std::runtime_error(m), status(s) {}
};

Image8 decode_field(const nlohmann::json& req, const char* field) {
  if (!req.contains(field) || !req[field].is_string()) throw BadRequest(400, std::string("missing string field '") + field + "'");
  try {
    return decode_png(base64_decode(req[field].get<std::string>()));
  } catch (const std::exception& e) {
    throw BadRequest(400, std::string(field) + ": " + e.what());
  }
}

}  // namespace

// --------------------------------------------------------------- sessions ----

SessionStore::SessionStore(fs::path root, std::size_t retention) : root_(std::move(root)), retention_(retention) {}

bool SessionStore::valid_session_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

std::string SessionStore::append(const std::string& session, nlohmann::json entry) {
  if (!valid_session_id(session)) throw std::invalid_argument("invalid session id '" + session + "'");
  std::lock_guard lock(mutex_);
  const auto dir = root_ / session;
  fs::create_directories(dir);
  std::size_t count = 0;
  {
    std::ifstream index(dir / "index");
    for (std::string line; std::getline(index, line);) count += !line.empty();
  }
  const auto ts = entry.value("timestamp_ms", now_ms());
  char id[32];
  std::snprintf(id, sizeof(id), "%08zu", count + 1);
  entry["entry_id"] = id;
  {
    std::ofstream out(dir / (std::string(id) + ".json"), std::ios::trunc);
    out << entry.dump() << "\n";
    if (!out) throw std::runtime_error("cannot write session entry in " + dir.string());
  }
  std::ofstream index(dir / "index", std::ios::app);
  index << id << "\t" << ts << "\n";
  if (!index) throw std::runtime_error("cannot append to session index in " + dir.string());
  return id;
}

bool SessionStore::contains(const std::string& session) const {
  return valid_session_id(session) && fs::exists(root_ / session / "index");
}

nlohmann::json SessionStore::list(const std::string& session) const {
  if (!contains(session)) throw std::out_of_range("unknown session '" + session + "'");
  std::lock_guard lock(mutex_);
  std::vector<std::string> ids;
  std::ifstream index(root_ / session / "index");
  for (std::string line; std::getline(index, line);)
    if (!line.empty()) ids.push_back(line.substr(0, line.find('\t')));
  nlohmann::json out = nlohmann::json::array();
  for (auto it = ids.rbegin(); it != ids.rend() && out.size() < retention_; ++it) {
    std::ifstream in(root_ / session / (*it + ".json"));
    out.push_back(nlohmann::json::parse(in));
  }
  return out;
}

// ---------------------------------------------------------------- service ----

InferenceService::InferenceService(ServiceConfig config)
    : config_(std::move(config)), sessions_(config_.sessions, config_.retention) {}

InferenceService::~InferenceService() { stop(); }

void InferenceService::load() {
  auto model = std::make_shared<UpDiffModel>(load_model(config_.checkpoint));
  install(std::move(model), load_manifest(config_.checkpoint));
}

void InferenceService::install(std::shared_ptr<UpDiffModel> model, nlohmann::json manifest) {
  model->denoiser->eval();
  model->autoencoder->eval();
  model_ = std::move(model);
  manifest_ = std::move(manifest);
  ready_.store(true);
}

HttpResult InferenceService::health() const {
  return {200, {{"status", ready() ? "ok" : "loading"}}};
}

HttpResult InferenceService::model_info() const {
  if (!ready()) return error(503, "model not loaded");
  return {200,
          {{"checkpoint_id", manifest_.at("id")},
           {"T", manifest_.at("schedule").at("T")},
           {"resolution", manifest_.at("resolution")},
           {"f", manifest_.at("f")},
           {"s", manifest_.at("s")}}};
}

HttpResult InferenceService::session(const std::string& id) const {
  try {
    return {200, {{"session", id}, {"entries", sessions_.list(id)}}};
  } catch (const std::out_of_range& e) {
    return error(404, e.what());
  }
}

HttpResult InferenceService::predict(const std::string& body) {
  if (!ready()) return error(503, "model not loaded");
  const auto start = std::chrono::steady_clock::now();
  try {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const std::exception& e) {
      throw BadRequest(400, std::string("request body is not JSON: ") + e.what());
    }
    if (!req.is_object()) throw BadRequest(400, "request body must be a JSON object");

    const auto pre = decode_field(req, "pre_image");
    const auto map = decode_field(req, "change_map");
    if (pre.width != map.width || pre.height != map.height)
      throw BadRequest(400, "pre_image is " + std::to_string(pre.width) + "x" + std::to_string(pre.height) +
                                " but change_map is " + std::to_string(map.width) + "x" + std::to_string(map.height));

    const auto& cfg = model_->config;
    const int64_t unet_factor = int64_t{1} << (cfg.unet.channels.size() - 1);
    const int64_t divisor = std::lcm(cfg.autoencoder.downscale * unet_factor, cfg.layout_stride);
    if (pre.width % divisor != 0 || pre.height % divisor != 0)
      throw BadRequest(422, "image dimensions " + std::to_string(pre.width) + "x" + std::to_string(pre.height) +
                                " must be divisible by " + std::to_string(divisor) + " (autoencoder factor " +
                                std::to_string(cfg.autoencoder.downscale) + ", layout stride " +
                                std::to_string(cfg.layout_stride) + ")");
    if (pre.width != cfg.resolution || pre.height != cfg.resolution)
      throw BadRequest(400, "this model serves " + std::to_string(cfg.resolution) + "x" +
                                std::to_string(cfg.resolution) + " images");

    torch::Tensor mask;
    try {
      mask = image_to_mask(map);
    } catch (const std::exception& e) {
      throw BadRequest(400, e.what());
    }

    uint64_t seed;
    if (req.contains("seed") && !req["seed"].is_null()) {
      if (!req["seed"].is_number_integer() || req["seed"].get<int64_t>() < 0)
        throw BadRequest(400, "seed must be a non-negative integer");
      seed = req["seed"].get<uint64_t>();
    } else {
      seed = std::random_device{}() & 0x7fffffffu;
    }
    SamplerVariant variant = SamplerVariant::kBeta;
    if (req.contains("sampler_variant") && !req["sampler_variant"].is_null()) {
      try {
        variant = sampler_variant_from_string(req["sampler_variant"].get<std::string>());
      } catch (const std::exception& e) {
        throw BadRequest(400, std::string("sampler_variant: ") + e.what());
      }
    }
    const std::string session = req.value("session", std::string("default"));
    if (!SessionStore::valid_session_id(session))
      throw BadRequest(400, "session id must be 1-64 characters of [A-Za-z0-9_-]");

    auto post = sample(*model_, image_to_tensor(pre), mask, seed, variant);
    const auto png = encode_png(tensor_to_image(post));
    const double latency =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

    nlohmann::json response{{"post_image", base64_encode(png)}, {"latency_ms", latency}, {"seed_used", seed}};
    nlohmann::json stored_request{{"pre_image", req["pre_image"]}, {"change_map", req["change_map"]},
                                  {"seed", seed}, {"sampler_variant", to_string(variant)}};
    response["session_entry_id"] = sessions_.append(
        session, {{"timestamp_ms", now_ms()}, {"request", stored_request}, {"response", response}});
    return {200, response};
  } catch (const BadRequest& e) {
    return error(e.status, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

int InferenceService::start() {
  server_ = std::make_unique<httplib::Server>();
  auto reply = [](httplib::Response& res, const HttpResult& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server_->Post("/predict", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, predict(req.body));
  });
  server_->Get("/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  server_->Get("/model-info",
               [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, model_info()); });
  server_->Get(R"(/sessions/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, session(req.matches[1]));
  });
  const int port = config_.port == 0 ? server_->bind_to_any_port(config_.host)
                                     : (server_->bind_to_port(config_.host, config_.port) ? config_.port : -1);
  if (port < 0) throw std::runtime_error("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  return port;
}

void InferenceService::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void InferenceService::wait() {
  if (thread_.joinable()) thread_.join();
}

}  // namespace updiff
