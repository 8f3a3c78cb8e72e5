#include <filesystem>
#include <future>

#include <gtest/gtest.h>
#include <httplib.h>

#include "toy_model.hpp"
#include "updiff/service.hpp"

using namespace updiff;
using namespace updiff::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("updiff_svc_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { checkpoint_ = write_toy_checkpoint(scratch_dir("ckpt")); }
  static void TearDownTestSuite() { fs::remove_all(checkpoint_); }

  void SetUp() override {
    sessions_ = scratch_dir("sessions_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    ServiceConfig cfg;
    cfg.checkpoint = checkpoint_;
    cfg.sessions = sessions_;
    cfg.port = 0;
    cfg.retention = 5;
    service_ = std::make_unique<InferenceService>(cfg);
  }
  void TearDown() override {
    service_.reset();
    fs::remove_all(sessions_);
  }

  nlohmann::json request(int size = 64, uint64_t seed = 5, const std::string& session = "") const {
    nlohmann::json j{{"pre_image", png_base64(solid_rgb(size, 120))},
                     {"change_map", png_base64(square_mask(size, 8, 24))},
                     {"seed", seed}};
    if (!session.empty()) j["session"] = session;
    return j;
  }

  static inline fs::path checkpoint_;
  fs::path sessions_;
  std::unique_ptr<InferenceService> service_;
};

}  // namespace

TEST_F(ServiceTest, HealthReportsLoadingThenOk) {
  const int port = service_->start();
  httplib::Client client("127.0.0.1", port);
  auto before = client.Get("/health");
  ASSERT_TRUE(before);
  EXPECT_EQ(before->status, 200);
  EXPECT_EQ(nlohmann::json::parse(before->body), (nlohmann::json{{"status", "loading"}}));
  auto early = client.Post("/predict", request().dump(), "application/json");
  ASSERT_TRUE(early);
  EXPECT_EQ(early->status, 503);
  EXPECT_EQ(client.Get("/model-info")->status, 503);

  service_->load();
  EXPECT_EQ(nlohmann::json::parse(client.Get("/health")->body)["status"], "ok");
  service_->stop();
}

TEST_F(ServiceTest, ValidPredictOverHttp) {
  service_->load();
  const int port = service_->start();
  httplib::Client client("127.0.0.1", port);
  auto res = client.Post("/predict", request().dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  auto body = nlohmann::json::parse(res->body);
  auto post = decode_png(base64_decode(body["post_image"].get<std::string>()));
  EXPECT_EQ(post.width, 64);
  EXPECT_EQ(post.height, 64);
  EXPECT_EQ(post.channels, 3);
  EXPECT_EQ(body["seed_used"], 5);
  EXPECT_GE(body["latency_ms"].get<double>(), 0.0);
  EXPECT_FALSE(body["session_entry_id"].get<std::string>().empty());
  service_->stop();
}

TEST_F(ServiceTest, GrayMaskIsRejected) {
  service_->load();
  auto req = request();
  auto mask = square_mask(64, 8, 24);
  mask.pixels[100] = 77;
  req["change_map"] = png_base64(mask);
  auto r = service_->predict(req.dump());
  EXPECT_EQ(r.status, 400);
  EXPECT_TRUE(r.body.contains("error"));
}

TEST_F(ServiceTest, IndivisibleSizeIsUnprocessable) {
  service_->load();
  auto r = service_->predict(request(60).dump());
  EXPECT_EQ(r.status, 422);
  EXPECT_NE(r.body["error"].get<std::string>().find("divisible by 8"), std::string::npos) << r.body.dump();
}

TEST_F(ServiceTest, MalformedRequests) {
  service_->load();
  EXPECT_EQ(service_->predict("{not json").status, 400);
  EXPECT_EQ(service_->predict("[1,2]").status, 400);
  auto req = request();
  req.erase("change_map");
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
  req = request();
  req["pre_image"] = "!!!";
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
  req = request();
  req["change_map"] = png_base64(square_mask(32, 0, 8));
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
  EXPECT_EQ(service_->predict(request(32).dump()).status, 400);
  req = request();
  req["seed"] = -3;
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
  req = request();
  req["sampler_variant"] = "ddim";
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
  req = request();
  req["session"] = "../etc";
  EXPECT_EQ(service_->predict(req.dump()).status, 400);
}

TEST_F(ServiceTest, SeededPredictIsByteIdentical) {
  service_->load();
  auto a = service_->predict(request(64, 9).dump());
  auto b = service_->predict(request(64, 9).dump());
  auto c = service_->predict(request(64, 10).dump());
  ASSERT_EQ(a.status, 200);
  EXPECT_EQ(a.body["post_image"], b.body["post_image"]);
  EXPECT_NE(a.body["post_image"], c.body["post_image"]);
  auto sqrt_variant = request(64, 9);
  sqrt_variant["sampler_variant"] = "sqrt_beta";
  EXPECT_NE(service_->predict(sqrt_variant.dump()).body["post_image"], a.body["post_image"]);
}

TEST_F(ServiceTest, ModelInfoMirrorsManifest) {
  service_->load();
  const int port = service_->start();
  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/model-info");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  auto info = nlohmann::json::parse(res->body);
  auto manifest = load_manifest(checkpoint_);
  EXPECT_EQ(info["checkpoint_id"], manifest["id"]);
  EXPECT_EQ(info["T"], manifest["schedule"]["T"]);
  EXPECT_EQ(info["resolution"], manifest["resolution"]);
  EXPECT_EQ(info["f"], manifest["f"]);
  EXPECT_EQ(info["s"], manifest["s"]);
  EXPECT_EQ(info["T"], 8);
  service_->stop();
}

TEST_F(ServiceTest, SessionsAreNewestFirstAndRoundTrip) {
  service_->load();
  const int port = service_->start();
  httplib::Client client("127.0.0.1", port);
  std::vector<nlohmann::json> sent, received;
  for (uint64_t seed : {1, 2, 3}) {
    sent.push_back(request(64, seed, "alpha"));
    auto res = client.Post("/predict", sent.back().dump(), "application/json");
    ASSERT_EQ(res->status, 200);
    received.push_back(nlohmann::json::parse(res->body));
  }
  auto listing = client.Get("/sessions/alpha");
  ASSERT_EQ(listing->status, 200);
  auto entries = nlohmann::json::parse(listing->body)["entries"];
  ASSERT_EQ(entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& e = entries[i];
    const auto& req = sent[2 - i];
    const auto& resp = received[2 - i];
    EXPECT_EQ(e["entry_id"], resp["session_entry_id"]);
    EXPECT_EQ(e["request"]["pre_image"], req["pre_image"]);
    EXPECT_EQ(e["request"]["change_map"], req["change_map"]);
    EXPECT_EQ(e["request"]["seed"], req["seed"]);
    EXPECT_EQ(e["response"]["post_image"], resp["post_image"]);
  }
  EXPECT_GE(entries[0]["timestamp_ms"].get<int64_t>(), entries[2]["timestamp_ms"].get<int64_t>());
  EXPECT_EQ(client.Get("/sessions/nobody")->status, 404);
  service_->stop();
}

TEST_F(ServiceTest, SessionsSurviveRestartAndRespectRetention) {
  {
    SessionStore store(sessions_, 2);
    for (int i = 0; i < 4; ++i) store.append("s", {{"n", i}});
  }
  SessionStore reopened(sessions_, 2);
  auto list = reopened.list("s");
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[0]["n"], 3);
  EXPECT_EQ(list[1]["n"], 2);
  EXPECT_EQ(list[0]["entry_id"], "00000004");
  EXPECT_THROW(reopened.list("missing"), std::out_of_range);
  EXPECT_THROW(reopened.append("bad/id", {}), std::invalid_argument);
}

TEST_F(ServiceTest, ConcurrentRequestsMatchSerialExecution) {
  service_->load();
  std::vector<std::string> serial;
  for (uint64_t seed = 20; seed < 24; ++seed)
    serial.push_back(service_->predict(request(64, seed, "serial").dump()).body["post_image"]);
  const int port = service_->start();
  std::vector<std::future<std::string>> futures;
  for (uint64_t seed = 20; seed < 24; ++seed)
    futures.push_back(std::async(std::launch::async, [&, seed] {
      httplib::Client client("127.0.0.1", port);
      client.set_read_timeout(120);
      auto res = client.Post("/predict", request(64, seed, "parallel").dump(), "application/json");
      if (!res || res->status != 200) return std::string("failed");
      return nlohmann::json::parse(res->body)["post_image"].get<std::string>();
    }));
  for (std::size_t i = 0; i < futures.size(); ++i) EXPECT_EQ(futures[i].get(), serial[i]) << i;
  EXPECT_EQ(service_->session("parallel").body["entries"].size(), 4u);
  service_->stop();
}
