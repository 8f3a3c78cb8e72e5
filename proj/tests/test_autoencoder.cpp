#include <cmath>

#include <gtest/gtest.h>

#include "updiff/autoencoder.hpp"
#include "updiff/data.hpp"

using namespace updiff;

namespace {

AutoencoderConfig small_config() {
  AutoencoderConfig c;
  c.base_channels = 8;
  c.max_channels = 16;
  return c;
}

torch::Tensor synthetic_images(int64_t n, int64_t res, uint64_t seed) {
  std::vector<torch::Tensor> v;
  for (auto& t : generate_synthetic(n, res, seed)) {
    v.push_back(t.pre);
    v.push_back(t.post);
  }
  return torch::stack(v);
}

}  // namespace

TEST(Autoencoder, ShapeArithmetic) {
  Autoencoder ae(AutoencoderConfig{});
  auto x = torch::rand({2, 3, 64, 64}) * 2 - 1;
  auto z = ae->encode(x);
  EXPECT_EQ(z.sizes(), (std::vector<int64_t>{2, 4, 16, 16}));
  EXPECT_EQ(ae->decode(z).sizes(), x.sizes());
  auto lat = ae->encode_latent(x[0]);
  EXPECT_EQ(lat.timestep, 0);
  EXPECT_EQ(lat.data.sizes(), (std::vector<int64_t>{4, 16, 16}));
  EXPECT_EQ(ae->decode_latent(lat).sizes(), (std::vector<int64_t>{3, 64, 64}));
}

TEST(Autoencoder, RoundTripShapeForDivisibleSizes) {
  Autoencoder ae(small_config());
  for (auto [h, w] : {std::pair{4, 4}, {8, 12}, {32, 20}}) {
    auto x = torch::zeros({1, 3, h, w});
    EXPECT_EQ(ae->forward(x).sizes(), x.sizes());
  }
}

TEST(Autoencoder, DeterministicEncode) {
  Autoencoder ae(small_config());
  auto x = torch::rand({2, 3, 16, 16});
  EXPECT_TRUE(torch::equal(ae->encode(x), ae->encode(x)));
}

TEST(Autoencoder, DecodeRange) {
  Autoencoder ae(small_config());
  auto out = ae->decode(torch::randn({2, 4, 4, 4}) * 1000);
  EXPECT_LE(out.abs().max().item<float>(), 1.0f);
}

TEST(Autoencoder, RejectsIndivisibleOrWrongShapes) {
  Autoencoder ae(small_config());
  EXPECT_THROW(ae->encode(torch::zeros({1, 3, 18, 16})), std::invalid_argument);
  EXPECT_THROW(ae->encode(torch::zeros({1, 1, 16, 16})), std::invalid_argument);
  EXPECT_THROW(ae->decode(torch::zeros({1, 3, 4, 4})), std::invalid_argument);
}

TEST(Autoencoder, LatentScale) {
  Autoencoder ae(small_config());
  auto x = torch::rand({1, 3, 8, 8});
  ae->set_latent_scale(2.5);
  EXPECT_TRUE(torch::allclose(ae->encode(x), ae->encode_raw(x) * 2.5));
  EXPECT_THROW(ae->set_latent_scale(0.0), std::invalid_argument);
  EXPECT_THROW(ae->set_latent_scale(std::nan("")), std::invalid_argument);
  auto buffers = ae->named_buffers();
  EXPECT_TRUE(buffers.contains("latent_scale"));
}

TEST(Psnr, ClosedForm) {
  auto a = torch::zeros({1, 3, 4, 4});
  auto b = torch::full({1, 3, 4, 4}, 0.2);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(4.0 / 0.04), 1e-5);
}

TEST(TrainAutoencoder, MemorizesOneImage) {
  torch::manual_seed(1);
  auto img = synthetic_images(1, 16, 3).slice(0, 1, 2);
  Autoencoder ae(small_config());
  AutoencoderTrainConfig cfg;
  cfg.steps = 1200;
  cfg.batch_size = 1;
  cfg.warmup_steps = 20;
  cfg.learning_rate = 3e-3;
  cfg.validation_every = 0;
  auto result = train_autoencoder(ae, img, img, cfg);
  EXPECT_LT(result.final_validation_loss, 2e-3);
  EXPECT_LT(result.final_validation_loss, 0.05 * result.initial_validation_loss);
}

TEST(TrainAutoencoder, LossHalvesAndCurveDecreases) {
  torch::manual_seed(2);
  auto train = synthetic_images(32, 16, 5);
  auto val = synthetic_images(8, 16, 6);
  Autoencoder ae(small_config());
  AutoencoderTrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 8;
  cfg.warmup_steps = 20;
  cfg.learning_rate = 2e-3;
  cfg.validation_every = 100;
  cfg.seed = 7;
  auto result = train_autoencoder(ae, train, val, cfg);
  EXPECT_EQ(result.steps_run, 300);
  EXPECT_LE(result.final_validation_loss, 0.5 * result.initial_validation_loss);
  std::vector<double> windows(3, 0.0);
  for (const auto& e : result.log) {
    ASSERT_TRUE(std::isfinite(e.loss));
    windows[static_cast<std::size_t>((e.step - 1) / 100)] += e.loss / 100.0;
  }
  EXPECT_GE(windows[0], windows[1]);
  EXPECT_GE(windows[1], windows[2]);

  torch::NoGradGuard guard;
  auto raw = ae->encode(train);
  auto per_channel = raw.transpose(0, 1).flatten(1).std(1);
  EXPECT_GE(per_channel.min().item<double>(), 0.1);
  EXPECT_LE(per_channel.max().item<double>(), 10.0);
}

TEST(TrainAutoencoder, Errors) {
  Autoencoder ae(small_config());
  AutoencoderTrainConfig cfg;
  cfg.steps = 5;
  EXPECT_THROW(train_autoencoder(ae, torch::zeros({0, 3, 8, 8}), torch::zeros({1, 3, 8, 8}), cfg),
               std::invalid_argument);
  cfg.learning_rate = 1e30;
  cfg.warmup_steps = 0;
  auto x = torch::rand({4, 3, 8, 8});
  EXPECT_THROW(train_autoencoder(ae, x, x, cfg), std::runtime_error);
}
