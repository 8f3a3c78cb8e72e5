#include <cmath>

#include <gtest/gtest.h>

#include "updiff/schedule.hpp"

using namespace updiff;

namespace {

// Independent cumulative products in long double.
std::vector<long double> cumulative_alpha_bar(const std::vector<double>& betas) {
  std::vector<long double> out;
  long double acc = 1.0L;
  for (double b : betas) {
    acc *= 1.0L - static_cast<long double>(b);
    out.push_back(acc);
  }
  return out;
}

torch::Tensor f64(std::vector<double> v) { return torch::tensor(v, torch::kFloat64); }

}  // namespace

TEST(LinearSchedule, FourStepTable) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  const double betas[] = {0.1, 0.2, 0.3, 0.4};
  const double alphas[] = {0.9, 0.8, 0.7, 0.6};
  const double bars[] = {0.9, 0.72, 0.504, 0.3024};
  for (int t = 1; t <= 4; ++t) {
    EXPECT_NEAR(s.beta(t), betas[t - 1], 1e-12);
    EXPECT_NEAR(s.alpha(t), alphas[t - 1], 1e-12);
    EXPECT_NEAR(s.alpha_bar(t), bars[t - 1], 1e-12);
  }
}

TEST(LinearSchedule, SingleStep) {
  auto s = make_linear_schedule(1, 0.02, 0.02);
  EXPECT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.02);
  EXPECT_NEAR(s.alpha_bar(1), 0.98, 1e-15);
}

TEST(LinearSchedule, ThousandStepTail) {
  auto s = make_linear_schedule(1000, 1e-4, 0.02);
  const auto oracle = cumulative_alpha_bar(s.betas());
  EXPECT_NEAR(s.alpha_bar(1000), static_cast<double>(oracle.back()), 1e-15);
  EXPECT_NEAR(s.alpha_bar(1000), 4e-5, 0.2 * 4e-5);
}

TEST(LinearSchedule, Invariants) {
  for (int T : {1, 7, 50, 200, 1000}) {
    auto s = T == 1 ? make_linear_schedule(1, 0.01, 0.01) : make_scaled_linear_schedule(T);
    const auto oracle = cumulative_alpha_bar(s.betas());
    for (int t = 1; t <= T; ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_EQ(s.alpha(t), 1.0 - s.beta(t));
      EXPECT_NEAR(s.alpha_bar(t), static_cast<double>(oracle[t - 1]), 1e-14);
      if (t > 1) {
        EXPECT_GE(s.beta(t), s.beta(t - 1));
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        EXPECT_NEAR(s.alpha_bar(t) / s.alpha_bar(t - 1), s.alpha(t), 1e-12 * s.alpha(t));
      }
    }
    EXPECT_EQ(s.alpha_bar(1), s.alpha(1));
  }
}

TEST(LinearSchedule, ScaledEndpoints) {
  auto s = make_scaled_linear_schedule(200);
  EXPECT_NEAR(s.beta(1), 5e-4, 1e-15);
  EXPECT_NEAR(s.beta(200), 0.1, 1e-15);
  EXPECT_LT(s.alpha_bar(200), 1e-3);
}

TEST(LinearSchedule, RejectsBadArguments) {
  EXPECT_THROW(make_linear_schedule(0, 0.1, 0.2), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(4, 0.0, 0.2), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(4, 0.1, 1.0), std::invalid_argument);
  EXPECT_THROW(make_linear_schedule(4, 0.3, 0.2), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule({0.2, 0.1}), std::invalid_argument);
  auto s = make_linear_schedule(4, 0.1, 0.4);
  EXPECT_THROW(s.beta(0), std::out_of_range);
  EXPECT_THROW(s.alpha_bar(5), std::out_of_range);
}

TEST(ForwardSample, ZeroNoiseAndZeroSignal) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  auto z0 = torch::randn({4, 3, 3}, torch::kFloat64);
  auto eps = torch::randn({4, 3, 3}, torch::kFloat64);
  for (int t = 1; t <= 4; ++t) {
    auto a = forward_sample(s, Latent{z0, 0}, t, torch::zeros_like(z0));
    EXPECT_EQ(a.timestep, t);
    EXPECT_TRUE(torch::allclose(a.data, std::sqrt(s.alpha_bar(t)) * z0, 0, 1e-15));
    auto b = forward_sample(s, Latent{torch::zeros_like(z0), 0}, t, eps);
    EXPECT_TRUE(torch::allclose(b.data, std::sqrt(1 - s.alpha_bar(t)) * eps, 0, 1e-15));
  }
}

TEST(ForwardSample, ScalarExample) {
  // alpha_bar_1 = 0.64 -> 0.8 * 2.0 + 0.6 * 1.0
  NoiseSchedule s({0.36});
  auto z = forward_sample(s, Latent{f64({2.0}), 0}, 1, f64({1.0}));
  EXPECT_NEAR(z.data.item<double>(), 2.2, 1e-12);
}

TEST(ForwardSample, Affine) {
  auto s = make_scaled_linear_schedule(50);
  auto z = torch::randn({2, 4, 4}, torch::kFloat64), y = torch::randn({2, 4, 4}, torch::kFloat64);
  auto eps = torch::randn({2, 4, 4}, torch::kFloat64);
  const double a = 0.7, b = -1.3;
  const int t = 17;
  auto lhs = forward_sample(s, Latent{a * z + b * y, 0}, t, eps).data;
  auto zero = torch::zeros_like(z);
  auto rhs = a * forward_sample(s, Latent{z, 0}, t, zero).data + b * forward_sample(s, Latent{y, 0}, t, zero).data +
             std::sqrt(1 - s.alpha_bar(t)) * eps;
  EXPECT_TRUE(torch::allclose(lhs, rhs, 0, 1e-12));
}

TEST(ForwardSample, EmpiricalVariance) {
  auto s = make_scaled_linear_schedule(50);
  torch::manual_seed(3);
  const int t = 10;
  auto eps = torch::randn({20000}, torch::kFloat64);
  auto z = forward_sample(s, Latent{torch::zeros({20000}, torch::kFloat64), 0}, t, eps).data;
  EXPECT_NEAR(z.var().item<double>(), 1 - s.alpha_bar(t), 0.05 * (1 - s.alpha_bar(t)));
}

TEST(ForwardSample, BatchedMatchesScalar) {
  auto s = make_scaled_linear_schedule(20);
  auto z0 = torch::randn({3, 2, 2, 2}, torch::kFloat64), eps = torch::randn({3, 2, 2, 2}, torch::kFloat64);
  auto t = torch::tensor({1, 9, 20}, torch::kLong);
  auto batched = forward_sample(s, z0, t, eps);
  for (int i = 0; i < 3; ++i) {
    auto single = forward_sample(s, Latent{z0[i], 0}, t[i].item<int>(), eps[i]).data;
    EXPECT_TRUE(torch::equal(batched[i], single));
  }
}

TEST(ForwardSample, Errors) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  auto z = torch::zeros({2, 2});
  EXPECT_THROW(forward_sample(s, Latent{z, 0}, 0, z), std::out_of_range);
  EXPECT_THROW(forward_sample(s, Latent{z, 0}, 5, z), std::out_of_range);
  EXPECT_THROW(forward_sample(s, Latent{z, 0}, 1, torch::zeros({3})), std::invalid_argument);
}

TEST(ReverseStep, RecoversPreviousCoefficient) {
  auto s = make_scaled_linear_schedule(50);
  auto z0 = torch::randn({4, 5, 5}, torch::kFloat64);
  auto zero = torch::zeros_like(z0);
  for (int t = 2; t <= 50; ++t) {
    auto z_t = forward_sample(s, Latent{z0, 0}, t, zero);
    auto prev = reverse_step(s, z_t, t, zero, zero);
    auto expect = forward_sample(s, Latent{z0, 0}, t - 1, zero).data;
    EXPECT_EQ(prev.timestep, t - 1);
    const double rel = ((prev.data - expect).abs().max() / expect.abs().max()).item<double>();
    EXPECT_LE(rel, 1e-9) << "t=" << t;
  }
}

TEST(ReverseStep, ScalarExample) {
  // Ten steps with alpha^10 = 0.9 / 0.99 followed by alpha_11 = 0.99 give alpha_bar_11 = 0.9.
  std::vector<double> betas(10, 1.0 - std::pow(0.9 / 0.99, 0.1));
  betas.push_back(0.01);
  NoiseSchedule s(betas);
  ASSERT_NEAR(s.alpha_bar(11), 0.9, 1e-12);
  auto out = reverse_step(s, Latent{f64({1.0}), 11}, 11, f64({0.5}), f64({0.0}));
  const double oracle = (1.0 - 0.01 / std::sqrt(0.1) * 0.5) / std::sqrt(0.99);
  EXPECT_NEAR(out.data.item<double>(), oracle, 1e-12);
  EXPECT_NEAR(out.data.item<double>(), 0.98914, 1e-4);
}

TEST(ReverseStep, NoiseCoefficientVariants) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  auto n = f64({1.5, -2.0});
  auto zero = torch::zeros_like(n);
  for (int t = 2; t <= 4; ++t) {
    auto as_printed = reverse_step(s, Latent{zero, t}, t, zero, n, SamplerVariant::kBeta).data;
    EXPECT_TRUE(torch::allclose(as_printed, s.beta(t) * n, 0, 1e-15));
    auto canonical = reverse_step(s, Latent{zero, t}, t, zero, n, SamplerVariant::kSqrtBeta).data;
    EXPECT_TRUE(torch::allclose(canonical, std::sqrt(s.beta(t)) * n, 0, 1e-15));
  }
}

TEST(ReverseStep, LastStepIgnoresNoise) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  auto z = f64({0.3, 0.4});
  auto a = reverse_step(s, Latent{z, 1}, 1, z, f64({5.0, 5.0})).data;
  auto b = reverse_step(s, Latent{z, 1}, 1, z, torch::zeros_like(z)).data;
  EXPECT_TRUE(torch::equal(a, b));
}

TEST(ReverseStep, Errors) {
  auto s = make_linear_schedule(4, 0.1, 0.4);
  auto z = torch::zeros({2});
  EXPECT_THROW(reverse_step(s, Latent{z, 0}, 0, z, z), std::out_of_range);
  EXPECT_THROW(reverse_step(s, Latent{z, 5}, 5, z, z), std::out_of_range);
  EXPECT_THROW(reverse_step(s, Latent{z, 2}, 2, torch::zeros({3}), z), std::invalid_argument);
}

TEST(SamplerVariant, Names) {
  EXPECT_EQ(sampler_variant_from_string("beta"), SamplerVariant::kBeta);
  EXPECT_EQ(sampler_variant_from_string("sqrt_beta"), SamplerVariant::kSqrtBeta);
  EXPECT_STREQ(to_string(SamplerVariant::kSqrtBeta), "sqrt_beta");
  EXPECT_THROW(sampler_variant_from_string("ddim"), std::invalid_argument);
}
