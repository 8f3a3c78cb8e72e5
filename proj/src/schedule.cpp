#include "updiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace updiff {

const char* to_string(SamplerVariant v) {
  return v == SamplerVariant::kBeta ? "beta" : "sqrt_beta";
}

SamplerVariant sampler_variant_from_string(const std::string& name) {
  if (name == "beta") return SamplerVariant::kBeta;
  if (name == "sqrt_beta") return SamplerVariant::kSqrtBeta;
  throw std::invalid_argument("unknown sampler variant '" + name + "' (expected beta or sqrt_beta)");
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("noise schedule needs at least one step");
  alphas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    const double b = betas_[i];
    if (!(b > 0.0 && b < 1.0))
      throw std::invalid_argument("beta_" + std::to_string(i + 1) + " = " + std::to_string(b) +
                                  " outside (0, 1)");
    if (i > 0 && b < betas_[i - 1])
      throw std::invalid_argument("betas must be non-decreasing");
    alphas_.push_back(1.0 - b);
    prod *= alphas_.back();
    alpha_bars_.push_back(prod);
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps()) + "]");
  return static_cast<std::size_t>(t - 1);
}

namespace {

torch::Tensor gather_table(const std::vector<double>& table, const torch::Tensor& t,
                           const torch::TensorOptions& opts, int steps) {
  auto idx = t.to(torch::kLong).flatten();
  if (idx.numel() > 0) {
    const auto lo = idx.min().item<int64_t>();
    const auto hi = idx.max().item<int64_t>();
    if (lo < 1 || hi > steps)
      throw std::out_of_range("timestep batch outside [1, " + std::to_string(steps) + "]");
  }
  auto values = torch::tensor(table, torch::dtype(torch::kFloat64));
  return values.index_select(0, idx - 1).to(opts.dtype()).view({-1, 1, 1, 1});
}

}  // namespace

torch::Tensor NoiseSchedule::sqrt_alpha_bar(const torch::Tensor& t,
                                            const torch::TensorOptions& opts) const {
  std::vector<double> table(alpha_bars_.size());
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = std::sqrt(alpha_bars_[i]);
  return gather_table(table, t, opts, steps());
}

torch::Tensor NoiseSchedule::sqrt_one_minus_alpha_bar(const torch::Tensor& t,
                                                      const torch::TensorOptions& opts) const {
  std::vector<double> table(alpha_bars_.size());
  for (std::size_t i = 0; i < table.size(); ++i) table[i] = std::sqrt(1.0 - alpha_bars_[i]);
  return gather_table(table, t, opts, steps());
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule step count must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::invalid_argument("linear schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < steps; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
    betas.back() = beta_end;
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule make_scaled_linear_schedule(int steps) {
  if (steps < 1) throw std::invalid_argument("schedule step count must be >= 1");
  const double scale = 1000.0 / static_cast<double>(steps);
  return make_linear_schedule(steps, std::min(1e-4 * scale, 0.5), std::min(0.02 * scale, 0.999));
}

Latent forward_sample(const NoiseSchedule& s, const Latent& z0, int t, const torch::Tensor& eps) {
  if (!z0.data.sizes().equals(eps.sizes()))
    throw std::invalid_argument("forward_sample: eps shape does not match z0");
  const double ab = s.alpha_bar(t);
  return Latent{z0.data * std::sqrt(ab) + eps * std::sqrt(1.0 - ab), t};
}

torch::Tensor forward_sample(const NoiseSchedule& s, const torch::Tensor& z0,
                             const torch::Tensor& t, const torch::Tensor& eps) {
  if (!z0.sizes().equals(eps.sizes()))
    throw std::invalid_argument("forward_sample: eps shape does not match z0");
  if (t.numel() != z0.size(0))
    throw std::invalid_argument("forward_sample: need one timestep per batch entry");
  const auto opts = z0.options();
  return s.sqrt_alpha_bar(t, opts) * z0 + s.sqrt_one_minus_alpha_bar(t, opts) * eps;
}

double noise_coefficient(const NoiseSchedule& s, int t, SamplerVariant variant) {
  return variant == SamplerVariant::kBeta ? s.beta(t) : std::sqrt(s.beta(t));
}

Latent reverse_step(const NoiseSchedule& s, const Latent& z_t, int t, const torch::Tensor& eps_pred,
                    const torch::Tensor& noise, SamplerVariant variant) {
  if (!z_t.data.sizes().equals(eps_pred.sizes()) || !z_t.data.sizes().equals(noise.sizes()))
    throw std::invalid_argument("reverse_step: eps_pred / noise shape does not match z_t");
  const double a = s.alpha(t);
  const double ab = s.alpha_bar(t);
  const double eps_coef = (1.0 - a) / std::sqrt(1.0 - ab);
  auto mean = (z_t.data - eps_pred * eps_coef) / std::sqrt(a);
  if (t == 1) return Latent{mean, 0};
  return Latent{mean + noise * noise_coefficient(s, t, variant), t - 1};
}

}  // namespace updiff
