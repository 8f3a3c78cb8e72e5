#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace updiff {

/// Noise coefficient used by the reverse step.
///   kBeta:     z_{t-1} = mean + beta_t * noise
///   kSqrtBeta: z_{t-1} = mean + sqrt(beta_t) * noise (canonical DDPM)
enum class SamplerVariant { kBeta, kSqrtBeta };

const char* to_string(SamplerVariant v);
SamplerVariant sampler_variant_from_string(const std::string& name);

/// A latent tensor tagged with its diffusion step; t == 0 is the clean latent.
struct Latent {
  torch::Tensor data;
  int timestep = 0;
};

/// Immutable beta / alpha / alpha-bar tables, indexed by t in [1, T].
class NoiseSchedule {
 public:
  /// Builds a schedule from explicit betas (beta_1..beta_T).
  explicit NoiseSchedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return alphas_.at(index(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(index(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  /// sqrt(alpha_bar_t) per batch entry, shaped (B, 1, 1, 1) for broadcasting.
  torch::Tensor sqrt_alpha_bar(const torch::Tensor& t, const torch::TensorOptions& opts) const;
  torch::Tensor sqrt_one_minus_alpha_bar(const torch::Tensor& t,
                                         const torch::TensorOptions& opts) const;

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

/// Betas linearly interpolated from beta_start to beta_end, endpoints inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// Linear schedule whose endpoints are (1e-4, 0.02) rescaled by 1000 / steps,
/// so that alpha_bar_T stays near zero for short chains.
NoiseSchedule make_scaled_linear_schedule(int steps);

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
Latent forward_sample(const NoiseSchedule& s, const Latent& z0, int t, const torch::Tensor& eps);

/// Batched variant: one timestep per leading-dim entry of z0.
torch::Tensor forward_sample(const NoiseSchedule& s, const torch::Tensor& z0,
                             const torch::Tensor& t, const torch::Tensor& eps);

/// z_{t-1} = (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_t) + sigma_t noise
/// where sigma_t is beta_t or sqrt(beta_t) depending on the variant. The noise
/// term is dropped at t = 1.
Latent reverse_step(const NoiseSchedule& s, const Latent& z_t, int t, const torch::Tensor& eps_pred,
                    const torch::Tensor& noise, SamplerVariant variant = SamplerVariant::kBeta);

double noise_coefficient(const NoiseSchedule& s, int t, SamplerVariant variant);

}  // namespace updiff
