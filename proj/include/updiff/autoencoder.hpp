#pragma once

#include <functional>
#include <vector>

#include <torch/torch.h>

#include "updiff/schedule.hpp"

namespace updiff {

struct AutoencoderConfig {
  int64_t image_channels = 3;
  int64_t latent_channels = 4;
  /// Spatial downscale factor f; a power of two.
  int64_t downscale = 4;
  int64_t base_channels = 32;
  int64_t max_channels = 64;
};

/// Convolutional encoder/decoder pair. Latents are multiplied by a scalar
/// `latent_scale` after encoding and divided by it before decoding.
class AutoencoderImpl : public torch::nn::Module {
 public:
  explicit AutoencoderImpl(const AutoencoderConfig& config);

  /// (B, 3, H, W) -> (B, c_z, H/f, W/f), scaled.
  torch::Tensor encode(const torch::Tensor& images);
  /// (B, c_z, h, w) -> (B, 3, f h, f w) in [-1, 1].
  torch::Tensor decode(const torch::Tensor& latents);
  torch::Tensor forward(const torch::Tensor& images) { return decode(encode(images)); }

  Latent encode_latent(const torch::Tensor& image);
  torch::Tensor decode_latent(const Latent& z);

  /// Unscaled encoder output (what latent_scale is estimated from).
  torch::Tensor encode_raw(const torch::Tensor& images);

  double latent_scale() const { return scale_.item<double>(); }
  void set_latent_scale(double s);
  const AutoencoderConfig& config() const { return config_; }

 private:
  AutoencoderConfig config_;
  torch::nn::Conv2d enc_in_{nullptr}, enc_out_{nullptr}, dec_in_{nullptr}, dec_out_{nullptr};
  torch::nn::ModuleList enc_blocks_{nullptr}, dec_blocks_{nullptr};
  torch::nn::GroupNorm enc_norm_{nullptr}, dec_norm_{nullptr};
  torch::Tensor scale_;
};
TORCH_MODULE(Autoencoder);

struct AutoencoderTrainConfig {
  int64_t steps = 3000;
  int64_t batch_size = 16;
  double learning_rate = 1e-3;
  int64_t warmup_steps = 100;
  double weight_decay = 0.0;
  /// Cosine decay of the rate to `final_lr_fraction` of the base after warmup.
  double final_lr_fraction = 0.05;
  int64_t validation_every = 250;
  uint64_t seed = 0;
  /// Stop early when this many seconds have elapsed (0 = no limit).
  double time_budget_seconds = 0.0;
};

struct TrainLogEntry {
  int64_t step;
  double loss;
  double validation_loss;  ///< NaN when not evaluated at this step
  double learning_rate;
};

struct AutoencoderTrainResult {
  double initial_validation_loss = 0.0;
  double final_validation_loss = 0.0;
  int64_t steps_run = 0;
  std::vector<TrainLogEntry> log;
};

using TrainLogger = std::function<void(const TrainLogEntry&)>;

/// Reconstruction training (pixel MSE) over (N, 3, H, W) images. `validation`
/// is a fixed batch scored before and after training. Sets latent_scale to
/// 1 / std of the raw latents of `images` once training finishes.
/// Throws on empty input or a non-finite loss.
AutoencoderTrainResult train_autoencoder(Autoencoder& ae, const torch::Tensor& images,
                                         const torch::Tensor& validation,
                                         const AutoencoderTrainConfig& config,
                                         const TrainLogger& logger = {});

/// 10 log10(4 / MSE) for images in [-1, 1] (peak-to-peak range 2).
double psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction);

}  // namespace updiff
