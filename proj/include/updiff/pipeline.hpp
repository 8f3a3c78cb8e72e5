#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "updiff/autoencoder.hpp"
#include "updiff/checkpoint.hpp"
#include "updiff/conditioning.hpp"
#include "updiff/data.hpp"
#include "updiff/schedule.hpp"
#include "updiff/up_unet.hpp"

namespace updiff {

/// Architecture and schedule of a complete model.
struct ModelConfig {
  int64_t resolution = 64;
  AutoencoderConfig autoencoder;
  UNetConfig unet;  ///< unet.layout_dim / text_dim are the layout and text token widths
  int64_t layout_stride = 4;
  int64_t layout_base_channels = 32;
  int64_t layout_max_channels = 128;
  int64_t text_tokens = 4;
  int64_t steps = 200;
  /// beta range; zero values select (1e-4, 0.02) rescaled by 1000 / steps.
  double beta_start = 0.0;
  double beta_end = 0.0;

  NoiseSchedule schedule() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// The trainable conditional denoiser: layout conditioner (encoder + PE),
/// learned text tokens, and the UNet. Parameter names are prefixed
/// "layout.", "text." and "unet.".
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(const ModelConfig& config);

  LayoutCondition condition(const torch::Tensor& pre, const torch::Tensor& change_map);
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const LayoutCondition& layout);

  LayoutConditioner layout{nullptr};
  TextCondition text{nullptr};
  UpUNet unet{nullptr};
};
TORCH_MODULE(Denoiser);

/// Frozen autoencoder + denoiser + schedule.
struct UpDiffModel {
  explicit UpDiffModel(const ModelConfig& config);

  ModelConfig config;
  NoiseSchedule schedule;
  Autoencoder autoencoder;
  Denoiser denoiser;

  void to(torch::Dtype dtype);
};

enum class FreezeMode { kAllTrainable, kFrozenBackbone };
const char* to_string(FreezeMode m);
FreezeMode freeze_mode_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 5e-5;
  int64_t warmup_steps = 500;
  /// Cosine decay floor after warmup; 1.0 keeps the rate constant.
  double final_lr_fraction = 1.0;
  int64_t batch_size = 4;
  int64_t max_steps = 10000;
  uint64_t seed = 0;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  FreezeMode freeze_mode = FreezeMode::kAllTrainable;
  /// frozen-backbone mode trains everything for this many steps, then freezes the backbone group.
  int64_t freeze_after = 0;
  int64_t validation_every = 500;
  int64_t validation_size = 32;
  AugmentConfig augment;
  double time_budget_seconds = 0.0;
  /// Optional periodic checkpointing (0 disables).
  int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// eps_theta(z_t, t) with the conditions already bound.
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t)>;

/// Monte Carlo estimate of E || eps - eps_theta(z_t, t) ||^2 (per-element mean):
/// t ~ Uniform{1..T} per sample, eps ~ N(0, I), z_t from the closed-form forward process.
torch::Tensor diffusion_loss(const torch::Tensor& z0, const NoisePredictor& predictor, const NoiseSchedule& s,
                             at::Generator& gen);

/// Same objective at fixed (t, eps).
torch::Tensor diffusion_loss(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                             const NoisePredictor& predictor, const NoiseSchedule& s);

/// Loss of the full model on a triplet batch: z0 = encode(I_post) with the
/// autoencoder frozen, conditions from (I_pre, m).
torch::Tensor diffusion_loss(UpDiffModel& model, const TripletBatch& batch, at::Generator& gen);

struct DiffusionTrainResult {
  double initial_validation_loss = 0.0;
  double final_validation_loss = 0.0;
  int64_t steps_run = 0;
  std::vector<TrainLogEntry> log;
};

/// Stage-2 training of the denoiser with AdamW, linear warmup, gradient
/// clipping, geometric augmentation and the freeze policy. Validation uses a
/// fixed held-out batch with fixed (t, eps).
DiffusionTrainResult train_diffusion(UpDiffModel& model, const std::vector<Triplet>& train,
                                     const std::vector<Triplet>& validation, const TrainConfig& config,
                                     const TrainLogger& logger = {});

/// Validation loss at fixed (t, eps) drawn from `seed`.
double validation_loss(UpDiffModel& model, const std::vector<Triplet>& validation, uint64_t seed,
                       int64_t max_samples = 64);

/// Sets requires_grad per parameter: everything trainable, or the backbone
/// group frozen (kFrozenBackbone).
void apply_freeze(Denoiser& denoiser, FreezeMode mode);

/// Supplies the noise tensor for step t. Never invoked at t = 1.
using NoiseSource = std::function<torch::Tensor(int t)>;

/// Reverse chain from z_T: t = T..1, predict_noise once per step, fresh noise
/// for t > 1 and zero noise at t = 1.
torch::Tensor denoise_loop(const torch::Tensor& z_T, const NoiseSchedule& s, const NoisePredictor& predictor,
                           SamplerVariant variant, const NoiseSource& noise);

/// Samples I_post for a batch. Item i draws all of its noise from a generator
/// seeded with seeds[i], so results do not depend on batch composition.
torch::Tensor sample(UpDiffModel& model, const torch::Tensor& pre, const torch::Tensor& change_map,
                     const std::vector<uint64_t>& seeds, SamplerVariant variant = SamplerVariant::kBeta);

/// Single-image convenience: (3, H, W) + (1, H, W) -> (3, H, W).
torch::Tensor sample(UpDiffModel& model, const torch::Tensor& pre, const torch::Tensor& change_map, uint64_t seed,
                     SamplerVariant variant = SamplerVariant::kBeta);

/// Checkpoint I/O. A "updiff" checkpoint holds the autoencoder ("ae.") and the
/// denoiser; an "autoencoder" checkpoint holds only the former.
void save_model(const std::filesystem::path& dir, const UpDiffModel& model, const nlohmann::json& extra = {});
UpDiffModel load_model(const std::filesystem::path& dir);
void save_autoencoder(const std::filesystem::path& dir, const Autoencoder& ae, const ModelConfig& config,
                      const nlohmann::json& extra = {});
/// Loads an autoencoder checkpoint (or the autoencoder part of a full one) into `model`.
void load_autoencoder_into(const std::filesystem::path& dir, UpDiffModel& model);

}  // namespace updiff
