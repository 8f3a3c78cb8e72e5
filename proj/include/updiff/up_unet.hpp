#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "updiff/attention.hpp"
#include "updiff/conditioning.hpp"
#include "updiff/layers.hpp"

namespace updiff {

/// Sinusoidal timestep features with interleaved (sin, cos) pairs:
///   out[2k] = sin(t w_k), out[2k+1] = cos(t w_k), w_k = 10000^(-k / (dim/2)).
/// t: (B,) integer or real tensor. Returns (B, dim) float64.
torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int64_t dim);

struct UNetConfig {
  int64_t latent_channels = 4;
  std::vector<int64_t> channels{64, 128, 256};
  int64_t res_blocks = 2;
  /// Attention stacks sit at this many of the lowest resolutions (and the middle).
  int64_t attention_levels = 2;
  int64_t transformer_depth = 1;
  int64_t heads = 1;
  double gate_scale = 1.0;
  int64_t layout_dim = 64;
  int64_t text_dim = 64;
  /// Timesteps accepted by forward() are 1..max_timestep.
  int64_t max_timestep = 1000;
  /// 0 means 4 * channels[0].
  int64_t time_embed_dim = 0;
  /// false builds every transformer block without its gated layout layer.
  bool gated = true;
};

/// GN -> 1x1 -> transformer blocks over the flattened map -> 1x1, residual,
/// followed by the additive layout-feature injection (zero-initialized 1x1
/// projection, bilinearly resized to the map's resolution).
class SpatialTransformerImpl : public torch::nn::Module {
 public:
  SpatialTransformerImpl(int64_t channels, const UNetConfig& config);

  torch::Tensor forward(const torch::Tensor& x, const LayoutCondition& layout, const torch::Tensor& text);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d proj_in{nullptr}, proj_out{nullptr}, layout_proj{nullptr};
  torch::nn::ModuleList blocks{nullptr};
};
TORCH_MODULE(SpatialTransformer);

/// One UNet stage element: a residual block with an optional attention stack,
/// or a resampling layer.
class UNetUnitImpl : public torch::nn::Module {
 public:
  UNetUnitImpl(ResBlock res, SpatialTransformer attn);
  explicit UNetUnitImpl(Downsample down);
  explicit UNetUnitImpl(Upsample up);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb, const LayoutCondition& layout,
                        const torch::Tensor& text);

  ResBlock res{nullptr};
  SpatialTransformer attn{nullptr};
  Downsample down{nullptr};
  Upsample up{nullptr};
};
TORCH_MODULE(UNetUnit);

/// The noise predictor eps_theta(z_t, t, l, c).
class UpUNetImpl : public torch::nn::Module {
 public:
  explicit UpUNetImpl(const UNetConfig& config);

  /// z_t: (B, c_z, h, w); t: (B,) in [1, max_timestep]; layout from the
  /// conditioner; text: (B, n_c, d_c). Returns the predicted noise, shaped like z_t.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const LayoutCondition& layout,
                        const torch::Tensor& text);

  /// Learned projection of the sinusoidal features, (B, time_embed_dim).
  torch::Tensor time_embedding(const torch::Tensor& t);

  const UNetConfig& config() const { return config_; }

  /// Every gated layer in the network.
  std::vector<GatedCrossAttention> gated_layers();
  /// Every layout-injection projection in the network.
  std::vector<torch::nn::Conv2d> injection_layers();

  torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down{nullptr}, up{nullptr};
  ResBlock mid_res1{nullptr}, mid_res2{nullptr};
  SpatialTransformer mid_attn{nullptr};

 private:
  int64_t time_embed_dim_;
  UNetConfig config_;
};
TORCH_MODULE(UpUNet);

/// Sinusoidal features for a single timestep (pre-projection), checked against [1, max_t].
torch::Tensor timestep_embedding(int t, int64_t dim, int max_t);

/// eps_theta(z_t, t, l, c) for a batch; validates shapes before running the network.
torch::Tensor predict_noise(UpUNet& unet, const torch::Tensor& z_t, const torch::Tensor& t,
                            const LayoutCondition& layout, const torch::Tensor& text);

/// Parameter groups used by the freeze policy.
///   kBackbone: convolutional trunk, self-attention, text cross-attention,
///              feed-forward, timestep projections, text tokens.
///   kAdapter:  gated layout cross-attention, layout encoder, position
///              embedding, layout-injection projections.
enum class ParameterGroup { kBackbone, kAdapter };

ParameterGroup parameter_group(const std::string& qualified_name);

}  // namespace updiff
