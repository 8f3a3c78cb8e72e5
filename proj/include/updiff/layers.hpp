#pragma once

#include <torch/torch.h>

namespace updiff {

/// Largest group count <= 8 dividing `channels`.
int64_t norm_groups(int64_t channels);

torch::nn::GroupNorm make_group_norm(int64_t channels);

/// GN -> SiLU -> conv -> (scale-shift from embedding) -> GN -> SiLU -> conv, plus skip.
/// `emb_dim == 0` builds a block without embedding conditioning.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim = 0);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb = {});

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Stride-2 3x3 convolution.
class DownsampleImpl : public torch::nn::Module {
 public:
  DownsampleImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Downsample);

/// Nearest-neighbour x2 followed by a 3x3 convolution.
class UpsampleImpl : public torch::nn::Module {
 public:
  UpsampleImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Upsample);

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1, bool bias = true);
torch::nn::Conv2d conv1x1(int64_t in, int64_t out, bool bias = true);

}  // namespace updiff
