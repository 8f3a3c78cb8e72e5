#include "updiff/layers.hpp"

namespace updiff {

int64_t norm_groups(int64_t channels) {
  for (int64_t g = 8; g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

torch::nn::GroupNorm make_group_norm(int64_t channels) {
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(norm_groups(channels), channels));
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(bias));
}

torch::nn::Conv2d conv1x1(int64_t in, int64_t out, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).bias(bias));
}

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t emb_dim) {
  norm1 = register_module("norm1", make_group_norm(in_channels));
  conv1 = register_module("conv1", conv3x3(in_channels, out_channels));
  norm2 = register_module("norm2", make_group_norm(out_channels));
  conv2 = register_module("conv2", conv3x3(out_channels, out_channels));
  if (emb_dim > 0) emb_proj = register_module("emb_proj", torch::nn::Linear(emb_dim, 2 * out_channels));
  if (in_channels != out_channels) skip = register_module("skip", conv1x1(in_channels, out_channels));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1->forward(torch::silu(norm1->forward(x)));
  h = norm2->forward(h);
  if (!emb_proj.is_empty()) {
    TORCH_CHECK(emb.defined(), "ResBlock built with embedding conditioning needs an embedding");
    auto ss = emb_proj->forward(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1).chunk(2, 1);
    h = h * (1 + ss[0]) + ss[1];
  }
  h = conv2->forward(torch::silu(h));
  return (skip.is_empty() ? x : skip->forward(x)) + h;
}

DownsampleImpl::DownsampleImpl(int64_t in_channels, int64_t out_channels) {
  conv = register_module("conv", conv3x3(in_channels, out_channels, 2));
}

torch::Tensor DownsampleImpl::forward(const torch::Tensor& x) { return conv->forward(x); }

UpsampleImpl::UpsampleImpl(int64_t in_channels, int64_t out_channels) {
  conv = register_module("conv", conv3x3(in_channels, out_channels));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  auto up = F::interpolate(x, F::InterpolateFuncOptions()
                                  .scale_factor(std::vector<double>{2.0, 2.0})
                                  .mode(torch::kNearest));
  return conv->forward(up);
}

}  // namespace updiff
