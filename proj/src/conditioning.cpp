#include "updiff/conditioning.hpp"

#include <stdexcept>
#include <string>

#include "updiff/layers.hpp"

namespace updiff {

void check_layout_inputs(const torch::Tensor& pre, const torch::Tensor& change_map, int64_t stride) {
  if (pre.dim() != 4 || pre.size(1) != 3)
    throw std::invalid_argument("pre-change image must be (B, 3, H, W)");
  if (change_map.dim() != 4 || change_map.size(1) != 1)
    throw std::invalid_argument("change map must be (B, 1, H, W)");
  if (pre.size(0) != change_map.size(0) || pre.size(2) != change_map.size(2) ||
      pre.size(3) != change_map.size(3))
    throw std::invalid_argument("pre-change image and change map dimensions differ");
  if (pre.size(2) % stride != 0 || pre.size(3) % stride != 0)
    throw std::invalid_argument("image size " + std::to_string(pre.size(2)) + "x" +
                                std::to_string(pre.size(3)) + " not divisible by layout stride " +
                                std::to_string(stride));
}

ConvLayoutEncoder::ConvLayoutEncoder(const ConvLayoutEncoderOptions& o) : options_(o) {
  int64_t s = o.stride();
  if (s < 2 || (s & (s - 1)) != 0) throw std::invalid_argument("layout stride must be a power of two >= 2");
  stem = register_module("stem", conv3x3(4, o.base_channels(), 1, o.bias()));
  stages = register_module("stages", torch::nn::ModuleList());
  int64_t ch = o.base_channels();
  for (; s > 1; s /= 2) {
    const int64_t next = std::min(ch * 2, o.max_channels());
    torch::nn::Sequential stage(conv3x3(ch, next, 2, o.bias()), torch::nn::SiLU(),
                                conv3x3(next, next, 1, o.bias()), torch::nn::SiLU());
    stages->push_back(stage);
    ch = next;
  }
  head = register_module("head", conv1x1(ch, o.out_channels(), o.bias()));
}

torch::Tensor ConvLayoutEncoder::encode(const torch::Tensor& pre, const torch::Tensor& change_map) {
  check_layout_inputs(pre, change_map, stride());
  auto h = torch::silu(stem->forward(torch::cat({pre, change_map.to(pre.dtype())}, 1)));
  for (const auto& stage : *stages) h = stage->as<torch::nn::Sequential>()->forward(h);
  return head->forward(h);
}

torch::Tensor tokenize_layout(const torch::Tensor& feature, const torch::Tensor& pe) {
  if (feature.dim() != 4) throw std::invalid_argument("layout feature must be (B, d_l, h, w)");
  const auto n = feature.size(2) * feature.size(3);
  if (pe.dim() != 2 || pe.size(0) != n || pe.size(1) != feature.size(1))
    throw std::invalid_argument("position embedding shape must be (" + std::to_string(n) + ", " +
                                std::to_string(feature.size(1)) + ")");
  return feature.flatten(2).transpose(1, 2) + pe.unsqueeze(0);
}

LayoutConditionerImpl::LayoutConditionerImpl(std::shared_ptr<LayoutEncoder> enc, int64_t resolution)
    : encoder(std::move(enc)), resolution_(resolution) {
  if (resolution % encoder->stride() != 0)
    throw std::invalid_argument("resolution not divisible by layout stride");
  register_module("encoder", encoder);
  const auto side = resolution / encoder->stride();
  position_embedding =
      register_parameter("position_embedding", torch::randn({side * side, encoder->channels()}) * 0.02);
}

torch::Tensor LayoutConditionerImpl::embed(const torch::Tensor& pre, const torch::Tensor& change_map) {
  return encoder->encode(pre, change_map);
}

LayoutCondition LayoutConditionerImpl::forward(const torch::Tensor& pre, const torch::Tensor& change_map) {
  if (pre.dim() == 4 && (pre.size(2) != resolution_ || pre.size(3) != resolution_))
    throw std::invalid_argument("layout conditioner built for " + std::to_string(resolution_) +
                                " px inputs, got " + std::to_string(pre.size(2)) + "x" +
                                std::to_string(pre.size(3)));
  auto feature = embed(pre, change_map);
  return {feature, tokenize_layout(feature, position_embedding)};
}

TextConditionImpl::TextConditionImpl(int64_t n_tokens, int64_t dim) {
  if (n_tokens < 1 || dim < 1) throw std::invalid_argument("text condition needs positive shape");
  tokens = register_parameter("tokens", torch::randn({n_tokens, dim}) * 0.02);
}

}  // namespace updiff
