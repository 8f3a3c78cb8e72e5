#pragma once

#include <memory>

#include <torch/torch.h>

namespace updiff {

/// Common surface for layout encoders: (I_pre, m) -> feature map with total stride `stride()`.
///
/// Images are (B, 3, H, W) in [-1, 1]; change maps are (B, 1, H, W) in {0, 1}.
/// The encoder sees their 4-channel concatenation.
class LayoutEncoder : public torch::nn::Module {
 public:
  virtual torch::Tensor encode(const torch::Tensor& pre, const torch::Tensor& change_map) = 0;
  virtual int64_t stride() const = 0;
  virtual int64_t channels() const = 0;
};

struct ConvLayoutEncoderOptions {
  /// Total stride; must be a power of two >= 2.
  TORCH_ARG(int64_t, stride) = 4;
  TORCH_ARG(int64_t, base_channels) = 32;
  TORCH_ARG(int64_t, max_channels) = 128;
  TORCH_ARG(int64_t, out_channels) = 64;
  /// false makes every convolution bias-free (encoder becomes positively homogeneous).
  TORCH_ARG(bool, bias) = true;
};

/// Strided convolutional encoder: a stem, one stride-2 stage per factor of two
/// in the stride, and a 1x1 head to `out_channels`.
class ConvLayoutEncoder : public LayoutEncoder {
 public:
  explicit ConvLayoutEncoder(const ConvLayoutEncoderOptions& options);

  torch::Tensor encode(const torch::Tensor& pre, const torch::Tensor& change_map) override;
  int64_t stride() const override { return options_.stride(); }
  int64_t channels() const override { return options_.out_channels(); }

 private:
  ConvLayoutEncoderOptions options_;
  torch::nn::Conv2d stem{nullptr};
  torch::nn::ModuleList stages{nullptr};
  torch::nn::Conv2d head{nullptr};
};

/// l* = Flatten(l) + PE. feature: (B, d_l, h, w); pe: (h*w, d_l).
/// Row i of the result is the channel vector at row-major spatial index i plus pe[i].
torch::Tensor tokenize_layout(const torch::Tensor& feature, const torch::Tensor& pe);

/// Layout feature and its tokens for one batch.
struct LayoutCondition {
  torch::Tensor feature;  ///< (B, d_l, H/s, W/s)
  torch::Tensor tokens;   ///< (B, n_l, d_l)
};

/// Owns the layout encoder and the trainable position embedding.
class LayoutConditionerImpl : public torch::nn::Module {
 public:
  /// `resolution` is the square image size the position embedding is built for.
  LayoutConditionerImpl(std::shared_ptr<LayoutEncoder> encoder, int64_t resolution);

  /// Encoder output for the concatenated inputs.
  torch::Tensor embed(const torch::Tensor& pre, const torch::Tensor& change_map);
  LayoutCondition forward(const torch::Tensor& pre, const torch::Tensor& change_map);

  int64_t token_count() const { return position_embedding.size(0); }
  int64_t token_dim() const { return position_embedding.size(1); }
  int64_t stride() const { return encoder->stride(); }

  std::shared_ptr<LayoutEncoder> encoder;
  torch::Tensor position_embedding;

 private:
  int64_t resolution_;
};
TORCH_MODULE(LayoutConditioner);

/// The constant text condition: a learned (n_c, d_c) token matrix standing in
/// for the encoding of the single fixed prompt.
class TextConditionImpl : public torch::nn::Module {
 public:
  TextConditionImpl(int64_t tokens, int64_t dim);

  /// (n_c, d_c)
  torch::Tensor forward() const { return tokens; }
  /// (batch, n_c, d_c)
  torch::Tensor batch(int64_t batch) const { return tokens.unsqueeze(0).expand({batch, -1, -1}); }

  torch::Tensor tokens;
};
TORCH_MODULE(TextCondition);

/// Throws unless `pre` is (B, 3, H, W) and `change_map` is (B, 1, H, W) with H, W divisible by `stride`.
void check_layout_inputs(const torch::Tensor& pre, const torch::Tensor& change_map, int64_t stride);

}  // namespace updiff
