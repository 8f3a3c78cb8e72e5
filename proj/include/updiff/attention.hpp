#pragma once

#include <torch/torch.h>

namespace updiff {

/// softmax(Q K^T / sqrt(d_k)) V over the last two dims.
///
/// Accepts (n, d) matrices or batched (..., n, d) tensors. Q and K must share
/// the channel dim d_k; K and V must share the token count. The result has
/// Q's token count and V's channel dim.
torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v);

/// Row-stochastic attention weights softmax(Q K^T / sqrt(d_k)).
torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k);

struct AttentionOptions {
  AttentionOptions(int64_t query_dim, int64_t context_dim) : query_dim_(query_dim), context_dim_(context_dim) {}
  TORCH_ARG(int64_t, query_dim);
  TORCH_ARG(int64_t, context_dim);
  TORCH_ARG(int64_t, heads) = 1;
  /// Per-head key dimension; 0 means query_dim / heads.
  TORCH_ARG(int64_t, head_dim) = 0;
};

/// Multi-head attention with linear Q/K/V/out projections. With a single head
/// this is softmax(QK^T/sqrt(d_k))V between the projected streams.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  explicit MultiHeadAttentionImpl(const AttentionOptions& options);

  /// x: (B, n, query_dim); context: (B, m, context_dim). Returns (B, n, query_dim).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  int64_t heads() const { return heads_; }
  int64_t head_dim() const { return head_dim_; }

  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};

 private:
  int64_t heads_;
  int64_t head_dim_;
};
TORCH_MODULE(MultiHeadAttention);

struct GatedCrossAttentionOptions {
  GatedCrossAttentionOptions(int64_t dim, int64_t layout_dim) : dim_(dim), layout_dim_(layout_dim) {}
  TORCH_ARG(int64_t, dim);
  TORCH_ARG(int64_t, layout_dim);
  TORCH_ARG(int64_t, heads) = 1;
  /// Gate scale; the branch is multiplied by gate_scale * tanh(gamma).
  TORCH_ARG(double, gate_scale) = 1.0;
  /// Pre-normalize the visual stream before projecting queries.
  TORCH_ARG(bool, pre_norm) = true;
};

/// Gated layout cross-attention:
///   out = x + lambda * tanh(gamma) * W_out Attn(W_q x, W_k l*, W_v l*)
/// gamma is a learnable scalar that starts at exactly 0, so a freshly built
/// layer is the identity on the visual stream.
class GatedCrossAttentionImpl : public torch::nn::Module {
 public:
  explicit GatedCrossAttentionImpl(const GatedCrossAttentionOptions& options);

  /// visual: (B, n, dim); layout: (B, n_l, layout_dim).
  torch::Tensor forward(const torch::Tensor& visual, const torch::Tensor& layout);

  /// lambda * tanh(gamma)
  torch::Tensor gate() const;
  double gate_scale() const { return gate_scale_; }

  torch::nn::LayerNorm norm{nullptr};
  MultiHeadAttention attn{nullptr};
  torch::Tensor gamma;

 private:
  double gate_scale_;
  bool pre_norm_;
};
TORCH_MODULE(GatedCrossAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(int64_t dim, int64_t mult);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(FeedForward);

struct TransformerBlockOptions {
  TransformerBlockOptions(int64_t dim, int64_t layout_dim, int64_t text_dim)
      : dim_(dim), layout_dim_(layout_dim), text_dim_(text_dim) {}
  TORCH_ARG(int64_t, dim);
  TORCH_ARG(int64_t, layout_dim);
  TORCH_ARG(int64_t, text_dim);
  TORCH_ARG(int64_t, heads) = 1;
  TORCH_ARG(int64_t, ff_mult) = 4;
  TORCH_ARG(double, gate_scale) = 1.0;
  /// false builds the block without the gated layout layer.
  TORCH_ARG(bool, gated) = true;
};

/// self-attn -> gated layout cross-attn -> text cross-attn -> feed-forward,
/// each sub-layer pre-normalized and residual.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  explicit TransformerBlockImpl(const TransformerBlockOptions& options);

  /// visual: (B, n, dim); layout: (B, n_l, layout_dim), skipped when undefined
  /// or the block is ungated; text: (B, n_c, text_dim).
  torch::Tensor forward(torch::Tensor visual, const torch::Tensor& layout, const torch::Tensor& text);

  bool gated() const { return !gated_attn.is_empty(); }

  torch::nn::LayerNorm norm_self{nullptr}, norm_text{nullptr}, norm_ff{nullptr};
  MultiHeadAttention self_attn{nullptr}, text_attn{nullptr};
  GatedCrossAttention gated_attn{nullptr};
  FeedForward ff{nullptr};
};
TORCH_MODULE(TransformerBlock);

}  // namespace updiff
