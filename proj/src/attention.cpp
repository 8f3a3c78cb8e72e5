#include "updiff/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace updiff {

namespace {

void check_attention_shapes(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v) {
  if (q.dim() < 2 || k.dim() < 2 || v.dim() < 2)
    throw std::invalid_argument("attention inputs must be at least 2-D (tokens x channels)");
  if (q.size(-1) != k.size(-1))
    throw std::invalid_argument("attention: Q has " + std::to_string(q.size(-1)) +
                                " channels but K has " + std::to_string(k.size(-1)));
  if (k.size(-2) != v.size(-2))
    throw std::invalid_argument("attention: K has " + std::to_string(k.size(-2)) +
                                " tokens but V has " + std::to_string(v.size(-2)));
  if (k.size(-2) < 1) throw std::invalid_argument("attention: need at least one key");
}

}  // namespace

torch::Tensor attention_weights(const torch::Tensor& q, const torch::Tensor& k) {
  if (q.size(-1) != k.size(-1))
    throw std::invalid_argument("attention: Q and K channel dims differ");
  const double scale = 1.0 / std::sqrt(static_cast<double>(k.size(-1)));
  return torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
}

torch::Tensor scaled_dot_attention(const torch::Tensor& q, const torch::Tensor& k,
                                   const torch::Tensor& v) {
  check_attention_shapes(q, k, v);
  return torch::matmul(attention_weights(q, k), v);
}

// ----------------------------------------------------------------------------

MultiHeadAttentionImpl::MultiHeadAttentionImpl(const AttentionOptions& o) : heads_(o.heads()) {
  if (heads_ < 1) throw std::invalid_argument("attention needs at least one head");
  head_dim_ = o.head_dim() > 0 ? o.head_dim() : o.query_dim() / heads_;
  if (head_dim_ < 1) throw std::invalid_argument("attention head dim must be >= 1");
  const int64_t inner = head_dim_ * heads_;
  to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(o.query_dim(), inner).bias(false)));
  to_k = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(o.context_dim(), inner).bias(false)));
  to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(o.context_dim(), inner).bias(false)));
  to_out = register_module("to_out", torch::nn::Linear(inner, o.query_dim()));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  if (x.dim() != 3 || context.dim() != 3)
    throw std::invalid_argument("attention expects (batch, tokens, channels) inputs");
  if (x.size(0) != context.size(0))
    throw std::invalid_argument("attention: batch size of queries and context differ");
  const auto b = x.size(0);
  auto split = [&](const torch::Tensor& t) {
    return t.view({b, t.size(1), heads_, head_dim_}).transpose(1, 2);
  };
  auto q = split(to_q->forward(x));
  auto k = split(to_k->forward(context));
  auto v = split(to_v->forward(context));
  auto out = scaled_dot_attention(q, k, v).transpose(1, 2).reshape({b, x.size(1), heads_ * head_dim_});
  return to_out->forward(out);
}

// ----------------------------------------------------------------------------

GatedCrossAttentionImpl::GatedCrossAttentionImpl(const GatedCrossAttentionOptions& o)
    : gate_scale_(o.gate_scale()), pre_norm_(o.pre_norm()) {
  if (!std::isfinite(gate_scale_)) throw std::invalid_argument("gate scale must be finite");
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({o.dim()})));
  attn = register_module("attn", MultiHeadAttention(AttentionOptions(o.dim(), o.layout_dim()).heads(o.heads())));
  gamma = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor GatedCrossAttentionImpl::gate() const { return gate_scale_ * torch::tanh(gamma); }

torch::Tensor GatedCrossAttentionImpl::forward(const torch::Tensor& visual, const torch::Tensor& layout) {
  auto queries = pre_norm_ ? norm->forward(visual) : visual;
  return visual + gate() * attn->forward(queries, layout);
}

// ----------------------------------------------------------------------------

FeedForwardImpl::FeedForwardImpl(int64_t dim, int64_t mult) {
  fc1 = register_module("fc1", torch::nn::Linear(dim, dim * mult));
  fc2 = register_module("fc2", torch::nn::Linear(dim * mult, dim));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) {
  return fc2->forward(torch::gelu(fc1->forward(x)));
}

// ----------------------------------------------------------------------------

TransformerBlockImpl::TransformerBlockImpl(const TransformerBlockOptions& o) {
  using torch::nn::LayerNorm;
  using torch::nn::LayerNormOptions;
  norm_self = register_module("norm_self", LayerNorm(LayerNormOptions({o.dim()})));
  self_attn = register_module("self_attn", MultiHeadAttention(AttentionOptions(o.dim(), o.dim()).heads(o.heads())));
  if (o.gated()) {
    gated_attn = register_module(
        "gated_attn", GatedCrossAttention(GatedCrossAttentionOptions(o.dim(), o.layout_dim())
                                              .heads(o.heads())
                                              .gate_scale(o.gate_scale())));
  }
  norm_text = register_module("norm_text", LayerNorm(LayerNormOptions({o.dim()})));
  text_attn = register_module("text_attn", MultiHeadAttention(AttentionOptions(o.dim(), o.text_dim()).heads(o.heads())));
  norm_ff = register_module("norm_ff", LayerNorm(LayerNormOptions({o.dim()})));
  ff = register_module("ff", FeedForward(o.dim(), o.ff_mult()));
}

torch::Tensor TransformerBlockImpl::forward(torch::Tensor x, const torch::Tensor& layout,
                                            const torch::Tensor& text) {
  auto h = norm_self->forward(x);
  x = x + self_attn->forward(h, h);
  if (gated() && layout.defined()) x = gated_attn->forward(x, layout);
  x = x + text_attn->forward(norm_text->forward(x), text);
  x = x + ff->forward(norm_ff->forward(x));
  return x;
}

}  // namespace updiff
