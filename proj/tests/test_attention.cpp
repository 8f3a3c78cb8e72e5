#include <cmath>

#include <gtest/gtest.h>

#include "fd_oracle.hpp"
#include "updiff/attention.hpp"

using namespace updiff;
using updiff::testing::central_differences;
using updiff::testing::gather;
using updiff::testing::relative_error;

namespace {

torch::Tensor f64(std::vector<double> v, std::vector<int64_t> shape) {
  return torch::tensor(v, torch::kFloat64).reshape(shape);
}

void zero_all(torch::nn::Module& m) {
  torch::NoGradGuard guard;
  for (auto& p : m.parameters()) p.zero_();
}

void copy_matching(torch::nn::Module& from, torch::nn::Module& to) {
  torch::NoGradGuard guard;
  auto src = from.named_parameters();
  for (auto& p : to.named_parameters()) p.value().copy_(src[p.key()]);
}

}  // namespace

TEST(ScaledDotAttention, SingleKeyReturnsValueRow) {
  auto q = torch::randn({5, 3}, torch::kFloat64);
  auto k = torch::randn({1, 3}, torch::kFloat64);
  auto v = f64({2.0, -1.0, 7.0, 0.5}, {1, 4});
  auto out = scaled_dot_attention(q, k, v);
  ASSERT_EQ(out.sizes(), (std::vector<int64_t>{5, 4}));
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(torch::allclose(out[i], v[0], 0, 1e-12));
}

TEST(ScaledDotAttention, IdenticalKeysAverageValues) {
  auto q = torch::randn({3, 2}, torch::kFloat64);
  auto k = f64({0.4, -0.2}, {1, 2}).expand({4, 2}).contiguous();
  auto v = torch::randn({4, 3}, torch::kFloat64);
  auto out = scaled_dot_attention(q, k, v);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(torch::allclose(out[i], v.mean(0), 0, 1e-12));
}

TEST(ScaledDotAttention, HandEvaluatedExample) {
  auto out = scaled_dot_attention(f64({0.0}, {1, 1}), f64({std::log(3.0), 0.0}, {2, 1}), f64({1.0, 5.0}, {2, 1}));
  EXPECT_NEAR(out.item<double>(), 3.0, 1e-12);
}

TEST(ScaledDotAttention, ScalesByKeyDimension) {
  // d_k = 4: logits (2, 0) / 2 -> weights softmax(1, 0).
  auto q = f64({1, 1, 1, 1}, {1, 4});
  auto k = f64({0.5, 0.5, 0.5, 0.5, 0, 0, 0, 0}, {2, 4});
  auto v = f64({1.0, 0.0}, {2, 1});
  const double w = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_NEAR(scaled_dot_attention(q, k, v).item<double>(), w, 1e-12);
}

TEST(ScaledDotAttention, RowsSumToOne) {
  auto w = attention_weights(torch::randn({2, 6, 5}), torch::randn({2, 9, 5}) * 4);
  EXPECT_LE((w.sum(-1) - 1).abs().max().item<double>(), 1e-6);
}

TEST(ScaledDotAttention, DimensionMismatch) {
  EXPECT_THROW(scaled_dot_attention(torch::randn({2, 3}), torch::randn({2, 4}), torch::randn({2, 4})),
               std::invalid_argument);
  EXPECT_THROW(scaled_dot_attention(torch::randn({2, 3}), torch::randn({2, 3}), torch::randn({3, 4})),
               std::invalid_argument);
}

TEST(ScaledDotAttention, GradientMatchesFiniteDifferences) {
  torch::manual_seed(11);
  auto q = torch::randn({3, 4}, torch::kFloat64).requires_grad_();
  auto k = torch::randn({4, 4}, torch::kFloat64).requires_grad_();
  auto v = torch::randn({4, 5}, torch::kFloat64).requires_grad_();
  auto w = torch::randn({3, 5}, torch::kFloat64);
  auto loss = [&] { return (scaled_dot_attention(q, k, v) * w).sum(); };
  loss().backward();
  for (auto* p : {&q, &k, &v}) {
    auto idx = updiff::testing::all_indices(*p);
    auto fd = central_differences(*p, idx, [&] { return loss().item<double>(); });
    EXPECT_LE(relative_error(gather(p->grad(), idx), fd), 1e-4);
  }
}

TEST(GatedCrossAttention, ClosedGateIsIdentity) {
  GatedCrossAttention layer(GatedCrossAttentionOptions(8, 6));
  EXPECT_EQ(layer->gamma.item<double>(), 0.0);
  auto x = torch::randn({2, 5, 8});
  auto out = layer->forward(x, torch::randn({2, 3, 6}));
  EXPECT_TRUE(torch::equal(out, x));
}

TEST(GatedCrossAttention, ZeroScaleIsIdentity) {
  GatedCrossAttention layer(GatedCrossAttentionOptions(8, 6).gate_scale(0.0));
  {
    torch::NoGradGuard guard;
    layer->gamma.fill_(0.9);
  }
  auto x = torch::randn({1, 4, 8});
  EXPECT_TRUE(torch::equal(layer->forward(x, torch::randn({1, 2, 6})), x));
}

TEST(GatedCrossAttention, SaturatedGateWithSingleToken) {
  const double lambda = 0.7;
  GatedCrossAttention layer(GatedCrossAttentionOptions(6, 4).gate_scale(lambda));
  layer->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    layer->gamma.fill_(40.0);
  }
  auto x = torch::randn({2, 5, 6}, torch::kFloat64);
  auto l = torch::randn({2, 1, 4}, torch::kFloat64);
  auto out = layer->forward(x, l);
  auto& a = layer->attn;
  auto row = a->to_out->forward(a->to_v->forward(l));  // (2, 1, 6)
  EXPECT_TRUE(torch::allclose(out, x + lambda * row, 0, 1e-12));
}

TEST(GatedCrossAttention, LayoutTokenPermutationInvariance) {
  GatedCrossAttention layer(GatedCrossAttentionOptions(8, 4));
  layer->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    layer->gamma.fill_(0.5);
  }
  auto x = torch::randn({1, 6, 8}, torch::kFloat64);
  auto l = torch::randn({1, 5, 4}, torch::kFloat64);
  auto perm = torch::tensor({3, 0, 4, 1, 2}, torch::kLong);
  EXPECT_TRUE(torch::allclose(layer->forward(x, l), layer->forward(x, l.index_select(1, perm)), 0, 1e-12));
}

TEST(GatedCrossAttention, GradientMatchesFiniteDifferences) {
  torch::manual_seed(5);
  GatedCrossAttention layer(GatedCrossAttentionOptions(8, 6).gate_scale(0.8));
  layer->to(torch::kFloat64);
  {
    torch::NoGradGuard guard;
    layer->gamma.fill_(0.4);
  }
  auto x = torch::randn({1, 4, 8}, torch::kFloat64).requires_grad_();
  auto l = torch::randn({1, 3, 6}, torch::kFloat64).requires_grad_();
  auto w = torch::randn({1, 4, 8}, torch::kFloat64);
  auto loss = [&] { return (layer->forward(x, l) * w).sum(); };
  loss().backward();
  std::vector<torch::Tensor> targets{x, l};
  for (auto& p : layer->parameters()) targets.push_back(p);
  for (auto& p : targets) {
    auto idx = updiff::testing::all_indices(p);
    auto fd = central_differences(p, idx, [&] { return loss().item<double>(); });
    EXPECT_LE(relative_error(gather(p.grad(), idx), fd), 1e-4) << "shape " << p.sizes();
  }
}

TEST(GatedCrossAttention, DimensionMismatch) {
  GatedCrossAttention layer(GatedCrossAttentionOptions(8, 6));
  EXPECT_ANY_THROW(layer->forward(torch::randn({1, 4, 8}), torch::randn({1, 3, 5})));
}

TEST(TransformerBlock, ZeroWeightsAreIdentity) {
  TransformerBlock block(TransformerBlockOptions(8, 6, 5));
  zero_all(*block);
  auto x = torch::randn({2, 7, 8});
  auto out = block->forward(x, torch::randn({2, 3, 6}), torch::randn({2, 4, 5}));
  EXPECT_TRUE(torch::equal(out, x));
}

TEST(TransformerBlock, ClosedGateMatchesUngatedBlock) {
  TransformerBlock gated(TransformerBlockOptions(8, 6, 5));
  TransformerBlock plain(TransformerBlockOptions(8, 6, 5).gated(false));
  copy_matching(*gated, *plain);
  auto x = torch::randn({2, 7, 8});
  auto text = torch::randn({2, 4, 5});
  auto a = gated->forward(x, torch::randn({2, 3, 6}), text);
  auto b = gated->forward(x, torch::randn({2, 9, 6}) * 3, text);
  EXPECT_TRUE(torch::equal(a, plain->forward(x, torch::Tensor(), text)));
  EXPECT_TRUE(torch::equal(a, b));
  EXPECT_EQ(a.sizes(), x.sizes());
}

TEST(TransformerBlock, OpenGateUsesLayout) {
  TransformerBlock block(TransformerBlockOptions(8, 6, 5));
  {
    torch::NoGradGuard guard;
    block->gated_attn->gamma.fill_(1.0);
  }
  auto x = torch::randn({1, 7, 8});
  auto text = torch::randn({1, 4, 5});
  EXPECT_FALSE(torch::equal(block->forward(x, torch::randn({1, 3, 6}), text),
                            block->forward(x, torch::randn({1, 3, 6}), text)));
}

TEST(MultiHeadAttention, HeadsPartitionChannels) {
  MultiHeadAttention mha(AttentionOptions(8, 4).heads(2));
  EXPECT_EQ(mha->heads(), 2);
  EXPECT_EQ(mha->head_dim(), 4);
  auto out = mha->forward(torch::randn({3, 5, 8}), torch::randn({3, 2, 4}));
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{3, 5, 8}));
}
