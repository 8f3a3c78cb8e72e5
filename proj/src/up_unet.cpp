#include "updiff/up_unet.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace updiff {

torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int64_t dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep embedding dim must be even and >= 2");
  const int64_t half = dim / 2;
  auto k = torch::arange(half, torch::kFloat64);
  auto freqs = torch::exp(-std::log(10000.0) * k / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).reshape({-1, 1}) * freqs.unsqueeze(0);
  // (B, half, 2) -> (B, dim) interleaves sin/cos pairs.
  return torch::stack({torch::sin(args), torch::cos(args)}, -1).reshape({-1, dim});
}

torch::Tensor timestep_embedding(int t, int64_t dim, int max_t) {
  if (t < 1 || t > max_t)
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(max_t) + "]");
  return sinusoidal_embedding(torch::tensor({t}, torch::kLong), dim).squeeze(0);
}

ParameterGroup parameter_group(const std::string& name) {
  if (name.rfind("layout.", 0) == 0 || name.find("gated_attn") != std::string::npos ||
      name.find("layout_proj") != std::string::npos)
    return ParameterGroup::kAdapter;
  return ParameterGroup::kBackbone;
}

// ----------------------------------------------------------------------------

SpatialTransformerImpl::SpatialTransformerImpl(int64_t channels, const UNetConfig& c) {
  norm = register_module("norm", make_group_norm(channels));
  proj_in = register_module("proj_in", conv1x1(channels, channels));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < c.transformer_depth; ++i) {
    blocks->push_back(TransformerBlock(TransformerBlockOptions(channels, c.layout_dim, c.text_dim)
                                           .heads(c.heads)
                                           .gate_scale(c.gate_scale)
                                           .gated(c.gated)));
  }
  proj_out = register_module("proj_out", conv1x1(channels, channels));
  layout_proj = register_module("layout_proj", conv1x1(c.layout_dim, channels));
  torch::NoGradGuard guard;
  layout_proj->weight.zero_();
  layout_proj->bias.zero_();
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x, const LayoutCondition& layout,
                                              const torch::Tensor& text) {
  namespace F = torch::nn::functional;
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = proj_in->forward(norm->forward(x)).flatten(2).transpose(1, 2);
  for (const auto& blk : *blocks) tokens = blk->as<TransformerBlockImpl>()->forward(tokens, layout.tokens, text);
  auto out = x + proj_out->forward(tokens.transpose(1, 2).reshape({b, c, h, w}));
  if (layout.feature.defined()) {
    auto injected = layout_proj->forward(layout.feature);
    if (injected.size(2) != h || injected.size(3) != w) {
      injected = F::interpolate(injected, F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{h, w})
                                              .mode(torch::kBilinear)
                                              .align_corners(false));
    }
    out = out + injected;
  }
  return out;
}

// ----------------------------------------------------------------------------

UNetUnitImpl::UNetUnitImpl(ResBlock r, SpatialTransformer a) {
  res = register_module("res", std::move(r));
  if (!a.is_empty()) attn = register_module("attn", std::move(a));
}

UNetUnitImpl::UNetUnitImpl(Downsample d) { down = register_module("down", std::move(d)); }

UNetUnitImpl::UNetUnitImpl(Upsample u) { up = register_module("up", std::move(u)); }

torch::Tensor UNetUnitImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                    const LayoutCondition& layout, const torch::Tensor& text) {
  if (!down.is_empty()) return down->forward(x);
  if (!up.is_empty()) return up->forward(x);
  auto h = res->forward(x, emb);
  if (!attn.is_empty()) h = attn->forward(h, layout, text);
  return h;
}

// ----------------------------------------------------------------------------

UpUNetImpl::UpUNetImpl(const UNetConfig& c) : config_(c) {
  if (c.channels.empty()) throw std::invalid_argument("UNet needs at least one resolution level");
  if (c.res_blocks < 1) throw std::invalid_argument("UNet needs at least one residual block per level");
  const auto levels = static_cast<int64_t>(c.channels.size());
  time_embed_dim_ = c.time_embed_dim > 0 ? c.time_embed_dim : 4 * c.channels[0];
  const int64_t sin_dim = c.channels[0];
  time_fc1 = register_module("time_fc1", torch::nn::Linear(sin_dim, time_embed_dim_));
  time_fc2 = register_module("time_fc2", torch::nn::Linear(time_embed_dim_, time_embed_dim_));

  auto has_attention = [&](int64_t level) { return level >= levels - c.attention_levels; };
  auto transformer = [&](int64_t level, int64_t ch) {
    return has_attention(level) ? SpatialTransformer(ch, c) : SpatialTransformer(nullptr);
  };

  conv_in = register_module("conv_in", conv3x3(c.latent_channels, c.channels[0]));
  down = register_module("down", torch::nn::ModuleList());
  up = register_module("up", torch::nn::ModuleList());

  std::vector<int64_t> skip_channels{c.channels[0]};
  int64_t cur = c.channels[0];
  for (int64_t l = 0; l < levels; ++l) {
    const auto ch = c.channels[static_cast<std::size_t>(l)];
    for (int64_t r = 0; r < c.res_blocks; ++r) {
      down->push_back(UNetUnit(ResBlock(cur, ch, time_embed_dim_), transformer(l, ch)));
      cur = ch;
      skip_channels.push_back(cur);
    }
    if (l != levels - 1) {
      down->push_back(UNetUnit(Downsample(cur, cur)));
      skip_channels.push_back(cur);
    }
  }

  mid_res1 = register_module("mid_res1", ResBlock(cur, cur, time_embed_dim_));
  if (c.attention_levels > 0) mid_attn = register_module("mid_attn", SpatialTransformer(cur, c));
  mid_res2 = register_module("mid_res2", ResBlock(cur, cur, time_embed_dim_));

  for (int64_t l = levels - 1; l >= 0; --l) {
    const auto ch = c.channels[static_cast<std::size_t>(l)];
    for (int64_t r = 0; r <= c.res_blocks; ++r) {
      const auto skip = skip_channels.back();
      skip_channels.pop_back();
      up->push_back(UNetUnit(ResBlock(cur + skip, ch, time_embed_dim_), transformer(l, ch)));
      cur = ch;
    }
    if (l != 0) up->push_back(UNetUnit(Upsample(cur, cur)));
  }

  norm_out = register_module("norm_out", make_group_norm(cur));
  conv_out = register_module("conv_out", conv3x3(cur, c.latent_channels));
  torch::NoGradGuard guard;
  conv_out->weight.zero_();
  conv_out->bias.zero_();
}

torch::Tensor UpUNetImpl::time_embedding(const torch::Tensor& t) {
  auto feats = sinusoidal_embedding(t, config_.channels[0]).to(time_fc1->weight.dtype());
  return time_fc2->forward(torch::silu(time_fc1->forward(feats)));
}

torch::Tensor UpUNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t,
                                  const LayoutCondition& layout, const torch::Tensor& text) {
  auto emb = time_embedding(t);
  auto h = conv_in->forward(z_t);
  std::vector<torch::Tensor> skips{h};
  for (const auto& m : *down) {
    h = m->as<UNetUnitImpl>()->forward(h, emb, layout, text);
    skips.push_back(h);
  }
  h = mid_res1->forward(h, emb);
  if (!mid_attn.is_empty()) h = mid_attn->forward(h, layout, text);
  h = mid_res2->forward(h, emb);
  for (const auto& m : *up) {
    auto* unit = m->as<UNetUnitImpl>();
    if (unit->up.is_empty()) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
    }
    h = unit->forward(h, emb, layout, text);
  }
  return conv_out->forward(torch::silu(norm_out->forward(h)));
}

std::vector<GatedCrossAttention> UpUNetImpl::gated_layers() {
  std::vector<GatedCrossAttention> out;
  for (const auto& m : modules(/*include_self=*/false))
    if (auto g = std::dynamic_pointer_cast<GatedCrossAttentionImpl>(m)) out.emplace_back(g);
  return out;
}

std::vector<torch::nn::Conv2d> UpUNetImpl::injection_layers() {
  std::vector<torch::nn::Conv2d> out;
  for (const auto& m : modules(/*include_self=*/false))
    if (auto st = std::dynamic_pointer_cast<SpatialTransformerImpl>(m)) out.push_back(st->layout_proj);
  return out;
}

torch::Tensor predict_noise(UpUNet& unet, const torch::Tensor& z_t, const torch::Tensor& t,
                            const LayoutCondition& layout, const torch::Tensor& text) {
  const auto& c = unet->config();
  if (z_t.dim() != 4 || z_t.size(1) != c.latent_channels)
    throw std::invalid_argument("predict_noise: latent must be (B, " + std::to_string(c.latent_channels) +
                                ", h, w)");
  const auto b = z_t.size(0);
  if (t.numel() != b) throw std::invalid_argument("predict_noise: need one timestep per latent");
  const auto lo = t.min().item<int64_t>(), hi = t.max().item<int64_t>();
  if (lo < 1 || hi > c.max_timestep)
    throw std::out_of_range("predict_noise: timestep outside [1, " + std::to_string(c.max_timestep) + "]");
  const int64_t factor = int64_t{1} << (c.channels.size() - 1);
  if (z_t.size(2) % factor != 0 || z_t.size(3) % factor != 0)
    throw std::invalid_argument("predict_noise: latent size must be divisible by " + std::to_string(factor));
  if (layout.tokens.defined() && (layout.tokens.size(0) != b || layout.tokens.size(2) != c.layout_dim))
    throw std::invalid_argument("predict_noise: layout tokens do not match latent batch / layout dim");
  if (layout.feature.defined() && (layout.feature.size(0) != b || layout.feature.size(1) != c.layout_dim))
    throw std::invalid_argument("predict_noise: layout feature does not match latent batch / layout dim");
  if (text.dim() != 3 || text.size(0) != b || text.size(2) != c.text_dim)
    throw std::invalid_argument("predict_noise: text tokens must be (B, n_c, " + std::to_string(c.text_dim) + ")");
  return unet->forward(z_t, t, layout, text);
}

}  // namespace updiff
