#include "updiff/autoencoder.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "updiff/layers.hpp"
#include "updiff/optim.hpp"

namespace updiff {

namespace {

int64_t log2_exact(int64_t v) {
  if (v < 1 || (v & (v - 1)) != 0) throw std::invalid_argument("downscale factor must be a power of two");
  int64_t n = 0;
  while (v > 1) {
    v >>= 1;
    ++n;
  }
  return n;
}

}  // namespace

AutoencoderImpl::AutoencoderImpl(const AutoencoderConfig& config) : config_(config) {
  const int64_t levels = log2_exact(config.downscale);
  std::vector<int64_t> ch;
  for (int64_t i = 0; i <= levels; ++i)
    ch.push_back(std::min(config.base_channels << i, std::max(config.max_channels, config.base_channels)));

  enc_in_ = register_module("enc_in", conv3x3(config.image_channels, ch[0]));
  enc_blocks_ = register_module("enc_blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < levels; ++i) {
    enc_blocks_->push_back(ResBlock(ch[i], ch[i]));
    enc_blocks_->push_back(Downsample(ch[i], ch[i + 1]));
  }
  enc_blocks_->push_back(ResBlock(ch[levels], ch[levels]));
  enc_norm_ = register_module("enc_norm", make_group_norm(ch[levels]));
  enc_out_ = register_module("enc_out", conv3x3(ch[levels], config.latent_channels));

  dec_in_ = register_module("dec_in", conv3x3(config.latent_channels, ch[levels]));
  dec_blocks_ = register_module("dec_blocks", torch::nn::ModuleList());
  dec_blocks_->push_back(ResBlock(ch[levels], ch[levels]));
  for (int64_t i = levels; i > 0; --i) {
    dec_blocks_->push_back(Upsample(ch[i], ch[i - 1]));
    dec_blocks_->push_back(ResBlock(ch[i - 1], ch[i - 1]));
  }
  dec_norm_ = register_module("dec_norm", make_group_norm(ch[0]));
  dec_out_ = register_module("dec_out", conv3x3(ch[0], config.image_channels));

  scale_ = register_buffer("latent_scale", torch::ones({1}));
}

void AutoencoderImpl::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("latent scale must be positive and finite");
  torch::NoGradGuard guard;
  scale_.fill_(s);
}

torch::Tensor AutoencoderImpl::encode_raw(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != config_.image_channels)
    throw std::invalid_argument("encode expects (B, " + std::to_string(config_.image_channels) + ", H, W)");
  if (images.size(2) % config_.downscale != 0 || images.size(3) % config_.downscale != 0)
    throw std::invalid_argument("image size " + std::to_string(images.size(2)) + "x" +
                                std::to_string(images.size(3)) + " not divisible by downscale factor " +
                                std::to_string(config_.downscale));
  auto h = enc_in_->forward(images);
  for (const auto& m : *enc_blocks_) {
    if (auto* rb = m->as<ResBlockImpl>()) h = rb->forward(h);
    else h = m->as<DownsampleImpl>()->forward(h);
  }
  return enc_out_->forward(torch::silu(enc_norm_->forward(h)));
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& images) {
  return encode_raw(images) * scale_.to(images.dtype());
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& latents) {
  if (latents.dim() != 4 || latents.size(1) != config_.latent_channels)
    throw std::invalid_argument("decode expects (B, " + std::to_string(config_.latent_channels) + ", h, w)");
  auto h = dec_in_->forward(latents / scale_.to(latents.dtype()));
  for (const auto& m : *dec_blocks_) {
    if (auto* rb = m->as<ResBlockImpl>()) h = rb->forward(h);
    else h = m->as<UpsampleImpl>()->forward(h);
  }
  return torch::tanh(dec_out_->forward(torch::silu(dec_norm_->forward(h))));
}

Latent AutoencoderImpl::encode_latent(const torch::Tensor& image) {
  if (image.dim() == 3) return {encode(image.unsqueeze(0)).squeeze(0), 0};
  return {encode(image), 0};
}

torch::Tensor AutoencoderImpl::decode_latent(const Latent& z) {
  if (z.data.dim() == 3) return decode(z.data.unsqueeze(0)).squeeze(0);
  return decode(z.data);
}

double psnr(const torch::Tensor& reference, const torch::Tensor& reconstruction) {
  const double mse = torch::mse_loss(reconstruction.to(torch::kFloat64), reference.to(torch::kFloat64)).item<double>();
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(4.0 / mse);
}

AutoencoderTrainResult train_autoencoder(Autoencoder& ae, const torch::Tensor& images,
                                         const torch::Tensor& validation,
                                         const AutoencoderTrainConfig& config, const TrainLogger& logger) {
  if (!images.defined() || images.size(0) == 0) throw std::invalid_argument("autoencoder training set is empty");
  const auto n = images.size(0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);

  auto validate = [&]() {
    torch::NoGradGuard guard;
    ae->eval();
    const double v = torch::mse_loss(ae->forward(validation), validation).item<double>();
    ae->train();
    return v;
  };

  AutoencoderTrainResult result;
  result.initial_validation_loss = validate();

  torch::optim::AdamW opt(ae->parameters(), torch::optim::AdamWOptions(config.learning_rate)
                                                .weight_decay(config.weight_decay));
  WarmupSchedule lr{config.learning_rate, config.warmup_steps, config.steps, config.final_lr_fraction};
  const auto start = std::chrono::steady_clock::now();
  ae->train();
  for (int64_t step = 1; step <= config.steps; ++step) {
    auto idx = torch::randint(n, {std::min(config.batch_size, n)}, gen, torch::kLong);
    auto batch = images.index_select(0, idx);
    if (torch::rand({1}, gen).item<double>() < 0.5) batch = batch.flip({3});
    if (torch::rand({1}, gen).item<double>() < 0.5) batch = batch.flip({2});

    const double rate = lr.at(step);
    set_learning_rate(opt, rate);
    opt.zero_grad();
    auto loss = torch::mse_loss(ae->forward(batch), batch);
    const double loss_value = loss.item<double>();
    if (!std::isfinite(loss_value))
      throw std::runtime_error("autoencoder loss became non-finite at step " + std::to_string(step) +
                               " (lr " + std::to_string(rate) + ")");
    loss.backward();
    torch::nn::utils::clip_grad_norm_(ae->parameters(), 1.0);
    opt.step();

    TrainLogEntry entry{step, loss_value, std::numeric_limits<double>::quiet_NaN(), rate};
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool out_of_time = config.time_budget_seconds > 0.0 && elapsed > config.time_budget_seconds;
    if ((config.validation_every > 0 && step % config.validation_every == 0) || step == config.steps || out_of_time)
      entry.validation_loss = validate();
    result.log.push_back(entry);
    result.steps_run = step;
    if (logger) logger(entry);
    if (out_of_time) break;
  }
  ae->eval();
  result.final_validation_loss = validate();

  {
    torch::NoGradGuard guard;
    double sum = 0.0, sum_sq = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < n; i += 64) {
      auto z = ae->encode_raw(images.slice(0, i, std::min(n, i + 64))).to(torch::kFloat64);
      sum += z.sum().item<double>();
      sum_sq += z.pow(2).sum().item<double>();
      count += z.numel();
    }
    const double mean = sum / static_cast<double>(count);
    const double var = sum_sq / static_cast<double>(count) - mean * mean;
    ae->set_latent_scale(1.0 / std::sqrt(std::max(var, 1e-12)));
  }
  return result;
}

}  // namespace updiff
