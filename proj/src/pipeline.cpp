#include "updiff/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "updiff/optim.hpp"

namespace updiff {

// ---------------------------------------------------------------- config ----

NoiseSchedule ModelConfig::schedule() const {
  if (beta_start > 0.0 || beta_end > 0.0) return make_linear_schedule(static_cast<int>(steps), beta_start, beta_end);
  return make_scaled_linear_schedule(static_cast<int>(steps));
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (resolution <= 0) fail("resolution must be positive");
  if (resolution % autoencoder.downscale != 0) fail("resolution not divisible by the autoencoder factor");
  if (resolution % layout_stride != 0) fail("resolution not divisible by the layout stride");
  if (unet.latent_channels != autoencoder.latent_channels) fail("UNet and autoencoder latent channels differ");
  const int64_t latent = resolution / autoencoder.downscale;
  const int64_t factor = int64_t{1} << (unet.channels.size() - 1);
  if (latent % factor != 0) fail("latent size not divisible by the UNet's total downsampling");
  if (steps < 1) fail("steps must be >= 1");
  if (!std::isfinite(unet.gate_scale)) fail("gate scale must be finite");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"resolution", c.resolution},
      {"autoencoder",
       {{"image_channels", c.autoencoder.image_channels},
        {"latent_channels", c.autoencoder.latent_channels},
        {"downscale", c.autoencoder.downscale},
        {"base_channels", c.autoencoder.base_channels},
        {"max_channels", c.autoencoder.max_channels}}},
      {"unet",
       {{"channels", c.unet.channels},
        {"res_blocks", c.unet.res_blocks},
        {"attention_levels", c.unet.attention_levels},
        {"transformer_depth", c.unet.transformer_depth},
        {"heads", c.unet.heads},
        {"gate_scale", c.unet.gate_scale},
        {"time_embed_dim", c.unet.time_embed_dim},
        {"gated", c.unet.gated}}},
      {"layout",
       {{"stride", c.layout_stride},
        {"base_channels", c.layout_base_channels},
        {"max_channels", c.layout_max_channels},
        {"dim", c.unet.layout_dim}}},
      {"text", {{"tokens", c.text_tokens}, {"dim", c.unet.text_dim}}},
      {"steps", c.steps},
      {"beta_start", c.beta_start},
      {"beta_end", c.beta_end},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.resolution = j.value("resolution", c.resolution);
  if (j.contains("autoencoder")) {
    const auto& a = j["autoencoder"];
    c.autoencoder.image_channels = a.value("image_channels", c.autoencoder.image_channels);
    c.autoencoder.latent_channels = a.value("latent_channels", c.autoencoder.latent_channels);
    c.autoencoder.downscale = a.value("downscale", c.autoencoder.downscale);
    c.autoencoder.base_channels = a.value("base_channels", c.autoencoder.base_channels);
    c.autoencoder.max_channels = a.value("max_channels", c.autoencoder.max_channels);
  }
  if (j.contains("unet")) {
    const auto& u = j["unet"];
    c.unet.channels = u.value("channels", c.unet.channels);
    c.unet.res_blocks = u.value("res_blocks", c.unet.res_blocks);
    c.unet.attention_levels = u.value("attention_levels", c.unet.attention_levels);
    c.unet.transformer_depth = u.value("transformer_depth", c.unet.transformer_depth);
    c.unet.heads = u.value("heads", c.unet.heads);
    c.unet.gate_scale = u.value("gate_scale", c.unet.gate_scale);
    c.unet.time_embed_dim = u.value("time_embed_dim", c.unet.time_embed_dim);
    c.unet.gated = u.value("gated", c.unet.gated);
  }
  if (j.contains("layout")) {
    const auto& l = j["layout"];
    c.layout_stride = l.value("stride", c.layout_stride);
    c.layout_base_channels = l.value("base_channels", c.layout_base_channels);
    c.layout_max_channels = l.value("max_channels", c.layout_max_channels);
    c.unet.layout_dim = l.value("dim", c.unet.layout_dim);
  }
  if (j.contains("text")) {
    c.text_tokens = j["text"].value("tokens", c.text_tokens);
    c.unet.text_dim = j["text"].value("dim", c.unet.text_dim);
  }
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.unet.latent_channels = c.autoencoder.latent_channels;
  c.unet.max_timestep = c.steps;
}

const char* to_string(FreezeMode m) { return m == FreezeMode::kAllTrainable ? "all-trainable" : "frozen-backbone"; }

FreezeMode freeze_mode_from_string(const std::string& s) {
  if (s == "all-trainable") return FreezeMode::kAllTrainable;
  if (s == "frozen-backbone") return FreezeMode::kFrozenBackbone;
  throw std::invalid_argument("unknown freeze mode '" + s + "' (expected all-trainable or frozen-backbone)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"warmup_steps", c.warmup_steps},
                     {"final_lr_fraction", c.final_lr_fraction},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"seed", c.seed},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"freeze_mode", to_string(c.freeze_mode)},
                     {"freeze_after", c.freeze_after},
                     {"validation_every", c.validation_every},
                     {"validation_size", c.validation_size},
                     {"flip_probability", c.augment.flip_probability},
                     {"crop", c.augment.crop},
                     {"no_change_probability", c.augment.no_change_probability},
                     {"time_budget_seconds", c.time_budget_seconds}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.seed = j.value("seed", c.seed);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("freeze_mode")) c.freeze_mode = freeze_mode_from_string(j["freeze_mode"].get<std::string>());
  c.freeze_after = j.value("freeze_after", c.freeze_after);
  c.validation_every = j.value("validation_every", c.validation_every);
  c.validation_size = j.value("validation_size", c.validation_size);
  c.augment.flip_probability = j.value("flip_probability", c.augment.flip_probability);
  c.augment.crop = j.value("crop", c.augment.crop);
  c.augment.no_change_probability = j.value("no_change_probability", c.augment.no_change_probability);
  c.time_budget_seconds = j.value("time_budget_seconds", c.time_budget_seconds);
  if (c.learning_rate <= 0 || c.batch_size < 1 || c.max_steps < 0 || c.warmup_steps < 0)
    throw std::invalid_argument("train config: rates, batch size and step counts must be positive");
}

// ----------------------------------------------------------------- model ----

DenoiserImpl::DenoiserImpl(const ModelConfig& c) {
  c.validate();
  auto encoder = std::make_shared<ConvLayoutEncoder>(ConvLayoutEncoderOptions()
                                                         .stride(c.layout_stride)
                                                         .base_channels(c.layout_base_channels)
                                                         .max_channels(c.layout_max_channels)
                                                         .out_channels(c.unet.layout_dim));
  layout = register_module("layout", LayoutConditioner(encoder, c.resolution));
  text = register_module("text", TextCondition(c.text_tokens, c.unet.text_dim));
  auto unet_config = c.unet;
  unet_config.max_timestep = c.steps;
  unet = register_module("unet", UpUNet(unet_config));
}

LayoutCondition DenoiserImpl::condition(const torch::Tensor& pre, const torch::Tensor& change_map) {
  return layout->forward(pre, change_map);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const LayoutCondition& cond) {
  return predict_noise(unet, z_t, t, cond, text->batch(z_t.size(0)));
}

UpDiffModel::UpDiffModel(const ModelConfig& c)
    : config(c), schedule(c.schedule()), autoencoder(c.autoencoder), denoiser(c) {
  autoencoder->eval();
  denoiser->eval();
}

void UpDiffModel::to(torch::Dtype dtype) {
  autoencoder->to(dtype);
  denoiser->to(dtype);
}

void apply_freeze(Denoiser& denoiser, FreezeMode mode) {
  for (auto& p : denoiser->named_parameters()) {
    const bool frozen = mode == FreezeMode::kFrozenBackbone && parameter_group(p.key()) == ParameterGroup::kBackbone;
    p.value().set_requires_grad(!frozen);
  }
}

// ------------------------------------------------------------------ loss ----

torch::Tensor diffusion_loss(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                             const NoisePredictor& predictor, const NoiseSchedule& s) {
  auto z_t = forward_sample(s, z0, t, eps);
  auto pred = predictor(z_t, t);
  if (!pred.sizes().equals(eps.sizes())) throw std::runtime_error("noise predictor returned the wrong shape");
  return (eps - pred).pow(2).mean();
}

torch::Tensor diffusion_loss(const torch::Tensor& z0, const NoisePredictor& predictor, const NoiseSchedule& s,
                             at::Generator& gen) {
  if (z0.dim() < 1 || z0.size(0) == 0) throw std::invalid_argument("diffusion loss needs a non-empty batch");
  auto t = torch::randint(1, s.steps() + 1, {z0.size(0)}, gen, torch::kLong);
  auto eps = torch::randn(z0.sizes(), gen, z0.options());
  return diffusion_loss(z0, t, eps, predictor, s);
}

torch::Tensor diffusion_loss(UpDiffModel& model, const TripletBatch& batch, at::Generator& gen) {
  torch::Tensor z0;
  {
    torch::NoGradGuard guard;
    z0 = model.autoencoder->encode(batch.post);
  }
  auto cond = model.denoiser->condition(batch.pre, batch.change_map);
  NoisePredictor predictor = [&](const torch::Tensor& z_t, const torch::Tensor& t) {
    return model.denoiser->forward(z_t, t, cond);
  };
  return diffusion_loss(z0, predictor, model.schedule, gen);
}

double validation_loss(UpDiffModel& model, const std::vector<Triplet>& validation, uint64_t seed,
                       int64_t max_samples) {
  if (validation.empty()) throw std::invalid_argument("validation set is empty");
  torch::NoGradGuard guard;
  const bool was_training = model.denoiser->is_training();
  model.denoiser->eval();
  const auto n = std::min<int64_t>(max_samples, static_cast<int64_t>(validation.size()));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  double total = 0.0;
  for (int64_t i = 0; i < n; i += 16) {
    std::vector<int64_t> idx(static_cast<std::size_t>(std::min<int64_t>(16, n - i)));
    std::iota(idx.begin(), idx.end(), i);
    auto batch = stack_triplets(validation, idx);
    const auto dtype = model.autoencoder->parameters().front().scalar_type();
    batch.pre = batch.pre.to(dtype);
    batch.post = batch.post.to(dtype);
    batch.change_map = batch.change_map.to(dtype);
    auto z0 = model.autoencoder->encode(batch.post);
    auto t = torch::randint(1, model.schedule.steps() + 1, {z0.size(0)}, gen, torch::kLong);
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    auto cond = model.denoiser->condition(batch.pre, batch.change_map);
    NoisePredictor predictor = [&](const torch::Tensor& z_t, const torch::Tensor& tt) {
      return model.denoiser->forward(z_t, tt, cond);
    };
    total += diffusion_loss(z0, t, eps, predictor, model.schedule).item<double>() * static_cast<double>(idx.size());
  }
  if (was_training) model.denoiser->train();
  return total / static_cast<double>(n);
}

// -------------------------------------------------------------- training ----

DiffusionTrainResult train_diffusion(UpDiffModel& model, const std::vector<Triplet>& train,
                                     const std::vector<Triplet>& validation, const TrainConfig& config,
                                     const TrainLogger& logger) {
  if (train.empty()) throw std::invalid_argument("diffusion training set is empty");
  const auto res = model.config.resolution;
  for (const auto* set : {&train, &validation})
    for (const auto& t : *set) {
      const auto size = config.augment.crop > 0 ? config.augment.crop : t.height();
      if (size != res || t.height() != t.width())
        throw std::invalid_argument("triplet '" + t.id + "' (" + std::to_string(t.height()) + "x" +
                                    std::to_string(t.width()) + ") does not match model resolution " +
                                    std::to_string(res));
    }

  for (auto& p : model.autoencoder->parameters()) p.set_requires_grad(false);
  model.autoencoder->eval();
  apply_freeze(model.denoiser, config.freeze_mode == FreezeMode::kFrozenBackbone && config.freeze_after == 0
                                   ? FreezeMode::kFrozenBackbone
                                   : FreezeMode::kAllTrainable);

  const uint64_t val_seed = config.seed ^ 0x5eedULL;
  DiffusionTrainResult result;
  if (!validation.empty()) result.initial_validation_loss = validation_loss(model, validation, val_seed, config.validation_size);

  torch::optim::AdamW opt(model.denoiser->parameters(), torch::optim::AdamWOptions(config.learning_rate)
                                                            .weight_decay(config.weight_decay)
                                                            .betas({0.9, 0.999}));
  WarmupSchedule lr{config.learning_rate, config.warmup_steps, config.max_steps, config.final_lr_fraction};
  auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed);
  std::mt19937_64 rng(config.seed);
  std::vector<int64_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  const auto start = std::chrono::steady_clock::now();
  model.denoiser->train();
  for (int64_t step = 1; step <= config.max_steps; ++step) {
    if (config.freeze_mode == FreezeMode::kFrozenBackbone && config.freeze_after > 0 && step == config.freeze_after + 1)
      apply_freeze(model.denoiser, FreezeMode::kFrozenBackbone);

    std::vector<Triplet> batch;
    for (int64_t b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int64_t>(i) - 1))]);
        cursor = 0;
      }
      batch.push_back(augment(train[static_cast<std::size_t>(order[cursor++])], rng, config.augment));
    }

    const double rate = lr.at(step);
    set_learning_rate(opt, rate);
    opt.zero_grad();
    auto loss = diffusion_loss(model, stack_triplets(batch), gen);
    const double loss_value = loss.item<double>();
    if (!std::isfinite(loss_value))
      throw std::runtime_error("diffusion loss became non-finite at step " + std::to_string(step) + " (lr " +
                               std::to_string(rate) + ", batch starting with '" + batch.front().id + "')");
    loss.backward();
    if (config.grad_clip > 0) torch::nn::utils::clip_grad_norm_(trainable_parameters(*model.denoiser), config.grad_clip);
    opt.step();

    TrainLogEntry entry{step, loss_value, std::numeric_limits<double>::quiet_NaN(), rate};
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool out_of_time = config.time_budget_seconds > 0 && elapsed > config.time_budget_seconds;
    if (!validation.empty() &&
        ((config.validation_every > 0 && step % config.validation_every == 0) || step == config.max_steps || out_of_time))
      entry.validation_loss = validation_loss(model, validation, val_seed, config.validation_size);
    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() && step % config.checkpoint_every == 0)
      save_model(config.checkpoint_dir / ("step_" + std::to_string(step)), model,
                 {{"step", step}, {"seed", config.seed}, {"train", config}});
    result.log.push_back(entry);
    result.steps_run = step;
    if (logger) logger(entry);
    if (out_of_time) break;
  }
  model.denoiser->eval();
  if (!validation.empty()) result.final_validation_loss = validation_loss(model, validation, val_seed, config.validation_size);
  return result;
}

// -------------------------------------------------------------- sampling ----

torch::Tensor denoise_loop(const torch::Tensor& z_T, const NoiseSchedule& s, const NoisePredictor& predictor,
                           SamplerVariant variant, const NoiseSource& noise) {
  Latent z{z_T, s.steps()};
  const auto b = z_T.size(0);
  for (int t = s.steps(); t >= 1; --t) {
    auto tt = torch::full({b}, t, torch::kLong);
    auto eps = predictor(z.data, tt);
    auto n = t > 1 ? noise(t) : torch::zeros_like(z.data);
    z = reverse_step(s, z, t, eps, n, variant);
  }
  return z.data;
}

torch::Tensor sample(UpDiffModel& model, const torch::Tensor& pre, const torch::Tensor& change_map,
                     const std::vector<uint64_t>& seeds, SamplerVariant variant) {
  check_layout_inputs(pre, change_map, model.config.layout_stride);
  const auto b = pre.size(0);
  if (static_cast<int64_t>(seeds.size()) != b) throw std::invalid_argument("sample: need one seed per image");
  if (pre.size(2) != model.config.resolution || pre.size(3) != model.config.resolution)
    throw std::invalid_argument("sample: model expects " + std::to_string(model.config.resolution) + " px inputs");
  torch::NoGradGuard guard;
  model.denoiser->eval();
  model.autoencoder->eval();

  const auto f = model.config.autoencoder.downscale;
  const std::vector<int64_t> shape{model.config.autoencoder.latent_channels, pre.size(2) / f, pre.size(3) / f};
  const auto opts = pre.options();
  std::vector<at::Generator> gens;
  for (auto seed : seeds) gens.push_back(at::make_generator<at::CPUGeneratorImpl>(seed));
  auto draw = [&]() {
    std::vector<torch::Tensor> parts;
    for (auto& g : gens) parts.push_back(torch::randn(shape, g, opts));
    return torch::stack(parts);
  };

  auto z_T = draw();
  auto cond = model.denoiser->condition(pre, change_map);
  NoisePredictor predictor = [&](const torch::Tensor& z_t, const torch::Tensor& t) {
    return model.denoiser->forward(z_t, t, cond);
  };
  auto z0 = denoise_loop(z_T, model.schedule, predictor, variant, [&](int) { return draw(); });
  return model.autoencoder->decode(z0);
}

torch::Tensor sample(UpDiffModel& model, const torch::Tensor& pre, const torch::Tensor& change_map, uint64_t seed,
                     SamplerVariant variant) {
  return sample(model, pre.unsqueeze(0), change_map.unsqueeze(0), std::vector<uint64_t>{seed}, variant).squeeze(0);
}

// ------------------------------------------------------------ checkpoint ----

namespace {

nlohmann::json base_manifest(const ModelConfig& config, const char* kind) {
  return {{"kind", kind},
          {"config", config},
          {"schedule", {{"T", config.steps}, {"beta_start", config.schedule().betas().front()},
                        {"beta_end", config.schedule().betas().back()}}},
          {"resolution", config.resolution},
          {"f", config.autoencoder.downscale},
          {"s", config.layout_stride},
          {"step", 0},
          {"seed", 0}};
}

}  // namespace

void save_model(const std::filesystem::path& dir, const UpDiffModel& model, const nlohmann::json& extra) {
  Checkpoint ck;
  ck.manifest = base_manifest(model.config, "updiff");
  if (extra.is_object()) ck.manifest.update(extra);
  ck.tensors = named_state(*model.denoiser);
  for (auto& [k, v] : named_state(*model.autoencoder, "ae.")) ck.tensors.emplace(k, v);
  save_checkpoint(dir, std::move(ck));
}

void save_autoencoder(const std::filesystem::path& dir, const Autoencoder& ae, const ModelConfig& config,
                      const nlohmann::json& extra) {
  Checkpoint ck;
  ck.manifest = base_manifest(config, "autoencoder");
  if (extra.is_object()) ck.manifest.update(extra);
  ck.tensors = named_state(*ae, "ae.");
  save_checkpoint(dir, std::move(ck));
}

UpDiffModel load_model(const std::filesystem::path& dir) {
  auto ck = load_checkpoint(dir);
  if (ck.manifest.value("kind", "") != "updiff")
    throw std::runtime_error(dir.string() + " is not a full model checkpoint (kind '" +
                             ck.manifest.value("kind", "") + "')");
  UpDiffModel model(ck.manifest.at("config").get<ModelConfig>());
  load_state(*model.denoiser, ck.tensors);
  load_state(*model.autoencoder, ck.tensors, "ae.");
  return model;
}

void load_autoencoder_into(const std::filesystem::path& dir, UpDiffModel& model) {
  auto ck = load_checkpoint(dir);
  const auto cfg = ck.manifest.at("config").get<ModelConfig>();
  nlohmann::json a = cfg, b = model.config;
  if (a["autoencoder"] != b["autoencoder"] || cfg.resolution != model.config.resolution)
    throw std::runtime_error("autoencoder checkpoint " + dir.string() + " does not match the model config");
  load_state(*model.autoencoder, ck.tensors, "ae.");
}

}  // namespace updiff
