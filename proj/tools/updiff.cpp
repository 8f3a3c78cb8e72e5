// updiff command-line front end: data synthesis, both training stages,
// sampling, evaluation and the HTTP service.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "updiff/evaluation.hpp"
#include "updiff/image_io.hpp"
#include "updiff/pipeline.hpp"
#include "updiff/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace updiff;

namespace {

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  return json::parse(in);
}

ModelConfig model_config(const json& cfg) {
  return cfg.contains("model") ? cfg["model"].get<ModelConfig>() : ModelConfig{};
}

AutoencoderTrainConfig ae_train_config(const json& cfg) {
  AutoencoderTrainConfig c;
  if (!cfg.contains("autoencoder_train")) return c;
  const auto& j = cfg["autoencoder_train"];
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  c.validation_every = j.value("validation_every", c.validation_every);
  c.time_budget_seconds = j.value("time_budget_seconds", c.time_budget_seconds);
  return c;
}

void print_log(const TrainLogEntry& e) {
  if (std::isnan(e.validation_loss)) {
    if (e.step % 50 == 0) std::printf("step %6lld  loss %.5f  lr %.2e\n", static_cast<long long>(e.step), e.loss, e.learning_rate);
  } else {
    std::printf("step %6lld  loss %.5f  val %.5f  lr %.2e\n", static_cast<long long>(e.step), e.loss,
                e.validation_loss, e.learning_rate);
  }
  std::fflush(stdout);
}

/// Pre- and post-change images of every triplet.
torch::Tensor stack_images(const std::vector<Triplet>& ts) {
  std::vector<torch::Tensor> v;
  for (const auto& t : ts) {
    v.push_back(t.pre);
    v.push_back(t.post);
  }
  return torch::stack(v);
}

InferenceService* g_service = nullptr;
extern "C" void on_signal(int) {
  if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional latent diffusion for urban layout prediction"};
  app.require_subcommand(1);
  std::string config_path;
  uint64_t seed = 0;
  app.add_option("--config", config_path, "JSON config with optional model/autoencoder_train/train sections");
  app.add_option("--seed", seed, "random seed");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a procedural dataset in the A/B/label layout");
  std::string synth_out;
  int64_t n_train = 512, n_val = 64, n_test = 64, synth_res = 64;
  synth->add_option("--out", synth_out, "dataset root")->required();
  synth->add_option("--train", n_train, "training samples");
  synth->add_option("--val", n_val, "validation samples");
  synth->add_option("--test", n_test, "test samples");
  synth->add_option("--resolution", synth_res, "side length in pixels");

  // train-ae
  auto* train_ae = app.add_subcommand("train-ae", "train the image autoencoder");
  std::string data_dir, out_dir;
  std::optional<int64_t> steps;
  std::optional<double> lr, budget;
  train_ae->add_option("--data", data_dir, "dataset root")->required();
  train_ae->add_option("--out", out_dir, "checkpoint directory")->required();
  train_ae->add_option("--steps", steps, "training steps");
  train_ae->add_option("--lr", lr, "learning rate");
  train_ae->add_option("--time-budget", budget, "seconds");

  // train-diff
  auto* train_diff = app.add_subcommand("train-diff", "train the conditional denoiser on a frozen autoencoder");
  std::string ae_dir, freeze;
  std::optional<int64_t> batch;
  train_diff->add_option("--data", data_dir, "dataset root")->required();
  train_diff->add_option("--autoencoder", ae_dir, "autoencoder checkpoint")->required();
  train_diff->add_option("--out", out_dir, "checkpoint directory")->required();
  train_diff->add_option("--steps", steps, "training steps");
  train_diff->add_option("--lr", lr, "learning rate");
  train_diff->add_option("--batch", batch, "batch size");
  train_diff->add_option("--freeze-mode", freeze, "all-trainable | frozen-backbone");
  train_diff->add_option("--time-budget", budget, "seconds");

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "predict a post-change image");
  std::string ckpt, pre_path, map_path, out_path, variant = "beta";
  sample_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  sample_cmd->add_option("--pre", pre_path, "pre-change PNG")->required();
  sample_cmd->add_option("--map", map_path, "binary change map PNG")->required();
  sample_cmd->add_option("--out", out_path, "output PNG")->required();
  sample_cmd->add_option("--sampler", variant, "beta | sqrt_beta");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset split");
  std::string split = "test";
  int64_t limit = 0;
  eval_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", data_dir, "dataset root")->required();
  eval_cmd->add_option("--split", split, "split name");
  eval_cmd->add_option("--limit", limit, "evaluate at most this many samples (0 = all)");
  eval_cmd->add_option("--sampler", variant, "beta | sqrt_beta");

  // serve
  auto* serve = app.add_subcommand("serve", "run the HTTP inference service");
  ServiceConfig service_cfg;
  std::string sessions_dir = "sessions";
  serve->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  serve->add_option("--port", service_cfg.port, "TCP port");
  serve->add_option("--host", service_cfg.host, "bind address");
  serve->add_option("--sessions", sessions_dir, "session store directory");
  serve->add_option("--retention", service_cfg.retention, "entries returned per session");

  CLI11_PARSE(app, argc, argv);

  try {
    const json cfg = read_config(config_path);
    torch::manual_seed(seed);

    if (*synth) {
      for (auto [split_name, n, offset] : {std::tuple{"train", n_train, 0}, {"val", n_val, 1}, {"test", n_test, 2}}) {
        if (n <= 0) continue;
        write_cd_dataset(synth_out, split_name, generate_synthetic(n, synth_res, seed * 3 + offset));
        std::printf("%s: %lld samples\n", split_name, static_cast<long long>(n));
      }
      return 0;
    }

    if (*train_ae) {
      auto mc = model_config(cfg);
      auto tc = ae_train_config(cfg);
      tc.seed = seed;
      if (steps) tc.steps = *steps;
      if (lr) tc.learning_rate = *lr;
      if (budget) tc.time_budget_seconds = *budget;
      auto train = stack_images(load_cd_dataset(data_dir, "train").load_all());
      auto val_set = load_cd_dataset(data_dir, "val").load_all();
      auto val = val_set.empty() ? train.slice(0, 0, 16) : stack_images(val_set);
      mc.resolution = train.size(2);
      Autoencoder ae(mc.autoencoder);
      auto result = train_autoencoder(ae, train, val, tc, print_log);
      torch::NoGradGuard guard;
      ae->eval();
      const double db = psnr(val, ae->decode(ae->encode(val)));
      save_autoencoder(out_dir, ae, mc, {{"seed", seed}, {"step", result.steps_run}, {"psnr_db", db}});
      std::printf("validation PSNR %.2f dB, saved %s\n", db, out_dir.c_str());
      return 0;
    }

    if (*train_diff) {
      auto mc = model_config(cfg);
      TrainConfig tc = cfg.contains("train") ? cfg["train"].get<TrainConfig>() : TrainConfig{};
      tc.seed = seed;
      if (steps) tc.max_steps = *steps;
      if (lr) tc.learning_rate = *lr;
      if (batch) tc.batch_size = *batch;
      if (!freeze.empty()) tc.freeze_mode = freeze_mode_from_string(freeze);
      if (budget) tc.time_budget_seconds = *budget;
      auto train = load_cd_dataset(data_dir, "train").load_all();
      auto val = load_cd_dataset(data_dir, "val").load_all();
      if (!train.empty()) mc.resolution = train.front().height();
      UpDiffModel model(mc);
      load_autoencoder_into(ae_dir, model);
      tc.checkpoint_dir = fs::path(out_dir) / "periodic";
      auto result = train_diffusion(model, train, val, tc, print_log);
      save_model(out_dir, model, {{"seed", seed}, {"step", result.steps_run}, {"train", tc}});
      std::printf("validation loss %.5f -> %.5f, saved %s\n", result.initial_validation_loss,
                  result.final_validation_loss, out_dir.c_str());
      return 0;
    }

    if (*sample_cmd) {
      auto model = load_model(ckpt);
      auto pre = image_to_tensor(read_png(pre_path));
      auto map = image_to_mask(read_png(map_path));
      auto post = sample(model, pre, map, seed, sampler_variant_from_string(variant));
      write_png(out_path, tensor_to_image(post));
      return 0;
    }

    if (*eval_cmd) {
      auto model = load_model(ckpt);
      auto triplets = load_cd_dataset(data_dir, split).load_all();
      if (limit > 0 && static_cast<int64_t>(triplets.size()) > limit) triplets.resize(static_cast<std::size_t>(limit));
      const auto v = sampler_variant_from_string(variant);
      uint64_t next = seed;
      auto report = evaluate(
          triplets,
          [&](const torch::Tensor& pre, const torch::Tensor& map) {
            std::vector<uint64_t> seeds;
            for (int64_t i = 0; i < pre.size(0); ++i) seeds.push_back(next++);
            return sample(model, pre, map, seeds, v);
          },
          EvaluationTools::defaults());
      report.extra.emplace_back("checkpoint", load_manifest(ckpt).value("id", ""));
      report.extra.emplace_back("split", split);
      report.extra.emplace_back("seed", std::to_string(seed));
      const auto text = format_report(report);
      const auto path = fs::path(ckpt) / ("eval_" + split + ".txt");
      std::ofstream(path) << text;
      std::cout << text << "written to " << path.string() << "\n";
      return 0;
    }

    if (*serve) {
      service_cfg.checkpoint = ckpt;
      service_cfg.sessions = sessions_dir;
      InferenceService service(service_cfg);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int port = service.start();
      std::printf("listening on %s:%d (loading %s)\n", service_cfg.host.c_str(), port, ckpt.c_str());
      std::fflush(stdout);
      service.load();
      std::printf("model ready\n");
      std::fflush(stdout);
      service.wait();
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
