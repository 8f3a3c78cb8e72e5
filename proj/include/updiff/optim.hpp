#pragma once

#include <vector>

#include <torch/torch.h>

namespace updiff {

/// Linear warmup to `base`, then cosine decay to `base * final_fraction` at
/// `total_steps`. final_fraction == 1 keeps the rate constant after warmup.
/// Steps are 1-based: at step k <= warmup the rate is k / warmup * base.
struct WarmupSchedule {
  double base = 5e-5;
  int64_t warmup_steps = 0;
  int64_t total_steps = 0;
  double final_fraction = 1.0;

  double at(int64_t step) const;
};

void set_learning_rate(torch::optim::Optimizer& opt, double lr);

/// Parameters of `module` that currently require grad.
std::vector<torch::Tensor> trainable_parameters(const torch::nn::Module& module);

}  // namespace updiff
