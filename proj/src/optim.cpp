#include "updiff/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace updiff {

double WarmupSchedule::at(int64_t step) const {
  if (warmup_steps > 0 && step <= warmup_steps)
    return base * static_cast<double>(std::max<int64_t>(step, 0)) / static_cast<double>(warmup_steps);
  if (final_fraction >= 1.0 || total_steps <= warmup_steps) return base;
  const double progress = std::clamp(static_cast<double>(step - warmup_steps) /
                                         static_cast<double>(total_steps - warmup_steps),
                                     0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base * (final_fraction + (1.0 - final_fraction) * cosine);
}

void set_learning_rate(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::vector<torch::Tensor> trainable_parameters(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters())
    if (p.requires_grad()) out.push_back(p);
  return out;
}

}  // namespace updiff
