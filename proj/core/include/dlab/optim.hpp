#pragma once

#include <cstddef>
#include <vector>

#include "dlab/tensor.hpp"

namespace dlab {

// Warmup-stable-decay: linear 0 -> peak over the first 10% of steps, flat,
// then linear peak -> 0 over the last 10%. ContractError when step > total.
double wsd_lr(std::size_t step, std::size_t total_steps, double peak_lr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config = {});

  // One update with the given learning rate, then clears gradients.
  // Weight decay applies only to parameters of rank >= 2.
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }
  // L2 norm of the current gradients, before clipping.
  double grad_norm() const;

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

}  // namespace dlab
