#include "dlab/optim.hpp"

#include <cmath>
#include <string>

#include "dlab/error.hpp"

namespace dlab {

double wsd_lr(std::size_t step, std::size_t total_steps, double peak_lr) {
  if (step > total_steps) {
    throw ContractError("wsd_lr: step " + std::to_string(step) + " exceeds total " + std::to_string(total_steps));
  }
  if (total_steps == 0) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  if (frac < 0.1) return peak_lr * frac / 0.1;
  if (frac > 0.9) return peak_lr * (1.0 - frac) / 0.1;
  return peak_lr;
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ContractError("AdamW: parameter does not require grad");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double AdamW::grad_norm() const {
  double ss = 0.0;
  for (const auto& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

void AdamW::step(double lr) {
  ++steps_;
  const double norm = grad_norm();
  if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm at step " + std::to_string(steps_));
  double clip = 1.0;
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) clip = config_.clip_norm / norm;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool decay = p.shape().size() >= 2;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
      if (decay) w[j] -= lr * config_.weight_decay * w[j];
      w[j] -= lr * update;
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace dlab
