#pragma once

// Recurrences for the two SSM families: single-step kernels, and fused
// differentiable scans over [B, T, ...] used for training.

#include <cstddef>
#include <span>
#include <vector>

#include "dlab/tensor.hpp"

namespace dlab {

// Per-channel selective recurrence. For channel d in group g = d / Ns:
//   h_d <- exp(dt_d * a_d) (.) h_d + (dt_d * B_g) x_d
//   y_d  = C_g . h_d                (C_g scaled by dt_d when scale_c)
// Layout: h [D*Ns], x/b/c/dt [D] (b and c hold G groups of Ns), a [D*Ns].
struct SsmV1Dims {
  std::size_t channels = 0;  // D
  std::size_t state = 0;     // Ns
};
void ssm_v1_step_inplace(SsmV1Dims dims, std::span<double> h, std::span<const double> x, std::span<const double> b,
                         std::span<const double> c, std::span<const double> dt, std::span<const double> a,
                         bool scale_c, std::span<double> y);

struct SsmV1StepResult {
  std::vector<double> h;
  std::vector<double> y;
};
// Value-returning form. ContractError on negative dt, NumericError on NaN dt.
SsmV1StepResult ssm_v1_step(SsmV1Dims dims, std::span<const double> h_prev, std::span<const double> x,
                            std::span<const double> b, std::span<const double> c, std::span<const double> dt,
                            std::span<const double> a, bool scale_c = false);

// Multi-head recurrence. Per head h: S_h <- a_h S_h + B_h x_h^T; y_h = C_h^T S_h.
// Layout: S [H*Ns*hd], x [H*hd], b/c [H*Ns], a [H].
struct SsmV2Dims {
  std::size_t heads = 0;
  std::size_t state = 0;     // Ns
  std::size_t head_dim = 0;  // hd
};
void ssm_v2_step_inplace(SsmV2Dims dims, std::span<double> s, std::span<const double> x, std::span<const double> b,
                         std::span<const double> c, std::span<const double> a, std::span<double> y);

struct SsmV2StepResult {
  std::vector<double> s;
  std::vector<double> y;
};
// ContractError when some a_h is outside (0, 1).
SsmV2StepResult ssm_v2_step(SsmV2Dims dims, std::span<const double> s_prev, std::span<const double> x,
                            std::span<const double> b, std::span<const double> c, std::span<const double> a);

// Fused scans from a zero state. x, b, c, dt: [B, T, D]; a: [D, Ns]. Returns y [B, T, D].
Tensor ssm_v1_scan(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& dt, const Tensor& a,
                   std::size_t state, bool scale_c);
// x: [B, T, H*hd]; b, c: [B, T, H*Ns]; a: [B, T, H]. Returns y [B, T, H*hd].
Tensor ssm_v2_scan(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& a, std::size_t heads,
                   std::size_t state);

}  // namespace dlab
