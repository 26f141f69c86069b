// Sequence mixers, both as recurrences and as materialized token-mixing matrices.

#include <cmath>

#include "dlab/error.hpp"
#include "dlab/models.hpp"
#include "dlab/ssm.hpp"

namespace dlab {

using detail::GradSlots;
using detail::Node;

// ---------------------------------------------------------------------------
// Single-step kernels

void ssm_v1_step_inplace(SsmV1Dims dims, std::span<double> h, std::span<const double> x, std::span<const double> b,
                         std::span<const double> c, std::span<const double> dt, std::span<const double> a,
                         bool scale_c, std::span<double> y) {
  const std::size_t D = dims.channels;
  const std::size_t N = dims.state;
  for (std::size_t d = 0; d < D; ++d) {
    const std::size_t g = d / N;
    const double step = dt[d];
    const double u = step * x[d];
    double* hd = h.data() + d * N;
    const double* ad = a.data() + d * N;
    const double* bg = b.data() + g * N;
    const double* cg = c.data() + g * N;
    double acc = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      hd[n] = std::exp(step * ad[n]) * hd[n] + bg[n] * u;
      acc += cg[n] * hd[n];
    }
    y[d] = scale_c ? acc * step : acc;
  }
}

SsmV1StepResult ssm_v1_step(SsmV1Dims dims, std::span<const double> h_prev, std::span<const double> x,
                            std::span<const double> b, std::span<const double> c, std::span<const double> dt,
                            std::span<const double> a, bool scale_c) {
  const std::size_t D = dims.channels;
  const std::size_t N = dims.state;
  if (N == 0 || D % N != 0) throw ContractError("ssm_v1_step: channels must be a multiple of the state size");
  if (h_prev.size() != D * N || x.size() != D || b.size() != D || c.size() != D || dt.size() != D ||
      a.size() != D * N) {
    throw DimensionError("ssm_v1_step: argument extents do not match D=" + std::to_string(D) +
                         ", Ns=" + std::to_string(N));
  }
  for (double v : dt) {
    if (std::isnan(v)) throw NumericError("ssm_v1_step: NaN step size");
    if (v < 0.0) throw ContractError("ssm_v1_step: negative step size");
  }
  SsmV1StepResult r{std::vector<double>(h_prev.begin(), h_prev.end()), std::vector<double>(D)};
  ssm_v1_step_inplace(dims, r.h, x, b, c, dt, a, scale_c, r.y);
  return r;
}

void ssm_v2_step_inplace(SsmV2Dims dims, std::span<double> s, std::span<const double> x, std::span<const double> b,
                         std::span<const double> c, std::span<const double> a, std::span<double> y) {
  const std::size_t H = dims.heads;
  const std::size_t N = dims.state;
  const std::size_t P = dims.head_dim;
  for (std::size_t h = 0; h < H; ++h) {
    double* S = s.data() + h * N * P;
    const double* xh = x.data() + h * P;
    const double* bh = b.data() + h * N;
    const double* ch = c.data() + h * N;
    double* yh = y.data() + h * P;
    const double ah = a[h];
    for (std::size_t j = 0; j < P; ++j) yh[j] = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      double* row = S + n * P;
      const double bn = bh[n];
      const double cn = ch[n];
      for (std::size_t j = 0; j < P; ++j) {
        row[j] = ah * row[j] + bn * xh[j];
        yh[j] += cn * row[j];
      }
    }
  }
}

SsmV2StepResult ssm_v2_step(SsmV2Dims dims, std::span<const double> s_prev, std::span<const double> x,
                            std::span<const double> b, std::span<const double> c, std::span<const double> a) {
  const std::size_t H = dims.heads;
  const std::size_t N = dims.state;
  const std::size_t P = dims.head_dim;
  if (s_prev.size() != H * N * P || x.size() != H * P || b.size() != H * N || c.size() != H * N || a.size() != H) {
    throw DimensionError("ssm_v2_step: argument extents do not match H=" + std::to_string(H) +
                         ", Ns=" + std::to_string(N) + ", hd=" + std::to_string(P));
  }
  for (double v : a) {
    if (!(v > 0.0 && v < 1.0)) throw ContractError("ssm_v2_step: decay " + std::to_string(v) + " outside (0, 1)");
  }
  SsmV2StepResult r{std::vector<double>(s_prev.begin(), s_prev.end()), std::vector<double>(H * P)};
  ssm_v2_step_inplace(dims, r.s, x, b, c, a, r.y);
  return r;
}

// ---------------------------------------------------------------------------
// Fused scans

Tensor ssm_v1_scan(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& dt, const Tensor& a,
                   std::size_t state, bool scale_c) {
  const Shape& sx = x.shape();
  if (sx.size() != 3 || b.shape() != sx || c.shape() != sx || dt.shape() != sx) {
    throw DimensionError("ssm_v1_scan: x/b/c/dt must share a [B, T, D] shape, got " + shape_str(sx));
  }
  const std::size_t Bn = sx[0], T = sx[1], D = sx[2], N = state;
  if (N == 0 || D % N != 0 || a.shape() != Shape{D, N}) {
    throw DimensionError("ssm_v1_scan: A must be [D, Ns] with Ns dividing D, got " + shape_str(a.shape()));
  }
  for (double v : dt.data()) {
    if (std::isnan(v)) throw NumericError("ssm_v1_scan: NaN step size");
  }
  const auto xv = x.data(), bv = b.data(), cv = c.data(), dv = dt.data(), av = a.data();
  const bool need_grad = grad_enabled() && (x.requires_grad() || b.requires_grad() || c.requires_grad() ||
                                            dt.requires_grad() || a.requires_grad());
  auto states = std::make_shared<std::vector<double>>(need_grad ? Bn * T * D * N : 0);
  std::vector<double> h(D * N);
  std::vector<double> y(Bn * T * D);
  const SsmV1Dims dims{D, N};
  for (std::size_t bi = 0; bi < Bn; ++bi) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = (bi * T + t) * D;
      ssm_v1_step_inplace(dims, h, xv.subspan(row, D), bv.subspan(row, D), cv.subspan(row, D), dv.subspan(row, D), av,
                          scale_c, std::span<double>(y).subspan(row, D));
      if (need_grad) std::copy(h.begin(), h.end(), states->begin() + static_cast<std::ptrdiff_t>(row * N));
    }
  }
  Tensor out = Tensor::from({Bn, T, D}, std::move(y));
  if (!need_grad) return out;

  auto node = out.node();
  node->requires_grad = true;
  node->parents = {x.node(), b.node(), c.node(), dt.node(), a.node()};
  node->backward = [Bn, T, D, N, scale_c, states](const Node& self, std::span<const double> g, GradSlots& slots) {
    const auto& xv = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& cv = self.parents[2]->value;
    const auto& dv = self.parents[3]->value;
    const auto& av = self.parents[4]->value;
    auto* gx = slots[0];
    auto* gb = slots[1];
    auto* gc = slots[2];
    auto* gdt = slots[3];
    auto* ga = slots[4];
    std::vector<double> dh(D * N);
    for (std::size_t bi = 0; bi < Bn; ++bi) {
      std::fill(dh.begin(), dh.end(), 0.0);
      for (std::size_t t = T; t-- > 0;) {
        const std::size_t row = (bi * T + t) * D;
        const double* h_t = states->data() + row * N;
        const double* h_prev = t > 0 ? states->data() + (row - D) * N : nullptr;
        for (std::size_t d = 0; d < D; ++d) {
          const std::size_t g_off = row + (d / N) * N;  // group slice within the row
          const double step = dv[row + d];
          const double xd = xv[row + d];
          const double gy = g[row + d];
          const double cscale = scale_c ? step : 1.0;
          double* dhd = dh.data() + d * N;
          const double* hd = h_t + d * N;
          const double* hp = h_prev ? h_prev + d * N : nullptr;
          const double* ad = av.data() + d * N;
          double g_step = 0.0;
          double g_x = 0.0;
          double ch = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const double cn = cv[g_off + n];
            const double bn = bv[g_off + n];
            ch += cn * hd[n];
            dhd[n] += gy * cn * cscale;
            if (gc) (*gc)[g_off + n] += gy * hd[n] * cscale;
            if (gb) (*gb)[g_off + n] += dhd[n] * step * xd;
            g_x += dhd[n] * step * bn;
            const double e = std::exp(step * ad[n]);
            const double prev = hp ? hp[n] : 0.0;
            g_step += dhd[n] * (e * ad[n] * prev + bn * xd);
            if (ga) (*ga)[d * N + n] += dhd[n] * e * step * prev;
            dhd[n] *= e;
          }
          if (scale_c) g_step += gy * ch;
          if (gx) (*gx)[row + d] += g_x;
          if (gdt) (*gdt)[row + d] += g_step;
        }
      }
    }
  };
  return out;
}

Tensor ssm_v2_scan(const Tensor& x, const Tensor& b, const Tensor& c, const Tensor& a, std::size_t heads,
                   std::size_t state) {
  const Shape& sx = x.shape();
  if (sx.size() != 3 || heads == 0 || sx[2] % heads != 0) {
    throw DimensionError("ssm_v2_scan: x must be [B, T, H*hd], got " + shape_str(sx));
  }
  const std::size_t Bn = sx[0], T = sx[1], H = heads, N = state, P = sx[2] / heads;
  if (b.shape() != Shape{Bn, T, H * N} || c.shape() != Shape{Bn, T, H * N} || a.shape() != Shape{Bn, T, H}) {
    throw DimensionError("ssm_v2_scan: b/c must be [B, T, H*Ns] and a [B, T, H]");
  }
  const auto xv = x.data(), bv = b.data(), cv = c.data(), av = a.data();
  const bool need_grad = grad_enabled() &&
                         (x.requires_grad() || b.requires_grad() || c.requires_grad() || a.requires_grad());
  const std::size_t SZ = H * N * P;
  auto states = std::make_shared<std::vector<double>>(need_grad ? Bn * T * SZ : 0);
  std::vector<double> s(SZ);
  std::vector<double> y(Bn * T * H * P);
  const SsmV2Dims dims{H, N, P};
  for (std::size_t bi = 0; bi < Bn; ++bi) {
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t r = bi * T + t;
      ssm_v2_step_inplace(dims, s, xv.subspan(r * H * P, H * P), bv.subspan(r * H * N, H * N),
                          cv.subspan(r * H * N, H * N), av.subspan(r * H, H),
                          std::span<double>(y).subspan(r * H * P, H * P));
      if (need_grad) std::copy(s.begin(), s.end(), states->begin() + static_cast<std::ptrdiff_t>(r * SZ));
    }
  }
  Tensor out = Tensor::from({Bn, T, H * P}, std::move(y));
  if (!need_grad) return out;

  auto node = out.node();
  node->requires_grad = true;
  node->parents = {x.node(), b.node(), c.node(), a.node()};
  node->backward = [Bn, T, H, N, P, SZ, states](const Node& self, std::span<const double> g, GradSlots& slots) {
    const auto& xv = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const auto& cv = self.parents[2]->value;
    const auto& av = self.parents[3]->value;
    auto* gx = slots[0];
    auto* gb = slots[1];
    auto* gc = slots[2];
    auto* ga = slots[3];
    std::vector<double> dS(SZ);
    for (std::size_t bi = 0; bi < Bn; ++bi) {
      std::fill(dS.begin(), dS.end(), 0.0);
      for (std::size_t t = T; t-- > 0;) {
        const std::size_t r = bi * T + t;
        const double* S_t = states->data() + r * SZ;
        const double* S_prev = t > 0 ? states->data() + (r - 1) * SZ : nullptr;
        for (std::size_t h = 0; h < H; ++h) {
          const double* gy = g.data() + (r * H + h) * P;
          const double* xh = xv.data() + (r * H + h) * P;
          const double* bh = bv.data() + (r * H + h) * N;
          const double* ch = cv.data() + (r * H + h) * N;
          double* dSh = dS.data() + h * N * P;
          const double* Sh = S_t + h * N * P;
          const double* Sp = S_prev ? S_prev + h * N * P : nullptr;
          double g_a = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            double* drow = dSh + n * P;
            const double* srow = Sh + n * P;
            double g_c = 0.0;
            double g_b = 0.0;
            for (std::size_t j = 0; j < P; ++j) {
              g_c += srow[j] * gy[j];
              drow[j] += ch[n] * gy[j];
              g_b += drow[j] * xh[j];
              if (gx) (*gx)[(r * H + h) * P + j] += drow[j] * bh[n];
              if (Sp) g_a += drow[j] * Sp[n * P + j];
            }
            if (gc) (*gc)[(r * H + h) * N + n] += g_c;
            if (gb) (*gb)[(r * H + h) * N + n] += g_b;
          }
          if (ga) (*ga)[r * H + h] += g_a;
          const double ah = av[r * H + h];
          for (std::size_t k = 0; k < N * P; ++k) dSh[k] *= ah;
        }
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Layer mixers

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// [B, T, H*P] -> [B*H, T, P]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), T = x.dim(1), P = x.dim(2) / heads;
  return reshape(permute(reshape(x, {B, T, heads, P}), {0, 2, 1, 3}), {B * heads, T, P});
}

// [B*H, T, P] -> [B, T, H*P]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
  const std::size_t T = x.dim(1), P = x.dim(2);
  return reshape(permute(reshape(x, {batch, heads, T, P}), {0, 2, 1, 3}), {batch, T, heads * P});
}

struct V1Streams {
  Tensor x, b, c, dt, a;
};

V1Streams v1_streams(const SsmV1Weights& w, const Tensor& xn) {
  V1Streams s;
  s.x = linear(xn, w.w_x);
  s.b = linear(xn, w.w_b);
  s.c = linear(xn, w.w_c);
  s.dt = softplus(linear(silu(linear(s.x, w.dt_w1, w.dt_b1)), w.dt_w2, w.dt_b2));
  s.a = neg(softplus(w.a_raw));
  return s;
}

struct V2Streams {
  Tensor x, b, c, a;
};

V2Streams v2_streams(const SsmV2Weights& w, const Tensor& xn) {
  return {linear(xn, w.w_x), linear(xn, w.w_b), linear(xn, w.w_c), sigmoid(linear(xn, w.w_decay, w.b_decay))};
}

void require_btd(const Tensor& xn, const ModelSpec& spec, const char* op) {
  if (xn.rank() != 3 || xn.dim(2) != sz(spec.d_model)) {
    throw DimensionError(std::string(op) + ": expected [B, T, " + std::to_string(spec.d_model) + "], got " +
                         shape_str(xn.shape()));
  }
  if (xn.dim(1) > sz(spec.max_seq_len)) throw ContractError(std::string(op) + ": sequence longer than max_seq_len");
}

}  // namespace

Tensor attention_matrix(const ModelSpec& spec, const AttentionWeights& w, const Tensor& xn) {
  require_btd(xn, spec, "attention_matrix");
  const std::size_t B = xn.dim(0), T = xn.dim(1), H = sz(spec.n_heads);
  const Tensor q = split_heads(linear(xn, w.w_q), H);
  const Tensor k = split_heads(linear(xn, w.w_k), H);
  const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(spec.head_dim)));
  return reshape(softmax_rows(causal_fill(scores)), {B, H, T, T});
}

Tensor mixer_forward(const ModelSpec& spec, const MixerWeights& mixer, const Tensor& xn) {
  require_btd(xn, spec, "mixer_forward");
  const std::size_t B = xn.dim(0), T = xn.dim(1), H = sz(spec.n_heads);
  if (const auto* w = std::get_if<AttentionWeights>(&mixer)) {
    const Tensor p = reshape(attention_matrix(spec, *w, xn), {B * H, T, T});
    const Tensor v = split_heads(linear(xn, w->w_v), H);
    return linear(merge_heads(matmul(p, v), B, H), w->w_o);
  }
  if (const auto* w = std::get_if<SsmV1Weights>(&mixer)) {
    const V1Streams s = v1_streams(*w, xn);
    return linear(ssm_v1_scan(s.x, s.b, s.c, s.dt, s.a, sz(spec.state_size), spec.ssm_v1_scale_c), w->w_o);
  }
  const auto& w = std::get<SsmV2Weights>(mixer);
  const V2Streams s = v2_streams(w, xn);
  return linear(ssm_v2_scan(s.x, s.b, s.c, s.a, H, sz(spec.state_size)), w.w_o);
}

Tensor materialize_mixer_v2(const ModelSpec& spec, const SsmV2Weights& w, const Tensor& xn) {
  require_btd(xn, spec, "materialize_mixer");
  const std::size_t B = xn.dim(0), T = xn.dim(1), H = sz(spec.n_heads), N = sz(spec.state_size);
  const V2Streams s = v2_streams(w, xn);
  const Tensor c = split_heads(s.c, H);                       // [BH, T, N]
  const Tensor b = split_heads(s.b, H);                       // [BH, T, N]
  const Tensor kernel = matmul(c, transpose(b));              // [BH, T, T]
  const Tensor log_a = reshape(permute(log(s.a), {0, 2, 1}), {B * H, T});
  const Tensor cum = cumsum(log_a, 1);
  // seg[t, s] = sum_{r=s+1..t} log a_r
  const Tensor seg = sub(reshape(cum, {B * H, T, 1}), reshape(cum, {B * H, 1, T}));
  const Tensor decay = exp(causal_fill(seg));
  (void)N;
  return reshape(mul(kernel, decay), {B, H, T, T});
}

Tensor materialize_channel_mixer_v1(const ModelSpec& spec, const SsmV1Weights& w, const Tensor& xn) {
  require_btd(xn, spec, "materialize_mixer");
  const std::size_t B = xn.dim(0), T = xn.dim(1), D = sz(spec.d_model), N = sz(spec.state_size);
  const std::size_t G = D / N;
  const V1Streams s = v1_streams(w, xn);
  // Per-channel copies of the group's B and C: channel d = g*N + j.
  const auto per_channel = [&](const Tensor& v) {
    return reshape(broadcast_to(reshape(v, {B, T, G, 1, N}), {B, T, G, N, N}), {B, T, D, N});
  };
  const Tensor dt4 = reshape(s.dt, {B, T, D, 1});
  const Tensor log_decay = mul(dt4, s.a);                                   // [B, T, D, N]
  const Tensor cum = permute(cumsum(log_decay, 1), {0, 2, 3, 1});           // [B, D, N, T]
  const Tensor seg = sub(reshape(cum, {B, D, N, T, 1}), reshape(cum, {B, D, N, 1, T}));
  const Tensor decay = exp(causal_fill(seg));                               // [B, D, N, T, T]
  Tensor c = per_channel(s.c);
  if (spec.ssm_v1_scale_c) c = mul(c, dt4);
  const Tensor b_bar = mul(per_channel(s.b), dt4);                          // [B, T, D, N]
  const Tensor cp = reshape(permute(c, {0, 2, 3, 1}), {B, D, N, T, 1});
  const Tensor bp = reshape(permute(b_bar, {0, 2, 3, 1}), {B, D, N, 1, T});
  return sum(mul(mul(cp, decay), bp), 2);                                   // [B, D, T, T]
}

Tensor materialize_mixer_v1(const ModelSpec& spec, const SsmV1Weights& w, const Tensor& xn) {
  const Tensor per_channel = materialize_channel_mixer_v1(spec, w, xn);
  const std::size_t B = per_channel.dim(0), T = per_channel.dim(2);
  const std::size_t N = sz(spec.state_size), G = sz(spec.d_model) / N;
  return mean(reshape(per_channel, {B, G, N, T, T}), 2);
}

Tensor materialize_mixer(const ModelSpec& spec, const MixerWeights& mixer, const Tensor& xn) {
  if (const auto* w = std::get_if<AttentionWeights>(&mixer)) return attention_matrix(spec, *w, xn);
  if (const auto* w = std::get_if<SsmV1Weights>(&mixer)) return materialize_mixer_v1(spec, *w, xn);
  return materialize_mixer_v2(spec, std::get<SsmV2Weights>(mixer), xn);
}

}  // namespace dlab
