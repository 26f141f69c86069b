#include "dlab/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dlab/error.hpp"
#include "dlab/ssm.hpp"

namespace dlab {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

// The scalar functions below mirror the tensor ops term by term so decode
// and full forward agree to rounding.
double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }
double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void rmsnorm_rows(std::span<const double> x, std::span<const double> w, double eps, std::size_t rows, std::size_t n,
                  std::vector<double>& out) {
  out.resize(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] * inv * w[j];
  }
}

void linear_rows(std::span<const double> x, const Tensor& w, const Tensor& bias, std::size_t rows,
                 std::vector<double>& out) {
  const std::size_t k = w.dim(0), n = w.dim(1);
  out.resize(rows * n);
  gemm(x.data(), w.data().data(), out.data(), rows, k, n, false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  }
}

struct Scratch {
  std::vector<double> xn, q, k, v, o, y, dt_h, dt, b, c, a, up;
};

void attention_step(const ModelSpec& spec, const AttentionWeights& w, AttentionCache& cache, std::size_t rows,
                    std::size_t pos, Scratch& s) {
  const std::size_t D = sz(spec.d_model), H = sz(spec.n_heads), P = sz(spec.head_dim);
  linear_rows(s.xn, w.w_q, {}, rows, s.q);
  linear_rows(s.xn, w.w_k, {}, rows, s.k);
  linear_rows(s.xn, w.w_v, {}, rows, s.v);
  const std::size_t L = pos + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.head_dim));
  s.o.assign(rows * D, 0.0);
  std::vector<double> p(L);
  for (std::size_t r = 0; r < rows; ++r) {
    auto& K = cache.keys[r];
    auto& Vc = cache.values[r];
    K.insert(K.end(), s.k.begin() + static_cast<std::ptrdiff_t>(r * D), s.k.begin() + static_cast<std::ptrdiff_t>((r + 1) * D));
    Vc.insert(Vc.end(), s.v.begin() + static_cast<std::ptrdiff_t>(r * D), s.v.begin() + static_cast<std::ptrdiff_t>((r + 1) * D));
    for (std::size_t h = 0; h < H; ++h) {
      const double* qh = s.q.data() + r * D + h * P;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t u = 0; u < L; ++u) {
        const double* kh = K.data() + u * D + h * P;
        double dot = 0.0;
        for (std::size_t j = 0; j < P; ++j) dot += qh[j] * kh[j];
        p[u] = dot * scale;
        mx = std::max(mx, p[u]);
      }
      double total = 0.0;
      for (std::size_t u = 0; u < L; ++u) {
        p[u] = std::exp(p[u] - mx);
        total += p[u];
      }
      const double inv = 1.0 / total;
      double* oh = s.o.data() + r * D + h * P;
      for (std::size_t u = 0; u < L; ++u) {
        const double pu = p[u] * inv;
        const double* vh = Vc.data() + u * D + h * P;
        for (std::size_t j = 0; j < P; ++j) oh[j] += pu * vh[j];
      }
    }
  }
  linear_rows(s.o, w.w_o, {}, rows, s.y);
}

void ssm_v1_decode(const ModelSpec& spec, const SsmV1Weights& w, SsmV1State& state, std::size_t rows, Scratch& s) {
  const std::size_t D = sz(spec.d_model), N = sz(spec.state_size);
  linear_rows(s.xn, w.w_x, {}, rows, s.v);
  linear_rows(s.xn, w.w_b, {}, rows, s.b);
  linear_rows(s.xn, w.w_c, {}, rows, s.c);
  linear_rows(s.v, w.dt_w1, w.dt_b1, rows, s.dt_h);
  for (auto& x : s.dt_h) x = silu_scalar(x);
  linear_rows(s.dt_h, w.dt_w2, w.dt_b2, rows, s.dt);
  for (auto& x : s.dt) x = softplus_scalar(x);
  const auto raw = w.a_raw.data();
  s.a.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) s.a[i] = -softplus_scalar(raw[i]);
  s.o.resize(rows * D);
  const SsmV1Dims dims{D, N};
  for (std::size_t r = 0; r < rows; ++r) {
    ssm_v1_step_inplace(dims, std::span<double>(state.h).subspan(r * D * N, D * N),
                        std::span<const double>(s.v).subspan(r * D, D), std::span<const double>(s.b).subspan(r * D, D),
                        std::span<const double>(s.c).subspan(r * D, D), std::span<const double>(s.dt).subspan(r * D, D),
                        s.a, spec.ssm_v1_scale_c, std::span<double>(s.o).subspan(r * D, D));
  }
  linear_rows(s.o, w.w_o, {}, rows, s.y);
}

void ssm_v2_decode(const ModelSpec& spec, const SsmV2Weights& w, SsmV2State& state, std::size_t rows, Scratch& s) {
  const std::size_t D = sz(spec.d_model), H = sz(spec.n_heads), N = sz(spec.state_size), P = sz(spec.head_dim);
  linear_rows(s.xn, w.w_x, {}, rows, s.v);
  linear_rows(s.xn, w.w_b, {}, rows, s.b);
  linear_rows(s.xn, w.w_c, {}, rows, s.c);
  linear_rows(s.xn, w.w_decay, w.b_decay, rows, s.a);
  for (auto& x : s.a) x = sigmoid_scalar(x);
  s.o.resize(rows * D);
  const SsmV2Dims dims{H, N, P};
  const std::size_t SZ = H * N * P;
  for (std::size_t r = 0; r < rows; ++r) {
    ssm_v2_step_inplace(dims, std::span<double>(state.s).subspan(r * SZ, SZ),
                        std::span<const double>(s.v).subspan(r * D, D),
                        std::span<const double>(s.b).subspan(r * H * N, H * N),
                        std::span<const double>(s.c).subspan(r * H * N, H * N),
                        std::span<const double>(s.a).subspan(r * H, H), std::span<double>(s.o).subspan(r * D, D));
  }
  linear_rows(s.o, w.w_o, {}, rows, s.y);
}

}  // namespace

DecodeState::DecodeState(const Model& model, std::size_t batch)
    : batch_(batch), width_(static_cast<std::size_t>(model.spec.d_model)) {
  if (batch == 0) throw ContractError("decode batch must be positive");
  const ModelSpec& spec = model.spec;
  const std::size_t D = sz(spec.d_model), N = sz(spec.state_size), H = sz(spec.n_heads), P = sz(spec.head_dim);
  for (const auto& b : model.blocks) {
    kinds_.push_back(b.kind());
    switch (b.kind()) {
      case LayerKind::attention:
        layers_.emplace_back(AttentionCache{std::vector<std::vector<double>>(batch), std::vector<std::vector<double>>(batch)});
        break;
      case LayerKind::ssm_v1:
        layers_.emplace_back(SsmV1State{std::vector<double>(batch * D * N, 0.0)});
        break;
      case LayerKind::ssm_v2:
        layers_.emplace_back(SsmV2State{std::vector<double>(batch * H * N * P, 0.0)});
        break;
    }
  }
}

std::size_t DecodeState::layer_bytes(std::size_t layer) const {
  return std::visit(
      [](const auto& st) -> std::size_t {
        using S = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<S, AttentionCache>) {
          std::size_t n = 0;
          for (const auto& k : st.keys) n += k.size();
          for (const auto& v : st.values) n += v.size();
          return n * sizeof(double);
        } else if constexpr (std::is_same_v<S, SsmV1State>) {
          return st.h.size() * sizeof(double);
        } else {
          return st.s.size() * sizeof(double);
        }
      },
      layers_.at(layer));
}

std::size_t DecodeState::bytes() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) n += layer_bytes(i);
  return n;
}

void DecodeState::reserve(std::size_t len) {
  for (auto& layer : layers_) {
    if (auto* c = std::get_if<AttentionCache>(&layer)) {
      for (auto& k : c->keys) k.reserve(len * width_);
      for (auto& v : c->values) v.reserve(len * width_);
    }
  }
}

DecodeState DecodeState::replicate(std::size_t rows) const {
  if (batch_ != 1) throw ContractError("replicate requires a single-row state");
  if (rows == 0) throw ContractError("replicate to zero rows");
  DecodeState out = *this;
  out.batch_ = rows;
  for (auto& l : out.layers_) {
    std::visit(
        [rows](auto& st) {
          using S = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<S, AttentionCache>) {
            st.keys.assign(rows, st.keys[0]);
            st.values.assign(rows, st.values[0]);
          } else if constexpr (std::is_same_v<S, SsmV1State>) {
            const auto one = st.h;
            st.h.clear();
            for (std::size_t r = 0; r < rows; ++r) st.h.insert(st.h.end(), one.begin(), one.end());
          } else {
            const auto one = st.s;
            st.s.clear();
            for (std::size_t r = 0; r < rows; ++r) st.s.insert(st.s.end(), one.begin(), one.end());
          }
        },
        l);
  }
  return out;
}

void DecodeState::select_rows(const std::vector<std::size_t>& rows) {
  for (auto r : rows) {
    if (r >= batch_) throw ContractError("select_rows: row index out of range");
  }
  const std::size_t old_batch = batch_;
  for (auto& l : layers_) {
    std::visit(
        [&rows, old_batch](auto& st) {
          using S = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<S, AttentionCache>) {
            std::vector<std::vector<double>> k, v;
            for (auto r : rows) {
              k.push_back(std::move(st.keys[r]));
              v.push_back(std::move(st.values[r]));
            }
            st.keys = std::move(k);
            st.values = std::move(v);
          } else {
            auto& buf = [&]() -> std::vector<double>& {
              if constexpr (std::is_same_v<S, SsmV1State>) return st.h;
              else return st.s;
            }();
            const std::size_t per = buf.size() / old_batch;
            std::vector<double> next;
            next.reserve(rows.size() * per);
            for (auto r : rows) {
              next.insert(next.end(), buf.begin() + static_cast<std::ptrdiff_t>(r * per),
                          buf.begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
            }
            buf = std::move(next);
          }
        },
        l);
  }
  batch_ = rows.size();
}

std::vector<double> decode_step(const Model& model, DecodeState& state, std::span<const int> tokens) {
  const ModelSpec& spec = model.spec;
  const std::size_t rows = state.batch_;
  const std::size_t D = sz(spec.d_model), V = sz(spec.vocab_size), F = sz(spec.mlp_hidden);
  if (tokens.size() != rows) {
    throw ContractError("decode_step: got " + std::to_string(tokens.size()) + " tokens for batch " +
                        std::to_string(rows));
  }
  if (state.kinds_.size() != model.blocks.size()) throw ContractError("decode_step: state belongs to another model");
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    if (state.kinds_[i] != model.blocks[i].kind()) throw ContractError("decode_step: layer kind mismatch");
    if (const auto* c = std::get_if<AttentionCache>(&state.layers_[i])) {
      for (const auto& k : c->keys) {
        if (k.size() != state.position_ * D) throw ContractError("decode_step: cache length disagrees with position");
      }
    }
  }
  const std::size_t pos = state.position_;
  if (pos >= sz(spec.max_seq_len)) throw ContractError("decode_step: position exceeds max_seq_len");

  std::vector<double> x(rows * D);
  const auto tok = model.tok_emb.data();
  const auto pe = model.pos_emb.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const int id = tokens[r];
    if (id < 0 || sz(id) >= V) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    for (std::size_t j = 0; j < D; ++j) x[r * D + j] = tok[sz(id) * D + j] + pe[pos * D + j];
  }

  Scratch s;
  std::vector<double> h(rows * D);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const BlockWeights& b = model.blocks[i];
    rmsnorm_rows(x, b.norm_mixer.data(), spec.rmsnorm_eps, rows, D, s.xn);
    if (const auto* w = std::get_if<AttentionWeights>(&b.mixer)) {
      attention_step(spec, *w, std::get<AttentionCache>(state.layers_[i]), rows, pos, s);
    } else if (const auto* w = std::get_if<SsmV1Weights>(&b.mixer)) {
      ssm_v1_decode(spec, *w, std::get<SsmV1State>(state.layers_[i]), rows, s);
    } else {
      ssm_v2_decode(spec, std::get<SsmV2Weights>(b.mixer), std::get<SsmV2State>(state.layers_[i]), rows, s);
    }
    for (std::size_t j = 0; j < rows * D; ++j) h[j] = x[j] + s.y[j];
    rmsnorm_rows(h, b.norm_mlp.data(), spec.rmsnorm_eps, rows, D, s.xn);
    linear_rows(s.xn, b.mlp.w_up, b.mlp.b_up, rows, s.up);
    for (auto& u : s.up) u = silu_scalar(u);
    (void)F;
    linear_rows(s.up, b.mlp.w_down, b.mlp.b_down, rows, s.y);
    for (std::size_t j = 0; j < rows * D; ++j) x[j] = h[j] + s.y[j];
  }
  rmsnorm_rows(x, model.norm_final.data(), spec.rmsnorm_eps, rows, D, s.xn);
  std::vector<double> logits;
  linear_rows(s.xn, model.lm_head, {}, rows, logits);
  state.position_ = pos + 1;
  return logits;
}

std::vector<double> prefill(const Model& model, DecodeState& state, std::span<const int> prompt) {
  if (prompt.empty()) throw DataError("prefill: empty prompt");
  std::vector<int> column(state.batch());
  std::vector<double> logits;
  for (int id : prompt) {
    std::fill(column.begin(), column.end(), id);
    logits = decode_step(model, state, column);
  }
  return logits;
}

std::size_t projected_state_bytes(const ModelSpec& spec, std::size_t batch, std::size_t len) {
  const std::size_t D = sz(spec.d_model), N = sz(spec.state_size), H = sz(spec.n_heads), P = sz(spec.head_dim);
  std::size_t per_row = 0;
  for (auto kind : spec.layer_kinds) {
    switch (kind) {
      case LayerKind::attention:
        per_row += 2 * len * D;
        break;
      case LayerKind::ssm_v1:
        per_row += D * N;
        break;
      case LayerKind::ssm_v2:
        per_row += H * N * P;
        break;
    }
  }
  return batch * per_row * sizeof(double);
}

}  // namespace dlab
