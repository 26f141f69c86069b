#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "dlab/decode.hpp"
#include "dlab/error.hpp"
#include "dlab/models.hpp"
#include "dlab/rng.hpp"
#include "dlab/ssm.hpp"
#include "oracles.hpp"

using namespace dlab;

namespace {

ModelSpec small_spec(std::vector<LayerKind> kinds) {
  ModelSpec s;
  s.d_model = 8;
  s.n_heads = 2;
  s.head_dim = 4;
  s.state_size = 4;
  s.mlp_hidden = 16;
  s.max_seq_len = 64;
  s.n_layers = static_cast<int>(kinds.size());
  s.layer_kinds = std::move(kinds);
  return s;
}

// Random-init model with every mixer perturbed away from its structured init.
Model random_model(std::vector<LayerKind> kinds, std::uint64_t seed) {
  Model m = init_model(small_spec(std::move(kinds)), seed);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) oracle::randomize_mixer(m.blocks[l].mixer, seed * 31 + l, 0.4);
  return m;
}

std::vector<int> random_tokens(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (auto& v : t) v = 2 + static_cast<int>(rng.below(95));
  return t;
}

const std::vector<std::vector<LayerKind>>& architectures() {
  using K = LayerKind;
  static const std::vector<std::vector<LayerKind>> a{
      {K::attention, K::attention}, {K::ssm_v1, K::ssm_v1}, {K::ssm_v2, K::ssm_v2}, {K::attention, K::ssm_v1, K::ssm_v2}};
  return a;
}

}  // namespace

TEST(Forward, SingleTokenShape) {
  const Model m = init_model(small_spec({LayerKind::attention}), 1);
  const Tensor logits = forward(m, TokenBatch{1, 1, {5}});
  EXPECT_EQ(logits.shape(), (Shape{1, 1, 97}));
}

TEST(Forward, InputErrors) {
  const Model m = init_model(small_spec({LayerKind::attention}), 1);
  EXPECT_THROW(forward(m, TokenBatch{1, 1, {97}}), DataError);
  EXPECT_THROW(forward(m, TokenBatch{1, 65, std::vector<int>(65, 3)}), ContractError);
}

TEST(Forward, CausalUnderSuffixRemoval) {
  for (const auto& kinds : architectures()) {
    const Model m = random_model(kinds, 3);
    const auto toks = random_tokens(12, 4);
    NoGradGuard ng;
    const Tensor full = forward(m, TokenBatch{1, 12, toks});
    for (std::size_t t : {1u, 5u, 11u}) {
      const Tensor part = forward(m, TokenBatch{1, t, std::vector<int>(toks.begin(), toks.begin() + t)});
      for (std::size_t i = 0; i < part.numel(); ++i) ASSERT_EQ(part.data()[i], full.data()[i]) << "t=" << t;
    }
  }
}

TEST(Attention, MixerMatchesNaiveReference) {
  const ModelSpec spec = small_spec({LayerKind::attention});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MixerWeights mixer = init_mixer(spec, LayerKind::attention, seed);
    oracle::randomize_mixer(mixer, seed, 0.6);
    const Tensor xn = oracle::random_input(2, 9, 8, seed);
    const Tensor fast = mixer_forward(spec, mixer, xn);
    const auto naive = oracle::naive_attention(spec, std::get<AttentionWeights>(mixer), xn);
    EXPECT_LT(oracle::max_abs_diff(fast.data(), naive), 1e-10);
  }
}

TEST(Attention, MatrixRowsAndNaiveProbabilities) {
  const ModelSpec spec = small_spec({LayerKind::attention});
  MixerWeights mixer = init_mixer(spec, LayerKind::attention, 2);
  oracle::randomize_mixer(mixer, 2, 0.7);
  const auto& w = std::get<AttentionWeights>(mixer);
  const std::size_t T = 7, D = 8, P = 4;
  const Tensor xn = oracle::random_input(1, T, D, 9);
  const Tensor m = attention_matrix(spec, w, xn);
  ASSERT_EQ(m.shape(), (Shape{1, 2, T, T}));
  const Tensor q = linear(xn, w.w_q), k = linear(xn, w.w_k);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(m.data()[(h * T) * T], 1.0);  // row 0 is one-hot
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> e(t + 1);
      double z = 0.0, row = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t p = 0; p < P; ++p) dot += q.data()[t * D + h * P + p] * k.data()[s * D + h * P + p];
        e[s] = std::exp(dot / 2.0);
        z += e[s];
      }
      for (std::size_t s = 0; s < T; ++s) {
        const double got = m.data()[((h * T) + t) * T + s];
        row += got;
        EXPECT_NEAR(got, s <= t ? e[s] / z : 0.0, 1e-12);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
  }
}

TEST(Attention, UniformQueriesGiveUniformRows) {
  const ModelSpec spec = small_spec({LayerKind::attention});
  MixerWeights mixer = init_mixer(spec, LayerKind::attention, 2);
  auto& w = std::get<AttentionWeights>(mixer);
  for (auto& v : w.w_q.mutable_data()) v = 0.0;
  const std::size_t T = 6;
  const Tensor m = attention_matrix(spec, w, oracle::random_input(1, T, 8, 1));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s <= t; ++s) EXPECT_NEAR(m.data()[t * T + s], 1.0 / static_cast<double>(t + 1), 1e-15);
  }
}

TEST(SsmV1Step, ZeroStepFreezesState) {
  const SsmV1Dims dims{2, 2};
  const std::vector<double> h{0.3, -1.0, 2.0, 0.5};
  const auto r = ssm_v1_step(dims, h, std::vector<double>{4.0, -3.0}, std::vector<double>{1.0, 2.0},
                             std::vector<double>{0.5, 0.5}, std::vector<double>{0.0, 0.0},
                             std::vector<double>{-1.0, -2.0, -0.5, -3.0});
  EXPECT_EQ(r.h, h);
}

TEST(SsmV1Step, GeometricHandRecurrence) {
  // Two channels in one group of Ns = 2; channel 0 carries x = 1 with
  // a = -ln 2, dt = 1, B = C = e1. Channel 1 sees no input.
  const SsmV1Dims dims{2, 2};
  const double ln2 = std::numbers::ln2;
  std::vector<double> h(4, 0.0);
  const std::vector<double> expected{1.0, 1.5, 1.75};
  for (double want : expected) {
    auto r = ssm_v1_step(dims, h, std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 0.0},
                         std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 1.0}, std::vector<double>(4, -ln2));
    EXPECT_NEAR(r.y[0], want, 1e-15);
    EXPECT_EQ(r.y[1], 0.0);
    h = r.h;
  }
}

TEST(SsmV1Step, StepSizeErrors) {
  const SsmV1Dims dims{1, 1};
  const std::vector<double> one{1.0};
  EXPECT_THROW(ssm_v1_step(dims, one, one, one, one, std::vector<double>{std::nan("")}, std::vector<double>{-1.0}),
               NumericError);
  EXPECT_THROW(ssm_v1_step(dims, one, one, one, one, std::vector<double>{-0.5}, std::vector<double>{-1.0}),
               ContractError);
}

TEST(SsmV1Step, DecayBoundAndLongRunStability) {
  const SsmV1Dims dims{4, 2};
  Rng rng(17);
  std::vector<double> h(8, 0.0), y(4);
  std::vector<double> x(4), b(4), c(4), dt(4), a(8);
  for (int t = 0; t < 10000; ++t) {
    for (auto& v : x) v = rng.uniform(-1e3, 1e3);
    for (auto& v : b) v = rng.uniform(-1.0, 1.0);
    for (auto& v : c) v = rng.uniform(-1.0, 1.0);
    for (auto& v : dt) v = rng.uniform(0.0, 2.0);
    for (auto& v : a) v = -rng.uniform(0.0, 3.0);
    for (std::size_t d = 0; d < 4; ++d) {
      for (std::size_t n = 0; n < 2; ++n) {
        const double decay = std::exp(dt[d] * a[d * 2 + n]);
        ASSERT_GT(decay, 0.0);
        ASSERT_LE(decay, 1.0);
      }
    }
    ssm_v1_step_inplace(dims, h, x, b, c, dt, a, false, y);
    for (double v : h) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(SsmV1, ModelStepSizesAndDecaysInRange) {
  const Model m = random_model({LayerKind::ssm_v1}, 8);
  const auto& w = std::get<SsmV1Weights>(m.blocks[0].mixer);
  const Tensor xn = oracle::random_input(2, 10, 8, 3);
  const Tensor dt = softplus(linear(silu(linear(linear(xn, w.w_x), w.dt_w1, w.dt_b1)), w.dt_w2, w.dt_b2));
  const Tensor a = neg(softplus(w.a_raw));
  for (double d : dt.data()) ASSERT_GE(d, 0.0);
  for (double d : dt.data()) {
    for (double av : a.data()) {
      const double decay = std::exp(d * av);
      ASSERT_GT(decay, 0.0);
      ASSERT_LE(decay, 1.0);
    }
  }
}

TEST(SsmV1, InitialStepSizeIsLn2AndDecayHalf) {
  const ModelSpec spec = small_spec({LayerKind::ssm_v1});
  const auto w = std::get<SsmV1Weights>(init_mixer(spec, LayerKind::ssm_v1, 4));
  const Tensor xn = oracle::random_input(1, 3, 8, 2);
  const Tensor dt = softplus(linear(silu(linear(linear(xn, w.w_x), w.dt_w1, w.dt_b1)), w.dt_w2, w.dt_b2));
  const Tensor a = neg(softplus(w.a_raw));
  for (double d : dt.data()) EXPECT_NEAR(d, std::numbers::ln2, 1e-15);
  for (double av : a.data()) EXPECT_NEAR(av, -1.0, 1e-15);
}

TEST(SsmV2Step, NearUnitDecayIsCumulativeSum) {
  const SsmV2Dims dims{1, 2, 1};
  std::vector<double> s(2, 0.0);
  const std::vector<double> e1{1.0, 0.0};
  const std::vector<double> xs{0.5, -1.0, 2.0, 0.25};
  double running = 0.0;
  for (double x : xs) {
    auto r = ssm_v2_step(dims, s, std::vector<double>{x}, e1, e1, std::vector<double>{1.0 - 1e-15});
    running += x;
    EXPECT_NEAR(r.y[0], running, 1e-12);
    s = r.s;
  }
}

TEST(SsmV2Step, VanishingDecayIsMemoryless) {
  const SsmV2Dims dims{1, 2, 2};
  std::vector<double> s{5.0, -4.0, 3.0, 2.0};
  const std::vector<double> b{0.5, -1.0}, c{2.0, 3.0}, x{1.5, -0.5};
  auto r = ssm_v2_step(dims, s, x, b, c, std::vector<double>{1e-300});
  const double cb = 2.0 * 0.5 + 3.0 * -1.0;
  EXPECT_NEAR(r.y[0], cb * 1.5, 1e-12);
  EXPECT_NEAR(r.y[1], cb * -0.5, 1e-12);
}

TEST(SsmV2Step, DecayOutsideOpenIntervalIsContractError) {
  const SsmV2Dims dims{1, 1, 1};
  const std::vector<double> one{1.0};
  EXPECT_THROW(ssm_v2_step(dims, one, one, one, one, std::vector<double>{0.0}), ContractError);
  EXPECT_THROW(ssm_v2_step(dims, one, one, one, one, std::vector<double>{1.0}), ContractError);
}

TEST(Duality, ScanStepsAndMatrixAgreeOnRandomConfigs) {
  for (auto kind : {LayerKind::ssm_v1, LayerKind::ssm_v2}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const ModelSpec spec = oracle::random_ssm_spec(kind, seed);
      MixerWeights mixer = init_mixer(spec, kind, seed);
      oracle::randomize_mixer(mixer, seed, 0.5);
      Rng rng(seed);
      const std::size_t L = 1 + rng.below(32);
      const Tensor xn = oracle::random_input(2, L, static_cast<std::size_t>(spec.d_model), seed + 100);
      const auto r = oracle::check_duality(spec, mixer, xn);
      EXPECT_LT(r.scan_vs_matrix, 1e-8) << to_string(kind) << " seed " << seed;
      EXPECT_LT(r.scan_vs_steps, 1e-8) << to_string(kind) << " seed " << seed;
      EXPECT_TRUE(r.upper_triangle_zero) << to_string(kind) << " seed " << seed;
    }
  }
}

TEST(Duality, SingleTokenMatrixIsCB) {
  const ModelSpec spec = small_spec({LayerKind::ssm_v2});
  MixerWeights mixer = init_mixer(spec, LayerKind::ssm_v2, 1);
  oracle::randomize_mixer(mixer, 1);
  const auto& w = std::get<SsmV2Weights>(mixer);
  const Tensor xn = oracle::random_input(1, 1, 8, 5);
  const Tensor m = materialize_mixer_v2(spec, w, xn);
  const Tensor b = linear(xn, w.w_b), c = linear(xn, w.w_c);
  for (std::size_t h = 0; h < 2; ++h) {
    double cb = 0.0;
    for (std::size_t n = 0; n < 4; ++n) cb += c.data()[h * 4 + n] * b.data()[h * 4 + n];
    EXPECT_NEAR(m.data()[h], cb, 1e-14);
  }
}

TEST(Decode, LogitsEqualFullForwardAtEveryPosition) {
  for (const auto& kinds : architectures()) {
    const Model m = random_model(kinds, 5);
    const auto toks = random_tokens(20, 6);
    NoGradGuard ng;
    const Tensor full = forward(m, TokenBatch{1, toks.size(), toks});
    DecodeState state(m, 1);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      const auto logits = decode_step(m, state, std::span<const int>(&toks[t], 1));
      EXPECT_LT(oracle::max_abs_diff(logits, full.data().subspan(t * 97, 97)), 1e-8) << "t=" << t;
    }
    EXPECT_EQ(state.position(), toks.size());
  }
}

TEST(Decode, GreedyMatchesFullForwardGreedy) {
  for (const auto& kinds : architectures()) {
    const Model m = random_model(kinds, 9);
    const auto prompt = random_tokens(6, 10);
    EXPECT_EQ(oracle::greedy_by_decode(m, prompt, 8), oracle::greedy_by_full_forward(m, prompt, 8));
  }
}

TEST(Decode, ReplicatedRowsMatchSingleRow) {
  const Model m = random_model({LayerKind::attention, LayerKind::ssm_v1, LayerKind::ssm_v2}, 12);
  const auto prompt = random_tokens(5, 13);
  DecodeState one(m, 1);
  const auto first = prefill(m, one, prompt);
  DecodeState many = one.replicate(3);
  const std::vector<int> next{7, 9, 7};
  const auto logits = decode_step(m, many, next);
  DecodeState solo = one.replicate(1);
  const auto ref = decode_step(m, solo, std::span<const int>(&next[0], 1));
  EXPECT_EQ(std::vector<double>(logits.begin(), logits.begin() + 97), ref);
  EXPECT_EQ(std::vector<double>(logits.begin() + 2 * 97, logits.end()), ref);

  many.select_rows({2, 1});
  EXPECT_EQ(many.batch(), 2u);
  const std::vector<int> again{4, 4};
  const auto after = decode_step(m, many, again);
  EXPECT_EQ(std::vector<double>(after.begin(), after.begin() + 97),
            decode_step(m, solo, std::span<const int>(&again[0], 1)));
  (void)first;
}

TEST(Decode, StateMismatchesAreContractErrors) {
  const Model a = random_model({LayerKind::attention}, 1);
  const Model b = random_model({LayerKind::ssm_v2}, 1);
  DecodeState state(a, 2);
  const std::vector<int> one{3};
  EXPECT_THROW(decode_step(a, state, one), ContractError);
  const std::vector<int> two{3, 4};
  EXPECT_THROW(decode_step(b, state, two), ContractError);
  EXPECT_THROW(decode_step(a, state, std::vector<int>{3, 200}), DataError);
}

TEST(Decode, SsmStateBytesConstantAndCacheGrowsLinearly) {
  ModelSpec spec = small_spec({LayerKind::ssm_v1, LayerKind::ssm_v2, LayerKind::attention});
  spec.max_seq_len = 600;
  const Model m = init_model(spec, 3);
  DecodeState state(m, 2);
  const std::size_t v1_bytes = state.layer_bytes(0), v2_bytes = state.layer_bytes(1);
  const std::vector<int> toks{5, 6};
  for (std::size_t t = 0; t < 512; ++t) {
    decode_step(m, state, toks);
    ASSERT_EQ(state.layer_bytes(0), v1_bytes);
    ASSERT_EQ(state.layer_bytes(1), v2_bytes);
    const auto& cache = std::get<AttentionCache>(state.layers()[2]);
    ASSERT_EQ(cache.keys[0].size(), (t + 1) * 8);
    ASSERT_EQ(state.layer_bytes(2), 2 * 2 * (t + 1) * 8 * sizeof(double));
  }
  EXPECT_EQ(state.bytes(), projected_state_bytes(spec, 2, 512));
  EXPECT_EQ(v1_bytes, 2 * 8 * 4 * sizeof(double));
  EXPECT_EQ(v2_bytes, 2 * 2 * 4 * 4 * sizeof(double));
}

TEST(Models, SpreadLayersEvenlySpaced) {
  EXPECT_EQ(spread_layers(16, 4), (std::vector<std::size_t>{0, 5, 10, 15}));
  EXPECT_EQ(spread_layers(4, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(spread_layers(4, 0), (std::vector<std::size_t>{}));
}

TEST(Models, SpecValidation) {
  ModelSpec s = small_spec({LayerKind::attention});
  s.head_dim = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec({LayerKind::attention});
  s.state_size = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec({LayerKind::attention});
  s.n_layers = 2;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Models, SaveLoadRoundTrip) {
  const Model m = random_model({LayerKind::attention, LayerKind::ssm_v1, LayerKind::ssm_v2}, 21);
  const auto dir = std::filesystem::temp_directory_path() / "dlab_models_roundtrip";
  std::filesystem::create_directories(dir);
  save_model(dir / "m.ckpt", m);
  EXPECT_TRUE(std::filesystem::exists(spec_sidecar(dir / "m.ckpt")));
  const Model back = load_model(dir / "m.ckpt");
  EXPECT_EQ(back.spec, m.spec);
  const auto a = m.named_parameters(), b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
  }
  std::filesystem::remove_all(dir);
}
