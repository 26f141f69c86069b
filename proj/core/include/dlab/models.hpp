#pragma once

// Teacher Transformer, the two SSM student layer families, and hybrid stacks.
//
// Every block is pre-norm: h = x + mixer(norm(x)); out = h + mlp(norm(h)).
// Linear weights are stored [in, out] and applied as x W.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dlab/checkpoint.hpp"
#include "dlab/tensor.hpp"

namespace dlab {

enum class LayerKind { attention, ssm_v1, ssm_v2 };
std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view text);

struct ModelSpec {
  int vocab_size = 97;
  int d_model = 32;
  int n_layers = 4;
  std::vector<LayerKind> layer_kinds{4, LayerKind::attention};
  int n_heads = 4;
  int head_dim = 8;
  int state_size = 8;    // per-channel state for v1, per-head rows of S for v2
  int mlp_hidden = 128;
  int max_seq_len = 1024;
  double rmsnorm_eps = 1e-6;
  // Experiment flag: scale C by the step size in v1 layers (C undiscretized when false).
  bool ssm_v1_scale_c = false;

  int n_groups() const { return d_model / state_size; }
  int dt_hidden() const { return std::max(1, d_model / 4); }
  // ConfigError on inconsistent fields.
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(std::string_view text);

// Evenly spaced attention positions, e.g. 4 of 16 -> {0, 5, 10, 15}.
std::vector<std::size_t> spread_layers(std::size_t n_layers, std::size_t count);

struct MlpWeights {
  Tensor w_up, b_up, w_down, b_down;
};

struct AttentionWeights {
  Tensor w_q, w_k, w_v, w_o;  // each [D, D]; head h owns columns [h*hd, (h+1)*hd)
};

// Selective diagonal SSM. The C/B/x/output projections occupy the slots of
// attention's Q/K/V/O. Step size comes from a two-layer MLP on x; A is kept
// as a raw parameter with a = -softplus(a_raw) so a <= 0.
struct SsmV1Weights {
  Tensor w_c, w_b, w_x, w_o;     // [D, D]
  Tensor dt_w1, dt_b1;           // [D, D/4], [D/4]
  Tensor dt_w2, dt_b2;           // [D/4, D], [D]
  Tensor a_raw;                  // [D, Ns]
};

// Multi-head scalar-decay SSM: S_t = a_t S_{t-1} + B_t x_t^T, y_t = C_t^T S_t.
struct SsmV2Weights {
  Tensor w_x, w_o;               // [D, D]
  Tensor w_b, w_c;               // [D, H*Ns]
  Tensor w_decay, b_decay;       // [D, H], [H]; a_t = sigmoid(x W + b)
};

using MixerWeights = std::variant<AttentionWeights, SsmV1Weights, SsmV2Weights>;

struct BlockWeights {
  Tensor norm_mixer, norm_mlp;   // [D]
  MixerWeights mixer;
  MlpWeights mlp;

  LayerKind kind() const;
};

struct Model {
  ModelSpec spec;
  Tensor tok_emb;   // [V, D]
  Tensor pos_emb;   // [max_seq_len, D]
  std::vector<BlockWeights> blocks;
  Tensor norm_final;  // [D]
  Tensor lm_head;     // [D, V]

  // Stable names ("blocks.0.attn.w_q", ...), in a fixed order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> block_parameters(std::size_t layer) const;
  std::size_t parameter_count() const;
  // Deep copy of every parameter.
  Model clone() const;
  void set_requires_grad(bool on) const;
  void zero_grad() const;
};

Model init_model(const ModelSpec& spec, std::uint64_t seed);
// Fresh weights for one layer of the given kind (used by init and conversion).
MixerWeights init_mixer(const ModelSpec& spec, LayerKind kind, std::uint64_t seed);

void save_model(const std::filesystem::path& checkpoint, const Model& model);
// Reads `checkpoint` and its JSON sidecar (`checkpoint` + ".json").
Model load_model(const std::filesystem::path& checkpoint);
std::filesystem::path spec_sidecar(const std::filesystem::path& checkpoint);

// A batch of equal-length token sequences, row-major [batch, len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> tokens;
};

// ---------------------------------------------------------------------------
// Differentiable forward pieces.

// [B, T, D] token + position embeddings. DataError on ids >= vocab,
// ContractError when len > max_seq_len.
Tensor embed(const Model& model, const TokenBatch& batch);
// One decoder block on [B, T, D].
Tensor block_forward(const Model& model, std::size_t layer, const Tensor& x);
// Mixer only, applied to an already-normalized input [B, T, D].
Tensor mixer_forward(const ModelSpec& spec, const MixerWeights& mixer, const Tensor& xn);
Tensor mlp_forward(const MlpWeights& mlp, const Tensor& x);
// Final norm + projection to logits [B, T, V].
Tensor head(const Model& model, const Tensor& x);
Tensor forward(const Model& model, const TokenBatch& batch);

// Inputs to every block plus the final hidden state: size n_layers + 1.
std::vector<Tensor> forward_hidden(const Model& model, const TokenBatch& batch);

// ---------------------------------------------------------------------------
// Token-mixing matrices, lower triangular [B, heads-or-groups, T, T].

// Causal row-softmax of scaled Q K^T for an attention layer; xn is normalized input.
Tensor attention_matrix(const ModelSpec& spec, const AttentionWeights& w, const Tensor& xn);
// v2: per head, M[t,s] = C_t.B_s prod_{r=s+1..t} a_r.
Tensor materialize_mixer_v2(const ModelSpec& spec, const SsmV2Weights& w, const Tensor& xn);
// v1: exact per-channel matrices [B, D, T, T].
Tensor materialize_channel_mixer_v1(const ModelSpec& spec, const SsmV1Weights& w, const Tensor& xn);
// v1: per group, the mean of its channels' matrices [B, G, T, T].
Tensor materialize_mixer_v1(const ModelSpec& spec, const SsmV1Weights& w, const Tensor& xn);
Tensor materialize_mixer(const ModelSpec& spec, const MixerWeights& mixer, const Tensor& xn);

}  // namespace dlab
