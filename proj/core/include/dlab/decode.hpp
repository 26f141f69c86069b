#pragma once

// Incremental decoding without the autodiff tape.
//
// Attention layers keep a per-row key/value cache that grows by one entry per
// step; SSM layers keep a fixed-size recurrent state. decode_step reproduces
// the full-forward logits at the same position.

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

#include "dlab/models.hpp"

namespace dlab {

struct AttentionCache {
  // Per batch row, [len, D] row-major.
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
};
struct SsmV1State {
  std::vector<double> h;  // [B, D, Ns]
};
struct SsmV2State {
  std::vector<double> s;  // [B, H, Ns, hd]
};
using LayerState = std::variant<AttentionCache, SsmV1State, SsmV2State>;

class DecodeState {
 public:
  DecodeState(const Model& model, std::size_t batch);

  std::size_t batch() const { return batch_; }
  // Number of tokens consumed so far (same for every row).
  std::size_t position() const { return position_; }
  const std::vector<LayerState>& layers() const { return layers_; }

  // Bytes held by cached keys/values and recurrent states.
  std::size_t bytes() const;
  std::size_t layer_bytes(std::size_t layer) const;

  // Pre-sizes attention caches so decoding up to `len` tokens does not reallocate.
  void reserve(std::size_t len);
  // Copy of a single-row state replicated into `rows` rows.
  DecodeState replicate(std::size_t rows) const;
  // Keeps only the listed rows, in the given order.
  void select_rows(const std::vector<std::size_t>& rows);

 private:
  friend std::vector<double> decode_step(const Model&, DecodeState&, std::span<const int>);
  std::size_t batch_;
  std::size_t width_;
  std::size_t position_ = 0;
  std::vector<LayerState> layers_;
  std::vector<LayerKind> kinds_;
};

// Consumes one token per row and returns logits [batch * vocab].
// ContractError when the state does not belong to this model or the batch
// size differs; DataError on out-of-vocabulary ids.
std::vector<double> decode_step(const Model& model, DecodeState& state, std::span<const int> tokens);

// Feeds the same prompt to every row; returns the logits after the last token.
std::vector<double> prefill(const Model& model, DecodeState& state, std::span<const int> prompt);

// Projected state bytes for `batch` rows after `len` tokens, without running anything.
std::size_t projected_state_bytes(const ModelSpec& spec, std::size_t batch, std::size_t len);

}  // namespace dlab
