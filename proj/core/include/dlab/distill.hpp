#pragma once

// Teacher training, the three-stage pure-SSM distillation, the hybrid
// initialization + whole-model KD, and supervised fine-tuning.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dlab/models.hpp"
#include "dlab/optim.hpp"
#include "dlab/tasks.hpp"

namespace dlab {

enum class StageId { matrix_orientation, hidden_alignment, e2e_kd, hybrid_kd, sft, teacher };
std::string_view to_string(StageId stage);
StageId parse_stage_id(std::string_view text);

enum class MaskPolicy { all_tokens, assistant_only };
std::string_view to_string(MaskPolicy policy);
MaskPolicy parse_mask_policy(std::string_view text);

enum class DistillPath { pure, hybrid };
std::string_view to_string(DistillPath path);
DistillPath parse_distill_path(std::string_view text);

std::string_view to_string(KlDirection direction);
KlDirection parse_kl_direction(std::string_view text);

// ---------------------------------------------------------------------------
// Training data.

enum class TextFormat { plain, chat };

// Tokenized example ending in end-of-text. Targets at index >= assistant_offset
// belong to the assistant output.
struct Example {
  std::vector<int> tokens;
  std::size_t assistant_offset = 0;
};
std::vector<Example> build_examples(const std::vector<Problem>& problems, TextFormat format,
                                    const PromptTemplate& tmpl);

// Next-token batch padded with end-of-text to the longest row. Padding never
// receives loss and, being causal, never influences real positions.
struct Batch {
  TokenBatch inputs;
  std::vector<int> targets;   // [batch * len]
  std::vector<double> mask;   // [batch * len]
  std::size_t tokens = 0;     // real (unpadded) input tokens
};
// Rows longer than max_len + 1 tokens are truncated.
Batch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& rows, MaskPolicy policy,
                 std::size_t max_len);

// ---------------------------------------------------------------------------
// Stage losses.

// Mean over (batch, paired head) of the squared Frobenius distance between
// the student's mixer and the teacher attention matrix at `layer`, both fed
// the same block input [B, T, D]. Gradients reach only the student layer.
// ConfigError when the head/group pairing is undefined.
Tensor stage1_matrix_orientation(const Model& student, const Model& teacher, std::size_t layer,
                                 const Tensor& block_input);

// Mean squared error between the student's and teacher's block outputs for
// the same block input. ContractError on shape mismatch.
Tensor stage2_hidden_alignment(const Model& student, const Model& teacher, std::size_t layer,
                               const Tensor& block_input);

// Token-level KL between student and (frozen) teacher logits over unmasked
// positions. forward = KL(teacher || student), reverse = KL(student || teacher).
Tensor stage3_e2e_kd(const Model& student, const Model& teacher, const Batch& batch, KlDirection direction);

// ---------------------------------------------------------------------------
// Student construction.

// Replaces the listed attention layers with v1 SSM layers: C, B, x and the
// output projection copy the teacher's Q, K, V and O; MLPs, norms,
// embeddings and head are reused; only the step-size MLP and A are new.
// ConfigError on an out-of-range or non-attention index.
Model init_hybrid_from_teacher(const Model& teacher, const std::vector<std::size_t>& layers_to_convert,
                               std::uint64_t seed);

// All-v2 student sharing the teacher's embeddings, norms, MLPs and head.
Model init_pure_student(const Model& teacher, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Stage execution.

struct StageConfig {
  StageId stage = StageId::e2e_kd;
  std::uint64_t token_budget = 0;
  std::size_t batch_size = 16;
  std::size_t seq_len = 256;
  double lr = 1e-4;
  MaskPolicy mask = MaskPolicy::all_tokens;
  KlDirection direction = KlDirection::forward;
  // Hidden alignment only: keep transferred MLP weights fixed.
  bool freeze_mlp = false;
  // SFT only.
  std::size_t epochs = 2;
};

struct StageResult {
  StageId stage = StageId::e2e_kd;
  std::uint64_t tokens = 0;
  std::size_t steps = 0;
  double final_loss = 0.0;
  MaskPolicy mask = MaskPolicy::all_tokens;
};

// step, total steps, loss
using ProgressFn = std::function<void(StageId, std::size_t, std::size_t, double)>;

// Planned number of optimizer steps for a token budget.
std::size_t planned_steps(const StageConfig& config, const std::vector<Example>& examples);

// Cross-entropy language-model training from the given model (teacher pretraining).
StageResult train_language_model(Model& model, const std::vector<Example>& examples, const StageConfig& config,
                                 std::uint64_t seed, const ProgressFn& progress = {});

// Runs one distillation stage on `student` against a frozen `teacher`.
StageResult run_stage(Model& student, const Model& teacher, const std::vector<Example>& examples,
                      const StageConfig& config, std::uint64_t seed, const ProgressFn& progress = {});

// Assistant-only cross-entropy for config.epochs passes over the examples.
StageResult run_sft(Model& student, const std::vector<Example>& examples, const StageConfig& config,
                    std::uint64_t seed, const ProgressFn& progress = {});

struct RunManifest {
  std::string run_id;
  std::string path;
  std::uint64_t seed = 0;
  std::vector<StageResult> stages;
  double wallclock_s = 0.0;

  std::string to_json() const;
};

struct PipelineConfig {
  DistillPath path = DistillPath::pure;
  std::uint64_t seed = 0;
  std::string run_id;
  std::vector<StageConfig> stages;
  // Hybrid path: number of attention layers kept.
  std::size_t attention_layers = 1;
  PromptTemplate tmpl = PromptTemplate::compact(AnswerStyle::final_answer_is);
};

struct PipelineResult {
  Model student;
  RunManifest manifest;
};

// Splits a total token budget 1:3:4 across the pure-path stages.
std::vector<std::uint64_t> split_budget(std::uint64_t total);

// Pure: stages 1 -> 2 -> 3 (plain text for 1 and 2, chat template in 3).
// Hybrid: conversion followed by a single whole-model KD stage.
// ConfigError when stages are out of order or do not belong to the path.
PipelineResult run_pipeline(const PipelineConfig& config, const Model& teacher, const std::vector<Problem>& train,
                            const ProgressFn& progress = {});

}  // namespace dlab
