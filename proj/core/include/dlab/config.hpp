#pragma once

// Run configuration: one JSON document with sections model, task, distill,
// sampling, eval and bench. Every field is optional; unknown keys are
// rejected with ConfigError.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dlab/bench.hpp"
#include "dlab/distill.hpp"
#include "dlab/models.hpp"
#include "dlab/tasks.hpp"

namespace dlab {

struct TaskSection {
  std::size_t train_count = 4000;
  std::size_t eval_count = 200;
  DifficultyRange difficulty{1, 3};
  AnswerStyle style = AnswerStyle::final_answer_is;
  // Use the full instruction text instead of the compact system line.
  bool reference_system = false;

  PromptTemplate prompt_template() const;
};

struct TeacherSection {
  std::uint64_t token_budget = 3'000'000;
  std::size_t batch_size = 8;
  double lr = 5e-3;
  MaskPolicy mask = MaskPolicy::assistant_only;
};

struct DistillSection {
  TeacherSection teacher;
  std::size_t batch_size = 16;
  std::size_t seq_len = 256;
  // Pure path: total split 1:3:4 over the three stages.
  std::uint64_t pure_tokens = 8'000'000;
  double lr_matrix_orientation = 1e-4;
  double lr_hidden_alignment = 1e-4;
  double lr_e2e_kd = 1e-5;
  KlDirection pure_direction = KlDirection::forward;
  MaskPolicy pure_mask = MaskPolicy::all_tokens;
  bool freeze_mlp = false;
  // Hybrid path.
  std::uint64_t hybrid_tokens = 4'000'000;
  double lr_hybrid = 2e-5;
  std::size_t attention_layers = 1;
  KlDirection hybrid_direction = KlDirection::reverse;
  MaskPolicy hybrid_mask = MaskPolicy::assistant_only;
  // Post-distillation fine-tuning.
  std::size_t sft_epochs = 2;
  double lr_sft = 1e-5;
  std::size_t sft_problems = 1000;

  std::vector<StageConfig> pure_stages() const;
  std::vector<StageConfig> hybrid_stages() const;
  StageConfig teacher_stage() const;
  StageConfig sft_stage() const;
};

struct SamplingSection {
  double temperature = 0.6;
  std::optional<int> top_k;  // absent = ALL (-1 on the wire)
  std::size_t max_new_tokens = 160;
  std::size_t n_samples = 16;
  std::size_t eval_problems = 50;
  std::size_t threads = 1;
  std::size_t max_batch = 64;
};

struct EvalSection {
  std::vector<std::size_t> ks{1, 2, 4, 8, 16};
  double reward_epsilon = 0.1;
  std::size_t draws = 20;
  std::uint64_t exhaustive_limit = 65536;
};

struct BenchSection {
  BenchConfig config;
  std::uint64_t memory_cap_bytes = 200ULL << 20;
};

struct RunConfig {
  std::uint64_t seed = 1234;
  std::string run_id = "default";
  ModelSpec model;
  TaskSection task;
  DistillSection distill;
  SamplingSection sampling;
  EvalSection eval;
  BenchSection bench;

  static RunConfig from_json(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  // Resolved document with every default filled in.
  std::string to_json() const;
  // Teacher spec: the model section with attention in every layer.
  ModelSpec teacher_spec() const;
};

}  // namespace dlab
