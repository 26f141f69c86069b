#pragma once

// Batched decode throughput: fixed prompt, fixed generation length, a sweep
// over batch sizes. Only the generation loop after prefill is timed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dlab/models.hpp"

namespace dlab {

struct BenchConfig {
  std::size_t prompt_len = 512;
  std::size_t gen_len = 512;
  std::vector<std::size_t> batch_sizes{1, 16, 32, 64, 128, 256, 512};
  std::size_t repetitions = 3;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;

  // ConfigError when repetitions < 3, warmup < 1 or batch sizes are empty.
  void validate() const;
};

struct ProfileRow {
  std::size_t batch = 0;
  double seconds_median = 0.0;
  double tokens_per_s = 0.0;
  std::uint64_t state_bytes = 0;
  bool oom = false;
  // Median wall time of the first and the last generation step, in ms.
  double step_ms_first = 0.0;
  double step_ms_last = 0.0;
};

struct ThroughputProfile {
  std::string model;
  std::size_t prompt_len = 0;
  std::size_t gen_len = 0;
  std::vector<ProfileRow> rows;  // sorted by batch

  std::string to_json() const;
  static ThroughputProfile from_json(std::string_view text);
  // Largest batch that did not run out of memory. ContractError when none.
  std::size_t max_feasible_batch() const;
  const ProfileRow* find(std::size_t batch) const;
};

void write_profile(const std::filesystem::path& path, const ThroughputProfile& profile);
ThroughputProfile read_profile(const std::filesystem::path& path);

// Runs the sweep. Batches whose projected decode state exceeds memory_cap
// bytes are flagged OOM and skipped. ConfigError when
// gen_len > max_seq_len - prompt_len or memory_cap == 0.
ThroughputProfile run_bench(const Model& model, const std::string& model_id, const BenchConfig& config,
                            std::uint64_t memory_cap);

struct SpeedupRow {
  std::size_t batch = 0;
  std::optional<double> student_s;
  std::optional<double> teacher_s;
  std::optional<double> ratio;  // teacher / student

  // "teacher-OOM" / "student-OOM" when a side did not run, else the ratio.
  std::string ratio_text() const;
};

// Rows for batch sizes present in either profile, sorted by batch.
// ContractError when the profiles use different prompt or generation lengths.
std::vector<SpeedupRow> speedup_table(const ThroughputProfile& student, const ThroughputProfile& teacher);
std::string speedup_table_csv(const std::vector<SpeedupRow>& rows);

}  // namespace dlab
