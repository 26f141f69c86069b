#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlab/models.hpp"
#include "dlab/tasks.hpp"

namespace dlab {

struct SamplingConfig {
  double temperature = 0.6;
  // Absent means ALL (no truncation); serialized as -1.
  std::optional<int> top_k;
  std::size_t max_new_tokens = 160;
  // Argmax decoding; temperature and top_k are ignored.
  bool greedy = false;
  // Also stop at the newline that ends the final-answer sentence.
  bool stop_at_answer = true;
  std::uint64_t seed = 0;

  // ConfigError when temperature <= 0, top_k < 1 or max_new_tokens == 0.
  void validate() const;
};

struct CompletionRecord {
  std::string problem_id;
  std::size_t sample_index = 0;
  std::string text;
  std::optional<std::string> answer;
  bool correct = false;
  std::size_t tokens_generated = 0;
  double gen_time_ms = 0.0;

  std::string to_json_line() const;
  static CompletionRecord from_json_line(std::string_view line);
};

void write_records(const std::filesystem::path& path, const std::vector<CompletionRecord>& records);
std::vector<CompletionRecord> read_records(const std::filesystem::path& path);

// Draws one token from logits. u in [0, 1) selects along the inverse CDF of
// softmax(logits / T) restricted to the top_k largest logits (ties resolved
// toward lower ids). With greedy, returns the lowest-id argmax.
int choose_token(std::span<const double> logits, double temperature, std::optional<int> top_k, bool greedy,
                 double u);

// Uniform in [0, 1) keyed by (seed, problem, sample, step).
double sample_uniform(std::uint64_t seed, std::string_view problem_id, std::size_t sample_index, std::size_t step);

// n_samples completions of one problem. All samples share one prefill; at
// most max_batch rows decode together. Results do not depend on max_batch.
std::vector<CompletionRecord> sample_problem(const Model& model, const Problem& problem, const PromptTemplate& tmpl,
                                             const SamplingConfig& config, std::size_t n_samples,
                                             std::size_t max_batch = 64);

// Every problem x n_samples, ordered by problem then sample index. Work is
// split across `threads` workers over problems; output is thread-count invariant.
std::vector<CompletionRecord> sample_batch(const Model& model, const std::vector<Problem>& problems,
                                           const PromptTemplate& tmpl, const SamplingConfig& config,
                                           std::size_t n_samples, std::size_t threads = 1);

CompletionRecord greedy(const Model& model, const Problem& problem, const PromptTemplate& tmpl,
                        std::size_t max_new_tokens);

// Fraction of problems solved by greedy decoding.
double greedy_accuracy(const Model& model, const std::vector<Problem>& problems, const PromptTemplate& tmpl,
                       std::size_t max_new_tokens, std::size_t threads = 1);

}  // namespace dlab
