#pragma once

// Coverage and selection estimators over sampled completions, the oracle
// process reward, budget mapping and Pareto fronts.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlab/bench.hpp"
#include "dlab/sampler.hpp"
#include "dlab/tasks.hpp"

namespace dlab {

// Unbiased pass@k: 1 when n - c < k, else 1 - prod_{i=n-c+1..n} (1 - k/i).
// ContractError when c > n, k == 0 or k > n.
double pass_at_k(std::uint64_t n, std::uint64_t c, std::uint64_t k);

struct SampleEntry {
  std::optional<std::string> answer;
  bool correct = false;
  std::optional<double> score;
};

struct ProblemSamples {
  std::string problem_id;
  std::vector<SampleEntry> samples;

  std::size_t correct_count() const;
};

struct TaskSampleSet {
  std::vector<ProblemSamples> problems;

  // Common sample count N. ContractError when empty or ragged.
  std::size_t samples_per_problem() const;
  // Groups records by problem (sorted by problem id then sample index).
  // Scores come from `scores` (parallel to records) when given.
  static TaskSampleSet from_records(const std::vector<CompletionRecord>& records,
                                    const std::vector<double>* scores = nullptr);
};

std::vector<std::pair<std::size_t, double>> coverage_curve(const TaskSampleSet& set, const std::vector<std::size_t>& ks);

struct SubsampleOptions {
  std::size_t draws = 20;
  // When C(N, k) is at most this, every k-subset is evaluated instead of
  // random draws (the exact expectation).
  std::uint64_t exhaustive_limit = 65536;
};

// Fraction of problems whose modal answer among k subsampled completions is
// correct. Absent answers are not tallied; ties go to the earliest sample.
double majority_vote(const TaskSampleSet& set, std::size_t k, std::uint64_t seed, const SubsampleOptions& options = {});

// Answer with the largest reward sum wins (plain: the single highest reward).
// DataError when a selected sample has no score.
double weighted_best_of_n(const TaskSampleSet& set, std::size_t k, std::uint64_t seed, bool plain = false,
                          const SubsampleOptions& options = {});

// Single-set selectors, exposed for testing. Indices refer to `entries`.
std::optional<std::size_t> majority_winner(const std::vector<SampleEntry>& entries,
                                           const std::vector<std::size_t>& chosen);
std::optional<std::size_t> weighted_winner(const std::vector<SampleEntry>& entries,
                                           const std::vector<std::size_t>& chosen, bool plain);

struct RewardTrace {
  std::vector<double> step_scores;
  double reduced = 0.0;  // the final step's score
};

// Scores each "## Step" section 1 when its line "a op b=c" is arithmetically
// right and follows the problem's chain, else 0; the final section also
// requires the extracted answer to be correct. Each score gets uniform noise
// in (-epsilon, epsilon) keyed by (seed, problem, completion, step).
RewardTrace oracle_reward(const Problem& problem, std::string_view completion, AnswerStyle style,
                          double epsilon = 0.1, std::uint64_t seed = 0);

// Greedy batching over the profile: full batches at the largest feasible
// size, the remainder at the smallest profiled size that holds it.
double time_for_k(const ThroughputProfile& profile, std::size_t k);

struct BudgetPoint {
  std::string model;
  std::string metric;
  std::size_t k = 0;
  std::optional<double> time_s;
  double value = 0.0;

  bool operator==(const BudgetPoint&) const = default;
};

// Points not dominated by another (<= time and >= value, one strict),
// deduplicated on (time, value), sorted by time. Points without a time are
// ignored.
std::vector<BudgetPoint> pareto_front(const std::vector<BudgetPoint>& points);

// CSV with header model,metric,k,time_s,value; absent time is an empty field.
std::string budget_points_csv(const std::vector<BudgetPoint>& points);
std::vector<BudgetPoint> parse_budget_points_csv(std::string_view text);

// Line chart of value against time (or k when times are absent) for one metric.
std::string budget_points_svg(const std::vector<BudgetPoint>& points, const std::string& metric,
                              const std::vector<BudgetPoint>& front = {});

}  // namespace dlab
