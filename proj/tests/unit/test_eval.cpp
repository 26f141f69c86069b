#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dlab/error.hpp"
#include "dlab/eval_scaling.hpp"
#include "dlab/rng.hpp"
#include "oracles.hpp"

using namespace dlab;

namespace {

SampleEntry entry(std::optional<std::string> answer, bool correct = false, std::optional<double> score = std::nullopt) {
  return {std::move(answer), correct, score};
}

// Random sample set: per problem a random correct rate, answers drawn from a
// small pool so votes collide, scores in [0, 1].
TaskSampleSet random_set(std::uint64_t seed, std::size_t problems, std::size_t n) {
  Rng rng(seed);
  TaskSampleSet set;
  for (std::size_t p = 0; p < problems; ++p) {
    ProblemSamples ps;
    ps.problem_id = "p" + std::to_string(p);
    const double rate = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      const bool correct = rng.uniform() < rate;
      std::optional<std::string> answer;
      if (correct) {
        answer = "7";
      } else if (rng.uniform() < 0.8) {
        answer = std::to_string(rng.below(3));
      }
      ps.samples.push_back(entry(answer, correct, rng.uniform()));
    }
    set.problems.push_back(std::move(ps));
  }
  return set;
}

ThroughputProfile profile(std::vector<std::pair<std::size_t, double>> rows, std::vector<std::size_t> oom = {}) {
  ThroughputProfile p{"m", 512, 512, {}};
  for (auto [b, t] : rows) p.rows.push_back(ProfileRow{b, t, 0.0, 0, false, 0.0, 0.0});
  for (auto b : oom) p.rows.push_back(ProfileRow{b, 0.0, 0.0, 0, true, 0.0, 0.0});
  std::sort(p.rows.begin(), p.rows.end(), [](const auto& a, const auto& b) { return a.batch < b.batch; });
  return p;
}

}  // namespace

TEST(PassAtK, WorkedExamples) {
  EXPECT_EQ(pass_at_k(10, 0, 5), 0.0);
  EXPECT_EQ(pass_at_k(5, 1, 5), 1.0);
  EXPECT_NEAR(pass_at_k(4, 2, 2), 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(pass_at_k(4, 2, 1), 0.5, 1e-15);
  EXPECT_THROW(pass_at_k(4, 2, 5), ContractError);
  EXPECT_THROW(pass_at_k(4, 5, 2), ContractError);
  EXPECT_THROW(pass_at_k(4, 2, 0), ContractError);
}

TEST(PassAtK, MatchesLogFactorialOracleUpTo200) {
  for (std::uint64_t n = 1; n <= 200; n += (n < 20 ? 1 : 7)) {
    for (std::uint64_t c = 0; c <= n; c += 1 + n / 15) {
      for (std::uint64_t k = 1; k <= n; k += 1 + n / 11) {
        ASSERT_NEAR(pass_at_k(n, c, k), oracle::pass_at_k_log_oracle(n, c, k), 1e-12) << n << " " << c << " " << k;
      }
    }
  }
}

TEST(PassAtK, LargeNStaysFinite) {
  const double v = pass_at_k(10000, 1, 100);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.01, 1e-15);
  EXPECT_NEAR(pass_at_k(10000, 3, 100), oracle::pass_at_k_log_oracle(10000, 3, 100), 1e-12);
}

TEST(PassAtK, MonotoneInKAndC) {
  for (std::uint64_t n : {1u, 7u, 64u}) {
    for (std::uint64_t c = 0; c <= n; ++c) {
      double prev = -1.0;
      for (std::uint64_t k = 1; k <= n; ++k) {
        const double v = pass_at_k(n, c, k);
        EXPECT_GE(v, prev);
        if (c < n) {
          EXPECT_LE(v, pass_at_k(n, c + 1, k));
        }
        prev = v;
      }
      EXPECT_EQ(pass_at_k(n, c, n) == 1.0, c >= 1);
    }
  }
}

TEST(Coverage, CurveExamples) {
  TaskSampleSet one;
  one.problems.push_back({"a", {entry("1", true), entry("2"), entry("1", true), entry("3")}});
  const auto curve = coverage_curve(one, {1, 2});
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_NEAR(curve[0].second, 0.5, 1e-15);
  EXPECT_NEAR(curve[1].second, 5.0 / 6.0, 1e-15);

  TaskSampleSet all;
  for (int p = 0; p < 3; ++p) all.problems.push_back({"p" + std::to_string(p), {entry("1", true), entry("1", true)}});
  for (auto [k, v] : coverage_curve(all, {1, 2})) EXPECT_EQ(v, 1.0);

  EXPECT_THROW(coverage_curve(TaskSampleSet{}, {1}), ContractError);
  EXPECT_THROW(coverage_curve(one, {5}), ContractError);
}

TEST(Coverage, AgreesWithMonteCarloResampling) {
  const TaskSampleSet set = random_set(3, 12, 16);
  const std::vector<std::size_t> ks{1, 2, 4, 8};
  const auto curve = coverage_curve(set, ks);
  Rng rng(99);
  const std::size_t draws = 100000;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const std::size_t k = ks[i];
    double hits = 0.0;
    for (std::size_t d = 0; d < draws; ++d) {
      const auto& ps = set.problems[d % set.problems.size()];
      std::vector<std::size_t> idx(ps.samples.size());
      for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
      bool any = false;
      for (std::size_t j = 0; j < k; ++j) {
        std::swap(idx[j], idx[j + rng.below(idx.size() - j)]);
        any = any || ps.samples[idx[j]].correct;
      }
      hits += any ? 1.0 : 0.0;
    }
    const double p = curve[i].second;
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(draws));
    EXPECT_LE(std::abs(hits / static_cast<double>(draws) - p), 2.0 * sigma) << "k " << k;
  }
}

TEST(Majority, WinnerRules) {
  const std::vector<SampleEntry> e{entry("4", true), entry("4", true), entry("5")};
  EXPECT_EQ(majority_winner(e, {0, 1, 2}), 0u);
  const std::vector<SampleEntry> tie{entry("4"), entry("5")};
  EXPECT_EQ(majority_winner(tie, {0, 1}), 0u);
  EXPECT_EQ(majority_winner(tie, {1, 0}), 1u);
  const std::vector<SampleEntry> absent{entry(std::nullopt), entry(std::nullopt), entry("5")};
  EXPECT_EQ(majority_winner(absent, {0, 1, 2}), 2u);
  EXPECT_EQ(majority_winner(absent, {0, 1}), std::nullopt);
}

TEST(Majority, AccuracyOnHandSets) {
  TaskSampleSet set;
  set.problems.push_back({"a", {entry("4", true), entry("4", true), entry("5")}});
  EXPECT_EQ(majority_vote(set, 3, 1), 1.0);
  TaskSampleSet none;
  none.problems.push_back({"a", {entry(std::nullopt), entry(std::nullopt)}});
  EXPECT_EQ(majority_vote(none, 2, 1), 0.0);
  EXPECT_THROW(majority_vote(set, 0, 1), ContractError);
}

TEST(Majority, KOneEqualsMeanAccuracy) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const TaskSampleSet set = random_set(seed, 9, 12);
    double mean = 0.0;
    for (const auto& p : set.problems) mean += static_cast<double>(p.correct_count()) / 12.0;
    mean /= 9.0;
    EXPECT_NEAR(majority_vote(set, 1, seed), mean, 1e-12);
  }
}

TEST(WeightedBoN, SumVersusPlain) {
  const std::vector<SampleEntry> e{entry("4", false, 0.9), entry("5", true, 0.8), entry("5", true, 0.7)};
  EXPECT_EQ(weighted_winner(e, {0, 1, 2}, false), 1u);
  EXPECT_EQ(weighted_winner(e, {0, 1, 2}, true), 0u);
  EXPECT_EQ(weighted_winner(e, {2}, false), 2u);
  TaskSampleSet set;
  set.problems.push_back({"a", e});
  EXPECT_EQ(weighted_best_of_n(set, 3, 1), 1.0);
  EXPECT_EQ(weighted_best_of_n(set, 3, 1, true), 0.0);
  set.problems[0].samples[1].score.reset();
  EXPECT_THROW(weighted_best_of_n(set, 3, 1), DataError);
}

TEST(Estimators, CoverageBoundsSelection) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const TaskSampleSet set = random_set(seed + 100, 7, 8);
    for (std::size_t k : {1u, 2u, 4u, 8u}) {
      const double cov = coverage_curve(set, {k})[0].second;
      const double maj = majority_vote(set, k, seed);
      const double wbon = weighted_best_of_n(set, k, seed);
      EXPECT_GE(cov + 1e-12, maj);
      EXPECT_GE(cov + 1e-12, wbon);
      EXPECT_GE(wbon, 0.0);
    }
  }
}

TEST(OracleReward, ReferenceAndBrokenChains) {
  for (const auto& p : generate_problems(5, 40, {1, 4}, Split::eval)) {
    const std::string cot = reference_cot(p, AnswerStyle::final_answer_is);
    const auto good = oracle_reward(p, cot, AnswerStyle::final_answer_is, 0.0);
    EXPECT_EQ(good.step_scores, std::vector<double>(static_cast<std::size_t>(p.difficulty), 1.0));
    EXPECT_EQ(good.reduced, 1.0);

    // Break the first step's result and the final answer.
    const std::string wrong = std::to_string(std::stoi(p.answer) + 1);
    std::string bad = cot;
    const std::size_t eq = bad.find('=');
    bad.replace(eq + 1, bad.find('\n', eq) - eq - 1, "100");
    bad.replace(bad.rfind(' ') + 1, std::string::npos, wrong);
    const auto broken = oracle_reward(p, bad, AnswerStyle::final_answer_is, 0.0);
    EXPECT_EQ(broken.step_scores[0], 0.0);
    EXPECT_EQ(broken.reduced, 0.0);

    const auto noisy = oracle_reward(p, cot, AnswerStyle::final_answer_is, 0.1, 3);
    for (double s : noisy.step_scores) EXPECT_LT(std::abs(s - 1.0), 0.1);
    EXPECT_EQ(noisy.reduced, oracle_reward(p, cot, AnswerStyle::final_answer_is, 0.1, 3).reduced);
  }
  const auto p = generate_problems(5, 1, {2, 2}, Split::eval)[0];
  EXPECT_EQ(oracle_reward(p, "no steps here", AnswerStyle::final_answer_is, 0.0).step_scores.size(), 1u);
}

TEST(OracleReward, NoiselessWeightedBoNDominatesMajority) {
  // Per problem: two reference chains and six chains whose first step is
  // corrupted and whose answer is a shared wrong value.
  const auto problems = generate_problems(8, 20, {1, 3}, Split::eval);
  TaskSampleSet set;
  for (const auto& p : problems) {
    ProblemSamples ps{p.id, {}};
    const std::string cot = reference_cot(p, AnswerStyle::final_answer_is);
    std::string bad = cot;
    const std::size_t eq = bad.find('=');
    bad.replace(eq + 1, bad.find('\n', eq) - eq - 1, "100");
    bad.replace(bad.rfind(' ') + 1, std::string::npos, "100");
    for (int i = 0; i < 8; ++i) {
      const std::string& text = (i % 4 == 0) ? cot : bad;
      const auto answer = extract_answer(text, AnswerStyle::final_answer_is);
      ps.samples.push_back(entry(answer, check(p, answer), oracle_reward(p, text, AnswerStyle::final_answer_is, 0.0).reduced));
    }
    set.problems.push_back(std::move(ps));
  }
  for (std::size_t k : {1u, 2u, 4u, 8u}) {
    EXPECT_GE(weighted_best_of_n(set, k, 5), majority_vote(set, k, 5)) << k;
    EXPECT_NEAR(weighted_best_of_n(set, k, 5), coverage_curve(set, {k})[0].second, 1e-12) << k;
  }
}

TEST(TimeForK, BatchingArithmetic) {
  EXPECT_EQ(time_for_k(profile({{256, 29.4}}), 512), 58.8);
  EXPECT_NEAR(time_for_k(profile({{64, 8.0}, {256, 29.4}}), 300), 37.4, 1e-12);
  const auto p = profile({{1, 0.5}, {16, 1.0}, {64, 2.5}}, {128});
  EXPECT_EQ(p.max_feasible_batch(), 64u);
  for (const auto& row : p.rows) {
    if (!row.oom) {
      EXPECT_EQ(time_for_k(p, row.batch), row.seconds_median);
    }
  }
  double prev = 0.0;
  for (std::size_t k = 1; k <= 300; ++k) {
    const double t = time_for_k(p, k);
    EXPECT_GE(t, prev);
    prev = t;
  }
  EXPECT_THROW(time_for_k(p, 0), ContractError);
  EXPECT_THROW(profile({}, {4}).max_feasible_batch(), ContractError);
}

TEST(Pareto, WorkedExamples) {
  const std::vector<BudgetPoint> pts{{"a", "coverage", 1, 1.0, 0.5}, {"a", "coverage", 2, 2.0, 0.6},
                                     {"b", "coverage", 1, 3.0, 0.55}};
  const auto front = pareto_front(pts);
  ASSERT_EQ(front.size(), 2u);
  EXPECT_EQ(front[0], pts[0]);
  EXPECT_EQ(front[1], pts[1]);
  EXPECT_EQ(pareto_front({pts[2]}), std::vector<BudgetPoint>{pts[2]});
  EXPECT_EQ(pareto_front({pts[0], pts[0]}).size(), 1u);
  EXPECT_TRUE(pareto_front({{"c", "coverage", 1, std::nullopt, 0.9}}).empty());
}

TEST(Pareto, MatchesDominanceOracleOnRandomSets) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<BudgetPoint> pts;
    std::vector<std::pair<double, double>> raw;
    const std::size_t n = 1 + rng.below(40);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse grids force ties and duplicates.
      const double t = static_cast<double>(1 + rng.below(12)) * 0.5;
      const double v = static_cast<double>(rng.below(10)) / 10.0;
      pts.push_back({"m" + std::to_string(i % 3), "coverage", i + 1, t, v});
      raw.emplace_back(t, v);
    }
    std::vector<std::pair<double, double>> got;
    for (const auto& p : pareto_front(pts)) got.emplace_back(*p.time_s, p.value);
    EXPECT_EQ(got, oracle::pareto_oracle(raw)) << "trial " << trial;
  }
}

TEST(BudgetCsv, RoundTrip) {
  const std::vector<BudgetPoint> pts{{"teacher", "coverage", 1, 0.25, 0.5},
                                     {"pure", "majority", 16, std::nullopt, 0.8125},
                                     {"hybrid", "wbon", 4, 1.0 / 3.0, 2.0 / 3.0}};
  const std::string csv = budget_points_csv(pts);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,metric,k,time_s,value");
  EXPECT_NE(csv.find("pure,majority,16,,0.8125"), std::string::npos) << csv;
  EXPECT_EQ(parse_budget_points_csv(csv), pts);
  EXPECT_THROW(parse_budget_points_csv("model,metric,k,time_s,value\nx,y,notanumber,,1\n"), DataError);
  const std::string svg = budget_points_svg(pts, "coverage", pareto_front(pts));
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
}

TEST(SampleSet, FromRecordsGroupsAndValidates) {
  std::vector<CompletionRecord> recs{{"b", 1, "", "3", false, 1, 0.0},
                                     {"a", 0, "", "1", true, 1, 0.0},
                                     {"b", 0, "", std::nullopt, false, 1, 0.0},
                                     {"a", 1, "", "2", false, 1, 0.0}};
  const std::vector<double> scores{0.1, 0.2, 0.3, 0.4};
  const auto set = TaskSampleSet::from_records(recs, &scores);
  ASSERT_EQ(set.problems.size(), 2u);
  EXPECT_EQ(set.problems[0].problem_id, "a");
  EXPECT_EQ(set.problems[0].samples[1].answer, "2");
  EXPECT_EQ(set.problems[0].samples[1].score, 0.4);
  EXPECT_EQ(set.problems[1].samples[0].answer, std::nullopt);
  EXPECT_EQ(set.samples_per_problem(), 2u);
  recs.pop_back();
  EXPECT_THROW(TaskSampleSet::from_records(recs).samples_per_problem(), ContractError);
}
