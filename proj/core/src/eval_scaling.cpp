#include "dlab/eval_scaling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/rng.hpp"

namespace dlab {

double pass_at_k(std::uint64_t n, std::uint64_t c, std::uint64_t k) {
  if (c > n) throw ContractError("pass_at_k: c=" + std::to_string(c) + " exceeds n=" + std::to_string(n));
  if (k == 0 || k > n) {
    throw ContractError("pass_at_k: k=" + std::to_string(k) + " must be in [1, n=" + std::to_string(n) + "]");
  }
  if (n - c < k) return 1.0;
  double prod = 1.0;
  for (std::uint64_t i = n - c + 1; i <= n; ++i) prod *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - prod;
}

std::size_t ProblemSamples::correct_count() const {
  return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.correct; }));
}

std::size_t TaskSampleSet::samples_per_problem() const {
  if (problems.empty()) throw ContractError("empty problem set");
  const std::size_t n = problems.front().samples.size();
  for (const auto& p : problems) {
    if (p.samples.size() != n) {
      throw ContractError("problem '" + p.problem_id + "' has " + std::to_string(p.samples.size()) +
                          " samples, expected " + std::to_string(n));
    }
  }
  return n;
}

TaskSampleSet TaskSampleSet::from_records(const std::vector<CompletionRecord>& records,
                                          const std::vector<double>* scores) {
  if (scores != nullptr && scores->size() != records.size()) {
    throw ContractError("from_records: scores do not match records");
  }
  std::map<std::string, std::map<std::size_t, SampleEntry>> grouped;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    SampleEntry e{r.answer, r.correct, std::nullopt};
    if (scores != nullptr) e.score = (*scores)[i];
    if (!grouped[r.problem_id].emplace(r.sample_index, std::move(e)).second) {
      throw DataError("duplicate sample " + std::to_string(r.sample_index) + " for problem '" + r.problem_id + "'");
    }
  }
  TaskSampleSet set;
  for (auto& [id, samples] : grouped) {
    ProblemSamples p{id, {}};
    for (auto& [idx, e] : samples) p.samples.push_back(std::move(e));
    set.problems.push_back(std::move(p));
  }
  return set;
}

std::vector<std::pair<std::size_t, double>> coverage_curve(const TaskSampleSet& set, const std::vector<std::size_t>& ks) {
  const std::size_t n = set.samples_per_problem();
  std::vector<std::pair<std::size_t, double>> out;
  for (auto k : ks) {
    if (k > n) throw ContractError("coverage_curve: k=" + std::to_string(k) + " exceeds N=" + std::to_string(n));
    double total = 0.0;
    for (const auto& p : set.problems) total += pass_at_k(n, p.correct_count(), k);
    out.emplace_back(k, total / static_cast<double>(set.problems.size()));
  }
  return out;
}

std::optional<std::size_t> majority_winner(const std::vector<SampleEntry>& entries,
                                           const std::vector<std::size_t>& chosen) {
  // (canonical answer) -> (count, first index); order of first occurrence kept separately.
  std::vector<std::pair<std::string, std::size_t>> order;
  std::map<std::string, std::size_t> counts;
  for (auto i : chosen) {
    const auto& a = entries.at(i).answer;
    if (!a) continue;
    std::string key = canonical_answer(*a);
    if (counts[key]++ == 0) order.emplace_back(std::move(key), i);
  }
  std::optional<std::size_t> best;
  std::size_t best_count = 0;
  for (const auto& [key, first] : order) {
    if (counts[key] > best_count) {
      best_count = counts[key];
      best = first;
    }
  }
  return best;
}

std::optional<std::size_t> weighted_winner(const std::vector<SampleEntry>& entries,
                                           const std::vector<std::size_t>& chosen, bool plain) {
  std::vector<std::pair<std::string, std::size_t>> order;
  std::map<std::string, double> sums;
  std::optional<std::size_t> best_single;
  double best_score = -std::numeric_limits<double>::infinity();
  for (auto i : chosen) {
    const auto& e = entries.at(i);
    if (!e.score) throw DataError("sample " + std::to_string(i) + " has no reward score");
    if (!e.answer) continue;
    if (plain) {
      if (*e.score > best_score) {
        best_score = *e.score;
        best_single = i;
      }
      continue;
    }
    std::string key = canonical_answer(*e.answer);
    auto [it, fresh] = sums.emplace(key, 0.0);
    it->second += *e.score;
    if (fresh) order.emplace_back(std::move(key), i);
  }
  if (plain) return best_single;
  std::optional<std::size_t> best;
  double best_sum = -std::numeric_limits<double>::infinity();
  for (const auto& [key, first] : order) {
    if (sums[key] > best_sum) {
      best_sum = sums[key];
      best = first;
    }
  }
  return best;
}

namespace {

// C(n, k) saturating at limit + 1.
std::uint64_t bounded_choose(std::uint64_t n, std::uint64_t k, std::uint64_t limit) {
  k = std::min(k, n - k);
  long double r = 1.0L;
  for (std::uint64_t i = 1; i <= k; ++i) {
    r = r * static_cast<long double>(n - k + i) / static_cast<long double>(i);
    if (r > static_cast<long double>(limit)) return limit + 1;
  }
  return static_cast<std::uint64_t>(std::llround(static_cast<double>(r)));
}

template <typename Judge>
double subsample_accuracy(const TaskSampleSet& set, std::size_t k, std::uint64_t seed, const SubsampleOptions& options,
                          std::uint64_t tag, Judge judge) {
  if (k == 0) throw ContractError("k must be >= 1");
  const std::size_t n = set.samples_per_problem();
  if (k > n) throw ContractError("k=" + std::to_string(k) + " exceeds available samples " + std::to_string(n));
  const bool exhaustive = n <= 63 && bounded_choose(n, k, options.exhaustive_limit) <= options.exhaustive_limit;
  if (!exhaustive && options.draws == 0) throw ContractError("draws must be >= 1");
  double total = 0.0;
  std::vector<std::size_t> chosen(k);
  for (const auto& p : set.problems) {
    double hits = 0.0;
    double trials = 0.0;
    if (exhaustive) {
      // Gosper's hack over k-bit masks of width n.
      std::uint64_t mask = (k == 64) ? ~0ULL : ((1ULL << k) - 1);
      const std::uint64_t end = 1ULL << n;
      while (mask < end) {
        std::size_t j = 0;
        for (std::size_t b = 0; b < n; ++b) {
          if (mask & (1ULL << b)) chosen[j++] = b;
        }
        hits += judge(p.samples, chosen) ? 1.0 : 0.0;
        trials += 1.0;
        const std::uint64_t c = mask & (~mask + 1);
        const std::uint64_t r = mask + c;
        mask = (((r ^ mask) >> 2) / c) | r;
      }
    } else {
      std::vector<std::size_t> perm(n);
      for (std::size_t d = 0; d < options.draws; ++d) {
        Rng rng(hash_key({seed, tag, d, fnv1a(p.problem_id), k}));
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = 0; i < k; ++i) std::swap(perm[i], perm[i + rng.below(n - i)]);
        std::copy(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(k), chosen.begin());
        std::sort(chosen.begin(), chosen.end());
        hits += judge(p.samples, chosen) ? 1.0 : 0.0;
        trials += 1.0;
      }
    }
    total += hits / trials;
  }
  return total / static_cast<double>(set.problems.size());
}

}  // namespace

double majority_vote(const TaskSampleSet& set, std::size_t k, std::uint64_t seed, const SubsampleOptions& options) {
  return subsample_accuracy(set, k, seed, options, 0x6d616aULL, [](const auto& entries, const auto& chosen) {
    const auto w = majority_winner(entries, chosen);
    return w && entries[*w].correct;
  });
}

double weighted_best_of_n(const TaskSampleSet& set, std::size_t k, std::uint64_t seed, bool plain,
                          const SubsampleOptions& options) {
  return subsample_accuracy(set, k, seed, options, plain ? 0x626f6eULL : 0x77626fULL,
                            [plain](const auto& entries, const auto& chosen) {
                              const auto w = weighted_winner(entries, chosen, plain);
                              return w && entries[*w].correct;
                            });
}

namespace {

struct StepLine {
  int lhs = 0;
  char op = '+';
  int rhs = 0;
  int result = 0;
};

std::optional<int> read_int(std::string_view s, std::size_t& pos) {
  const std::size_t start = pos;
  while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9' && pos - start < 9) ++pos;
  if (pos == start) return std::nullopt;
  return std::stoi(std::string(s.substr(start, pos - start)));
}

void skip_spaces(std::string_view s, std::size_t& pos) {
  while (pos < s.size() && s[pos] == ' ') ++pos;
}

// Parses " a op b=c" at the start of a step body.
std::optional<StepLine> parse_step(std::string_view body) {
  std::size_t pos = 0;
  skip_spaces(body, pos);
  StepLine line;
  const auto lhs = read_int(body, pos);
  if (!lhs) return std::nullopt;
  skip_spaces(body, pos);
  if (pos >= body.size() || (body[pos] != '+' && body[pos] != '-' && body[pos] != '*')) return std::nullopt;
  line.op = body[pos++];
  skip_spaces(body, pos);
  const auto rhs = read_int(body, pos);
  if (!rhs) return std::nullopt;
  skip_spaces(body, pos);
  if (pos >= body.size() || body[pos] != '=') return std::nullopt;
  ++pos;
  skip_spaces(body, pos);
  const bool negative = pos < body.size() && body[pos] == '-';
  if (negative) ++pos;
  const auto result = read_int(body, pos);
  if (!result) return std::nullopt;
  line.lhs = *lhs;
  line.rhs = *rhs;
  line.result = negative ? -*result : *result;
  return line;
}

long long evaluate(const StepLine& s) {
  switch (s.op) {
    case '+':
      return static_cast<long long>(s.lhs) + s.rhs;
    case '-':
      return static_cast<long long>(s.lhs) - s.rhs;
    default:
      return static_cast<long long>(s.lhs) * s.rhs;
  }
}

}  // namespace

RewardTrace oracle_reward(const Problem& problem, std::string_view completion, AnswerStyle style, double epsilon,
                          std::uint64_t seed) {
  constexpr std::string_view kHeader = "## Step";
  std::vector<std::string_view> sections;
  std::size_t at = completion.find(kHeader);
  if (at == std::string_view::npos) {
    sections.push_back(completion);
  } else {
    while (at != std::string_view::npos) {
      const std::size_t next = completion.find(kHeader, at + kHeader.size());
      sections.push_back(completion.substr(at, next == std::string_view::npos ? std::string_view::npos : next - at));
      at = next;
    }
  }
  const ArithmeticChain chain = problem.chain();
  std::vector<int> running{chain.start};
  for (const auto& op : chain.ops) running.push_back(apply(running.back(), op));

  RewardTrace trace;
  for (std::size_t k = 0; k < sections.size(); ++k) {
    std::string_view sec = sections[k];
    double score = 0.0;
    const std::size_t colon = sec.find(':');
    if (sec.starts_with(kHeader) && colon != std::string_view::npos) {
      const std::string_view body = sec.substr(colon + 1);
      const auto line = parse_step(body.substr(0, body.find('\n')));
      if (line && evaluate(*line) == line->result && k < chain.ops.size() && line->lhs == running[k] &&
          line->op == chain.ops[k].op && line->rhs == chain.ops[k].operand) {
        score = 1.0;
      }
    }
    if (k + 1 == sections.size() && !check(problem, extract_answer(completion, style))) score = 0.0;
    if (epsilon > 0.0) {
      const double u = to_unit(hash_key({seed, fnv1a(problem.id), fnv1a(completion), k}));
      score += epsilon * (2.0 * u - 1.0);
    }
    trace.step_scores.push_back(score);
  }
  trace.reduced = trace.step_scores.back();
  return trace;
}

double time_for_k(const ThroughputProfile& profile, std::size_t k) {
  if (k == 0) throw ContractError("time_for_k: k must be >= 1");
  const std::size_t b_max = profile.max_feasible_batch();
  const ProfileRow* full = profile.find(b_max);
  double t = 0.0;
  for (std::size_t i = 0; i < k / b_max; ++i) t += full->seconds_median;
  const std::size_t rem = k % b_max;
  if (rem > 0) {
    const ProfileRow* best = nullptr;
    for (const auto& r : profile.rows) {
      if (!r.oom && r.batch >= rem && (best == nullptr || r.batch < best->batch)) best = &r;
    }
    t += best->seconds_median;
  }
  return t;
}

std::vector<BudgetPoint> pareto_front(const std::vector<BudgetPoint>& points) {
  std::vector<BudgetPoint> timed;
  for (const auto& p : points) {
    if (p.time_s) timed.push_back(p);
  }
  std::sort(timed.begin(), timed.end(), [](const BudgetPoint& a, const BudgetPoint& b) {
    if (*a.time_s != *b.time_s) return *a.time_s < *b.time_s;
    if (a.value != b.value) return a.value > b.value;
    if (a.model != b.model) return a.model < b.model;
    if (a.metric != b.metric) return a.metric < b.metric;
    return a.k < b.k;
  });
  std::vector<BudgetPoint> front;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& p : timed) {
    if (p.value > best) {
      front.push_back(p);
      best = p.value;
    }
  }
  return front;
}

std::string budget_points_csv(const std::vector<BudgetPoint>& points) {
  std::string out = "model,metric,k,time_s,value\n";
  for (const auto& p : points) {
    if (p.model.find(',') != std::string::npos || p.metric.find(',') != std::string::npos) {
      throw DataError("model and metric names may not contain commas");
    }
    out += p.model + "," + p.metric + "," + std::to_string(p.k) + "," + (p.time_s ? format_double(*p.time_s) : "") +
           "," + format_double(p.value) + "\n";
  }
  return out;
}

std::vector<BudgetPoint> parse_budget_points_csv(std::string_view text) {
  std::vector<BudgetPoint> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1) {
      if (line != "model,metric,k,time_s,value") throw DataError("line 1: unexpected CSV header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 5) throw DataError("line " + std::to_string(lineno) + ": expected 5 fields");
    try {
      BudgetPoint p;
      p.model = f[0];
      p.metric = f[1];
      p.k = static_cast<std::size_t>(std::stoull(f[2]));
      if (!f[3].empty()) p.time_s = std::stod(f[3]);
      p.value = std::stod(f[4]);
      out.push_back(std::move(p));
    } catch (const std::logic_error&) {
      throw DataError("line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

std::string budget_points_svg(const std::vector<BudgetPoint>& points, const std::string& metric,
                              const std::vector<BudgetPoint>& front) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 30, B = 50;
  std::vector<BudgetPoint> sel;
  for (const auto& p : points) {
    if (p.metric == metric) sel.push_back(p);
  }
  const bool timed = !sel.empty() && std::all_of(sel.begin(), sel.end(), [](const auto& p) { return p.time_s.has_value(); });
  auto xval = [timed](const BudgetPoint& p) { return timed ? *p.time_s : static_cast<double>(p.k); };
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  for (const auto& p : sel) {
    x1 = std::max(x1, xval(p));
    y1 = std::max(y1, p.value);
  }
  auto px = [&](double x) { return L + (W - L - R) * (x - x0) / (x1 - x0); };
  auto py = [&](double y) { return H - B - (H - T - B) * (y - y0) / (y1 - y0); };
  std::map<std::string, std::vector<BudgetPoint>> by_model;
  for (const auto& p : sel) by_model[p.model].push_back(p);
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    s << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_sig(fx, 3) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">" << format_sig(fy, 3) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
    << (timed ? "time (s)" : "k") << "</text>\n";
  s << "<text x=\"" << 16 << "\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
    << ")\" text-anchor=\"middle\">" << metric << "</text>\n";
  std::size_t ci = 0;
  for (auto& [model, pts] : by_model) {
    std::sort(pts.begin(), pts.end(), [&](const auto& a, const auto& b) { return xval(a) < xval(b); });
    const char* color = colors[ci % 6];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : pts) s << px(xval(p)) << "," << py(p.value) << " ";
    s << "\"/>\n";
    for (const auto& p : pts) {
      s << "<circle cx=\"" << px(xval(p)) << "\" cy=\"" << py(p.value) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (ci + 1) << "\" fill=\"" << color << "\">" << model << "</text>\n";
    ++ci;
  }
  if (timed && !front.empty()) {
    s << "<polyline fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 3\" points=\"";
    for (const auto& p : front) {
      if (p.metric == metric && p.time_s) s << px(*p.time_s) << "," << py(p.value) << " ";
    }
    s << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (ci + 1) << "\">Pareto front</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace dlab
