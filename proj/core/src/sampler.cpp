#include "dlab/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "dlab/decode.hpp"
#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/rng.hpp"
#include "dlab/tokenizer.hpp"

namespace dlab {

namespace {

constexpr std::string_view kFinalMarker = "The final answer is";
constexpr std::string_view kBoxMarker = "\\boxed{";

bool answer_complete(const std::string& text, char last) {
  if (last != '\n') return false;
  return text.find(kFinalMarker) != std::string::npos || text.find(kBoxMarker) != std::string::npos;
}

std::vector<double> row(const std::vector<double>& logits, std::size_t r, std::size_t V) {
  return {logits.begin() + static_cast<std::ptrdiff_t>(r * V), logits.begin() + static_cast<std::ptrdiff_t>((r + 1) * V)};
}

struct Active {
  std::size_t sample;
  std::string text;
  std::size_t generated = 0;
};

}  // namespace

void SamplingConfig::validate() const {
  if (!greedy && !(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (top_k && *top_k < 1) throw ConfigError("top_k must be >= 1 or -1 for ALL");
  if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be >= 1");
}

std::string CompletionRecord::to_json_line() const {
  nlohmann::ordered_json j;
  j["problem_id"] = problem_id;
  j["sample_index"] = sample_index;
  j["text"] = text;
  j["answer"] = answer ? nlohmann::ordered_json(*answer) : nlohmann::ordered_json(nullptr);
  j["correct"] = correct;
  j["tokens_generated"] = tokens_generated;
  j["gen_time_ms"] = gen_time_ms;
  return j.dump();
}

CompletionRecord CompletionRecord::from_json_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  CompletionRecord r;
  r.problem_id = j.at("problem_id").get<std::string>();
  r.sample_index = j.at("sample_index").get<std::size_t>();
  r.text = j.at("text").get<std::string>();
  if (!j.at("answer").is_null()) r.answer = j.at("answer").get<std::string>();
  r.correct = j.at("correct").get<bool>();
  r.tokens_generated = j.at("tokens_generated").get<std::size_t>();
  r.gen_time_ms = j.at("gen_time_ms").get<double>();
  if (r.gen_time_ms < 0.0) throw DataError("gen_time_ms must be >= 0");
  return r;
}

void write_records(const std::filesystem::path& path, const std::vector<CompletionRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(r.to_json_line());
  write_lines(path, lines);
}

std::vector<CompletionRecord> read_records(const std::filesystem::path& path) {
  return read_jsonl<CompletionRecord>(path, &CompletionRecord::from_json_line);
}

int choose_token(std::span<const double> logits, double temperature, std::optional<int> top_k, bool greedy,
                 double u) {
  const std::size_t V = logits.size();
  if (V == 0) throw ContractError("choose_token: empty logits");
  for (double x : logits) {
    if (std::isnan(x)) throw NumericError("choose_token: NaN logit");
  }
  if (greedy || (top_k && *top_k == 1)) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int> ids(V);
  std::iota(ids.begin(), ids.end(), 0);
  std::size_t keep = V;
  if (top_k && static_cast<std::size_t>(*top_k) < V) {
    keep = static_cast<std::size_t>(*top_k);
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(keep), ids.end(), [&](int a, int b) {
      if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)]) {
        return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
      }
      return a < b;
    });
    ids.resize(keep);
    std::sort(ids.begin(), ids.end());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int id : ids) mx = std::max(mx, logits[static_cast<std::size_t>(id)] / temperature);
  std::vector<double> p(keep);
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    p[i] = std::exp(logits[static_cast<std::size_t>(ids[i])] / temperature - mx);
    total += p[i];
  }
  const double target = u * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += p[i];
    if (target < acc) return ids[i];
  }
  // Rounding can leave target == total; fall back to the last token with mass.
  for (std::size_t i = keep; i-- > 0;) {
    if (p[i] > 0.0) return ids[i];
  }
  return ids.back();
}

double sample_uniform(std::uint64_t seed, std::string_view problem_id, std::size_t sample_index, std::size_t step) {
  return to_unit(hash_key({seed, fnv1a(problem_id), sample_index, step}));
}

std::vector<CompletionRecord> sample_problem(const Model& model, const Problem& problem, const PromptTemplate& tmpl,
                                             const SamplingConfig& config, std::size_t n_samples,
                                             std::size_t max_batch) {
  config.validate();
  if (n_samples == 0) throw ContractError("n_samples must be >= 1");
  if (max_batch == 0) throw ContractError("max_batch must be >= 1");
  const ChatPrompt prompt = render_chat(problem, tmpl);
  const std::vector<int> ids = Tokenizer::encode(prompt.text);
  if (problem.prompt.empty() || ids.empty()) throw DataError("empty prompt for problem '" + problem.id + "'");
  const std::size_t V = static_cast<std::size_t>(model.spec.vocab_size);
  const std::size_t room = static_cast<std::size_t>(model.spec.max_seq_len) - std::min(ids.size(), static_cast<std::size_t>(model.spec.max_seq_len));
  const std::size_t max_new = std::min(config.max_new_tokens, room);
  if (max_new == 0) throw DataError("prompt for '" + problem.id + "' leaves no room to generate");

  std::vector<CompletionRecord> out(n_samples);
  DecodeState base(model, 1);
  const std::vector<double> prefill_logits = prefill(model, base, ids);

  for (std::size_t chunk = 0; chunk < n_samples; chunk += max_batch) {
    const auto started = std::chrono::steady_clock::now();
    const std::size_t rows = std::min(max_batch, n_samples - chunk);
    DecodeState state = base.replicate(rows);
    std::vector<Active> active;
    for (std::size_t r = 0; r < rows; ++r) active.push_back({chunk + r, {}, 0});
    std::vector<std::vector<double>> logits(rows, prefill_logits);
    std::vector<std::size_t> finished;
    while (!active.empty()) {
      std::vector<int> next;
      std::vector<std::size_t> keep;
      for (std::size_t r = 0; r < active.size(); ++r) {
        Active& a = active[r];
        const double u = sample_uniform(config.seed, problem.id, a.sample, a.generated);
        const int tok = choose_token(logits[r], config.temperature, config.top_k, config.greedy, u);
        ++a.generated;
        bool done = tok == Tokenizer::kEos;
        if (!done) {
          const char c = Tokenizer::char_of(tok);
          a.text += c;
          done = config.stop_at_answer && answer_complete(a.text, c);
        }
        done = done || a.generated >= max_new;
        if (done) {
          CompletionRecord& rec = out[a.sample];
          rec.problem_id = problem.id;
          rec.sample_index = a.sample;
          rec.text = std::move(a.text);
          rec.tokens_generated = a.generated;
          rec.answer = extract_answer(rec.text, tmpl.style);
          rec.correct = check(problem, rec.answer);
          finished.push_back(a.sample);
        } else {
          keep.push_back(r);
          next.push_back(tok);
        }
      }
      if (keep.empty()) break;
      if (keep.size() != active.size()) {
        state.select_rows(keep);
        std::vector<Active> still;
        for (auto r : keep) still.push_back(std::move(active[r]));
        active = std::move(still);
      }
      const std::vector<double> step = decode_step(model, state, next);
      logits.assign(active.size(), {});
      for (std::size_t r = 0; r < active.size(); ++r) logits[r] = row(step, r, V);
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
    for (std::size_t r = 0; r < rows; ++r) out[chunk + r].gen_time_ms = ms / static_cast<double>(rows);
  }
  return out;
}

std::vector<CompletionRecord> sample_batch(const Model& model, const std::vector<Problem>& problems,
                                           const PromptTemplate& tmpl, const SamplingConfig& config,
                                           std::size_t n_samples, std::size_t threads) {
  config.validate();
  if (n_samples == 0) throw ContractError("n_samples must be >= 1");
  std::vector<std::vector<CompletionRecord>> per(problems.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, problems.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < problems.size(); ++i) per[i] = sample_problem(model, problems[i], tmpl, config, n_samples);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < problems.size(); i += workers) {
            per[i] = sample_problem(model, problems[i], tmpl, config, n_samples);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  std::vector<CompletionRecord> out;
  out.reserve(problems.size() * n_samples);
  for (auto& p : per) {
    for (auto& r : p) out.push_back(std::move(r));
  }
  return out;
}

CompletionRecord greedy(const Model& model, const Problem& problem, const PromptTemplate& tmpl,
                        std::size_t max_new_tokens) {
  SamplingConfig cfg;
  cfg.greedy = true;
  cfg.max_new_tokens = max_new_tokens;
  return sample_problem(model, problem, tmpl, cfg, 1).front();
}

double greedy_accuracy(const Model& model, const std::vector<Problem>& problems, const PromptTemplate& tmpl,
                       std::size_t max_new_tokens, std::size_t threads) {
  if (problems.empty()) throw ContractError("greedy_accuracy: no problems");
  SamplingConfig cfg;
  cfg.greedy = true;
  cfg.max_new_tokens = max_new_tokens;
  const auto records = sample_batch(model, problems, tmpl, cfg, 1, threads);
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.correct ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(problems.size());
}

}  // namespace dlab
