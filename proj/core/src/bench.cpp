#include "dlab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <set>

#include <json.hpp>

#include "dlab/decode.hpp"
#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/rng.hpp"

namespace dlab {

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void argmax_rows(const std::vector<double>& logits, std::size_t rows, std::size_t V, std::vector<int>& out) {
  out.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto first = logits.begin() + static_cast<std::ptrdiff_t>(r * V);
    out[r] = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(V)) - first);
  }
}

}  // namespace

void BenchConfig::validate() const {
  if (repetitions < 3) throw ConfigError("bench repetitions must be >= 3");
  if (warmup < 1) throw ConfigError("bench warmup must be >= 1");
  if (batch_sizes.empty()) throw ConfigError("bench batch sizes are empty");
  if (prompt_len == 0 || gen_len == 0) throw ConfigError("bench prompt_len and gen_len must be positive");
  for (auto b : batch_sizes) {
    if (b == 0) throw ConfigError("bench batch sizes must be positive");
  }
}

std::string ThroughputProfile::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["prompt_len"] = prompt_len;
  j["gen_len"] = gen_len;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["batch"] = r.batch;
    if (r.oom) {
      o["seconds_median"] = nullptr;
      o["tokens_per_s"] = nullptr;
    } else {
      o["seconds_median"] = r.seconds_median;
      o["tokens_per_s"] = r.tokens_per_s;
    }
    o["state_bytes"] = r.state_bytes;
    o["oom"] = r.oom;
    if (!r.oom) {
      o["step_ms_first"] = r.step_ms_first;
      o["step_ms_last"] = r.step_ms_last;
    }
    j["rows"].push_back(std::move(o));
  }
  return j.dump(2) + "\n";
}

ThroughputProfile ThroughputProfile::from_json(std::string_view text) {
  ThroughputProfile p;
  try {
    const auto j = nlohmann::json::parse(text);
    p.model = j.at("model").get<std::string>();
    p.prompt_len = j.at("prompt_len").get<std::size_t>();
    p.gen_len = j.at("gen_len").get<std::size_t>();
    for (const auto& o : j.at("rows")) {
      ProfileRow r;
      r.batch = o.at("batch").get<std::size_t>();
      r.oom = o.at("oom").get<bool>();
      r.state_bytes = o.value("state_bytes", std::uint64_t{0});
      if (!r.oom) {
        r.seconds_median = o.at("seconds_median").get<double>();
        r.tokens_per_s = o.at("tokens_per_s").get<double>();
        r.step_ms_first = o.value("step_ms_first", 0.0);
        r.step_ms_last = o.value("step_ms_last", 0.0);
      }
      p.rows.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed throughput profile: ") + e.what());
  }
  std::sort(p.rows.begin(), p.rows.end(), [](const auto& a, const auto& b) { return a.batch < b.batch; });
  return p;
}

std::size_t ThroughputProfile::max_feasible_batch() const {
  std::size_t best = 0;
  for (const auto& r : rows) {
    if (!r.oom) best = std::max(best, r.batch);
  }
  if (best == 0) throw ContractError("profile '" + model + "' has no feasible batch size");
  return best;
}

const ProfileRow* ThroughputProfile::find(std::size_t batch) const {
  for (const auto& r : rows) {
    if (r.batch == batch) return &r;
  }
  return nullptr;
}

void write_profile(const std::filesystem::path& path, const ThroughputProfile& profile) {
  write_text(path, profile.to_json());
}

ThroughputProfile read_profile(const std::filesystem::path& path) { return ThroughputProfile::from_json(read_text(path)); }

ThroughputProfile run_bench(const Model& model, const std::string& model_id, const BenchConfig& config,
                            std::uint64_t memory_cap) {
  config.validate();
  if (memory_cap == 0) throw ConfigError("memory cap must be positive");
  const std::size_t max_len = static_cast<std::size_t>(model.spec.max_seq_len);
  if (config.prompt_len >= max_len || config.gen_len > max_len - config.prompt_len) {
    throw ConfigError("gen_len " + std::to_string(config.gen_len) + " exceeds max_seq_len - prompt_len = " +
                      std::to_string(config.prompt_len >= max_len ? 0 : max_len - config.prompt_len));
  }
  const std::size_t V = static_cast<std::size_t>(model.spec.vocab_size);
  Rng rng(hash_key({config.seed, 0x62656e6368ULL}));
  std::vector<int> prompt(config.prompt_len);
  for (auto& t : prompt) t = 2 + static_cast<int>(rng.below(V - 2));

  DecodeState base(model, 1);
  const std::vector<double> first_logits = prefill(model, base, prompt);

  ThroughputProfile profile;
  profile.model = model_id;
  profile.prompt_len = config.prompt_len;
  profile.gen_len = config.gen_len;
  std::set<std::size_t> batches(config.batch_sizes.begin(), config.batch_sizes.end());
  for (const std::size_t B : batches) {
    ProfileRow row;
    row.batch = B;
    row.state_bytes = projected_state_bytes(model.spec, B, config.prompt_len + config.gen_len);
    if (row.state_bytes > memory_cap) {
      row.oom = true;
      profile.rows.push_back(row);
      continue;
    }
    std::vector<double> totals, firsts, lasts;
    for (std::size_t rep = 0; rep < config.warmup + config.repetitions; ++rep) {
      DecodeState state = base.replicate(B);
      state.reserve(config.prompt_len + config.gen_len);
      std::vector<int> tokens;
      std::vector<double> seed_logits;
      for (std::size_t r = 0; r < B; ++r) seed_logits.insert(seed_logits.end(), first_logits.begin(), first_logits.end());
      argmax_rows(seed_logits, B, V, tokens);
      double first_ms = 0.0, last_ms = 0.0;
      const auto start = Clock::now();
      for (std::size_t g = 0; g < config.gen_len; ++g) {
        const auto s0 = Clock::now();
        const std::vector<double> logits = decode_step(model, state, tokens);
        argmax_rows(logits, B, V, tokens);
        const double ms = std::chrono::duration<double, std::milli>(Clock::now() - s0).count();
        if (g == 0) first_ms = ms;
        if (g + 1 == config.gen_len) last_ms = ms;
      }
      const double secs = std::chrono::duration<double>(Clock::now() - start).count();
      row.state_bytes = state.bytes();
      if (rep >= config.warmup) {
        totals.push_back(secs);
        firsts.push_back(first_ms);
        lasts.push_back(last_ms);
      }
    }
    row.seconds_median = median(totals);
    row.tokens_per_s = static_cast<double>(B * config.gen_len) / row.seconds_median;
    row.step_ms_first = median(firsts);
    row.step_ms_last = median(lasts);
    profile.rows.push_back(row);
  }
  return profile;
}

std::string SpeedupRow::ratio_text() const {
  if (student_s && !teacher_s) return "teacher-OOM";
  if (!student_s && teacher_s) return "student-OOM";
  if (!ratio) return "";
  return format_sig(*ratio, 4);
}

std::vector<SpeedupRow> speedup_table(const ThroughputProfile& student, const ThroughputProfile& teacher) {
  if (student.prompt_len != teacher.prompt_len || student.gen_len != teacher.gen_len) {
    throw ContractError("speedup_table: profiles were measured with different prompt/generation lengths");
  }
  std::map<std::size_t, SpeedupRow> rows;
  for (const auto& r : student.rows) {
    auto& s = rows[r.batch];
    s.batch = r.batch;
    if (!r.oom) s.student_s = r.seconds_median;
  }
  for (const auto& r : teacher.rows) {
    auto& s = rows[r.batch];
    s.batch = r.batch;
    if (!r.oom) s.teacher_s = r.seconds_median;
  }
  std::vector<SpeedupRow> out;
  for (auto& [b, s] : rows) {
    if (s.student_s && s.teacher_s) s.ratio = *s.teacher_s / *s.student_s;
    out.push_back(s);
  }
  return out;
}

std::string speedup_table_csv(const std::vector<SpeedupRow>& rows) {
  std::string out = "batch,student_s,teacher_s,ratio\n";
  for (const auto& r : rows) {
    out += std::to_string(r.batch) + "," + (r.student_s ? format_sig(*r.student_s, 6) : "") + "," +
           (r.teacher_s ? format_sig(*r.teacher_s, 6) : "") + "," + r.ratio_text() + "\n";
  }
  return out;
}

}  // namespace dlab
