// dlab: command-line driver for the distillation / inference-scaling lab.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dlab/bench.hpp"
#include "dlab/config.hpp"
#include "dlab/distill.hpp"
#include "dlab/error.hpp"
#include "dlab/eval_scaling.hpp"
#include "dlab/io.hpp"
#include "dlab/models.hpp"
#include "dlab/rng.hpp"
#include "dlab/sampler.hpp"
#include "dlab/tasks.hpp"

namespace fs = std::filesystem;
using namespace dlab;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct Run {
  RunConfig config;
  fs::path dir;

  fs::path data(Split split) const { return dir / "data" / (std::string(to_string(split)) + ".jsonl"); }
  fs::path checkpoint(const std::string& model) const { return dir / "checkpoints" / (model + ".ckpt"); }
};

Run open_run(const Common& common) {
  Run run;
  run.config = common.config_path.empty() ? RunConfig::from_json("{}") : RunConfig::load(common.config_path);
  if (common.seed) {
    run.config.seed = *common.seed;
    run.config.bench.config.seed = *common.seed;
  }
  if (!common.out.empty()) {
    run.dir = common.out;
  } else {
    const char* root = std::getenv("DLAB_RUNS_DIR");
    run.dir = fs::path(root != nullptr && *root != '\0' ? root : "runs") / run.config.run_id;
  }
  fs::create_directories(run.dir);
  write_text(run.dir / "config.json", run.config.to_json());
  return run;
}

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

ProgressFn progress_logger() {
  return [](StageId stage, std::size_t step, std::size_t total, double loss) {
    const std::size_t every = std::max<std::size_t>(1, total / 20);
    if (step % every == 0 || step == total) {
      std::cerr << "[" << to_string(stage) << "] step " << step << "/" << total << " loss " << format_sig(loss, 6)
                << std::endl;
    }
  };
}

std::vector<Problem> load_split(const Run& run, Split split) {
  const fs::path path = run.data(split);
  if (!fs::exists(path)) {
    throw DataError("dataset " + path.string() + " not found; run `dlab generate` with the same --config/--out first");
  }
  return read_problems(path);
}

std::vector<Problem> eval_problems(const Run& run) {
  auto problems = load_split(run, Split::eval);
  if (problems.size() > run.config.sampling.eval_problems) problems.resize(run.config.sampling.eval_problems);
  return problems;
}

Model load_named(const Run& run, const std::string& model) {
  const fs::path path = run.checkpoint(model);
  if (!fs::exists(path)) {
    const std::string hint = model == "teacher" ? "dlab train-teacher"
                             : model.ends_with("_sft") ? "dlab sft --path " + model.substr(0, model.size() - 4)
                                                       : "dlab distill --path " + model;
    throw DataError("checkpoint " + path.string() + " not found; run `" + hint + "` first");
  }
  return load_model(path);
}

// manifest.json holds one entry per trained model.
void update_manifest(const Run& run, const std::string& key, const std::string& entry_json) {
  const fs::path path = run.dir / "manifest.json";
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  if (fs::exists(path)) doc = nlohmann::ordered_json::parse(read_text(path));
  doc[key] = nlohmann::ordered_json::parse(entry_json);
  write_text(path, doc.dump(2) + "\n");
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size() || v == 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("invalid batch size list '" + text + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------

void cmd_generate(const Common& common) {
  Run run = open_run(common);
  const auto& t = run.config.task;
  write_problems(run.data(Split::train), generate_problems(run.config.seed, t.train_count, t.difficulty, Split::train));
  write_problems(run.data(Split::eval), generate_problems(run.config.seed, t.eval_count, t.difficulty, Split::eval));
  log_line("wrote " + run.data(Split::train).string() + " and " + run.data(Split::eval).string());
}

void cmd_train_teacher(const Common& common) {
  Run run = open_run(common);
  const auto train = load_split(run, Split::train);
  const PromptTemplate tmpl = run.config.task.prompt_template();
  const auto started = std::chrono::steady_clock::now();
  Model teacher = init_model(run.config.teacher_spec(), run.config.seed);
  const auto examples = build_examples(train, TextFormat::chat, tmpl);
  const StageResult r =
      train_language_model(teacher, examples, run.config.distill.teacher_stage(), run.config.seed, progress_logger());
  save_model(run.checkpoint("teacher"), teacher);
  const double acc = greedy_accuracy(teacher, eval_problems(run), tmpl, run.config.sampling.max_new_tokens,
                                     run.config.sampling.threads);
  RunManifest m{run.config.run_id, "teacher", run.config.seed, {r},
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
  auto j = nlohmann::ordered_json::parse(m.to_json());
  j["acc_at_1"] = acc;
  update_manifest(run, "teacher", j.dump());
  log_line("teacher acc@1 " + format_sig(acc, 4));
}

void cmd_distill(const Common& common, const std::string& path_text) {
  Run run = open_run(common);
  const DistillPath path = parse_distill_path(path_text);
  const auto train = load_split(run, Split::train);
  const Model teacher = load_named(run, "teacher");
  PipelineConfig pc;
  pc.path = path;
  pc.seed = run.config.seed;
  pc.run_id = run.config.run_id;
  pc.stages = path == DistillPath::pure ? run.config.distill.pure_stages() : run.config.distill.hybrid_stages();
  pc.attention_layers = run.config.distill.attention_layers;
  pc.tmpl = run.config.task.prompt_template();
  PipelineResult result = run_pipeline(pc, teacher, train, progress_logger());
  const std::string name(to_string(path));
  save_model(run.checkpoint(name), result.student);
  const double acc = greedy_accuracy(result.student, eval_problems(run), pc.tmpl, run.config.sampling.max_new_tokens,
                                     run.config.sampling.threads);
  auto j = nlohmann::ordered_json::parse(result.manifest.to_json());
  j["acc_at_1"] = acc;
  update_manifest(run, name, j.dump());
  log_line(name + " student acc@1 " + format_sig(acc, 4));
}

void cmd_sft(const Common& common, const std::string& path_text) {
  Run run = open_run(common);
  const std::string name(to_string(parse_distill_path(path_text)));
  auto train = load_split(run, Split::train);
  if (train.size() > run.config.distill.sft_problems) train.resize(run.config.distill.sft_problems);
  const PromptTemplate tmpl = run.config.task.prompt_template();
  const auto started = std::chrono::steady_clock::now();
  Model student = load_named(run, name);
  const auto examples = build_examples(train, TextFormat::chat, tmpl);
  const StageResult r = run_sft(student, examples, run.config.distill.sft_stage(),
                                hash_key({run.config.seed, 0x736674ULL}), progress_logger());
  save_model(run.checkpoint(name + "_sft"), student);
  const double acc = greedy_accuracy(student, eval_problems(run), tmpl, run.config.sampling.max_new_tokens,
                                     run.config.sampling.threads);
  RunManifest m{run.config.run_id, name + "_sft", run.config.seed, {r},
                std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
  auto j = nlohmann::ordered_json::parse(m.to_json());
  j["acc_at_1"] = acc;
  update_manifest(run, name + "_sft", j.dump());
  log_line(name + "_sft acc@1 " + format_sig(acc, 4));
}

struct SampleOptions {
  std::string model;
  std::optional<std::size_t> k;
  std::optional<double> temperature;
  std::optional<int> top_k;
  bool greedy = false;
  bool record_timing = false;
};

void cmd_sample(const Common& common, const SampleOptions& o) {
  Run run = open_run(common);
  const Model model = load_named(run, o.model);
  const auto problems = eval_problems(run);
  SamplingConfig sc;
  sc.temperature = o.temperature.value_or(run.config.sampling.temperature);
  sc.top_k = run.config.sampling.top_k;
  if (o.top_k) {
    if (*o.top_k == -1) {
      sc.top_k.reset();
    } else if (*o.top_k >= 1) {
      sc.top_k = *o.top_k;
    } else {
      throw ConfigError("--top-k must be >= 1 or -1 for ALL");
    }
  }
  sc.max_new_tokens = run.config.sampling.max_new_tokens;
  sc.greedy = o.greedy;
  sc.seed = run.config.seed;
  const std::size_t n = o.greedy ? 1 : o.k.value_or(run.config.sampling.n_samples);
  auto records = sample_batch(model, problems, run.config.task.prompt_template(), sc, n, run.config.sampling.threads);

  const std::string stem = (o.greedy ? "greedy_" : "samples_") + o.model;
  std::vector<std::string> timing;
  for (auto& r : records) {
    nlohmann::ordered_json t;
    t["problem_id"] = r.problem_id;
    t["sample_index"] = r.sample_index;
    t["gen_time_ms"] = r.gen_time_ms;
    timing.push_back(t.dump());
    if (!o.record_timing) r.gen_time_ms = 0.0;
  }
  write_records(run.dir / (stem + ".jsonl"), records);
  write_lines(run.dir / (stem + ".timing.jsonl"), timing);
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.correct ? 1 : 0;
  log_line("wrote " + std::to_string(records.size()) + " completions (" + std::to_string(correct) + " correct) to " +
           (run.dir / (stem + ".jsonl")).string());
}

struct EvalOptions {
  std::string model;
  std::string samples;
  std::string greedy;
  std::string problems;
  std::string csv;
};

std::vector<BudgetPoint> evaluate_samples(const RunConfig& config, const std::string& model,
                                          const std::vector<CompletionRecord>& records,
                                          const std::vector<Problem>& problems,
                                          const std::optional<std::vector<CompletionRecord>>& greedy_records) {
  std::map<std::string, const Problem*> by_id;
  for (const auto& p : problems) by_id[p.id] = &p;
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& r : records) {
    const auto it = by_id.find(r.problem_id);
    if (it == by_id.end()) throw DataError("sample refers to unknown problem '" + r.problem_id + "'");
    scores.push_back(oracle_reward(*it->second, r.text, config.task.style, config.eval.reward_epsilon, config.seed).reduced);
  }
  const TaskSampleSet set = TaskSampleSet::from_records(records, &scores);
  const std::size_t n = set.samples_per_problem();
  std::vector<std::size_t> ks;
  for (auto k : config.eval.ks) {
    if (k <= n) ks.push_back(k);
  }
  SubsampleOptions so{config.eval.draws, config.eval.exhaustive_limit};
  std::vector<BudgetPoint> points;
  if (greedy_records) {
    std::size_t correct = 0;
    for (const auto& r : *greedy_records) correct += r.correct ? 1 : 0;
    points.push_back({model, "acc@1", 1, std::nullopt,
                      static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(1, greedy_records->size()))});
  }
  for (const auto& [k, v] : coverage_curve(set, ks)) points.push_back({model, "coverage", k, std::nullopt, v});
  for (auto k : ks) points.push_back({model, "majority", k, std::nullopt, majority_vote(set, k, config.seed, so)});
  for (auto k : ks) {
    points.push_back({model, "weighted_bon", k, std::nullopt, weighted_best_of_n(set, k, config.seed, false, so)});
  }
  for (auto k : ks) {
    points.push_back({model, "best_of_n", k, std::nullopt, weighted_best_of_n(set, k, config.seed, true, so)});
  }
  return points;
}

void cmd_eval(const Common& common, const EvalOptions& o) {
  Run run = open_run(common);
  const fs::path samples = o.samples.empty() ? run.dir / ("samples_" + o.model + ".jsonl") : fs::path(o.samples);
  const fs::path greedy_path = o.greedy.empty() ? run.dir / ("greedy_" + o.model + ".jsonl") : fs::path(o.greedy);
  const fs::path problems_path = o.problems.empty() ? run.data(Split::eval) : fs::path(o.problems);
  const fs::path csv = o.csv.empty() ? run.dir / ("eval_" + o.model + ".csv") : fs::path(o.csv);
  if (!fs::exists(samples)) throw DataError(samples.string() + " not found; run `dlab sample --model " + o.model + "` first");
  if (!fs::exists(problems_path)) throw DataError(problems_path.string() + " not found; run `dlab generate` first");
  std::optional<std::vector<CompletionRecord>> greedy_records;
  if (fs::exists(greedy_path)) greedy_records = read_records(greedy_path);
  const auto points = evaluate_samples(run.config, o.model, read_records(samples), read_problems(problems_path), greedy_records);
  write_text(csv, budget_points_csv(points));
  log_line("wrote " + csv.string());
}

void cmd_bench(const Common& common, const std::vector<std::string>& models, const std::string& batch_sizes) {
  Run run = open_run(common);
  BenchConfig bc = run.config.bench.config;
  if (!batch_sizes.empty()) bc.batch_sizes = parse_sizes(batch_sizes);
  std::ifstream load("/proc/loadavg");
  double load1 = 0.0;
  if (load >> load1 && load1 > 1.0) {
    log_line("warning: ambient load average " + format_sig(load1, 3) + "; timings may be noisy");
  }
  std::map<std::string, ThroughputProfile> profiles;
  for (const auto& name : models) {
    const Model model = load_named(run, name);
    log_line("benchmarking " + name);
    ThroughputProfile p = run_bench(model, name, bc, run.config.bench.memory_cap_bytes);
    write_profile(run.dir / ("bench_" + name + ".json"), p);
    profiles.emplace(name, std::move(p));
  }
  const auto teacher = profiles.find("teacher");
  if (teacher != profiles.end()) {
    for (const auto& [name, p] : profiles) {
      if (name == "teacher") continue;
      write_text(run.dir / ("speedup_" + name + ".csv"), speedup_table_csv(speedup_table(p, teacher->second)));
    }
  }
}

void cmd_pareto(const Common& common, const std::vector<std::string>& eval_files,
                const std::vector<std::string>& profile_files) {
  Run run = open_run(common);
  std::vector<fs::path> evals(eval_files.begin(), eval_files.end());
  std::vector<fs::path> profs(profile_files.begin(), profile_files.end());
  if (eval_files.empty() || profile_files.empty()) {
    std::vector<fs::path> entries;
    for (const auto& e : fs::directory_iterator(run.dir)) entries.push_back(e.path());
    std::sort(entries.begin(), entries.end());
    for (const auto& p : entries) {
      const std::string name = p.filename().string();
      if (eval_files.empty() && name.starts_with("eval_") && name.ends_with(".csv")) evals.push_back(p);
      if (profile_files.empty() && name.starts_with("bench_") && name.ends_with(".json")) profs.push_back(p);
    }
  }
  if (evals.empty()) throw DataError("no eval CSV found; run `dlab eval` first");
  std::map<std::string, ThroughputProfile> profiles;
  for (const auto& p : profs) {
    ThroughputProfile tp = read_profile(p);
    profiles.emplace(tp.model, std::move(tp));
  }
  std::vector<BudgetPoint> points;
  for (const auto& e : evals) {
    for (auto& pt : parse_budget_points_csv(read_text(e))) {
      const auto it = profiles.find(pt.model);
      if (it == profiles.end()) {
        throw DataError("no throughput profile for model '" + pt.model + "'; run `dlab bench --model " + pt.model + "`");
      }
      pt.time_s = time_for_k(it->second, pt.k);
      points.push_back(std::move(pt));
    }
  }
  std::vector<std::string> metrics;
  for (const auto& p : points) {
    if (std::find(metrics.begin(), metrics.end(), p.metric) == metrics.end()) metrics.push_back(p.metric);
  }
  std::vector<BudgetPoint> fronts;
  for (const auto& m : metrics) {
    std::vector<BudgetPoint> sel;
    for (const auto& p : points) {
      if (p.metric == m) sel.push_back(p);
    }
    const auto front = pareto_front(sel);
    fronts.insert(fronts.end(), front.begin(), front.end());
    write_text(run.dir / ("curves_" + m + ".svg"), budget_points_svg(points, m, front));
  }
  write_text(run.dir / "curves.csv", budget_points_csv(points));
  write_text(run.dir / "pareto.csv", budget_points_csv(fronts));
  log_line("wrote curves.csv, pareto.csv and " + std::to_string(metrics.size()) + " SVG charts to " + run.dir.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distill attention teachers into SSM students and measure inference-time scaling"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Run configuration JSON");
    sub->add_option("--seed", common.seed, "Top-level seed (overrides the config)");
    sub->add_option("--out", common.out, "Run directory (default: $DLAB_RUNS_DIR/<run_id> or runs/<run_id>)");
  };

  auto* generate = app.add_subcommand("generate", "Write train/eval problem sets");
  add_common(generate);
  auto* train = app.add_subcommand("train-teacher", "Train the attention teacher");
  add_common(train);

  std::string path_text = "pure";
  auto* distill = app.add_subcommand("distill", "Distill a student from the teacher");
  add_common(distill);
  distill->add_option("--path", path_text, "pure or hybrid")->check(CLI::IsMember({"pure", "hybrid"}));
  auto* sft = app.add_subcommand("sft", "Fine-tune a distilled student on assistant tokens");
  add_common(sft);
  sft->add_option("--path", path_text, "pure or hybrid")->check(CLI::IsMember({"pure", "hybrid"}));

  SampleOptions so;
  auto* sample = app.add_subcommand("sample", "Sample completions for the eval split");
  add_common(sample);
  sample->add_option("--model", so.model, "teacher, pure, hybrid, pure_sft or hybrid_sft")->required();
  sample->add_option("--k", so.k, "Samples per problem");
  sample->add_option("--temperature", so.temperature, "Sampling temperature");
  sample->add_option("--top-k", so.top_k, "Top-k truncation, -1 for ALL");
  sample->add_flag("--greedy", so.greedy, "Greedy decoding (writes greedy_<model>.jsonl)");
  sample->add_flag("--record-timing", so.record_timing, "Keep wall times in the JSONL instead of zeroing them");

  EvalOptions eo;
  auto* eval = app.add_subcommand("eval", "Coverage and selection metrics from sampled completions");
  add_common(eval);
  eval->add_option("--model", eo.model, "Model name")->required();
  eval->add_option("--samples", eo.samples, "CompletionRecord JSONL (default: samples_<model>.jsonl)");
  eval->add_option("--greedy", eo.greedy, "Greedy CompletionRecord JSONL for acc@1");
  eval->add_option("--problems", eo.problems, "Problem JSONL (default: data/eval.jsonl)");
  eval->add_option("--csv", eo.csv, "Output CSV (default: eval_<model>.csv)");

  std::vector<std::string> bench_models;
  std::string batch_sizes;
  auto* bench = app.add_subcommand("bench", "Decode throughput sweep");
  add_common(bench);
  bench->add_option("--model", bench_models, "Model names")->required();
  bench->add_option("--batch-sizes", batch_sizes, "Comma-separated batch sizes");

  std::vector<std::string> pareto_evals, pareto_profiles;
  auto* pareto = app.add_subcommand("pareto", "Join eval CSVs with throughput profiles");
  add_common(pareto);
  pareto->add_option("--eval", pareto_evals, "Eval CSV files (default: eval_*.csv in the run)");
  pareto->add_option("--profile", pareto_profiles, "Profile JSON files (default: bench_*.json in the run)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (generate->parsed()) cmd_generate(common);
    if (train->parsed()) cmd_train_teacher(common);
    if (distill->parsed()) cmd_distill(common, path_text);
    if (sft->parsed()) cmd_sft(common, path_text);
    if (sample->parsed()) cmd_sample(common, so);
    if (eval->parsed()) cmd_eval(common, eo);
    if (bench->parsed()) cmd_bench(common, bench_models, batch_sizes);
    if (pareto->parsed()) cmd_pareto(common, pareto_evals, pareto_profiles);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
