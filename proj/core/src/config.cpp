#include "dlab/config.hpp"

#include <set>

#include <json.hpp>

#include "dlab/error.hpp"
#include "dlab/io.hpp"

namespace dlab {

namespace {

using Json = nlohmann::json;
using OJson = nlohmann::ordered_json;

// Reads fields from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& obj, std::string name) : obj_(obj), name_(std::move(name)) {
    if (!obj_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const Json::exception&) {
      throw ConfigError("config field '" + name_ + "." + key + "' has the wrong type");
    }
  }

  template <typename E>
  void get_enum(const char* key, E& out, E (*parse)(std::string_view)) {
    std::string text;
    get(key, text);
    if (!text.empty()) out = parse(text);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return Section(it == obj_.end() ? empty() : *it, name_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
    }
  }

 private:
  static const Json& empty() {
    static const Json e = Json::object();
    return e;
  }
  const Json& obj_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

PromptTemplate TaskSection::prompt_template() const {
  return reference_system ? PromptTemplate::reference(style) : PromptTemplate::compact(style);
}

std::vector<StageConfig> DistillSection::pure_stages() const {
  const auto budget = split_budget(pure_tokens);
  StageConfig s1{StageId::matrix_orientation, budget[0], batch_size, seq_len, lr_matrix_orientation,
                 MaskPolicy::all_tokens, pure_direction, false, 0};
  StageConfig s2{StageId::hidden_alignment, budget[1], batch_size, seq_len, lr_hidden_alignment,
                 MaskPolicy::all_tokens, pure_direction, freeze_mlp, 0};
  StageConfig s3{StageId::e2e_kd, budget[2], batch_size, seq_len, lr_e2e_kd, pure_mask, pure_direction, false, 0};
  return {s1, s2, s3};
}

std::vector<StageConfig> DistillSection::hybrid_stages() const {
  return {StageConfig{StageId::hybrid_kd, hybrid_tokens, batch_size, seq_len, lr_hybrid, hybrid_mask,
                      hybrid_direction, false, 0}};
}

StageConfig DistillSection::teacher_stage() const {
  return StageConfig{StageId::teacher, teacher.token_budget, teacher.batch_size, seq_len, teacher.lr, teacher.mask,
                     KlDirection::forward, false, 0};
}

StageConfig DistillSection::sft_stage() const {
  return StageConfig{StageId::sft, 0, batch_size, seq_len, lr_sft, MaskPolicy::assistant_only, KlDirection::forward,
                     false, sft_epochs};
}

ModelSpec RunConfig::teacher_spec() const {
  ModelSpec s = model;
  s.layer_kinds.assign(static_cast<std::size_t>(s.n_layers), LayerKind::attention);
  return s;
}

RunConfig RunConfig::from_json(std::string_view text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(doc, "config");
  root.get("seed", c.seed);
  root.get("run_id", c.run_id);
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos || c.run_id == "." || c.run_id == "..") {
    throw ConfigError("run_id must be a plain directory name");
  }

  {
    Section m = root.sub("model");
    m.get("d_model", c.model.d_model);
    m.get("n_layers", c.model.n_layers);
    m.get("n_heads", c.model.n_heads);
    m.get("head_dim", c.model.head_dim);
    m.get("state_size", c.model.state_size);
    m.get("mlp_hidden", c.model.mlp_hidden);
    m.get("max_seq_len", c.model.max_seq_len);
    m.get("rmsnorm_eps", c.model.rmsnorm_eps);
    m.get("ssm_v1_scale_c", c.model.ssm_v1_scale_c);
    m.finish();
    if (c.model.n_layers < 1) throw ConfigError("model.n_layers must be >= 1");
    c.model.layer_kinds.assign(static_cast<std::size_t>(c.model.n_layers), LayerKind::attention);
    c.model.validate();
  }
  {
    Section t = root.sub("task");
    t.get("train_count", c.task.train_count);
    t.get("eval_count", c.task.eval_count);
    t.get("min_difficulty", c.task.difficulty.min);
    t.get("max_difficulty", c.task.difficulty.max);
    t.get_enum("answer_style", c.task.style, &parse_answer_style);
    t.get("reference_system", c.task.reference_system);
    t.finish();
  }
  {
    Section d = root.sub("distill");
    {
      Section t = d.sub("teacher");
      t.get("token_budget", c.distill.teacher.token_budget);
      t.get("batch_size", c.distill.teacher.batch_size);
      t.get("lr", c.distill.teacher.lr);
      t.get_enum("mask", c.distill.teacher.mask, &parse_mask_policy);
      t.finish();
    }
    d.get("batch_size", c.distill.batch_size);
    d.get("seq_len", c.distill.seq_len);
    d.get("pure_tokens", c.distill.pure_tokens);
    d.get("lr_matrix_orientation", c.distill.lr_matrix_orientation);
    d.get("lr_hidden_alignment", c.distill.lr_hidden_alignment);
    d.get("lr_e2e_kd", c.distill.lr_e2e_kd);
    d.get_enum("pure_direction", c.distill.pure_direction, &parse_kl_direction);
    d.get_enum("pure_mask", c.distill.pure_mask, &parse_mask_policy);
    d.get("freeze_mlp", c.distill.freeze_mlp);
    d.get("hybrid_tokens", c.distill.hybrid_tokens);
    d.get("lr_hybrid", c.distill.lr_hybrid);
    d.get("attention_layers", c.distill.attention_layers);
    d.get_enum("hybrid_direction", c.distill.hybrid_direction, &parse_kl_direction);
    d.get_enum("hybrid_mask", c.distill.hybrid_mask, &parse_mask_policy);
    d.get("sft_epochs", c.distill.sft_epochs);
    d.get("lr_sft", c.distill.lr_sft);
    d.get("sft_problems", c.distill.sft_problems);
    d.finish();
  }
  {
    Section s = root.sub("sampling");
    s.get("temperature", c.sampling.temperature);
    int top_k = -1;
    s.get("top_k", top_k);
    if (top_k == -1) {
      c.sampling.top_k.reset();
    } else if (top_k >= 1) {
      c.sampling.top_k = top_k;
    } else {
      throw ConfigError("sampling.top_k must be >= 1 or -1 for ALL");
    }
    s.get("max_new_tokens", c.sampling.max_new_tokens);
    s.get("n_samples", c.sampling.n_samples);
    s.get("eval_problems", c.sampling.eval_problems);
    s.get("threads", c.sampling.threads);
    s.get("max_batch", c.sampling.max_batch);
    s.finish();
    if (!(c.sampling.temperature > 0.0)) throw ConfigError("sampling.temperature must be > 0");
    if (c.sampling.n_samples == 0) throw ConfigError("sampling.n_samples must be >= 1");
  }
  {
    Section e = root.sub("eval");
    e.get("ks", c.eval.ks);
    e.get("reward_epsilon", c.eval.reward_epsilon);
    e.get("draws", c.eval.draws);
    e.get("exhaustive_limit", c.eval.exhaustive_limit);
    e.finish();
  }
  {
    Section b = root.sub("bench");
    b.get("prompt_len", c.bench.config.prompt_len);
    b.get("gen_len", c.bench.config.gen_len);
    b.get("batch_sizes", c.bench.config.batch_sizes);
    b.get("repetitions", c.bench.config.repetitions);
    b.get("warmup", c.bench.config.warmup);
    b.get("memory_cap_bytes", c.bench.memory_cap_bytes);
    b.finish();
    c.bench.config.validate();
  }
  root.finish();
  c.bench.config.seed = c.seed;
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return from_json(read_text(path));
}

std::string RunConfig::to_json() const {
  OJson j;
  j["seed"] = seed;
  j["run_id"] = run_id;
  j["model"] = {{"d_model", model.d_model},           {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},           {"head_dim", model.head_dim},
                {"state_size", model.state_size},     {"mlp_hidden", model.mlp_hidden},
                {"max_seq_len", model.max_seq_len},   {"rmsnorm_eps", model.rmsnorm_eps},
                {"ssm_v1_scale_c", model.ssm_v1_scale_c}};
  j["task"] = {{"train_count", task.train_count},
               {"eval_count", task.eval_count},
               {"min_difficulty", task.difficulty.min},
               {"max_difficulty", task.difficulty.max},
               {"answer_style", std::string(dlab::to_string(task.style))},
               {"reference_system", task.reference_system}};
  OJson teacher = {{"token_budget", distill.teacher.token_budget},
                   {"batch_size", distill.teacher.batch_size},
                   {"lr", distill.teacher.lr},
                   {"mask", std::string(dlab::to_string(distill.teacher.mask))}};
  j["distill"] = {{"teacher", teacher},
                  {"batch_size", distill.batch_size},
                  {"seq_len", distill.seq_len},
                  {"pure_tokens", distill.pure_tokens},
                  {"lr_matrix_orientation", distill.lr_matrix_orientation},
                  {"lr_hidden_alignment", distill.lr_hidden_alignment},
                  {"lr_e2e_kd", distill.lr_e2e_kd},
                  {"pure_direction", std::string(dlab::to_string(distill.pure_direction))},
                  {"pure_mask", std::string(dlab::to_string(distill.pure_mask))},
                  {"freeze_mlp", distill.freeze_mlp},
                  {"hybrid_tokens", distill.hybrid_tokens},
                  {"lr_hybrid", distill.lr_hybrid},
                  {"attention_layers", distill.attention_layers},
                  {"hybrid_direction", std::string(dlab::to_string(distill.hybrid_direction))},
                  {"hybrid_mask", std::string(dlab::to_string(distill.hybrid_mask))},
                  {"sft_epochs", distill.sft_epochs},
                  {"lr_sft", distill.lr_sft},
                  {"sft_problems", distill.sft_problems}};
  j["sampling"] = {{"temperature", sampling.temperature},
                   {"top_k", sampling.top_k ? *sampling.top_k : -1},
                   {"max_new_tokens", sampling.max_new_tokens},
                   {"n_samples", sampling.n_samples},
                   {"eval_problems", sampling.eval_problems},
                   {"threads", sampling.threads},
                   {"max_batch", sampling.max_batch}};
  j["eval"] = {{"ks", eval.ks},
               {"reward_epsilon", eval.reward_epsilon},
               {"draws", eval.draws},
               {"exhaustive_limit", eval.exhaustive_limit}};
  j["bench"] = {{"prompt_len", bench.config.prompt_len},
                {"gen_len", bench.config.gen_len},
                {"batch_sizes", bench.config.batch_sizes},
                {"repetitions", bench.config.repetitions},
                {"warmup", bench.config.warmup},
                {"memory_cap_bytes", bench.memory_cap_bytes}};
  return j.dump(2) + "\n";
}

}  // namespace dlab
