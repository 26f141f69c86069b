#include "dlab/distill.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "dlab/error.hpp"
#include "dlab/rng.hpp"
#include "dlab/tokenizer.hpp"

namespace dlab {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view text, const std::array<std::pair<std::string_view, E>, N>& table, const char* what) {
  for (const auto& [name, value] : table) {
    if (name == text) return value;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(text) + "'");
}

constexpr std::array<std::pair<std::string_view, StageId>, 6> kStages{{
    {"matrix_orientation", StageId::matrix_orientation},
    {"hidden_alignment", StageId::hidden_alignment},
    {"e2e_kd", StageId::e2e_kd},
    {"hybrid_kd", StageId::hybrid_kd},
    {"sft", StageId::sft},
    {"teacher", StageId::teacher},
}};

std::uint64_t stage_tag(StageId stage) { return 0x5354000ULL + static_cast<std::uint64_t>(stage); }

std::vector<std::size_t> draw_rows(std::uint64_t seed, StageId stage, std::size_t step, std::size_t n,
                                   std::size_t count) {
  Rng rng(hash_key({seed, stage_tag(stage), step}));
  std::vector<std::size_t> rows(count);
  for (auto& r : rows) r = static_cast<std::size_t>(rng.below(n));
  return rows;
}

void check_finite(double loss, StageId stage, std::size_t step) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string("stage ") + std::string(to_string(stage)) + " diverged at step " +
                       std::to_string(step) + " (loss " + std::to_string(loss) + ")");
  }
}

// Evaluates one step's loss; any numeric failure is reported with its stage and step.
template <typename F>
Tensor step_loss(StageId stage, std::size_t step, F&& compute) {
  Tensor loss;
  try {
    loss = compute();
  } catch (const NumericError& e) {
    throw NumericError(std::string("stage ") + std::string(to_string(stage)) + " diverged at step " +
                       std::to_string(step) + ": " + e.what());
  }
  check_finite(loss.item(), stage, step);
  return loss;
}

std::vector<Tensor> select_params(const std::vector<NamedTensor>& named, bool include_mlp) {
  std::vector<Tensor> out;
  for (const auto& p : named) {
    if (!include_mlp && p.name.find(".mlp.") != std::string::npos) continue;
    out.push_back(p.tensor);
  }
  return out;
}

std::vector<Tensor> mixer_params(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& p : named) {
    if (p.name.find(".attn.") != std::string::npos || p.name.find(".ssm_v") != std::string::npos) {
      out.push_back(p.tensor);
    }
  }
  return out;
}

void enable_grad(std::vector<Tensor>& params) {
  for (auto& p : params) p.set_requires_grad(true);
}

const AttentionWeights& teacher_attention(const Model& teacher, std::size_t layer) {
  const auto* w = std::get_if<AttentionWeights>(&teacher.blocks.at(layer).mixer);
  if (w == nullptr) throw ConfigError("teacher layer " + std::to_string(layer) + " is not an attention layer");
  return *w;
}

Tensor flat_logits(const Model& model, const TokenBatch& batch) {
  Tensor logits = forward(model, batch);
  return reshape(logits, {batch.batch * batch.len, static_cast<std::size_t>(model.spec.vocab_size)});
}

}  // namespace

std::string_view to_string(StageId stage) {
  for (const auto& [name, value] : kStages) {
    if (value == stage) return name;
  }
  return "unknown";
}
StageId parse_stage_id(std::string_view text) { return parse_enum(text, kStages, "stage"); }

std::string_view to_string(MaskPolicy policy) {
  return policy == MaskPolicy::all_tokens ? "all_tokens" : "assistant_only";
}
MaskPolicy parse_mask_policy(std::string_view text) {
  return parse_enum<MaskPolicy, 2>(
      text, {{{"all_tokens", MaskPolicy::all_tokens}, {"assistant_only", MaskPolicy::assistant_only}}},
      "mask policy");
}

std::string_view to_string(DistillPath path) { return path == DistillPath::pure ? "pure" : "hybrid"; }
DistillPath parse_distill_path(std::string_view text) {
  return parse_enum<DistillPath, 2>(text, {{{"pure", DistillPath::pure}, {"hybrid", DistillPath::hybrid}}},
                                    "distillation path");
}

std::string_view to_string(KlDirection direction) {
  return direction == KlDirection::forward ? "forward" : "reverse";
}
KlDirection parse_kl_direction(std::string_view text) {
  return parse_enum<KlDirection, 2>(text, {{{"forward", KlDirection::forward}, {"reverse", KlDirection::reverse}}},
                                    "KL direction");
}

std::vector<Example> build_examples(const std::vector<Problem>& problems, TextFormat format,
                                    const PromptTemplate& tmpl) {
  std::vector<Example> out;
  out.reserve(problems.size());
  for (const auto& p : problems) {
    const TrainingText text =
        format == TextFormat::chat ? render_chat_example(p, tmpl) : render_plain_example(p, tmpl.style);
    Example ex;
    ex.tokens = Tokenizer::encode(text.text);
    ex.tokens.push_back(Tokenizer::kEos);
    ex.assistant_offset = text.assistant_offset;
    out.push_back(std::move(ex));
  }
  return out;
}

Batch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& rows, MaskPolicy policy,
                 std::size_t max_len) {
  if (rows.empty()) throw ContractError("make_batch: no rows");
  std::size_t len = 0;
  for (auto r : rows) {
    const auto& ex = examples.at(r);
    if (ex.tokens.size() < 2) throw DataError("make_batch: example shorter than two tokens");
    len = std::max(len, std::min(ex.tokens.size() - 1, max_len));
  }
  Batch b;
  b.inputs.batch = rows.size();
  b.inputs.len = len;
  b.inputs.tokens.assign(rows.size() * len, Tokenizer::kEos);
  b.targets.assign(rows.size() * len, Tokenizer::kEos);
  b.mask.assign(rows.size() * len, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& ex = examples[rows[i]];
    const std::size_t n = std::min(ex.tokens.size() - 1, max_len);
    for (std::size_t t = 0; t < n; ++t) {
      b.inputs.tokens[i * len + t] = ex.tokens[t];
      b.targets[i * len + t] = ex.tokens[t + 1];
      const bool keep = policy == MaskPolicy::all_tokens || t + 1 >= ex.assistant_offset;
      b.mask[i * len + t] = keep ? 1.0 : 0.0;
    }
    b.tokens += n;
  }
  return b;
}

Tensor stage1_matrix_orientation(const Model& student, const Model& teacher, std::size_t layer,
                                 const Tensor& block_input) {
  const AttentionWeights& tw = teacher_attention(teacher, layer);
  const BlockWeights& sb = student.blocks.at(layer);
  const double eps = teacher.spec.rmsnorm_eps;
  Tensor target;
  {
    NoGradGuard guard;
    target = attention_matrix(teacher.spec, tw, rmsnorm(block_input, teacher.blocks[layer].norm_mixer, eps));
  }
  Tensor mixer = materialize_mixer(student.spec, sb.mixer, rmsnorm(block_input, sb.norm_mixer, student.spec.rmsnorm_eps));
  const std::size_t B = target.dim(0), H = target.dim(1), T = target.dim(2);
  const std::size_t P = mixer.dim(1);
  if (mixer.dim(0) != B || mixer.dim(2) != T) {
    throw ContractError("stage1: mixer " + shape_str(mixer.shape()) + " vs attention " + shape_str(target.shape()));
  }
  std::size_t pairs = H;
  if (P != H) {
    const std::size_t hd = static_cast<std::size_t>(teacher.spec.head_dim);
    const std::size_t width = static_cast<std::size_t>(student.spec.d_model) / P;  // channels per student unit
    if (hd % width == 0 && P == H * (hd / width)) {
      // Several student groups inside one teacher head: compare the head with their mean.
      mixer = mean(reshape(mixer, {B, H, hd / width, T, T}), 2);
    } else if (width % hd == 0 && H == P * (width / hd)) {
      // One group spans several heads: compare it with the heads' mean.
      target = mean(reshape(target, {B, P, width / hd, T, T}), 2);
      pairs = P;
    } else {
      throw ConfigError("stage1: no channel-span pairing between " + std::to_string(H) + " heads and " +
                        std::to_string(P) + " groups");
    }
  }
  return scale(sum(square(sub(mixer, target))), 1.0 / static_cast<double>(B * pairs));
}

Tensor stage2_hidden_alignment(const Model& student, const Model& teacher, std::size_t layer,
                               const Tensor& block_input) {
  Tensor target;
  {
    NoGradGuard guard;
    target = block_forward(teacher, layer, block_input);
  }
  Tensor out = block_forward(student, layer, block_input);
  if (out.shape() != target.shape()) {
    throw ContractError("stage2: student output " + shape_str(out.shape()) + " vs teacher " +
                        shape_str(target.shape()));
  }
  return mean(square(sub(out, target)));
}

Tensor stage3_e2e_kd(const Model& student, const Model& teacher, const Batch& batch, KlDirection direction) {
  Tensor teacher_logits;
  {
    NoGradGuard guard;
    teacher_logits = flat_logits(teacher, batch.inputs);
  }
  return kl_divergence(flat_logits(student, batch.inputs), teacher_logits, batch.mask, direction);
}

Model init_hybrid_from_teacher(const Model& teacher, const std::vector<std::size_t>& layers_to_convert,
                               std::uint64_t seed) {
  Model m = teacher.clone();
  std::set<std::size_t> seen;
  for (auto idx : layers_to_convert) {
    if (idx >= m.blocks.size()) {
      throw ConfigError("layer index " + std::to_string(idx) + " out of range for " + std::to_string(m.blocks.size()) +
                        " layers");
    }
    if (!seen.insert(idx).second) throw ConfigError("layer " + std::to_string(idx) + " listed twice");
    const auto* attn = std::get_if<AttentionWeights>(&m.blocks[idx].mixer);
    if (attn == nullptr) throw ConfigError("layer " + std::to_string(idx) + " is not an attention layer");
    auto fresh = std::get<SsmV1Weights>(init_mixer(m.spec, LayerKind::ssm_v1, hash_key({seed, 0x687962ULL, idx})));
    fresh.w_c = attn->w_q;
    fresh.w_b = attn->w_k;
    fresh.w_x = attn->w_v;
    fresh.w_o = attn->w_o;
    m.blocks[idx].mixer = std::move(fresh);
    m.spec.layer_kinds[idx] = LayerKind::ssm_v1;
  }
  m.spec.validate();
  return m;
}

Model init_pure_student(const Model& teacher, std::uint64_t seed) {
  Model m = teacher.clone();
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    m.blocks[i].mixer = init_mixer(m.spec, LayerKind::ssm_v2, hash_key({seed, 0x707572ULL, i}));
    m.spec.layer_kinds[i] = LayerKind::ssm_v2;
  }
  m.spec.validate();
  return m;
}

std::size_t planned_steps(const StageConfig& config, const std::vector<Example>& examples) {
  if (config.token_budget == 0) return 0;
  if (examples.empty()) throw DataError("no training examples");
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  double total = 0.0;
  for (const auto& ex : examples) total += static_cast<double>(std::min(ex.tokens.size() - 1, config.seq_len));
  const double per_batch = total / static_cast<double>(examples.size()) * static_cast<double>(config.batch_size);
  return static_cast<std::size_t>(std::ceil(static_cast<double>(config.token_budget) / per_batch));
}

StageResult train_language_model(Model& model, const std::vector<Example>& examples, const StageConfig& config,
                                 std::uint64_t seed, const ProgressFn& progress) {
  StageResult result{config.stage, 0, planned_steps(config, examples), 0.0, config.mask};
  if (result.steps == 0) return result;
  model.set_requires_grad(true);
  std::vector<Tensor> params;
  for (const auto& p : model.named_parameters()) params.push_back(p.tensor);
  AdamW opt(params);
  const std::size_t V = static_cast<std::size_t>(model.spec.vocab_size);
  for (std::size_t step = 0; step < result.steps; ++step) {
    const Batch b =
        make_batch(examples, draw_rows(seed, config.stage, step, examples.size(), config.batch_size), config.mask,
                   config.seq_len);
    Tensor loss = step_loss(config.stage, step, [&] {
      return cross_entropy(reshape(forward(model, b.inputs), {b.inputs.batch * b.inputs.len, V}), b.targets, b.mask);
    });
    backward(loss);
    opt.step(wsd_lr(step, result.steps, config.lr));
    result.tokens += b.tokens;
    result.final_loss = loss.item();
    if (progress) progress(config.stage, step + 1, result.steps, result.final_loss);
  }
  model.set_requires_grad(false);
  return result;
}

StageResult run_stage(Model& student, const Model& teacher, const std::vector<Example>& examples,
                      const StageConfig& config, std::uint64_t seed, const ProgressFn& progress) {
  StageResult result{config.stage, 0, planned_steps(config, examples), 0.0, config.mask};
  if (student.blocks.size() != teacher.blocks.size() || student.spec.d_model != teacher.spec.d_model ||
      student.spec.vocab_size != teacher.spec.vocab_size) {
    throw ConfigError("student and teacher specs are incompatible");
  }
  if (result.steps == 0) return result;
  student.set_requires_grad(false);

  const bool layerwise =
      config.stage == StageId::matrix_orientation || config.stage == StageId::hidden_alignment;
  if (layerwise) {
    const std::size_t L = student.blocks.size();
    std::vector<AdamW> opts;
    for (std::size_t l = 0; l < L; ++l) {
      teacher_attention(teacher, l);
      auto named = student.block_parameters(l);
      std::vector<Tensor> params = config.stage == StageId::matrix_orientation
                                       ? mixer_params(named)
                                       : select_params(named, !config.freeze_mlp);
      enable_grad(params);
      opts.emplace_back(params);
    }
    for (std::size_t step = 0; step < result.steps; ++step) {
      const Batch b = make_batch(examples, draw_rows(seed, config.stage, step, examples.size(), config.batch_size),
                                 config.mask, config.seq_len);
      std::vector<Tensor> hidden;
      {
        NoGradGuard guard;
        hidden = forward_hidden(teacher, b.inputs);
      }
      const double lr = wsd_lr(step, result.steps, config.lr);
      double total = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        Tensor loss = step_loss(config.stage, step, [&] {
          return config.stage == StageId::matrix_orientation
                     ? stage1_matrix_orientation(student, teacher, l, hidden[l])
                     : stage2_hidden_alignment(student, teacher, l, hidden[l]);
        });
        backward(loss);
        opts[l].step(lr);
        total += loss.item();
      }
      result.tokens += b.tokens;
      result.final_loss = total / static_cast<double>(L);
      if (progress) progress(config.stage, step + 1, result.steps, result.final_loss);
    }
  } else if (config.stage == StageId::e2e_kd || config.stage == StageId::hybrid_kd) {
    student.set_requires_grad(true);
    std::vector<Tensor> params;
    for (const auto& p : student.named_parameters()) params.push_back(p.tensor);
    AdamW opt(params);
    for (std::size_t step = 0; step < result.steps; ++step) {
      const Batch b = make_batch(examples, draw_rows(seed, config.stage, step, examples.size(), config.batch_size),
                                 config.mask, config.seq_len);
      Tensor loss =
          step_loss(config.stage, step, [&] { return stage3_e2e_kd(student, teacher, b, config.direction); });
      backward(loss);
      opt.step(wsd_lr(step, result.steps, config.lr));
      result.tokens += b.tokens;
      result.final_loss = loss.item();
      if (progress) progress(config.stage, step + 1, result.steps, result.final_loss);
    }
  } else {
    throw ConfigError("run_stage: '" + std::string(to_string(config.stage)) + "' is not a distillation stage");
  }
  student.set_requires_grad(false);
  return result;
}

StageResult run_sft(Model& student, const std::vector<Example>& examples, const StageConfig& config,
                    std::uint64_t seed, const ProgressFn& progress) {
  StageResult result{StageId::sft, 0, 0, 0.0, config.mask};
  if (config.epochs == 0 || examples.empty()) return result;
  if (config.batch_size == 0) throw ConfigError("batch_size must be positive");
  const std::size_t per_epoch = (examples.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  student.set_requires_grad(true);
  std::vector<Tensor> params;
  for (const auto& p : student.named_parameters()) params.push_back(p.tensor);
  AdamW opt(params);
  const std::size_t V = static_cast<std::size_t>(student.spec.vocab_size);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(hash_key({seed, stage_tag(StageId::sft), epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const Batch b = make_batch(examples, rows, config.mask, config.seq_len);
      Tensor loss = step_loss(StageId::sft, step, [&] {
        return cross_entropy(reshape(forward(student, b.inputs), {b.inputs.batch * b.inputs.len, V}), b.targets,
                             b.mask);
      });
      backward(loss);
      opt.step(wsd_lr(step, total, config.lr));
      ++step;
      result.tokens += b.tokens;
      result.final_loss = loss.item();
      if (progress) progress(StageId::sft, step, total, result.final_loss);
    }
  }
  result.steps = step;
  student.set_requires_grad(false);
  return result;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["path"] = path;
  j["seed"] = seed;
  nlohmann::ordered_json st = nlohmann::ordered_json::object();
  for (const auto& s : stages) {
    st[std::string(dlab::to_string(s.stage))] = {{"tokens", s.tokens},
                                                 {"steps", s.steps},
                                                 {"final_loss", s.final_loss},
                                                 {"mask", std::string(dlab::to_string(s.mask))}};
  }
  j["stages"] = st;
  j["wallclock_s"] = wallclock_s;
  return j.dump(2) + "\n";
}

std::vector<std::uint64_t> split_budget(std::uint64_t total) {
  const std::uint64_t a = total / 8;
  const std::uint64_t b = total * 3 / 8;
  return {a, b, total - a - b};
}

PipelineResult run_pipeline(const PipelineConfig& config, const Model& teacher, const std::vector<Problem>& train,
                            const ProgressFn& progress) {
  const auto started = std::chrono::steady_clock::now();
  const std::vector<StageId> allowed = config.path == DistillPath::pure
                                           ? std::vector<StageId>{StageId::matrix_orientation,
                                                                  StageId::hidden_alignment, StageId::e2e_kd}
                                           : std::vector<StageId>{StageId::hybrid_kd};
  std::ptrdiff_t last = -1;
  for (const auto& s : config.stages) {
    const auto it = std::find(allowed.begin(), allowed.end(), s.stage);
    if (it == allowed.end()) {
      throw ConfigError("stage '" + std::string(to_string(s.stage)) + "' does not belong to the " +
                        std::string(to_string(config.path)) + " path");
    }
    const std::ptrdiff_t pos = it - allowed.begin();
    if (pos <= last) {
      throw ConfigError("stage '" + std::string(to_string(s.stage)) + "' is out of order for the " +
                        std::string(to_string(config.path)) + " path");
    }
    last = pos;
  }
  for (std::size_t l = 0; l < teacher.blocks.size(); ++l) teacher_attention(teacher, l);

  PipelineResult out;
  out.manifest.run_id = config.run_id;
  out.manifest.path = std::string(to_string(config.path));
  out.manifest.seed = config.seed;

  const auto chat = build_examples(train, TextFormat::chat, config.tmpl);
  if (config.path == DistillPath::pure) {
    out.student = init_pure_student(teacher, config.seed);
    const auto plain = build_examples(train, TextFormat::plain, config.tmpl);
    for (const auto& s : config.stages) {
      const auto& data = s.stage == StageId::e2e_kd ? chat : plain;
      out.manifest.stages.push_back(
          run_stage(out.student, teacher, data, s, hash_key({config.seed, stage_tag(s.stage)}), progress));
    }
  } else {
    const std::size_t L = teacher.blocks.size();
    if (config.attention_layers > L) throw ConfigError("more attention layers requested than the model has");
    const auto keep = spread_layers(L, config.attention_layers);
    std::vector<std::size_t> convert;
    for (std::size_t l = 0; l < L; ++l) {
      if (std::find(keep.begin(), keep.end(), l) == keep.end()) convert.push_back(l);
    }
    out.student = init_hybrid_from_teacher(teacher, convert, config.seed);
    for (const auto& s : config.stages) {
      out.manifest.stages.push_back(
          run_stage(out.student, teacher, chat, s, hash_key({config.seed, stage_tag(s.stage)}), progress));
    }
  }
  out.manifest.wallclock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace dlab
