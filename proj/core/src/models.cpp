#include "dlab/models.hpp"

#include <cmath>
#include <json.hpp>

#include "dlab/error.hpp"
#include "dlab/io.hpp"
#include "dlab/rng.hpp"

namespace dlab {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor randn(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor constant(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

double inv_sqrt(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::attention:
      return "attention";
    case LayerKind::ssm_v1:
      return "ssm_v1";
    case LayerKind::ssm_v2:
      return "ssm_v2";
  }
  return "?";
}

LayerKind parse_layer_kind(std::string_view text) {
  if (text == "attention") return LayerKind::attention;
  if (text == "ssm_v1") return LayerKind::ssm_v1;
  if (text == "ssm_v2") return LayerKind::ssm_v2;
  throw ConfigError("unknown layer kind '" + std::string(text) + "'");
}

void ModelSpec::validate() const {
  const auto fail = [](const std::string& m) { throw ConfigError("model spec: " + m); };
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || state_size <= 0 ||
      mlp_hidden <= 0 || max_seq_len <= 0) {
    fail("all extents must be positive");
  }
  if (d_model != n_heads * head_dim) fail("d_model must equal n_heads * head_dim");
  if (d_model % state_size != 0) fail("d_model must be divisible by state_size");
  if (layer_kinds.size() != sz(n_layers)) fail("layer_kinds length must equal n_layers");
  if (!(rmsnorm_eps > 0.0)) fail("rmsnorm_eps must be positive");
}

std::string spec_to_json(const ModelSpec& spec) {
  nlohmann::ordered_json j;
  j["vocab_size"] = spec.vocab_size;
  j["d_model"] = spec.d_model;
  j["n_layers"] = spec.n_layers;
  auto kinds = nlohmann::ordered_json::array();
  for (auto k : spec.layer_kinds) kinds.push_back(std::string(to_string(k)));
  j["layer_kinds"] = kinds;
  j["n_heads"] = spec.n_heads;
  j["head_dim"] = spec.head_dim;
  j["state_size"] = spec.state_size;
  j["mlp_hidden"] = spec.mlp_hidden;
  j["max_seq_len"] = spec.max_seq_len;
  j["rmsnorm_eps"] = spec.rmsnorm_eps;
  j["ssm_v1_scale_c"] = spec.ssm_v1_scale_c;
  return j.dump(2);
}

ModelSpec spec_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  ModelSpec s;
  s.vocab_size = j.at("vocab_size").get<int>();
  s.d_model = j.at("d_model").get<int>();
  s.n_layers = j.at("n_layers").get<int>();
  s.layer_kinds.clear();
  for (const auto& k : j.at("layer_kinds")) s.layer_kinds.push_back(parse_layer_kind(k.get<std::string>()));
  s.n_heads = j.at("n_heads").get<int>();
  s.head_dim = j.at("head_dim").get<int>();
  s.state_size = j.at("state_size").get<int>();
  s.mlp_hidden = j.at("mlp_hidden").get<int>();
  s.max_seq_len = j.at("max_seq_len").get<int>();
  s.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  s.ssm_v1_scale_c = j.value("ssm_v1_scale_c", false);
  s.validate();
  return s;
}

std::vector<std::size_t> spread_layers(std::size_t n_layers, std::size_t count) {
  if (count > n_layers) throw ConfigError("cannot place more layers than the stack has");
  std::vector<std::size_t> out;
  if (count == 0) return out;
  if (count == 1) return {0};
  for (std::size_t i = 0; i < count; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(n_layers - 1) / static_cast<double>(count - 1);
    out.push_back(static_cast<std::size_t>(std::lround(pos)));
  }
  return out;
}

LayerKind BlockWeights::kind() const {
  if (std::holds_alternative<AttentionWeights>(mixer)) return LayerKind::attention;
  if (std::holds_alternative<SsmV1Weights>(mixer)) return LayerKind::ssm_v1;
  return LayerKind::ssm_v2;
}

MixerWeights init_mixer(const ModelSpec& spec, LayerKind kind, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t D = sz(spec.d_model);
  const std::size_t H = sz(spec.n_heads);
  const std::size_t N = sz(spec.state_size);
  const double sd = inv_sqrt(spec.d_model);
  const double out_sd = sd / std::sqrt(2.0 * spec.n_layers);
  switch (kind) {
    case LayerKind::attention:
      return AttentionWeights{randn(rng, {D, D}, sd), randn(rng, {D, D}, sd), randn(rng, {D, D}, sd),
                              randn(rng, {D, D}, out_sd)};
    case LayerKind::ssm_v1: {
      SsmV1Weights w;
      w.w_c = randn(rng, {D, D}, sd);
      w.w_b = randn(rng, {D, D}, sd);
      w.w_x = randn(rng, {D, D}, sd);
      w.w_o = randn(rng, {D, D}, out_sd);
      const std::size_t Hdt = sz(spec.dt_hidden());
      w.dt_w1 = randn(rng, {D, Hdt}, sd);
      w.dt_b1 = constant({Hdt}, 0.0);
      // Zero final layer: softplus(0) = ln 2, so the initial decay is exp(-ln 2) = 1/2 with a = -1.
      w.dt_w2 = constant({Hdt, D}, 0.0);
      w.dt_b2 = constant({D}, 0.0);
      w.a_raw = constant({D, N}, std::log(std::exp(1.0) - 1.0));
      return w;
    }
    case LayerKind::ssm_v2: {
      SsmV2Weights w;
      w.w_x = randn(rng, {D, D}, sd);
      w.w_o = randn(rng, {D, D}, out_sd);
      w.w_b = randn(rng, {D, H * N}, sd);
      w.w_c = randn(rng, {D, H * N}, sd);
      w.w_decay = randn(rng, {D, H}, 0.1 * sd);
      // Heads start at decays spread over [0.5, 0.95].
      std::vector<double> bias(H);
      for (std::size_t h = 0; h < H; ++h) {
        const double a = H == 1 ? 0.8 : 0.5 + 0.45 * static_cast<double>(h) / static_cast<double>(H - 1);
        bias[h] = std::log(a / (1.0 - a));
      }
      w.b_decay = Tensor::from({H}, std::move(bias), true);
      return w;
    }
  }
  throw ContractError("unknown layer kind");
}

Model init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(hash_key({seed, 0x6d6f64656cULL}));
  const std::size_t D = sz(spec.d_model);
  const std::size_t V = sz(spec.vocab_size);
  const std::size_t F = sz(spec.mlp_hidden);
  Model m;
  m.spec = spec;
  m.tok_emb = randn(rng, {V, D}, 0.5);
  m.pos_emb = randn(rng, {sz(spec.max_seq_len), D}, 0.1);
  for (std::size_t i = 0; i < sz(spec.n_layers); ++i) {
    BlockWeights b;
    b.norm_mixer = constant({D}, 1.0);
    b.norm_mlp = constant({D}, 1.0);
    b.mixer = init_mixer(spec, spec.layer_kinds[i], hash_key({seed, 0x6c61796572ULL, i}));
    b.mlp.w_up = randn(rng, {D, F}, inv_sqrt(spec.d_model));
    b.mlp.b_up = constant({F}, 0.0);
    b.mlp.w_down = randn(rng, {F, D}, inv_sqrt(spec.mlp_hidden) / std::sqrt(2.0 * spec.n_layers));
    b.mlp.b_down = constant({D}, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.norm_final = constant({D}, 1.0);
  m.lm_head = randn(rng, {D, V}, inv_sqrt(spec.d_model));
  return m;
}

std::vector<NamedTensor> Model::block_parameters(std::size_t layer) const {
  const BlockWeights& b = blocks.at(layer);
  const std::string p = "blocks." + std::to_string(layer) + ".";
  std::vector<NamedTensor> out{{p + "norm_mixer", b.norm_mixer}, {p + "norm_mlp", b.norm_mlp}};
  if (const auto* w = std::get_if<AttentionWeights>(&b.mixer)) {
    out.insert(out.end(), {{p + "attn.w_q", w->w_q}, {p + "attn.w_k", w->w_k}, {p + "attn.w_v", w->w_v},
                           {p + "attn.w_o", w->w_o}});
  } else if (const auto* w = std::get_if<SsmV1Weights>(&b.mixer)) {
    out.insert(out.end(), {{p + "ssm_v1.w_c", w->w_c},
                           {p + "ssm_v1.w_b", w->w_b},
                           {p + "ssm_v1.w_x", w->w_x},
                           {p + "ssm_v1.w_o", w->w_o},
                           {p + "ssm_v1.dt_w1", w->dt_w1},
                           {p + "ssm_v1.dt_b1", w->dt_b1},
                           {p + "ssm_v1.dt_w2", w->dt_w2},
                           {p + "ssm_v1.dt_b2", w->dt_b2},
                           {p + "ssm_v1.a_raw", w->a_raw}});
  } else {
    const auto& w2 = std::get<SsmV2Weights>(b.mixer);
    out.insert(out.end(), {{p + "ssm_v2.w_x", w2.w_x},
                           {p + "ssm_v2.w_b", w2.w_b},
                           {p + "ssm_v2.w_c", w2.w_c},
                           {p + "ssm_v2.w_decay", w2.w_decay},
                           {p + "ssm_v2.b_decay", w2.b_decay},
                           {p + "ssm_v2.w_o", w2.w_o}});
  }
  out.insert(out.end(), {{p + "mlp.w_up", b.mlp.w_up},
                         {p + "mlp.b_up", b.mlp.b_up},
                         {p + "mlp.w_down", b.mlp.w_down},
                         {p + "mlp.b_down", b.mlp.b_down}});
  return out;
}

std::vector<NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto b = block_parameters(i);
    out.insert(out.end(), b.begin(), b.end());
  }
  out.push_back({"norm_final", norm_final});
  out.push_back({"lm_head", lm_head});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

namespace {

MixerWeights clone_mixer(const MixerWeights& mixer) {
  return std::visit(
      [](const auto& w) -> MixerWeights {
        using W = std::decay_t<decltype(w)>;
        W c = w;
        if constexpr (std::is_same_v<W, AttentionWeights>) {
          c = {w.w_q.clone(), w.w_k.clone(), w.w_v.clone(), w.w_o.clone()};
        } else if constexpr (std::is_same_v<W, SsmV1Weights>) {
          c = {w.w_c.clone(),  w.w_b.clone(),  w.w_x.clone(),  w.w_o.clone(), w.dt_w1.clone(),
               w.dt_b1.clone(), w.dt_w2.clone(), w.dt_b2.clone(), w.a_raw.clone()};
        } else {
          c = {w.w_x.clone(), w.w_o.clone(), w.w_b.clone(), w.w_c.clone(), w.w_decay.clone(), w.b_decay.clone()};
        }
        return c;
      },
      mixer);
}

}  // namespace

Model Model::clone() const {
  Model m;
  m.spec = spec;
  m.tok_emb = tok_emb.clone();
  m.pos_emb = pos_emb.clone();
  for (const auto& b : blocks) {
    BlockWeights c;
    c.norm_mixer = b.norm_mixer.clone();
    c.norm_mlp = b.norm_mlp.clone();
    c.mixer = clone_mixer(b.mixer);
    c.mlp = {b.mlp.w_up.clone(), b.mlp.b_up.clone(), b.mlp.w_down.clone(), b.mlp.b_down.clone()};
    m.blocks.push_back(std::move(c));
  }
  m.norm_final = norm_final.clone();
  m.lm_head = lm_head.clone();
  return m;
}

void Model::set_requires_grad(bool on) const {
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

void Model::zero_grad() const {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

std::filesystem::path spec_sidecar(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".json");
}

void save_model(const std::filesystem::path& checkpoint, const Model& model) {
  if (checkpoint.has_parent_path()) std::filesystem::create_directories(checkpoint.parent_path());
  save_checkpoint(checkpoint, model.named_parameters());
  write_text(spec_sidecar(checkpoint), spec_to_json(model.spec) + "\n");
}

Model load_model(const std::filesystem::path& checkpoint) {
  const ModelSpec spec = spec_from_json(read_text(spec_sidecar(checkpoint)));
  Model model = init_model(spec, 0);
  const auto stored = load_checkpoint(checkpoint);
  auto slots = model.named_parameters();
  if (stored.size() != slots.size()) {
    throw DataError("checkpoint " + checkpoint.string() + " has " + std::to_string(stored.size()) +
                    " tensors, spec expects " + std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (stored[i].name != slots[i].name || stored[i].tensor.shape() != slots[i].tensor.shape()) {
      throw DataError("checkpoint record " + stored[i].name + " does not match expected " + slots[i].name + " " +
                      shape_str(slots[i].tensor.shape()));
    }
    auto dst = slots[i].tensor.mutable_data();
    const auto src = stored[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward

Tensor embed(const Model& model, const TokenBatch& batch) {
  const std::size_t B = batch.batch, T = batch.len, D = sz(model.spec.d_model);
  if (B == 0 || T == 0 || batch.tokens.size() != B * T) throw DimensionError("embed: malformed token batch");
  if (T > sz(model.spec.max_seq_len)) {
    throw ContractError("sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                        std::to_string(model.spec.max_seq_len));
  }
  const Tensor tok = reshape(embedding(model.tok_emb, batch.tokens), {B, T, D});
  const Tensor pos = slice(model.pos_emb, 0, 0, T);  // [T, D] broadcast over batch
  return add(tok, pos);
}

Tensor mlp_forward(const MlpWeights& mlp, const Tensor& x) {
  return linear(silu(linear(x, mlp.w_up, mlp.b_up)), mlp.w_down, mlp.b_down);
}

Tensor block_forward(const Model& model, std::size_t layer, const Tensor& x) {
  const BlockWeights& b = model.blocks.at(layer);
  const double eps = model.spec.rmsnorm_eps;
  const Tensor h = add(x, mixer_forward(model.spec, b.mixer, rmsnorm(x, b.norm_mixer, eps)));
  return add(h, mlp_forward(b.mlp, rmsnorm(h, b.norm_mlp, eps)));
}

Tensor head(const Model& model, const Tensor& x) {
  return linear(rmsnorm(x, model.norm_final, model.spec.rmsnorm_eps), model.lm_head);
}

Tensor forward(const Model& model, const TokenBatch& batch) {
  Tensor x = embed(model, batch);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) x = block_forward(model, i, x);
  return head(model, x);
}

std::vector<Tensor> forward_hidden(const Model& model, const TokenBatch& batch) {
  std::vector<Tensor> out{embed(model, batch)};
  for (std::size_t i = 0; i < model.blocks.size(); ++i) out.push_back(block_forward(model, i, out.back()));
  return out;
}

}  // namespace dlab
