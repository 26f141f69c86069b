#include <gtest/gtest.h>

#include <cmath>

#include "dlab/distill.hpp"
#include "dlab/error.hpp"
#include "dlab/optim.hpp"
#include "dlab/rng.hpp"
#include "oracles.hpp"

using namespace dlab;

namespace {

ModelSpec tiny_spec(int layers = 2) {
  ModelSpec s;
  s.d_model = 8;
  s.n_layers = layers;
  s.layer_kinds.assign(static_cast<std::size_t>(layers), LayerKind::attention);
  s.n_heads = 2;
  s.head_dim = 4;
  s.state_size = 4;
  s.mlp_hidden = 16;
  s.max_seq_len = 128;
  return s;
}

std::vector<double> flat(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool same_parameters(const Model& a, const Model& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || flat(pa[i].tensor) != flat(pb[i].tensor)) return false;
  }
  return true;
}

std::size_t count(const std::vector<NamedTensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

TokenBatch token_batch(std::size_t batch, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{batch, len, std::vector<int>(batch * len)};
  for (auto& t : b.tokens) t = static_cast<int>(rng.below(97));
  return b;
}

std::vector<Problem> problems(std::size_t n) { return generate_problems(21, n, {1, 2}, Split::train); }

}  // namespace

TEST(Kl, HandComputedReverseValue) {
  const Tensor student = Tensor::from({1, 4}, {0, 0, 0, 0});
  const Tensor teacher = Tensor::from({1, 4}, {std::log(0.97), std::log(0.01), std::log(0.01), std::log(0.01)});
  const double mask[] = {1.0};
  const double kl = kl_divergence(student, teacher, mask, KlDirection::reverse).item();
  const double expected = 0.25 * (std::log(0.25 / 0.97) + 3.0 * std::log(0.25 / 0.01));
  EXPECT_NEAR(kl, expected, 1e-12);
  EXPECT_NEAR(kl, 2.075, 1e-3);
}

TEST(Kl, IdenticalDistributionsGiveZeroInBothDirections) {
  const Tensor x = oracle::random_input(1, 5, 7, 3);
  const Tensor logits = reshape(x, {5, 7});
  const std::vector<double> mask(5, 1.0);
  EXPECT_EQ(kl_divergence(logits, logits, mask, KlDirection::forward).item(), 0.0);
  EXPECT_EQ(kl_divergence(logits, logits, mask, KlDirection::reverse).item(), 0.0);
  EXPECT_THROW(kl_divergence(logits, logits, std::vector<double>(5, 0.0), KlDirection::forward), DataError);
}

TEST(Wsd, ScheduleShape) {
  EXPECT_EQ(wsd_lr(0, 1000, 1e-4), 0.0);
  EXPECT_EQ(wsd_lr(500, 1000, 1e-4), 1e-4);
  EXPECT_NEAR(wsd_lr(950, 1000, 1e-4), 5e-5, 1e-18);
  EXPECT_NEAR(wsd_lr(50, 1000, 2.0), 1.0, 1e-15);
  EXPECT_EQ(wsd_lr(1000, 1000, 1e-4), 0.0);
  for (std::size_t s = 100; s <= 900; s += 50) EXPECT_EQ(wsd_lr(s, 1000, 3e-3), 3e-3);
  EXPECT_THROW(wsd_lr(1001, 1000, 1e-4), ContractError);
}

TEST(AdamW, FirstStepMatchesHandUpdate) {
  Tensor matrix = Tensor::from({1, 1}, {2.0}, true);
  Tensor vec = Tensor::from({1}, {2.0}, true);
  AdamW opt({matrix, vec});
  backward(add(sum(scale(matrix, 0.3)), sum(scale(vec, -0.3))));
  opt.step(0.1);
  // Bias-corrected moments reduce to g and g^2 on the first step.
  const double update = 0.3 / (0.3 + 1e-8);
  EXPECT_NEAR(matrix.data()[0], 2.0 - 0.1 * 0.1 * 2.0 - 0.1 * update, 1e-15);
  EXPECT_NEAR(vec.data()[0], 2.0 + 0.1 * update, 1e-15);
  EXPECT_FALSE(matrix.has_grad() && matrix.grad()[0] != 0.0);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, ClipsGlobalNorm) {
  Tensor a = Tensor::from({1}, {0.0}, true);
  AdamW opt({a});
  backward(sum(scale(a, 100.0)));
  EXPECT_NEAR(opt.grad_norm(), 100.0, 1e-12);
  opt.step(1.0);
  // Clipping rescales g but Adam's first step is scale invariant.
  EXPECT_NEAR(a.data()[0], -1.0, 1e-7);
}

TEST(InitHybrid, ConvertedProjectionsAreBitEqual) {
  ModelSpec spec = tiny_spec(3);
  const Model teacher = init_model(spec, 4);
  const Model hybrid = init_hybrid_from_teacher(teacher, {0, 2}, 9);
  EXPECT_EQ(hybrid.spec.layer_kinds, (std::vector<LayerKind>{LayerKind::ssm_v1, LayerKind::attention, LayerKind::ssm_v1}));
  for (std::size_t l : {0u, 2u}) {
    const auto& t = std::get<AttentionWeights>(teacher.blocks[l].mixer);
    const auto& s = std::get<SsmV1Weights>(hybrid.blocks[l].mixer);
    EXPECT_EQ(flat(s.w_c), flat(t.w_q));
    EXPECT_EQ(flat(s.w_b), flat(t.w_k));
    EXPECT_EQ(flat(s.w_x), flat(t.w_v));
    EXPECT_EQ(flat(s.w_o), flat(t.w_o));
    EXPECT_EQ(flat(hybrid.blocks[l].mlp.w_up), flat(teacher.blocks[l].mlp.w_up));
    EXPECT_EQ(flat(hybrid.blocks[l].mlp.w_down), flat(teacher.blocks[l].mlp.w_down));
    EXPECT_EQ(flat(hybrid.blocks[l].norm_mixer), flat(teacher.blocks[l].norm_mixer));
  }
  const auto tb = teacher.block_parameters(1), hb = hybrid.block_parameters(1);
  ASSERT_EQ(tb.size(), hb.size());
  for (std::size_t i = 0; i < tb.size(); ++i) EXPECT_EQ(flat(tb[i].tensor), flat(hb[i].tensor));
  EXPECT_EQ(flat(hybrid.tok_emb), flat(teacher.tok_emb));
  EXPECT_EQ(flat(hybrid.lm_head), flat(teacher.lm_head));
}

TEST(InitHybrid, ZeroConversionsIsLogitIdentical) {
  const Model teacher = init_model(tiny_spec(), 2);
  const Model same = init_hybrid_from_teacher(teacher, {}, 1);
  const TokenBatch b = token_batch(2, 9, 5);
  EXPECT_EQ(flat(forward(same, b)), flat(forward(teacher, b)));
}

TEST(InitHybrid, ParameterAccounting) {
  const ModelSpec spec = tiny_spec();
  const Model teacher = init_model(spec, 2);
  const Model hybrid = init_hybrid_from_teacher(teacher, {1}, 1);
  const std::size_t D = 8, R = D / 4, Ns = 4;
  const std::size_t dt_mlp = D * R + R + R * D + D;
  const std::size_t a = D * Ns;
  EXPECT_EQ(count(hybrid.block_parameters(1)), count(teacher.block_parameters(1)) + dt_mlp + a);
  EXPECT_EQ(hybrid.parameter_count(), teacher.parameter_count() + dt_mlp + a);
}

TEST(InitHybrid, BadIndicesAreConfigErrors) {
  const Model teacher = init_model(tiny_spec(), 2);
  EXPECT_THROW(init_hybrid_from_teacher(teacher, {2}, 1), ConfigError);
  EXPECT_THROW(init_hybrid_from_teacher(teacher, {0, 0}, 1), ConfigError);
  const Model hybrid = init_hybrid_from_teacher(teacher, {0}, 1);
  EXPECT_THROW(init_hybrid_from_teacher(hybrid, {0}, 1), ConfigError);
}

TEST(Stage1, EqualMixerGivesZeroLoss) {
  const Model teacher = init_model(tiny_spec(), 3);
  const Tensor x = oracle::random_input(2, 12, 8, 1);
  EXPECT_EQ(stage1_matrix_orientation(teacher, teacher, 0, x).item(), 0.0);
}

TEST(Stage1, LossStrictlyDecreasesOnFixedBatch) {
  for (LayerKind kind : {LayerKind::ssm_v2, LayerKind::ssm_v1}) {
    const Model teacher = init_model(tiny_spec(1), 3);
    Model student = kind == LayerKind::ssm_v2 ? init_pure_student(teacher, 5) : init_hybrid_from_teacher(teacher, {0}, 5);
    const Tensor x = oracle::random_input(2, 32, 8, 8);
    student.set_requires_grad(false);
    std::vector<Tensor> params;
    for (const auto& p : student.block_parameters(0)) {
      if (p.name.find(".mlp.") != std::string::npos || p.name.find("norm") != std::string::npos) continue;
      params.push_back(p.tensor);
      params.back().set_requires_grad(true);
    }
    AdamW opt(params);
    double prev = INFINITY;
    for (int step = 0; step < 200; ++step) {
      Tensor loss = stage1_matrix_orientation(student, teacher, 0, x);
      ASSERT_LT(loss.item(), prev) << to_string(kind) << " step " << step;
      prev = loss.item();
      backward(loss);
      opt.step(1e-3);
    }
  }
}

TEST(Stage1, IdentityTargetYieldsDiagonalMixer) {
  // Per head the normalized inputs are (cos t, sin t, 0, 0) up to a common
  // scale, so with large equal Q and K the causal softmax peaks on the diagonal.
  ModelSpec spec = tiny_spec(1);
  Model teacher = init_model(spec, 3);
  auto& attn = std::get<AttentionWeights>(teacher.blocks[0].mixer);
  auto wq = attn.w_q.mutable_data();
  auto wk = attn.w_k.mutable_data();
  for (std::size_t i = 0; i < 64; ++i) wq[i] = wk[i] = (i % 9 == 0) ? 30.0 : 0.0;
  const std::size_t T = 32;
  std::vector<double> rows(T * 8, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double theta = 2.0 * M_PI * static_cast<double>(t) / static_cast<double>(T);
    for (std::size_t h = 0; h < 2; ++h) {
      rows[t * 8 + h * 4] = std::cos(theta);
      rows[t * 8 + h * 4 + 1] = std::sin(theta);
    }
  }
  const Tensor x = Tensor::from({1, T, 8}, rows);
  const Tensor target = attention_matrix(spec, attn, rmsnorm(x, teacher.blocks[0].norm_mixer, spec.rmsnorm_eps));
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t t = 0; t < T; ++t) ASSERT_GT(target.data()[(h * T + t) * T + t], 0.999);
  }

  Model student = init_pure_student(teacher, 2);
  student.set_requires_grad(false);
  std::vector<Tensor> params;
  for (const auto& p : student.block_parameters(0)) {
    if (p.name.find("ssm_v2") == std::string::npos) continue;
    params.push_back(p.tensor);
    params.back().set_requires_grad(true);
  }
  AdamW opt(params, AdamWConfig{.weight_decay = 0.0});
  for (int step = 0; step < 600; ++step) {
    Tensor loss = stage1_matrix_orientation(student, teacher, 0, x);
    backward(loss);
    opt.step(1e-2);
  }
  NoGradGuard guard;
  const Tensor m = materialize_mixer(spec, student.blocks[0].mixer, rmsnorm(x, student.blocks[0].norm_mixer, 1e-6));
  double diag = 0.0, off = 0.0;
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t s = 0; s <= t; ++s) (s == t ? diag : off) += std::abs(m.data()[(h * T + t) * T + s]);
    }
  }
  EXPECT_GE(diag, 10.0 * off) << "diag " << diag << " off " << off;
}

TEST(Stage2, TeacherBlockGivesZeroLoss) {
  const Model teacher = init_model(tiny_spec(), 3);
  const Tensor x = oracle::random_input(2, 10, 8, 4);
  EXPECT_EQ(stage2_hidden_alignment(teacher, teacher, 1, x).item(), 0.0);
}

TEST(Stage2, LossHalvesWithin500StepsPerLayer) {
  const Model teacher = init_model(tiny_spec(), 6);
  Model student = init_pure_student(teacher, 7);
  student.set_requires_grad(false);
  std::vector<Tensor> hidden;
  {
    NoGradGuard guard;
    hidden = forward_hidden(teacher, token_batch(4, 24, 3));
  }
  for (std::size_t l = 0; l < 2; ++l) {
    std::vector<Tensor> params;
    for (const auto& p : student.block_parameters(l)) {
      params.push_back(p.tensor);
      params.back().set_requires_grad(true);
    }
    AdamW opt(params);
    const double first = stage2_hidden_alignment(student, teacher, l, hidden[l]).item();
    double last = first;
    for (int step = 0; step < 500; ++step) {
      Tensor loss = stage2_hidden_alignment(student, teacher, l, hidden[l]);
      last = loss.item();
      backward(loss);
      opt.step(1e-3);
    }
    EXPECT_LE(last, 0.5 * first) << "layer " << l;
  }
}

TEST(Stage2, FreezeFlagKeepsTransferredMlp) {
  const Model teacher = init_model(tiny_spec(), 6);
  const auto examples = build_examples(problems(16), TextFormat::plain, PromptTemplate::compact(AnswerStyle::final_answer_is));
  StageConfig cfg{.stage = StageId::hidden_alignment, .token_budget = 400, .batch_size = 4, .seq_len = 64, .lr = 1e-3};
  for (bool freeze : {true, false}) {
    Model student = init_pure_student(teacher, 1);
    cfg.freeze_mlp = freeze;
    const auto result = run_stage(student, teacher, examples, cfg, 3);
    EXPECT_GT(result.steps, 0u);
    bool mlp_same = true;
    for (std::size_t l = 0; l < 2; ++l) {
      mlp_same = mlp_same && flat(student.blocks[l].mlp.w_up) == flat(teacher.blocks[l].mlp.w_up) &&
                 flat(student.blocks[l].mlp.b_down) == flat(teacher.blocks[l].mlp.b_down);
    }
    EXPECT_EQ(mlp_same, freeze);
  }
}

TEST(Stage3, IdenticalModelsGiveZeroLoss) {
  const Model teacher = init_model(tiny_spec(), 3);
  const auto examples = build_examples(problems(4), TextFormat::chat, PromptTemplate::compact(AnswerStyle::final_answer_is));
  const Batch b = make_batch(examples, {0, 1, 2, 3}, MaskPolicy::all_tokens, 64);
  EXPECT_EQ(stage3_e2e_kd(teacher, teacher, b, KlDirection::forward).item(), 0.0);
  EXPECT_EQ(stage3_e2e_kd(teacher, teacher, b, KlDirection::reverse).item(), 0.0);
}

TEST(Stage3, KlGradientMatchesFiniteDifferences) {
  const auto cases = oracle::gradient_cases();
  for (const auto& c : cases) {
    if (c.name.rfind("kl_", 0) != 0) continue;
    for (std::uint64_t seed = 0; seed < 5; ++seed) EXPECT_LT(oracle::check_gradients(c, seed).max_rel_error, 1e-4) << c.name;
  }
}

TEST(Masking, AssistantOnlyIgnoresPromptTargets) {
  const Model model = init_model(tiny_spec(), 8);
  const auto tmpl = PromptTemplate::compact(AnswerStyle::final_answer_is);
  const auto examples = build_examples(problems(3), TextFormat::chat, tmpl);
  Batch b = make_batch(examples, {0, 1, 2}, MaskPolicy::assistant_only, 64);
  const Tensor logits = reshape(forward(model, b.inputs), {b.inputs.batch * b.inputs.len, 97});
  const double base = cross_entropy(logits, b.targets, b.mask).item();
  std::size_t perturbed = 0;
  for (std::size_t i = 0; i < b.targets.size(); ++i) {
    if (b.mask[i] == 0.0) {
      b.targets[i] = (b.targets[i] + 17) % 97;
      ++perturbed;
    }
  }
  ASSERT_GT(perturbed, 0u);
  EXPECT_EQ(cross_entropy(logits, b.targets, b.mask).item(), base);
  // The first unmasked target of each row is the first assistant character.
  for (std::size_t r = 0; r < 3; ++r) {
    const std::size_t off = examples[r].assistant_offset;
    EXPECT_EQ(b.mask[r * b.inputs.len + off - 2], 0.0);
    EXPECT_EQ(b.mask[r * b.inputs.len + off - 1], 1.0);
  }
}

TEST(Pipeline, PureStageOrderingEnforced) {
  const Model teacher = init_model(tiny_spec(), 1);
  PipelineConfig cfg{.path = DistillPath::pure, .seed = 1, .run_id = "x", .stages = {}};
  cfg.stages = {StageConfig{.stage = StageId::e2e_kd}, StageConfig{.stage = StageId::hidden_alignment}};
  EXPECT_THROW(run_pipeline(cfg, teacher, problems(4)), ConfigError);
  cfg.stages = {StageConfig{.stage = StageId::hybrid_kd}};
  EXPECT_THROW(run_pipeline(cfg, teacher, problems(4)), ConfigError);
  cfg.path = DistillPath::hybrid;
  cfg.stages = {StageConfig{.stage = StageId::e2e_kd}};
  EXPECT_THROW(run_pipeline(cfg, teacher, problems(4)), ConfigError);
}

TEST(Pipeline, ZeroBudgetsLeaveInitialization) {
  const Model teacher = init_model(tiny_spec(), 1);
  PipelineConfig cfg{.path = DistillPath::pure, .seed = 4, .run_id = "z", .stages = {}};
  cfg.stages = {StageConfig{.stage = StageId::matrix_orientation}, StageConfig{.stage = StageId::hidden_alignment},
                StageConfig{.stage = StageId::e2e_kd}};
  const auto pure = run_pipeline(cfg, teacher, problems(4));
  EXPECT_TRUE(same_parameters(pure.student, init_pure_student(teacher, 4)));
  for (const auto& s : pure.manifest.stages) EXPECT_EQ(s.steps, 0u);

  cfg.path = DistillPath::hybrid;
  cfg.stages = {StageConfig{.stage = StageId::hybrid_kd}};
  cfg.attention_layers = 1;
  const auto hybrid = run_pipeline(cfg, teacher, problems(4));
  EXPECT_TRUE(same_parameters(hybrid.student, init_hybrid_from_teacher(teacher, {1}, 4)));
}

TEST(Pipeline, TeacherFrozenAndRunsDeterministic) {
  const Model teacher = init_model(tiny_spec(), 1);
  const Model snapshot = teacher.clone();
  const auto train = problems(24);
  const auto run = [&](DistillPath path) {
    PipelineConfig cfg{.path = path, .seed = 11, .run_id = "d", .stages = {}};
    if (path == DistillPath::pure) {
      cfg.stages = {StageConfig{.stage = StageId::matrix_orientation, .token_budget = 300, .batch_size = 4, .lr = 1e-3},
                    StageConfig{.stage = StageId::hidden_alignment, .token_budget = 300, .batch_size = 4, .lr = 1e-3},
                    StageConfig{.stage = StageId::e2e_kd, .token_budget = 300, .batch_size = 4, .lr = 1e-3}};
    } else {
      cfg.stages = {StageConfig{.stage = StageId::hybrid_kd, .token_budget = 300, .batch_size = 4, .lr = 1e-3,
                                .mask = MaskPolicy::assistant_only, .direction = KlDirection::reverse}};
    }
    return run_pipeline(cfg, teacher, train);
  };
  for (DistillPath path : {DistillPath::pure, DistillPath::hybrid}) {
    const auto a = run(path);
    const auto b = run(path);
    EXPECT_TRUE(same_parameters(teacher, snapshot));
    ASSERT_EQ(a.manifest.stages.size(), b.manifest.stages.size());
    for (std::size_t i = 0; i < a.manifest.stages.size(); ++i) {
      EXPECT_GT(a.manifest.stages[i].steps, 0u);
      EXPECT_GE(a.manifest.stages[i].final_loss, 0.0);
      EXPECT_EQ(a.manifest.stages[i].final_loss, b.manifest.stages[i].final_loss);
      EXPECT_EQ(a.manifest.stages[i].tokens, b.manifest.stages[i].tokens);
    }
    EXPECT_TRUE(same_parameters(a.student, b.student));
    EXPECT_FALSE(same_parameters(a.student, path == DistillPath::pure ? init_pure_student(teacher, 11)
                                                                      : init_hybrid_from_teacher(teacher, {1}, 11)));
  }
}

TEST(Pipeline, BudgetSplitIsOneThreeFour) {
  EXPECT_EQ(split_budget(8000000), (std::vector<std::uint64_t>{1000000, 3000000, 4000000}));
  const auto odd = split_budget(101);
  EXPECT_EQ(odd[0] + odd[1] + odd[2], 101u);
}

TEST(Sft, ZeroEpochsIsIdentity) {
  Model student = init_model(tiny_spec(), 5);
  const Model before = student.clone();
  const auto examples = build_examples(problems(8), TextFormat::chat, PromptTemplate::compact(AnswerStyle::final_answer_is));
  const auto r = run_sft(student, examples, StageConfig{.stage = StageId::sft, .epochs = 0}, 1);
  EXPECT_EQ(r.steps, 0u);
  EXPECT_TRUE(same_parameters(student, before));
}

TEST(Sft, SecondEpochStartsLower) {
  Model student = init_model(tiny_spec(), 5);
  const auto examples = build_examples(problems(64), TextFormat::chat, PromptTemplate::compact(AnswerStyle::final_answer_is));
  const StageConfig cfg{.stage = StageId::sft, .batch_size = 8, .seq_len = 64, .lr = 3e-3,
                        .mask = MaskPolicy::assistant_only, .epochs = 2};
  std::vector<double> losses;
  const auto r = run_sft(student, examples, cfg, 2, [&](StageId, std::size_t, std::size_t, double loss) {
    losses.push_back(loss);
  });
  ASSERT_EQ(r.steps, 16u);
  ASSERT_EQ(losses.size(), 16u);
  EXPECT_LE(losses[8], losses[0]);
}

TEST(MakeBatch, PadsAndCountsRealTokens) {
  std::vector<Example> ex{{{5, 6, 7, 0}, 2}, {{8, 9}, 1}};
  const Batch b = make_batch(ex, {0, 1}, MaskPolicy::all_tokens, 64);
  EXPECT_EQ(b.inputs.len, 3u);
  EXPECT_EQ(b.inputs.tokens, (std::vector<int>{5, 6, 7, 8, 0, 0}));
  EXPECT_EQ(b.targets, (std::vector<int>{6, 7, 0, 9, 0, 0}));
  EXPECT_EQ(b.mask, (std::vector<double>{1, 1, 1, 1, 0, 0}));
  EXPECT_EQ(b.tokens, 4u);
  EXPECT_THROW(make_batch(ex, {}, MaskPolicy::all_tokens, 64), ContractError);
}
