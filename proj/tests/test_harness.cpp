#include <gtest/gtest.h>

#include <filesystem>

#include "polint/harness.hpp"

using namespace polint;

namespace {

Task clevr_task(std::uint64_t seed, int depth = 2, int train = 40, int test = 20, double cot = 1.0) {
  std::vector<PolicyDoc> docs;
  docs.push_back(render_policy(sample_decision_tree(depth, PolicyMode::T, derive_seed(seed, "a"), {}), "PA", PolicyMode::T));
  docs.push_back(render_policy(sample_decision_tree(depth, PolicyMode::M, derive_seed(seed, "b"), {}), "PB", PolicyMode::M));
  DatasetOptions o;
  o.per_policy_train = train;
  o.per_policy_test = test;
  o.seed = seed;
  o.min_objects = 2;
  o.max_objects = 4;
  o.cot_fraction = cot;
  const auto ds = generate_dataset(docs, o);
  return make_clevr_task(docs, ds.train.records, ds.test.records);
}

Task gta_task() { return make_gta_task(generate_gta_like(GtaOptions{5, 8, 30, 20, 4, "G"})); }

StageConfig quick(Stage s) {
  auto c = default_stage_config(s);
  c.epochs = 1;
  c.steps = 2;
  c.batch_size = 4;
  c.group_size = 2;
  c.max_len = 12;
  c.lr_scale = 10;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Harness, OracleScoresPerfectlyInEveryMode) {
  const Task clevr = clevr_task(1);
  const Task gta = gta_task();
  OracleAgent oc(clevr), og(gta);
  for (const Task* t : {&clevr, &gta}) {
    const OracleAgent& agent = t == &clevr ? oc : og;
    const auto ov = make_override(*t, 9);
    for (EvalMode m : {EvalMode::Internalized, EvalMode::InContext, EvalMode::Override}) {
      const auto r = evaluate(agent, *t, m, &ov);
      if (t->kind == TaskKind::Clevr) {
        EXPECT_DOUBLE_EQ(r.accuracy, 1.0) << eval_mode_name(m);
      } else {
        EXPECT_DOUBLE_EQ(r.overall, 1.0) << eval_mode_name(m);
      }
    }
  }
}

TEST(Harness, UnchangedOverrideReproducesInContext) {
  const Task t = clevr_task(2);
  ToyModel m(t.vocab, ModelDims{6, 6, 8}, 3);
  ModelAgent agent(m, 16);
  const auto ov = make_override(t, 1, true);
  const auto a = evaluate(agent, t, EvalMode::InContext, nullptr);
  const auto b = evaluate(agent, t, EvalMode::Override, &ov);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.format_rate, b.format_rate);
  EXPECT_THROW(evaluate(agent, t, EvalMode::Override, nullptr), ValidationError);
}

TEST(Harness, OverrideChangesSomeGoldLabels) {
  const Task t = clevr_task(3, 3);
  const auto ov = make_override(t, 7);
  std::size_t changed = 0;
  for (const auto& item : t.test) {
    if (gold_for(t, item, EvalMode::Override, &ov).label != gold_for(t, item, EvalMode::InContext, nullptr).label) ++changed;
  }
  EXPECT_GT(changed, 0u);
}

TEST(Harness, InternalizedPromptsCarryNoPolicyText) {
  const Task t = clevr_task(4);
  for (const auto& item : t.test) {
    const auto p = eval_prompt(t, item, EvalMode::Internalized, nullptr);
    EXPECT_EQ(std::find(p.begin(), p.end(), "Condition"), p.end());
    const auto q = eval_prompt(t, item, EvalMode::InContext, nullptr);
    EXPECT_GT(q.size(), p.size());
  }
}

TEST(Harness, RandomAgentIsNearChance) {
  const Task t = clevr_task(5, 2, 10, 400);
  RandomGuessAgent agent(t, 1);
  const auto r = evaluate(agent, t, EvalMode::Internalized, nullptr);
  EXPECT_NEAR(r.accuracy, 0.25, 0.06);
}

TEST(Harness, StagesAreDeterministicIgnoringWallTime) {
  const Task t = clevr_task(6);
  for (Stage s : {Stage::Cpt, Stage::SftDirect, Stage::SftCot, Stage::Rl}) {
    auto run = [&](unsigned workers) {
      ToyModel m(t.vocab, ModelDims{6, 6, 8}, 1);
      auto c = quick(s);
      c.workers = workers;
      auto res = run_stage(c, m, t);
      for (auto& r : res.rows) r.wall_ms = 0;
      std::string csv;
      for (const auto& r : res.rows) csv += metrics_line(r) + "\n";
      return std::make_pair(csv, m.params());
    };
    const auto a = run(1), b = run(1), c = run(2);
    EXPECT_EQ(a.first, b.first) << stage_name(s);
    EXPECT_EQ(a.second, b.second) << stage_name(s);
    EXPECT_EQ(a.second, c.second) << stage_name(s);
    EXPECT_FALSE(a.first.empty());
  }
}

TEST(Harness, SupervisedLossIsPositiveNll) {
  const Task t = clevr_task(6);
  for (Stage s : {Stage::Cpt, Stage::SftDirect, Stage::SftCot}) {
    ToyModel m(t.vocab, ModelDims{6, 6, 8}, 1);
    const auto res = run_stage(quick(s), m, t);
    ASSERT_FALSE(res.rows.empty());
    for (const auto& r : res.rows) EXPECT_GT(r.loss, 0.0) << stage_name(s);
  }
}

TEST(Harness, RlOnGtaAndRewardKindCheck) {
  const Task t = gta_task();
  ToyModel m(t.vocab, ModelDims{6, 6, 8}, 1);
  auto c = quick(Stage::Rl);
  c.max_len = 40;
  OracleSampler oracle;
  const auto res = run_stage(c, m, t, &oracle);
  ASSERT_EQ(res.rows.size(), 2u);
  EXPECT_NEAR(res.rows[0].reward_mean, 1.1, 1e-12);
  c.reward = "clevr";
  EXPECT_THROW(run_stage(c, m, t), ConfigError);
}

TEST(Harness, DapoEarlyStopsOnConstantReward) {
  const Task t = clevr_task(7);
  ToyModel m(t.vocab, ModelDims{6, 6, 8}, 1);
  auto c = quick(Stage::Rl);
  c.algorithm = Algorithm::Dapo;
  c.steps = 5;
  OracleSampler oracle;
  const auto res = run_stage(c, m, t, &oracle);
  EXPECT_TRUE(res.early_stop);
  ASSERT_FALSE(res.rows.empty());
  EXPECT_TRUE(res.rows.back().early_stop);
  EXPECT_EQ(c.clip().beta_kl, 0.0);
}

TEST(Harness, VocabMismatchIsRejected) {
  const Task a = clevr_task(8), b = gta_task();
  ToyModel m(b.vocab, ModelDims{4, 4, 4}, 1);
  EXPECT_THROW(run_stage(quick(Stage::SftCot), m, a), ValidationError);
}

TEST(Harness, ParseMethod) {
  const auto p = parse_method("trimpi+poro_grpo");
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[0].stage, Stage::Cpt);
  EXPECT_EQ(p[1].stage, Stage::SftCot);
  EXPECT_EQ(p[2].stage, Stage::Rl);
  EXPECT_EQ(p[2].key(), "rl:poro_grpo");
  EXPECT_THROW(parse_method("sft_cot+bogus"), ConfigError);
  EXPECT_THROW(parse_method(""), ConfigError);
}

TEST(Harness, ConfigSchema) {
  const auto entries = parse_config_text("[model]\nk = 5\n[rl]\nalgorithm = dapo\nsteps = 3\n[optim]\nlr_scale = 2\n"
                                         "[compare]\nmethods = sft_cot, sft_cot+grpo\nseeds = 1,2\n");
  const auto x = load_experiment_config(entries);
  EXPECT_EQ(x.dims.k, 5);
  EXPECT_EQ(x.stage(Stage::Rl).algorithm, Algorithm::Dapo);
  EXPECT_EQ(x.stage(Stage::Rl).steps, 3);
  EXPECT_EQ(x.stage(Stage::SftCot).lr_scale, 2.0);
  EXPECT_EQ(x.methods.size(), 2u);
  EXPECT_EQ(x.seeds, (std::vector<std::uint64_t>{1, 2}));
  EXPECT_THROW(load_experiment_config(parse_config_text("[model]\nwidth = 3\n")), ConfigError);
  EXPECT_THROW(load_experiment_config(parse_config_text("[cpt]\nalgorithm = grpo\n")), ConfigError);
  EXPECT_THROW(load_experiment_config(parse_config_text("[rl]\nsteps = many\n")), ConfigError);
}

TEST(Harness, CompareRowsFollowConfigOrderAndReportErrors) {
  const Task t = clevr_task(9);
  ExperimentConfig x;
  x.dims = {6, 6, 8};
  x.methods = {"sft_cot", "sft_cot+grpo", "sft_cot+nonsense"};
  x.seeds = {3, 1};
  for (auto& [s, c] : x.stages) {
    c.epochs = 1;
    c.steps = 1;
    c.batch_size = 4;
    c.group_size = 2;
    c.max_len = 12;
  }
  x.eval_max_len = 12;
  const auto dir = std::filesystem::temp_directory_path() / "polint_compare_test";
  std::filesystem::remove_all(dir);
  CompareOptions co;
  co.run_dir = dir;
  const auto rows = compare_experiment(x, t, co);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].method, "sft_cot");
  EXPECT_EQ(rows[0].seed, 3u);
  EXPECT_EQ(rows[1].seed, 1u);
  EXPECT_EQ(rows[2].method, "sft_cot+grpo");
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_EQ(rows[2].steps, rows[0].steps + 1);
  EXPECT_EQ(rows[4].status.rfind("error:", 0), 0u);
  EXPECT_TRUE(std::filesystem::exists(dir / "sft_cot-grpo_seed1.csv"));
  EXPECT_NE(compare_line(rows[4]).find("\"error:"), std::string::npos);
  std::filesystem::remove_all(dir);
}
