// polint: dataset generation, training, evaluation and comparison runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "polint/harness.hpp"

namespace fs = std::filesystem;
using namespace polint;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
  std::optional<unsigned> workers;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg;
  if (!g.config.empty()) cfg = load_experiment_config(load_config_file(g.config));
  if (g.seed) cfg.seed = *g.seed;
  if (g.workers) cfg.workers = *g.workers;
  return cfg;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

// ------------------------------------------------------------- gen-policy

struct GenPolicyArgs {
  int depth = 4;
  std::string mode = "T";
  int count = 1;
  std::string scope = "immediate_parent";
  double demo_prob = 0.5;
  std::string prefix = "P";
};

int cmd_gen_policy(const Globals& g, const GenPolicyArgs& a) {
  const std::uint64_t seed = g.seed.value_or(0);
  const fs::path dir = fs::path(g.out) / "policies";
  fs::create_directories(dir);
  TreeSampleOptions opts;
  opts.scope = scope_from_name(a.scope);
  opts.visual_demo_prob = a.demo_prob;
  const PolicyMode mode = mode_from_name(a.mode);
  nlohmann::ordered_json list = nlohmann::ordered_json::array();
  std::size_t total_outcomes = 0;
  for (int i = 0; i < a.count; ++i) {
    const std::string name = a.prefix + std::to_string(i);
    const auto tree = sample_decision_tree(a.depth, mode, derive_seed(seed, "policy", i), opts);
    if (auto problems = validate_tree(tree); !problems.empty()) throw GenerationError(problems.front());
    const auto doc = render_policy(tree, name, mode);
    std::ofstream(dir / (name + ".txt")) << doc.text();
    write_json(dir / (name + ".json"), policy_to_json(doc));
    const auto outcomes = enumerate_outcomes(tree).size();
    total_outcomes += outcomes;
    list.push_back({{"name", name},
                    {"file", "policies/" + name + ".json"},
                    {"depth", a.depth},
                    {"mode", std::string{mode_name(mode)}},
                    {"outcomes", outcomes}});
  }
  nlohmann::ordered_json manifest{
      {"seed", seed},
      {"scope", a.scope},
      {"policies", list},
      {"leaf_counts",
       {{"immediate_parent", structural_leaf_count(a.depth, ConstraintScope::ImmediateParent)},
        {"true_chain", structural_leaf_count(a.depth, ConstraintScope::TrueChain)},
        {"mean_enumerated", a.count ? static_cast<double>(total_outcomes) / a.count : 0.0}}}};
  write_json(fs::path(g.out) / "policies.json", manifest);
  std::cout << manifest["leaf_counts"].dump() << '\n';
  return 0;
}

// --------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string policies;
  int train = 2000;
  int test = 2000;
  bool no_balance = false;
  double cot_fraction = 1.0;
  int min_objects = kMinSceneObjects;
  int max_objects = kMaxSceneObjects;
};

std::vector<PolicyDoc> load_policy_list(const fs::path& path) {
  const auto j = read_json(path);
  std::vector<PolicyDoc> docs;
  for (const auto& p : j.at("policies")) {
    docs.push_back(policy_from_json(read_json(path.parent_path() / p.at("file").get<std::string>())));
  }
  if (docs.empty()) throw ValidationError(path.string() + " lists no policies");
  return docs;
}

int cmd_gen_data(const Globals& g, const GenDataArgs& a) {
  DatasetOptions opt;
  opt.per_policy_train = a.train;
  opt.per_policy_test = a.test;
  opt.balance = !a.no_balance;
  opt.cot_fraction = a.cot_fraction;
  opt.min_objects = a.min_objects;
  opt.max_objects = a.max_objects;
  opt.seed = g.seed.value_or(0);
  opt.workers = g.workers.value_or(1);
  gen_dataset(load_policy_list(a.policies), opt, g.out);
  std::cout << (fs::path(g.out) / "manifest.json").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- gen-gta

int cmd_gen_gta(const Globals& g, GtaOptions opt) {
  opt.seed = g.seed.value_or(0);
  gen_gta_like(opt, g.out);
  std::cout << (fs::path(g.out) / "manifest.json").string() << '\n';
  return 0;
}

// ------------------------------------------------------------------ stats

int cmd_stats(const Globals& g, const std::string& data) {
  fs::path path = data;
  if (path.extension() == ".json") {
    const auto m = read_json(path);
    path = path.parent_path() / m.at("test").get<std::string>();
  }
  auto j = stats_to_json(prompt_stats(path));
  j["reference_note"] = "published long-policy setups report prompt reductions of up to 93.9%";
  write_json(fs::path(g.out) / "stats.json", j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string manifest;
  std::string stage;
  std::string algorithm;
  std::string init;
  std::optional<int> steps;
  std::optional<int> epochs;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  ExperimentConfig cfg = load_config(g);
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (!a.stage.empty()) cfg.train_stage = stage_from_name(a.stage);
  if (!a.init.empty()) cfg.init_checkpoint = a.init;
  if (cfg.manifest.empty()) throw ConfigError("train needs a dataset manifest ([data] manifest or --manifest)");
  const Task task = load_task(cfg.manifest);
  StageConfig sc = cfg.stage(cfg.train_stage);
  if (!a.algorithm.empty()) sc.algorithm = algorithm_from_name(a.algorithm);
  if (a.steps) sc.steps = *a.steps;
  if (a.epochs) sc.epochs = *a.epochs;
  sc.seed = derive_seed(cfg.seed, "stage", stage_name(sc.stage));
  ToyModel model = cfg.init_checkpoint ? load_checkpoint(*cfg.init_checkpoint, task.vocab)
                                       : ToyModel(task.vocab, cfg.dims, derive_seed(cfg.seed, "init"));
  const fs::path out = g.out;
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.csv");
  if (!metrics) throw ValidationError("cannot write " + (out / "metrics.csv").string());
  metrics << metrics_header() << '\n';
  const auto res = run_stage(sc, model, task, nullptr, [&](const MetricsRow& r) {
    metrics << metrics_line(r) << '\n';
    metrics.flush();
  });
  save_checkpoint(model, out / "model.ckpt");
  write_json(out / "vocab.json", task.vocab.to_json());
  std::cout << "stage " << stage_name(sc.stage) << ": " << res.steps << " steps"
            << (res.early_stop ? " (early stop)" : "") << '\n';
  return 0;
}

// ------------------------------------------------------------------- eval

struct EvalArgs {
  std::string manifest;
  std::string checkpoint;
  std::string mode;
  std::string agent = "model";
  std::optional<std::uint64_t> override_seed;
  bool override_unchanged = false;
  std::string emit_prompts;
  std::optional<std::size_t> limit;
  std::optional<int> max_len;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  ExperimentConfig cfg = load_config(g);
  if (!a.manifest.empty()) cfg.manifest = a.manifest;
  if (!a.mode.empty()) cfg.eval_mode = eval_mode_from_name(a.mode);
  if (a.override_seed) cfg.override_seed = *a.override_seed;
  if (a.override_unchanged) cfg.override_unchanged = true;
  if (a.limit) cfg.eval_limit = *a.limit;
  if (a.max_len) cfg.eval_max_len = *a.max_len;
  if (cfg.manifest.empty()) throw ConfigError("eval needs a dataset manifest ([data] manifest or --manifest)");
  const Task task = load_task(cfg.manifest);
  std::optional<OverridePolicy> ov;
  if (cfg.eval_mode == EvalMode::Override) ov = make_override(task, cfg.override_seed, cfg.override_unchanged);
  std::unique_ptr<Agent> agent;
  std::optional<ToyModel> model;
  if (a.agent == "model") {
    if (a.checkpoint.empty()) throw ConfigError("--agent model needs --checkpoint");
    model.emplace(load_checkpoint(a.checkpoint, task.vocab));
    agent = std::make_unique<ModelAgent>(*model, cfg.eval_max_len);
  } else if (a.agent == "oracle") {
    agent = std::make_unique<OracleAgent>(task);
  } else if (a.agent == "random") {
    agent = std::make_unique<RandomGuessAgent>(task, derive_seed(cfg.seed, "random_agent"));
  } else {
    throw ConfigError("unknown agent '" + a.agent + "'");
  }
  EvalOptions eo;
  eo.limit = cfg.eval_limit;
  eo.workers = cfg.workers;
  if (!a.emit_prompts.empty()) eo.prompts_out = a.emit_prompts;
  const auto report = evaluate(*agent, task, cfg.eval_mode, ov ? &*ov : nullptr, eo);
  const auto j = report_to_json(report);
  write_json(fs::path(g.out) / "eval.json", j);
  std::cout << j.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------- compare

int cmd_compare(const Globals& g, const std::string& manifest) {
  ExperimentConfig cfg = load_config(g);
  if (!manifest.empty()) cfg.manifest = manifest;
  if (cfg.manifest.empty()) throw ConfigError("compare needs a dataset manifest ([data] manifest or --manifest)");
  if (g.seed && g.config.empty()) cfg.seeds = {*g.seed};
  const Task task = load_task(cfg.manifest);
  const fs::path out = g.out;
  fs::create_directories(out);
  CompareOptions co;
  co.run_dir = out / "runs";
  co.on_row = [](const CompareRow& r) { std::cout << compare_line(r) << '\n' << std::flush; };
  std::cout << compare_header() << '\n';
  const auto rows = compare_experiment(cfg, task, co);
  write_compare_csv(out / "compare.csv", rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polint: policy internalization toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "base seed");
  app.add_option("--config", g.config, "experiment config file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--workers", g.workers, "worker threads")->check(CLI::PositiveNumber);

  GenPolicyArgs gp;
  auto* sp = app.add_subcommand("gen-policy", "sample decision-tree policies");
  sp->add_option("--depth", gp.depth)->check(CLI::Range(1, 12));
  sp->add_option("--mode", gp.mode)->check(CLI::IsMember({"T", "M"}));
  sp->add_option("--count", gp.count)->check(CLI::PositiveNumber);
  sp->add_option("--scope", gp.scope)->check(CLI::IsMember({"immediate_parent", "true_chain"}));
  sp->add_option("--demo-prob", gp.demo_prob)->check(CLI::Range(0.0, 1.0));
  sp->add_option("--prefix", gp.prefix);

  GenDataArgs gd;
  auto* sd = app.add_subcommand("gen-data", "generate scene records for a policy list");
  sd->add_option("--policies", gd.policies, "policies.json from gen-policy")->required()->check(CLI::ExistingFile);
  sd->add_option("--train", gd.train);
  sd->add_option("--test", gd.test);
  sd->add_flag("--no-balance", gd.no_balance);
  sd->add_option("--cot-fraction", gd.cot_fraction)->check(CLI::Range(0.0, 1.0));
  sd->add_option("--min-objects", gd.min_objects);
  sd->add_option("--max-objects", gd.max_objects);

  GtaOptions go;
  auto* sg = app.add_subcommand("gen-gta", "generate a versioned tool-calling dataset");
  sg->add_option("--tools", go.n_tools);
  sg->add_option("--rules", go.n_rules);
  sg->add_option("--train", go.n_train);
  sg->add_option("--test", go.n_test);
  sg->add_option("--policy-name", go.policy_name);

  std::string stats_data;
  auto* ss = app.add_subcommand("stats", "prompt-token statistics");
  ss->add_option("--data", stats_data, "JSONL file or manifest.json")->required()->check(CLI::ExistingFile);

  TrainArgs ta;
  auto* st = app.add_subcommand("train", "run one training stage");
  st->add_option("--manifest", ta.manifest);
  st->add_option("--stage", ta.stage)->check(CLI::IsMember({"cpt", "sft_direct", "sft_cot", "rl"}));
  st->add_option("--algorithm", ta.algorithm)->check(CLI::IsMember({"grpo", "dapo", "poro_grpo", "poro_dapo"}));
  st->add_option("--init", ta.init, "checkpoint to continue from")->check(CLI::ExistingFile);
  st->add_option("--steps", ta.steps, "rl update steps");
  st->add_option("--epochs", ta.epochs, "passes over the data for cpt and sft stages");

  EvalArgs ea;
  auto* se = app.add_subcommand("eval", "evaluate an agent on the test split");
  se->add_option("--manifest", ea.manifest);
  se->add_option("--checkpoint", ea.checkpoint)->check(CLI::ExistingFile);
  se->add_option("--mode", ea.mode)->check(CLI::IsMember({"internalized", "in_context", "override"}));
  se->add_option("--agent", ea.agent)->check(CLI::IsMember({"model", "oracle", "random"}));
  se->add_option("--override-seed", ea.override_seed);
  se->add_flag("--override-unchanged", ea.override_unchanged);
  se->add_option("--emit-prompts", ea.emit_prompts, "write every evaluation prompt to this file");
  se->add_option("--limit", ea.limit);
  se->add_option("--max-len", ea.max_len);

  std::string cmp_manifest;
  auto* sc = app.add_subcommand("compare", "train and evaluate a method grid");
  sc->add_option("--manifest", cmp_manifest);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*sp) return cmd_gen_policy(g, gp);
    if (*sd) return cmd_gen_data(g, gd);
    if (*sg) return cmd_gen_gta(g, go);
    if (*ss) return cmd_stats(g, stats_data);
    if (*st) return cmd_train(g, ta);
    if (*se) return cmd_eval(g, ea);
    if (*sc) return cmd_compare(g, cmp_manifest);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "polint: config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "polint: %s\n", e.what());
    return 1;
  }
  return 0;
}
