#pragma once

// Task loading, training stages (cpt, sft_direct, sft_cot, rl), evaluation
// agents and modes, metrics/comparison CSVs and the experiment config.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/config.hpp"
#include "polint/policy_gen.hpp"
#include "polint/rewards.hpp"
#include "polint/rl_core.hpp"
#include "polint/scene_data.hpp"
#include "polint/tool_eval.hpp"
#include "polint/toy_model.hpp"
#include "polint/vocab.hpp"

namespace polint {

// ------------------------------------------------------------------ tasks

enum class TaskKind : std::uint8_t { Clevr, Gta };

struct TaskItem {
  std::string id;
  std::string policy_id;
  Tokens with_policy;
  Tokens without_policy;
  std::vector<bool> visual_mask;  // aligned to with_policy
  std::optional<Tokens> cot;
  Tokens direct;
  std::string gold_label;
  Scene scene;
  std::optional<GtaRecord> gta;
};

struct Task {
  TaskKind kind = TaskKind::Clevr;
  std::vector<TaskItem> train;
  std::vector<TaskItem> test;
  std::vector<PolicyDoc> policies;
  ToolRuleSet rules;
  std::string gta_policy_name;
  Vocab vocab;
  std::filesystem::path manifest;

  const PolicyDoc& policy(const std::string& name) const {
    for (const auto& p : policies) {
      if (p.name == name) return p;
    }
    throw ValidationError("task has no policy '" + name + "'");
  }
};

inline TaskItem clevr_item(const DatasetRecord& r, const std::string& id) {
  TaskItem it;
  it.id = id;
  it.policy_id = r.policy_id;
  it.with_policy = r.tokens_with_policy;
  it.without_policy = r.tokens_without_policy;
  it.visual_mask = r.visual_mask;
  it.cot = r.cot;
  it.direct = direct_answer_tokens(r.answer);
  it.gold_label = r.answer;
  it.scene = r.scene;
  return it;
}

inline TaskItem gta_item(const GtaRecord& r) {
  TaskItem it;
  it.id = r.id;
  it.with_policy = r.tokens_with_policy;
  it.without_policy = r.tokens_without_policy;
  it.visual_mask = r.visual_mask;
  it.cot = r.target;
  it.direct = r.target;
  it.gta = r;
  return it;
}

/// Builds a ClevrPolicy task from in-memory records (tests and experiments
/// that skip the filesystem).
inline Task make_clevr_task(std::vector<PolicyDoc> policies, const std::vector<DatasetRecord>& train,
                            const std::vector<DatasetRecord>& test) {
  Task t;
  t.kind = TaskKind::Clevr;
  t.policies = std::move(policies);
  for (std::size_t i = 0; i < train.size(); ++i) t.train.push_back(clevr_item(train[i], train[i].policy_id + ":train:" + std::to_string(i)));
  for (std::size_t i = 0; i < test.size(); ++i) t.test.push_back(clevr_item(test[i], test[i].policy_id + ":test:" + std::to_string(i)));
  t.vocab = clevr_vocab(t.policies, {&train, &test});
  return t;
}

inline Task make_gta_task(const GtaDataset& ds) {
  Task t;
  t.kind = TaskKind::Gta;
  t.rules = ds.rules;
  t.gta_policy_name = ds.policy_name;
  for (const auto& r : ds.train) t.train.push_back(gta_item(r));
  for (const auto& r : ds.test) t.test.push_back(gta_item(r));
  t.vocab = gta_vocab(ds);
  return t;
}

/// Loads a dataset by its manifest.json and checks the recorded vocab hash.
inline Task load_task(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ValidationError("cannot open manifest " + manifest_path.string());
  const auto j = nlohmann::json::parse(in);
  const auto dir = manifest_path.parent_path();
  const std::string kind = j.value("kind", std::string{"clevr"});
  Task t;
  if (kind == "clevr") {
    const auto m = load_clevr_manifest(manifest_path);
    t = make_clevr_task(m.policies, load_records(m.train), load_records(m.test));
  } else if (kind == "gta") {
    std::ifstream rs(dir / j.at("ruleset").get<std::string>());
    if (!rs) throw ValidationError("missing ruleset for " + manifest_path.string());
    GtaDataset ds;
    ds.rules = rule_set_from_json(nlohmann::json::parse(rs));
    ds.policy_name = j.value("policy_name", std::string{"GTA"});
    ds.train = load_gta_records(dir / j.at("train").get<std::string>());
    ds.test = load_gta_records(dir / j.at("test").get<std::string>());
    t = make_gta_task(ds);
  } else {
    throw ValidationError("unknown dataset kind '" + kind + "'");
  }
  t.manifest = manifest_path;
  const std::string recorded = j.value("vocab_hash", std::string{});
  if (!recorded.empty() && recorded != hex64(t.vocab.hash())) {
    throw ValidationError("dataset vocab hash " + recorded + " does not match rebuilt vocab " + hex64(t.vocab.hash()));
  }
  return t;
}

// --------------------------------------------------------------- prompting

enum class EvalMode : std::uint8_t { Internalized, InContext, Override };

inline std::string_view eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::Internalized: return "internalized";
    case EvalMode::InContext: return "in_context";
    case EvalMode::Override: return "override";
  }
  return "internalized";
}

inline EvalMode eval_mode_from_name(std::string_view s) {
  for (auto m : {EvalMode::Internalized, EvalMode::InContext, EvalMode::Override}) {
    if (eval_mode_name(m) == s) return m;
  }
  throw ConfigError("unknown eval mode '" + std::string{s} + "'");
}

/// Modified policy content under the original names.
struct OverridePolicy {
  std::map<std::string, PolicyDoc> clevr;
  std::optional<ToolRuleSet> gta_rules;
};

/// Resamples every condition of each training tree (ClevrPolicy) or flips
/// every rule's version (GTA-like). `unchanged` keeps the original content.
inline OverridePolicy make_override(const Task& task, std::uint64_t seed, bool unchanged = false) {
  OverridePolicy o;
  if (task.kind == TaskKind::Clevr) {
    for (const auto& doc : task.policies) {
      if (unchanged) {
        o.clevr[doc.name] = doc;
      } else {
        const auto tree = resample_conditions(doc.tree, derive_seed(seed, doc.name));
        o.clevr[doc.name] = render_policy(tree, doc.name, doc.mode);
      }
    }
  } else {
    o.gta_rules = unchanged ? task.rules : flip_rule_versions(task.rules);
  }
  return o;
}

inline Tokens policy_prefix(const Task& task, const TaskItem& item, const OverridePolicy* ov = nullptr) {
  if (task.kind == TaskKind::Clevr) {
    if (ov) return policy_tokens(ov->clevr.at(item.policy_id));
    return policy_tokens(task.policy(item.policy_id));
  }
  return tokenize(render_rule_policy(ov ? *ov->gta_rules : task.rules, task.gta_policy_name));
}

inline Tokens eval_prompt(const Task& task, const TaskItem& item, EvalMode mode, const OverridePolicy* ov) {
  if (mode == EvalMode::Internalized) return item.without_policy;
  if (mode == EvalMode::Override && !ov) throw ValidationError("override evaluation needs an override policy");
  Tokens p = mode == EvalMode::Override ? policy_prefix(task, item, ov) : policy_prefix(task, item);
  p.insert(p.end(), item.without_policy.begin(), item.without_policy.end());
  return p;
}

struct Gold {
  std::string label;
  std::optional<ToolCall> call;
};

inline Gold gold_for(const Task& task, const TaskItem& item, EvalMode mode, const OverridePolicy* ov) {
  Gold g;
  const bool over = mode == EvalMode::Override;
  if (over && !ov) throw ValidationError("override evaluation needs an override policy");
  if (task.kind == TaskKind::Clevr) {
    g.label = over ? trace(ov->clevr.at(item.policy_id).tree, item.scene).outcome : item.gold_label;
  } else {
    ToolCall c = item.gta->gold_call;
    if (over) {
      const auto base = split_tool_name(c.name).first;
      c.name = base + "_" + resolve_required_version(*ov->gta_rules, item.gta->profile, base);
    }
    g.call = std::move(c);
  }
  return g;
}

struct ItemScore {
  double acc = 0.0;
  double format = 0.0;
  double tool_acc = 0.0;
  double arg_score = 0.0;
  double overall = 0.0;
  double reward = 0.0;
};

inline ItemScore score_response(const Task& task, const Gold& gold, const Tokens& response,
                                double format_weight = kDefaultFormatWeight) {
  ItemScore s;
  const ParsedResponse p = parse_response(response);
  if (task.kind == TaskKind::Clevr) {
    const auto r = reward_clevr(p, gold.label, format_weight);
    s.acc = s.overall = r.acc;
    s.format = r.format;
    s.reward = r.total;
  } else {
    const auto r = reward_gta(p, *gold.call, task.rules, format_weight);
    s.format = r.format;
    if (r.parsed) {
      s.tool_acc = r.score.tool_acc;
      s.arg_score = r.score.arg_score;
      s.overall = r.score.overall;
    }
    s.acc = s.overall;
    s.reward = r.total;
  }
  return s;
}

// ------------------------------------------------------------------ agents

class Agent {
 public:
  virtual ~Agent() = default;
  virtual Tokens respond(const Tokens& prompt, const TaskItem& item) const = 0;
};

/// Greedy decoding from a model.
class ModelAgent final : public Agent {
 public:
  ModelAgent(const ToyModel& model, int max_len) : model_(model), max_len_(max_len) {}
  Tokens respond(const Tokens& prompt, const TaskItem&) const override {
    const auto ids = model_.sample(model_.vocab().encode(prompt), max_len_, 0.0, 0);
    return model_.vocab().decode(ids);
  }

 private:
  const ToyModel& model_;
  int max_len_;
};

namespace detail {

inline std::optional<std::pair<std::vector<ToolRule>, std::map<std::string, std::string>>> parse_rule_policy_tokens(
    const Tokens& toks) {
  std::vector<ToolRule> rules;
  std::map<std::string, std::string> defaults;
  bool any = false;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (toks[i] == "Rule" && i + 3 < toks.size() && toks[i + 2] == ":" && toks[i + 3] == "when") {
      ToolRule r;
      std::size_t j = i + 4;
      while (j + 2 < toks.size() && toks[j + 1] == "is") {
        r.predicate[toks[j]] = toks[j + 2];
        j += 3;
        if (j < toks.size() && toks[j] == "and") ++j;
      }
      if (j + 5 >= toks.size() || toks[j] != "," || toks[j + 1] != "call" || toks[j + 3] != "version") {
        throw ParseError("malformed rule in policy text");
      }
      r.base = toks[j + 2];
      r.version = toks[j + 4];
      rules.push_back(std::move(r));
      any = true;
      i = j + 4;
    } else if (toks[i] == "Default" && i + 5 < toks.size() && toks[i + 1] == ":" && toks[i + 2] == "call" &&
               toks[i + 4] == "version") {
      defaults[toks[i + 3]] = toks[i + 5];
      any = true;
      i += 5;
    }
  }
  if (!any) return std::nullopt;
  return std::make_pair(std::move(rules), std::move(defaults));
}

}  // namespace detail

/// Answers from ground truth: follows whatever policy is present in the
/// prompt, or the task's own policy when the prompt carries none.
class OracleAgent final : public Agent {
 public:
  explicit OracleAgent(const Task& task) : task_(task) {}

  Tokens respond(const Tokens& prompt, const TaskItem& item) const override {
    if (task_.kind == TaskKind::Clevr) {
      const auto scene_at = std::find(prompt.begin(), prompt.end(), special::kSceneOpen);
      const Tokens prefix(prompt.begin(), scene_at);
      const bool has_policy = std::find(prefix.begin(), prefix.end(), "Condition") != prefix.end();
      const DecisionTree tree = has_policy ? parse_policy_tokens(prefix) : task_.policy(item.policy_id).tree;
      return direct_answer_tokens(trace(tree, parse_scene_tokens(prompt)).outcome);
    }
    ToolRuleSet rs = task_.rules;
    const auto prof = std::find(prompt.begin(), prompt.end(), "Profile");
    if (auto parsed = detail::parse_rule_policy_tokens(Tokens(prompt.begin(), prof))) {
      rs.rules = parsed->first;
      rs.defaults = parsed->second;
    }
    ToolCall c = item.gta->gold_call;
    const auto base = split_tool_name(c.name).first;
    c.name = base + "_" + resolve_required_version(rs, item.gta->profile, base);
    return gta_target_tokens(c);
  }

 private:
  const Task& task_;
};

/// Uniform guess over the policy's outcome labels (or tool versions).
class RandomGuessAgent final : public Agent {
 public:
  RandomGuessAgent(const Task& task, std::uint64_t seed) : task_(task), seed_(seed) {}

  Tokens respond(const Tokens&, const TaskItem& item) const override {
    Rng rng(derive_seed(seed_, item.id));
    if (task_.kind == TaskKind::Clevr) {
      const auto outcomes = enumerate_outcomes(task_.policy(item.policy_id).tree);
      return direct_answer_tokens(outcomes[rng.below(outcomes.size())]);
    }
    ToolCall c = item.gta->gold_call;
    c.name = task_.rules.tools[rng.below(task_.rules.tools.size())].full_name();
    return gta_target_tokens(c);
  }

 private:
  const Task& task_;
  std::uint64_t seed_;
};

// -------------------------------------------------------------- evaluation

struct EvalOptions {
  std::size_t limit = 0;  // 0 = whole test split
  unsigned workers = 1;
  double format_weight = kDefaultFormatWeight;
  std::optional<std::filesystem::path> prompts_out;  // one prompt per line
};

struct EvalReport {
  EvalMode mode = EvalMode::Internalized;
  TaskKind kind = TaskKind::Clevr;
  double accuracy = 0.0;
  double tool_acc = 0.0;
  double arg_score = 0.0;
  double overall = 0.0;
  double format_rate = 0.0;
  std::size_t samples = 0;
  double runtime_ms = 0.0;
  std::vector<ItemScore> items;
};

inline EvalReport evaluate(const Agent& agent, const Task& task, EvalMode mode, const OverridePolicy* ov,
                           const EvalOptions& opt = {}) {
  if (mode == EvalMode::Override && !ov) throw ValidationError("override evaluation needs an override policy");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = opt.limit ? std::min(opt.limit, task.test.size()) : task.test.size();
  if (n == 0) throw ValidationError("evaluate: empty test split");
  EvalReport rep;
  rep.mode = mode;
  rep.kind = task.kind;
  rep.samples = n;
  rep.items.resize(n);
  std::vector<Tokens> prompts(n);
  parallel_for(n, opt.workers, [&](std::size_t i) {
    const auto& item = task.test[i];
    prompts[i] = eval_prompt(task, item, mode, ov);
    rep.items[i] = score_response(task, gold_for(task, item, mode, ov), agent.respond(prompts[i], item), opt.format_weight);
  });
  for (const auto& s : rep.items) {
    rep.accuracy += s.acc;
    rep.tool_acc += s.tool_acc;
    rep.arg_score += s.arg_score;
    rep.overall += s.overall;
    rep.format_rate += s.format;
  }
  const double dn = static_cast<double>(n);
  rep.accuracy /= dn;
  rep.tool_acc /= dn;
  rep.arg_score /= dn;
  rep.overall /= dn;
  rep.format_rate /= dn;
  if (opt.prompts_out) {
    std::ofstream out(*opt.prompts_out);
    if (!out) throw ValidationError("cannot write " + opt.prompts_out->string());
    for (const auto& p : prompts) out << join(p) << '\n';
  }
  rep.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j{{"mode", std::string{eval_mode_name(r.mode)}},
                           {"kind", r.kind == TaskKind::Clevr ? "clevr" : "gta"},
                           {"samples", r.samples},
                           {"format_rate", r.format_rate},
                           {"runtime_ms", r.runtime_ms}};
  if (r.kind == TaskKind::Clevr) {
    j["accuracy"] = r.accuracy;
  } else {
    j["tool_acc"] = r.tool_acc;
    j["arg_score"] = r.arg_score;
    j["overall"] = r.overall;
  }
  return j;
}

// ------------------------------------------------------------------ stages

enum class Stage : std::uint8_t { Cpt, SftDirect, SftCot, Rl };

inline std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::Cpt: return "cpt";
    case Stage::SftDirect: return "sft_direct";
    case Stage::SftCot: return "sft_cot";
    case Stage::Rl: return "rl";
  }
  return "cpt";
}

inline Stage stage_from_name(std::string_view s) {
  for (auto st : {Stage::Cpt, Stage::SftDirect, Stage::SftCot, Stage::Rl}) {
    if (stage_name(st) == s) return st;
  }
  throw ConfigError("unknown stage '" + std::string{s} + "'");
}

struct StageConfig {
  Stage stage = Stage::SftCot;
  Algorithm algorithm = Algorithm::Grpo;
  std::uint64_t seed = 0;
  int epochs = 5;
  int steps = 200;  // rl update steps
  int batch_size = 8;
  int group_size = 8;
  double temperature = 1.0;
  int max_len = 64;
  std::optional<double> eps_low, eps_high, beta_kl;
  std::optional<Aggregation> aggregation;
  double lr = 1e-4;
  double lr_scale = 1.0;
  std::string optimizer = "adam";
  double grad_clip = 1.0;
  double format_weight = kDefaultFormatWeight;
  int max_retries = kDynamicSamplingRetries;
  int inner_steps = 2;
  bool cot_only = true;  // cpt: train only on records that carry CoT
  std::string reward = "auto";
  unsigned workers = 1;

  double effective_lr() const { return lr * lr_scale; }

  ClipConfig clip() const {
    ClipConfig c = ClipConfig::for_algorithm(algorithm);
    if (eps_low) c.eps_low = *eps_low;
    if (eps_high) c.eps_high = *eps_high;
    if (beta_kl) c.beta_kl = *beta_kl;
    if (aggregation) c.aggregation = *aggregation;
    if (is_dapo(algorithm)) c.beta_kl = 0.0;
    return c;
  }
};

/// Per-stage defaults: cpt 1e-5 for 5 epochs, sft 1e-4 for 5 epochs, rl 1e-6
/// for 200 steps with G = 8. Learning rates are scaled by lr_scale.
inline StageConfig default_stage_config(Stage s) {
  StageConfig c;
  c.stage = s;
  switch (s) {
    case Stage::Cpt: c.lr = 1e-5; break;
    case Stage::SftDirect:
    case Stage::SftCot: c.lr = 1e-4; break;
    case Stage::Rl: c.lr = 1e-6; break;
  }
  return c;
}

struct MetricsRow {
  int step = 0;
  std::string stage;
  double loss = 0.0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double acc = 0.0;
  double kl = 0.0;
  double clip_frac = 0.0;
  std::size_t groups_filtered = 0;
  bool early_stop = false;
  long long wall_ms = 0;
};

inline std::string metrics_header() {
  return "step,stage,loss,reward_mean,reward_std,acc,kl,clip_frac,groups_filtered,early_stop,wall_ms";
}

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string metrics_line(const MetricsRow& r) {
  return std::to_string(r.step) + "," + r.stage + "," + fmt_num(r.loss) + "," + fmt_num(r.reward_mean) + "," +
         fmt_num(r.reward_std) + "," + fmt_num(r.acc) + "," + fmt_num(r.kl) + "," + fmt_num(r.clip_frac) + "," +
         std::to_string(r.groups_filtered) + "," + (r.early_stop ? "1" : "0") + "," + std::to_string(r.wall_ms);
}

struct StageResult {
  int steps = 0;
  bool early_stop = false;
  std::vector<MetricsRow> rows;
};

// ----------------------------------------------------------------- rollouts

struct SampleRequest {
  const TaskItem& item;
  RolloutSource source;
  int index;
  std::span<const int> prompt;
  std::uint64_t seed;
  int max_len;
  double temperature;
};

class RolloutSampler {
 public:
  virtual ~RolloutSampler() = default;
  virtual std::vector<int> sample(const ToyModel& model, const SampleRequest& req) = 0;
};

class ModelSampler final : public RolloutSampler {
 public:
  std::vector<int> sample(const ToyModel& model, const SampleRequest& req) override {
    return model.sample(req.prompt, req.max_len, req.temperature, req.seed);
  }
};

/// Emits the gold target for every request: a model that is always right.
class OracleSampler final : public RolloutSampler {
 public:
  std::vector<int> sample(const ToyModel& model, const SampleRequest& req) override {
    return model.vocab().encode(req.item.cot ? *req.item.cot : req.item.direct);
  }
};

inline std::string rollout_key(const SampleRequest& r) {
  return r.item.id + "|" + (r.source == RolloutSource::NoPolicy ? "np" : "pa") + "|" + std::to_string(r.index) + "|" +
         hex64(r.seed);
}

/// Wraps a sampler and records every token sequence it returns.
class RecordingSampler final : public RolloutSampler {
 public:
  explicit RecordingSampler(RolloutSampler& inner) : inner_(inner) {}
  std::vector<int> sample(const ToyModel& model, const SampleRequest& req) override {
    auto out = inner_.sample(model, req);
    std::lock_guard lock(mu_);
    log_[rollout_key(req)] = out;
    if (req.source == RolloutSource::PolicyAware) ++policy_aware_;
    return out;
  }
  const std::map<std::string, std::vector<int>>& log() const { return log_; }
  std::size_t policy_aware_count() const { return policy_aware_; }

 private:
  RolloutSampler& inner_;
  std::mutex mu_;
  std::map<std::string, std::vector<int>> log_;
  std::size_t policy_aware_ = 0;
};

/// Replays recorded tokens without consulting the model or the prompt.
class ReplaySampler final : public RolloutSampler {
 public:
  explicit ReplaySampler(std::map<std::string, std::vector<int>> log) : log_(std::move(log)) {}
  std::vector<int> sample(const ToyModel&, const SampleRequest& req) override {
    auto it = log_.find(rollout_key(req));
    if (it == log_.end()) throw ValidationError("replay has no rollout for " + rollout_key(req));
    return it->second;
  }

 private:
  std::map<std::string, std::vector<int>> log_;
};

struct RlBatch {
  std::vector<RolloutGroup> groups;
  std::vector<std::vector<int>> prompts;  // no-policy prompt per group
  std::vector<double> acc;                // accuracy of no-policy rollouts per group
};

/// Samples G no-policy rollouts per item (plus G policy-aware ones for poro
/// variants) and scores them. Every stored log-probability is conditioned on
/// the no-policy prompt.
inline RlBatch collect_groups(const ToyModel& model, const ToyModel* ref, const Task& task,
                              const std::vector<const TaskItem*>& items, const StageConfig& cfg,
                              RolloutSampler& sampler, std::uint64_t draw_seed) {
  const int G = cfg.group_size;
  if (G < 1) throw ConfigError("group_size must be >= 1");
  const bool poro = is_poro(cfg.algorithm);
  const int per = poro ? 2 * G : G;
  if (per < 2) throw ConfigError("a rollout group needs at least 2 samples");
  const ClipConfig clip = cfg.clip();
  RlBatch batch;
  batch.groups.resize(items.size());
  batch.prompts.resize(items.size());
  batch.acc.assign(items.size(), 0.0);
  std::vector<std::vector<int>> with_prompts(items.size());
  std::vector<Gold> golds(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    batch.prompts[i] = model.vocab().encode(items[i]->without_policy);
    if (poro) {
      Tokens p = policy_prefix(task, *items[i]);
      p.insert(p.end(), items[i]->without_policy.begin(), items[i]->without_policy.end());
      with_prompts[i] = model.vocab().encode(p);
    }
    golds[i] = gold_for(task, *items[i], EvalMode::Internalized, nullptr);
  }
  std::vector<std::vector<RolloutRecord>> recs(items.size(), std::vector<RolloutRecord>(static_cast<std::size_t>(per)));
  std::vector<std::vector<double>> accs(items.size(), std::vector<double>(static_cast<std::size_t>(per), 0.0));
  parallel_for(items.size() * static_cast<std::size_t>(per), cfg.workers, [&](std::size_t flat) {
    const std::size_t i = flat / static_cast<std::size_t>(per);
    const int g = static_cast<int>(flat % static_cast<std::size_t>(per));
    const bool aware = g >= G;
    const auto source = aware ? RolloutSource::PolicyAware : RolloutSource::NoPolicy;
    const int idx = aware ? g - G : g;
    const SampleRequest req{*items[i], source, idx, aware ? with_prompts[i] : batch.prompts[i],
                            derive_seed(draw_seed, items[i]->id, aware ? "pa" : "np", idx), cfg.max_len, cfg.temperature};
    RolloutRecord& r = recs[i][static_cast<std::size_t>(g)];
    r.prompt_id = items[i]->id;
    r.source = source;
    r.tokens = sampler.sample(model, req);
    const auto score = score_response(task, golds[i], model.vocab().decode(r.tokens), cfg.format_weight);
    r.reward = score.reward;
    accs[i][static_cast<std::size_t>(g)] = score.acc;
    r.logprob_old = model.seq_logprob(batch.prompts[i], r.tokens);
    if (ref && clip.beta_kl > 0) r.logprob_ref = ref->seq_logprob(batch.prompts[i], r.tokens);
  });
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (poro) {
      std::vector<RolloutRecord> np(recs[i].begin(), recs[i].begin() + G), pa(recs[i].begin() + G, recs[i].end());
      batch.groups[i] = merge_policy_rollouts(std::move(np), std::move(pa));
    } else {
      batch.groups[i] = make_group(std::move(recs[i]));
    }
    double a = 0.0;
    for (int g = 0; g < G; ++g) a += accs[i][static_cast<std::size_t>(g)];
    batch.acc[i] = a / G;
  }
  return batch;
}

struct RlGradient {
  RlObjective objective;
  std::vector<double> grad;
};

/// Fills logprob_new from the current model, evaluates the objective and
/// backpropagates it through the no-policy log-probabilities.
inline RlGradient rl_gradient(const ToyModel& model, RlBatch& batch, const ClipConfig& clip, Algorithm algo,
                              unsigned workers = 1, long batch_id = 0) {
  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    for (std::size_t r = 0; r < batch.groups[g].records.size(); ++r) flat.emplace_back(g, r);
  }
  parallel_for(flat.size(), workers, [&](std::size_t f) {
    auto& rec = batch.groups[flat[f].first].records[flat[f].second];
    rec.logprob_new = model.seq_logprob(batch.prompts[flat[f].first], rec.tokens);
  });
  RlGradient out;
  out.objective = rl_objective(batch.groups, clip, algo);
  out.grad.assign(model.size(), 0.0);
  for (const auto& [g, r] : flat) {
    const auto& w = out.objective.dlogp[g][r];
    if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) continue;
    model.accumulate_gradient(batch.prompts[g], batch.groups[g].records[r].tokens, w, out.grad, batch_id);
  }
  return out;
}

inline std::unique_ptr<Optimizer> make_optimizer(const std::string& name) {
  if (name == "adam") return std::make_unique<Adam>();
  if (name == "sgd") return std::make_unique<Sgd>();
  throw ConfigError("unknown optimizer '" + name + "'");
}

namespace detail {

inline void check_reward_kind(const StageConfig& cfg, const Task& task) {
  if (cfg.reward == "auto") return;
  const std::string want = task.kind == TaskKind::Clevr ? "clevr" : "gta";
  if (cfg.reward != want) throw ConfigError("reward '" + cfg.reward + "' does not match a " + want + " dataset");
}

inline long long elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
}

struct SupervisedExample {
  std::vector<int> prompt;
  std::vector<int> output;
  std::vector<double> weights;
};

inline std::optional<SupervisedExample> supervised_example(const ToyModel& model, const TaskItem& item, Stage stage,
                                                           bool cot_only) {
  const Vocab& v = model.vocab();
  SupervisedExample ex;
  switch (stage) {
    case Stage::Cpt: {
      if (cot_only && !item.cot) return std::nullopt;
      const Tokens& tail = item.cot ? *item.cot : item.direct;
      Tokens seq = item.with_policy;
      seq.insert(seq.end(), tail.begin(), tail.end());
      std::vector<bool> mask(seq.size(), true);
      for (std::size_t t = 0; t < item.visual_mask.size(); ++t) mask[t] = !item.visual_mask[t];
      ex.output = v.encode(seq);
      ex.weights = vm_cpt_weights(mask);
      return ex;
    }
    case Stage::SftCot:
      if (!item.cot) return std::nullopt;
      ex.prompt = v.encode(item.without_policy);
      ex.output = v.encode(*item.cot);
      break;
    case Stage::SftDirect:
      ex.prompt = v.encode(item.without_policy);
      ex.output = v.encode(item.direct);
      break;
    case Stage::Rl: return std::nullopt;
  }
  ex.weights = cot_sft_loss(std::vector<double>(ex.output.size(), 0.0)).sum.dlogp;
  return ex;
}

}  // namespace detail

using RowSink = std::function<void(const MetricsRow&)>;

inline StageResult run_supervised(const StageConfig& cfg, ToyModel& model, const Task& task, const RowSink& sink) {
  std::vector<detail::SupervisedExample> data;
  for (const auto& item : task.train) {
    if (auto ex = detail::supervised_example(model, item, cfg.stage, cfg.cot_only)) data.push_back(std::move(*ex));
  }
  if (data.empty()) throw ValidationError(std::string{stage_name(cfg.stage)} + ": no usable training records");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("batch_size must be >= 1 and epochs >= 0");
  auto opt = make_optimizer(cfg.optimizer);
  StageResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  std::vector<double> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = seeded_permutation(data.size(), derive_seed(cfg.seed, stage_name(cfg.stage), "epoch", epoch));
    for (std::size_t start = 0; start < data.size(); start += B) {
      const std::size_t end = std::min(start + B, data.size());
      grad.assign(model.size(), 0.0);
      double loss = 0.0;
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const auto& ex = data[order[b]];
        std::vector<double> w(ex.weights);
        for (double& x : w) x *= scale;
        loss += model.accumulate_gradient(ex.prompt, ex.output, w, grad, res.steps);
      }
      clip_grad_norm(grad, cfg.grad_clip);
      opt->step(model.params(), grad, cfg.effective_lr());
      ++res.steps;
      MetricsRow row;
      row.step = res.steps;
      row.stage = std::string{stage_name(cfg.stage)};
      row.loss = loss;
      row.wall_ms = detail::elapsed_ms(t0);
      res.rows.push_back(row);
      if (sink) sink(row);
    }
  }
  return res;
}

inline StageResult run_rl(const StageConfig& cfg, ToyModel& model, const Task& task, RolloutSampler& sampler,
                          const RowSink& sink) {
  detail::check_reward_kind(cfg, task);
  if (task.train.empty()) throw ValidationError("rl: empty training split");
  if (cfg.batch_size < 1 || cfg.steps < 0 || cfg.inner_steps < 1) throw ConfigError("rl: invalid batch/steps");
  const ClipConfig clip = cfg.clip();
  clip.validate();
  std::optional<ToyModel> ref;
  if (clip.beta_kl > 0) ref.emplace(model);
  auto opt = make_optimizer(cfg.optimizer);
  StageResult res;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cursor = 0;
  int epoch = 0;
  auto order = seeded_permutation(task.train.size(), derive_seed(cfg.seed, "rl", "epoch", epoch));
  auto next_items = [&] {
    std::vector<const TaskItem*> items;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        cursor = 0;
        order = seeded_permutation(task.train.size(), derive_seed(cfg.seed, "rl", "epoch", ++epoch));
      }
      items.push_back(&task.train[order[cursor++]]);
    }
    return items;
  };
  for (int step = 1; step <= cfg.steps; ++step) {
    MetricsRow row;
    row.step = step;
    row.stage = "rl";
    RlBatch batch;
    double acc_sum = 0.0;
    std::size_t acc_n = 0;
    if (is_dapo(cfg.algorithm)) {
      std::map<std::string, std::vector<int>> prompt_of;
      int attempt = 0;
      auto draw = [&] {
        auto b = collect_groups(model, ref ? &*ref : nullptr, task, next_items(), cfg, sampler,
                                derive_seed(cfg.seed, "rollout", step, attempt++));
        for (std::size_t i = 0; i < b.groups.size(); ++i) {
          prompt_of[b.groups[i].prompt_id] = b.prompts[i];
          acc_sum += b.acc[i];
          ++acc_n;
        }
        return std::move(b.groups);
      };
      auto filtered = dapo_dynamic_filter(draw, static_cast<std::size_t>(cfg.batch_size), cfg.max_retries);
      row.groups_filtered = filtered.filtered;
      row.acc = acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0;
      if (filtered.early_stop) {
        row.early_stop = true;
        row.wall_ms = detail::elapsed_ms(t0);
        res.early_stop = true;
        res.rows.push_back(row);
        if (sink) sink(row);
        break;
      }
      batch.groups = std::move(filtered.groups);
      for (const auto& g : batch.groups) batch.prompts.push_back(prompt_of.at(g.prompt_id));
    } else {
      batch = collect_groups(model, ref ? &*ref : nullptr, task, next_items(), cfg, sampler,
                             derive_seed(cfg.seed, "rollout", step, 0));
      for (double a : batch.acc) acc_sum += a;
      row.acc = acc_sum / static_cast<double>(batch.acc.size());
    }
    for (int inner = 0; inner < cfg.inner_steps; ++inner) {
      auto rg = rl_gradient(model, batch, clip, cfg.algorithm, cfg.workers, step);
      if (inner == 0) {
        row.loss = rg.objective.loss;
        row.reward_mean = rg.objective.diag.reward_mean;
        row.reward_std = rg.objective.diag.reward_std;
        row.kl = rg.objective.diag.kl;
      }
      row.clip_frac = rg.objective.diag.clip_frac;
      clip_grad_norm(rg.grad, cfg.grad_clip);
      opt->step(model.params(), rg.grad, cfg.effective_lr());
    }
    res.steps = step;
    row.wall_ms = detail::elapsed_ms(t0);
    res.rows.push_back(row);
    if (sink) sink(row);
  }
  return res;
}

/// Runs one stage in place on `model`. rl uses `sampler` when given, else
/// samples from the model itself.
inline StageResult run_stage(const StageConfig& cfg, ToyModel& model, const Task& task,
                             RolloutSampler* sampler = nullptr, const RowSink& sink = {}) {
  if (model.vocab_hash() != task.vocab.hash()) {
    throw ValidationError("checkpoint vocab " + hex64(model.vocab_hash()) + " does not match dataset vocab " +
                          hex64(task.vocab.hash()));
  }
  if (cfg.stage != Stage::Rl) return run_supervised(cfg, model, task, sink);
  ModelSampler own;
  return run_rl(cfg, model, task, sampler ? *sampler : own, sink);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << metrics_header() << '\n';
  for (const auto& r : rows) out << metrics_line(r) << '\n';
}

// -------------------------------------------------------------- experiment

struct ExperimentConfig {
  std::filesystem::path manifest;
  ModelDims dims;
  std::map<Stage, StageConfig> stages{{Stage::Cpt, default_stage_config(Stage::Cpt)},
                                      {Stage::SftDirect, default_stage_config(Stage::SftDirect)},
                                      {Stage::SftCot, default_stage_config(Stage::SftCot)},
                                      {Stage::Rl, default_stage_config(Stage::Rl)}};
  double lr_scale = 1.0;
  std::string optimizer = "adam";
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  // train subcommand
  Stage train_stage = Stage::SftCot;
  std::optional<std::filesystem::path> init_checkpoint;
  // evaluation
  EvalMode eval_mode = EvalMode::Internalized;
  int eval_max_len = 64;
  std::size_t eval_limit = 0;
  std::uint64_t override_seed = 1;
  bool override_unchanged = false;
  // compare
  std::vector<std::string> methods{"sft_cot", "sft_cot+grpo", "trimpi+poro_grpo"};
  std::vector<std::uint64_t> seeds{0};

  /// Stage config with the global optimizer settings, seed and workers applied.
  StageConfig stage(Stage s) const {
    StageConfig c = stages.at(s);
    c.lr_scale = lr_scale;
    c.optimizer = optimizer;
    c.grad_clip = grad_clip;
    c.workers = workers;
    return c;
  }
};

inline ConfigSchema experiment_schema(ExperimentConfig& x) {
  ConfigSchema s;
  s.add("data", "manifest", [&](const std::string& v, const std::string&) { x.manifest = v; });
  s.add("model", "k", [&](const std::string& v, const std::string& w) { x.dims.k = static_cast<int>(parse_int(v, w)); });
  s.add("model", "d", [&](const std::string& v, const std::string& w) { x.dims.d = static_cast<int>(parse_int(v, w)); });
  s.add("model", "h", [&](const std::string& v, const std::string& w) { x.dims.h = static_cast<int>(parse_int(v, w)); });
  s.add("run", "seed", [&](const std::string& v, const std::string& w) { x.seed = static_cast<std::uint64_t>(parse_int(v, w)); });
  s.add("run", "workers", [&](const std::string& v, const std::string& w) { x.workers = static_cast<unsigned>(parse_int(v, w)); });
  s.add("optim", "lr_scale", [&](const std::string& v, const std::string& w) { x.lr_scale = parse_double(v, w); });
  s.add("optim", "optimizer", [&](const std::string& v, const std::string&) {
    make_optimizer(v);
    x.optimizer = v;
  });
  s.add("optim", "grad_clip", [&](const std::string& v, const std::string& w) { x.grad_clip = parse_double(v, w); });
  s.add("train", "stage", [&](const std::string& v, const std::string&) { x.train_stage = stage_from_name(v); });
  s.add("train", "init", [&](const std::string& v, const std::string&) { x.init_checkpoint = v; });
  s.add("eval", "mode", [&](const std::string& v, const std::string&) { x.eval_mode = eval_mode_from_name(v); });
  s.add("eval", "max_len", [&](const std::string& v, const std::string& w) { x.eval_max_len = static_cast<int>(parse_int(v, w)); });
  s.add("eval", "limit", [&](const std::string& v, const std::string& w) { x.eval_limit = static_cast<std::size_t>(parse_int(v, w)); });
  s.add("eval", "override_seed", [&](const std::string& v, const std::string& w) { x.override_seed = static_cast<std::uint64_t>(parse_int(v, w)); });
  s.add("eval", "override_unchanged", [&](const std::string& v, const std::string& w) { x.override_unchanged = parse_bool(v, w); });
  s.add("compare", "methods", [&](const std::string& v, const std::string&) { x.methods = split_list(v); });
  s.add("compare", "seeds", [&](const std::string& v, const std::string& w) {
    x.seeds.clear();
    for (const auto& item : split_list(v)) x.seeds.push_back(static_cast<std::uint64_t>(parse_int(item, w)));
  });
  for (Stage st : {Stage::Cpt, Stage::SftDirect, Stage::SftCot, Stage::Rl}) {
    const std::string sec{stage_name(st)};
    auto& c = x.stages.at(st);
    s.add(sec, "epochs", [&c](const std::string& v, const std::string& w) { c.epochs = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "batch_size", [&c](const std::string& v, const std::string& w) { c.batch_size = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "lr", [&c](const std::string& v, const std::string& w) { c.lr = parse_double(v, w); });
    if (st == Stage::Cpt) {
      s.add(sec, "cot_only", [&c](const std::string& v, const std::string& w) { c.cot_only = parse_bool(v, w); });
    }
    if (st != Stage::Rl) continue;
    s.add(sec, "algorithm", [&c](const std::string& v, const std::string&) { c.algorithm = algorithm_from_name(v); });
    s.add(sec, "steps", [&c](const std::string& v, const std::string& w) { c.steps = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "group_size", [&c](const std::string& v, const std::string& w) { c.group_size = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "temperature", [&c](const std::string& v, const std::string& w) { c.temperature = parse_double(v, w); });
    s.add(sec, "max_len", [&c](const std::string& v, const std::string& w) { c.max_len = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "eps_low", [&c](const std::string& v, const std::string& w) { c.eps_low = parse_double(v, w); });
    s.add(sec, "eps_high", [&c](const std::string& v, const std::string& w) { c.eps_high = parse_double(v, w); });
    s.add(sec, "beta_kl", [&c](const std::string& v, const std::string& w) { c.beta_kl = parse_double(v, w); });
    s.add(sec, "aggregation", [&c](const std::string& v, const std::string&) {
      if (v == "sequence_mean") c.aggregation = Aggregation::SequenceMean;
      else if (v == "token_mean") c.aggregation = Aggregation::TokenMean;
      else throw ConfigError("unknown aggregation '" + v + "'");
    });
    s.add(sec, "max_retries", [&c](const std::string& v, const std::string& w) { c.max_retries = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "inner_steps", [&c](const std::string& v, const std::string& w) { c.inner_steps = static_cast<int>(parse_int(v, w)); });
    s.add(sec, "format_weight", [&c](const std::string& v, const std::string& w) { c.format_weight = parse_double(v, w); });
    s.add(sec, "reward", [&c](const std::string& v, const std::string&) {
      if (v != "auto" && v != "clevr" && v != "gta") throw ConfigError("unknown reward '" + v + "'");
      c.reward = v;
    });
  }
  return s;
}

inline ExperimentConfig load_experiment_config(const std::vector<ConfigEntry>& entries, ExperimentConfig base = {}) {
  experiment_schema(base).apply(entries);
  return base;
}

/// A method is a '+'-joined stage list: cpt, sft_direct, sft_cot, an rl
/// algorithm name, or "trimpi" for cpt+sft_cot.
struct MethodStage {
  Stage stage;
  std::optional<Algorithm> algorithm;

  std::string key() const {
    return algorithm ? std::string{"rl:"} + std::string{algorithm_name(*algorithm)} : std::string{stage_name(stage)};
  }
};

inline std::vector<MethodStage> parse_method(const std::string& method) {
  std::vector<MethodStage> out;
  std::string part;
  std::istringstream in(method);
  while (std::getline(in, part, '+')) {
    part = trim(part);
    if (part == "trimpi") {
      out.push_back({Stage::Cpt, std::nullopt});
      out.push_back({Stage::SftCot, std::nullopt});
    } else if (part == "cpt" || part == "sft_direct" || part == "sft_cot") {
      out.push_back({stage_from_name(part), std::nullopt});
    } else {
      out.push_back({Stage::Rl, algorithm_from_name(part)});
    }
  }
  if (out.empty()) throw ConfigError("empty method '" + method + "'");
  return out;
}

struct CompareRow {
  std::string method;
  std::uint64_t seed = 0;
  std::string status = "ok";
  EvalReport report;
  int steps = 0;
  bool early_stop = false;
};

inline std::string compare_header() {
  return "method,seed,status,accuracy,tool_acc,arg_score,overall,format_rate,samples,steps,early_stop,flag";
}

inline std::string compare_line(const CompareRow& r) {
  auto quote = [](const std::string& s) {
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string{"\"\""} : std::string(1, c);
    return out + "\"";
  };
  const auto& e = r.report;
  return quote(r.method) + "," + std::to_string(r.seed) + "," + quote(r.status) + "," + fmt_num(e.accuracy) + "," +
         fmt_num(e.tool_acc) + "," + fmt_num(e.arg_score) + "," + fmt_num(e.overall) + "," + fmt_num(e.format_rate) +
         "," + std::to_string(e.samples) + "," + std::to_string(r.steps) + "," + (r.early_stop ? "1" : "0") + "," +
         (r.early_stop ? "*" : "");
}

struct CompareOptions {
  std::optional<std::filesystem::path> run_dir;  // per-run metrics CSVs
  std::function<void(const CompareRow&)> on_row;
};

/// Trains and evaluates every (method, seed). Stage prefixes shared between
/// methods are trained once per seed. Rows follow the configured method
/// order, then seed order; a failing variant yields a row with its error.
inline std::vector<CompareRow> compare_experiment(const ExperimentConfig& cfg, const Task& task,
                                                  const CompareOptions& copt = {}) {
  struct Cached {
    ToyModel model;
    int steps;
    bool early_stop;
    std::vector<MetricsRow> rows;
  };
  std::map<std::string, std::shared_ptr<Cached>> cache;
  std::vector<CompareRow> rows;
  for (const auto& method : cfg.methods) {
    for (std::uint64_t seed : cfg.seeds) {
      CompareRow row;
      row.method = method;
      row.seed = seed;
      try {
        const auto plan = parse_method(method);
        std::string key = std::to_string(seed);
        std::shared_ptr<Cached> cur = std::make_shared<Cached>(
            Cached{ToyModel(task.vocab, cfg.dims, derive_seed(seed, "init")), 0, false, {}});
        for (std::size_t i = 0; i < plan.size(); ++i) {
          key += ">" + plan[i].key();
          auto hit = cache.find(key);
          if (hit != cache.end()) {
            cur = hit->second;
            continue;
          }
          auto next = std::make_shared<Cached>(*cur);
          if (next->early_stop) {
            cache[key] = next;
            cur = next;
            continue;
          }
          StageConfig sc = cfg.stage(plan[i].stage);
          if (plan[i].algorithm) sc.algorithm = *plan[i].algorithm;
          sc.seed = derive_seed(seed, key);
          auto res = run_stage(sc, next->model, task);
          next->steps += res.steps;
          next->early_stop = res.early_stop;
          next->rows.insert(next->rows.end(), res.rows.begin(), res.rows.end());
          cache[key] = next;
          cur = next;
        }
        ModelAgent agent(cur->model, cfg.eval_max_len);
        EvalOptions eo;
        eo.limit = cfg.eval_limit;
        eo.workers = cfg.workers;
        row.report = evaluate(agent, task, EvalMode::Internalized, nullptr, eo);
        row.steps = cur->steps;
        row.early_stop = cur->early_stop;
        if (copt.run_dir) {
          std::filesystem::create_directories(*copt.run_dir);
          std::string safe = method;
          std::replace(safe.begin(), safe.end(), '+', '-');
          write_metrics_csv(*copt.run_dir / (safe + "_seed" + std::to_string(seed) + ".csv"), cur->rows);
        }
      } catch (const std::exception& e) {
        row.status = std::string{"error: "} + e.what();
      }
      if (copt.on_row) copt.on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << compare_header() << '\n';
  for (const auto& r : rows) out << compare_line(r) << '\n';
}

}  // namespace polint
