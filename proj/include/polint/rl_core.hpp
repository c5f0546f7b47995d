#pragma once

// Group advantages, clipped surrogate, KL penalty, the PolicyRollout merge
// and DAPO dynamic sampling over plain rollout records.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "polint/common.hpp"

namespace polint {

enum class RolloutSource : std::uint8_t { NoPolicy, PolicyAware };

enum class Algorithm : std::uint8_t { Grpo, Dapo, PoroGrpo, PoroDapo };

inline std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Grpo: return "grpo";
    case Algorithm::Dapo: return "dapo";
    case Algorithm::PoroGrpo: return "poro_grpo";
    case Algorithm::PoroDapo: return "poro_dapo";
  }
  return "grpo";
}

inline Algorithm algorithm_from_name(std::string_view s) {
  for (auto a : {Algorithm::Grpo, Algorithm::Dapo, Algorithm::PoroGrpo, Algorithm::PoroDapo}) {
    if (algorithm_name(a) == s) return a;
  }
  throw ConfigError("unknown algorithm '" + std::string{s} + "'");
}

inline bool is_poro(Algorithm a) { return a == Algorithm::PoroGrpo || a == Algorithm::PoroDapo; }
inline bool is_dapo(Algorithm a) { return a == Algorithm::Dapo || a == Algorithm::PoroDapo; }

enum class Aggregation : std::uint8_t { SequenceMean, TokenMean };

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.3;
  double beta_kl = 0.01;
  Aggregation aggregation = Aggregation::SequenceMean;

  static ClipConfig for_algorithm(Algorithm a) {
    if (is_dapo(a)) return {0.2, 0.28, 0.0, Aggregation::TokenMean};
    return {0.2, 0.3, 0.01, Aggregation::SequenceMean};
  }

  void validate() const {
    if (!(eps_low > 0 && eps_low < 1 && eps_high > 0 && eps_high < 1)) {
      throw ConfigError("clip ranges must lie in (0, 1)");
    }
    if (beta_kl < 0) throw ConfigError("beta_kl must be >= 0");
  }
};

/// Token sequence plus log-probabilities. All three log-prob vectors are
/// conditioned on the no-policy prompt whatever `source` says.
struct RolloutRecord {
  std::string prompt_id;
  RolloutSource source = RolloutSource::NoPolicy;
  std::vector<int> tokens;
  std::vector<double> logprob_old;
  std::vector<double> logprob_new;
  std::vector<double> logprob_ref;
  double reward = 0.0;
};

struct RolloutGroup {
  std::string prompt_id;
  std::vector<RolloutRecord> records;
  std::vector<double> advantages;

  std::vector<double> rewards() const {
    std::vector<double> r;
    r.reserve(records.size());
    for (const auto& rec : records) r.push_back(rec.reward);
    return r;
  }
};

inline constexpr double kAdvantageEps = 1e-6;

/// (r - mean) / (population std + eps); exact zeros when all rewards match.
inline std::vector<double> group_advantages(const std::vector<double>& rewards, double eps = kAdvantageEps) {
  if (rewards.size() < 2) throw ValidationError("group_advantages: need at least 2 rewards");
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (sd + eps);
  return out;
}

inline void fill_advantages(RolloutGroup& g, double eps = kAdvantageEps) { g.advantages = group_advantages(g.rewards(), eps); }

inline bool has_reward_variance(const RolloutGroup& g) {
  return std::any_of(g.records.begin(), g.records.end(), [&](const auto& r) { return r.reward != g.records[0].reward; });
}

inline RolloutGroup make_group(std::vector<RolloutRecord> records) {
  if (records.empty()) throw ValidationError("rollout group is empty");
  RolloutGroup g;
  g.prompt_id = records.front().prompt_id;
  for (const auto& r : records) {
    if (r.prompt_id != g.prompt_id) throw ValidationError("rollout group mixes prompts '" + g.prompt_id + "' and '" + r.prompt_id + "'");
  }
  g.records = std::move(records);
  if (g.records.size() >= 2) fill_advantages(g);
  return g;
}

/// Concatenates the no-policy and policy-aware rollouts of one prompt and
/// normalizes advantages over the combined group.
inline RolloutGroup merge_policy_rollouts(std::vector<RolloutRecord> no_policy, std::vector<RolloutRecord> policy_aware) {
  if (no_policy.empty() || policy_aware.empty()) throw ValidationError("merge_policy_rollouts: both sides must be non-empty");
  std::vector<RolloutRecord> all = std::move(no_policy);
  all.insert(all.end(), std::make_move_iterator(policy_aware.begin()), std::make_move_iterator(policy_aware.end()));
  return make_group(std::move(all));
}

inline double clip(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

inline double clipped_surrogate(double ratio, double advantage, const ClipConfig& cfg) {
  return std::min(ratio * advantage, clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * advantage);
}

/// Mean over tokens of exp(d) - d - 1 with d = ref - new.
inline double kl_penalty(const std::vector<double>& logp_new, const std::vector<double>& logp_ref) {
  if (logp_new.size() != logp_ref.size()) throw ValidationError("kl_penalty: length mismatch");
  if (logp_new.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t t = 0; t < logp_new.size(); ++t) {
    const double d = logp_ref[t] - logp_new[t];
    s += std::exp(d) - d - 1.0;
  }
  return s / static_cast<double>(logp_new.size());
}

struct RlDiagnostics {
  double clip_frac = 0.0;
  double mean_ratio = 0.0;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  double kl = 0.0;
  std::size_t tokens = 0;
  std::size_t sequences = 0;
};

struct RlObjective {
  double loss = 0.0;
  /// dloss/dlogprob_new, indexed [group][record][token].
  std::vector<std::vector<std::vector<double>>> dlogp;
  RlDiagnostics diag;
};

/// Negative clipped-surrogate objective plus beta * KL. Ratios are per token
/// with the sequence advantage broadcast; sequence_mean averages tokens within
/// each sequence then sequences, token_mean averages over all tokens.
inline RlObjective rl_objective(const std::vector<RolloutGroup>& groups, ClipConfig cfg, Algorithm algo) {
  cfg.validate();
  if (is_dapo(algo)) cfg.beta_kl = 0.0;
  RlObjective out;
  std::size_t n_seq = 0, n_tok = 0;
  for (const auto& g : groups) {
    if (g.advantages.size() != g.records.size()) throw ValidationError("rl_objective: advantages not filled for " + g.prompt_id);
    bool has_np = false, has_pa = false;
    for (const auto& r : g.records) {
      (r.source == RolloutSource::NoPolicy ? has_np : has_pa) = true;
      if (r.logprob_new.size() != r.logprob_old.size()) throw ValidationError("rl_objective: logprob length mismatch");
      if (cfg.beta_kl > 0 && r.logprob_ref.size() != r.logprob_new.size()) {
        throw ValidationError("rl_objective: reference logprobs missing");
      }
      n_tok += r.logprob_new.size();
      if (!r.logprob_new.empty()) ++n_seq;
    }
    if (is_poro(algo) && !(has_np && has_pa)) {
      throw ValidationError("rl_objective: " + std::string{algorithm_name(algo)} + " needs both rollout sources in group " + g.prompt_id);
    }
    if (!is_poro(algo) && has_pa) {
      throw ValidationError("rl_objective: policy-aware rollouts are only valid for poro variants");
    }
  }
  if (n_tok == 0) throw ValidationError("rl_objective: no tokens to score");

  double loss = 0.0, kl_sum = 0.0, ratio_sum = 0.0, reward_sum = 0.0, reward_sq = 0.0;
  std::size_t clipped = 0, n_rec = 0;
  out.dlogp.resize(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    out.dlogp[gi].resize(g.records.size());
    for (std::size_t ri = 0; ri < g.records.size(); ++ri) {
      const auto& r = g.records[ri];
      const double a = g.advantages[ri];
      reward_sum += r.reward;
      reward_sq += r.reward * r.reward;
      ++n_rec;
      auto& d = out.dlogp[gi][ri];
      d.assign(r.logprob_new.size(), 0.0);
      if (r.logprob_new.empty()) continue;
      const double w = cfg.aggregation == Aggregation::SequenceMean
                           ? 1.0 / (static_cast<double>(n_seq) * static_cast<double>(r.logprob_new.size()))
                           : 1.0 / static_cast<double>(n_tok);
      double seq_kl = 0.0;
      for (std::size_t t = 0; t < r.logprob_new.size(); ++t) {
        const double ratio = std::exp(r.logprob_new[t] - r.logprob_old[t]);
        if (!std::isfinite(ratio)) throw NumericError("rl_objective: non-finite ratio in group " + g.prompt_id);
        ratio_sum += ratio;
        const double unclipped = ratio * a;
        const double clipped_v = clip(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
        if (clipped_v < unclipped) {
          ++clipped;
          loss -= w * clipped_v;  // constant in theta
        } else {
          loss -= w * unclipped;
          d[t] -= w * unclipped;  // d(ratio)/d(logp) = ratio
        }
        if (cfg.beta_kl > 0) {
          const double delta = r.logprob_ref[t] - r.logprob_new[t];
          const double e = std::exp(delta);
          seq_kl += e - delta - 1.0;
          d[t] += cfg.beta_kl * w * (1.0 - e);
        }
      }
      if (cfg.beta_kl > 0) {
        loss += cfg.beta_kl * w * seq_kl;
        kl_sum += seq_kl / static_cast<double>(r.logprob_new.size());
      }
    }
  }
  out.loss = loss;
  out.diag.tokens = n_tok;
  out.diag.sequences = n_seq;
  out.diag.clip_frac = static_cast<double>(clipped) / static_cast<double>(n_tok);
  out.diag.mean_ratio = ratio_sum / static_cast<double>(n_tok);
  out.diag.reward_mean = reward_sum / static_cast<double>(n_rec);
  out.diag.reward_std = std::sqrt(std::max(0.0, reward_sq / static_cast<double>(n_rec) - out.diag.reward_mean * out.diag.reward_mean));
  out.diag.kl = cfg.beta_kl > 0 ? kl_sum / static_cast<double>(n_seq) : 0.0;
  return out;
}

inline constexpr int kDynamicSamplingRetries = 20;

struct DynamicFilterResult {
  std::vector<RolloutGroup> groups;
  bool early_stop = false;
  int attempts = 0;
  std::size_t filtered = 0;  // zero-variance groups discarded
};

/// Calls draw() until `needed` groups with nonzero reward variance are
/// collected. Every draw() counts as one attempt; reaching max_retries
/// attempts without enough groups sets early_stop.
inline DynamicFilterResult dapo_dynamic_filter(const std::function<std::vector<RolloutGroup>()>& draw, std::size_t needed,
                                               int max_retries = kDynamicSamplingRetries) {
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  DynamicFilterResult res;
  while (res.groups.size() < needed) {
    if (res.attempts >= max_retries) {
      res.early_stop = true;
      break;
    }
    ++res.attempts;
    for (auto& g : draw()) {
      if (!has_reward_variance(g)) {
        ++res.filtered;
      } else if (res.groups.size() < needed) {
        res.groups.push_back(std::move(g));
      }
    }
  }
  return res;
}

}  // namespace polint
