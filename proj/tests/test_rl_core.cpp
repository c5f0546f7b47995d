#include <gtest/gtest.h>

#include <cmath>

#include "polint/rl_core.hpp"

using namespace polint;

namespace {

RolloutRecord rec(const std::string& id, RolloutSource src, std::vector<double> old_lp, std::vector<double> new_lp,
                  double reward) {
  RolloutRecord r;
  r.prompt_id = id;
  r.source = src;
  r.tokens.assign(old_lp.size(), 1);
  r.logprob_old = std::move(old_lp);
  r.logprob_new = std::move(new_lp);
  r.logprob_ref = r.logprob_old;
  r.reward = reward;
  return r;
}

std::vector<RolloutGroup> random_groups(Rng& rng, bool poro, bool equal_len, double drift) {
  std::vector<RolloutGroup> gs;
  for (int g = 0; g < 3; ++g) {
    const std::string id = "p" + std::to_string(g);
    std::vector<RolloutRecord> np, pa;
    for (int i = 0; i < 8; ++i) {
      const std::size_t len = equal_len ? 4 : 1 + rng.below(6);
      std::vector<double> old_lp(len), new_lp(len), ref_lp(len);
      for (std::size_t t = 0; t < len; ++t) {
        old_lp[t] = -3 * rng.uniform() - 0.01;
        new_lp[t] = old_lp[t] + drift * (2 * rng.uniform() - 1);
        ref_lp[t] = old_lp[t] + 0.2 * (2 * rng.uniform() - 1);
      }
      auto r = rec(id, (poro && i >= 4) ? RolloutSource::PolicyAware : RolloutSource::NoPolicy, old_lp, new_lp,
                   static_cast<double>(rng.below(3)));
      r.logprob_ref = ref_lp;
      ((poro && i >= 4) ? pa : np).push_back(std::move(r));
    }
    gs.push_back(poro ? merge_policy_rollouts(std::move(np), std::move(pa)) : make_group(std::move(np)));
  }
  return gs;
}

// Independent scalar form of the objective.
double objective_oracle(const std::vector<RolloutGroup>& gs, ClipConfig c, Algorithm a) {
  if (is_dapo(a)) c.beta_kl = 0;
  double n_seq = 0, n_tok = 0;
  for (const auto& g : gs) {
    for (const auto& r : g.records) {
      n_seq += 1;
      n_tok += static_cast<double>(r.logprob_new.size());
    }
  }
  double total = 0;
  for (const auto& g : gs) {
    for (std::size_t i = 0; i < g.records.size(); ++i) {
      const auto& r = g.records[i];
      double s = 0, kl = 0;
      for (std::size_t t = 0; t < r.logprob_new.size(); ++t) {
        const double ratio = std::exp(r.logprob_new[t] - r.logprob_old[t]);
        const double lo = 1 - c.eps_low, hi = 1 + c.eps_high;
        const double clipped = ratio < lo ? lo : (ratio > hi ? hi : ratio);
        s += std::min(ratio * g.advantages[i], clipped * g.advantages[i]);
        const double d = r.logprob_ref[t] - r.logprob_new[t];
        kl += std::exp(d) - d - 1;
      }
      const double term = -s + c.beta_kl * kl;
      total += c.aggregation == Aggregation::SequenceMean
                   ? term / static_cast<double>(r.logprob_new.size()) / n_seq
                   : term / n_tok;
    }
  }
  return total;
}

}  // namespace

TEST(ClippedSurrogate, Goldens) {
  const ClipConfig c{0.2, 0.3, 0.0, Aggregation::SequenceMean};
  EXPECT_DOUBLE_EQ(clipped_surrogate(1.0, 1.0, c), 1.0);
  EXPECT_DOUBLE_EQ(clipped_surrogate(2.0, 1.0, c), 1.3);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, -1.0, c), -0.8);
  EXPECT_DOUBLE_EQ(clipped_surrogate(0.5, 1.0, c), 0.5);
  EXPECT_DOUBLE_EQ(clipped_surrogate(2.0, -1.0, c), -2.0);
}

TEST(ClipConfig, Defaults) {
  const auto g = ClipConfig::for_algorithm(Algorithm::Grpo);
  EXPECT_DOUBLE_EQ(g.eps_low, 0.2);
  EXPECT_DOUBLE_EQ(g.eps_high, 0.3);
  EXPECT_DOUBLE_EQ(g.beta_kl, 0.01);
  const auto d = ClipConfig::for_algorithm(Algorithm::PoroDapo);
  EXPECT_DOUBLE_EQ(d.eps_high, 0.28);
  EXPECT_DOUBLE_EQ(d.beta_kl, 0.0);
  EXPECT_THROW((ClipConfig{0.0, 0.3, 0.0, Aggregation::TokenMean}.validate()), ConfigError);
  EXPECT_THROW((ClipConfig{0.2, 0.3, -1.0, Aggregation::TokenMean}.validate()), ConfigError);
}

TEST(Advantages, ZeroMeanUnitScaleAndDegenerate) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(2 + rng.below(10));
    for (auto& x : r) x = rng.below(4) * 0.5;
    const auto a = group_advantages(r);
    double s = 0;
    for (double x : a) s += x;
    EXPECT_NEAR(s, 0.0, 1e-9);
    if (std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; })) {
      for (double x : a) EXPECT_EQ(x, 0.0);
    } else {
      double ss = 0;
      for (double x : a) ss += x * x;
      EXPECT_NEAR(ss / static_cast<double>(a.size()), 1.0, 1e-4);
    }
    auto shifted = r;
    for (auto& x : shifted) x += 3.25;
    const auto b = group_advantages(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
  EXPECT_THROW(group_advantages({1.0}), ValidationError);
}

TEST(Groups, MergeAndPromptChecks) {
  auto a = rec("x", RolloutSource::NoPolicy, {-1}, {-1}, 1.0);
  auto b = rec("x", RolloutSource::PolicyAware, {-1}, {-1}, 0.0);
  const auto g = merge_policy_rollouts({a}, {b});
  ASSERT_EQ(g.records.size(), 2u);
  EXPECT_GT(g.advantages[0], 0.0);
  EXPECT_LT(g.advantages[1], 0.0);
  auto c = rec("y", RolloutSource::NoPolicy, {-1}, {-1}, 0.0);
  EXPECT_THROW(make_group({a, c}), ValidationError);
  EXPECT_THROW(merge_policy_rollouts({}, {b}), ValidationError);
}

TEST(Objective, MatchesOracleAndItsDerivative) {
  Rng rng(11);
  for (Algorithm algo : {Algorithm::Grpo, Algorithm::Dapo, Algorithm::PoroGrpo, Algorithm::PoroDapo}) {
    for (int trial = 0; trial < 10; ++trial) {
      auto gs = random_groups(rng, is_poro(algo), false, 0.4);
      const auto cfg = ClipConfig::for_algorithm(algo);
      auto cfg_kl = cfg;
      cfg_kl.beta_kl = 0.05;
      const auto obj = rl_objective(gs, cfg_kl, algo);
      EXPECT_NEAR(obj.loss, objective_oracle(gs, cfg_kl, algo), 1e-12);
      for (std::size_t g = 0; g < gs.size(); ++g) {
        for (std::size_t r = 0; r < gs[g].records.size(); ++r) {
          for (std::size_t t = 0; t < gs[g].records[r].logprob_new.size(); ++t) {
            auto up = gs, down = gs;
            up[g].records[r].logprob_new[t] += 1e-6;
            down[g].records[r].logprob_new[t] -= 1e-6;
            const double fd = (objective_oracle(up, cfg_kl, algo) - objective_oracle(down, cfg_kl, algo)) / 2e-6;
            EXPECT_NEAR(obj.dlogp[g][r][t], fd, 1e-6) << algorithm_name(algo);
          }
        }
      }
    }
  }
}

TEST(Objective, AtOldPolicyRatiosAreOneAndLossZero) {
  Rng rng(5);
  for (Algorithm algo : {Algorithm::Grpo, Algorithm::PoroGrpo, Algorithm::Dapo, Algorithm::PoroDapo}) {
    auto gs = random_groups(rng, is_poro(algo), true, 0.0);
    for (auto& g : gs) {
      for (auto& r : g.records) r.logprob_ref = r.logprob_new;
    }
    const auto obj = rl_objective(gs, ClipConfig::for_algorithm(algo), algo);
    EXPECT_NEAR(obj.diag.mean_ratio, 1.0, 1e-12);
    EXPECT_NEAR(obj.loss, 0.0, 1e-12);
    EXPECT_DOUBLE_EQ(obj.diag.clip_frac, 0.0);
  }
}

TEST(Objective, EqualRewardsGiveExactlyZeroGradient) {
  Rng rng(9);
  auto gs = random_groups(rng, false, false, 0.3);
  for (auto& g : gs) {
    for (auto& r : g.records) r.reward = 0.7;
    fill_advantages(g);
    for (auto& r : g.records) r.logprob_ref = r.logprob_new;  // KL gradient vanishes too
  }
  const auto obj = rl_objective(gs, ClipConfig::for_algorithm(Algorithm::Grpo), Algorithm::Grpo);
  for (const auto& g : obj.dlogp) {
    for (const auto& r : g) {
      for (double d : r) EXPECT_EQ(d, 0.0);
    }
  }
}

TEST(Objective, SourceChecksAndDapoDropsKl) {
  Rng rng(2);
  auto np = random_groups(rng, false, false, 0.2);
  EXPECT_THROW(rl_objective(np, ClipConfig::for_algorithm(Algorithm::PoroGrpo), Algorithm::PoroGrpo), ValidationError);
  auto pa = random_groups(rng, true, false, 0.2);
  EXPECT_THROW(rl_objective(pa, ClipConfig::for_algorithm(Algorithm::Grpo), Algorithm::Grpo), ValidationError);
  auto cfg = ClipConfig::for_algorithm(Algorithm::Dapo);
  const double base = rl_objective(np, cfg, Algorithm::Dapo).loss;
  cfg.beta_kl = 0.5;
  const auto with = rl_objective(np, cfg, Algorithm::Dapo);
  EXPECT_EQ(with.loss, base);
  EXPECT_EQ(with.diag.kl, 0.0);
}

TEST(DynamicFilter, EarlyStopsAfterExactlyTwentyDraws) {
  int calls = 0;
  auto constant = [&] {
    ++calls;
    std::vector<RolloutGroup> gs;
    gs.push_back(make_group({rec("a", RolloutSource::NoPolicy, {-1}, {-1}, 1.0),
                             rec("a", RolloutSource::NoPolicy, {-1}, {-1}, 1.0)}));
    return gs;
  };
  const auto res = dapo_dynamic_filter(constant, 4);
  EXPECT_TRUE(res.early_stop);
  EXPECT_EQ(res.attempts, kDynamicSamplingRetries);
  EXPECT_EQ(calls, 20);
  EXPECT_EQ(res.filtered, 20u);
  EXPECT_TRUE(res.groups.empty());
}

TEST(DynamicFilter, CollectsVaryingGroups) {
  int calls = 0;
  auto mixed = [&] {
    ++calls;
    std::vector<RolloutGroup> gs;
    gs.push_back(make_group({rec("a", RolloutSource::NoPolicy, {-1}, {-1}, 1.0),
                             rec("a", RolloutSource::NoPolicy, {-1}, {-1}, 0.0)}));
    gs.push_back(make_group({rec("b", RolloutSource::NoPolicy, {-1}, {-1}, 0.0),
                             rec("b", RolloutSource::NoPolicy, {-1}, {-1}, 0.0)}));
    return gs;
  };
  const auto res = dapo_dynamic_filter(mixed, 3);
  EXPECT_FALSE(res.early_stop);
  EXPECT_EQ(res.groups.size(), 3u);
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(res.filtered, 3u);
}
