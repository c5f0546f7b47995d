#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "polint/scene_data.hpp"

using namespace polint;

namespace {

bool has_value(const Scene& s, AttrKind k, const std::string& v) {
  for (const auto& o : s.objects) {
    if (o.get(k) == v) return true;
  }
  return false;
}

// Outcome by checking every root-to-leaf path; exactly one must match.
std::string outcome_by_paths(const DecisionTree& t, const Scene& s) {
  std::string found;
  int matches = 0;
  const auto paths = leaf_paths(t);
  for (std::size_t l = 0; l < paths.size(); ++l) {
    bool ok = true;
    for (auto [node, verdict] : paths[l]) {
      const auto& c = t.nodes[static_cast<std::size_t>(node)].condition;
      if (has_value(s, c.kind, c.value) != verdict) ok = false;
    }
    if (ok) {
      ++matches;
      found = t.leaves[l].label;
    }
  }
  EXPECT_EQ(matches, 1);
  return found;
}

bool satisfies(const LeafPredicate& p, const Scene& s) {
  for (std::size_t k = 0; k < 4; ++k) {
    for (const auto& o : s.objects) {
      const auto& v = o.get(kAllKinds[k]);
      if (std::find(p.allowed[k].begin(), p.allowed[k].end(), v) == p.allowed[k].end()) return false;
    }
    for (const auto& v : p.required[k]) {
      if (!has_value(s, kAllKinds[k], v)) return false;
    }
  }
  return true;
}

PolicyDoc small_policy(std::uint64_t seed, int depth = 3, PolicyMode mode = PolicyMode::T) {
  return render_policy(sample_decision_tree(depth, mode, seed), "P" + std::to_string(seed), mode);
}

}  // namespace

TEST(Scene, SamplerRespectsBoundsAndOntology) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = sample_scene(seed, 2, 6);
    ASSERT_GE(s.objects.size(), 2u);
    ASSERT_LE(s.objects.size(), 6u);
    for (const auto& o : s.objects) {
      for (AttrKind k : kAllKinds) ASSERT_TRUE(is_legal_value(k, o.get(k)));
    }
    ASSERT_EQ(parse_scene_tokens(scene_tokens(s)), s);
    ASSERT_EQ(scene_from_json(scene_to_json(s)), s);
  }
  EXPECT_THROW(sample_scene(1, 4, 3), GenerationError);
}

TEST(Oracle, TraceAgreesWithPathEnumeration) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto t = sample_decision_tree(5, PolicyMode::T, seed);
    for (std::uint64_t j = 0; j < 40; ++j) {
      const auto s = sample_scene(derive_seed(seed, j));
      const auto tr = trace(t, s);
      ASSERT_EQ(tr.outcome, outcome_by_paths(t, s));
      for (const auto& step : tr.steps) {
        ASSERT_EQ(step.verdict, has_value(s, step.condition.kind, step.condition.value));
      }
      ASSERT_LE(tr.steps.size(), 5u);
    }
  }
}

TEST(Oracle, CotMirrorsTraceAndChecksPolicy) {
  const auto doc = small_policy(3, 4);
  const auto s = sample_scene(9);
  const auto tr = trace(doc.tree, s);
  const auto cot = synth_cot(tr, doc);
  EXPECT_EQ(cot.front(), "<think>");
  EXPECT_EQ(cot.back(), "}");
  EXPECT_EQ(static_cast<std::size_t>(std::count(cot.begin(), cot.end(), "Condition")), tr.steps.size());
  const auto other = small_policy(4, 4);
  EXPECT_THROW(synth_cot(tr, other), ValidationError);
  EXPECT_EQ(direct_answer_tokens("Case 3"), (Tokens{"<think>", "</think>", "\\boxed{", "Case", "3", "}"}));
}

TEST(LeafPredicate, MatchesTraceOnRandomScenes) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto t = sample_decision_tree(4, PolicyMode::T, seed);
    const auto paths = leaf_paths(t);
    std::vector<LeafPredicate> preds;
    for (const auto& p : paths) preds.push_back(leaf_predicate(t, p));
    for (std::uint64_t j = 0; j < 100; ++j) {
      const auto s = sample_scene(derive_seed(seed, "s", j), 1, 6);
      const auto out = trace(t, s).outcome;
      for (std::size_t l = 0; l < paths.size(); ++l) {
        ASSERT_EQ(satisfies(preds[l], s), out == t.leaves[l].label);
      }
    }
  }
}

TEST(LeafPredicate, ConditionalSamplerHitsItsLeaf) {
  const auto t = sample_decision_tree(4, PolicyMode::T, 8);
  const auto paths = leaf_paths(t);
  Rng rng(1);
  for (std::size_t l = 0; l < paths.size(); ++l) {
    const auto pred = leaf_predicate(t, paths[l]);
    if (!pred.satisfiable(10)) continue;
    for (int i = 0; i < 20; ++i) {
      auto s = sample_scene_for_leaf(rng, pred, 3, 10, 10000);
      ASSERT_TRUE(s.has_value());
      ASSERT_EQ(trace(t, *s).outcome, t.leaves[l].label);
    }
  }
}

// The conditional sampler must reproduce the prior's object-count
// distribution restricted to the leaf. Oracle: plain rejection sampling.
TEST(LeafPredicate, ConditionalSamplerMatchesRejectionDistribution) {
  const auto t = sample_decision_tree(2, PolicyMode::T, 21);
  const auto paths = leaf_paths(t);
  const auto pred = leaf_predicate(t, paths.back());  // all-FALSE leaf
  std::map<std::size_t, double> a, b;
  Rng rng(5);
  const int n = 4000;
  for (int i = 0; i < n; ++i) a[sample_scene_for_leaf(rng, pred, 3, 6, 100000)->objects.size()] += 1.0 / n;
  int kept = 0;
  for (std::uint64_t j = 0; kept < n; ++j) {
    const auto s = sample_scene(derive_seed(77, j), 3, 6);
    if (!satisfies(pred, s)) continue;
    b[s.objects.size()] += 1.0 / n;
    ++kept;
  }
  for (std::size_t k = 3; k <= 6; ++k) EXPECT_NEAR(a[k], b[k], 0.04) << k;
}

TEST(Records, PrefixSuffixAndMask) {
  const auto doc = small_policy(2, 3, PolicyMode::M);
  const auto ptoks = policy_tokens(doc);
  const auto r = make_record(doc, ptoks, sample_scene(4), true);
  EXPECT_TRUE(suffix_property_holds(r));
  EXPECT_EQ(policy_prefix_length(r), ptoks.size());
  ASSERT_EQ(r.visual_mask.size(), r.tokens_with_policy.size());
  for (std::size_t i = 0; i < r.visual_mask.size(); ++i) {
    EXPECT_EQ(r.visual_mask[i], is_visual_token(r.tokens_with_policy[i]));
  }
  EXPECT_EQ(r.answer, trace(doc.tree, r.scene).outcome);
  const auto back = record_from_json(nlohmann::json::parse(record_to_jsonl(r)));
  EXPECT_EQ(back.tokens_with_policy, r.tokens_with_policy);
  EXPECT_EQ(back.visual_mask, r.visual_mask);
  EXPECT_EQ(back.cot, r.cot);
  EXPECT_EQ(back.scene, r.scene);
  EXPECT_EQ(back.answer, r.answer);
}

TEST(Dataset, BalancedDisjointDeterministic) {
  const std::vector<PolicyDoc> pols{small_policy(1), small_policy(2)};
  DatasetOptions o;
  o.per_policy_train = 160;
  o.per_policy_test = 80;
  o.seed = 3;
  o.cot_fraction = 0.25;
  const auto a = generate_dataset(pols, o);
  o.workers = 3;
  const auto b = generate_dataset(pols, o);
  ASSERT_EQ(a.train.records.size(), 320u);
  ASSERT_EQ(a.test.records.size(), 160u);
  for (std::size_t i = 0; i < a.train.records.size(); ++i) {
    ASSERT_EQ(record_to_jsonl(a.train.records[i]), record_to_jsonl(b.train.records[i]));
  }
  for (const auto& doc : pols) {
    std::map<std::string, int> counts;
    std::set<std::string> train_scenes;
    int cot = 0;
    for (const auto& r : a.train.records) {
      if (r.policy_id != doc.name) continue;
      ++counts[r.answer];
      cot += r.cot.has_value();
      train_scenes.insert(canonical_scene(r.scene));
      ASSERT_EQ(r.answer, trace(doc.tree, r.scene).outcome);
    }
    EXPECT_EQ(cot, 40);
    int lo = 1 << 30, hi = 0;
    for (const auto& [_, c] : counts) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    EXPECT_LE(hi - lo, 1);
    EXPECT_EQ(counts.size(), a.reachable_outcomes.at(doc.name).size());
    for (const auto& r : a.test.records) {
      if (r.policy_id == doc.name) {
        EXPECT_FALSE(train_scenes.count(canonical_scene(r.scene)));
        EXPECT_TRUE(r.cot.has_value());
      }
    }
  }
}

TEST(Dataset, RejectsBadOptions) {
  const std::vector<PolicyDoc> pols{small_policy(1)};
  DatasetOptions o;
  o.per_policy_train = 0;
  EXPECT_THROW(generate_dataset(pols, o), GenerationError);
  EXPECT_THROW(generate_dataset({}, DatasetOptions{}), GenerationError);
  EXPECT_THROW(generate_dataset({pols[0], pols[0]}, DatasetOptions{}), GenerationError);
}

TEST(Dataset, FilesRoundTripAndStats) {
  const auto dir = std::filesystem::temp_directory_path() / "polint_scene_files";
  std::filesystem::remove_all(dir);
  const std::vector<PolicyDoc> pols{small_policy(5, 4)};
  DatasetOptions o;
  o.per_policy_train = 50;
  o.per_policy_test = 30;
  const auto files = gen_dataset(pols, o, dir);
  const auto m = load_clevr_manifest(files.manifest);
  ASSERT_EQ(m.policies.size(), 1u);
  EXPECT_EQ(m.policies[0].text(), pols[0].text());
  const auto test = load_records(m.test);
  ASSERT_EQ(test.size(), 30u);
  for (const auto& r : test) EXPECT_TRUE(suffix_property_holds(r));
  const auto st = prompt_stats(m.test);
  std::size_t with = 0, without = 0;
  for (const auto& r : test) {
    with += r.tokens_with_policy.size();
    without += r.tokens_without_policy.size();
  }
  EXPECT_EQ(st.total_with_policy, with);
  EXPECT_EQ(st.total_without_policy, without);
  EXPECT_DOUBLE_EQ(st.reduction, 1.0 - static_cast<double>(without) / static_cast<double>(with));
  EXPECT_EQ(m.vocab_hash, hex64(files.vocab_hash));
  std::filesystem::remove_all(dir);
}
