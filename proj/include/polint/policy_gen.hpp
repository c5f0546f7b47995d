#pragma once

// Constrained binary decision trees over the attribute ontology and their
// rendering into multi-section natural-language policies.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/ontology.hpp"

namespace polint {

/// Which ancestors a TRUE-edge child must differ from in attribute kind.
enum class ConstraintScope : std::uint8_t {
  ImmediateParent,  // only the parent reached through the TRUE edge
  TrueChain,        // every node on the maximal run of TRUE edges ending here
};

inline std::string_view scope_name(ConstraintScope s) {
  return s == ConstraintScope::ImmediateParent ? "immediate_parent" : "true_chain";
}

inline ConstraintScope scope_from_name(std::string_view s) {
  if (s == "immediate_parent") return ConstraintScope::ImmediateParent;
  if (s == "true_chain") return ConstraintScope::TrueChain;
  throw ParseError("unknown constraint scope '" + std::string{s} + "'");
}

struct ChildRef {
  bool leaf = true;
  int index = -1;

  friend bool operator==(const ChildRef&, const ChildRef&) = default;
};

struct DecisionNode {
  int id = 0;
  AttributeCondition condition;
  ChildRef on_true;
  ChildRef on_false;

  friend bool operator==(const DecisionNode&, const DecisionNode&) = default;
};

struct Leaf {
  std::string label;

  friend bool operator==(const Leaf&, const Leaf&) = default;
};

/// Node 0 is the root. Node ids are assigned breadth-first; leaves are stored
/// left to right (TRUE branch before FALSE branch) and labelled "Case k".
struct DecisionTree {
  int depth = 0;
  PolicyMode mode = PolicyMode::T;
  ConstraintScope scope = ConstraintScope::ImmediateParent;
  std::vector<DecisionNode> nodes;
  std::vector<Leaf> leaves;

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct TreeSampleOptions {
  double visual_demo_prob = 0.5;
  ConstraintScope scope = ConstraintScope::ImmediateParent;
};

inline std::string case_label(std::size_t k) { return "Case " + std::to_string(k); }

namespace detail {

struct PendingNode {
  int level = 0;
  std::set<AttrKind> banned;  // kinds forbidden by the TRUE-edge constraint
  int parent = -1;
  bool via_true = false;
};

inline AttributeCondition sample_condition(Rng& rng, const std::set<AttrKind>& banned,
                                           PolicyMode mode, double demo_prob) {
  std::vector<AttrKind> allowed;
  for (AttrKind k : kAllKinds) {
    if (!banned.count(k)) allowed.push_back(k);
  }
  AttributeCondition c;
  c.kind = allowed[rng.below(allowed.size())];
  const auto& vals = values_of(c.kind);
  c.value = vals[rng.below(vals.size())];
  c.presentation = Presentation::Textual;
  if (mode == PolicyMode::M && rng.bernoulli(demo_prob)) c.presentation = Presentation::VisualDemo;
  return c;
}

inline std::set<AttrKind> banned_for_true_child(const std::set<AttrKind>& parent_banned,
                                                AttrKind parent_kind, ConstraintScope scope) {
  std::set<AttrKind> out;
  if (scope == ConstraintScope::TrueChain) out = parent_banned;
  out.insert(parent_kind);
  return out;
}

// Assigns leaf indices in left-to-right order.
inline void number_leaves(DecisionTree& tree, int node, std::vector<Leaf>& leaves,
                          std::vector<std::pair<int, bool>>& leaf_slots) {
  auto& n = tree.nodes[static_cast<std::size_t>(node)];
  for (bool branch : {true, false}) {
    ChildRef& ref = branch ? n.on_true : n.on_false;
    if (ref.leaf) {
      ref.index = static_cast<int>(leaves.size());
      leaves.push_back(Leaf{case_label(leaves.size())});
      leaf_slots.emplace_back(node, branch);
    } else {
      number_leaves(tree, ref.index, leaves, leaf_slots);
    }
  }
}

}  // namespace detail

/// Samples a tree of `depth` decision layers. Under ImmediateParent scope the
/// tree is always full (2^depth - 1 decisions, 2^depth leaves); under
/// TrueChain scope a TRUE edge whose chain has exhausted all four kinds ends
/// in a leaf early.
inline DecisionTree sample_decision_tree(int depth, PolicyMode mode, std::uint64_t seed,
                                         const TreeSampleOptions& opts = {}) {
  if (depth < 1) throw GenerationError("tree depth must be >= 1");
  Rng rng(derive_seed(seed, "decision_tree", static_cast<std::uint64_t>(depth)));
  DecisionTree tree;
  tree.depth = depth;
  tree.mode = mode;
  tree.scope = opts.scope;

  std::vector<detail::PendingNode> queue{{0, {}, -1, false}};
  std::vector<std::set<AttrKind>> banned_of;
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const detail::PendingNode pending = queue[qi];
    const int id = static_cast<int>(tree.nodes.size());
    DecisionNode node;
    node.id = id;
    node.condition = detail::sample_condition(rng, pending.banned, mode, opts.visual_demo_prob);
    tree.nodes.push_back(node);
    banned_of.push_back(pending.banned);
    if (pending.parent >= 0) {
      auto& parent = tree.nodes[static_cast<std::size_t>(pending.parent)];
      (pending.via_true ? parent.on_true : parent.on_false) = ChildRef{false, id};
    }
    if (pending.level + 1 < depth) {
      const auto true_banned =
          detail::banned_for_true_child(pending.banned, node.condition.kind, opts.scope);
      if (true_banned.size() < kAllKinds.size()) {
        queue.push_back({pending.level + 1, true_banned, id, true});
      }
      queue.push_back({pending.level + 1, {}, id, false});
    }
  }
  std::vector<Leaf> leaves;
  std::vector<std::pair<int, bool>> slots;
  detail::number_leaves(tree, 0, leaves, slots);
  tree.leaves = std::move(leaves);
  return tree;
}

/// All leaf labels, left to right.
inline std::vector<std::string> enumerate_outcomes(const DecisionTree& tree) {
  std::vector<std::string> out;
  out.reserve(tree.leaves.size());
  for (const auto& l : tree.leaves) out.push_back(l.label);
  return out;
}

/// Returns the list of violated invariants; empty means valid.
inline std::vector<std::string> validate_tree(const DecisionTree& tree) {
  std::vector<std::string> report;
  const auto n_nodes = tree.nodes.size();
  const auto n_leaves = tree.leaves.size();
  if (tree.depth < 1) report.push_back("depth must be positive");
  if (tree.nodes.empty()) {
    report.push_back("tree has no decision nodes");
    return report;
  }
  if (tree.depth >= 1 && tree.depth < 31) {
    const std::size_t cap = std::size_t{1} << tree.depth;
    if (n_nodes > cap - 1) report.push_back("more than 2^depth - 1 decision nodes");
    if (n_leaves > cap) report.push_back("more than 2^depth leaves");
  }

  std::vector<int> node_refs(n_nodes, 0);
  std::vector<int> leaf_refs(n_leaves, 0);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    const auto& n = tree.nodes[i];
    if (n.id != static_cast<int>(i)) {
      report.push_back("node at slot " + std::to_string(i) + " carries id " + std::to_string(n.id));
    }
    if (!is_legal_value(n.condition.kind, n.condition.value)) {
      report.push_back("Condition " + std::to_string(i) + ": value '" + n.condition.value +
                       "' is not a " + std::string{kind_name(n.condition.kind)});
    }
    if (n.condition.presentation == Presentation::VisualDemo && tree.mode != PolicyMode::M) {
      report.push_back("Condition " + std::to_string(i) + ": visual demo outside mode M");
    }
    for (bool branch : {true, false}) {
      const ChildRef& ref = branch ? n.on_true : n.on_false;
      if (ref.leaf) {
        if (ref.index < 0 || static_cast<std::size_t>(ref.index) >= n_leaves) {
          report.push_back("Condition " + std::to_string(i) + ": dangling leaf reference");
        } else {
          ++leaf_refs[static_cast<std::size_t>(ref.index)];
        }
      } else {
        if (ref.index <= 0 || static_cast<std::size_t>(ref.index) >= n_nodes) {
          report.push_back("Condition " + std::to_string(i) + ": dangling node reference");
          continue;
        }
        ++node_refs[static_cast<std::size_t>(ref.index)];
        const auto& child = tree.nodes[static_cast<std::size_t>(ref.index)];
        if (branch && child.condition.kind == n.condition.kind) {
          report.push_back("Condition " + std::to_string(ref.index) +
                           ": TRUE child repeats parent attribute kind " +
                           std::string{kind_name(n.condition.kind)});
        }
      }
    }
  }
  if (node_refs[0] != 0) report.push_back("root is referenced as a child");
  for (std::size_t i = 1; i < n_nodes; ++i) {
    if (node_refs[i] != 1) {
      report.push_back("Condition " + std::to_string(i) + " referenced " +
                       std::to_string(node_refs[i]) + " times");
    }
  }
  for (std::size_t i = 0; i < n_leaves; ++i) {
    if (leaf_refs[i] != 1) {
      report.push_back("leaf " + std::to_string(i) + " referenced " +
                       std::to_string(leaf_refs[i]) + " times");
    }
  }
  std::set<std::string> labels;
  for (const auto& l : tree.leaves) {
    if (!labels.insert(l.label).second) report.push_back("duplicate outcome label '" + l.label + "'");
  }

  // Path length: every root-to-leaf path has at most `depth` decisions.
  if (report.empty()) {
    std::vector<std::pair<int, int>> stack{{0, 1}};
    while (!stack.empty()) {
      auto [node, level] = stack.back();
      stack.pop_back();
      if (level > tree.depth) {
        report.push_back("path deeper than depth " + std::to_string(tree.depth));
        break;
      }
      const auto& n = tree.nodes[static_cast<std::size_t>(node)];
      for (const ChildRef* ref : {&n.on_true, &n.on_false}) {
        if (!ref->leaf) stack.emplace_back(ref->index, level + 1);
      }
    }
  }
  return report;
}

/// Root-to-leaf predicate for every leaf: (node id, required verdict) pairs.
inline std::vector<std::vector<std::pair<int, bool>>> leaf_paths(const DecisionTree& tree) {
  std::vector<std::vector<std::pair<int, bool>>> paths(tree.leaves.size());
  std::vector<std::pair<int, bool>> cur;
  auto walk = [&](auto&& self, int node) -> void {
    const auto& n = tree.nodes[static_cast<std::size_t>(node)];
    for (bool branch : {true, false}) {
      cur.emplace_back(node, branch);
      const ChildRef& ref = branch ? n.on_true : n.on_false;
      if (ref.leaf) {
        paths[static_cast<std::size_t>(ref.index)] = cur;
      } else {
        self(self, ref.index);
      }
      cur.pop_back();
    }
  };
  if (!tree.nodes.empty()) walk(walk, 0);
  return paths;
}

// ------------------------------------------------------------- rendering

struct PolicySection {
  std::string id;
  std::string text;
};

struct PolicyDoc {
  std::string name;
  PolicyMode mode = PolicyMode::T;
  std::vector<PolicySection> body;
  std::map<std::string, AttributeCondition> visual_assets;  // placeholder -> hidden condition
  DecisionTree tree;

  std::string text() const {
    std::string out;
    for (const auto& s : body) {
      out += s.text;
      out += '\n';
    }
    return out;
  }
};

namespace detail {

inline std::string target_phrase(const DecisionTree& tree, const ChildRef& ref) {
  if (ref.leaf) return "answer " + tree.leaves[static_cast<std::size_t>(ref.index)].label;
  return "go to Condition " + std::to_string(ref.index);
}

}  // namespace detail

/// Renders the tree as a general instruction, the policy name and one
/// "Condition <id>" section per decision node. In mode M every VisualDemo
/// condition shows only an "<image_j>" placeholder.
inline PolicyDoc render_policy(const DecisionTree& tree, const std::string& name, PolicyMode mode) {
  if (name.empty()) throw GenerationError("policy name must be non-empty");
  PolicyDoc doc;
  doc.name = name;
  doc.mode = mode;
  doc.tree = tree;
  doc.body.push_back({"General instruction",
                      "General instruction: decide which case applies to the image by checking "
                      "the conditions below, starting from Condition 0."});
  doc.body.push_back({"Policy name", "Policy name: " + name + "."});
  int next_image = 0;
  std::set<std::string> ids{"General instruction", "Policy name"};
  for (const auto& n : tree.nodes) {
    std::string id = "Condition " + std::to_string(n.id);
    if (!ids.insert(id).second) throw GenerationError("duplicate section identifier '" + id + "'");
    std::string test;
    if (mode == PolicyMode::M && n.condition.presentation == Presentation::VisualDemo) {
      const std::string placeholder = "<image_" + std::to_string(next_image++) + ">";
      doc.visual_assets[placeholder] = n.condition;
      test = "an object whose " + std::string{kind_name(n.condition.kind)} + " matches " + placeholder;
    } else {
      test = "a " + n.condition.value + " object";
    }
    std::string text = id + ": if the image contains " + test + ", " +
                       detail::target_phrase(tree, n.on_true) + "; otherwise, " +
                       detail::target_phrase(tree, n.on_false) + ".";
    doc.body.push_back({std::move(id), std::move(text)});
  }
  return doc;
}

/// Policy tokens as the model sees them: placeholders are replaced by the
/// visual token of the demonstrated value.
inline Tokens policy_tokens(const PolicyDoc& doc) {
  Tokens out = tokenize(doc.text());
  for (auto& t : out) {
    auto it = doc.visual_assets.find(t);
    if (it != doc.visual_assets.end()) t = visual_token(it->second.value);
  }
  return out;
}

/// Reconstructs condition routing from policy tokens (as produced by
/// policy_tokens). Used by the oracle agent to follow whatever policy is in
/// context. Throws ParseError on malformed input.
inline DecisionTree parse_policy_tokens(const Tokens& toks) {
  DecisionTree tree;
  std::map<int, DecisionNode> nodes;
  std::map<int, std::string> leaf_labels;
  std::size_t i = 0;
  auto expect = [&](std::string_view w) {
    if (i >= toks.size() || toks[i] != w) {
      throw ParseError("policy parse: expected '" + std::string{w} + "' at token " + std::to_string(i));
    }
    ++i;
  };
  auto read_int = [&]() {
    if (i >= toks.size()) throw ParseError("policy parse: expected number");
    try {
      return std::stoi(toks[i++]);
    } catch (const std::exception&) {
      throw ParseError("policy parse: bad number '" + toks[i - 1] + "'");
    }
  };
  auto read_target = [&]() {
    if (i < toks.size() && toks[i] == "answer") {
      ++i;
      expect("Case");
      const int k = read_int();
      leaf_labels[k] = case_label(static_cast<std::size_t>(k));
      return ChildRef{true, k};
    }
    expect("go");
    expect("to");
    expect("Condition");
    return ChildRef{false, read_int()};
  };
  bool any_demo = false;
  while (i < toks.size()) {
    if (toks[i] == "Condition" && i + 2 < toks.size() && toks[i + 2] == ":") {
      ++i;
      DecisionNode n;
      n.id = read_int();
      expect(":");
      expect("if");
      expect("the");
      expect("image");
      expect("contains");
      if (i < toks.size() && toks[i] == "an") {
        expect("an");
        expect("object");
        expect("whose");
        if (i >= toks.size()) throw ParseError("policy parse: truncated demo condition");
        n.condition.kind = kind_from_name(toks[i++]);
        expect("matches");
        if (i >= toks.size() || !is_visual_token(toks[i])) {
          throw ParseError("policy parse: expected visual demo token");
        }
        n.condition.value = toks[i++].substr(2);
        n.condition.presentation = Presentation::VisualDemo;
        any_demo = true;
      } else {
        expect("a");
        if (i >= toks.size()) throw ParseError("policy parse: truncated condition");
        const std::string value = toks[i++];
        bool found = false;
        for (AttrKind k : kAllKinds) {
          if (is_legal_value(k, value)) {
            n.condition.kind = k;
            found = true;
          }
        }
        if (!found) throw ParseError("policy parse: unknown value '" + value + "'");
        n.condition.value = value;
        expect("object");
      }
      expect(",");
      n.on_true = read_target();
      expect(";");
      expect("otherwise");
      expect(",");
      n.on_false = read_target();
      expect(".");
      nodes[n.id] = n;
    } else {
      ++i;
    }
  }
  if (nodes.empty()) throw ParseError("policy parse: no condition sections");
  for (auto& [id, n] : nodes) {
    if (id != static_cast<int>(tree.nodes.size())) throw ParseError("policy parse: non-dense ids");
    tree.nodes.push_back(n);
  }
  for (auto& [k, label] : leaf_labels) {
    if (k != static_cast<int>(tree.leaves.size())) throw ParseError("policy parse: non-dense cases");
    tree.leaves.push_back(Leaf{label});
  }
  tree.mode = any_demo ? PolicyMode::M : PolicyMode::T;
  int max_depth = 0;
  auto walk = [&](auto&& self, int node, int level) -> void {
    if (node < 0 || static_cast<std::size_t>(node) >= tree.nodes.size() || level > 64) {
      throw ParseError("policy parse: broken routing");
    }
    max_depth = std::max(max_depth, level);
    const auto& n = tree.nodes[static_cast<std::size_t>(node)];
    for (const ChildRef* ref : {&n.on_true, &n.on_false}) {
      if (!ref->leaf) self(self, ref->index, level + 1);
    }
  };
  walk(walk, 0, 1);
  tree.depth = max_depth;
  return tree;
}

/// Same structure and name, every condition resampled (override policies).
inline DecisionTree resample_conditions(const DecisionTree& tree, std::uint64_t seed,
                                        double visual_demo_prob = 0.5) {
  DecisionTree out = tree;
  Rng rng(derive_seed(seed, "override"));
  std::vector<std::set<AttrKind>> banned(tree.nodes.size());
  for (std::size_t i = 0; i < out.nodes.size(); ++i) {
    auto& n = out.nodes[i];
    n.condition = detail::sample_condition(rng, banned[i], out.mode, visual_demo_prob);
    if (!n.on_true.leaf) {
      banned[static_cast<std::size_t>(n.on_true.index)] =
          detail::banned_for_true_child(banned[i], n.condition.kind, out.scope);
    }
  }
  return out;
}

// ----------------------------------------------------------- structure study

/// Leaf count of the tree shape implied by `scope`, enumerated over edge
/// patterns (independent of the sampled kinds).
inline std::size_t structural_leaf_count(int depth, ConstraintScope scope) {
  // run = number of nodes on the current maximal TRUE chain including this one
  auto count = [&](auto&& self, int level, int run) -> std::size_t {
    std::size_t total = 0;
    // TRUE child
    if (level + 1 >= depth) {
      total += 1;
    } else if (scope == ConstraintScope::TrueChain && run + 1 > static_cast<int>(kAllKinds.size())) {
      total += 1;
    } else {
      total += self(self, level + 1, run + 1);
    }
    // FALSE child
    total += (level + 1 >= depth) ? 1 : self(self, level + 1, 1);
    return total;
  };
  return count(count, 0, 1);
}

// ------------------------------------------------------------- serialization

inline nlohmann::ordered_json condition_to_json(const AttributeCondition& c) {
  return {{"kind", std::string{kind_name(c.kind)}},
          {"value", c.value},
          {"presentation", c.presentation == Presentation::VisualDemo ? "visual_demo" : "textual"}};
}

inline AttributeCondition condition_from_json(const nlohmann::json& j) {
  AttributeCondition c;
  c.kind = kind_from_name(j.at("kind").get<std::string>());
  c.value = j.at("value").get<std::string>();
  const auto p = j.value("presentation", std::string{"textual"});
  c.presentation = p == "visual_demo" ? Presentation::VisualDemo : Presentation::Textual;
  return c;
}

inline nlohmann::ordered_json tree_to_json(const DecisionTree& t) {
  auto ref = [](const ChildRef& r) {
    return nlohmann::ordered_json{{r.leaf ? "leaf" : "node", r.index}};
  };
  nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
  for (const auto& n : t.nodes) {
    nodes.push_back({{"id", n.id},
                     {"condition", condition_to_json(n.condition)},
                     {"true", ref(n.on_true)},
                     {"false", ref(n.on_false)}});
  }
  nlohmann::ordered_json leaves = nlohmann::ordered_json::array();
  for (const auto& l : t.leaves) leaves.push_back(l.label);
  return {{"depth", t.depth},
          {"mode", std::string{mode_name(t.mode)}},
          {"scope", std::string{scope_name(t.scope)}},
          {"nodes", nodes},
          {"leaves", leaves}};
}

inline DecisionTree tree_from_json(const nlohmann::json& j) {
  auto ref = [](const nlohmann::json& r) {
    if (r.contains("leaf")) return ChildRef{true, r.at("leaf").get<int>()};
    return ChildRef{false, r.at("node").get<int>()};
  };
  DecisionTree t;
  t.depth = j.at("depth").get<int>();
  t.mode = mode_from_name(j.at("mode").get<std::string>());
  t.scope = scope_from_name(j.value("scope", std::string{"immediate_parent"}));
  for (const auto& n : j.at("nodes")) {
    DecisionNode node;
    node.id = n.at("id").get<int>();
    node.condition = condition_from_json(n.at("condition"));
    node.on_true = ref(n.at("true"));
    node.on_false = ref(n.at("false"));
    t.nodes.push_back(node);
  }
  for (const auto& l : j.at("leaves")) t.leaves.push_back(Leaf{l.get<std::string>()});
  return t;
}

/// Hash over every field of the tree, in storage order.
inline std::uint64_t tree_fingerprint(const DecisionTree& t) {
  std::uint64_t h = fnv1a("tree");
  auto mix = [&h](std::string_view s) { h = fnv1a(s, fnv1a("|", h)); };
  auto num = [&h](long long v) { h = splitmix64(h ^ static_cast<std::uint64_t>(v)); };
  num(t.depth);
  num(static_cast<int>(t.mode));
  num(static_cast<int>(t.scope));
  for (const auto& n : t.nodes) {
    num(n.id);
    num(static_cast<int>(n.condition.kind));
    mix(n.condition.value);
    num(static_cast<int>(n.condition.presentation));
    for (const ChildRef* c : {&n.on_true, &n.on_false}) num(c->leaf ? -1 - c->index : c->index);
  }
  for (const auto& l : t.leaves) mix(l.label);
  return h;
}

/// Sidecar metadata written next to the policy text.
inline nlohmann::ordered_json policy_to_json(const PolicyDoc& doc) {
  nlohmann::ordered_json assets = nlohmann::ordered_json::object();
  for (const auto& [k, c] : doc.visual_assets) assets[k] = condition_to_json(c);
  return {{"name", doc.name},
          {"mode", std::string{mode_name(doc.mode)}},
          {"depth", doc.tree.depth},
          {"visual_assets", assets},
          {"tree", tree_to_json(doc.tree)}};
}

inline PolicyDoc policy_from_json(const nlohmann::json& j) {
  const DecisionTree tree = tree_from_json(j.at("tree"));
  PolicyDoc doc = render_policy(tree, j.at("name").get<std::string>(),
                                mode_from_name(j.at("mode").get<std::string>()));
  if (j.contains("visual_assets")) {
    for (const auto& [k, v] : j.at("visual_assets").items()) {
      auto it = doc.visual_assets.find(k);
      if (it == doc.visual_assets.end() || !(it->second == condition_from_json(v))) {
        throw SchemaError("policy sidecar visual_assets disagree with tree for " + k);
      }
    }
  }
  return doc;
}

}  // namespace polint
