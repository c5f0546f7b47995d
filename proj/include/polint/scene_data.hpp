#pragma once

// Scene-graph surrogates, the exact policy oracle, templated CoT synthesis and
// JSONL dataset emission.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/ontology.hpp"
#include "polint/policy_gen.hpp"
#include "polint/vocab.hpp"

namespace polint {

struct SceneObject {
  std::string shape;
  std::string color;
  std::string size;
  std::string material;

  const std::string& get(AttrKind k) const {
    switch (k) {
      case AttrKind::Shape: return shape;
      case AttrKind::Color: return color;
      case AttrKind::Size: return size;
      case AttrKind::Material: return material;
    }
    return shape;
  }
  std::string& get(AttrKind k) { return const_cast<std::string&>(std::as_const(*this).get(k)); }

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Scene {
  std::vector<SceneObject> objects;

  friend bool operator==(const Scene&, const Scene&) = default;
};

inline constexpr int kMinSceneObjects = 3;
inline constexpr int kMaxSceneObjects = 10;

inline Scene sample_scene(std::uint64_t seed, int min_objects = kMinSceneObjects,
                          int max_objects = kMaxSceneObjects) {
  if (min_objects < 1 || max_objects < min_objects) {
    throw GenerationError("sample_scene: need 1 <= min_objects <= max_objects");
  }
  Rng rng(derive_seed(seed, "scene"));
  Scene s;
  const int n = rng.between(min_objects, max_objects);
  s.objects.resize(static_cast<std::size_t>(n));
  for (auto& o : s.objects) {
    for (AttrKind k : kAllKinds) {
      const auto& vals = values_of(k);
      o.get(k) = vals[rng.below(vals.size())];
    }
  }
  return s;
}

/// Order-insensitive serialization used for train/test disjointness.
inline std::string canonical_scene(const Scene& s) {
  std::vector<std::string> objs;
  objs.reserve(s.objects.size());
  for (const auto& o : s.objects) objs.push_back(o.shape + "/" + o.color + "/" + o.size + "/" + o.material);
  std::sort(objs.begin(), objs.end());
  std::string out;
  for (const auto& o : objs) {
    out += o;
    out += ';';
  }
  return out;
}

inline nlohmann::ordered_json scene_to_json(const Scene& s) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& o : s.objects) {
    arr.push_back({{"shape", o.shape}, {"color", o.color}, {"size", o.size}, {"material", o.material}});
  }
  return arr;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  for (const auto& o : j) {
    SceneObject obj{o.at("shape").get<std::string>(), o.at("color").get<std::string>(),
                    o.at("size").get<std::string>(), o.at("material").get<std::string>()};
    for (AttrKind k : kAllKinds) {
      if (!is_legal_value(k, obj.get(k))) throw SchemaError("scene: illegal value '" + obj.get(k) + "'");
    }
    s.objects.push_back(std::move(obj));
  }
  return s;
}

/// True iff some object carries the condition's value for its kind.
inline bool eval_condition(const Scene& scene, const AttributeCondition& c) {
  return std::any_of(scene.objects.begin(), scene.objects.end(),
                     [&](const SceneObject& o) { return o.get(c.kind) == c.value; });
}

// ------------------------------------------------------------------ oracle

struct TraceStep {
  int node_id = 0;
  AttributeCondition condition;
  bool verdict = false;

  friend bool operator==(const TraceStep&, const TraceStep&) = default;
};

struct Trace {
  std::vector<TraceStep> steps;
  std::string outcome;
  std::uint64_t tree_fingerprint = 0;
};

inline Trace trace(const DecisionTree& tree, const Scene& scene) {
  Trace tr;
  tr.tree_fingerprint = tree_fingerprint(tree);
  int node = 0;
  for (std::size_t guard = 0; guard <= tree.nodes.size(); ++guard) {
    const auto& n = tree.nodes.at(static_cast<std::size_t>(node));
    const bool verdict = eval_condition(scene, n.condition);
    tr.steps.push_back({n.id, n.condition, verdict});
    const ChildRef& next = verdict ? n.on_true : n.on_false;
    if (next.leaf) {
      tr.outcome = tree.leaves.at(static_cast<std::size_t>(next.index)).label;
      return tr;
    }
    node = next.index;
  }
  throw ValidationError("trace: cycle in decision tree");
}

/// Output tokens "<think> Condition i: <value> object? yes|no ... </think>
/// \boxed{ Case k }".
inline Tokens synth_cot(const Trace& tr, const PolicyDoc& doc) {
  if (tr.tree_fingerprint != tree_fingerprint(doc.tree)) {
    throw ValidationError("synth_cot: trace was not produced from policy '" + doc.name + "'");
  }
  Tokens out{std::string{special::kThinkOpen}};
  for (const auto& s : tr.steps) {
    out.insert(out.end(), {"Condition", std::to_string(s.node_id), ":", s.condition.value, "object", "?",
                           s.verdict ? "yes" : "no"});
  }
  out.emplace_back(special::kThinkClose);
  out.emplace_back(special::kBoxOpen);
  for (auto& t : tokenize(tr.outcome)) out.push_back(std::move(t));
  out.emplace_back(special::kBoxClose);
  return out;
}

/// Answer-only target used by Direct SFT: an empty think block and the box.
inline Tokens direct_answer_tokens(const std::string& answer) {
  Tokens out{std::string{special::kThinkOpen}, std::string{special::kThinkClose},
             std::string{special::kBoxOpen}};
  for (auto& t : tokenize(answer)) out.push_back(std::move(t));
  out.emplace_back(special::kBoxClose);
  return out;
}

inline Tokens scene_tokens(const Scene& s) {
  Tokens out{std::string{special::kSceneOpen}};
  for (const auto& o : s.objects) {
    for (AttrKind k : kAllKinds) out.push_back(visual_token(o.get(k)));
  }
  out.emplace_back(special::kSceneClose);
  return out;
}

inline Scene parse_scene_tokens(const Tokens& toks) {
  auto open = std::find(toks.begin(), toks.end(), special::kSceneOpen);
  auto close = std::find(open, toks.end(), special::kSceneClose);
  if (open == toks.end() || close == toks.end()) throw ParseError("no scene block in prompt");
  const auto n = static_cast<std::size_t>(std::distance(open, close) - 1);
  if (n % kAllKinds.size() != 0) throw ParseError("scene block has a partial object");
  Scene s;
  for (auto it = open + 1; it != close; it += static_cast<long>(kAllKinds.size())) {
    SceneObject o;
    for (std::size_t k = 0; k < kAllKinds.size(); ++k) {
      const auto& t = *(it + static_cast<long>(k));
      if (!is_visual_token(t)) throw ParseError("scene block holds non-visual token '" + t + "'");
      o.get(kAllKinds[k]) = t.substr(2);
    }
    s.objects.push_back(std::move(o));
  }
  return s;
}

inline std::string query_text(const std::string& policy_name) {
  return "Follow policy " + policy_name + ". Which case applies?";
}

// ---------------------------------------------------------------- records

struct DatasetRecord {
  std::string policy_id;
  Scene scene;
  std::string query;
  Tokens tokens_with_policy;
  Tokens tokens_without_policy;
  std::vector<bool> visual_mask;
  std::optional<Tokens> cot;
  std::string answer;
};

inline std::size_t policy_prefix_length(const DatasetRecord& r) {
  return r.tokens_with_policy.size() - r.tokens_without_policy.size();
}

inline bool suffix_property_holds(const DatasetRecord& r) {
  if (r.tokens_without_policy.size() > r.tokens_with_policy.size()) return false;
  return std::equal(r.tokens_without_policy.begin(), r.tokens_without_policy.end(),
                    r.tokens_with_policy.begin() + static_cast<long>(policy_prefix_length(r)));
}

/// Assembles a record: [policy][scene][query]. visual_mask is true exactly on
/// scene object tokens and visual-demo tokens.
inline DatasetRecord make_record(const PolicyDoc& doc, const Tokens& policy_toks, const Scene& scene,
                                 bool with_cot) {
  DatasetRecord r;
  r.policy_id = doc.name;
  r.scene = scene;
  r.query = query_text(doc.name);
  const Trace tr = trace(doc.tree, scene);
  r.answer = tr.outcome;
  Tokens tail = scene_tokens(scene);
  for (auto& t : tokenize(r.query)) tail.push_back(std::move(t));
  r.tokens_with_policy.reserve(policy_toks.size() + tail.size());
  r.tokens_with_policy = policy_toks;
  r.tokens_with_policy.insert(r.tokens_with_policy.end(), tail.begin(), tail.end());
  r.tokens_without_policy = std::move(tail);
  r.visual_mask.resize(r.tokens_with_policy.size());
  for (std::size_t i = 0; i < r.tokens_with_policy.size(); ++i) {
    r.visual_mask[i] = is_visual_token(r.tokens_with_policy[i]);
  }
  if (with_cot) r.cot = synth_cot(tr, doc);
  return r;
}

namespace detail {

inline void append_json_string(std::string& out, std::string_view s) {
  out += '"';
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  out += '"';
}

inline void append_token_items(std::string& out, const Tokens& toks, std::size_t from = 0) {
  for (std::size_t i = from; i < toks.size(); ++i) {
    if (i > from) out += ',';
    append_json_string(out, toks[i]);
  }
}

}  // namespace detail

/// Serializes one JSONL line. Hand-rolled so the policy prefix (identical for
/// every record of a policy) costs one string copy instead of a JSON tree.
inline std::string record_to_jsonl(const DatasetRecord& r, const std::string* policy_items = nullptr,
                                   const std::string* policy_mask_items = nullptr) {
  std::string out;
  out.reserve(r.tokens_with_policy.size() * 12 + 256);
  out += "{\"policy_id\":";
  detail::append_json_string(out, r.policy_id);
  out += ",\"scene\":";
  out += scene_to_json(r.scene).dump();
  out += ",\"query\":";
  detail::append_json_string(out, r.query);
  const std::size_t prefix = policy_prefix_length(r);
  out += ",\"tokens_with_policy\":[";
  if (policy_items && prefix > 0) {
    out += *policy_items;
    if (!r.tokens_without_policy.empty()) out += ',';
    detail::append_token_items(out, r.tokens_with_policy, prefix);
  } else {
    detail::append_token_items(out, r.tokens_with_policy);
  }
  out += "],\"tokens_without_policy\":[";
  detail::append_token_items(out, r.tokens_without_policy);
  out += "],\"visual_mask\":[";
  std::size_t start = 0;
  if (policy_mask_items && prefix > 0) {
    out += *policy_mask_items;
    start = prefix;
    if (start < r.visual_mask.size()) out += ',';
  }
  for (std::size_t i = start; i < r.visual_mask.size(); ++i) {
    if (i > start) out += ',';
    out += r.visual_mask[i] ? "true" : "false";
  }
  out += "],\"cot\":";
  if (r.cot) {
    out += '[';
    detail::append_token_items(out, *r.cot);
    out += ']';
  } else {
    out += "null";
  }
  out += ",\"answer\":";
  detail::append_json_string(out, r.answer);
  out += '}';
  return out;
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.policy_id = j.at("policy_id").get<std::string>();
  r.scene = scene_from_json(j.at("scene"));
  r.query = j.at("query").get<std::string>();
  r.tokens_with_policy = j.at("tokens_with_policy").get<Tokens>();
  r.tokens_without_policy = j.at("tokens_without_policy").get<Tokens>();
  r.visual_mask = j.at("visual_mask").get<std::vector<bool>>();
  if (j.contains("cot") && !j.at("cot").is_null()) r.cot = j.at("cot").get<Tokens>();
  r.answer = j.at("answer").get<std::string>();
  if (r.visual_mask.size() != r.tokens_with_policy.size()) {
    throw SchemaError("record: visual_mask length differs from tokens_with_policy");
  }
  return r;
}

inline std::vector<DatasetRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// ------------------------------------------------------ balanced sampling

/// Scene-level predicate of one root-to-leaf path: every object's values lie
/// in `allowed`, and each value in `required` occurs somewhere.
struct LeafPredicate {
  std::array<std::vector<std::string>, 4> allowed;
  std::array<std::vector<std::string>, 4> required;

  bool satisfiable(int max_objects) const {
    for (std::size_t k = 0; k < 4; ++k) {
      if (allowed[k].empty()) return false;
      for (const auto& v : required[k]) {
        if (std::find(allowed[k].begin(), allowed[k].end(), v) == allowed[k].end()) return false;
      }
      if (static_cast<int>(required[k].size()) > max_objects) return false;
    }
    return true;
  }
};

inline LeafPredicate leaf_predicate(const DecisionTree& tree, const std::vector<std::pair<int, bool>>& path) {
  LeafPredicate p;
  std::array<std::set<std::string>, 4> excluded, required;
  for (auto [node, verdict] : path) {
    const auto& c = tree.nodes[static_cast<std::size_t>(node)].condition;
    const auto k = static_cast<std::size_t>(c.kind);
    (verdict ? required[k] : excluded[k]).insert(c.value);
  }
  for (std::size_t k = 0; k < 4; ++k) {
    for (const auto& v : values_of(kAllKinds[k])) {
      if (!excluded[k].count(v)) p.allowed[k].push_back(v);
    }
    p.required[k].assign(required[k].begin(), required[k].end());
  }
  return p;
}

/// Draws a scene from the scene prior conditioned on the leaf predicate:
/// the object count is drawn with weight q^n (q = chance one object avoids
/// every excluded value), objects are drawn from the allowed values, and the
/// existence requirements are enforced by rejection. Returns nullopt after
/// `max_tries` rejections.
inline std::optional<Scene> sample_scene_for_leaf(Rng& rng, const LeafPredicate& pred, int min_objects,
                                                  int max_objects, int max_tries, int* tries_used = nullptr) {
  double q = 1.0;
  for (std::size_t k = 0; k < 4; ++k) {
    q *= static_cast<double>(pred.allowed[k].size()) / static_cast<double>(values_of(kAllKinds[k]).size());
  }
  std::vector<double> weights;
  double total = 0.0;
  for (int n = min_objects; n <= max_objects; ++n) {
    weights.push_back(std::pow(q, n - min_objects));
    total += weights.back();
  }
  for (int t = 0; t < max_tries; ++t) {
    if (tries_used) *tries_used = t + 1;
    double u = rng.uniform() * total;
    int n = max_objects;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (u < weights[i]) {
        n = min_objects + static_cast<int>(i);
        break;
      }
      u -= weights[i];
    }
    Scene s;
    s.objects.resize(static_cast<std::size_t>(n));
    for (auto& o : s.objects) {
      for (std::size_t k = 0; k < 4; ++k) {
        o.get(kAllKinds[k]) = pred.allowed[k][rng.below(pred.allowed[k].size())];
      }
    }
    bool ok = true;
    for (std::size_t k = 0; k < 4 && ok; ++k) {
      for (const auto& v : pred.required[k]) {
        if (!eval_condition(s, AttributeCondition{kAllKinds[k], v, Presentation::Textual})) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return s;
  }
  return std::nullopt;
}

// ------------------------------------------------------------ vocabulary

/// Words an override render may use that the original render might not
/// (visual-demo phrasing appears only when a condition is drawn that way).
inline constexpr std::string_view kPolicyTemplateWords = "a an object whose matches";

inline void add_policy_vocab(VocabBuilder& vb, const PolicyDoc& doc) {
  const Tokens toks = policy_tokens(doc);
  std::vector<bool> mask(toks.size());
  for (std::size_t i = 0; i < toks.size(); ++i) mask[i] = is_visual_token(toks[i]);
  vb.add(toks, &mask);
  vb.add(tokenize(kPolicyTemplateWords));
}

/// The vocabulary of a ClevrPolicy-style dataset: policies, record prompts,
/// CoT and answer-only targets.
inline Vocab clevr_vocab(const std::vector<PolicyDoc>& policies,
                         const std::vector<const std::vector<DatasetRecord>*>& splits) {
  VocabBuilder vb;
  for (const auto& doc : policies) add_policy_vocab(vb, doc);
  for (const auto* split : splits) {
    for (const auto& r : *split) {
      std::vector<bool> mask(r.tokens_without_policy.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = is_visual_token(r.tokens_without_policy[i]);
      vb.add(r.tokens_without_policy, &mask);
      if (r.cot) vb.add(*r.cot);
      vb.add(direct_answer_tokens(r.answer));
    }
  }
  return vb.build();
}

// ---------------------------------------------------------- generation

struct DatasetOptions {
  int per_policy_train = 2000;
  int per_policy_test = 2000;
  bool balance = true;
  std::uint64_t seed = 0;
  int min_objects = kMinSceneObjects;
  int max_objects = kMaxSceneObjects;
  double cot_fraction = 1.0;  // share of train records carrying a CoT target
  int retry_cap = 10000;
  unsigned workers = 1;
};

struct GeneratedSplit {
  std::vector<DatasetRecord> records;
};

struct GeneratedDataset {
  GeneratedSplit train;
  GeneratedSplit test;
  std::map<std::string, std::vector<std::string>> reachable_outcomes;  // per policy
};

namespace detail {

inline Scene draw_record_scene(const PolicyDoc& doc, const std::vector<LeafPredicate>& preds,
                               const std::vector<std::size_t>& reachable, const DatasetOptions& opt,
                               std::size_t target_slot, std::uint64_t seed,
                               const std::unordered_set<std::string>* forbidden) {
  Rng rng(seed);
  int budget = opt.retry_cap;
  if (opt.balance) {
    const std::size_t leaf = reachable[target_slot];
    while (budget > 0) {
      int used = 0;
      auto scene = sample_scene_for_leaf(rng, preds[leaf], opt.min_objects, opt.max_objects, budget, &used);
      budget -= used;
      if (!scene) break;
      if (trace(doc.tree, *scene).outcome != doc.tree.leaves[leaf].label) {
        throw GenerationError("balanced sampler produced a scene outside its target leaf");
      }
      if (forbidden && forbidden->count(canonical_scene(*scene))) continue;
      return *scene;
    }
    throw GenerationError("policy " + doc.name + ": balance retry cap exceeded for outcome '" +
                          doc.tree.leaves[leaf].label + "'");
  }
  for (int t = 0; t < budget; ++t) {
    Scene s = sample_scene(rng.next_u64(), opt.min_objects, opt.max_objects);
    if (forbidden && forbidden->count(canonical_scene(s))) continue;
    return s;
  }
  throw GenerationError("policy " + doc.name + ": could not draw a scene disjoint from train");
}

}  // namespace detail

/// Generates train/test records for each policy. Record i of a policy uses
/// seed derive_seed(seed, policy, split, i); with balancing on it targets the
/// reachable outcome at a seeded permutation slot so per-policy outcome counts
/// differ by at most one. Output order is policy-major, index order.
inline GeneratedDataset generate_dataset(const std::vector<PolicyDoc>& policies, const DatasetOptions& opt) {
  if (policies.empty()) throw GenerationError("gen_dataset: need at least one policy");
  if (opt.per_policy_train < 1 || opt.per_policy_test < 1) {
    throw GenerationError("gen_dataset: per-policy counts must be >= 1");
  }
  GeneratedDataset out;
  std::set<std::string> names;
  for (const auto& doc : policies) {
    if (!names.insert(doc.name).second) throw GenerationError("duplicate policy name " + doc.name);
    const auto paths = leaf_paths(doc.tree);
    std::vector<LeafPredicate> preds;
    std::vector<std::size_t> reachable;
    for (std::size_t l = 0; l < paths.size(); ++l) {
      preds.push_back(leaf_predicate(doc.tree, paths[l]));
      if (preds.back().satisfiable(opt.max_objects)) {
        reachable.push_back(l);
        out.reachable_outcomes[doc.name].push_back(doc.tree.leaves[l].label);
      }
    }
    if (reachable.empty()) throw GenerationError("policy " + doc.name + " has no reachable outcome");
    const Tokens ptoks = policy_tokens(doc);

    auto run_split = [&](const std::string& split, int count, const std::unordered_set<std::string>* forbidden,
                         double cot_fraction) {
      const auto n = static_cast<std::size_t>(count);
      const auto target_perm = seeded_permutation(n, derive_seed(opt.seed, doc.name, split, "targets"));
      const auto cot_perm = seeded_permutation(n, derive_seed(opt.seed, doc.name, split, "cot"));
      const auto n_cot = static_cast<std::size_t>(std::llround(cot_fraction * static_cast<double>(n)));
      std::vector<DatasetRecord> recs(n);
      parallel_for(n, opt.workers, [&](std::size_t i) {
        const Scene scene = detail::draw_record_scene(doc, preds, reachable, opt, target_perm[i] % reachable.size(),
                                                      derive_seed(opt.seed, doc.name, split, i), forbidden);
        recs[i] = make_record(doc, ptoks, scene, cot_perm[i] < n_cot);
      });
      return recs;
    };

    auto train = run_split("train", opt.per_policy_train, nullptr, opt.cot_fraction);
    std::unordered_set<std::string> train_scenes;
    for (const auto& r : train) train_scenes.insert(canonical_scene(r.scene));
    auto test = run_split("test", opt.per_policy_test, &train_scenes, 1.0);
    for (auto& r : train) out.train.records.push_back(std::move(r));
    for (auto& r : test) out.test.records.push_back(std::move(r));
  }
  return out;
}

struct DatasetFiles {
  std::filesystem::path train;
  std::filesystem::path test;
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> policy_sidecars;
  std::uint64_t vocab_hash = 0;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

inline void write_records(const std::filesystem::path& path, const std::vector<DatasetRecord>& recs,
                          const std::map<std::string, std::pair<std::string, std::string>>& prefixes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& r : recs) {
    auto it = prefixes.find(r.policy_id);
    const std::string* items = it == prefixes.end() ? nullptr : &it->second.first;
    const std::string* mask = it == prefixes.end() ? nullptr : &it->second.second;
    out << record_to_jsonl(r, items, mask) << '\n';
  }
}

/// Emits train.jsonl, test.jsonl, policies/<name>.{txt,json} and
/// manifest.json under `dir`.
inline DatasetFiles gen_dataset(const std::vector<PolicyDoc>& policies, const DatasetOptions& opt,
                                const std::filesystem::path& dir) {
  const GeneratedDataset data = generate_dataset(policies, opt);
  std::filesystem::create_directories(dir / "policies");
  DatasetFiles files;
  files.train = dir / "train.jsonl";
  files.test = dir / "test.jsonl";
  files.manifest = dir / "manifest.json";

  std::map<std::string, std::pair<std::string, std::string>> prefixes;
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  for (const auto& doc : policies) {
    const Tokens ptoks = policy_tokens(doc);
    std::string items, mask;
    detail::append_token_items(items, ptoks);
    for (std::size_t i = 0; i < ptoks.size(); ++i) {
      if (i) mask += ',';
      mask += is_visual_token(ptoks[i]) ? "true" : "false";
    }
    prefixes[doc.name] = {std::move(items), std::move(mask)};
    const auto txt = dir / "policies" / (doc.name + ".txt");
    const auto side = dir / "policies" / (doc.name + ".json");
    write_text_file(txt, doc.text());
    write_text_file(side, policy_to_json(doc).dump(2) + "\n");
    files.policy_sidecars.push_back(side);
    nlohmann::ordered_json reach = data.reachable_outcomes.at(doc.name);
    plist.push_back({{"name", doc.name},
                     {"sidecar", "policies/" + doc.name + ".json"},
                     {"depth", doc.tree.depth},
                     {"mode", std::string{mode_name(doc.mode)}},
                     {"outcomes", enumerate_outcomes(doc.tree)},
                     {"reachable_outcomes", reach}});
  }
  files.vocab_hash = clevr_vocab(policies, {&data.train.records, &data.test.records}).hash();

  write_records(files.train, data.train.records, prefixes);
  write_records(files.test, data.test.records, prefixes);

  nlohmann::ordered_json manifest{{"kind", "clevr"},
                                  {"policies", plist},
                                  {"seed", opt.seed},
                                  {"per_policy_train", opt.per_policy_train},
                                  {"per_policy_test", opt.per_policy_test},
                                  {"balance", opt.balance},
                                  {"min_objects", opt.min_objects},
                                  {"max_objects", opt.max_objects},
                                  {"cot_fraction", opt.cot_fraction},
                                  {"train_records", data.train.records.size()},
                                  {"test_records", data.test.records.size()},
                                  {"train", "train.jsonl"},
                                  {"test", "test.jsonl"},
                                  {"vocab_hash", hex64(files.vocab_hash)}};
  write_text_file(files.manifest, manifest.dump(2) + "\n");
  return files;
}

// ---------------------------------------------------------------- stats

struct PromptStats {
  std::size_t records = 0;
  std::uint64_t total_with_policy = 0;
  std::uint64_t total_without_policy = 0;
  double mean_with_policy = 0.0;
  double mean_without_policy = 0.0;
  double reduction = 0.0;  // 1 - mean(without) / mean(with)
};

inline PromptStats prompt_stats_from_lengths(const std::vector<std::pair<std::size_t, std::size_t>>& lens) {
  if (lens.empty()) throw ValidationError("prompt_stats: empty dataset");
  PromptStats s;
  s.records = lens.size();
  for (auto [with, without] : lens) {
    s.total_with_policy += with;
    s.total_without_policy += without;
  }
  s.mean_with_policy = static_cast<double>(s.total_with_policy) / static_cast<double>(s.records);
  s.mean_without_policy = static_cast<double>(s.total_without_policy) / static_cast<double>(s.records);
  s.reduction = 1.0 - s.mean_without_policy / s.mean_with_policy;
  return s;
}

/// Token counts with and without the in-context policy over a JSONL file.
inline PromptStats prompt_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<std::pair<std::size_t, std::size_t>> lens;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    lens.emplace_back(j.at("tokens_with_policy").size(), j.at("tokens_without_policy").size());
  }
  return prompt_stats_from_lengths(lens);
}

inline nlohmann::ordered_json stats_to_json(const PromptStats& s) {
  return {{"records", s.records},
          {"total_tokens_with_policy", s.total_with_policy},
          {"total_tokens_without_policy", s.total_without_policy},
          {"mean_tokens_with_policy", s.mean_with_policy},
          {"mean_tokens_without_policy", s.mean_without_policy},
          {"reduction", s.reduction}};
}

// --------------------------------------------------------------- manifest

struct ClevrManifest {
  std::filesystem::path dir;
  std::vector<PolicyDoc> policies;
  std::filesystem::path train;
  std::filesystem::path test;
  std::string vocab_hash;
  nlohmann::json raw;

  const PolicyDoc& policy(const std::string& name) const {
    for (const auto& p : policies) {
      if (p.name == name) return p;
    }
    throw ValidationError("manifest has no policy '" + name + "'");
  }
};

inline ClevrManifest load_clevr_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ValidationError("cannot open manifest " + manifest_path.string());
  ClevrManifest m;
  m.raw = nlohmann::json::parse(in);
  m.dir = manifest_path.parent_path();
  for (const auto& p : m.raw.at("policies")) {
    std::ifstream side(m.dir / p.at("sidecar").get<std::string>());
    if (!side) throw ValidationError("missing policy sidecar for " + p.at("name").get<std::string>());
    m.policies.push_back(policy_from_json(nlohmann::json::parse(side)));
  }
  m.train = m.dir / m.raw.value("train", std::string{"train.jsonl"});
  m.test = m.dir / m.raw.value("test", std::string{"test.jsonl"});
  m.vocab_hash = m.raw.value("vocab_hash", std::string{});
  return m;
}

}  // namespace polint
