#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/ontology.hpp"

namespace polint {

namespace special {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kBos = "<bos>";
inline constexpr std::string_view kSceneOpen = "<scene>";
inline constexpr std::string_view kSceneClose = "</scene>";
inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kBoxOpen = "\\boxed{";
inline constexpr std::string_view kBoxClose = "}";
}  // namespace special

/// Closed token vocabulary. Specials take ids 0..7 in a fixed order; every
/// other token follows in lexicographic order.
class Vocab {
 public:
  static const Tokens& specials() {
    static const Tokens s{std::string{special::kPad},        std::string{special::kBos},
                          std::string{special::kSceneOpen},  std::string{special::kSceneClose},
                          std::string{special::kThinkOpen},  std::string{special::kThinkClose},
                          std::string{special::kBoxOpen},    std::string{special::kBoxClose}};
    return s;
  }

  Vocab() = default;

  Vocab(Tokens tokens, std::vector<bool> visual) : tokens_(std::move(tokens)), visual_(std::move(visual)) {
    if (tokens_.size() != visual_.size()) throw ValidationError("vocab: token/flag length mismatch");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
        throw ValidationError("vocab: duplicate token '" + tokens_[i] + "'");
      }
    }
    for (const auto& s : specials()) {
      if (!index_.count(s)) throw ValidationError("vocab: missing special '" + s + "'");
    }
  }

  std::size_t size() const { return tokens_.size(); }

  std::optional<int> find(std::string_view tok) const {
    auto it = index_.find(std::string{tok});
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  int id(std::string_view tok) const {
    auto found = find(tok);
    if (!found) throw ValidationError("unknown token '" + std::string{tok} + "'");
    return *found;
  }

  std::vector<int> encode(const Tokens& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  Tokens decode(std::span<const int> ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool visual(int id) const { return visual_.at(static_cast<std::size_t>(id)); }

  int pad() const { return id(special::kPad); }
  int bos() const { return id(special::kBos); }
  int box_open() const { return id(special::kBoxOpen); }
  int box_close() const { return id(special::kBoxClose); }

  /// FNV-1a over tokens and visual flags in id order.
  std::uint64_t hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      h = fnv1a(tokens_[i], h);
      h = fnv1a(visual_[i] ? std::string_view{"\x01"} : std::string_view{"\x02"}, h);
    }
    return h;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json visual = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (visual_[i]) visual.push_back(tokens_[i]);
    }
    return {{"hash", hex64(hash())}, {"tokens", tokens_}, {"visual", visual}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    Tokens toks = j.at("tokens").get<Tokens>();
    std::set<std::string> vis;
    for (const auto& v : j.at("visual")) vis.insert(v.get<std::string>());
    std::vector<bool> flags(toks.size());
    for (std::size_t i = 0; i < toks.size(); ++i) flags[i] = vis.count(toks[i]) > 0;
    Vocab v(std::move(toks), std::move(flags));
    if (j.contains("hash") && j.at("hash").get<std::string>() != hex64(v.hash())) {
      throw ValidationError("vocab file hash does not match its contents");
    }
    return v;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_ && a.visual_ == b.visual_;
  }

 private:
  Tokens tokens_;
  std::vector<bool> visual_;
  std::unordered_map<std::string, int> index_;
};

/// Collects tokens (with optional visual masks) and builds a deterministic
/// Vocab. The ontology is always included.
class VocabBuilder {
 public:
  VocabBuilder() {
    for (const auto& t : ontology_tokens()) add_token(t, is_visual_token(t));
  }

  /// Without a mask the tokens' visual flags are left to other occurrences.
  void add(const Tokens& toks, const std::vector<bool>* mask = nullptr) {
    if (mask && mask->size() != toks.size()) throw ValidationError("vocab: mask length mismatch");
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (mask) {
        add_token(toks[i], (*mask)[i]);
      } else {
        seen_.emplace(toks[i], Flag::Unknown);
      }
    }
    any_ = any_ || !toks.empty();
  }

  void add_token(const std::string& tok, bool visual) {
    const Flag f = visual ? Flag::Visual : Flag::Text;
    auto [it, inserted] = seen_.emplace(tok, f);
    if (inserted || it->second == f) return;
    if (it->second == Flag::Unknown) {
      it->second = f;
      return;
    }
    throw ValidationError("vocab: token '" + tok + "' is both visual and textual in the corpus");
  }

  bool has_corpus() const { return any_; }

  Vocab build() const {
    Tokens toks = Vocab::specials();
    std::vector<bool> flags(toks.size(), false);
    std::set<std::string> specials(toks.begin(), toks.end());
    for (const auto& [tok, vis] : seen_) {  // std::map iterates lexicographically
      if (specials.count(tok)) continue;
      toks.push_back(tok);
      flags.push_back(vis == Flag::Visual);
    }
    return Vocab(std::move(toks), std::move(flags));
  }

 private:
  enum class Flag : std::uint8_t { Unknown, Text, Visual };
  std::map<std::string, Flag> seen_;
  bool any_ = false;
};

/// Builds the vocabulary from JSONL dataset files. Token arrays are read from
/// tokens_with_policy (with visual_mask), tokens_without_policy, cot and
/// target fields.
inline Vocab build_vocab(const std::vector<std::filesystem::path>& files) {
  VocabBuilder builder;
  for (const auto& path : files) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open corpus file " + path.string());
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.contains("tokens_with_policy")) {
        const auto toks = j.at("tokens_with_policy").get<Tokens>();
        std::vector<bool> mask;
        if (j.contains("visual_mask")) mask = j.at("visual_mask").get<std::vector<bool>>();
        builder.add(toks, mask.empty() ? nullptr : &mask);
      }
      for (const char* field : {"tokens_without_policy", "cot", "target"}) {
        if (j.contains(field) && j.at(field).is_array()) builder.add(j.at(field).get<Tokens>());
      }
    }
  }
  if (!builder.has_corpus()) throw ValidationError("build_vocab: empty corpus");
  return builder.build();
}

}  // namespace polint
