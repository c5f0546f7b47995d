#pragma once

// Versioned tool schemas, user-conditional version rules, tool-call parsing,
// argument scoring and a synthetic GTA-like dataset generator.

#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/vocab.hpp"

namespace polint {

enum class MetricKind : std::uint8_t { ExactMatch, TextSim, Expression, BBox };

inline std::string_view metric_name(MetricKind k) {
  switch (k) {
    case MetricKind::ExactMatch: return "ExactMatch";
    case MetricKind::TextSim: return "TextSim";
    case MetricKind::Expression: return "Expression";
    case MetricKind::BBox: return "BBox";
  }
  return "ExactMatch";
}

inline MetricKind metric_from_name(std::string_view s) {
  for (auto k : {MetricKind::ExactMatch, MetricKind::TextSim, MetricKind::Expression, MetricKind::BBox}) {
    if (metric_name(k) == s) return k;
  }
  throw ConfigError("unknown metric kind '" + std::string{s} + "'");
}

/// Argument-name to metric-kind table used when a spec does not list an arg.
inline std::map<std::string, MetricKind> default_metric_table() {
  std::map<std::string, MetricKind> t;
  for (const char* n : {"position", "color", "image", "k", "top1"}) t[n] = MetricKind::ExactMatch;
  for (const char* n : {"attribute", "text", "query", "command", "annotation", "keywords", "instruction"}) {
    t[n] = MetricKind::TextSim;
  }
  t["expression"] = MetricKind::Expression;
  t["bbox"] = MetricKind::BBox;
  return t;
}

struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  friend bool operator==(const BBox&, const BBox&) = default;
};

using ArgValue = std::variant<std::string, double, BBox>;

struct ArgSpec {
  std::string name;
  MetricKind kind = MetricKind::ExactMatch;
};

struct ToolSpec {
  std::string base;
  std::string version;
  std::string description;
  std::vector<ArgSpec> args;

  std::string full_name() const { return base + "_" + version; }
};

struct ToolRule {
  std::string base;
  std::map<std::string, std::string> predicate;
  std::string version;
};

using Profile = std::map<std::string, std::string>;

struct ToolRuleSet {
  std::vector<ToolSpec> tools;
  std::vector<ToolRule> rules;
  std::map<std::string, std::string> defaults;
  std::map<std::string, MetricKind> metric_table = default_metric_table();

  const ToolSpec* find(const std::string& full_name) const {
    for (const auto& t : tools) {
      if (t.full_name() == full_name) return &t;
    }
    return nullptr;
  }

  std::vector<std::string> bases() const {
    std::vector<std::string> out;
    for (const auto& t : tools) {
      if (std::find(out.begin(), out.end(), t.base) == out.end()) out.push_back(t.base);
    }
    return out;
  }
};

inline void validate_rule_set(const ToolRuleSet& rs) {
  std::set<std::string> names;
  for (const auto& t : rs.tools) {
    if (!names.insert(t.full_name()).second) throw ConfigError("duplicate tool " + t.full_name());
  }
  for (const auto& r : rs.rules) {
    if (!rs.defaults.count(r.base)) throw ConfigError("rule references tool '" + r.base + "' without a default");
    if (!rs.find(r.base + "_" + r.version)) throw ConfigError("rule selects unknown version " + r.base + "_" + r.version);
  }
  for (const auto& [base, v] : rs.defaults) {
    if (!rs.find(base + "_" + v)) throw ConfigError("default selects unknown version " + base + "_" + v);
  }
}

inline nlohmann::ordered_json rule_set_to_json(const ToolRuleSet& rs) {
  nlohmann::ordered_json tools = nlohmann::ordered_json::array();
  for (const auto& t : rs.tools) {
    nlohmann::ordered_json args = nlohmann::ordered_json::array();
    for (const auto& a : t.args) args.push_back({{"name", a.name}, {"kind", std::string{metric_name(a.kind)}}});
    tools.push_back({{"base", t.base}, {"version", t.version}, {"description", t.description}, {"args", args}});
  }
  nlohmann::ordered_json rules = nlohmann::ordered_json::array();
  for (const auto& r : rs.rules) {
    nlohmann::ordered_json pred = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.predicate) pred[k] = v;
    rules.push_back({{"base", r.base}, {"predicate", pred}, {"version", r.version}});
  }
  nlohmann::ordered_json defaults = nlohmann::ordered_json::object();
  for (const auto& [k, v] : rs.defaults) defaults[k] = v;
  nlohmann::ordered_json table = nlohmann::ordered_json::object();
  for (const auto& [k, v] : rs.metric_table) table[k] = std::string{metric_name(v)};
  return {{"tools", tools}, {"rules", rules}, {"defaults", defaults}, {"metric_table", table}};
}

inline ToolRuleSet rule_set_from_json(const nlohmann::json& j) {
  ToolRuleSet rs;
  for (const auto& t : j.at("tools")) {
    ToolSpec s{t.at("base").get<std::string>(), t.at("version").get<std::string>(),
               t.value("description", std::string{}), {}};
    for (const auto& a : t.at("args")) s.args.push_back({a.at("name").get<std::string>(), metric_from_name(a.at("kind").get<std::string>())});
    rs.tools.push_back(std::move(s));
  }
  for (const auto& r : j.at("rules")) {
    rs.rules.push_back({r.at("base").get<std::string>(), r.at("predicate").get<std::map<std::string, std::string>>(),
                        r.at("version").get<std::string>()});
  }
  rs.defaults = j.at("defaults").get<std::map<std::string, std::string>>();
  if (j.contains("metric_table")) {
    rs.metric_table.clear();
    for (const auto& [k, v] : j.at("metric_table").items()) rs.metric_table[k] = metric_from_name(v.get<std::string>());
  }
  validate_rule_set(rs);
  return rs;
}

/// First matching rule wins; otherwise the base's default version.
inline std::string resolve_required_version(const ToolRuleSet& rs, const Profile& profile, const std::string& base) {
  auto def = rs.defaults.find(base);
  if (def == rs.defaults.end()) throw ConfigError("unknown tool base '" + base + "'");
  for (const auto& r : rs.rules) {
    if (r.base != base) continue;
    const bool match = std::all_of(r.predicate.begin(), r.predicate.end(), [&](const auto& kv) {
      auto it = profile.find(kv.first);
      return it != profile.end() && it->second == kv.second;
    });
    if (match) return r.version;
  }
  return def->second;
}

// -------------------------------------------------------------- tool calls

struct ToolCall {
  std::string name;
  std::map<std::string, ArgValue> arguments;

  friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

/// Splits "OCR_v2" into {"OCR", "v2"} at the last "_v<digits>" suffix.
inline std::pair<std::string, std::string> split_tool_name(const std::string& name) {
  const auto pos = name.rfind("_v");
  if (pos == std::string::npos || pos + 2 >= name.size() ||
      !std::all_of(name.begin() + static_cast<long>(pos) + 2, name.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    return {name, ""};
  }
  return {name.substr(0, pos), name.substr(pos + 1)};
}

inline ArgValue arg_from_json(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number()) return v.get<double>();
  if (v.is_boolean()) return std::string{v.get<bool>() ? "true" : "false"};
  if (v.is_array() && v.size() == 4 && std::all_of(v.begin(), v.end(), [](const auto& x) { return x.is_number(); })) {
    return BBox{v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>()};
  }
  throw SchemaError("unsupported argument value " + v.dump());
}

inline nlohmann::ordered_json arg_to_json(const ArgValue& v) {
  if (auto* s = std::get_if<std::string>(&v)) return *s;
  if (auto* d = std::get_if<double>(&v)) return *d;
  const auto& b = std::get<BBox>(v);
  return nlohmann::ordered_json::array({b.x1, b.y1, b.x2, b.y2});
}

inline nlohmann::ordered_json call_to_json(const ToolCall& c) {
  nlohmann::ordered_json args = nlohmann::ordered_json::object();
  for (const auto& [k, v] : c.arguments) args[k] = arg_to_json(v);
  return {{"name", c.name}, {"arguments", args}};
}

inline ToolCall call_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("name") || !j.contains("arguments")) {
    throw SchemaError("tool call needs 'name' and 'arguments'");
  }
  if (!j.at("name").is_string() || !j.at("arguments").is_object()) {
    throw SchemaError("tool call 'name' must be a string and 'arguments' an object");
  }
  ToolCall c;
  c.name = j.at("name").get<std::string>();
  for (const auto& [k, v] : j.at("arguments").items()) c.arguments[k] = arg_from_json(v);
  return c;
}

namespace detail {

/// Index one past the '}' that closes the object opening at `open`, or npos.
inline std::size_t match_object(std::string_view text, std::size_t open) {
  int depth = 0;
  bool in_str = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_str) {
      if (c == '\\') ++i;
      else if (c == '"') in_str = false;
      continue;
    }
    if (c == '"') in_str = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

}  // namespace detail

/// Extracts the first well-formed JSON object with "name" and "arguments".
inline ToolCall parse_tool_call(std::string_view text) {
  bool saw_object = false;
  std::string schema_msg;
  for (std::size_t i = text.find('{'); i != std::string_view::npos; i = text.find('{', i + 1)) {
    const std::size_t end = detail::match_object(text, i);
    if (end == std::string_view::npos) continue;
    auto j = nlohmann::json::parse(text.substr(i, end - i), nullptr, false);
    if (j.is_discarded() || !j.is_object()) continue;
    saw_object = true;
    try {
      return call_from_json(j);
    } catch (const SchemaError& e) {
      if (schema_msg.empty()) schema_msg = e.what();
    }
  }
  if (saw_object) throw SchemaError(schema_msg);
  throw ParseError("no JSON object in tool-call text");
}

/// Splits JSON text into tokens: structural characters, whole string
/// literals (quotes kept) and bare scalars. Concatenation restores the text
/// modulo whitespace.
inline Tokens tokenize_json(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      ++i;
    } else if (c == '{' || c == '}' || c == '[' || c == ']' || c == ':' || c == ',') {
      out.emplace_back(1, c);
      ++i;
    } else if (c == '"') {
      std::size_t j = i + 1;
      while (j < text.size() && text[j] != '"') j += text[j] == '\\' ? 2 : 1;
      out.emplace_back(text.substr(i, std::min(j + 1, text.size()) - i));
      i = j + 1;
    } else {
      std::size_t j = i;
      while (j < text.size() && std::string_view{"{}[]:,\" \n\t\r"}.find(text[j]) == std::string_view::npos) ++j;
      out.emplace_back(text.substr(i, j - i));
      i = j;
    }
  }
  return out;
}

inline Tokens call_tokens(const ToolCall& c) { return tokenize_json(call_to_json(c).dump()); }

// -------------------------------------------------------------- arithmetic

namespace detail {

class ExprParser {
 public:
  explicit ExprParser(std::string_view s) : s_(s) {}

  double run() {
    const double v = expr();
    skip();
    if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& why) const {
    throw ParseError("expression: " + why + " at offset " + std::to_string(pos_));
  }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool eat(std::string_view tok) {
    skip();
    if (s_.substr(pos_, tok.size()) == tok) {
      pos_ += tok.size();
      return true;
    }
    return false;
  }
  static double finite(double v) {
    if (!std::isfinite(v)) throw NumericError("expression: non-finite result");
    return v;
  }

  double expr() {
    double v = term();
    for (;;) {
      if (eat("+")) v = finite(v + term());
      else if (eat("-")) v = finite(v - term());
      else return v;
    }
  }
  double term() {
    double v = unary();
    for (;;) {
      skip();
      if (s_.substr(pos_, 2) == "**") return v;
      if (eat("*")) {
        v = finite(v * unary());
      } else if (eat("/")) {
        const double d = unary();
        if (d == 0.0) throw NumericError("expression: division by zero");
        v = finite(v / d);
      } else {
        return v;
      }
    }
  }
  // Unary minus binds looser than **, so -2**2 == -4 and 2**-1 == 0.5.
  double unary() {
    if (eat("-")) return -unary();
    if (eat("+")) return unary();
    return power();
  }
  double power() {
    const double base = primary();
    if (eat("**")) {
      const double ex = unary();
      if (base == 0.0 && ex < 0.0) throw NumericError("expression: division by zero");
      return finite(std::pow(base, ex));
    }
    return base;
  }
  double primary() {
    skip();
    if (eat("(")) {
      const double v = expr();
      if (!eat(")")) fail("missing ')'");
      return v;
    }
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.')) ++pos_;
    if (pos_ == start) fail(pos_ < s_.size() ? "unexpected '" + std::string(1, s_[pos_]) + "'" : "unexpected end");
    if (pos_ < s_.size() && (s_[pos_] == 'e' || s_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < s_.size() && (s_[p] == '+' || s_[p] == '-')) ++p;
      if (p < s_.size() && std::isdigit(static_cast<unsigned char>(s_[p]))) {
        while (p < s_.size() && std::isdigit(static_cast<unsigned char>(s_[p]))) ++p;
        pos_ = p;
      }
    }
    const std::string lit{s_.substr(start, pos_ - start)};
    if (std::count(lit.begin(), lit.end(), '.') > 1 || lit == ".") fail("bad number '" + lit + "'");
    return finite(std::stod(lit));
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Safe arithmetic: numbers, unary +/-, + - * /, ** (right-associative) and
/// parentheses with Python precedence.
inline double eval_expression(std::string_view text) { return detail::ExprParser(text).run(); }

// ----------------------------------------------------------------- metrics

/// IoU of (x1,y1,x2,y2) boxes; a degenerate box scores 0 and appends a warning.
inline double bbox_iou(const BBox& a, const BBox& b, std::vector<std::string>* warnings = nullptr) {
  auto degenerate = [](const BBox& x) { return !(x.x2 > x.x1) || !(x.y2 > x.y1); };
  if (degenerate(a) || degenerate(b)) {
    if (warnings) warnings->push_back("degenerate bounding box");
    return 0.0;
  }
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline Tokens normalized_words(std::string_view s) {
  std::string clean;
  clean.reserve(s.size());
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    clean += std::ispunct(u) ? ' ' : static_cast<char>(std::tolower(u));
  }
  Tokens out;
  std::size_t i = 0;
  while (i < clean.size()) {
    while (i < clean.size() && std::isspace(static_cast<unsigned char>(clean[i]))) ++i;
    std::size_t j = i;
    while (j < clean.size() && !std::isspace(static_cast<unsigned char>(clean[j]))) ++j;
    if (j > i) out.emplace_back(clean.substr(i, j - i));
    i = j;
  }
  return out;
}

/// Token-multiset F1 after lowercasing and punctuation stripping.
inline double text_similarity(std::string_view a, std::string_view b) {
  const Tokens ta = normalized_words(a), tb = normalized_words(b);
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::map<std::string, int> count;
  for (const auto& t : ta) ++count[t];
  std::size_t overlap = 0;
  for (const auto& t : tb) {
    auto it = count.find(t);
    if (it != count.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(ta.size() + tb.size());
}

using TextScorer = std::function<double(std::string_view, std::string_view)>;

inline constexpr double kExpressionTolerance = 1e-6;

struct CallScore {
  double tool_acc = 0.0;
  std::map<std::string, double> arg_scores;
  double arg_score = 0.0;
  double overall = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string arg_as_string(const ArgValue& v) {
  if (auto* s = std::get_if<std::string>(&v)) return *s;
  return arg_to_json(v).dump();
}

inline std::optional<BBox> arg_as_box(const ArgValue& v) {
  if (auto* b = std::get_if<BBox>(&v)) return *b;
  if (auto* s = std::get_if<std::string>(&v)) {
    std::string t = *s;
    for (char& c : t) {
      if (c == '(' || c == ')' || c == '[' || c == ']' || c == ',') c = ' ';
    }
    std::istringstream in(t);
    BBox b;
    if (in >> b.x1 >> b.y1 >> b.x2 >> b.y2) {
      std::string rest;
      if (!(in >> rest)) return b;
    }
  }
  return std::nullopt;
}

inline double arg_as_number(const ArgValue& v) {
  if (auto* d = std::get_if<double>(&v)) return *d;
  if (auto* s = std::get_if<std::string>(&v)) return eval_expression(*s);
  throw ParseError("box is not an expression");
}

}  // namespace detail

inline MetricKind arg_kind(const ToolRuleSet& rs, const ToolSpec& spec, const std::string& arg) {
  for (const auto& a : spec.args) {
    if (a.name == arg) return a.kind;
  }
  auto it = rs.metric_table.find(arg);
  if (it == rs.metric_table.end()) throw ConfigError("argument '" + arg + "' of " + spec.full_name() + " has no metric kind");
  return it->second;
}

/// Scores a predicted call against gold. Missing predicted arguments score 0,
/// extra ones are ignored; a gold call without arguments has arg_score 1.
inline CallScore score_call(const ToolCall& pred, const ToolCall& gold, const ToolRuleSet& rs,
                            const TextScorer& text_scorer = text_similarity) {
  const ToolSpec* spec = rs.find(gold.name);
  if (!spec) throw ConfigError("gold call names unknown tool '" + gold.name + "'");
  CallScore s;
  s.tool_acc = pred.name == gold.name ? 1.0 : 0.0;
  double sum = 0.0;
  for (const auto& [name, gv] : gold.arguments) {
    const MetricKind kind = arg_kind(rs, *spec, name);
    double score = 0.0;
    auto it = pred.arguments.find(name);
    if (it != pred.arguments.end()) {
      const ArgValue& pv = it->second;
      switch (kind) {
        case MetricKind::ExactMatch:
          score = detail::arg_as_string(pv) == detail::arg_as_string(gv) ? 1.0 : 0.0;
          break;
        case MetricKind::TextSim:
          score = text_scorer(detail::arg_as_string(pv), detail::arg_as_string(gv));
          break;
        case MetricKind::Expression: {
          double g = 0.0;
          try {
            g = detail::arg_as_number(gv);
          } catch (const Error& e) {
            throw ConfigError("gold expression for '" + name + "' does not evaluate: " + e.what());
          }
          try {
            score = std::abs(detail::arg_as_number(pv) - g) <= kExpressionTolerance ? 1.0 : 0.0;
          } catch (const Error& e) {
            s.warnings.push_back(name + ": " + e.what());
          }
          break;
        }
        case MetricKind::BBox: {
          auto pb = detail::arg_as_box(pv);
          auto gb = detail::arg_as_box(gv);
          if (!gb) throw ConfigError("gold bbox for '" + name + "' is malformed");
          if (pb) score = bbox_iou(*pb, *gb, &s.warnings);
          else s.warnings.push_back(name + ": malformed box");
          break;
        }
      }
    }
    s.arg_scores[name] = score;
    sum += score;
  }
  s.arg_score = gold.arguments.empty() ? 1.0 : sum / static_cast<double>(gold.arguments.size());
  s.overall = 0.5 * s.tool_acc + 0.5 * s.arg_score;
  return s;
}

// ------------------------------------------------------- policy rendering

/// Text form of the tool rules: tool list, then rules, then defaults.
inline std::string render_rule_policy(const ToolRuleSet& rs, const std::string& name) {
  std::ostringstream out;
  out << "General instruction: answer with one tool call that follows the rules below.\n";
  out << "Policy name: " << name << ".\n";
  for (const auto& t : rs.tools) {
    out << "Tool " << t.full_name() << ": " << t.description << " Arguments:";
    for (const auto& a : t.args) out << ' ' << a.name;
    out << ".\n";
  }
  for (std::size_t i = 0; i < rs.rules.size(); ++i) {
    const auto& r = rs.rules[i];
    out << "Rule " << i << ": when";
    bool first = true;
    for (const auto& [k, v] : r.predicate) {
      out << (first ? " " : " and ") << k << " is " << v;
      first = false;
    }
    out << ", call " << r.base << " version " << r.version << ".\n";
  }
  for (const auto& [base, v] : rs.defaults) out << "Default: call " << base << " version " << v << ".\n";
  return out.str();
}

/// Override policy: every rule keeps its predicate but selects a different
/// version of the same tool (the next one in listed order).
inline ToolRuleSet flip_rule_versions(const ToolRuleSet& rs) {
  ToolRuleSet out = rs;
  for (auto& r : out.rules) {
    std::vector<std::string> versions;
    for (const auto& t : rs.tools) {
      if (t.base == r.base) versions.push_back(t.version);
    }
    auto it = std::find(versions.begin(), versions.end(), r.version);
    r.version = versions[(static_cast<std::size_t>(it - versions.begin()) + 1) % versions.size()];
  }
  return out;
}

// -------------------------------------------------------------- generator

struct GtaRecord {
  std::string id;
  Profile profile;
  std::string query;
  std::vector<std::string> history;
  std::vector<std::string> images;
  ToolCall gold_call;
  Tokens tokens_with_policy;
  Tokens tokens_without_policy;
  std::vector<bool> visual_mask;
  Tokens target;
};

struct GtaOptions {
  int n_tools = 13;
  int n_rules = 24;
  int n_train = 451;
  int n_test = 106;
  std::uint64_t seed = 0;
  std::string policy_name = "GTA";
};

inline const std::map<std::string, std::vector<std::string>>& profile_attributes() {
  static const std::map<std::string, std::vector<std::string>> attrs{
      {"account", {"personal", "business"}},
      {"age_group", {"minor", "adult", "senior"}},
      {"premium", {"true", "false"}},
      {"region", {"us", "eu", "asia"}}};
  return attrs;
}

namespace detail {

struct ToolTemplate {
  const char* base;
  const char* description;
  std::vector<const char*> args;
  const char* ask;
};

inline const std::vector<ToolTemplate>& tool_pool() {
  static const std::vector<ToolTemplate> pool{
      {"OCR", "Read the text in an image.", {"image"}, "read the text in the picture"},
      {"ImageDescription", "Describe an image.", {"image"}, "describe the picture"},
      {"CountGivenObject", "Count objects of a category in an image.", {"image", "text"}, "count the objects"},
      {"TextToBbox", "Locate an object described by text.", {"image", "text", "top1"}, "find the object"},
      {"RegionAttributeDescription", "Describe an attribute of an image region.", {"image", "bbox", "attribute"}, "describe the region"},
      {"Calculator", "Evaluate an arithmetic expression.", {"expression"}, "compute the value"},
      {"GoogleSearch", "Search the web.", {"query", "k"}, "search the web"},
      {"DrawBox", "Draw a box on an image.", {"image", "bbox", "annotation"}, "draw a box"},
      {"AddText", "Write text on an image.", {"image", "text", "position", "color"}, "write on the picture"},
      {"TextToImage", "Generate an image from keywords.", {"keywords"}, "make a picture"},
      {"ImageStylization", "Restyle an image.", {"image", "instruction"}, "restyle the picture"},
      {"Plot", "Plot data with code.", {"command"}, "plot the data"},
      {"MathOCR", "Read a formula in an image.", {"image"}, "read the formula"},
      {"Solver", "Solve an equation.", {"command"}, "solve the equation"}};
  return pool;
}

inline std::string pick(Rng& rng, const std::vector<std::string>& v) { return v[rng.below(v.size())]; }

inline ArgValue sample_arg(Rng& rng, const std::string& name, const std::vector<std::string>& images) {
  static const std::vector<std::string> phrases{"red car", "small dog", "street sign", "two apples", "blue house",
                                                "old bridge", "green tree", "yellow bus"};
  static const std::vector<std::string> positions{"top-left", "top-right", "bottom-left", "bottom-right", "center"};
  static const std::vector<std::string> colors{"red", "blue", "green", "black", "white"};
  if (name == "image") return pick(rng, images);
  if (name == "position") return pick(rng, positions);
  if (name == "color") return pick(rng, colors);
  if (name == "k" || name == "top1") return std::to_string(rng.between(1, 5));
  if (name == "expression") {
    return std::to_string(rng.between(1, 20)) + "*(" + std::to_string(rng.between(1, 9)) + "+" +
           std::to_string(rng.between(1, 9)) + ")";
  }
  if (name == "bbox") {
    const int x1 = rng.between(0, 60), y1 = rng.between(0, 60);
    return BBox{double(x1), double(y1), double(x1 + rng.between(5, 40)), double(y1 + rng.between(5, 40))};
  }
  return pick(rng, phrases);
}

}  // namespace detail

inline ToolRuleSet sample_rule_set(std::uint64_t seed, int n_tools, int n_rules) {
  const auto& pool = detail::tool_pool();
  if (n_tools < 1 || n_tools > static_cast<int>(pool.size())) {
    throw GenerationError("gen_gta_like: n_tools must be in [1, " + std::to_string(pool.size()) + "]");
  }
  if (n_rules < 0) throw GenerationError("gen_gta_like: n_rules must be >= 0");
  Rng rng(derive_seed(seed, "gta", "rules"));
  auto order = seeded_permutation(pool.size(), derive_seed(seed, "gta", "tools"));
  std::sort(order.begin(), order.begin() + n_tools);
  const auto table = default_metric_table();
  ToolRuleSet rs;
  std::map<std::string, int> n_versions;
  for (int t = 0; t < n_tools; ++t) {
    const auto& tpl = pool[order[static_cast<std::size_t>(t)]];
    const int nv = rng.between(2, 3);
    n_versions[tpl.base] = nv;
    for (int v = 1; v <= nv; ++v) {
      ToolSpec spec{tpl.base, "v" + std::to_string(v), tpl.description, {}};
      for (const char* a : tpl.args) spec.args.push_back({a, table.at(a)});
      rs.tools.push_back(std::move(spec));
    }
    rs.defaults[tpl.base] = "v1";
  }
  const auto bases = rs.bases();
  const auto& attrs = profile_attributes();
  std::vector<std::string> attr_names;
  for (const auto& [k, _] : attrs) attr_names.push_back(k);
  std::set<std::string> seen;
  for (int r = 0, guard = 0; r < n_rules; ++guard) {
    if (guard > 100000) throw GenerationError("gen_gta_like: cannot place " + std::to_string(n_rules) + " distinct rules");
    ToolRule rule;
    rule.base = bases[static_cast<std::size_t>(r) % bases.size()];
    const int n_pred = rng.between(1, 2);
    auto names = attr_names;
    rng.shuffle(names);
    for (int p = 0; p < n_pred; ++p) {
      rule.predicate[names[static_cast<std::size_t>(p)]] = detail::pick(rng, attrs.at(names[static_cast<std::size_t>(p)]));
    }
    rule.version = "v" + std::to_string(rng.between(2, n_versions[rule.base]));
    const std::string key = rule_set_to_json(ToolRuleSet{{}, {rule}, {}, {}}).dump();
    if (!seen.insert(key).second) continue;
    rs.rules.push_back(std::move(rule));
    ++r;
  }
  validate_rule_set(rs);
  return rs;
}

inline Tokens gta_prompt_tokens(const GtaRecord& r) {
  std::string text = "Profile:";
  for (const auto& [k, v] : r.profile) text += " " + k + " " + v + ",";
  text += " Images:";
  Tokens out = tokenize(text);
  for (const auto& im : r.images) out.push_back(visual_token(im));
  Tokens rest = tokenize("History:");
  for (const auto& h : r.history) {
    for (auto& t : tokenize(h)) rest.push_back(std::move(t));
  }
  for (auto& t : tokenize("Query: " + r.query)) rest.push_back(std::move(t));
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

inline Tokens gta_target_tokens(const ToolCall& c) {
  Tokens out{std::string{special::kThinkOpen}, std::string{special::kThinkClose}, std::string{special::kBoxOpen}};
  for (auto& t : call_tokens(c)) out.push_back(std::move(t));
  out.emplace_back(special::kBoxClose);
  return out;
}

inline void finalize_gta_tokens(GtaRecord& r, const Tokens& policy) {
  r.tokens_without_policy = gta_prompt_tokens(r);
  r.tokens_with_policy = policy;
  r.tokens_with_policy.insert(r.tokens_with_policy.end(), r.tokens_without_policy.begin(), r.tokens_without_policy.end());
  r.visual_mask.resize(r.tokens_with_policy.size());
  for (std::size_t i = 0; i < r.tokens_with_policy.size(); ++i) r.visual_mask[i] = is_visual_token(r.tokens_with_policy[i]);
  r.target = gta_target_tokens(r.gold_call);
}

inline nlohmann::ordered_json gta_record_to_json(const GtaRecord& r) {
  nlohmann::ordered_json profile = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.profile) profile[k] = v;
  return {{"id", r.id},
          {"profile", profile},
          {"query", r.query},
          {"history", r.history},
          {"images", r.images},
          {"gold_call", call_to_json(r.gold_call)},
          {"tokens_with_policy", r.tokens_with_policy},
          {"tokens_without_policy", r.tokens_without_policy},
          {"visual_mask", r.visual_mask},
          {"target", r.target}};
}

inline GtaRecord gta_record_from_json(const nlohmann::json& j) {
  GtaRecord r;
  r.id = j.value("id", std::string{});
  r.profile = j.at("profile").get<Profile>();
  r.query = j.at("query").get<std::string>();
  r.history = j.at("history").get<std::vector<std::string>>();
  r.images = j.at("images").get<std::vector<std::string>>();
  r.gold_call = call_from_json(j.at("gold_call"));
  if (j.contains("tokens_with_policy")) {
    r.tokens_with_policy = j.at("tokens_with_policy").get<Tokens>();
    r.tokens_without_policy = j.at("tokens_without_policy").get<Tokens>();
    r.visual_mask = j.at("visual_mask").get<std::vector<bool>>();
    r.target = j.at("target").get<Tokens>();
  }
  return r;
}

struct GtaDataset {
  ToolRuleSet rules;
  std::vector<GtaRecord> train;
  std::vector<GtaRecord> test;
  std::string policy_name;
};

inline GtaDataset generate_gta_like(const GtaOptions& opt) {
  if (opt.n_train < 0 || opt.n_test < 0) throw GenerationError("gen_gta_like: record counts must be >= 0");
  GtaDataset ds;
  ds.policy_name = opt.policy_name;
  ds.rules = sample_rule_set(opt.seed, opt.n_tools, opt.n_rules);
  const Tokens policy = tokenize(render_rule_policy(ds.rules, opt.policy_name));
  const auto bases = ds.rules.bases();
  static const std::vector<std::string> histories{"user: hi there.", "assistant: how can I help?",
                                                  "user: I need help with a picture."};
  auto make = [&](const std::string& split, int i) {
    Rng rng(derive_seed(opt.seed, "gta", split, i));
    GtaRecord r;
    r.id = split + "-" + std::to_string(i);
    for (const auto& [k, vals] : profile_attributes()) r.profile[k] = detail::pick(rng, vals);
    const int n_img = rng.between(1, 2);
    for (int m = 0; m < n_img; ++m) r.images.push_back("image_" + std::to_string(m));
    const int n_hist = rng.between(0, 2);
    for (int h = 0; h < n_hist; ++h) r.history.push_back(detail::pick(rng, histories));
    const std::string base = bases[rng.below(bases.size())];
    const std::string version = resolve_required_version(ds.rules, r.profile, base);
    r.gold_call.name = base + "_" + version;
    const ToolSpec* spec = ds.rules.find(r.gold_call.name);
    std::string detail_text;
    for (const auto& a : spec->args) {
      ArgValue v = detail::sample_arg(rng, a.name, r.images);
      if (a.name != "image") detail_text += " " + a.name + " " + detail::arg_as_string(v);
      r.gold_call.arguments[a.name] = std::move(v);
    }
    for (const auto& tpl : detail::tool_pool()) {
      if (tpl.base == base) r.query = std::string{"Please "} + tpl.ask + "," + detail_text + ".";
    }
    finalize_gta_tokens(r, policy);
    return r;
  };
  for (int i = 0; i < opt.n_train; ++i) ds.train.push_back(make("train", i));
  for (int i = 0; i < opt.n_test; ++i) ds.test.push_back(make("test", i));
  return ds;
}

/// Record prompts and targets, the flipped-rule policy used for override
/// evaluation, and every versioned tool name.
inline Vocab gta_vocab(const GtaDataset& ds) {
  VocabBuilder vb;
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& r : *split) {
      vb.add(r.tokens_with_policy, &r.visual_mask);
      vb.add(r.target);
    }
  }
  vb.add(tokenize(render_rule_policy(flip_rule_versions(ds.rules), ds.policy_name)));
  for (const auto& t : ds.rules.tools) vb.add(tokenize_json(nlohmann::json(t.full_name()).dump()));
  return vb.build();
}

struct GtaFiles {
  std::filesystem::path rules, train, test, manifest;
};

inline GtaFiles gen_gta_like(const GtaOptions& opt, const std::filesystem::path& dir) {
  const GtaDataset ds = generate_gta_like(opt);
  std::filesystem::create_directories(dir);
  GtaFiles f{dir / "ruleset.json", dir / "train.jsonl", dir / "test.jsonl", dir / "manifest.json"};
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + p.string());
    out << text;
  };
  write(f.rules, rule_set_to_json(ds.rules).dump(2) + "\n");
  auto dump_split = [&](const std::filesystem::path& p, const std::vector<GtaRecord>& recs) {
    std::string text;
    for (const auto& r : recs) text += gta_record_to_json(r).dump() + "\n";
    write(p, text);
  };
  dump_split(f.train, ds.train);
  dump_split(f.test, ds.test);
  nlohmann::ordered_json manifest{{"kind", "gta"},
                                  {"policy_name", ds.policy_name},
                                  {"seed", opt.seed},
                                  {"n_tools", opt.n_tools},
                                  {"n_rules", opt.n_rules},
                                  {"train_records", ds.train.size()},
                                  {"test_records", ds.test.size()},
                                  {"ruleset", "ruleset.json"},
                                  {"train", "train.jsonl"},
                                  {"test", "test.jsonl"},
                                  {"vocab_hash", hex64(gta_vocab(ds).hash())}};
  write(f.manifest, manifest.dump(2) + "\n");
  return f;
}

inline std::vector<GtaRecord> load_gta_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::vector<GtaRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(gta_record_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace polint
