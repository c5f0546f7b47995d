#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "polint/common.hpp"

namespace polint {

enum class AttrKind : std::uint8_t { Shape, Color, Size, Material };

inline constexpr std::array<AttrKind, 4> kAllKinds{AttrKind::Shape, AttrKind::Color,
                                                   AttrKind::Size, AttrKind::Material};

inline const std::vector<std::string>& values_of(AttrKind kind) {
  static const std::vector<std::string> shapes{"cube", "sphere", "cylinder"};
  static const std::vector<std::string> colors{"gray",   "red",    "blue", "green",
                                               "brown", "purple", "cyan", "yellow"};
  static const std::vector<std::string> sizes{"small", "large"};
  static const std::vector<std::string> materials{"rubber", "metal"};
  switch (kind) {
    case AttrKind::Shape: return shapes;
    case AttrKind::Color: return colors;
    case AttrKind::Size: return sizes;
    case AttrKind::Material: return materials;
  }
  return shapes;
}

inline std::string_view kind_name(AttrKind kind) {
  switch (kind) {
    case AttrKind::Shape: return "shape";
    case AttrKind::Color: return "color";
    case AttrKind::Size: return "size";
    case AttrKind::Material: return "material";
  }
  return "shape";
}

inline AttrKind kind_from_name(std::string_view name) {
  for (AttrKind k : kAllKinds) {
    if (kind_name(k) == name) return k;
  }
  throw ParseError("unknown attribute kind '" + std::string{name} + "'");
}

inline bool is_legal_value(AttrKind kind, std::string_view value) {
  for (const auto& v : values_of(kind)) {
    if (v == value) return true;
  }
  return false;
}

/// Scene-surrogate token for an attribute value, e.g. "v:cyan".
inline std::string visual_token(std::string_view value) { return "v:" + std::string{value}; }

inline bool is_visual_token(std::string_view tok) { return tok.size() > 2 && tok.substr(0, 2) == "v:"; }

/// Every ontology word in text and visual form; always part of the vocabulary
/// so resampled (override) policies never hit unknown tokens.
inline Tokens ontology_tokens() {
  Tokens out;
  for (AttrKind k : kAllKinds) {
    out.emplace_back(kind_name(k));
    for (const auto& v : values_of(k)) {
      out.push_back(v);
      out.push_back(visual_token(v));
    }
  }
  return out;
}

enum class Presentation : std::uint8_t { Textual, VisualDemo };

enum class PolicyMode : std::uint8_t { T, M };

inline std::string_view mode_name(PolicyMode m) { return m == PolicyMode::T ? "T" : "M"; }

inline PolicyMode mode_from_name(std::string_view s) {
  if (s == "T" || s == "t") return PolicyMode::T;
  if (s == "M" || s == "m") return PolicyMode::M;
  throw ParseError("unknown policy mode '" + std::string{s} + "'");
}

struct AttributeCondition {
  AttrKind kind = AttrKind::Shape;
  std::string value;
  Presentation presentation = Presentation::Textual;

  friend bool operator==(const AttributeCondition&, const AttributeCondition&) = default;
};

}  // namespace polint
