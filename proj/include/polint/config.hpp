#pragma once

// Flat "key = value" config files with [section] headers.

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "polint/common.hpp"

namespace polint {

struct ConfigEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

/// Parses the text form. '#' and ';' start comments; blank lines are
/// ignored; keys outside any section land in section "".
inline std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string raw, section;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    auto hash = raw.find_first_of("#;");
    std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    ConfigEntry e{section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno};
    if (e.key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ConfigEntry> load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

inline bool parse_bool(const std::string& v, const std::string& what) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(what + ": expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected an integer, got '" + v + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Dispatch table from "section.key" to a setter. Unknown keys are errors.
class ConfigSchema {
 public:
  using Setter = std::function<void(const std::string& value, const std::string& where)>;

  void add(const std::string& section, const std::string& key, Setter set) { setters_[section + "." + key] = std::move(set); }

  void apply(const std::vector<ConfigEntry>& entries) const {
    for (const auto& e : entries) {
      const std::string name = e.section + "." + e.key;
      auto it = setters_.find(name);
      const std::string where = "line " + std::to_string(e.line) + " (" + name + ")";
      if (it == setters_.end()) throw ConfigError("unknown config key '" + name + "' at line " + std::to_string(e.line));
      it->second(e.value, where);
    }
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : setters_) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, Setter> setters_;
};

}  // namespace polint
