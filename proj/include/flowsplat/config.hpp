#pragma once

// Flat key=value configuration with dotted section prefixes, e.g.
// `tracking.max_iterations=100`. Lines starting with '#' are comments.

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "flowsplat/core.hpp"

namespace flowsplat {

class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value) {
    values_[key] = value;
  }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key,
                         const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw BadHeader("config key " + key + " is not a number: " + it->second);
    }
  }
  int get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoi(it->second);
    } catch (const std::exception&) {
      throw BadHeader("config key " + key + " is not an integer: " +
                      it->second);
    }
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw BadHeader("config key " + key + " is not a boolean: " + v);
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline ConfigMap parse_config(std::istream& is) {
  ConfigMap cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string trimmed = detail::trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    const size_t eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw BadHeader("config line " + std::to_string(line_no) +
                      " has no '=': " + trimmed);
    }
    const std::string key = detail::trim(trimmed.substr(0, eq));
    const std::string value = detail::trim(trimmed.substr(eq + 1));
    if (key.empty()) {
      throw BadHeader("config line " + std::to_string(line_no) +
                      " has empty key");
    }
    cfg.set(key, value);
  }
  return cfg;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoFailure("cannot open config " + path);
  return parse_config(is);
}

}  // namespace flowsplat
