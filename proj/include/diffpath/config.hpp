#pragma once

// Plain-text configuration: one `key = value` per line, '#' starts a comment,
// blank lines ignored, later assignments replace earlier ones.

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "diffpath/error.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& source = "<config>") {
    Config c;
    int lineno = 0;
    while (!text.empty()) {
      const auto nl = text.find('\n');
      std::string_view line = text.substr(0, nl);
      text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ConfigError("", source + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key(detail::trim(line.substr(0, eq)));
      if (key.empty()) throw ConfigError("", source + ":" + std::to_string(lineno) + ": empty key");
      c.values_[key] = std::string(detail::trim(line.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    if (!std::filesystem::is_regular_file(path)) {
      throw ConfigError("config", "config file '" + path.string() + "' does not exist");
    }
    return parse(read_text_file(path), path.string());
  }

  /// Applies a `key=value` override.
  void apply_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(assignment), "override '" + std::string(assignment) + "' is not key=value");
    }
    const std::string key(detail::trim(assignment.substr(0, eq)));
    if (key.empty()) throw ConfigError("", "override '" + std::string(assignment) + "' has an empty key");
    values_[key] = std::string(detail::trim(assignment.substr(eq + 1)));
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  std::string get_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(key, "missing required key");
    return it->second;
  }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? get_string(key) : fallback;
  }

  long long get_int(const std::string& key) const {
    const std::string v = get_string(key);
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw ConfigError(key, "expects an integer, got '" + v + "'");
    }
    return out;
  }
  long long get_int(const std::string& key, long long fallback) const { return has(key) ? get_int(key) : fallback; }

  std::uint64_t get_uint64(const std::string& key) const {
    const std::string v = get_string(key);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
      throw ConfigError(key, "expects a non-negative integer, got '" + v + "'");
    }
    return out;
  }
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) const {
    return has(key) ? get_uint64(key) : fallback;
  }

  double get_double(const std::string& key) const {
    const std::string v = get_string(key);
    char* end = nullptr;
    errno = 0;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) {
      throw ConfigError(key, "expects a number, got '" + v + "'");
    }
    return out;
  }
  double get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }

  bool get_bool(const std::string& key) const {
    const std::string v = get_string(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key, "expects true or false, got '" + v + "'");
  }
  bool get_bool(const std::string& key, bool fallback) const { return has(key) ? get_bool(key) : fallback; }

  /// Sorted `key = value` lines; parsing the result gives back this config.
  std::string format() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace diffpath
