#pragma once

// Flat `key = value` configuration files with `[section]` headers.
//
//   # comment
//   [pretrain]
//   stages = 18@0.02, 6@0.002
//
// Keys keep file order within a section. Lookups of missing keys or
// malformed values throw ConfigError naming the file, line, and key.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "blurlab/error.hpp"

namespace blurlab {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Splits on `sep` and trims each piece; an all-blank input gives no pieces.
inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for doubles is not universally available; strtod on a copy.
    const std::string tmp(s);
    if (tmp.empty()) return std::nullopt;
    char* end = nullptr;
    v = static_cast<T>(std::strtod(tmp.c_str(), &end));
    if (end != tmp.c_str() + tmp.size()) return std::nullopt;
    return v;
  } else {
    const auto* first = s.data();
    const auto* last = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) return std::nullopt;
    return v;
  }
}

class Config {
 public:
  struct Entry {
    std::string key;
    std::string value;
    int line = 0;
  };
  struct Section {
    std::string name;
    std::vector<Entry> entries;
    int line = 0;
  };

  static Config parse(std::istream& is, const std::string& name = "<config>") {
    Config c;
    c.name_ = name;
    std::string raw;
    int line = 0;
    c.sections_.push_back(Section{"", {}, 0});
    while (std::getline(is, raw)) {
      ++line;
      const auto hash = raw.find('#');
      const std::string text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (text.empty()) continue;
      if (text.front() == '[') {
        if (text.back() != ']') throw ConfigError(c.where(line) + ": unterminated section header");
        const std::string sec = trim(std::string_view(text).substr(1, text.size() - 2));
        if (sec.empty()) throw ConfigError(c.where(line) + ": empty section name");
        if (c.find_section(sec)) throw ConfigError(c.where(line) + ": duplicate section [" + sec + "]");
        c.sections_.push_back(Section{sec, {}, line});
        continue;
      }
      const auto eq = text.find('=');
      if (eq == std::string::npos) throw ConfigError(c.where(line) + ": expected `key = value`");
      Entry e{trim(std::string_view(text).substr(0, eq)), trim(std::string_view(text).substr(eq + 1)), line};
      if (e.key.empty()) throw ConfigError(c.where(line) + ": empty key");
      auto& entries = c.sections_.back().entries;
      for (const auto& old : entries)
        if (old.key == e.key) throw ConfigError(c.where(line) + ": duplicate key '" + e.key + "'");
      entries.push_back(std::move(e));
    }
    return c;
  }

  static Config parse_string(const std::string& text, const std::string& name = "<config>") {
    std::istringstream is(text);
    return parse(is, name);
  }

  static Config load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError(path + ": cannot open");
    return parse(is, path);
  }

  const std::string& name() const { return name_; }
  const std::vector<Section>& sections() const { return sections_; }

  const Section* find_section(std::string_view sec) const {
    for (const auto& s : sections_)
      if (s.name == sec) return &s;
    return nullptr;
  }

  const Entry* find(std::string_view sec, std::string_view key) const {
    if (const auto* s = find_section(sec))
      for (const auto& e : s->entries)
        if (e.key == key) return &e;
    return nullptr;
  }

  bool has(std::string_view sec, std::string_view key) const { return find(sec, key) != nullptr; }

  const Entry& require(std::string_view sec, std::string_view key) const {
    if (const auto* e = find(sec, key)) return *e;
    throw ConfigError(name_ + ": missing key '" + std::string(key) + "' in [" + std::string(sec) + "]");
  }

  std::string get_string(std::string_view sec, std::string_view key) const { return require(sec, key).value; }

  std::string get_string(std::string_view sec, std::string_view key, const std::string& fallback) const {
    const auto* e = find(sec, key);
    return e ? e->value : fallback;
  }

  template <typename T>
  T get(std::string_view sec, std::string_view key) const {
    const auto& e = require(sec, key);
    return convert<T>(e, sec);
  }

  template <typename T>
  T get(std::string_view sec, std::string_view key, T fallback) const {
    const auto* e = find(sec, key);
    return e ? convert<T>(*e, sec) : fallback;
  }

  template <typename T>
  std::vector<T> get_list(std::string_view sec, std::string_view key) const {
    const auto& e = require(sec, key);
    std::vector<T> out;
    for (const auto& item : split_list(e.value)) out.push_back(convert<T>(Entry{e.key, item, e.line}, sec));
    return out;
  }

  template <typename T>
  std::vector<T> get_list(std::string_view sec, std::string_view key, std::vector<T> fallback) const {
    return has(sec, key) ? get_list<T>(sec, key) : fallback;
  }

  /// Raises ConfigError for keys in `sec` outside `known`.
  void check_keys(std::string_view sec, const std::vector<std::string_view>& known,
                  std::string_view allowed_prefix = {}) const {
    const auto* s = find_section(sec);
    if (!s) return;
    for (const auto& e : s->entries) {
      bool ok = !allowed_prefix.empty() && e.key.starts_with(allowed_prefix);
      for (auto k : known) ok = ok || e.key == k;
      if (!ok) throw ConfigError(where(e.line) + ": unknown key '" + e.key + "' in [" + std::string(sec) + "]");
    }
  }

  /// Overrides or adds one value; the section is created when missing.
  void set(std::string_view sec, std::string_view key, std::string value) {
    Section* s = nullptr;
    for (auto& cand : sections_)
      if (cand.name == sec) s = &cand;
    if (!s) s = &sections_.emplace_back(Section{std::string(sec), {}, 0});
    for (auto& e : s->entries)
      if (e.key == key) {
        e.value = std::move(value);
        return;
      }
    s->entries.push_back(Entry{std::string(key), std::move(value), 0});
  }

  std::string where(int line) const { return name_ + ":" + std::to_string(line); }

  /// Canonical text (sections and keys in file order, comments dropped).
  std::string canonical() const {
    std::string out;
    for (const auto& s : sections_) {
      if (s.entries.empty()) continue;
      if (!s.name.empty()) out += "[" + s.name + "]\n";
      for (const auto& e : s.entries) out += e.key + " = " + e.value + "\n";
    }
    return out;
  }

 private:
  template <typename T>
  T convert(const Entry& e, std::string_view sec) const {
    const auto bad = [&](const char* what) {
      return ConfigError(where(e.line) + ": key '" + e.key + "' in [" + std::string(sec) + "] expects " + what +
                         ", got '" + e.value + "'");
    };
    if constexpr (std::is_same_v<T, std::string>) {
      return e.value;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (e.value == "true" || e.value == "yes" || e.value == "1") return true;
      if (e.value == "false" || e.value == "no" || e.value == "0") return false;
      throw bad("a boolean");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = parse_number<T>(e.value)) return *v;
      throw bad("a number");
    } else {
      if (auto v = parse_number<T>(e.value)) return *v;
      throw bad("an integer");
    }
  }

  std::string name_;
  std::vector<Section> sections_;
};

}  // namespace blurlab
