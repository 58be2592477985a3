#pragma once

// Plain-text `key = value` files. '#' starts a comment; blank lines are
// ignored. Keys are unique.

#include <array>
#include <charconv>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "insight/error.hpp"

namespace insight {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class KeyValues {
 public:
  void set(const std::string& key, const std::string& value) {
    if (!values_.contains(key)) order_.push_back(key);
    values_[key] = value;
  }

  bool contains(std::string_view key) const { return values_.find(std::string(key)) != values_.end(); }

  const std::string* find(std::string_view key) const {
    const auto it = values_.find(std::string(key));
    return it == values_.end() ? nullptr : &it->second;
  }

  void erase(std::string_view key) {
    const std::string k(key);
    values_.erase(k);
    std::erase(order_, k);
  }

  /// Keys in first-insertion order.
  const std::vector<std::string>& keys() const { return order_; }

  /// Canonical text: one `key = value` line per key, sorted by key.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  friend bool operator==(const KeyValues& a, const KeyValues& b) { return a.values_ == b.values_; }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

inline KeyValues parse_key_values(std::string_view text, std::string_view context = "config") {
  KeyValues kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (!line.empty()) {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) {
        throw ParseError(std::string(context) + ": expected 'key = value', got '" + std::string(line) + "'", pos);
      }
      const std::string key(detail::trim(line.substr(0, eq)));
      const std::string value(detail::trim(line.substr(eq + 1)));
      if (key.empty()) throw ParseError(std::string(context) + ": empty key", pos);
      if (kv.contains(key)) throw ParseError(std::string(context) + ": duplicate key '" + key + "'", pos);
      kv.set(key, value);
    }
    pos = end + 1;
  }
  return kv;
}

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

/// FNV-1a, 64-bit. Pass a previous result as `h` to hash a concatenation.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return s;
}

// ------------------------------------------------------------------ typed reads

inline long long parse_int(std::string_view key, std::string_view v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw UsageError("'" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
  }
  return out;
}

inline double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw UsageError("'" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("'" + std::string(key) + "' expects true or false, got '" + std::string(v) + "'");
}

/// Looks up an enum value by name, listing the valid names on failure.
template <class Enum, std::size_t N>
Enum parse_enum(std::string_view key, std::string_view v, const std::array<Enum, N>& options) {
  std::string valid;
  for (auto o : options) {
    if (to_string(o) == v) return o;
    valid += (valid.empty() ? "" : ", ") + std::string(to_string(o));
  }
  throw UsageError("invalid value '" + std::string(v) + "' for '" + std::string(key) + "'; valid options: " + valid);
}

}  // namespace insight
