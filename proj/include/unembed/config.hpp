#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace unembed {

// Flat "key = value" config files: one pair per line, '#' starts a comment,
// blank lines ignored. Values keep full precision for doubles.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse_text(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_real(const std::string& key) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::optional<int64_t> get_opt_int(const std::string& key) const;

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set_int(const std::string& key, int64_t v);
  void set_real(const std::string& key, double v);
  void set_bool(const std::string& key, bool v);

  // Throws ConfigError naming the first key outside `allowed`.
  void require_known(const std::vector<std::string>& allowed) const;

  std::string to_text() const;

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace unembed
