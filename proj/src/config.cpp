#include "unembed/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "unembed/errors.hpp"

namespace unembed {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg.kv_[key] = value;
  }
  return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_text(buf.str());
}

std::string KvConfig::get_str(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("missing config key: " + key);
  return it->second;
}

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

int64_t KvConfig::get_int(const std::string& key) const {
  const std::string v = get_str(key);
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key " + key + ": not an integer: " + v);
  return out;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KvConfig::get_real(const std::string& key) const {
  const std::string v = get_str(key);
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: " + v);
  }
}

double KvConfig::get_real(const std::string& key, double fallback) const {
  return has(key) ? get_real(key) : fallback;
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  std::string v = get_str(key);
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + v);
}

std::optional<int64_t> KvConfig::get_opt_int(const std::string& key) const {
  if (!has(key)) return std::nullopt;
  return get_int(key);
}

void KvConfig::set_int(const std::string& key, int64_t v) { kv_[key] = std::to_string(v); }

void KvConfig::set_real(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  kv_[key] = buf;
}

void KvConfig::set_bool(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }

void KvConfig::require_known(const std::vector<std::string>& allowed) const {
  for (const auto& [k, v] : kv_) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError("unknown config key: " + k);
  }
}

std::string KvConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : kv_) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

}  // namespace unembed
