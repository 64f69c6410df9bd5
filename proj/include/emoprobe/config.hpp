#pragma once

// Flat TOML-style experiment configuration:
//
//   # comment
//   [section]
//   key = value        # strings may be quoted; lists are comma-separated
//
// Every key must be declared in the schema; unknown sections or keys are
// rejected. resolved() renders the full configuration with defaults filled in.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "emoprobe/errors.hpp"

namespace emoprobe {

struct ConfigKey {
  std::string section;
  std::string key;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema{
      {"corpus", "seed", "1", "synthetic corpus seed"},
      {"corpus", "size", "7000", "number of vignettes"},
      {"corpus", "holdout", "0.2", "fraction held out from training (tail of the corpus)"},
      {"model", "layers", "8", ""},
      {"model", "hidden", "128", ""},
      {"model", "heads", "4", ""},
      {"model", "ffn", "512", ""},
      {"model", "max_seq", "96", ""},
      {"model", "norm_eps", "1e-5", ""},
      {"train", "seed", "7", ""},
      {"train", "steps", "1200", ""},
      {"train", "batch", "16", ""},
      {"train", "lr", "3e-3", ""},
      {"train", "warmup", "60", ""},
      {"train", "min_lr_fraction", "0.1", ""},
      {"train", "weight_decay", "0", ""},
      {"train", "clip", "1", ""},
      {"train", "full_sequence", "false", ""},
      {"train", "templates", "1,2,3,4", "emotion templates in the training mixture"},
      {"train", "shots", "0,2,4", ""},
      {"train", "control_fraction", "0.25", "share of first-word control prompts"},
      {"eval", "template", "1", "1..4 or firstword"},
      {"eval", "shots", "2", ""},
      {"eval", "samples", "1400", "held-out samples used by analyses (0 = all)"},
      {"probe", "seed", "11", ""},
      {"probe", "sites", "mhsa,ffn,hidden", ""},
      {"probe", "layers", "all", "comma list or all"},
      {"probe", "tokens", "-1", "negative offsets from the end"},
      {"probe", "kind", "linear", "linear, mlp"},
      {"probe", "lambda", "0.01", "number, or cv for 5-fold selection per cell"},
      {"probe", "ridge_lambda", "1", ""},
      {"probe", "bootstrap", "1000", ""},
      {"probe", "trace", "", "probe a trace file instead of the toy model"},
      {"patch", "seed", "13", ""},
      {"patch", "sites", "hidden,mhsa,ffn", ""},
      {"patch", "spans", "1,5", ""},
      {"patch", "pairs", "200", ""},
      {"knockout", "seed", "17", ""},
      {"knockout", "span", "3", ""},
      {"knockout", "modes", "zero,random", ""},
      {"steer", "seed", "19", ""},
      {"steer", "layer", "auto", "auto = probe saturation layer"},
      {"steer", "betas", "400,800,1600", ""},
      {"steer", "site", "hidden", ""},
      {"attention", "top_k", "3", ""},
      {"attention", "samples", "200", ""},
      {"run", "jobs", "1", ""},
  };
  return schema;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_schema()) values_[k.section + "." + k.key] = k.default_value;
  }

  static Config parse(const std::string& text, const std::string& origin = "config") {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string where = origin + ":" + std::to_string(lineno) + ": ";
      std::string body = line;
      bool quoted = false;
      for (std::size_t i = 0; i < body.size(); ++i) {
        if (body[i] == '"') quoted = !quoted;
        if (body[i] == '#' && !quoted) {
          body.resize(i);
          break;
        }
      }
      body = trim(body);
      if (body.empty()) continue;
      if (body.front() == '[') {
        if (body.back() != ']') throw ConfigError(where + "malformed section header");
        section = trim(body.substr(1, body.size() - 2));
        if (!c.has_section(section)) throw ConfigError(where + "unknown section [" + section + "]");
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
      if (section.empty()) throw ConfigError(where + "key outside of a section");
      const std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      c.set(section + "." + key, value, where);
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& dotted, const std::string& value, const std::string& where = "") {
    if (!values_.count(dotted)) throw ConfigError(where + "unknown key '" + dotted + "'");
    values_[dotted] = value;
  }

  const std::string& str(const std::string& dotted) const {
    auto it = values_.find(dotted);
    if (it == values_.end()) throw ConfigError("unknown key '" + dotted + "'");
    return it->second;
  }

  double real(const std::string& dotted) const {
    try {
      std::size_t pos = 0;
      const double v = std::stod(str(dotted), &pos);
      if (pos != str(dotted).size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::logic_error&) {
      throw ConfigError("'" + dotted + "' must be a number, got '" + str(dotted) + "'");
    }
  }

  std::uint64_t count(const std::string& dotted) const {
    const std::string& s = str(dotted);
    if (s.empty() || !std::all_of(s.begin(), s.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
      throw ConfigError("'" + dotted + "' must be a non-negative integer, got '" + s + "'");
    try {
      return std::stoull(s);
    } catch (const std::logic_error&) {
      throw ConfigError("'" + dotted + "' is out of range");
    }
  }

  bool flag(const std::string& dotted) const {
    const std::string& s = str(dotted);
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("'" + dotted + "' must be true or false");
  }

  std::vector<std::string> list(const std::string& dotted) const { return split_list(str(dotted)); }

  std::vector<double> reals(const std::string& dotted) const {
    std::vector<double> out;
    for (const auto& s : list(dotted)) {
      try {
        out.push_back(std::stod(s));
      } catch (const std::logic_error&) {
        throw ConfigError("'" + dotted + "' must be a list of numbers");
      }
    }
    return out;
  }

  std::vector<std::int64_t> ints(const std::string& dotted) const {
    std::vector<std::int64_t> out;
    for (const auto& s : list(dotted)) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stoll(s, &pos));
        if (pos != s.size()) throw std::invalid_argument("trailing");
      } catch (const std::logic_error&) {
        throw ConfigError("'" + dotted + "' must be a list of integers");
      }
    }
    return out;
  }

  // Replace every section's seed with one value.
  void override_seeds(std::uint64_t seed) {
    for (auto& [k, v] : values_)
      if (k.size() > 5 && k.compare(k.size() - 5, 5, ".seed") == 0) v = std::to_string(seed);
  }

  std::string resolved() const {
    std::ostringstream os;
    std::string section;
    for (const auto& k : config_schema()) {
      if (k.section != section) {
        if (!section.empty()) os << '\n';
        section = k.section;
        os << '[' << section << "]\n";
      }
      const auto& v = values_.at(k.section + "." + k.key);
      const bool needs_quotes = v.empty() || v.find_first_of(",# ") != std::string::npos;
      os << k.key << " = " << (needs_quotes ? "\"" + v + "\"" : v) << '\n';
    }
    return os.str();
  }

  friend bool operator==(const Config&, const Config&) = default;

 private:
  bool has_section(const std::string& s) const {
    return std::any_of(config_schema().begin(), config_schema().end(), [&](const ConfigKey& k) { return k.section == s; });
  }

  std::map<std::string, std::string> values_;
};

}  // namespace emoprobe
