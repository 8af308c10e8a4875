// SPDX-License-Identifier: Apache-2.0
#include "rbwp/cli/config_file.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <vector>

#include "rbwp/harness/run.hpp"

namespace rbwp::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v, std::size_t lo,
                        std::size_t hi) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  if (out < lo || out > hi)
    throw ConfigError("'" + key + "' must lie in [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "], got " + v);
  return out;
}

std::uint64_t parse_seed(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("'" + key + "' expects an unsigned 64-bit integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v, double lo, double hi) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw ConfigError("'" + key + "' expects a real number, got '" + v + "'");
  if (!(out >= lo && out <= hi))
    throw ConfigError("'" + key + "' must lie in [" + harness::format_real(lo) + ", " +
                      harness::format_real(hi) + "], got " + v);
  return out;
}

using Setter = std::function<void(FileConfig&, const std::string& key, const std::string& value)>;

struct Key {
  const char* name;
  Setter set;
};

const std::vector<Key>& keys() {
  constexpr std::size_t big = 1u << 20;
  static const std::vector<Key> table = {
      {"scenario.tasks", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.scenario.tasks = parse_count(k, v, 2, 1000);
       }},
      {"scenario.classes_per_task", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.scenario.classes_per_task = parse_count(k, v, 2, 1000);
       }},
      {"scenario.samples_per_class", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.scenario.samples_per_class = parse_count(k, v, 5, big);
       }},
      {"scenario.separation", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.scenario.separation = parse_real(k, v, 0.0, std::numeric_limits<double>::max());
       }},
      {"scenario.seed", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.scenario.seed = parse_seed(k, v);
       }},
      {"model.layers", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.layers = parse_count(k, v, 1, 64);
       }},
      {"model.dim", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.dim = parse_count(k, v, 2, 4096);
       }},
      {"model.heads", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.heads = parse_count(k, v, 1, 256);
       }},
      {"model.patches", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.patches = parse_count(k, v, 1, 4096);
       }},
      {"model.mlp_dim", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.mlp_dim = parse_count(k, v, 1, 16384);
       }},
      {"model.prompt_length", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.prompt_length = parse_count(k, v, 2, 4096);
       }},
      {"model.proj_dim", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.proj_dim = parse_count(k, v, 1, 4096);
       }},
      {"model.align_dim", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.align_dim = parse_count(k, v, 1, 4096);
       }},
      {"model.encoder_seed", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.model.encoder_seed = parse_seed(k, v);
       }},
      {"loss.lambda_sparse", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.loss.lambda_sparse = parse_real(k, v, 0.0, 1e6);
       }},
      {"loss.lambda_match", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.loss.lambda_match = parse_real(k, v, 0.0, 1e6);
       }},
      {"loss.learning_rate", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.loss.learning_rate = parse_real(k, v, 1e-12, std::numeric_limits<double>::max());
       }},
      {"loss.epochs_per_task", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.loss.epochs_per_task = parse_count(k, v, 1, 100000);
       }},
      {"loss.batch_size", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.loss.batch_size = parse_count(k, v, 1, big);
       }},
      {"gate.tau", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.gate.tau = parse_real(k, v, 1e-6, 1e6);
       }},
      {"gate.soft_phase_fraction", [](FileConfig& c, const std::string& k, const std::string& v) {
         c.run.gate.soft_phase_fraction = parse_real(k, v, 0.0, 1.0);
       }},
      {"run.strategy", [](FileConfig& c, const std::string& k, const std::string& v) {
         try {
           c.run.strategy = harness::parse_strategy(v);
         } catch (const std::invalid_argument&) {
           throw ConfigError("'" + k + "' must be rainbow, fixed_weighted_sum or frozen_specific, got '" +
                             v + "'");
         }
       }},
      {"run.output_dir", [](FileConfig& c, const std::string& k, const std::string& v) {
         if (v.empty()) throw ConfigError("'" + k + "' must not be empty");
         c.output_dir = v;
       }},
  };
  return table;
}

const char* const kRequired[] = {"scenario.tasks", "scenario.classes_per_task", "scenario.seed",
                                 "run.strategy", "run.output_dir"};

}  // namespace

FileConfig parse_config(const std::string& text) {
  static const std::set<std::string> sections{"scenario", "model", "loss", "gate", "run"};
  std::map<std::string, const Key*> by_name;
  for (const auto& k : keys()) by_name[k.name] = &k;

  FileConfig cfg;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t lineno = 1; std::getline(in, raw); ++lineno) {
    const std::string where = "line " + std::to_string(lineno) + ": ";
    std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (!sections.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = section + "." + trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second->set(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  for (const char* k : kRequired)
    if (!seen.count(k)) throw ConfigError("missing required key '" + std::string(k) + "'");
  try {
    cfg.run.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

FileConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string format_config(const FileConfig& c) {
  const auto& r = c.run;
  using harness::format_real;
  std::ostringstream s;
  s << "[scenario]\n"
    << "tasks = " << r.scenario.tasks << '\n'
    << "classes_per_task = " << r.scenario.classes_per_task << '\n'
    << "samples_per_class = " << r.scenario.samples_per_class << '\n'
    << "separation = " << format_real(r.scenario.separation) << '\n'
    << "seed = " << r.scenario.seed << "\n\n"
    << "[model]\n"
    << "layers = " << r.model.layers << '\n'
    << "dim = " << r.model.dim << '\n'
    << "heads = " << r.model.heads << '\n'
    << "patches = " << r.model.patches << '\n'
    << "mlp_dim = " << r.model.mlp_dim << '\n'
    << "prompt_length = " << r.model.prompt_length << '\n'
    << "proj_dim = " << r.model.proj_dim << '\n'
    << "align_dim = " << r.model.align_dim << '\n'
    << "encoder_seed = " << r.model.encoder_seed << "\n\n"
    << "[loss]\n"
    << "lambda_sparse = " << format_real(r.loss.lambda_sparse) << '\n'
    << "lambda_match = " << format_real(r.loss.lambda_match) << '\n'
    << "learning_rate = " << format_real(r.loss.learning_rate) << '\n'
    << "epochs_per_task = " << r.loss.epochs_per_task << '\n'
    << "batch_size = " << r.loss.batch_size << "\n\n"
    << "[gate]\n"
    << "tau = " << format_real(r.gate.tau) << '\n'
    << "soft_phase_fraction = " << format_real(r.gate.soft_phase_fraction) << "\n\n"
    << "[run]\n"
    << "strategy = " << harness::to_string(r.strategy) << '\n'
    << "output_dir = " << c.output_dir.string() << '\n';
  return s.str();
}

diff::Precision precision_from_env() {
  const char* v = std::getenv("RBWP_PRECISION");
  if (!v || std::string(v).empty() || std::string(v) == "32") return diff::Precision::f32;
  if (std::string(v) == "64") return diff::Precision::f64;
  throw ConfigError("RBWP_PRECISION must be 32 or 64, got '" + std::string(v) + "'");
}

}  // namespace rbwp::cli
