// SPDX-License-Identifier: Apache-2.0
#include "rbwp/cli/commands.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "rbwp/cli/config_file.hpp"
#include "rbwp/cli/plot.hpp"
#include "rbwp/harness/gradient_suite.hpp"
#include "rbwp/harness/run.hpp"

namespace rbwp::cli {

namespace fs = std::filesystem;
using harness::format_real;

namespace {

FileConfig resolve(const RunOptions& o) {
  FileConfig c = load_config(o.config);
  if (o.seed) c.run.scenario.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  c.run.precision = precision_from_env();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

std::string last_line(const fs::path& path) {
  std::ifstream in(path);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}


/// Runs one strategy into `dir`. NumericalError propagates after the
/// harness has logged the abort.
harness::RunResult train(const FileConfig& cfg, const fs::path& dir) {
  const auto encoder = backbone::Encoder::random(cfg.run.model.encoder(), cfg.run.model.encoder_seed);
  const auto scenario =
      harness::build_scenario(cfg.run.scenario, cfg.run.model.patches, cfg.run.model.dim);
  const auto queries = harness::compute_queries(encoder, scenario);
  harness::Learner learner(cfg.run, encoder);
  fs::create_directories(dir);
  FileConfig written = cfg;
  written.output_dir = dir;
  write_text(dir / "config.ini", format_config(written));
  return harness::run_scenario(learner, scenario, queries, dir);
}

std::string final_line(const harness::RunResult& r) {
  const auto& m = r.steps.back().metrics;
  return "A=" + format_real(m.average_accuracy) + " F=" + format_real(m.forgetting);
}

template <class Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace

int run_command(const RunOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const FileConfig cfg = resolve(options);
    try {
      const auto r = train(cfg, cfg.output_dir);
      out << final_line(r) << '\n';
      return r.immutability_violations.empty() ? int(kOk) : int(kFailure);
    } catch (const NumericalError& e) {
      err << "numerical failure: " << e.what() << '\n'
          << last_line(cfg.output_dir / "events.log") << '\n';
      return int(kFailure);
    }
  });
}

int compare_command(const RunOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const FileConfig base = resolve(options);
    std::ostringstream csv;
    csv << "strategy,scenario_hash,A,F,diversity\n";
    std::vector<Series> series;
    std::vector<harness::Strategy> chosen = options.strategies;
    if (chosen.empty())
      chosen = {harness::Strategy::rainbow, harness::Strategy::fixed_weighted_sum,
                harness::Strategy::frozen_specific};
    for (auto s : chosen) {
      FileConfig cfg = base;
      cfg.run.strategy = s;
      const fs::path dir = base.output_dir / harness::to_string(s);
      harness::RunResult r;
      try {
        r = train(cfg, dir);
      } catch (const NumericalError& e) {
        err << "numerical failure in " << harness::to_string(s) << ": " << e.what() << '\n'
            << last_line(dir / "events.log") << '\n';
        return int(kFailure);
      }
      const auto& last = r.steps.back();
      char hash[17];
      std::snprintf(hash, sizeof hash, "%016llx",
                    static_cast<unsigned long long>(r.scenario_fingerprint));
      csv << r.strategy << ',' << hash << ',' << format_real(last.metrics.average_accuracy) << ','
          << format_real(last.metrics.forgetting) << ','
          << (last.diversity ? format_real(*last.diversity) : "NA") << '\n';
      Series line{r.strategy, {}};
      for (const auto& step : r.steps) line.y.push_back(step.diversity);
      series.push_back(std::move(line));
      out << r.strategy << ' ' << final_line(r) << '\n';
    }
    write_text(base.output_dir / "comparison.csv", csv.str());
    write_text(base.output_dir / "diversity.svg",
               line_chart_svg("Prompt diversity", "task", "nuclear norm", series));
    return int(kOk);
  });
}

int check_command(const CheckOptions& options, std::ostream& out, std::ostream& err) {
  if (!options.gradcheck) {
    err << "check: nothing selected (use --gradcheck)\n";
    return kUsage;
  }
  return guarded(err, [&] {
    harness::GradientSuiteOptions suite;
    suite.corrupt = options.corrupt_gradient;
    bool ok = true;
    double worst = 0.0;
    for (const auto& c : harness::run_gradient_suite(suite)) {
      const auto& r = c.report;
      const bool pass = r.max_relative_error < kGradCheckTolerance;
      ok = ok && pass;
      worst = std::max(worst, r.max_relative_error);
      out << (pass ? "ok   " : "FAIL ") << c.name << " max_rel_err=" << format_real(r.max_relative_error)
          << " at " << r.worst_parameter << '[' << r.worst_index << "] checked=" << r.checked
          << " skipped=" << r.skipped.size() << '\n';
    }
    out << "max relative error " << format_real(worst) << '\n';
    return ok ? int(kOk) : int(kFailure);
  });
}

}  // namespace rbwp::cli
