// Command-line front end for the experiment harness.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "mer/mer.hpp"

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> replicates;
  std::optional<std::string> out_dir;
  std::optional<int> threads;
  double scale = 1.0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mer::ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

mer::ExperimentConfig load(const std::string& path, const Overrides& o) {
  mer::ExperimentConfig cfg = mer::parse_config(read_file(path));
  if (o.seed) cfg.root_seed = *o.seed;
  if (o.replicates) {
    if (*o.replicates < 1) throw mer::ConfigError("--replicates must be at least 1");
    cfg.replicates = *o.replicates;
  }
  return mer::apply_scale(cfg, o.scale);
}

const mer::AggregateCurve& pick(const std::vector<mer::AggregateCurve>& curves, const std::string& tag,
                                const std::string& file) {
  if (tag.empty()) {
    if (curves.size() != 1)
      throw mer::InvalidArgument(file + " holds " + std::to_string(curves.size()) +
                                 " curves; choose one with --algo-a/--algo-b");
    return curves.front();
  }
  for (const auto& c : curves)
    if (c.algorithm == tag) return c;
  throw mer::InvalidArgument(file + " has no curve '" + tag + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic VI solvers under Markovian sampling: experiment runner"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("--seed", o.seed, "Root seed (overrides the config)");
  app.add_option("--replicates", o.replicates, "Replicate count (overrides the config)");
  app.add_option("--out-dir", o.out_dir, "Output directory (overrides config and MER_OUT_DIR)");
  app.add_option("--threads", o.threads, "Worker threads (overrides config and MER_THREADS)");
  app.add_option("--scale", o.scale, "Multiply buffer size and step counts by this factor")->check(CLI::PositiveNumber);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run an experiment config and write CSV artifacts");
  run->add_option("config", config_path, "Config file")->required();

  auto* validate = app.add_subcommand("validate", "Check a config and print it with defaults resolved");
  validate->add_option("config", config_path, "Config file")->required();

  std::string csv_a, csv_b, algo_a, algo_b;
  std::optional<std::size_t> at;
  auto* compare = app.add_subcommand("compare", "Compare two aggregated curves");
  compare->add_option("csv_a", csv_a, "Aggregated CSV")->required();
  compare->add_option("csv_b", csv_b, "Aggregated CSV")->required();
  compare->add_option("--algo-a", algo_a, "Curve to read from the first file");
  compare->add_option("--algo-b", algo_b, "Curve to read from the second file");
  compare->add_option("--at", at, "Compare at this sample count (default: each curve's final point)");

  auto* certify = app.add_subcommand("certify", "Certify the problem assumptions for a config");
  certify->add_option("config", config_path, "Config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      const mer::ValidationResult v = mer::validate_config(read_file(config_path));
      if (!v.ok()) {
        std::cerr << v.report();
        return 2;
      }
      mer::ExperimentConfig cfg = *v.config;
      if (o.seed) cfg.root_seed = *o.seed;
      if (o.replicates) cfg.replicates = *o.replicates;
      cfg = mer::apply_scale(cfg, o.scale);
      std::cout << mer::config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (*run) {
      const mer::ExperimentConfig cfg = load(config_path, o);
      mer::RunControls ctl;
      ctl.out_dir = o.out_dir;
      ctl.threads = o.threads;
      const mer::ExperimentResult res = mer::run_experiment(cfg, ctl);
      for (const auto& c : res.curves) {
        if (c.points.empty()) {
          std::printf("%-10s no data\n", c.algorithm.c_str());
          continue;
        }
        const auto& p = c.points.back();
        std::printf("%-10s final samples=%zu mean=%.6g stderr=%.3g replicates=%d\n", c.algorithm.c_str(),
                    p.samples_consumed, p.mean, p.stderr_, p.replicates);
      }
      std::printf("wrote %s\nwrote %s\nwrote %s\n", res.raw_csv.c_str(), res.aggregate_csv.c_str(),
                  res.metadata_file.c_str());
      const auto failed = res.metadata["failed_cells"].get<std::size_t>();
      if (failed > 0) {
        std::fprintf(stderr, "%zu cell(s) failed; see the metadata file\n", failed);
        return 1;
      }
      return 0;
    }
    if (*compare) {
      const auto curves_a = mer::load_aggregate_csv(csv_a);
      const auto curves_b = mer::load_aggregate_csv(csv_b);
      const auto& a = pick(curves_a, algo_a, csv_a);
      const auto& b = pick(curves_b, algo_b, csv_b);
      const auto where = at ? mer::CompareAt::sample_count(*at) : mer::CompareAt::final_sample();
      const mer::ComparisonReport r = mer::compare_curves(a, b, where);
      std::printf("metric      %s\n", r.metric.c_str());
      std::printf("a           %s at %zu: mean=%.17g stderr=%.6g n=%d\n", r.algorithm_a.c_str(), r.a.samples_consumed,
                  r.a.mean, r.a.stderr_, r.a.replicates);
      std::printf("b           %s at %zu: mean=%.17g stderr=%.6g n=%d\n", r.algorithm_b.c_str(), r.b.samples_consumed,
                  r.b.mean, r.b.stderr_, r.b.replicates);
      std::printf("difference  %.17g (a - b)\n", r.difference);
      std::printf("pooled se   %.6g (%.2f se)\n", r.pooled_stderr, r.gap_in_stderr());
      std::printf("ordering    %s%s\n", r.ordering.c_str(), r.significant ? " (significant at 2 se)" : "");
      return 0;
    }
    if (*certify) {
      const mer::ExperimentConfig cfg = load(config_path, o);
      const mer::CertificationReport rep = mer::certify_config(cfg);
      std::cout << rep.to_json().dump(2) << "\n";
      return 0;
    }
  } catch (const mer::MetricMismatch& e) {
    std::cerr << "metric mismatch: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
