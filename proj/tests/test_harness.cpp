#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <gtest/gtest.h>

#include "mer/harness.hpp"

namespace {

namespace fs = std::filesystem;

const char* kSmall = R"({
  "schema_version": 1,
  "experiment_id": "small",
  "root_seed": 11,
  "replicates": 3,
  "problem": {"type": "synthetic_linear", "A_diag": [1.0, 2.0], "x_star": [1.0, -1.0], "noise_std": 0.5},
  "buffer": {"size": 32, "mode": "static"},
  "error_metric": {"kind": "euclidean", "normalized": false},
  "algorithms": [
    {"tag": "TD", "kind": "serial", "step_size": {"kind": "constant", "eta": 0.1}},
    {"tag": "MER", "kind": "mer", "step_size": {"kind": "constant", "eta": 0.1}}
  ]
})";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mer_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

mer::RunControls in_memory(int threads = 1) {
  mer::RunControls ctl;
  ctl.write_files = false;
  ctl.threads = threads;
  return ctl;
}

std::vector<mer::RawRow> rows_of(const mer::ExperimentResult& r, const std::string& tag) {
  std::vector<mer::RawRow> out;
  for (const auto& row : r.rows)
    if (row.algorithm == tag) out.push_back(row);
  return out;
}

bool same_rows(const std::vector<mer::RawRow>& a, const std::vector<mer::RawRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].seed != b[i].seed || a[i].step != b[i].step || a[i].epoch != b[i].epoch || a[i].error != b[i].error)
      return false;
  return true;
}

bool has_diagnostic(const mer::ValidationResult& v, const std::string& path, const std::string& message) {
  for (const auto& d : v.diagnostics)
    if (d.path == path && d.message.find(message) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Validate, AcceptsTheShippedConfigs) {
  for (const char* name : {"pe_m090.json", "pe_m095.json", "glm_dl20.json", "glm_dl25.json", "synthetic_smoke.json"}) {
    const auto v = mer::validate_config(read_file(fs::path(MER_SOURCE_DIR) / "configs" / name));
    EXPECT_TRUE(v.ok()) << name << "\n" << v.report();
  }
}

TEST(Validate, NonPowerOfTwoBufferForMer) {
  const auto v = mer::validate_config(read_file(fs::path(MER_SOURCE_DIR) / "tests" / "data" / "bad_buffer.json"));
  EXPECT_FALSE(v.ok());
  EXPECT_TRUE(has_diagnostic(v, "buffer.size", "buffer size must be a power of two for MER; nearest lower: 512"))
      << v.report();
}

TEST(Validate, CollectsEveryProblem) {
  auto j = nlohmann::json::parse(kSmall);
  j["algorithms"].push_back({{"tag", "CTD"}, {"kind", "skipped"}, {"skip", 0}});
  j["algorithms"].push_back({{"tag", "TD"}, {"kind", "serial"}});
  j["buffer"]["colour"] = "red";
  j["replicates"] = 0;
  const auto v = mer::validate_config(j.dump());
  EXPECT_FALSE(v.ok());
  EXPECT_TRUE(has_diagnostic(v, "algorithms[2].skip", "skip must be at least 1")) << v.report();
  EXPECT_TRUE(has_diagnostic(v, "algorithms[3].tag", "duplicate tag")) << v.report();
  EXPECT_TRUE(has_diagnostic(v, "buffer.colour", "unknown field")) << v.report();
  EXPECT_TRUE(has_diagnostic(v, "replicates", "at least 1")) << v.report();
  EXPECT_THROW(mer::parse_config(j.dump()), mer::ConfigError);
}

TEST(Validate, RejectsMalformedInput) {
  EXPECT_FALSE(mer::validate_config("{not json").ok());
  EXPECT_FALSE(mer::validate_config("[]").ok());
  auto j = nlohmann::json::parse(kSmall);
  j["schema_version"] = 2;
  EXPECT_TRUE(has_diagnostic(mer::validate_config(j.dump()), "schema_version", "unsupported version"));
  j = nlohmann::json::parse(kSmall);
  j["algorithms"][1]["epochs"] = 6;
  EXPECT_TRUE(has_diagnostic(mer::validate_config(j.dump()), "algorithms[1].epochs", "log2 B = 5"));
}

TEST(Config, RoundTripsThroughJson) {
  for (const char* name : {"pe_m090.json", "glm_dl20.json", "synthetic_smoke.json"}) {
    const auto cfg = mer::load_config(fs::path(MER_SOURCE_DIR) / "configs" / name);
    const auto dumped = mer::config_to_json(cfg);
    EXPECT_EQ(mer::config_to_json(mer::parse_config(dumped.dump())), dumped) << name;
  }
}

TEST(Config, DefaultsResolve) {
  const auto cfg = mer::parse_config(kSmall);
  ASSERT_EQ(cfg.algorithms.size(), 2u);
  EXPECT_EQ(cfg.algorithms[1].epochs, 5);
  EXPECT_FALSE(cfg.algorithms[0].averaging);
  EXPECT_EQ(cfg.buffer_mode, mer::BufferMode::Static);
}

TEST(Config, ScalingKeepsTheFinalReplayGap) {
  const auto cfg = mer::load_config(fs::path(MER_SOURCE_DIR) / "configs" / "pe_m090.json");
  const auto small = mer::apply_scale(cfg, 0.25);
  EXPECT_EQ(small.buffer_size, 4096u);
  for (const auto& a : small.algorithms) {
    if (a.kind == mer::AlgorithmKind::MER) {
      EXPECT_EQ(small.buffer_size >> a.epochs, cfg.buffer_size >> 13);
    }
  }
  EXPECT_THROW(mer::apply_scale(cfg, 0.0), mer::ConfigError);
}

TEST(Run, TenSerialStepsGiveTenRows) {
  auto j = nlohmann::json::parse(kSmall);
  j["replicates"] = 1;
  j["buffer"]["size"] = 10;
  j["algorithms"] = nlohmann::json::array({j["algorithms"][0]});
  const auto res = mer::run_experiment(mer::parse_config(j.dump()), in_memory());
  ASSERT_EQ(res.rows.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(res.rows[i].samples_consumed, i + 1);
}

TEST(Run, MerCurveHasOnePointPerEpoch) {
  const auto res = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  const auto& c = res.curve("MER");
  ASSERT_EQ(c.points.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(c.points[k].samples_consumed, std::size_t{2} << k);
    EXPECT_EQ(c.points[k].replicates, 3);
  }
}

TEST(Run, ThreadCountDoesNotChangeOutputFiles) {
  const auto cfg = mer::load_config(fs::path(MER_SOURCE_DIR) / "configs" / "synthetic_smoke.json");
  std::string raw[2], agg[2];
  for (int i = 0; i < 2; ++i) {
    mer::RunControls ctl;
    ctl.threads = i == 0 ? 1 : 4;
    ctl.out_dir = scratch_dir("threads" + std::to_string(i)).string();
    const auto res = mer::run_experiment(cfg, ctl);
    raw[i] = read_file(res.raw_csv);
    agg[i] = read_file(res.aggregate_csv);
    EXPECT_FALSE(raw[i].empty());
  }
  EXPECT_EQ(raw[0], raw[1]);
  EXPECT_EQ(agg[0], agg[1]);
}

TEST(Run, AddingAnAlgorithmLeavesOthersUntouched) {
  const auto base = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  auto j = nlohmann::json::parse(kSmall);
  j["algorithms"].insert(j["algorithms"].begin(), nlohmann::json::parse(
      R"({"tag": "CTD", "kind": "skipped", "skip": 4, "step_size": {"kind": "constant", "eta": 0.2}})"));
  const auto more = mer::run_experiment(mer::parse_config(j.dump()), in_memory(2));
  EXPECT_TRUE(same_rows(rows_of(base, "TD"), rows_of(more, "TD")));
  EXPECT_TRUE(same_rows(rows_of(base, "MER"), rows_of(more, "MER")));
  EXPECT_FALSE(rows_of(more, "CTD").empty());
}

TEST(Run, SerialAndMerShareTheReplicateData) {
  // With log2 B epochs on a static buffer the last MER epoch replays TD exactly.
  const auto res = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  for (int r = 0; r < 3; ++r) {
    const auto& td = res.cells[static_cast<std::size_t>(r)];
    const auto& m = res.cells[static_cast<std::size_t>(3 + r)];
    ASSERT_EQ(td.algorithm, "TD");
    ASSERT_EQ(m.algorithm, "MER");
    EXPECT_EQ(td.traces[0].final_iterate, m.traces.back().final_iterate);
  }
}

TEST(Run, AggregateIsTheMeanOfRawRows) {
  const auto res = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> groups;
  for (const auto& r : res.rows) groups[{r.algorithm, r.samples_consumed}].push_back(r.error);
  std::size_t checked = 0;
  for (const auto& c : res.curves)
    for (const auto& p : c.points) {
      const auto& v = groups.at({c.algorithm, p.samples_consumed});
      double mean = 0.0;
      for (double e : v) mean += e;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double e : v) var += (e - mean) * (e - mean);
      const double se = std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
      EXPECT_NEAR(p.mean, mean, 1e-12 * std::max(1.0, mean));
      EXPECT_NEAR(p.stderr_, se, 1e-12 * std::max(1.0, se));
      ++checked;
    }
  EXPECT_EQ(checked, groups.size());
}

TEST(Run, ErrorsAreNormalisedByTheInitialError) {
  auto j = nlohmann::json::parse(kSmall);
  j["error_metric"]["normalized"] = true;
  j["record"] = {{"kind", "all"}};
  j["algorithms"][0]["step_size"]["eta"] = 1e-12;
  j["algorithms"] = nlohmann::json::array({j["algorithms"][0]});
  const auto res = mer::run_experiment(mer::parse_config(j.dump()), in_memory());
  EXPECT_EQ(res.metric_tag, "normalized_l2sq");
  EXPECT_NEAR(res.rows.front().error, 1.0, 1e-9);
}

TEST(Csv, AggregateRoundTripsBitwise) {
  const auto res = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  std::stringstream ss;
  mer::write_aggregate_csv(ss, res.curves);
  EXPECT_NE(ss.str().find("\r\n"), std::string::npos);
  const auto back = mer::read_aggregate_csv(ss);
  ASSERT_EQ(back.size(), res.curves.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].algorithm, res.curves[i].algorithm);
    EXPECT_EQ(back[i].metric, res.curves[i].metric);
    ASSERT_EQ(back[i].points.size(), res.curves[i].points.size());
    for (std::size_t k = 0; k < back[i].points.size(); ++k) {
      EXPECT_EQ(back[i].points[k].mean, res.curves[i].points[k].mean);
      EXPECT_EQ(back[i].points[k].stderr_, res.curves[i].points[k].stderr_);
      EXPECT_EQ(back[i].points[k].samples_consumed, res.curves[i].points[k].samples_consumed);
    }
  }
}

TEST(Csv, FilesAreWrittenWithHeaders) {
  mer::RunControls ctl;
  ctl.threads = 1;
  ctl.out_dir = scratch_dir("files").string();
  const auto res = mer::run_experiment(mer::parse_config(kSmall), ctl);
  const auto raw = read_file(res.raw_csv);
  EXPECT_EQ(raw.rfind("experiment_id,algorithm,seed,epoch,step,samples_consumed,error,metric\r\n", 0), 0u);
  const auto meta = nlohmann::json::parse(read_file(res.metadata_file));
  EXPECT_EQ(meta["experiment_id"], "small");
  EXPECT_EQ(meta["replicates"].size(), 3u);
  EXPECT_EQ(mer::load_aggregate_csv(res.aggregate_csv).size(), 2u);
}

TEST(Csv, RejectsForeignFiles) {
  std::stringstream bad("a,b,c\r\n1,2,3\r\n");
  EXPECT_THROW(mer::read_aggregate_csv(bad), mer::InvalidArgument);
  std::stringstream empty;
  EXPECT_THROW(mer::read_aggregate_csv(empty), mer::InvalidArgument);
}

TEST(Compare, CurveAgainstItselfIsATie) {
  const auto res = mer::run_experiment(mer::parse_config(kSmall), in_memory());
  const auto rep = mer::compare_curves(res.curve("TD"), res.curve("TD"), mer::CompareAt::final_sample());
  EXPECT_EQ(rep.difference, 0.0);
  EXPECT_FALSE(rep.significant);
  EXPECT_EQ(rep.ordering, "tie");
}

TEST(Compare, PooledStandardErrorByHand) {
  mer::AggregateCurve a{"x", "A", "l2sq", {{10, 1.0, 0.3, 5}, {20, 0.5, 0.03, 5}}};
  mer::AggregateCurve b{"x", "B", "l2sq", {{10, 2.0, 0.4, 5}, {40, 0.9, 0.04, 5}}};
  const auto at10 = mer::compare_curves(a, b, mer::CompareAt::sample_count(10));
  EXPECT_DOUBLE_EQ(at10.pooled_stderr, 0.5);
  EXPECT_DOUBLE_EQ(at10.difference, -1.0);
  EXPECT_TRUE(at10.significant);
  EXPECT_EQ(at10.ordering, "a<b");
  // At 30, A reads its point at 20 and B its point at 10.
  const auto at30 = mer::compare_curves(a, b, mer::CompareAt::sample_count(30));
  EXPECT_EQ(at30.a.samples_consumed, 20u);
  EXPECT_EQ(at30.b.samples_consumed, 10u);
  EXPECT_THROW(mer::compare_curves(a, b, mer::CompareAt::sample_count(5)), mer::InvalidArgument);
  const auto fin = mer::compare_curves(a, b, mer::CompareAt::final_sample());
  EXPECT_NEAR(fin.gap_in_stderr(), 0.4 / 0.05, 1e-12);
}

TEST(Compare, DifferentMetricsAreRefused) {
  mer::AggregateCurve a{"x", "A", "l2sq", {{10, 1.0, 0.3, 5}}};
  mer::AggregateCurve b{"x", "B", "pisq", {{10, 1.0, 0.3, 5}}};
  EXPECT_THROW(mer::compare_curves(a, b, mer::CompareAt::final_sample()), mer::MetricMismatch);
}

TEST(Certify, GaussianSyntheticNoiseIsIndependent) {
  const auto rep = mer::certify_config(mer::parse_config(kSmall));
  EXPECT_EQ(rep.bias_method, "independent");
  for (double b : rep.bias_at_solution) EXPECT_EQ(b, 0.0);
  EXPECT_TRUE(rep.lipschitz_ok);
}
