#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mer/analysis.hpp"
#include "mer/bellman.hpp"
#include "mer/core.hpp"
#include "mer/csv.hpp"
#include "mer/errors.hpp"
#include "mer/problems.hpp"
#include "mer/rng.hpp"
#include "mer/solvers.hpp"
#include "mer/sources.hpp"

namespace mer {

inline constexpr const char* kLibraryVersion = "1.0.0";
inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct RegionConfig {
  std::optional<double> ball_radius;  // ball centred at the origin; absent = unconstrained
};

struct PolicyEvalConfig {
  int num_states = 30;
  int feature_dim = 16;
  double stickiness = 0.9;
  double gamma = 0.8;
  bool orthonormalize = false;
};

struct GLMConfig {
  int dimension = 50;
  std::string link = "sigmoid";
  double noise_std = 0.1;
  double x_star_radius = 1.0;  // x* uniform on the sphere of this radius, per replicate
  ARProcessConfig covariates;  // dimension and seed are filled per replicate
  int kappa_samples = 100000;
  std::string stationary_sampler = "exact_gaussian";  // or "restart"
  RegionConfig region;
};

struct SyntheticConfig {
  Matrix A;
  Vector x_star;
  double noise_std = 1.0;
  std::string noise = "gaussian";  // or "sticky_chain"
  int chain_states = 8;
  double chain_stickiness = 0.7;
  RegionConfig region;
};

using ProblemConfig = std::variant<PolicyEvalConfig, GLMConfig, SyntheticConfig>;

inline const char* problem_type(const ProblemConfig& p) {
  switch (p.index()) {
    case 0: return "policy_evaluation";
    case 1: return "glm";
    default: return "synthetic_linear";
  }
}

enum class AlgorithmKind { Serial, Skipped, MER, SSER, IID };

inline const char* to_string(AlgorithmKind k) {
  switch (k) {
    case AlgorithmKind::Serial: return "serial";
    case AlgorithmKind::Skipped: return "skipped";
    case AlgorithmKind::MER: return "mer";
    case AlgorithmKind::SSER: return "sser";
    default: return "iid";
  }
}

/// Step-size policy as written in a config. Theorem constants not given
/// explicitly are resolved per replicate from the problem.
struct StepSizeConfig {
  std::string kind = "constant";  // constant | inverse_t | theorem
  double eta = 0.1;
  double c = 1.0;
  std::map<std::string, double> theorem_overrides;  // mu, zeta_sq, Lbar, M, D, sigma_sq, F_star_norm, C_M, C_B
};

struct AlgorithmConfig {
  std::string tag;
  AlgorithmKind kind = AlgorithmKind::Serial;
  std::size_t skip = 1;
  int epochs = 0;  // MER; 0 resolves to log2 B
  std::string reinit = "fixed";  // fixed | ball
  double reinit_radius = 0.0;
  double tau_M = 0.0;           // SSER
  std::optional<double> beta;   // SSER; default 1.5 log T
  std::size_t steps = 0;        // SSER and i.i.d.; i.i.d. defaults to B
  bool averaging = false;
  StepSizeConfig step;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string experiment_id = "experiment";
  std::uint64_t root_seed = 0;
  int replicates = 1;
  int threads = 0;  // 0 = hardware concurrency
  std::string output_dir = "results";
  ProblemConfig problem = PolicyEvalConfig{};
  std::size_t buffer_size = 1024;
  BufferMode buffer_mode = BufferMode::Static;
  std::optional<Vector> initial_point;  // zero when absent
  std::string metric = "euclidean";  // euclidean | pi_weighted
  bool normalized = true;
  RecordPolicy record = RecordPolicy::all();
  std::vector<AlgorithmConfig> algorithms;
};

struct Diagnostic {
  std::string path;
  std::string message;

  std::string str() const { return path.empty() ? message : path + ": " + message; }
};

struct ValidationResult {
  std::optional<ExperimentConfig> config;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return diagnostics.empty() && config.has_value(); }
  std::string report() const {
    std::string out;
    for (const auto& d : diagnostics) out += d.str() + "\n";
    return out;
  }
};

namespace detail {

using nlohmann::json;

/// Field reader that turns type errors and unknown keys into diagnostics.
class Reader {
 public:
  explicit Reader(std::vector<Diagnostic>& diags) : diags_(diags) {}

  void error(const std::string& path, const std::string& msg) { diags_.push_back({path, msg}); }

  bool object(const json& j, const std::string& path) {
    if (j.is_object()) return true;
    error(path, "expected an object");
    return false;
  }

  void allow_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
    if (!j.is_object()) return;
    for (const auto& [k, v] : j.items()) {
      bool known = false;
      for (const char* key : keys) known = known || k == key;
      if (!known) error(join(path, k), "unknown field");
    }
  }

  template <class T>
  std::optional<T> get(const json& j, const std::string& path, const char* key, bool required = false) {
    const std::string p = join(path, key);
    if (!j.is_object() || !j.contains(key)) {
      if (required) error(p, "required field missing");
      return std::nullopt;
    }
    const json& v = j.at(key);
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw std::runtime_error("");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer() && !v.is_number_unsigned()) throw std::runtime_error("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw std::runtime_error("");
        }
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::runtime_error("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::runtime_error("");
      }
      return v.get<T>();
    } catch (...) {
      error(p, std::string("expected ") + type_name<T>());
      return std::nullopt;
    }
  }

  std::optional<Vector> vector(const json& j, const std::string& path, const char* key) {
    if (!j.contains(key)) return std::nullopt;
    const json& v = j.at(key);
    const std::string p = join(path, key);
    if (!v.is_array()) {
      error(p, "expected an array of numbers");
      return std::nullopt;
    }
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) {
        error(p + "[" + std::to_string(i) + "]", "expected a number");
        return std::nullopt;
      }
      out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
    }
    return out;
  }

  std::optional<Matrix> matrix(const json& j, const std::string& path, const char* key) {
    if (!j.contains(key)) return std::nullopt;
    const json& v = j.at(key);
    const std::string p = join(path, key);
    if (!v.is_array() || v.empty() || !v[0].is_array()) {
      error(p, "expected a non-empty array of rows");
      return std::nullopt;
    }
    const std::size_t cols = v[0].size();
    Matrix out(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_array() || v[i].size() != cols) {
        error(p + "[" + std::to_string(i) + "]", "rows must have equal length");
        return std::nullopt;
      }
      for (std::size_t c = 0; c < cols; ++c) {
        if (!v[i][c].is_number()) {
          error(p + "[" + std::to_string(i) + "][" + std::to_string(c) + "]", "expected a number");
          return std::nullopt;
        }
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v[i][c].get<double>();
      }
    }
    return out;
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }

 private:
  template <class T>
  static const char* type_name() {
    if constexpr (std::is_same_v<T, double>) return "a number";
    else if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
    else return "an integer";
  }

  std::vector<Diagnostic>& diags_;
};

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline json matrix_json(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vector_json(m.row(i).transpose()));
  return a;
}

inline void read_region(Reader& rd, const json& j, const std::string& path, RegionConfig& out) {
  if (!j.contains("region")) return;
  const std::string p = Reader::join(path, "region");
  const json& r = j.at("region");
  if (!rd.object(r, p)) return;
  rd.allow_keys(r, p, {"kind", "radius"});
  const auto kind = rd.get<std::string>(r, p, "kind", true);
  if (!kind) return;
  if (*kind == "unconstrained") {
    out.ball_radius.reset();
  } else if (*kind == "ball") {
    const auto radius = rd.get<double>(r, p, "radius", true);
    if (radius && !(*radius > 0.0)) rd.error(Reader::join(p, "radius"), "must be positive");
    out.ball_radius = radius;
  } else {
    rd.error(Reader::join(p, "kind"), "must be 'unconstrained' or 'ball'");
  }
}

inline json region_json(const RegionConfig& r) {
  if (!r.ball_radius) return {{"kind", "unconstrained"}};
  return {{"kind", "ball"}, {"radius", *r.ball_radius}};
}

inline std::optional<ProblemConfig> read_problem(Reader& rd, const json& j) {
  const std::string path = "problem";
  if (!j.contains("problem")) {
    rd.error(path, "required field missing");
    return std::nullopt;
  }
  const json& p = j.at("problem");
  if (!rd.object(p, path)) return std::nullopt;
  const auto type = rd.get<std::string>(p, path, "type", true);
  if (!type) return std::nullopt;

  if (*type == "policy_evaluation") {
    rd.allow_keys(p, path, {"type", "num_states", "feature_dim", "stickiness", "gamma", "orthonormalize"});
    PolicyEvalConfig c;
    c.num_states = rd.get<int>(p, path, "num_states").value_or(c.num_states);
    c.feature_dim = rd.get<int>(p, path, "feature_dim").value_or(c.feature_dim);
    c.stickiness = rd.get<double>(p, path, "stickiness").value_or(c.stickiness);
    c.gamma = rd.get<double>(p, path, "gamma").value_or(c.gamma);
    c.orthonormalize = rd.get<bool>(p, path, "orthonormalize").value_or(c.orthonormalize);
    if (c.num_states < 2) rd.error(path + ".num_states", "must be at least 2");
    if (c.feature_dim < 1 || c.feature_dim > c.num_states)
      rd.error(path + ".feature_dim", "must lie in [1, num_states]");
    if (!(c.stickiness >= 0.5 && c.stickiness < 1.0)) rd.error(path + ".stickiness", "must lie in [0.5, 1)");
    if (!(c.gamma >= 0.0 && c.gamma < 1.0)) rd.error(path + ".gamma", "must lie in [0, 1)");
    return c;
  }

  if (*type == "glm") {
    rd.allow_keys(p, path, {"type", "dimension", "link", "noise_std", "x_star_radius", "covariates", "kappa_samples",
                            "stationary_sampler", "region"});
    GLMConfig c;
    c.dimension = rd.get<int>(p, path, "dimension").value_or(c.dimension);
    c.link = rd.get<std::string>(p, path, "link").value_or(c.link);
    c.noise_std = rd.get<double>(p, path, "noise_std").value_or(c.noise_std);
    c.x_star_radius = rd.get<double>(p, path, "x_star_radius").value_or(c.x_star_radius);
    c.kappa_samples = rd.get<int>(p, path, "kappa_samples").value_or(c.kappa_samples);
    c.stationary_sampler = rd.get<std::string>(p, path, "stationary_sampler").value_or(c.stationary_sampler);
    if (p.contains("covariates")) {
      const std::string cp = path + ".covariates";
      const json& cv = p.at("covariates");
      if (rd.object(cv, cp)) {
        rd.allow_keys(cv, cp, {"num_large", "large_eigenvalue", "small_eig_std", "noise_variance", "burn_in"});
        auto& a = c.covariates;
        a.num_large = rd.get<int>(cv, cp, "num_large").value_or(a.num_large);
        a.large_eigenvalue = rd.get<double>(cv, cp, "large_eigenvalue").value_or(a.large_eigenvalue);
        a.small_eig_std = rd.get<double>(cv, cp, "small_eig_std").value_or(a.small_eig_std);
        a.noise_variance = rd.get<double>(cv, cp, "noise_variance").value_or(a.noise_variance);
        a.burn_in = rd.get<int>(cv, cp, "burn_in").value_or(a.burn_in);
      }
    }
    c.covariates.dimension = c.dimension;
    read_region(rd, p, path, c.region);
    if (c.dimension < 1) rd.error(path + ".dimension", "must be positive");
    if (c.link != "sigmoid" && c.link != "identity") rd.error(path + ".link", "must be 'sigmoid' or 'identity'");
    if (!(c.noise_std >= 0.0)) rd.error(path + ".noise_std", "must be non-negative");
    if (!(c.x_star_radius > 0.0)) rd.error(path + ".x_star_radius", "must be positive");
    if (c.kappa_samples < 2) rd.error(path + ".kappa_samples", "must be at least 2");
    if (c.stationary_sampler != "exact_gaussian" && c.stationary_sampler != "restart")
      rd.error(path + ".stationary_sampler", "must be 'exact_gaussian' or 'restart'");
    try {
      c.covariates.validate();
    } catch (const Error& e) {
      rd.error(path + ".covariates", e.what());
    }
    return c;
  }

  if (*type == "synthetic_linear") {
    rd.allow_keys(p, path, {"type", "A", "A_diag", "x_star", "noise_std", "noise", "region"});
    SyntheticConfig c;
    const auto x_star = rd.vector(p, path, "x_star");
    if (!x_star) {
      if (!p.contains("x_star")) rd.error(path + ".x_star", "required field missing");
      return std::nullopt;
    }
    c.x_star = *x_star;
    const auto n = c.x_star.size();
    if (p.contains("A") && p.contains("A_diag")) rd.error(path, "give either A or A_diag, not both");
    if (const auto A = rd.matrix(p, path, "A")) {
      c.A = *A;
    } else if (const auto diag = rd.vector(p, path, "A_diag")) {
      c.A = diag->asDiagonal();
    } else if (!p.contains("A") && !p.contains("A_diag")) {
      c.A = Matrix::Identity(n, n);
    } else {
      return std::nullopt;
    }
    if (c.A.rows() != n || c.A.cols() != n) {
      rd.error(path + ".A", "must be n x n with n = dim(x_star) = " + std::to_string(n));
      return std::nullopt;
    }
    const Matrix sym = 0.5 * (c.A + c.A.transpose());
    if (Eigen::SelfAdjointEigenSolver<Matrix>(sym, Eigen::EigenvaluesOnly).eigenvalues()(0) <= 0.0)
      rd.error(path + ".A", "symmetric part must be positive definite");
    c.noise_std = rd.get<double>(p, path, "noise_std").value_or(c.noise_std);
    if (!(c.noise_std >= 0.0)) rd.error(path + ".noise_std", "must be non-negative");
    if (p.contains("noise")) {
      const std::string np = path + ".noise";
      const json& nz = p.at("noise");
      if (rd.object(nz, np)) {
        rd.allow_keys(nz, np, {"kind", "num_states", "stickiness"});
        c.noise = rd.get<std::string>(nz, np, "kind").value_or(c.noise);
        c.chain_states = rd.get<int>(nz, np, "num_states").value_or(c.chain_states);
        c.chain_stickiness = rd.get<double>(nz, np, "stickiness").value_or(c.chain_stickiness);
        if (c.noise != "gaussian" && c.noise != "sticky_chain")
          rd.error(np + ".kind", "must be 'gaussian' or 'sticky_chain'");
        if (c.chain_states < 2) rd.error(np + ".num_states", "must be at least 2");
        if (!(c.chain_stickiness >= 0.5 && c.chain_stickiness < 1.0))
          rd.error(np + ".stickiness", "must lie in [0.5, 1)");
      }
    }
    read_region(rd, p, path, c.region);
    return c;
  }

  rd.error(path + ".type", "must be one of policy_evaluation, glm, synthetic_linear");
  return std::nullopt;
}

inline json problem_json(const ProblemConfig& pc) {
  if (const auto* p = std::get_if<PolicyEvalConfig>(&pc))
    return {{"type", "policy_evaluation"}, {"num_states", p->num_states}, {"feature_dim", p->feature_dim},
            {"stickiness", p->stickiness},  {"gamma", p->gamma},           {"orthonormalize", p->orthonormalize}};
  if (const auto* g = std::get_if<GLMConfig>(&pc))
    return {{"type", "glm"},
            {"dimension", g->dimension},
            {"link", g->link},
            {"noise_std", g->noise_std},
            {"x_star_radius", g->x_star_radius},
            {"covariates",
             {{"num_large", g->covariates.num_large},
              {"large_eigenvalue", g->covariates.large_eigenvalue},
              {"small_eig_std", g->covariates.small_eig_std},
              {"noise_variance", g->covariates.noise_variance},
              {"burn_in", g->covariates.burn_in}}},
            {"kappa_samples", g->kappa_samples},
            {"stationary_sampler", g->stationary_sampler},
            {"region", region_json(g->region)}};
  const auto& s = std::get<SyntheticConfig>(pc);
  return {{"type", "synthetic_linear"},
          {"A", matrix_json(s.A)},
          {"x_star", vector_json(s.x_star)},
          {"noise_std", s.noise_std},
          {"noise", {{"kind", s.noise}, {"num_states", s.chain_states}, {"stickiness", s.chain_stickiness}}},
          {"region", region_json(s.region)}};
}

inline std::optional<StepSizeConfig> read_step(Reader& rd, const json& a, const std::string& path) {
  const std::string p = path + ".step_size";
  if (!a.contains("step_size")) {
    rd.error(p, "required field missing");
    return std::nullopt;
  }
  const json& s = a.at("step_size");
  if (!rd.object(s, p)) return std::nullopt;
  StepSizeConfig c;
  const auto kind = rd.get<std::string>(s, p, "kind", true);
  if (!kind) return std::nullopt;
  c.kind = *kind;
  if (c.kind == "constant") {
    rd.allow_keys(s, p, {"kind", "eta"});
    const auto eta = rd.get<double>(s, p, "eta", true);
    if (eta) c.eta = *eta;
    if (eta && !(*eta > 0.0)) rd.error(p + ".eta", "step size must be positive");
  } else if (c.kind == "inverse_t") {
    rd.allow_keys(s, p, {"kind", "c"});
    const auto cc = rd.get<double>(s, p, "c", true);
    if (cc) c.c = *cc;
    if (cc && !(*cc > 0.0)) rd.error(p + ".c", "must be positive");
  } else if (c.kind == "theorem") {
    static constexpr std::initializer_list<const char*> keys = {"mu", "zeta_sq", "Lbar", "M", "D",
                                                                "sigma_sq", "F_star_norm", "C_M", "C_B"};
    rd.allow_keys(s, p, {"kind", "mu", "zeta_sq", "Lbar", "M", "D", "sigma_sq", "F_star_norm", "C_M", "C_B"});
    for (const char* k : keys)
      if (const auto v = rd.get<double>(s, p, k)) c.theorem_overrides[k] = *v;
    if (c.theorem_overrides.count("mu") && !(c.theorem_overrides["mu"] > 0.0)) rd.error(p + ".mu", "must be positive");
  } else {
    rd.error(p + ".kind", "must be constant, inverse_t or theorem");
  }
  return c;
}

inline json step_json(const StepSizeConfig& s) {
  json j = {{"kind", s.kind}};
  if (s.kind == "constant") j["eta"] = s.eta;
  if (s.kind == "inverse_t") j["c"] = s.c;
  if (s.kind == "theorem")
    for (const auto& [k, v] : s.theorem_overrides) j[k] = v;
  return j;
}

inline double default_sser_beta(std::size_t T) { return 1.5 * std::log(static_cast<double>(T)); }

}  // namespace detail

/// Parses and cross-checks a config document, collecting every problem
/// instead of stopping at the first.
inline ValidationResult validate_config(const std::string& text) {
  using detail::json;
  ValidationResult out;
  auto& diags = out.diagnostics;
  detail::Reader rd(diags);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    diags.push_back({"", std::string("not valid JSON: ") + e.what()});
    return out;
  }
  if (!rd.object(j, "")) return out;
  rd.allow_keys(j, "", {"schema_version", "experiment_id", "root_seed", "replicates", "threads", "output_dir",
                        "problem", "buffer", "initial_point", "error_metric", "record", "algorithms"});

  ExperimentConfig cfg;
  const auto version = rd.get<int>(j, "", "schema_version", true);
  if (version && *version != kSchemaVersion)
    rd.error("schema_version", "unsupported version " + std::to_string(*version) + " (expected " +
                                   std::to_string(kSchemaVersion) + ")");
  cfg.experiment_id = rd.get<std::string>(j, "", "experiment_id").value_or(cfg.experiment_id);
  if (cfg.experiment_id.empty() || cfg.experiment_id.find_first_of("/\\") != std::string::npos)
    rd.error("experiment_id", "must be a non-empty name without path separators");
  cfg.root_seed = rd.get<std::uint64_t>(j, "", "root_seed").value_or(cfg.root_seed);
  cfg.replicates = rd.get<int>(j, "", "replicates").value_or(cfg.replicates);
  if (cfg.replicates < 1) rd.error("replicates", "must be at least 1");
  cfg.threads = rd.get<int>(j, "", "threads").value_or(cfg.threads);
  if (cfg.threads < 0) rd.error("threads", "must be non-negative");
  cfg.output_dir = rd.get<std::string>(j, "", "output_dir").value_or(cfg.output_dir);

  const auto problem = detail::read_problem(rd, j);
  if (problem) cfg.problem = *problem;

  if (!j.contains("buffer")) {
    rd.error("buffer", "required field missing");
  } else if (rd.object(j["buffer"], "buffer")) {
    const json& b = j["buffer"];
    rd.allow_keys(b, "buffer", {"size", "mode"});
    const auto size = rd.get<std::size_t>(b, "buffer", "size", true);
    if (size) cfg.buffer_size = *size;
    if (size && *size < 1) rd.error("buffer.size", "must be at least 1");
    const auto mode = rd.get<std::string>(b, "buffer", "mode").value_or("static");
    if (mode == "static") cfg.buffer_mode = BufferMode::Static;
    else if (mode == "dynamic") cfg.buffer_mode = BufferMode::Dynamic;
    else rd.error("buffer.mode", "must be 'static' or 'dynamic'");
  }

  if (j.contains("initial_point")) {
    const json& ip = j["initial_point"];
    if (ip.is_string() && ip.get<std::string>() == "zero") {
      cfg.initial_point.reset();
    } else {
      cfg.initial_point = rd.vector(j, "", "initial_point");
    }
  }

  if (j.contains("error_metric")) {
    const json& m = j["error_metric"];
    if (rd.object(m, "error_metric")) {
      rd.allow_keys(m, "error_metric", {"kind", "normalized"});
      cfg.metric = rd.get<std::string>(m, "error_metric", "kind").value_or(cfg.metric);
      cfg.normalized = rd.get<bool>(m, "error_metric", "normalized").value_or(cfg.normalized);
      if (cfg.metric != "euclidean" && cfg.metric != "pi_weighted")
        rd.error("error_metric.kind", "must be 'euclidean' or 'pi_weighted'");
    }
  }
  if (cfg.metric == "pi_weighted" && !std::holds_alternative<PolicyEvalConfig>(cfg.problem))
    rd.error("error_metric.kind", "pi_weighted needs a policy_evaluation problem");

  if (j.contains("record")) {
    const json& r = j["record"];
    if (rd.object(r, "record")) {
      rd.allow_keys(r, "record", {"kind", "points_per_decade"});
      const auto kind = rd.get<std::string>(r, "record", "kind").value_or("all");
      const int per = rd.get<int>(r, "record", "points_per_decade").value_or(20);
      if (kind == "all") cfg.record = RecordPolicy::all();
      else if (kind == "log_grid") cfg.record = RecordPolicy::log_grid(per);
      else if (kind == "final_only") cfg.record = RecordPolicy::final_only();
      else rd.error("record.kind", "must be all, log_grid or final_only");
      if (kind == "log_grid" && per < 1) rd.error("record.points_per_decade", "must be at least 1");
    }
  }

  const Eigen::Index dim = std::visit(
      [](const auto& p) -> Eigen::Index {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, PolicyEvalConfig>) return p.feature_dim;
        else if constexpr (std::is_same_v<P, GLMConfig>) return p.dimension;
        else return p.x_star.size();
      },
      cfg.problem);
  if (cfg.initial_point && cfg.initial_point->size() != dim)
    rd.error("initial_point", "dimension " + std::to_string(cfg.initial_point->size()) + " != problem dimension " +
                                  std::to_string(dim));

  const bool default_averaging = std::holds_alternative<PolicyEvalConfig>(cfg.problem);
  const std::size_t B = cfg.buffer_size;
  if (!j.contains("algorithms") || !j["algorithms"].is_array() || j["algorithms"].empty()) {
    rd.error("algorithms", "must be a non-empty array");
  } else {
    std::set<std::string> tags;
    const json& algs = j["algorithms"];
    for (std::size_t i = 0; i < algs.size(); ++i) {
      const std::string p = "algorithms[" + std::to_string(i) + "]";
      const json& a = algs[i];
      if (!rd.object(a, p)) continue;
      rd.allow_keys(a, p, {"tag", "kind", "skip", "epochs", "reinit", "tau_M", "beta", "steps", "averaging",
                           "step_size"});
      AlgorithmConfig alg;
      const auto tag = rd.get<std::string>(a, p, "tag", true);
      if (tag) alg.tag = *tag;
      if (tag && (tag->empty() || tag->find_first_of(",\"\r\n") != std::string::npos))
        rd.error(p + ".tag", "must be non-empty and free of commas, quotes and newlines");
      if (tag && !tags.insert(*tag).second) rd.error(p + ".tag", "duplicate tag '" + *tag + "'");
      const auto kind = rd.get<std::string>(a, p, "kind", true);
      if (!kind) continue;
      if (*kind == "serial") alg.kind = AlgorithmKind::Serial;
      else if (*kind == "skipped") alg.kind = AlgorithmKind::Skipped;
      else if (*kind == "mer") alg.kind = AlgorithmKind::MER;
      else if (*kind == "sser") alg.kind = AlgorithmKind::SSER;
      else if (*kind == "iid") alg.kind = AlgorithmKind::IID;
      else {
        rd.error(p + ".kind", "must be serial, skipped, mer, sser or iid");
        continue;
      }
      alg.averaging = rd.get<bool>(a, p, "averaging").value_or(default_averaging);
      if (const auto step = detail::read_step(rd, a, p)) alg.step = *step;

      switch (alg.kind) {
        case AlgorithmKind::Serial: break;
        case AlgorithmKind::Skipped: {
          const auto skip = rd.get<std::int64_t>(a, p, "skip", true);
          if (skip && *skip < 1) rd.error(p + ".skip", "skip must be at least 1");
          else if (skip && static_cast<std::size_t>(*skip) > B)
            rd.error(p + ".skip", "skip " + std::to_string(*skip) + " exceeds buffer size " + std::to_string(B));
          else if (skip) alg.skip = static_cast<std::size_t>(*skip);
          break;
        }
        case AlgorithmKind::MER: {
          if (!is_power_of_two(B)) {
            rd.error("buffer.size", "buffer size must be a power of two for MER; nearest lower: " +
                                        std::to_string(floor_power_of_two(B)));
          }
          const int max_k = is_power_of_two(B) ? log2_exact(B) : log2_exact(floor_power_of_two(B));
          alg.epochs = rd.get<int>(a, p, "epochs").value_or(max_k);
          if (alg.epochs < 1 || alg.epochs > max_k)
            rd.error(p + ".epochs", "must lie in [1, log2 B = " + std::to_string(max_k) + "]");
          if (a.contains("reinit")) {
            const std::string rp = p + ".reinit";
            const json& r = a["reinit"];
            if (rd.object(r, rp)) {
              rd.allow_keys(r, rp, {"kind", "radius"});
              alg.reinit = rd.get<std::string>(r, rp, "kind").value_or("fixed");
              if (alg.reinit == "ball") {
                alg.reinit_radius = rd.get<double>(r, rp, "radius", true).value_or(0.0);
                if (!(alg.reinit_radius > 0.0)) rd.error(rp + ".radius", "must be positive");
              } else if (alg.reinit != "fixed") {
                rd.error(rp + ".kind", "must be 'fixed' or 'ball'");
              }
            }
          }
          break;
        }
        case AlgorithmKind::SSER: {
          alg.tau_M = rd.get<double>(a, p, "tau_M", true).value_or(0.0);
          alg.steps = rd.get<std::size_t>(a, p, "steps", true).value_or(0);
          alg.beta = rd.get<double>(a, p, "beta");
          if (!(alg.tau_M > 0.0)) rd.error(p + ".tau_M", "must be positive");
          if (alg.steps < 2) rd.error(p + ".steps", "must be at least 2");
          if (alg.step.kind != "constant") rd.error(p + ".step_size.kind", "sser needs a constant step size");
          const double beta = alg.beta.value_or(detail::default_sser_beta(std::max<std::size_t>(alg.steps, 2)));
          if (!(beta > 1.0)) rd.error(p + ".beta", "must exceed 1");
          else if (alg.tau_M > 0.0 && alg.steps >= 1) {
            const std::size_t gap = sser_gap(beta, alg.tau_M);
            if (gap * alg.steps > B)
              rd.error(p, "gap " + std::to_string(gap) + " x " + std::to_string(alg.steps) +
                              " steps exceeds buffer size " + std::to_string(B));
          }
          alg.beta = beta;
          break;
        }
        case AlgorithmKind::IID: {
          alg.steps = rd.get<std::size_t>(a, p, "steps").value_or(B);
          if (alg.steps < 1) rd.error(p + ".steps", "must be at least 1");
          break;
        }
      }
      cfg.algorithms.push_back(alg);
    }
  }

  if (diags.empty()) out.config = cfg;
  return out;
}

/// Same as validate_config but throws ConfigError listing every diagnostic.
inline ExperimentConfig parse_config(const std::string& text) {
  ValidationResult v = validate_config(text);
  if (!v.ok()) throw ConfigError("invalid config:\n" + v.report());
  return *v.config;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// The config with every default resolved; parses back to an equal config.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  using detail::json;
  json j;
  j["schema_version"] = cfg.schema_version;
  j["experiment_id"] = cfg.experiment_id;
  j["root_seed"] = cfg.root_seed;
  j["replicates"] = cfg.replicates;
  j["threads"] = cfg.threads;
  j["output_dir"] = cfg.output_dir;
  j["problem"] = detail::problem_json(cfg.problem);
  j["buffer"] = {{"size", cfg.buffer_size}, {"mode", to_string(cfg.buffer_mode)}};
  j["initial_point"] = cfg.initial_point ? detail::vector_json(*cfg.initial_point) : json("zero");
  j["error_metric"] = {{"kind", cfg.metric}, {"normalized", cfg.normalized}};
  const char* rk = cfg.record.kind == RecordKind::All ? "all"
                   : cfg.record.kind == RecordKind::LogGrid ? "log_grid" : "final_only";
  j["record"] = {{"kind", rk}};
  if (cfg.record.kind == RecordKind::LogGrid) j["record"]["points_per_decade"] = cfg.record.points_per_decade;
  json algs = json::array();
  for (const auto& a : cfg.algorithms) {
    json aj = {{"tag", a.tag}, {"kind", to_string(a.kind)}, {"averaging", a.averaging},
               {"step_size", detail::step_json(a.step)}};
    switch (a.kind) {
      case AlgorithmKind::Skipped: aj["skip"] = a.skip; break;
      case AlgorithmKind::MER:
        aj["epochs"] = a.epochs;
        aj["reinit"] = a.reinit == "ball" ? json{{"kind", "ball"}, {"radius", a.reinit_radius}} : json{{"kind", "fixed"}};
        break;
      case AlgorithmKind::SSER:
        aj["tau_M"] = a.tau_M;
        aj["beta"] = a.beta.value_or(0.0);
        aj["steps"] = a.steps;
        break;
      case AlgorithmKind::IID: aj["steps"] = a.steps; break;
      default: break;
    }
    algs.push_back(aj);
  }
  j["algorithms"] = algs;
  return j;
}

/// Shrinks (or grows) a config for desk-scale runs: B and step counts are
/// multiplied by `factor`. When MER is present B is rounded down to a power
/// of two and MER epochs drop so that the final replay gap is unchanged.
inline ExperimentConfig apply_scale(ExperimentConfig cfg, double factor) {
  if (!(factor > 0.0)) throw ConfigError("scale factor must be positive");
  if (factor == 1.0) return cfg;
  const bool has_mer = std::any_of(cfg.algorithms.begin(), cfg.algorithms.end(),
                                   [](const AlgorithmConfig& a) { return a.kind == AlgorithmKind::MER; });
  const std::size_t old_B = cfg.buffer_size;
  auto scaled = [factor](std::size_t n) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * factor)));
  };
  std::size_t B = scaled(old_B);
  if (has_mer) B = std::max<std::size_t>(2, floor_power_of_two(B));
  cfg.buffer_size = B;
  for (auto& a : cfg.algorithms) {
    if (a.kind == AlgorithmKind::MER) {
      const int drop = log2_exact(old_B) - log2_exact(B);
      a.epochs = std::clamp(a.epochs - drop, 1, log2_exact(B));
    }
    if (a.kind == AlgorithmKind::IID) a.steps = scaled(a.steps);
    if (a.kind == AlgorithmKind::SSER) {
      a.steps = std::max<std::size_t>(2, scaled(a.steps));
      a.beta = detail::default_sser_beta(a.steps);
    }
    if (a.kind == AlgorithmKind::Skipped) a.skip = std::min(a.skip, B);
  }
  // Re-run the cross-field checks on the result.
  return parse_config(config_to_json(cfg).dump());
}

// ---------------------------------------------------------------------------
// Replicates
// ---------------------------------------------------------------------------

/// Everything one replicate needs: an immutable problem, a factory for its
/// Markovian source, the error metric and the certification ingredients.
struct ReplicateContext {
  int replicate = 0;
  std::uint64_t data_seed = 0;
  VIProblem problem;
  std::function<SampleSource(std::uint64_t)> make_source;
  Vector x_init;
  ErrorMetric metric = ErrorMetric::euclidean_sq();
  nlohmann::json constants;
  std::vector<std::string> notes;
  // Certification ingredients (the problem pointer is set by the caller).
  std::function<Sample(Rng&)> draw_stationary;
  std::optional<FiniteChainModel> finite_chain;
  std::optional<ContinuousChainModel> continuous_chain;
  bool samples_independent = false;

  CertificationInput certification_input() const {
    CertificationInput in;
    in.problem = &problem;
    in.draw_stationary = draw_stationary;
    in.finite_chain = finite_chain;
    in.continuous_chain = continuous_chain;
    in.samples_independent = samples_independent;
    return in;
  }
};

namespace detail {

inline int draw_index(const Vector& law, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < law.size(); ++j) {
    acc += law(j);
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(law.size() - 1);
}

inline FeasibleRegion make_region(const RegionConfig& r, Eigen::Index dim) {
  if (!r.ball_radius) return FeasibleRegion::unconstrained();
  return FeasibleRegion::ball(Vector::Zero(dim), *r.ball_radius);
}

inline nlohmann::json constants_json(const VIProblem& p) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"L", opt(p.constants.L)},
          {"mu", opt(p.constants.mu)},
          {"sigma_sq", opt(p.constants.sigma_sq)},
          {"zeta_sq", opt(p.constants.zeta_sq)},
          {"D", opt(p.constants.D)},
          {"lipschitz_x", p.oracle.lipschitz_x}};
}

inline void build_policy_eval(const PolicyEvalConfig& c, ReplicateContext& ctx) {
  MRPSpec spec = sticky_mrp(c.num_states, c.feature_dim, c.stickiness, c.gamma);
  spec.orthonormalize = c.orthonormalize;
  auto inst = std::make_shared<const PolicyEvalInstance>(policy_eval_instance(spec));
  ctx.problem = inst->problem;
  ctx.make_source = [inst](std::uint64_t seed) { return inst->markov_source(seed); };
  ctx.draw_stationary = [inst](Rng& rng) {
    const int s = draw_index(inst->pi, rng);
    const int s_next = draw_index(inst->spec.P.row(s).transpose(), rng);
    return Sample{inst->transition(s, s_next)};
  };
  FiniteChainModel model;
  model.P = spec.P;
  model.pi = inst->pi;
  model.emit = [inst](int s, int s_next) { return Sample{inst->transition(s, s_next)}; };
  model.emits_transitions = true;
  ctx.finite_chain = model;
  ctx.constants = constants_json(ctx.problem);
  ctx.constants["spectral_rho"] = second_eigenvalue_modulus(spec.P);
  ctx.constants["theta_bar"] = vector_json(inst->theta_bar);
}

inline void build_glm(const GLMConfig& c, ReplicateContext& ctx) {
  GLMSpec spec;
  spec.dimension = c.dimension;
  spec.link = c.link == "sigmoid" ? Link::sigmoid() : Link::identity();
  spec.noise_std = c.noise_std;
  spec.covariates = c.covariates;
  spec.covariates.dimension = c.dimension;
  spec.covariates.rng_seed = derive_seed(ctx.data_seed, "covariates");
  spec.noise_seed = derive_seed(ctx.data_seed, "observations");
  spec.kappa_samples = c.kappa_samples;
  spec.stationary_method =
      c.stationary_sampler == "restart" ? ARStationaryMethod::Restart : ARStationaryMethod::ExactGaussian;
  spec.region = make_region(c.region, c.dimension);
  Rng xs(derive_seed(ctx.data_seed, "x-star"));
  Vector x_star(c.dimension);
  for (int i = 0; i < c.dimension; ++i) x_star(i) = xs.normal();
  spec.x_star = x_star * (c.x_star_radius / x_star.norm());

  auto inst = std::make_shared<const GLMInstance>(glm_instance(spec));
  ctx.problem = inst->problem;
  // The covariate matrix A stays fixed; only the trajectory depends on the seed.
  ctx.make_source = [inst](std::uint64_t seed) {
    GLMInstance copy = *inst;
    copy.spec.noise_seed = derive_seed(seed, "observations");
    copy.spec.covariates.rng_seed = derive_seed(seed, "covariates");
    return copy.markov_source();
  };
  const Matrix chol = Eigen::LLT<Matrix>(inst->stationary_covariance).matrixL();
  const Link link = spec.link;
  const Vector xs_v = spec.x_star;
  ctx.draw_stationary = [inst, chol](Rng& rng) {
    Vector z(chol.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    const Vector a = chol * z;
    return Sample{GLMPair{a, glm_observe(inst->spec, a, rng)}};
  };
  ContinuousChainModel model;
  model.draw_stationary_state = [chol](Rng& rng) {
    Vector z(chol.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    return Vector(chol * z);
  };
  const Matrix A = inst->ar_matrix;
  const double noise_sd = std::sqrt(spec.covariates.noise_variance);
  model.step = [A, noise_sd](const Vector& a, Rng& rng) {
    Vector eps(a.size());
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = noise_sd * rng.normal();
    return Vector(A * a + eps);
  };
  model.marginal_operator = [link, xs_v](const Vector& x, const Vector& a) {
    return Vector(a * (link(a.dot(x)) - link(a.dot(xs_v))));
  };
  ctx.continuous_chain = model;
  ctx.constants = constants_json(ctx.problem);
  ctx.constants["kappa"] = inst->kappa;
  ctx.constants["kappa_samples"] = inst->kappa_sample_count;
  ctx.constants["covariate_bound"] = inst->covariate_bound;
  ctx.constants["link_mu"] = inst->link_mu;
  ctx.constants["link_interval"] = inst->link_interval;
  ctx.notes.push_back("kappa estimated from " + std::to_string(inst->kappa_sample_count) + " stationary samples");
}

inline void build_synthetic(const SyntheticConfig& c, std::uint64_t root_seed, ReplicateContext& ctx) {
  SyntheticLinearSpec spec;
  spec.A_op = c.A;
  spec.x_star = c.x_star;
  spec.noise_std = c.noise_std;
  spec.region = make_region(c.region, c.x_star.size());
  spec.initial_point = ctx.x_init;
  ctx.problem = synthetic_linear_problem(spec);
  const int n = spec.dimension();
  if (c.noise == "gaussian") {
    ctx.make_source = [n](std::uint64_t seed) { return gaussian_noise_source(n, seed); };
    ctx.draw_stationary = [n](Rng& rng) {
      Vector w(n);
      for (int i = 0; i < n; ++i) w(i) = rng.normal();
      return Sample{RawState{-1, w}};
    };
    ctx.samples_independent = true;
  } else {
    const StickyChainKernel kernel{c.chain_states, c.chain_stickiness, 0};
    const Matrix P = kernel.matrix();
    const Vector pi = Vector::Constant(c.chain_states, 1.0 / c.chain_states);
    // The embedding is part of the problem, so it follows the root seed.
    const auto embedding = std::make_shared<const std::vector<Vector>>(
        centered_state_embedding(c.chain_states, n, pi, derive_seed(root_seed, "embedding")));
    ctx.make_source = [P, pi, embedding](std::uint64_t seed) {
      auto chain = std::make_shared<FiniteChain>(P, pi, seed);
      return chain_state_source(chain, *embedding, derive_seed(seed, "stationary"), pi);
    };
    ctx.draw_stationary = [pi, embedding](Rng& rng) {
      const int s = draw_index(pi, rng);
      return Sample{RawState{s, (*embedding)[static_cast<std::size_t>(s)]}};
    };
    FiniteChainModel model;
    model.P = P;
    model.pi = pi;
    model.emit = [embedding](int s, int) { return Sample{RawState{s, (*embedding)[static_cast<std::size_t>(s)]}}; };
    model.emits_transitions = false;
    ctx.finite_chain = model;
    ctx.constants["spectral_rho"] = kernel.second_eigenvalue();
  }
  const nlohmann::json extra = ctx.constants;
  ctx.constants = constants_json(ctx.problem);
  for (const auto& [k, v] : extra.items()) ctx.constants[k] = v;
}

}  // namespace detail

inline ReplicateContext build_replicate(const ExperimentConfig& cfg, int replicate) {
  ReplicateContext ctx;
  ctx.replicate = replicate;
  ctx.data_seed = derive_seed(cfg.root_seed, "data", static_cast<std::uint64_t>(replicate));
  const Eigen::Index dim = std::visit(
      [](const auto& p) -> Eigen::Index {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, PolicyEvalConfig>) return p.feature_dim;
        else if constexpr (std::is_same_v<P, GLMConfig>) return p.dimension;
        else return p.x_star.size();
      },
      cfg.problem);
  ctx.x_init = cfg.initial_point.value_or(Vector::Zero(dim));

  if (const auto* pe = std::get_if<PolicyEvalConfig>(&cfg.problem)) detail::build_policy_eval(*pe, ctx);
  else if (const auto* g = std::get_if<GLMConfig>(&cfg.problem)) detail::build_glm(*g, ctx);
  else detail::build_synthetic(std::get<SyntheticConfig>(cfg.problem), cfg.root_seed, ctx);

  if (!ctx.problem.region.contains(ctx.x_init)) throw ConfigError("initial_point lies outside the feasible region");
  const Vector& x_star = *ctx.problem.solution;
  ErrorMetric metric = ErrorMetric::euclidean_sq();
  if (cfg.metric == "pi_weighted") {
    const auto& pe = std::get<PolicyEvalConfig>(cfg.problem);
    MRPSpec spec = sticky_mrp(pe.num_states, pe.feature_dim, pe.stickiness, pe.gamma);
    spec.orthonormalize = pe.orthonormalize;
    metric = ErrorMetric::pi_weighted_sq(stationary_distribution(spec.P), spec.effective_features().transpose());
  }
  if (cfg.normalized) metric = metric.normalized(metric(ctx.x_init, x_star));
  ctx.metric = metric;
  return ctx;
}

/// Resolves a configured step-size policy against one replicate's problem.
inline StepSizePolicy resolve_step_policy(const StepSizeConfig& s, const VIProblem& problem,
                                          std::vector<std::string>* notes = nullptr) {
  if (s.kind == "constant") return ConstantStep{s.eta};
  if (s.kind == "inverse_t") return InverseTStep{s.c};
  auto pick = [&](const char* key, const std::optional<double>& fallback) -> std::optional<double> {
    const auto it = s.theorem_overrides.find(key);
    if (it != s.theorem_overrides.end()) return it->second;
    return fallback;
  };
  const auto& k = problem.constants;
  const auto mu = pick("mu", k.mu);
  const auto zeta = pick("zeta_sq", k.zeta_sq);
  const auto Lbar = pick("Lbar", k.L ? std::optional<double>(*k.L + problem.oracle.lipschitz_x) : std::nullopt);
  if (!mu || !zeta || !Lbar)
    throw ConfigError("theorem step size needs mu, zeta_sq and Lbar; use a constant or inverse_t policy");
  TheoremConstants tc;
  tc.mu = *mu;
  tc.zeta_sq = *zeta;
  tc.Lbar = *Lbar;
  tc.D = pick("D", k.D);
  tc.sigma_sq = pick("sigma_sq", k.sigma_sq);
  std::optional<double> f_star;
  if (problem.mean_operator && problem.solution) f_star = problem.mean_operator(*problem.solution).norm();
  tc.F_star_norm = pick("F_star_norm", f_star);
  tc.M = pick("M", std::nullopt);
  const auto cm = pick("C_M", std::nullopt), cb = pick("C_B", std::nullopt);
  if (!tc.M && cm && cb) tc.M = theorem_M(*cm, *cb, tc.mu);
  if (notes && !tc.has_pk_inputs()) notes->push_back("theorem schedule: M unknown (give M or C_M and C_B); p_k = 1");
  return TheoremSchedule{tc};
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct RawRow {
  std::string algorithm;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::size_t step = 0;
  std::size_t samples_consumed = 0;
  double error = 0.0;
};

struct CurvePoint {
  std::size_t samples_consumed = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  int replicates = 0;
};

struct AggregateCurve {
  std::string experiment_id;
  std::string algorithm;
  std::string metric;
  std::vector<CurvePoint> points;
};

struct CellOutcome {
  std::string algorithm;
  int replicate = 0;
  std::uint64_t seed = 0;
  std::vector<RunTrace> traces;
  std::vector<std::string> notes;
  std::optional<std::string> failure;
};

struct RunControls {
  std::optional<std::string> out_dir;  // overrides config output_dir
  std::optional<int> threads;
  bool write_files = true;
  bool check_contraction = kCheckContractionByDefault;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string metric_tag;
  std::vector<RawRow> rows;
  std::vector<AggregateCurve> curves;
  std::vector<CellOutcome> cells;
  nlohmann::json metadata;
  std::filesystem::path raw_csv, aggregate_csv, metadata_file;

  const AggregateCurve& curve(const std::string& tag) const {
    for (const auto& c : curves)
      if (c.algorithm == tag) return c;
    throw InvalidArgument("no curve for algorithm '" + tag + "'");
  }
};

/// Seed of replicate r for an algorithm: depends only on (root, tag, r).
inline std::uint64_t algorithm_seed(std::uint64_t root, const std::string& tag, int replicate) {
  return derive_seed(root, tag, static_cast<std::uint64_t>(replicate));
}

/// Runs one (algorithm, replicate) cell. The buffer is rebuilt from the
/// replicate's data seed so every algorithm sees the same samples.
inline CellOutcome run_cell(const ExperimentConfig& cfg, const AlgorithmConfig& alg, const ReplicateContext& ctx,
                            bool check_contraction) {
  CellOutcome out;
  out.algorithm = alg.tag;
  out.replicate = ctx.replicate;
  out.seed = algorithm_seed(cfg.root_seed, alg.tag, ctx.replicate);
  try {
    const VIProblem& problem = ctx.problem;
    const Vector x_star = *problem.solution;
    const ErrorMetric metric = ctx.metric;
    RunOptions opt;
    opt.algorithm = alg.tag;
    opt.seed = out.seed;
    opt.averaging = alg.averaging;
    opt.error = [metric, x_star](const Vector& x) { return metric(x, x_star); };
    opt.error_tag = metric.tag();
    opt.record = cfg.record;
    opt.check_contraction = check_contraction;
    const StepSizePolicy policy = resolve_step_policy(alg.step, problem, &out.notes);

    auto static_buffer = [&] {
      return ReplayBuffer::fill(ctx.make_source(ctx.data_seed), cfg.buffer_size, BufferMode::Static);
    };
    switch (alg.kind) {
      case AlgorithmKind::Serial: {
        ReplayBuffer buf = static_buffer();
        out.traces.push_back(run_serial_sa(problem, buf, policy, ctx.x_init, opt));
        break;
      }
      case AlgorithmKind::Skipped: {
        ReplayBuffer buf = static_buffer();
        out.traces.push_back(run_skipped_sa(problem, buf, alg.skip, policy, ctx.x_init, opt));
        break;
      }
      case AlgorithmKind::MER: {
        ReplayBuffer buf = ReplayBuffer::fill(ctx.make_source(ctx.data_seed), cfg.buffer_size, cfg.buffer_mode);
        const EpochSchedule schedule = make_epoch_schedule(cfg.buffer_size, alg.epochs, policy);
        ReinitPolicy reinit = FixedPointInit{ctx.x_init};
        if (alg.reinit == "ball") reinit = UniformBallInit{x_star, alg.reinit_radius};
        Rng rng(out.seed);
        opt.record = RecordPolicy::final_only();
        out.traces = run_mer(problem, buf, schedule, reinit, rng, opt);
        for (auto& t : out.traces)
          for (auto& r : t.records) r.samples_consumed = r.step;
        break;
      }
      case AlgorithmKind::SSER: {
        ReplayBuffer buf = static_buffer();
        const double eta = std::get<ConstantStep>(policy).eta;
        out.traces.push_back(run_sser(problem, buf, *alg.beta, alg.tau_M, eta, ctx.x_init, alg.steps, opt));
        break;
      }
      case AlgorithmKind::IID: {
        SampleSource src = ctx.make_source(out.seed);
        const auto stream = iid_stationary_stream(src, alg.steps);
        out.traces.push_back(run_iid_sa(problem, stream, policy, ctx.x_init, alg.steps, opt));
        break;
      }
    }
    for (const auto& t : out.traces) out.notes.insert(out.notes.end(), t.notes.begin(), t.notes.end());
  } catch (const std::exception& e) {
    out.failure = e.what();
  }
  return out;
}

inline std::vector<AggregateCurve> aggregate(const std::string& experiment_id, const std::string& metric,
                                             const std::vector<std::string>& order, const std::vector<RawRow>& rows) {
  std::vector<AggregateCurve> curves;
  for (const auto& tag : order) {
    std::map<std::size_t, std::vector<double>> by_count;
    for (const auto& r : rows)
      if (r.algorithm == tag) by_count[r.samples_consumed].push_back(r.error);
    AggregateCurve c{experiment_id, tag, metric, {}};
    for (const auto& [count, vals] : by_count) {
      CurvePoint p;
      p.samples_consumed = count;
      p.replicates = static_cast<int>(vals.size());
      double sum = 0.0;
      for (double v : vals) sum += v;
      p.mean = sum / static_cast<double>(vals.size());
      if (vals.size() > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - p.mean) * (v - p.mean);
        p.stderr_ = std::sqrt(ss / static_cast<double>(vals.size() - 1) / static_cast<double>(vals.size()));
      }
      c.points.push_back(p);
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on `threads` workers; results land by index
/// so the output never depends on scheduling.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline int resolve_threads(const ExperimentConfig& cfg, const RunControls& ctl) {
  if (ctl.threads) return std::max(1, *ctl.threads);
  if (const char* env = std::getenv("MER_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  if (cfg.threads > 0) return cfg.threads;
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

inline std::string resolve_out_dir(const ExperimentConfig& cfg, const RunControls& ctl) {
  if (ctl.out_dir) return *ctl.out_dir;
  if (const char* env = std::getenv("MER_OUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline void write_raw_csv(std::ostream& os, const std::string& experiment_id, const std::string& metric,
                          const std::vector<RawRow>& rows) {
  csv::write_row(os, {"experiment_id", "algorithm", "seed", "epoch", "step", "samples_consumed", "error", "metric"});
  for (const auto& r : rows)
    csv::write_row(os, {experiment_id, r.algorithm, std::to_string(r.seed), std::to_string(r.epoch),
                        std::to_string(r.step), std::to_string(r.samples_consumed), csv::format_double(r.error),
                        metric});
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<AggregateCurve>& curves) {
  csv::write_row(os, {"experiment_id", "algorithm", "samples_consumed", "mean_error", "stderr", "replicates",
                      "metric"});
  for (const auto& c : curves)
    for (const auto& p : c.points)
      csv::write_row(os, {c.experiment_id, c.algorithm, std::to_string(p.samples_consumed),
                          csv::format_double(p.mean), csv::format_double(p.stderr_), std::to_string(p.replicates),
                          c.metric});
}

/// Runs every (algorithm, replicate) cell, then writes
/// <out>/<id>_raw.csv, <out>/<id>_aggregate.csv and <out>/<id>_meta.json.
/// A failing cell is recorded in the metadata and the remaining cells still run.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunControls& ctl = {}) {
  const int threads = detail::resolve_threads(cfg, ctl);
  ExperimentResult res;
  res.config = cfg;

  const auto R = static_cast<std::size_t>(cfg.replicates);
  std::vector<std::optional<ReplicateContext>> contexts(R);
  std::vector<std::string> context_errors(R);
  detail::parallel_for(R, threads, [&](std::size_t r) {
    try {
      contexts[r] = build_replicate(cfg, static_cast<int>(r));
    } catch (const std::exception& e) {
      context_errors[r] = e.what();
    }
  });

  const std::size_t A = cfg.algorithms.size();
  res.cells.resize(A * R);
  detail::parallel_for(A * R, threads, [&](std::size_t i) {
    const std::size_t a = i / R, r = i % R;
    const AlgorithmConfig& alg = cfg.algorithms[a];
    if (!contexts[r]) {
      CellOutcome out;
      out.algorithm = alg.tag;
      out.replicate = static_cast<int>(r);
      out.seed = algorithm_seed(cfg.root_seed, alg.tag, static_cast<int>(r));
      out.failure = "replicate setup failed: " + context_errors[r];
      res.cells[i] = std::move(out);
      return;
    }
    res.cells[i] = run_cell(cfg, alg, *contexts[r], ctl.check_contraction);
  });

  res.metric_tag = "unknown";
  for (const auto& c : contexts)
    if (c) {
      res.metric_tag = c->metric.tag();
      break;
    }
  std::vector<std::string> order;
  for (const auto& a : cfg.algorithms) order.push_back(a.tag);
  for (const auto& cell : res.cells)
    for (const auto& t : cell.traces)
      for (const auto& r : t.records)
        res.rows.push_back({cell.algorithm, cell.seed, r.epoch, r.step, r.samples_consumed, r.error});
  res.curves = aggregate(cfg.experiment_id, res.metric_tag, order, res.rows);

  using nlohmann::json;
  json meta;
  meta["experiment_id"] = cfg.experiment_id;
  meta["schema_version"] = kSchemaVersion;
  meta["library_version"] = kLibraryVersion;
  meta["compiler"] = __VERSION__;
  meta["config"] = config_to_json(cfg);
  meta["threads"] = threads;
  meta["metric"] = res.metric_tag;
  json reps = json::array();
  for (std::size_t r = 0; r < R; ++r) {
    json rj = {{"replicate", r}, {"data_seed", derive_seed(cfg.root_seed, "data", r)}};
    if (contexts[r]) {
      rj["constants"] = contexts[r]->constants;
      rj["notes"] = contexts[r]->notes;
    } else {
      rj["failure"] = context_errors[r];
    }
    reps.push_back(rj);
  }
  meta["replicates"] = reps;
  json cells = json::array();
  std::size_t failures = 0;
  for (const auto& c : res.cells) {
    json cj = {{"algorithm", c.algorithm}, {"replicate", c.replicate}, {"seed", c.seed}, {"notes", c.notes}};
    std::size_t checks = 0, violations = 0;
    for (const auto& t : c.traces) {
      checks += t.contraction_checks;
      violations += t.contraction_violations;
    }
    cj["contraction_checks"] = checks;
    cj["contraction_violations"] = violations;
    if (c.failure) {
      cj["failure"] = *c.failure;
      ++failures;
    }
    cells.push_back(cj);
  }
  meta["cells"] = cells;
  meta["failed_cells"] = failures;
  meta["generated_at"] = detail::utc_timestamp();
  res.metadata = meta;

  if (ctl.write_files) {
    const std::filesystem::path dir = detail::resolve_out_dir(cfg, ctl);
    std::filesystem::create_directories(dir);
    res.raw_csv = dir / (cfg.experiment_id + "_raw.csv");
    res.aggregate_csv = dir / (cfg.experiment_id + "_aggregate.csv");
    res.metadata_file = dir / (cfg.experiment_id + "_meta.json");
    {
      std::ofstream os(res.raw_csv, std::ios::binary);
      write_raw_csv(os, cfg.experiment_id, res.metric_tag, res.rows);
    }
    {
      std::ofstream os(res.aggregate_csv, std::ios::binary);
      write_aggregate_csv(os, res.curves);
    }
    {
      std::ofstream os(res.metadata_file, std::ios::binary);
      os << meta.dump(2) << "\n";
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Comparing curves
// ---------------------------------------------------------------------------

inline std::vector<AggregateCurve> read_aggregate_csv(std::istream& is) {
  const auto rows = csv::read_all(is);
  if (rows.empty()) throw InvalidArgument("aggregate CSV is empty");
  const std::vector<std::string> header = {"experiment_id", "algorithm", "samples_consumed", "mean_error",
                                           "stderr",        "replicates", "metric"};
  if (rows[0] != header) throw InvalidArgument("not an aggregate CSV: unexpected header");
  std::vector<AggregateCurve> curves;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != header.size())
      throw InvalidArgument("aggregate CSV row " + std::to_string(i) + " has " + std::to_string(r.size()) + " fields");
    if (curves.empty() || curves.back().algorithm != r[1] || curves.back().experiment_id != r[0])
      curves.push_back({r[0], r[1], r[6], {}});
    if (curves.back().metric != r[6]) throw MetricMismatch("mixed metrics within one curve");
    curves.back().points.push_back({static_cast<std::size_t>(std::stoull(r[2])), csv::parse_double(r[3]),
                                    csv::parse_double(r[4]), std::stoi(r[5])});
  }
  return curves;
}

inline std::vector<AggregateCurve> load_aggregate_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  return read_aggregate_csv(in);
}

struct CompareAt {
  enum class Kind { FinalSample, SampleCount };
  Kind kind = Kind::FinalSample;
  std::size_t count = 0;

  static CompareAt final_sample() { return {Kind::FinalSample, 0}; }
  static CompareAt sample_count(std::size_t n) { return {Kind::SampleCount, n}; }
};

struct CurveValue {
  std::size_t samples_consumed = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  int replicates = 0;
};

/// Value of a curve at `at`. At a sample count the curve is read as a step
/// function: the last recorded point at or before the count.
inline CurveValue curve_value(const AggregateCurve& c, CompareAt at) {
  if (c.points.empty()) throw InvalidArgument("curve '" + c.algorithm + "' has no points");
  const CurvePoint* p = &c.points.back();
  if (at.kind == CompareAt::Kind::SampleCount) {
    p = nullptr;
    for (const auto& q : c.points)
      if (q.samples_consumed <= at.count) p = &q;
    if (!p)
      throw InvalidArgument("curve '" + c.algorithm + "' has no point at or before " + std::to_string(at.count));
  }
  return {p->samples_consumed, p->mean, p->stderr_, p->replicates};
}

struct ComparisonReport {
  std::string algorithm_a, algorithm_b, metric;
  CurveValue a, b;
  double difference = 0.0;  // a - b
  double pooled_stderr = 0.0;
  bool significant = false;  // |difference| >= 2 pooled standard errors
  std::string ordering;       // "a<b", "a>b" or "tie"

  /// Gap in units of pooled standard error; +inf for a nonzero gap with zero error.
  double gap_in_stderr() const {
    if (pooled_stderr > 0.0) return std::abs(difference) / pooled_stderr;
    return difference == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  }
};

inline ComparisonReport compare_curves(const AggregateCurve& a, const AggregateCurve& b, CompareAt at) {
  if (a.metric != b.metric) throw MetricMismatch("metric '" + a.metric + "' vs '" + b.metric + "'");
  ComparisonReport rep;
  rep.algorithm_a = a.algorithm;
  rep.algorithm_b = b.algorithm;
  rep.metric = a.metric;
  rep.a = curve_value(a, at);
  rep.b = curve_value(b, at);
  rep.difference = rep.a.mean - rep.b.mean;
  rep.pooled_stderr = std::sqrt(rep.a.stderr_ * rep.a.stderr_ + rep.b.stderr_ * rep.b.stderr_);
  rep.significant = rep.difference != 0.0 && std::abs(rep.difference) >= 2.0 * rep.pooled_stderr;
  rep.ordering = rep.difference < 0.0 ? "a<b" : rep.difference > 0.0 ? "a>b" : "tie";
  return rep;
}

// ---------------------------------------------------------------------------
// Certification from a config
// ---------------------------------------------------------------------------

/// Certifies the assumptions for replicate 0 of a config.
inline CertificationReport certify_config(const ExperimentConfig& cfg, CertificationTolerances tol = {}) {
  const ReplicateContext ctx = build_replicate(cfg, 0);
  tol.seed = derive_seed(cfg.root_seed, "certify");
  CertificationReport rep = certify_assumptions(ctx.certification_input(), tol);
  rep.notes.insert(rep.notes.end(), ctx.notes.begin(), ctx.notes.end());
  return rep;
}

}  // namespace mer
