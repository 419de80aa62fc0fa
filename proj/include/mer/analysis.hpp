#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mer/bellman.hpp"
#include "mer/problems.hpp"
#include "mer/core.hpp"
#include "mer/errors.hpp"
#include "mer/rng.hpp"
#include "mer/solvers.hpp"

namespace mer {

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

/// ||v||_Pi = sqrt(sum_s pi_s v_s^2).
inline double pi_norm(const Vector& v, const Vector& pi) { return std::sqrt((pi.array() * v.array().square()).sum()); }

class ErrorMetric {
 public:
  enum class Kind { EuclideanSq, PiWeightedSq };

  static ErrorMetric euclidean_sq() { return ErrorMetric(Kind::EuclideanSq, Vector()); }

  static ErrorMetric pi_weighted_sq(Vector pi) {
    if (pi.size() == 0 || (pi.array() <= 0.0).any())
      throw InvalidArgument("Pi-weighted metric needs strictly positive weights");
    if (std::abs(pi.sum() - 1.0) > 1e-9) throw InvalidArgument("Pi-weighted metric weights must sum to 1");
    return ErrorMetric(Kind::PiWeightedSq, std::move(pi));
  }

  /// ||map (x - x*)||_Pi^2, e.g. map = Psi^T to measure value-function error.
  static ErrorMetric pi_weighted_sq(Vector pi, Matrix map) {
    ErrorMetric m = pi_weighted_sq(std::move(pi));
    if (map.rows() != m.pi_.size()) throw InvalidArgument("metric map must have one row per weight");
    m.map_ = std::move(map);
    return m;
  }

  /// Same metric divided by `reference` (typically the initial error).
  ErrorMetric normalized(double reference) const {
    if (!(reference > 0.0) || !std::isfinite(reference))
      throw ZeroReference("normalization reference must be positive, got " + std::to_string(reference));
    ErrorMetric m = *this;
    m.reference_ = reference;
    return m;
  }

  Kind kind() const { return kind_; }
  const Vector& weights() const { return pi_; }
  std::optional<double> reference() const { return reference_; }

  /// Tag used in traces and CSV files.
  std::string tag() const {
    std::string base = kind_ == Kind::EuclideanSq ? "l2sq" : "pisq";
    return reference_ ? "normalized_" + base : base;
  }

  double raw(const Vector& x, const Vector& x_star) const {
    if (x.size() != x_star.size())
      throw InvalidArgument("metric dimension mismatch: " + std::to_string(x.size()) + " vs " +
                            std::to_string(x_star.size()));
    const Vector diff = map_ ? Vector(*map_ * (x - x_star)) : Vector(x - x_star);
    if (kind_ == Kind::EuclideanSq) return diff.squaredNorm();
    if (diff.size() != pi_.size()) throw InvalidArgument("Pi-weighted metric dimension mismatch");
    return (pi_.array() * diff.array().square()).sum();
  }

  double operator()(const Vector& x, const Vector& x_star) const {
    const double v = raw(x, x_star);
    return reference_ ? v / *reference_ : v;
  }

 private:
  ErrorMetric(Kind k, Vector pi) : kind_(k), pi_(std::move(pi)) {}
  Kind kind_;
  Vector pi_;
  std::optional<Matrix> map_;
  std::optional<double> reference_;
};

inline double compute_error(const ErrorMetric& metric, const Vector& x, const Vector& x_star) {
  return metric(x, x_star);
}

// ---------------------------------------------------------------------------
// Mixing certificates for finite chains
// ---------------------------------------------------------------------------

/// Second-largest eigenvalue modulus of P.
inline double second_eigenvalue_modulus(const Matrix& P) {
  Eigen::EigenSolver<Matrix> es(P, false);
  std::vector<double> mods;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) mods.push_back(std::abs(es.eigenvalues()(i)));
  std::sort(mods.begin(), mods.end(), std::greater<>());
  return mods.size() > 1 ? mods[1] : 0.0;
}

struct MixingCertificate {
  enum class Method { SpectralGap, Empirical };
  double estimated_rho = 0.0;
  double estimated_C = 0.0;
  Method method = Method::SpectralGap;
};

/// A finite chain that emits samples on its transitions or states.
struct FiniteChainModel {
  Matrix P;
  Vector pi;
  // Sample seen when the chain moves s -> s'. For state-emitting models the
  // second argument is ignored.
  std::function<Sample(int, int)> emit;
  bool emits_transitions = true;

  int num_states() const { return static_cast<int>(P.rows()); }

  /// g(v) = E[F~(x, xi) | current state v] for every v, as columns.
  Matrix state_means(const VIProblem& problem, const Vector& x) const {
    const int S = num_states();
    Matrix g = Matrix::Zero(x.size(), S);
    for (int v = 0; v < S; ++v) {
      if (emits_transitions) {
        for (int w = 0; w < S; ++w)
          if (P(v, w) > 0.0) g.col(v) += P(v, w) * problem.oracle.evaluate(x, emit(v, w));
      } else {
        g.col(v) = problem.oracle.evaluate(x, emit(v, v));
      }
    }
    return g;
  }

  /// E_pi[F~(x, xi)] by exact enumeration.
  Vector stationary_mean(const VIProblem& problem, const Vector& x) const { return state_means(problem, x) * pi; }

  /// Chain steps between the last observed state and the sample `lag` steps later.
  int steps_for_lag(int lag) const { return emits_transitions ? lag : lag + 1; }
};

/// Geometric envelope b(l) <= C rho^l fitted by log-linear least squares;
/// C is the smallest constant making the envelope hold at every lag.
struct DecayFit {
  double rate = 0.0;
  double constant = 0.0;
  bool identically_zero = true;
};

inline DecayFit fit_geometric_decay(const std::vector<int>& lags, const std::vector<double>& values,
                                    double floor = 1e-13) {
  DecayFit fit;
  std::vector<double> xs, ys;
  const double peak = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (values[i] > floor * std::max(1.0, peak) && values[i] > 0.0) {
      xs.push_back(lags[i]);
      ys.push_back(std::log(values[i]));
    }
  }
  if (xs.size() < 2) {
    fit.identically_zero = xs.empty();
    fit.constant = peak;
    return fit;
  }
  fit.identically_zero = false;
  const auto n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  fit.rate = std::exp(sxy / sxx);
  for (std::size_t i = 0; i < lags.size(); ++i)
    fit.constant = std::max(fit.constant, values[i] / std::pow(fit.rate, lags[i]));
  return fit;
}

/// max over conditioning states u of ||F(x) - E[F~(x, xi_{t+l}) | u]|| for
/// l in `lags`, by matrix powers. Conditioning on single states is the worst
/// case over histories for a finite chain.
inline std::vector<double> conditional_bias_exact(const VIProblem& problem, const FiniteChainModel& model,
                                                  const Vector& x, const std::vector<int>& lags) {
  const Matrix g = model.state_means(problem, x);
  const Vector mean = g * model.pi;
  std::vector<double> out;
  out.reserve(lags.size());
  for (int lag : lags) {
    Matrix Pk = Matrix::Identity(model.num_states(), model.num_states());
    for (int i = 0; i < model.steps_for_lag(lag); ++i) Pk = Pk * model.P;
    // Row u of Pk times g^T is the conditional mean from u.
    const Matrix cond = g * Pk.transpose();
    double worst = 0.0;
    for (int u = 0; u < model.num_states(); ++u) worst = std::max(worst, (mean - cond.col(u)).norm());
    out.push_back(worst);
  }
  return out;
}

/// max over u of ||(F(x) - E[F~(x,.)|u]) - (F(y) - E[F~(y,.)|u])|| / ||x - y||.
inline std::vector<double> conditional_bias_difference_exact(const VIProblem& problem,
                                                             const FiniteChainModel& model, const Vector& x,
                                                             const Vector& y, const std::vector<int>& lags) {
  const Matrix gx = model.state_means(problem, x);
  const Matrix gy = model.state_means(problem, y);
  const Matrix g = gx - gy;
  const Vector mean = g * model.pi;
  const double dist = (x - y).norm();
  std::vector<double> out;
  for (int lag : lags) {
    Matrix Pk = Matrix::Identity(model.num_states(), model.num_states());
    for (int i = 0; i < model.steps_for_lag(lag); ++i) Pk = Pk * model.P;
    const Matrix cond = g * Pk.transpose();
    double worst = 0.0;
    for (int u = 0; u < model.num_states(); ++u) worst = std::max(worst, (mean - cond.col(u)).norm());
    out.push_back(dist > 0.0 ? worst / dist : 0.0);
  }
  return out;
}

/// A continuous-state chain certified by Monte Carlo.
struct ContinuousChainModel {
  std::function<Vector(Rng&)> draw_stationary_state;
  std::function<Vector(const Vector&, Rng&)> step;
  // E[F~(x, xi) | chain state], with any observation noise integrated out.
  std::function<Vector(const Vector&, const Vector&)> marginal_operator;
};

struct MonteCarloBias {
  std::vector<double> values;
  std::vector<double> stderrs;
};

/// max over sampled conditioning states of the Monte Carlo conditional bias.
inline MonteCarloBias conditional_bias_monte_carlo(const VIProblem& problem, const ContinuousChainModel& model,
                                                   const Vector& x, const std::vector<int>& lags, int conditioning_states,
                                                   int paths, Rng& rng) {
  const Vector F = problem.mean_operator(x);
  MonteCarloBias out;
  out.values.assign(lags.size(), 0.0);
  out.stderrs.assign(lags.size(), 0.0);
  for (int c = 0; c < conditioning_states; ++c) {
    const Vector start = model.draw_stationary_state(rng);
    std::vector<Vector> sum(lags.size(), Vector::Zero(x.size()));
    std::vector<double> sumsq(lags.size(), 0.0);
    for (int p = 0; p < paths; ++p) {
      Vector state = start;
      int at = 0;
      for (std::size_t i = 0; i < lags.size(); ++i) {
        while (at < lags[i]) {
          state = model.step(state, rng);
          ++at;
        }
        const Vector v = model.marginal_operator(x, state);
        sum[i] += v;
        sumsq[i] += v.squaredNorm();
      }
    }
    for (std::size_t i = 0; i < lags.size(); ++i) {
      const Vector mean = sum[i] / static_cast<double>(paths);
      const double bias = (F - mean).norm();
      const double var = std::max(0.0, sumsq[i] / paths - mean.squaredNorm());
      if (bias >= out.values[i]) {
        out.values[i] = bias;
        out.stderrs[i] = std::sqrt(var / paths);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assumption certification
// ---------------------------------------------------------------------------

struct CertificationTolerances {
  double sampled = 0.05;  // Lipschitz / monotonicity certificates
  double exact = 1e-6;    // exact identities
  int lipschitz_pairs = 1000;
  int variance_points = 20;
  int variance_samples = 2000;
  int monotone_points = 1000;
  int max_lag = 20;
  int mc_conditioning_states = 4;
  int mc_paths = 200;
  double probe_radius = 1.0;  // sampled points lie within this distance of x*
  std::uint64_t seed = 0;
};

struct CertificationInput {
  const VIProblem* problem = nullptr;
  std::function<Sample(Rng&)> draw_stationary;  // for Lipschitz / variance checks
  std::optional<FiniteChainModel> finite_chain;
  std::optional<ContinuousChainModel> continuous_chain;
  // Samples independent of the past and stationary: the conditional law
  // equals the marginal, so the bias vanishes identically.
  bool samples_independent = false;
};

struct CertificationReport {
  std::string problem;
  // (a) Lipschitz in x
  double declared_lipschitz = 0.0;
  double max_lipschitz_ratio = 0.0;
  bool lipschitz_ok = true;
  // (b) variance
  std::optional<double> sigma_sq, zeta_sq;
  double max_variance_excess = -std::numeric_limits<double>::infinity();  // lhs - rhs
  bool variance_ok = true;
  bool variance_checked = false;
  // generalized strong monotonicity
  std::optional<double> mu;
  double min_monotone_ratio = std::numeric_limits<double>::infinity();  // <F(x), x-x*> / ||x-x*||^2
  bool monotone_ok = true;
  bool monotone_checked = false;
  // (c), (d) conditional bias
  std::string bias_method = "none";
  std::vector<int> lags;
  std::vector<double> bias_at_solution;
  std::vector<double> bias_at_solution_stderr;
  DecayFit bias_fit;
  std::vector<double> bias_difference;
  DecayFit difference_fit;
  std::optional<MixingCertificate> mixing;
  std::optional<double> tau_M;
  std::vector<std::string> notes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["problem"] = problem;
    j["lipschitz"] = {{"declared", declared_lipschitz}, {"max_ratio", max_lipschitz_ratio}, {"ok", lipschitz_ok}};
    j["variance"] = {{"checked", variance_checked},
                     {"sigma_sq", sigma_sq ? nlohmann::json(*sigma_sq) : nlohmann::json(nullptr)},
                     {"zeta_sq", zeta_sq ? nlohmann::json(*zeta_sq) : nlohmann::json(nullptr)},
                     {"max_excess", variance_checked ? nlohmann::json(max_variance_excess) : nlohmann::json(nullptr)},
                     {"ok", variance_ok}};
    j["monotonicity"] = {{"checked", monotone_checked},
                         {"mu", mu ? nlohmann::json(*mu) : nlohmann::json(nullptr)},
                         {"min_ratio", monotone_checked ? nlohmann::json(min_monotone_ratio) : nlohmann::json(nullptr)},
                         {"ok", monotone_ok}};
    j["conditional_bias"] = {{"method", bias_method},
                             {"lags", lags},
                             {"at_solution", bias_at_solution},
                             {"at_solution_stderr", bias_at_solution_stderr},
                             {"C_M", bias_fit.constant},
                             {"rate", bias_fit.rate},
                             {"identically_zero", bias_fit.identically_zero},
                             {"difference", bias_difference},
                             {"C_B", difference_fit.constant},
                             {"difference_rate", difference_fit.rate}};
    if (mixing)
      j["mixing"] = {{"rho", mixing->estimated_rho},
                     {"C", mixing->estimated_C},
                     {"method", mixing->method == MixingCertificate::Method::SpectralGap ? "spectral_gap" : "empirical"}};
    if (tau_M) j["tau_M"] = *tau_M;
    j["notes"] = notes;
    return j;
  }
};

/// Runs every applicable certificate; violations are recorded, never thrown.
inline CertificationReport certify_assumptions(const CertificationInput& input, const CertificationTolerances& tol = {}) {
  if (input.problem == nullptr) throw InvalidArgument("certification needs a problem");
  const VIProblem& problem = *input.problem;
  CertificationReport rep;
  rep.problem = problem.name;
  rep.declared_lipschitz = problem.oracle.lipschitz_x;
  rep.sigma_sq = problem.constants.sigma_sq;
  rep.zeta_sq = problem.constants.zeta_sq;
  rep.mu = problem.constants.mu;
  Rng rng(derive_seed(tol.seed, "certify"));
  if (!problem.solution) {
    rep.notes.push_back("no reference solution: certificates around x* skipped");
    return rep;
  }
  const Vector& x_star = *problem.solution;
  const auto n = x_star.size();
  auto probe = [&](double radius) { return uniform_in_ball(x_star, radius, rng); };

  if (input.draw_stationary) {
    for (int i = 0; i < tol.lipschitz_pairs; ++i) {
      const Vector x = probe(tol.probe_radius), y = probe(tol.probe_radius);
      const Sample xi = input.draw_stationary(rng);
      const double dist = (x - y).norm();
      if (dist == 0.0) continue;
      const double ratio = (problem.oracle.evaluate(x, xi) - problem.oracle.evaluate(y, xi)).norm() / dist;
      rep.max_lipschitz_ratio = std::max(rep.max_lipschitz_ratio, ratio);
    }
    rep.lipschitz_ok = rep.max_lipschitz_ratio <= rep.declared_lipschitz * (1.0 + tol.sampled);

    if (rep.sigma_sq && rep.zeta_sq) {
      rep.variance_checked = true;
      for (int i = 0; i < tol.variance_points; ++i) {
        const Vector x = i == 0 ? x_star : probe(tol.probe_radius);
        std::vector<Vector> vals;
        vals.reserve(static_cast<std::size_t>(tol.variance_samples));
        Vector mean = Vector::Zero(n);
        for (int s = 0; s < tol.variance_samples; ++s) {
          vals.push_back(problem.oracle.evaluate(x, input.draw_stationary(rng)));
          mean += vals.back();
        }
        mean /= tol.variance_samples;
        double var = 0.0, var_sq = 0.0;
        for (const auto& v : vals) {
          const double e = (v - mean).squaredNorm();
          var += e;
          var_sq += e * e;
        }
        var /= tol.variance_samples;
        // A tight bound is met only on average; allow 3 standard errors of the estimate.
        const double var_se = std::sqrt(std::max(0.0, var_sq / tol.variance_samples - var * var) / tol.variance_samples);
        const double rhs = 0.5 * *rep.sigma_sq + 0.5 * *rep.zeta_sq * (x - x_star).squaredNorm();
        rep.max_variance_excess = std::max(rep.max_variance_excess, var - rhs * (1.0 + tol.sampled) - 3.0 * var_se);
      }
      rep.variance_ok = rep.max_variance_excess <= 0.0;
    }
  }

  if (problem.mean_operator && rep.mu) {
    rep.monotone_checked = true;
    for (int i = 0; i < tol.monotone_points; ++i) {
      const Vector x = probe(tol.probe_radius);
      const double d2 = (x - x_star).squaredNorm();
      if (d2 == 0.0) continue;
      rep.min_monotone_ratio = std::min(rep.min_monotone_ratio, problem.mean_operator(x).dot(x - x_star) / d2);
    }
    rep.monotone_ok = rep.min_monotone_ratio >= *rep.mu * (1.0 - tol.sampled);
  }

  for (int l = 1; l <= tol.max_lag; ++l) rep.lags.push_back(l);
  if (input.samples_independent) {
    rep.bias_method = "independent";
    rep.bias_at_solution.assign(rep.lags.size(), 0.0);
    rep.bias_difference.assign(rep.lags.size(), 0.0);
    rep.bias_fit = fit_geometric_decay(rep.lags, rep.bias_at_solution);
    rep.difference_fit = rep.bias_fit;
    rep.notes.push_back("independent stationary samples: conditional law equals the marginal");
  } else if (input.finite_chain) {
    const FiniteChainModel& model = *input.finite_chain;
    rep.bias_method = "exact";
    rep.bias_at_solution = conditional_bias_exact(problem, model, x_star, rep.lags);
    rep.bias_fit = fit_geometric_decay(rep.lags, rep.bias_at_solution);
    // Difference bias at a few probe pairs; the worst ratio per lag.
    rep.bias_difference.assign(rep.lags.size(), 0.0);
    for (int i = 0; i < 5; ++i) {
      const Vector x = probe(tol.probe_radius), y = probe(tol.probe_radius);
      const auto d = conditional_bias_difference_exact(problem, model, x, y, rep.lags);
      for (std::size_t l = 0; l < d.size(); ++l) rep.bias_difference[l] = std::max(rep.bias_difference[l], d[l]);
    }
    rep.difference_fit = fit_geometric_decay(rep.lags, rep.bias_difference);
    MixingCertificate mix;
    mix.method = MixingCertificate::Method::SpectralGap;
    mix.estimated_rho = second_eigenvalue_modulus(model.P);
    mix.estimated_C = rep.bias_fit.constant / 40.0 + rep.difference_fit.constant;
    rep.mixing = mix;
    rep.notes.push_back("conditional bias evaluated by exact enumeration, conditioning on single states");
  } else if (input.continuous_chain) {
    const ContinuousChainModel& model = *input.continuous_chain;
    rep.bias_method = "monte_carlo";
    if (!problem.mean_operator) {
      rep.notes.push_back("no mean operator: Monte Carlo bias skipped");
    } else {
      const auto mc = conditional_bias_monte_carlo(problem, model, x_star, rep.lags, tol.mc_conditioning_states,
                                                   tol.mc_paths, rng);
      rep.bias_at_solution = mc.values;
      rep.bias_at_solution_stderr = mc.stderrs;
      rep.bias_fit = fit_geometric_decay(rep.lags, rep.bias_at_solution);
    }
  }

  if (rep.mixing && rep.mu && rep.mixing->estimated_rho > 0.0 && rep.mixing->estimated_rho < 1.0 &&
      rep.mixing->estimated_C > 0.0) {
    rep.tau_M = effective_mixing_time(rep.bias_fit.constant, rep.difference_fit.constant, *rep.mu,
                                      rep.mixing->estimated_rho);
  }
  return rep;
}

}  // namespace mer
