#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mer/bellman.hpp"
#include "mer/core.hpp"
#include "mer/errors.hpp"
#include "mer/rng.hpp"
#include "mer/sources.hpp"

namespace mer {

// ---------------------------------------------------------------------------
// Link functions
// ---------------------------------------------------------------------------

enum class LinkKind { Sigmoid, Identity, Custom };

struct Link {
  LinkKind kind = LinkKind::Identity;
  std::function<double(double)> custom;  // used when kind == Custom
  double custom_mu = 0.0;
  double custom_L = 0.0;

  static Link sigmoid() { return {LinkKind::Sigmoid, {}, 0.0, 0.0}; }
  static Link identity() { return {LinkKind::Identity, {}, 1.0, 1.0}; }
  static Link monotone(std::function<double(double)> f, double mu_f, double L_f) {
    return {LinkKind::Custom, std::move(f), mu_f, L_f};
  }

  double operator()(double z) const {
    switch (kind) {
      case LinkKind::Sigmoid:
        return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      case LinkKind::Identity: return z;
      case LinkKind::Custom: return custom(z);
    }
    return z;
  }

  /// Global Lipschitz constant L_f.
  double lipschitz() const {
    switch (kind) {
      case LinkKind::Sigmoid: return 0.25;
      case LinkKind::Identity: return 1.0;
      case LinkKind::Custom: return custom_L;
    }
    return custom_L;
  }

  /// Strong-monotonicity modulus over [-radius, radius]. The sigmoid has no
  /// global modulus; its slope is smallest at the interval ends.
  double monotonicity(double radius) const {
    switch (kind) {
      case LinkKind::Sigmoid: {
        const double s = (*this)(radius);
        return s * (1.0 - s);
      }
      case LinkKind::Identity: return 1.0;
      case LinkKind::Custom: return custom_mu;
    }
    return custom_mu;
  }

  const char* name() const {
    switch (kind) {
      case LinkKind::Sigmoid: return "sigmoid";
      case LinkKind::Identity: return "identity";
      case LinkKind::Custom: return "custom";
    }
    return "custom";
  }
};

// ---------------------------------------------------------------------------
// Reported constants
// ---------------------------------------------------------------------------

struct NoiseConstants {
  double sigma_sq = 0.0;
  double zeta_sq = 0.0;
};

/// sigma^2 = 6 D_a^2 sigma_v^2, zeta^2 = 12 L_f^2 D_a^4.
inline NoiseConstants glm_noise_constants(double D_a, double sigma_v, double L_f) {
  return {6.0 * D_a * D_a * sigma_v * sigma_v, 12.0 * L_f * L_f * std::pow(D_a, 4)};
}

/// sigma^2 = 48 (1+g)^2 D_psi^4 D^2 + 48 D_psi^2 R^2, zeta^2 = 12 (1+g)^2 D_psi^4.
inline NoiseConstants policy_eval_noise_constants(double gamma, double D_psi, double D, double R_bar) {
  const double g2 = (1.0 + gamma) * (1.0 + gamma);
  return {48.0 * g2 * std::pow(D_psi, 4) * D * D + 48.0 * D_psi * D_psi * R_bar * R_bar,
          12.0 * g2 * std::pow(D_psi, 4)};
}

// ---------------------------------------------------------------------------
// Generalized linear model
// ---------------------------------------------------------------------------

enum class ARStationaryMethod { ExactGaussian, Restart };

struct GLMSpec {
  int dimension = 1;
  Link link = Link::identity();
  Vector x_star;
  double noise_std = 0.0;                 // sigma_v
  std::optional<double> covariate_bound;  // D_a; estimated when absent
  ARProcessConfig covariates;
  FeasibleRegion region;
  std::uint64_t noise_seed = 0;
  int kappa_samples = 100000;
  ARStationaryMethod stationary_method = ARStationaryMethod::ExactGaussian;

  void validate() const {
    if (dimension < 1) throw InvalidArgument("GLM dimension must be positive");
    if (x_star.size() != dimension) throw InvalidArgument("x_star dimension mismatch");
    if (covariates.dimension != dimension) throw InvalidArgument("covariate dimension mismatch");
    if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
    if (covariate_bound && !(*covariate_bound > 0.0)) throw InvalidArgument("D_a must be positive");
    if (kappa_samples < 2) throw InvalidArgument("kappa_samples must be at least 2");
  }
};

/// y = f(a^T x*) + v with v ~ N(0, sigma_v^2).
inline double glm_observe(const GLMSpec& spec, const Vector& a, Rng& rng) {
  if (!all_finite(a)) throw InvalidArgument("covariate must be finite");
  const double mean = spec.link(a.dot(spec.x_star));
  return spec.noise_std > 0.0 ? mean + spec.noise_std * rng.normal() : mean;
}

inline Vector glm_sample_operator(const Link& link, const Vector& x, const GLMPair& s) {
  return s.a * (link(s.a.dot(x)) - s.y);
}

/// A constructed GLM with the quantities estimated while building it.
struct GLMInstance {
  VIProblem problem;
  GLMSpec spec;
  Matrix ar_matrix;
  Matrix stationary_covariance;  // exact, sigma^2 (I - A^2)^{-1}
  Matrix empirical_covariance;
  double kappa = 0.0;           // smallest eigenvalue of empirical covariance
  double covariate_bound = 0.0;  // D_a used for the constants
  double link_mu = 0.0;
  double link_interval = 0.0;   // max |a^T x*| over the estimation samples
  int kappa_sample_count = 0;
  std::shared_ptr<const std::vector<Vector>> reference_covariates;

  /// Markovian stream of (a_t, y_t) continuing the covariate chain.
  SampleSource markov_source() const {
    auto process = std::make_shared<ARProcess>(spec.covariates, ar_matrix);
    auto rng = std::make_shared<Rng>(derive_seed(spec.noise_seed, "glm-observation"));
    auto stationary_rng = std::make_shared<Rng>(derive_seed(spec.noise_seed, "glm-stationary"));
    auto restart_process = std::make_shared<ARProcess>(
        [&] {
          ARProcessConfig c = spec.covariates;
          c.rng_seed = derive_seed(spec.covariates.rng_seed, "glm-restart");
          c.burn_in = 0;
          return c;
        }(),
        ar_matrix);
    const GLMSpec s = spec;
    auto started = std::make_shared<bool>(false);
    SampleSource src;
    src.name = "glm-ar";
    src.next = [process, rng, s, started]() {
      const Vector& a = *started ? process->next() : process->current();
      *started = true;
      return Sample{GLMPair{a, glm_observe(s, a, *rng)}};
    };
    if (spec.stationary_method == ARStationaryMethod::ExactGaussian) {
      Eigen::LLT<Matrix> llt(stationary_covariance);
      const Matrix chol = llt.matrixL();
      src.draw_stationary = [chol, stationary_rng, rng, s]() {
        Vector z(chol.rows());
        for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = stationary_rng->normal();
        Vector a = chol * z;
        return Sample{GLMPair{a, glm_observe(s, a, *stationary_rng)}};
      };
    } else {
      const int burn_in = spec.covariates.burn_in;
      src.draw_stationary = [restart_process, stationary_rng, s, burn_in]() {
        Vector a = restart_process->restart();
        for (int i = 0; i < burn_in; ++i) a = restart_process->next();
        return Sample{GLMPair{a, glm_observe(s, a, *stationary_rng)}};
      };
    }
    return src;
  }
};

/// Stationary covariance of a_{t+1} = A a_t + eps with symmetric stable A.
inline Matrix ar_stationary_covariance(const Matrix& A, double noise_variance) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A);
  const Vector lam = es.eigenvalues();
  Vector scale(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i) scale(i) = noise_variance / (1.0 - lam(i) * lam(i));
  return es.eigenvectors() * scale.asDiagonal() * es.eigenvectors().transpose();
}

inline GLMInstance glm_instance(const GLMSpec& spec) {
  spec.validate();
  GLMInstance inst;
  inst.spec = spec;
  inst.ar_matrix = build_ar_matrix(spec.covariates);
  inst.stationary_covariance = ar_stationary_covariance(inst.ar_matrix, spec.covariates.noise_variance);

  // Covariance, covariate bound and link interval are estimated from a
  // dedicated stationary run, independent of any buffer.
  ARProcessConfig est = spec.covariates;
  est.rng_seed = derive_seed(spec.covariates.rng_seed, "glm-kappa");
  ARProcess process(est, inst.ar_matrix);
  auto refs = std::make_shared<std::vector<Vector>>();
  refs->reserve(static_cast<std::size_t>(spec.kappa_samples));
  Matrix cov = Matrix::Zero(spec.dimension, spec.dimension);
  double max_norm = 0.0;
  double interval = 0.0;
  for (int i = 0; i < spec.kappa_samples; ++i) {
    const Vector& a = i == 0 ? process.current() : process.next();
    cov.selfadjointView<Eigen::Lower>().rankUpdate(a);
    max_norm = std::max(max_norm, a.norm());
    interval = std::max(interval, std::abs(a.dot(spec.x_star)));
    refs->push_back(a);
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(spec.kappa_samples);
  inst.empirical_covariance = cov;
  inst.kappa = Eigen::SelfAdjointEigenSolver<Matrix>(cov, Eigen::EigenvaluesOnly).eigenvalues()(0);
  inst.kappa_sample_count = spec.kappa_samples;
  if (!(inst.kappa > 0.0))
    throw DegenerateCovariance("estimated stationary covariance is not positive definite (kappa=" +
                               std::to_string(inst.kappa) + ")");
  inst.covariate_bound = spec.covariate_bound.value_or(max_norm);
  inst.link_interval = interval;
  inst.link_mu = spec.link.monotonicity(interval);
  inst.reference_covariates = refs;

  const Link link = spec.link;
  const Vector x_star = spec.x_star;
  const double Lf = link.lipschitz();
  const double Da = inst.covariate_bound;

  VIProblem& p = inst.problem;
  p.name = std::string("glm-") + link.name();
  p.oracle.evaluate = [link](const Vector& x, const Sample& xi) {
    return glm_sample_operator(link, x, std::get<GLMPair>(xi));
  };
  p.oracle.lipschitz_x = Lf * Da * Da;
  if (link.kind == LinkKind::Identity) {
    const Matrix Lambda = inst.stationary_covariance;
    p.mean_operator = [Lambda, x_star](const Vector& x) -> Vector { return Lambda * (x - x_star); };
  } else {
    // Monte Carlo mean over the estimation covariates.
    p.mean_operator = [refs, link, x_star](const Vector& x) -> Vector {
      Vector acc = Vector::Zero(x.size());
      for (const Vector& a : *refs) acc += a * (link(a.dot(x)) - link(a.dot(x_star)));
      return acc / static_cast<double>(refs->size());
    };
  }
  p.region = spec.region;
  p.solution = x_star;
  p.constants.L = Lf * Da * Da;
  p.constants.mu = inst.link_mu * inst.kappa;
  const NoiseConstants noise = glm_noise_constants(Da, spec.noise_std, Lf);
  p.constants.sigma_sq = noise.sigma_sq;
  p.constants.zeta_sq = noise.zeta_sq;
  p.constants.D = 2.0 * x_star.norm();
  return inst;
}

inline VIProblem glm_problem(const GLMSpec& spec) { return glm_instance(spec).problem; }

// ---------------------------------------------------------------------------
// Policy evaluation with linear features
// ---------------------------------------------------------------------------

inline Vector td_sample_operator(const Vector& theta, const TDTransition& t, double gamma) {
  const double td_error = t.phi_s.dot(theta) - t.reward - gamma * t.phi_next.dot(theta);
  return td_error * t.phi_s;
}

/// A constructed policy-evaluation problem and its exact ingredients.
struct PolicyEvalInstance {
  VIProblem problem;
  MRPSpec spec;
  Matrix Psi;  // effective features, d x |S|
  Vector pi;
  Vector theta_bar;
  Matrix system;  // Psi Pi (I - gamma P) Psi^T
  Vector rhs;     // Psi Pi r

  TDTransition transition(int s, int s_next) const {
    return {Psi.col(s), Psi.col(s_next), spec.reward(s, s_next), s, s_next};
  }

  /// Trajectory of consecutive transitions from a stationary start.
  SampleSource markov_source(std::uint64_t seed) const {
    auto chain = std::make_shared<FiniteChain>(spec.P, pi, seed);
    auto iid = std::make_shared<FiniteChain>(spec.P, pi, derive_seed(seed, "stationary"));
    const auto self = std::make_shared<PolicyEvalInstance>(*this);
    SampleSource src;
    src.name = "mrp";
    src.next = [chain, self]() {
      const int s = chain->state();
      const int s_next = chain->step();
      return Sample{self->transition(s, s_next)};
    };
    src.draw_stationary = [iid, self]() {
      const int s = iid->draw_from(self->pi);
      const int s_next = iid->draw_successor(s);
      return Sample{self->transition(s, s_next)};
    };
    return src;
  }
};

inline PolicyEvalInstance policy_eval_instance(const MRPSpec& spec) {
  spec.validate();
  PolicyEvalInstance inst;
  inst.spec = spec;
  inst.Psi = spec.effective_features();
  inst.pi = stationary_distribution(spec.P);
  const int S = spec.num_states();
  const Matrix Pi = inst.pi.asDiagonal();
  const Matrix I = Matrix::Identity(S, S);
  inst.system = inst.Psi * Pi * (I - spec.gamma * spec.P) * inst.Psi.transpose();
  inst.rhs = inst.Psi * Pi * spec.expected_reward();
  inst.theta_bar = solve_projected_bellman(spec);

  double lip = 0.0;
  double d_psi = 0.0;
  for (int s = 0; s < S; ++s) {
    d_psi = std::max(d_psi, inst.Psi.col(s).norm());
    for (int u = 0; u < S; ++u)
      if (spec.P(s, u) > 0.0)
        lip = std::max(lip, inst.Psi.col(s).norm() * (inst.Psi.col(s) - spec.gamma * inst.Psi.col(u)).norm());
  }
  const double r_bar = spec.reward.cwiseAbs().maxCoeff();
  const double gamma = spec.gamma;

  const Matrix sym = 0.5 * (inst.system + inst.system.transpose());
  const double mu = Eigen::SelfAdjointEigenSolver<Matrix>(sym, Eigen::EigenvaluesOnly).eigenvalues()(0);
  const double L = Eigen::JacobiSVD<Matrix>(inst.system).singularValues()(0);

  VIProblem& p = inst.problem;
  p.name = "policy-evaluation";
  p.oracle.evaluate = [gamma](const Vector& theta, const Sample& xi) {
    return td_sample_operator(theta, std::get<TDTransition>(xi), gamma);
  };
  p.oracle.lipschitz_x = lip;
  const Matrix system = inst.system;
  const Vector rhs = inst.rhs;
  p.mean_operator = [system, rhs](const Vector& theta) -> Vector { return system * theta - rhs; };
  p.region = FeasibleRegion::unconstrained();
  p.solution = inst.theta_bar;
  p.constants.L = L;
  if (mu > 0.0) p.constants.mu = mu;
  const double D = 2.0 * inst.theta_bar.norm();
  p.constants.D = D;
  const NoiseConstants noise = policy_eval_noise_constants(gamma, d_psi, D, r_bar);
  p.constants.sigma_sq = noise.sigma_sq;
  p.constants.zeta_sq = noise.zeta_sq;
  return inst;
}

inline VIProblem policy_eval_problem(const MRPSpec& spec) { return policy_eval_instance(spec).problem; }

// ---------------------------------------------------------------------------
// Synthetic linear operator
// ---------------------------------------------------------------------------

/// F(x) = A (x - x*). Samples are RawState values w and the oracle returns
/// F(x) + noise_std * w, so every constant is available in closed form.
struct SyntheticLinearSpec {
  Matrix A_op;
  Vector x_star;
  double noise_std = 0.0;
  FeasibleRegion region;
  std::optional<Vector> initial_point;  // x_1, used for the default D

  int dimension() const { return static_cast<int>(x_star.size()); }

  void validate() const {
    if (A_op.rows() != A_op.cols() || A_op.rows() != x_star.size())
      throw InvalidArgument("A_op must be n x n with n = dim(x_star)");
    if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be non-negative");
    if (symmetric_part_min_eigenvalue() <= 0.0)
      throw InvalidArgument("symmetric part of A_op must be positive definite");
  }

  double symmetric_part_min_eigenvalue() const {
    const Matrix sym = 0.5 * (A_op + A_op.transpose());
    return Eigen::SelfAdjointEigenSolver<Matrix>(sym, Eigen::EigenvaluesOnly).eigenvalues()(0);
  }
};

inline VIProblem synthetic_linear_problem(const SyntheticLinearSpec& spec) {
  spec.validate();
  VIProblem p;
  p.name = "synthetic-linear";
  const Matrix A = spec.A_op;
  const Vector x_star = spec.x_star;
  const double noise = spec.noise_std;
  const double L = Eigen::JacobiSVD<Matrix>(A).singularValues()(0);
  p.oracle.evaluate = [A, x_star, noise](const Vector& x, const Sample& xi) -> Vector {
    Vector g = A * (x - x_star);
    const auto& w = std::get<RawState>(xi).value;
    if (noise > 0.0 && w.size() > 0) g += noise * w;
    return g;
  };
  p.oracle.lipschitz_x = L;
  p.oracle.lipschitz_sample = noise;
  p.mean_operator = [A, x_star](const Vector& x) -> Vector { return A * (x - x_star); };
  p.region = spec.region;
  p.solution = x_star;
  p.constants.L = L;
  p.constants.mu = spec.symmetric_part_min_eigenvalue();
  // Unit-variance Gaussian noise per coordinate.
  p.constants.sigma_sq = 2.0 * noise * noise * spec.dimension();
  p.constants.zeta_sq = 0.0;
  const Vector x1 = spec.initial_point.value_or(Vector::Zero(spec.dimension()));
  p.constants.D = 2.0 * (x1 - x_star).norm();
  return p;
}

/// i.i.d. standard Gaussian noise vectors; the stream is its own stationary law.
inline SampleSource gaussian_noise_source(int dimension, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  auto draw = [rng, dimension]() {
    Vector w(dimension);
    for (int i = 0; i < dimension; ++i) w(i) = rng->normal();
    return Sample{RawState{-1, w}};
  };
  return {"gaussian-noise", draw, draw};
}

/// Per-state noise vectors for a finite chain: Gaussian draws centered under
/// `pi` and rescaled so that E_pi ||w||^2 = dimension.
inline std::vector<Vector> centered_state_embedding(int num_states, int dimension, const Vector& pi,
                                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vector> z(static_cast<std::size_t>(num_states), Vector(dimension));
  for (auto& v : z)
    for (int i = 0; i < dimension; ++i) v(i) = rng.normal();
  Vector mean = Vector::Zero(dimension);
  for (int s = 0; s < num_states; ++s) mean += pi(s) * z[static_cast<std::size_t>(s)];
  double second = 0.0;
  for (int s = 0; s < num_states; ++s) {
    z[static_cast<std::size_t>(s)] -= mean;
    second += pi(s) * z[static_cast<std::size_t>(s)].squaredNorm();
  }
  const double scale = std::sqrt(dimension / second);
  for (auto& v : z) v *= scale;
  return z;
}

}  // namespace mer
