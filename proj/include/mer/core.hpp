#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <variant>

#include <Eigen/Dense>

#include "mer/errors.hpp"

namespace mer {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline bool all_finite(const Vector& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// Covariate/response pair of a generalized linear model.
struct GLMPair {
  Vector a;
  double y = 0.0;
};

/// One transition of a Markov reward process, already mapped to features.
/// The state indices are kept so finite-chain tooling can enumerate.
struct TDTransition {
  Vector phi_s;
  Vector phi_next;
  double reward = 0.0;
  int state = -1;
  int next_state = -1;
};

/// A bare chain state: a finite index, an embedding vector, or both.
struct RawState {
  int index = -1;
  Vector value;
};

using Sample = std::variant<GLMPair, TDTransition, RawState>;

inline const char* payload_name(const Sample& s) {
  switch (s.index()) {
    case 0: return "glm";
    case 1: return "td";
    default: return "raw";
  }
}

// ---------------------------------------------------------------------------
// Feasible regions
// ---------------------------------------------------------------------------

struct Unconstrained {};

struct EuclideanBall {
  Vector center;
  double radius = 0.0;
};

class FeasibleRegion {
 public:
  FeasibleRegion() = default;
  FeasibleRegion(Unconstrained u) : kind_(u) {}  // NOLINT(google-explicit-constructor)
  FeasibleRegion(EuclideanBall b) : kind_(std::move(b)) {  // NOLINT(google-explicit-constructor)
    const auto& ball = std::get<EuclideanBall>(kind_);
    if (!(ball.radius >= 0.0) || !std::isfinite(ball.radius))
      throw InvalidArgument("ball radius must be finite and non-negative");
    if (!all_finite(ball.center)) throw InvalidArgument("ball center must be finite");
  }

  static FeasibleRegion unconstrained() { return FeasibleRegion(Unconstrained{}); }
  static FeasibleRegion ball(Vector center, double radius) {
    return FeasibleRegion(EuclideanBall{std::move(center), radius});
  }

  bool is_unconstrained() const { return std::holds_alternative<Unconstrained>(kind_); }
  const EuclideanBall* as_ball() const { return std::get_if<EuclideanBall>(&kind_); }

  bool contains(const Vector& u, double tol = 1e-12) const {
    if (const auto* b = as_ball()) return (u - b->center).norm() <= b->radius * (1.0 + tol) + tol;
    return true;
  }

  /// Euclidean projection onto the region.
  ///
  /// A point on or inside the ball boundary is returned unchanged; only
  /// strictly exterior points are radially rescaled.
  Vector project(const Vector& u) const {
    const auto* b = as_ball();
    if (b == nullptr) return u;
    const Vector offset = u - b->center;
    const double dist = offset.norm();
    // A rescaled point can land a few ulps outside; treating it as on the
    // boundary keeps the projection idempotent.
    if (dist <= b->radius * (1.0 + 4.0 * std::numeric_limits<double>::epsilon())) return u;
    return b->center + offset * (b->radius / dist);
  }

  std::string describe() const {
    if (const auto* b = as_ball()) return "ball(radius=" + std::to_string(b->radius) + ")";
    return "unconstrained";
  }

 private:
  std::variant<Unconstrained, EuclideanBall> kind_;
};

inline Vector project(const FeasibleRegion& region, const Vector& u) { return region.project(u); }

// ---------------------------------------------------------------------------
// Oracles and problems
// ---------------------------------------------------------------------------

using OracleFn = std::function<Vector(const Vector&, const Sample&)>;
using MeanOperatorFn = std::function<Vector(const Vector&)>;

struct StochasticOracle {
  OracleFn evaluate;
  double lipschitz_x = 0.0;               // L~1
  std::optional<double> lipschitz_sample;  // L~2
};

/// Problem constants; any subset may be known.
struct ProblemConstants {
  std::optional<double> L;
  std::optional<double> mu;
  std::optional<double> sigma_sq;
  std::optional<double> zeta_sq;
  std::optional<double> D;
};

struct VIProblem {
  std::string name;
  StochasticOracle oracle;
  MeanOperatorFn mean_operator;  // empty when F has no closed form
  FeasibleRegion region;
  std::optional<Vector> solution;
  ProblemConstants constants;

  Eigen::Index dimension() const {
    if (solution) return solution->size();
    if (const auto* b = region.as_ball()) return b->center.size();
    return 0;
  }

  Vector sample_operator(const Vector& x, const Sample& xi) const {
    Vector g = oracle.evaluate(x, xi);
    if (g.size() != x.size())
      throw OracleFailure(name + ": oracle output dimension " + std::to_string(g.size()) +
                          " != input dimension " + std::to_string(x.size()));
    if (!all_finite(g)) throw OracleFailure(name + ": oracle returned a non-finite value");
    return g;
  }

  /// Throws InvalidArgument if the declared mu and L are inconsistent.
  void check_constants() const {
    if (constants.mu && !(*constants.mu > 0.0)) throw InvalidArgument("mu must be positive");
    if (constants.mu && constants.L && *constants.L < *constants.mu)
      throw InvalidArgument("L must be at least mu");
  }
};

// ---------------------------------------------------------------------------
// The proximal SA step
// ---------------------------------------------------------------------------

/// Result of one step: the new iterate and the operator value that drove it.
struct StepResult {
  Vector next;
  Vector operator_value;
};

/// argmin_{z in X} eta <g, z> + 0.5 ||z - x||^2, computed in closed form as
/// Proj_X(x - eta g).
inline Vector prox_step(const FeasibleRegion& region, const Vector& x, const Vector& g,
                        double eta) {
  return region.project(x - eta * g);
}

inline StepResult sa_step_full(const VIProblem& problem, const Vector& x, const Sample& xi,
                               double eta) {
  Vector g = problem.sample_operator(x, xi);
  Vector next = prox_step(problem.region, x, g, eta);
  if (!all_finite(next)) throw OracleFailure(problem.name + ": iterate became non-finite");
  return {std::move(next), std::move(g)};
}

inline Vector sa_step(const VIProblem& problem, const Vector& x, const Sample& xi, double eta) {
  return sa_step_full(problem, x, xi, eta).next;
}

/// ||x_next - x|| <= 2 eta ||g|| + tol_abs.
inline bool step_displacement_check(const Vector& x_next, const Vector& x, const Vector& g,
                                    double eta, double tol_abs = 1e-12) {
  return (x_next - x).norm() <= 2.0 * eta * g.norm() + tol_abs;
}

/// Slack of the three-point inequality at probe point z:
///   0.5||x - z||^2 - 0.5||x_next - z||^2 - eta <g, x_next - z> - 0.5||x_next - x||^2.
/// Non-negative (up to rounding) for every z in X when x_next is the exact
/// prox step.
inline double three_point_slack(const Vector& x, const Vector& x_next, const Vector& g,
                                double eta, const Vector& z) {
  return 0.5 * (x - z).squaredNorm() - 0.5 * (x_next - z).squaredNorm() -
         eta * g.dot(x_next - z) - 0.5 * (x_next - x).squaredNorm();
}

}  // namespace mer
