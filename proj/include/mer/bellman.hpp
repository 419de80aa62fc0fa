#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mer/core.hpp"
#include "mer/errors.hpp"
#include "mer/sources.hpp"

namespace mer {

/// Markov reward process with linear features. `features` is d x |S|; its
/// column s is psi(s).
struct MRPSpec {
  Matrix P;
  double gamma = 0.5;
  Matrix features;
  Matrix reward;  // R(s, s')
  bool orthonormalize = false;
  std::uint64_t rng_seed = 0;

  int num_states() const { return static_cast<int>(P.rows()); }
  int feature_dim() const { return static_cast<int>(features.rows()); }

  void validate() const {
    validate_row_stochastic(P);
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidArgument("gamma must lie in [0, 1)");
    if (features.cols() != P.rows()) throw InvalidArgument("features must have one column per state");
    if (features.rows() < 1) throw InvalidArgument("feature dimension must be positive");
    if (reward.rows() != P.rows() || reward.cols() != P.cols())
      throw InvalidArgument("reward must be |S| x |S|");
  }

  /// r(s) = sum_{s'} R(s,s') P(s,s').
  Vector expected_reward() const { return P.cwiseProduct(reward).rowwise().sum(); }

  /// Feature matrix actually used: Psi, or Q^{-1/2} Psi with Q = Psi Psi^T.
  Matrix effective_features() const {
    if (!orthonormalize) return features;
    const Matrix Q = features * features.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> es(Q);
    if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff()))
      throw SingularSystem("features are linearly dependent");
    const Vector inv_sqrt = es.eigenvalues().cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose() * features;
  }
};

/// The sticky-chain policy-evaluation family: features e_{min(s, d)} and
/// reward 1{s >= d} in 1-based state numbering. The reward depends only on
/// the source state of a transition.
inline MRPSpec sticky_mrp(int num_states, int feature_dim, double stickiness, double gamma,
                          std::uint64_t seed = 0) {
  if (feature_dim < 1 || feature_dim > num_states)
    throw InvalidArgument("feature_dim must lie in [1, num_states]");
  StickyChainKernel kernel{num_states, stickiness, seed};
  MRPSpec spec;
  spec.P = kernel.matrix();
  spec.gamma = gamma;
  spec.features = Matrix::Zero(feature_dim, num_states);
  spec.reward = Matrix::Zero(num_states, num_states);
  for (int s = 0; s < num_states; ++s) {
    spec.features(std::min(s, feature_dim - 1), s) = 1.0;
    if (s + 1 >= feature_dim) spec.reward.row(s).setOnes();
  }
  spec.rng_seed = seed;
  return spec;
}

namespace detail {

inline std::vector<bool> reachable(const Matrix& P, int start, bool forward) {
  const auto n = static_cast<int>(P.rows());
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::vector<int> stack{start};
  seen[static_cast<std::size_t>(start)] = true;
  while (!stack.empty()) {
    const int s = stack.back();
    stack.pop_back();
    for (int u = 0; u < n; ++u) {
      const double w = forward ? P(s, u) : P(u, s);
      if (w > 0.0 && !seen[static_cast<std::size_t>(u)]) {
        seen[static_cast<std::size_t>(u)] = true;
        stack.push_back(u);
      }
    }
  }
  return seen;
}

}  // namespace detail

/// Unique stationary law of an irreducible chain: pi P = pi, sum pi = 1.
///
/// Irreducibility is decided on the support graph of P, so the check has no
/// tolerance. The law itself comes from a QR solve of the stacked system
/// [(P^T - I); 1^T] pi = [0; 1].
inline Vector stationary_distribution(const Matrix& P, double residual_tol = 1e-12) {
  validate_row_stochastic(P, 1e-10);
  const auto n = static_cast<int>(P.rows());
  const auto fwd = detail::reachable(P, 0, true);
  const auto bwd = detail::reachable(P, 0, false);
  for (int s = 0; s < n; ++s)
    if (!fwd[static_cast<std::size_t>(s)] || !bwd[static_cast<std::size_t>(s)])
      throw NotErgodic("chain is reducible: state " + std::to_string(s) +
                       " is not in the communicating class of state 0");
  Matrix system(n + 1, n);
  system.topRows(n) = P.transpose() - Matrix::Identity(n, n);
  system.row(n).setOnes();
  Vector rhs = Vector::Zero(n + 1);
  rhs(n) = 1.0;
  Vector pi = system.colPivHouseholderQr().solve(rhs);
  pi /= pi.sum();
  const double residual = (P.transpose() * pi - pi).lpNorm<Eigen::Infinity>();
  if (residual > residual_tol * std::max(1.0, static_cast<double>(n)))
    throw NotErgodic("stationary solve residual " + std::to_string(residual) + " above tolerance");
  return pi;
}

/// v* solving (I - gamma P) v = r.
inline Vector exact_value_function(const MRPSpec& spec) {
  spec.validate();
  const int S = spec.num_states();
  const Matrix M = Matrix::Identity(S, S) - spec.gamma * spec.P;
  return M.partialPivLu().solve(spec.expected_reward());
}

/// theta solving Psi Pi (I - gamma P) Psi^T theta = Psi Pi r.
inline Vector solve_projected_bellman(const MRPSpec& spec) {
  spec.validate();
  const Matrix Psi = spec.effective_features();
  const Vector pi = stationary_distribution(spec.P);
  const int S = spec.num_states();
  const Matrix weighted = Psi * pi.asDiagonal();
  const Matrix system = weighted * (Matrix::Identity(S, S) - spec.gamma * spec.P) * Psi.transpose();
  const Vector rhs = weighted * spec.expected_reward();
  Eigen::FullPivLU<Matrix> lu(system);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible())
    throw SingularSystem("projected Bellman system is singular (rank " + std::to_string(lu.rank()) +
                         " < " + std::to_string(system.rows()) + ")");
  Vector theta = lu.solve(rhs);
  // One step of iterative refinement.
  theta += lu.solve(rhs - system * theta);
  return theta;
}

}  // namespace mer
