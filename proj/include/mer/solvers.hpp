#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mer/core.hpp"
#include "mer/errors.hpp"
#include "mer/rng.hpp"
#include "mer/sources.hpp"

namespace mer {

#ifdef NDEBUG
inline constexpr bool kCheckContractionByDefault = false;
#else
inline constexpr bool kCheckContractionByDefault = true;
#endif

// ---------------------------------------------------------------------------
// Mixing-time bookkeeping
// ---------------------------------------------------------------------------

/// tau_M = log(18 C / mu) / log(1 / rho) with C = C_M / 40 + C_B.
inline double effective_mixing_time(double C_M, double C_B, double mu, double rho) {
  if (!(rho > 0.0 && rho < 1.0)) throw InvalidArgument("rho must lie in (0, 1)");
  if (!(mu > 0.0)) throw InvalidArgument("mu must be positive");
  const double C = C_M / 40.0 + C_B;
  if (!(C > 0.0)) throw InvalidArgument("C = C_M/40 + C_B must be positive");
  return std::log(18.0 * C / mu) / std::log(1.0 / rho);
}

/// alpha_k = tau_M / tau_k.
inline double mixing_ratio(double tau_M, double tau_k) { return tau_M / tau_k; }

/// M = max{2 + 4C/mu, 40 C_M / mu}.
inline double theorem_M(double C_M, double C_B, double mu) {
  const double C = C_M / 40.0 + C_B;
  return std::max(2.0 + 4.0 * C / mu, 40.0 * C_M / mu);
}

// ---------------------------------------------------------------------------
// Step sizes
// ---------------------------------------------------------------------------

struct TheoremConstants {
  double mu = 0.0;
  double zeta_sq = 0.0;
  double Lbar = 0.0;  // L + L~1
  // p_k inputs; when any is missing p_k falls back to 1.
  std::optional<double> M;
  std::optional<double> D;
  std::optional<double> sigma_sq;
  std::optional<double> F_star_norm;

  bool has_pk_inputs() const { return M && D && sigma_sq && F_star_norm; }
};

/// p_k = 1 + log(mu^2 M max{1, D^2} / (3 (6 sigma^2 + 4 ||F(x*)||^2))) / log T_k.
inline double theorem_pk(double T_k, const TheoremConstants& c) {
  const double num = c.mu * c.mu * c.M.value() * std::max(1.0, c.D.value() * c.D.value());
  const double den = 3.0 * (6.0 * c.sigma_sq.value() + 4.0 * c.F_star_norm.value() * c.F_star_norm.value());
  if (den == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 + std::log(num / den) / std::log(T_k);
}

struct TheoremStep {
  double eta = 0.0;
  double constant_branch = 0.0;
  double decay_branch = 0.0;
  double pk = 1.0;
  bool pk_defaulted = false;
};

/// min{ 3 mu / (16 (zeta^2 + 16 Lbar^2)), p_k log T_k / (mu T_k) }.
///
/// Throws NonPositiveStepSize when the decay branch is not positive.
inline TheoremStep theorem_step_size_detail(double T_k, const TheoremConstants& c) {
  if (!(T_k >= 2.0)) throw InvalidArgument("theorem step size needs T_k >= 2");
  if (!(c.mu > 0.0) || c.zeta_sq < 0.0 || c.Lbar < 0.0)
    throw InvalidArgument("theorem step size needs mu > 0, zeta^2 >= 0, Lbar >= 0");
  TheoremStep out;
  out.constant_branch = 3.0 * c.mu / (16.0 * (c.zeta_sq + 16.0 * c.Lbar * c.Lbar));
  out.pk_defaulted = !c.has_pk_inputs();
  out.pk = out.pk_defaulted ? 1.0 : theorem_pk(T_k, c);
  out.decay_branch = out.pk * std::log(T_k) / (c.mu * T_k);
  if (!(out.decay_branch > 0.0))
    throw NonPositiveStepSize("decay branch p_k log T_k / (mu T_k) = " +
                              std::to_string(out.decay_branch) + " is not positive");
  out.eta = std::min(out.constant_branch, out.decay_branch);
  return out;
}

inline double theorem_step_size(int /*k*/, double T_k, const TheoremConstants& c) {
  return theorem_step_size_detail(T_k, c).eta;
}

struct ConstantStep {
  double eta = 0.1;
};
struct InverseTStep {
  double c = 1.0;
};
struct TheoremSchedule {
  TheoremConstants constants;
};

using StepSizePolicy = std::variant<ConstantStep, InverseTStep, TheoremSchedule>;

/// Rejects degenerate policies up front so solvers never see eta <= 0.
inline void validate_step_policy(const StepSizePolicy& policy) {
  if (const auto* c = std::get_if<ConstantStep>(&policy)) {
    if (!(c->eta > 0.0) || !std::isfinite(c->eta)) throw InvalidArgument("constant step size must be positive");
  } else if (const auto* inv = std::get_if<InverseTStep>(&policy)) {
    if (!(inv->c > 0.0) || !std::isfinite(inv->c)) throw InvalidArgument("inverse-t constant must be positive");
  } else {
    const auto& t = std::get<TheoremSchedule>(policy).constants;
    if (!(t.mu > 0.0) || t.zeta_sq < 0.0 || t.Lbar < 0.0)
      throw InvalidArgument("theorem schedule needs mu > 0, zeta^2 >= 0, Lbar >= 0");
  }
}

/// Per-step step size for a run of `horizon` steps. For the theorem schedule
/// the horizon plays the role of T_k; a non-positive decay branch falls back
/// to the constant branch and appends a note to `notes`.
inline std::function<double(std::size_t)> step_size_fn(const StepSizePolicy& policy, std::size_t horizon,
                                                       std::vector<std::string>* notes = nullptr) {
  validate_step_policy(policy);
  if (const auto* c = std::get_if<ConstantStep>(&policy)) {
    const double eta = c->eta;
    return [eta](std::size_t) { return eta; };
  }
  if (const auto* inv = std::get_if<InverseTStep>(&policy)) {
    const double c = inv->c;
    return [c](std::size_t t) { return c / static_cast<double>(t); };
  }
  const auto& constants = std::get<TheoremSchedule>(policy).constants;
  const double T = std::max<double>(2.0, static_cast<double>(horizon));
  double eta = 0.0;
  try {
    const TheoremStep step = theorem_step_size_detail(T, constants);
    eta = step.eta;
    if (step.pk_defaulted && notes) notes->push_back("p_k inputs missing: using p_k = 1");
  } catch (const NonPositiveStepSize& e) {
    eta = 3.0 * constants.mu / (16.0 * (constants.zeta_sq + 16.0 * constants.Lbar * constants.Lbar));
    if (notes) notes->push_back(std::string("falling back to constant branch: ") + e.what());
  }
  return [eta](std::size_t) { return eta; };
}

/// Epoch step size eta_k: Constant -> eta, InverseT -> c / T_k, Theorem -> eq. schedule.
inline double epoch_step_size(const StepSizePolicy& policy, std::size_t T_k,
                              std::vector<std::string>* notes = nullptr) {
  if (const auto* inv = std::get_if<InverseTStep>(&policy)) {
    validate_step_policy(policy);
    return inv->c / static_cast<double>(T_k);
  }
  return step_size_fn(policy, T_k, notes)(1);
}

// ---------------------------------------------------------------------------
// Epoch schedule
// ---------------------------------------------------------------------------

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline std::size_t floor_power_of_two(std::size_t n) {
  if (n == 0) return 0;
  std::size_t p = 1;
  while (p <= n / 2) p <<= 1;
  return p;
}

inline int log2_exact(std::size_t n) {
  int k = 0;
  while ((std::size_t{1} << k) < n) ++k;
  return k;
}

struct EpochRecord {
  int k = 0;
  std::size_t tau = 0;  // replay gap B / 2^k
  std::size_t T = 0;    // steps 2^k
  double eta = 0.0;
};

struct EpochSchedule {
  std::size_t buffer_size = 0;
  std::vector<EpochRecord> epochs;
  std::vector<std::string> notes;

  int num_epochs() const { return static_cast<int>(epochs.size()); }
};

/// tau_k = B / 2^k, T_k = 2^k for k = 1..K. B must be a power of two and
/// K <= log2 B.
inline EpochSchedule make_epoch_schedule(std::size_t buffer_size, int num_epochs,
                                         const StepSizePolicy& policy) {
  if (!is_power_of_two(buffer_size))
    throw InvalidSchedule("buffer size " + std::to_string(buffer_size) +
                          " is not a power of two; nearest lower: " +
                          std::to_string(floor_power_of_two(buffer_size)));
  const int max_epochs = log2_exact(buffer_size);
  if (num_epochs < 1 || num_epochs > max_epochs)
    throw InvalidSchedule("number of epochs must lie in [1, log2 B = " + std::to_string(max_epochs) + "]");
  validate_step_policy(policy);
  EpochSchedule schedule;
  schedule.buffer_size = buffer_size;
  for (int k = 1; k <= num_epochs; ++k) {
    EpochRecord r;
    r.k = k;
    r.T = std::size_t{1} << k;
    r.tau = buffer_size >> k;
    r.eta = epoch_step_size(policy, r.T, &schedule.notes);
    schedule.epochs.push_back(r);
  }
  return schedule;
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

struct TraceRecord {
  std::size_t samples_consumed = 0;  // steps taken so far in this run or epoch
  int epoch = 0;                     // 0 outside MER
  std::size_t step = 0;
  double error = std::numeric_limits<double>::quiet_NaN();
};

struct RunTrace {
  std::string algorithm;
  std::uint64_t seed = 0;
  std::string error_tag = "L2";
  int epoch = 0;
  std::vector<TraceRecord> records;
  std::vector<std::size_t> indices;  // buffer index used by each step
  std::vector<double> step_sizes;
  Vector final_iterate;
  std::optional<Vector> averaged_iterate;
  std::vector<std::string> notes;
  std::size_t contraction_checks = 0;
  std::size_t contraction_violations = 0;
  double max_displacement_ratio = 0.0;  // max ||x+ - x|| / (eta ||g||)

  /// The iterate the run reports: the average when averaging, else the last.
  const Vector& output() const { return averaged_iterate ? *averaged_iterate : final_iterate; }
};

enum class RecordKind { All, LogGrid, FinalOnly };

struct RecordPolicy {
  RecordKind kind = RecordKind::All;
  int points_per_decade = 20;

  static RecordPolicy all() { return {RecordKind::All, 0}; }
  static RecordPolicy log_grid(int per_decade = 20) { return {RecordKind::LogGrid, per_decade}; }
  static RecordPolicy final_only() { return {RecordKind::FinalOnly, 0}; }

  /// Steps in [1, T] that get a record.
  std::set<std::size_t> steps(std::size_t T) const {
    std::set<std::size_t> out;
    if (T == 0) return out;
    out.insert(T);
    if (kind == RecordKind::All) {
      for (std::size_t t = 1; t <= T; ++t) out.insert(t);
    } else if (kind == RecordKind::LogGrid) {
      const int per = std::max(1, points_per_decade);
      for (int i = 0;; ++i) {
        const auto t = static_cast<std::size_t>(std::llround(std::pow(10.0, static_cast<double>(i) / per)));
        if (t > T) break;
        out.insert(t);
      }
      // Powers of two line up with MER epoch ends.
      for (std::size_t t = 1; t <= T; t *= 2) out.insert(t);
    }
    return out;
  }
};

struct RunOptions {
  std::string algorithm = "sa";
  std::uint64_t seed = 0;
  bool averaging = false;
  std::function<double(const Vector&)> error;  // of the reported iterate; empty -> NaN
  std::string error_tag = "L2";
  RecordPolicy record = RecordPolicy::all();
  bool check_contraction = kCheckContractionByDefault;
  double contraction_tol = 1e-12;
};

namespace detail {

/// T steps of projected SA reading buffer positions gap, 2 gap, ..., T gap.
inline RunTrace run_gapped(const VIProblem& problem, ReplayBuffer& buffer, std::size_t gap,
                           std::size_t T, const std::function<double(std::size_t)>& eta_of,
                           const Vector& x_init, const RunOptions& opt, int epoch) {
  if (!problem.region.contains(x_init)) throw InvalidArgument("initial point lies outside the region");
  RunTrace trace;
  trace.algorithm = opt.algorithm;
  trace.seed = opt.seed;
  trace.error_tag = opt.error_tag;
  trace.epoch = epoch;
  trace.indices.reserve(T);
  trace.step_sizes.reserve(T);
  const std::set<std::size_t> record_at = opt.record.steps(T);

  Vector x = x_init;
  Vector avg = Vector::Zero(x.size());
  for (std::size_t t = 1; t <= T; ++t) {
    const std::size_t index = t * gap;
    const double eta = eta_of(t);
    if (!(eta > 0.0)) throw NonPositiveStepSize("step size must be positive at step " + std::to_string(t));
    const Sample xi = buffer.get(index);
    StepResult step = sa_step_full(problem, x, xi, eta);
    if (opt.check_contraction) {
      ++trace.contraction_checks;
      const double g_norm = step.operator_value.norm();
      const double disp = (step.next - x).norm();
      if (g_norm > 0.0) trace.max_displacement_ratio = std::max(trace.max_displacement_ratio, disp / (eta * g_norm));
      if (!step_displacement_check(step.next, x, step.operator_value, eta, opt.contraction_tol))
        ++trace.contraction_violations;
    }
    x = std::move(step.next);
    trace.indices.push_back(index);
    trace.step_sizes.push_back(eta);
    if (opt.averaging) avg += (x - avg) / static_cast<double>(t);
    if (record_at.count(t) != 0u) {
      TraceRecord r;
      r.samples_consumed = t;
      r.epoch = epoch;
      r.step = t;
      if (opt.error) r.error = opt.error(opt.averaging ? avg : x);
      trace.records.push_back(r);
    }
  }
  trace.final_iterate = x;
  if (opt.averaging) trace.averaged_iterate = T > 0 ? avg : x;
  return trace;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Skipped (CTD-style) SA: floor(B / tau_bar) steps on samples tau_bar, 2 tau_bar, ...
inline RunTrace run_skipped_sa(const VIProblem& problem, ReplayBuffer& buffer, std::size_t tau_bar,
                               const StepSizePolicy& policy, const Vector& x_init,
                               const RunOptions& opt = {}) {
  if (tau_bar < 1) throw InvalidSkip("skip parameter must be at least 1");
  const std::size_t T = buffer.size() / tau_bar;
  if (T < 1) throw InvalidSkip("skip " + std::to_string(tau_bar) + " exceeds buffer size " +
                               std::to_string(buffer.size()));
  std::vector<std::string> notes;
  const auto eta_of = step_size_fn(policy, T, &notes);
  RunTrace trace = detail::run_gapped(problem, buffer, tau_bar, T, eta_of, x_init, opt, 0);
  trace.notes = std::move(notes);
  return trace;
}

/// Serial SA (TD): every sample of the buffer in causal order.
inline RunTrace run_serial_sa(const VIProblem& problem, ReplayBuffer& buffer, const StepSizePolicy& policy,
                              const Vector& x_init, const RunOptions& opt = {}) {
  if (buffer.empty()) throw InvalidArgument("buffer is empty");
  return run_skipped_sa(problem, buffer, 1, policy, x_init, opt);
}

struct FixedPointInit {
  Vector x0;
};
struct UniformBallInit {
  Vector center;
  double radius = 0.0;
};
using ReinitPolicy = std::variant<FixedPointInit, UniformBallInit>;

/// Uniform draw from the ball: Gaussian direction, radius scaled by U^{1/n}.
inline Vector uniform_in_ball(const Vector& center, double radius, Rng& rng) {
  const auto n = center.size();
  Vector dir(n);
  for (Eigen::Index i = 0; i < n; ++i) dir(i) = rng.normal();
  const double norm = dir.norm();
  if (norm == 0.0 || radius == 0.0) return center;
  const double r = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(n));
  return center + dir * (r / norm);
}

inline Vector draw_initial_point(const ReinitPolicy& policy, Rng& rng) {
  if (const auto* fixed = std::get_if<FixedPointInit>(&policy)) return fixed->x0;
  const auto& ball = std::get<UniformBallInit>(policy);
  return uniform_in_ball(ball.center, ball.radius, rng);
}

/// Multiscale experience replay: epoch k restarts from the reinit policy and
/// takes T_k = 2^k steps on buffer positions t tau_k with step size eta_k.
/// In Dynamic mode positions refer to the current buffer state. Returns one
/// trace per epoch.
inline std::vector<RunTrace> run_mer(const VIProblem& problem, ReplayBuffer& buffer,
                                     const EpochSchedule& schedule, const ReinitPolicy& reinit, Rng& rng,
                                     const RunOptions& opt = {}) {
  if (schedule.epochs.empty()) throw InvalidSchedule("schedule has no epochs");
  if (!is_power_of_two(schedule.buffer_size)) throw InvalidSchedule("schedule buffer size is not a power of two");
  if (schedule.buffer_size > buffer.size())
    throw InvalidSchedule("schedule expects a buffer of " + std::to_string(schedule.buffer_size) +
                          " samples, buffer holds " + std::to_string(buffer.size()));
  std::vector<RunTrace> traces;
  traces.reserve(schedule.epochs.size());
  for (const EpochRecord& e : schedule.epochs) {
    if (e.tau * e.T != schedule.buffer_size || e.tau < 1)
      throw InvalidSchedule("epoch " + std::to_string(e.k) + " violates tau_k T_k = B");
    const Vector x1 = draw_initial_point(reinit, rng);
    const double eta = e.eta;
    RunTrace trace = detail::run_gapped(problem, buffer, e.tau, e.T, [eta](std::size_t) { return eta; }, x1,
                                        opt, e.k);
    if (e.k == 1) {
      trace.notes = schedule.notes;
      if (buffer.size() > schedule.buffer_size)
        trace.notes.push_back("buffer of " + std::to_string(buffer.size()) + " samples truncated to " +
                              std::to_string(schedule.buffer_size));
    }
    traces.push_back(std::move(trace));
  }
  return traces;
}

/// Replay gap used by serial skipped experience replay: max(1, round(beta tau_M)).
inline std::size_t sser_gap(double beta, double tau_M) {
  if (!(beta > 1.0)) throw InvalidArgument("beta must exceed 1");
  if (!(tau_M > 0.0)) throw InvalidArgument("tau_M must be positive");
  return static_cast<std::size_t>(std::max(1.0, std::round(beta * tau_M)));
}

inline RunTrace run_sser_with_gap(const VIProblem& problem, ReplayBuffer& buffer, std::size_t gap, double eta,
                                  const Vector& x_init, std::size_t T, const RunOptions& opt = {}) {
  if (!(eta > 0.0)) throw InvalidArgument("step size must be positive");
  if (gap < 1) throw InvalidArgument("gap must be at least 1");
  if (gap * T > buffer.size())
    throw InsufficientBuffer("gap " + std::to_string(gap) + " x " + std::to_string(T) + " steps exceeds buffer of " +
                             std::to_string(buffer.size()));
  return detail::run_gapped(problem, buffer, gap, T, [eta](std::size_t) { return eta; }, x_init, opt, 0);
}

/// T steps at replay gap round(beta tau_M), constant step size.
inline RunTrace run_sser(const VIProblem& problem, ReplayBuffer& buffer, double beta, double tau_M, double eta,
                         const Vector& x_init, std::size_t T, const RunOptions& opt = {}) {
  return run_sser_with_gap(problem, buffer, sser_gap(beta, tau_M), eta, x_init, T, opt);
}

/// T steps of SA on independent stationary samples.
inline RunTrace run_iid_sa(const VIProblem& problem, const std::vector<Sample>& iid_stream,
                           const StepSizePolicy& policy, const Vector& x_init, std::size_t T,
                           const RunOptions& opt = {}) {
  if (iid_stream.size() < T)
    throw InsufficientBuffer("i.i.d. stream holds " + std::to_string(iid_stream.size()) + " samples, need " +
                             std::to_string(T));
  ReplayBuffer view = ReplayBuffer::make_static(std::vector<Sample>(iid_stream.begin(), iid_stream.begin() + static_cast<std::ptrdiff_t>(T)));
  std::vector<std::string> notes;
  const auto eta_of = step_size_fn(policy, T, &notes);
  RunTrace trace = detail::run_gapped(problem, view, 1, T, eta_of, x_init, opt, 0);
  trace.notes = std::move(notes);
  return trace;
}

}  // namespace mer
