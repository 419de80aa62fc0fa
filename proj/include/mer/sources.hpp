#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <Eigen/Dense>

#include "mer/core.hpp"
#include "mer/errors.hpp"
#include "mer/rng.hpp"

namespace mer {

// ---------------------------------------------------------------------------
// Finite Markov chains
// ---------------------------------------------------------------------------

/// The sticky family: stay with probability (2m-1)/m, otherwise move to one
/// of the other |S|-1 states uniformly. Its stationary law is uniform and its
/// spectral gap is |S|(1-m)/((|S|-1)m).
struct StickyChainKernel {
  int num_states = 2;
  double stickiness = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (num_states < 2) throw InvalidKernel("sticky chain needs at least 2 states");
    if (!(stickiness >= 0.5 && stickiness < 1.0))
      throw InvalidKernel("stickiness m must lie in [1/2, 1), got " + std::to_string(stickiness));
    // Row sums in exact rational arithmetic: m is a dyadic rational.
    using boost::multiprecision::cpp_rational;
    const cpp_rational m = exact_rational(stickiness);
    const cpp_rational stay = (2 * m - 1) / m;
    const cpp_rational off = (1 - m) / ((num_states - 1) * m);
    if (stay + (num_states - 1) * off != 1) throw InvalidKernel("sticky kernel row does not sum to 1");
  }

  double stay_probability() const { return (2.0 * stickiness - 1.0) / stickiness; }
  double move_probability() const {
    return (1.0 - stickiness) / ((num_states - 1) * stickiness);
  }
  /// Second-largest eigenvalue of the kernel (all non-unit eigenvalues coincide).
  double second_eigenvalue() const { return stay_probability() - move_probability(); }
  double spectral_gap() const {
    return num_states * (1.0 - stickiness) / ((num_states - 1) * stickiness);
  }

  Matrix matrix() const {
    validate();
    Matrix P = Matrix::Constant(num_states, num_states, move_probability());
    P.diagonal().setConstant(stay_probability());
    return P;
  }

 private:
  static boost::multiprecision::cpp_rational exact_rational(double v) {
    using boost::multiprecision::cpp_int;
    using boost::multiprecision::cpp_rational;
    int exp = 0;
    const double mant = std::frexp(v, &exp);
    const auto scaled = static_cast<std::int64_t>(std::ldexp(mant, 53));
    const cpp_rational r{cpp_int(scaled)};
    const int shift = exp - 53;
    if (shift >= 0) return r * cpp_rational(cpp_int(1) << shift);
    return r / cpp_rational(cpp_int(1) << (-shift));
  }
};

struct StationaryInit {};
struct FixedState {
  int state = 0;
};
using ChainInit = std::variant<StationaryInit, FixedState>;

/// Throws InvalidKernel unless P is square, non-negative and row-stochastic.
inline void validate_row_stochastic(const Matrix& P, double tol = 1e-12) {
  if (P.rows() != P.cols() || P.rows() == 0) throw InvalidKernel("transition matrix must be square");
  if ((P.array() < 0.0).any()) throw InvalidKernel("transition matrix has negative entries");
  for (Eigen::Index s = 0; s < P.rows(); ++s)
    if (std::abs(P.row(s).sum() - 1.0) > tol)
      throw InvalidKernel("transition matrix row " + std::to_string(s) + " does not sum to 1");
}

/// Stateful simulator of a finite chain with an explicit kernel. Next states
/// are drawn by inverse CDF over the current row.
class FiniteChain {
 public:
  FiniteChain(Matrix P, Vector initial_law, std::uint64_t seed)
      : P_(std::move(P)), initial_law_(std::move(initial_law)), rng_(seed) {
    validate_row_stochastic(P_);
    cumulative_ = P_;
    for (Eigen::Index s = 0; s < P_.rows(); ++s)
      for (Eigen::Index j = 1; j < P_.cols(); ++j) cumulative_(s, j) += cumulative_(s, j - 1);
    state_ = draw_from(initial_law_);
  }

  FiniteChain(Matrix P, Vector initial_law, ChainInit init, std::uint64_t seed)
      : FiniteChain(std::move(P), std::move(initial_law), seed) {
    if (const auto* fixed = std::get_if<FixedState>(&init)) {
      if (fixed->state < 0 || fixed->state >= num_states())
        throw InvalidArgument("fixed initial state out of range");
      state_ = fixed->state;
    }
  }

  int num_states() const { return static_cast<int>(P_.rows()); }
  int state() const { return state_; }
  const Matrix& kernel() const { return P_; }
  const Vector& initial_law() const { return initial_law_; }

  /// Advances one step and returns the new state.
  int step() {
    const double u = rng_.uniform();
    const auto row = cumulative_.row(state_);
    int next = num_states() - 1;
    for (int j = 0; j < num_states(); ++j) {
      if (u < row(j)) {
        next = j;
        break;
      }
    }
    state_ = next;
    return state_;
  }

  /// One independent draw from `law`, using this chain's generator.
  int draw_from(const Vector& law) {
    const double u = rng_.uniform();
    double acc = 0.0;
    for (Eigen::Index j = 0; j < law.size(); ++j) {
      acc += law(j);
      if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(law.size() - 1);
  }

  /// One independent draw of the successor of `s`.
  int draw_successor(int s) {
    const double u = rng_.uniform();
    const auto row = cumulative_.row(s);
    for (int j = 0; j < num_states(); ++j)
      if (u < row(j)) return j;
    return num_states() - 1;
  }

 private:
  Matrix P_;
  Matrix cumulative_;
  Vector initial_law_;
  Rng rng_;
  int state_ = 0;
};

inline FiniteChain make_sticky_chain(const StickyChainKernel& kernel, ChainInit init = StationaryInit{}) {
  const Vector uniform = Vector::Constant(kernel.num_states, 1.0 / kernel.num_states);
  return FiniteChain(kernel.matrix(), uniform, init, kernel.rng_seed);
}

/// A trajectory of `length` states; the first state is the initial draw.
inline std::vector<int> sticky_chain_stream(const StickyChainKernel& kernel, std::size_t length,
                                            ChainInit init = StationaryInit{}) {
  if (length < 1) throw InvalidArgument("stream length must be at least 1");
  FiniteChain chain = make_sticky_chain(kernel, init);
  std::vector<int> out;
  out.reserve(length);
  out.push_back(chain.state());
  while (out.size() < length) out.push_back(chain.step());
  return out;
}

// ---------------------------------------------------------------------------
// Autoregressive covariates
// ---------------------------------------------------------------------------

struct ARProcessConfig {
  int dimension = 1;
  int num_large = 0;
  double large_eigenvalue = 0.995;
  double small_eig_std = 1e-2;
  double noise_variance = 1e-2;
  int burn_in = 10000;
  std::uint64_t rng_seed = 0;

  // Small eigenvalues are clamped into this open interval so that A stays
  // stable whatever the Gaussian tail produces.
  static constexpr double kSmallEigenClamp = 0.9;

  void validate() const {
    if (dimension < 1) throw InvalidArgument("AR dimension must be positive");
    if (num_large < 0 || num_large > dimension)
      throw InvalidArgument("num_large must lie in [0, dimension]");
    if (!(std::abs(large_eigenvalue) < 1.0)) throw InvalidArgument("large eigenvalue must be in (-1, 1)");
    if (!(small_eig_std >= 0.0)) throw InvalidArgument("small_eig_std must be non-negative");
    if (!(noise_variance >= 0.0)) throw InvalidArgument("noise_variance must be non-negative");
    if (burn_in < 0) throw InvalidArgument("burn_in must be non-negative");
  }
};

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of R's diagonal folded into Q.
inline Matrix random_orthogonal(int n, Rng& rng) {
  Matrix G(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) G(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(G);
  Matrix Q = qr.householderQ();
  const Matrix R = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (R(j, j) < 0.0) Q.col(j) *= -1.0;
  return Q;
}

/// Eigenvalues of the AR transition matrix: num_large copies of the large
/// eigenvalue followed by clamped Gaussian draws.
inline Vector ar_eigenvalues(const ARProcessConfig& config, Rng& rng) {
  Vector eig(config.dimension);
  for (int i = 0; i < config.dimension; ++i) {
    if (i < config.num_large) {
      eig(i) = config.large_eigenvalue;
    } else {
      const double draw = config.small_eig_std * rng.normal();
      eig(i) = std::clamp(draw, -ARProcessConfig::kSmallEigenClamp, ARProcessConfig::kSmallEigenClamp);
    }
  }
  return eig;
}

/// A = Q E Q^T with Q Haar-orthogonal; symmetrized to remove rounding skew.
inline Matrix build_ar_matrix(const ARProcessConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.rng_seed, "ar-matrix"));
  const Vector eig = ar_eigenvalues(config, rng);
  const Matrix Q = random_orthogonal(config.dimension, rng);
  Matrix A = Q * eig.asDiagonal() * Q.transpose();
  return 0.5 * (A + A.transpose());
}

/// a_{t+1} = A a_t + eps_t started at zero and advanced through the burn-in.
class ARProcess {
 public:
  explicit ARProcess(const ARProcessConfig& config)
      : ARProcess(config, build_ar_matrix(config)) {}

  ARProcess(const ARProcessConfig& config, Matrix A)
      : config_(config),
        A_(std::move(A)),
        noise_std_(std::sqrt(config.noise_variance)),
        rng_(derive_seed(config.rng_seed, "ar-noise")),
        state_(Vector::Zero(config.dimension)) {
    config_.validate();
    if (A_.rows() != config.dimension || A_.cols() != config.dimension)
      throw InvalidArgument("AR matrix dimension mismatch");
    for (int i = 0; i < config_.burn_in; ++i) advance();
  }

  const Matrix& matrix() const { return A_; }
  const ARProcessConfig& config() const { return config_; }
  const Vector& current() const { return state_; }

  /// Advances one step and returns the new covariate.
  const Vector& next() {
    advance();
    return state_;
  }

  /// Restarts from zero with a fresh burn-in, keeping A and the generator.
  const Vector& restart() {
    state_.setZero();
    for (int i = 0; i < config_.burn_in; ++i) advance();
    return state_;
  }

  Rng& rng() { return rng_; }

 private:
  void advance() {
    Vector noise(config_.dimension);
    for (int i = 0; i < config_.dimension; ++i) noise(i) = noise_std_ * rng_.normal();
    state_ = A_ * state_ + noise;
  }

  ARProcessConfig config_;
  Matrix A_;
  double noise_std_;
  Rng rng_;
  Vector state_;
};

/// Covariates emitted after the burn-in; the first element is the state
/// reached at the end of the burn-in.
inline std::vector<Vector> ar_stream(const ARProcessConfig& config, std::size_t length) {
  if (length < 1) throw InvalidArgument("stream length must be at least 1");
  ARProcess process(config);
  std::vector<Vector> out;
  out.reserve(length);
  out.push_back(process.current());
  while (out.size() < length) out.push_back(process.next());
  return out;
}

// ---------------------------------------------------------------------------
// Sample sources
// ---------------------------------------------------------------------------

/// Type-erased stream of samples with an optional exact stationary sampler.
/// Instances are single-owner and stateful.
struct SampleSource {
  std::string name;
  std::function<Sample()> next;
  std::function<Sample()> draw_stationary;  // empty if no stationary sampler exists

  bool has_stationary_sampler() const { return static_cast<bool>(draw_stationary); }
};

/// Chain states as RawState samples, each paired with an optional embedding.
inline SampleSource chain_state_source(std::shared_ptr<FiniteChain> chain,
                                       std::vector<Vector> embedding = {},
                                       std::uint64_t stationary_seed = 0,
                                       std::optional<Vector> stationary_law = std::nullopt) {
  auto make = [embedding](int s) {
    RawState r{s, Vector()};
    if (!embedding.empty()) r.value = embedding.at(static_cast<std::size_t>(s));
    return Sample{r};
  };
  SampleSource src;
  src.name = "finite-chain";
  // The first call yields the initial state, later calls advance.
  auto started = std::make_shared<bool>(false);
  src.next = [chain, make, started]() {
    if (!*started) {
      *started = true;
      return make(chain->state());
    }
    return make(chain->step());
  };
  if (stationary_law) {
    auto sampler = std::make_shared<FiniteChain>(chain->kernel(), *stationary_law, stationary_seed);
    const Vector law = *stationary_law;
    src.draw_stationary = [sampler, make, law]() { return make(sampler->draw_from(law)); };
  }
  return src;
}

/// `length` mutually independent stationary draws.
inline std::vector<Sample> iid_stationary_stream(SampleSource& source, std::size_t length) {
  if (!source.has_stationary_sampler())
    throw NoStationarySampler("source '" + source.name + "' has no stationary sampler");
  std::vector<Sample> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) out.push_back(source.draw_stationary());
  return out;
}

// ---------------------------------------------------------------------------
// Replay buffer
// ---------------------------------------------------------------------------

enum class BufferMode { Static, Dynamic };

inline const char* to_string(BufferMode m) { return m == BufferMode::Static ? "static" : "dynamic"; }

/// Length-B store of samples addressed with 1-based indices.
///
/// Static: reads leave the buffer unchanged. Dynamic: each read removes the
/// sample and appends one fresh draw from the attached source, so the length
/// never changes.
class ReplayBuffer {
 public:
  ReplayBuffer() = default;

  static ReplayBuffer make_static(std::vector<Sample> samples) {
    ReplayBuffer b;
    b.samples_ = std::move(samples);
    b.mode_ = BufferMode::Static;
    return b;
  }

  static ReplayBuffer make_dynamic(std::vector<Sample> samples, SampleSource source) {
    if (!source.next) throw InvalidArgument("dynamic buffer needs a sample source");
    ReplayBuffer b;
    b.samples_ = std::move(samples);
    b.mode_ = BufferMode::Dynamic;
    b.source_ = std::make_shared<SampleSource>(std::move(source));
    return b;
  }

  /// Fills a buffer with the first `size` samples of `source`.
  static ReplayBuffer fill(SampleSource source, std::size_t size, BufferMode mode) {
    std::vector<Sample> samples;
    samples.reserve(size);
    for (std::size_t i = 0; i < size; ++i) samples.push_back(source.next());
    if (mode == BufferMode::Static) return make_static(std::move(samples));
    return make_dynamic(std::move(samples), std::move(source));
  }

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  BufferMode mode() const { return mode_; }
  std::size_t fresh_samples_drawn() const { return fresh_drawn_; }

  /// Read-only view at a 1-based index; never consumes.
  const Sample& peek(std::size_t index) const {
    check_index(index);
    return samples_[index - 1];
  }

  /// Reads the sample at a 1-based index, consuming it in Dynamic mode.
  Sample get(std::size_t index) {
    check_index(index);
    if (mode_ == BufferMode::Static) return samples_[index - 1];
    Sample out = std::move(samples_[index - 1]);
    samples_.erase(samples_.begin() + static_cast<std::ptrdiff_t>(index - 1));
    if (!source_ || !source_->next) throw BufferExhausted("dynamic buffer source is dry");
    samples_.push_back(source_->next());
    ++fresh_drawn_;
    return out;
  }

  const std::vector<Sample>& samples() const { return samples_; }

  /// Copy that shares no mutable state with this buffer's contents. The
  /// source of a dynamic buffer is shared.
  ReplayBuffer clone() const { return *this; }

 private:
  void check_index(std::size_t index) const {
    if (index < 1 || index > samples_.size())
      throw IndexOutOfRange("buffer index " + std::to_string(index) + " outside [1, " +
                            std::to_string(samples_.size()) + "]");
  }

  std::vector<Sample> samples_;
  BufferMode mode_ = BufferMode::Static;
  std::shared_ptr<SampleSource> source_;
  std::size_t fresh_drawn_ = 0;
};

// ---------------------------------------------------------------------------
// Buffer snapshots
// ---------------------------------------------------------------------------
//
// Text snapshot, one sample per line, comma separated, 17 significant digits:
//
//   # mer-buffer v1 payload=<glm|td|raw> dim=<n> size=<B>
//   glm: a_1,...,a_n,y
//   td:  state,next_state,reward,phi_s_1..phi_s_n,phi_next_1..phi_next_n
//   raw: index,value_1,...,value_n        (n may be 0)

inline void save_buffer_snapshot(std::ostream& os, const std::vector<Sample>& samples) {
  if (samples.empty()) throw InvalidArgument("cannot snapshot an empty buffer");
  const Sample& first = samples.front();
  Eigen::Index dim = 0;
  if (const auto* g = std::get_if<GLMPair>(&first)) dim = g->a.size();
  if (const auto* t = std::get_if<TDTransition>(&first)) dim = t->phi_s.size();
  if (const auto* r = std::get_if<RawState>(&first)) dim = r->value.size();
  os << "# mer-buffer v1 payload=" << payload_name(first) << " dim=" << dim
     << " size=" << samples.size() << '\n';
  os << std::setprecision(17);
  auto put = [&os](const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) os << ',' << v(i);
  };
  for (const Sample& s : samples) {
    if (s.index() != first.index()) throw InvalidArgument("buffer payload is not homogeneous");
    if (const auto* g = std::get_if<GLMPair>(&s)) {
      for (Eigen::Index i = 0; i < g->a.size(); ++i) os << (i ? "," : "") << g->a(i);
      os << ',' << g->y;
    } else if (const auto* t = std::get_if<TDTransition>(&s)) {
      os << t->state << ',' << t->next_state << ',' << t->reward;
      put(t->phi_s);
      put(t->phi_next);
    } else {
      const auto& r = std::get<RawState>(s);
      os << r.index;
      put(r.value);
    }
    os << '\n';
  }
}

inline std::vector<Sample> load_buffer_snapshot(std::istream& is) {
  std::string header;
  if (!std::getline(is, header) || header.rfind("# mer-buffer v1", 0) != 0)
    throw InvalidArgument("not a mer-buffer v1 snapshot");
  std::string payload;
  long dim = -1;
  std::istringstream hs(header.substr(15));
  std::string tok;
  while (hs >> tok) {
    if (tok.rfind("payload=", 0) == 0) payload = tok.substr(8);
    if (tok.rfind("dim=", 0) == 0) dim = std::stol(tok.substr(4));
  }
  if (dim < 0 || (payload != "glm" && payload != "td" && payload != "raw"))
    throw InvalidArgument("malformed snapshot header");
  std::vector<Sample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(std::stod(cell));
    auto vec = [&f](std::size_t offset, long n) {
      Vector v(n);
      for (long i = 0; i < n; ++i) v(i) = f.at(offset + static_cast<std::size_t>(i));
      return v;
    };
    const auto n = static_cast<std::size_t>(dim);
    if (payload == "glm") {
      if (f.size() != n + 1) throw InvalidArgument("snapshot row has wrong width");
      out.emplace_back(GLMPair{vec(0, dim), f[n]});
    } else if (payload == "td") {
      if (f.size() != 3 + 2 * n) throw InvalidArgument("snapshot row has wrong width");
      out.emplace_back(TDTransition{vec(3, dim), vec(3 + n, dim), f[2], static_cast<int>(f[0]),
                                    static_cast<int>(f[1])});
    } else {
      if (f.size() != 1 + n) throw InvalidArgument("snapshot row has wrong width");
      out.emplace_back(RawState{static_cast<int>(f[0]), vec(1, dim)});
    }
  }
  return out;
}

}  // namespace mer
