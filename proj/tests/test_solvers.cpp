#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "mer/problems.hpp"
#include "mer/solvers.hpp"

namespace {

using mer::Matrix;
using mer::Sample;
using mer::Vector;

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

mer::VIProblem synthetic(double noise, Matrix A = Matrix::Identity(2, 2), Vector x_star = Vector::Zero(2)) {
  mer::SyntheticLinearSpec spec;
  spec.A_op = std::move(A);
  spec.x_star = std::move(x_star);
  spec.noise_std = noise;
  return mer::synthetic_linear_problem(spec);
}

mer::ReplayBuffer noise_buffer(int dim, std::size_t size, std::uint64_t seed,
                               mer::BufferMode mode = mer::BufferMode::Static) {
  return mer::ReplayBuffer::fill(mer::gaussian_noise_source(dim, seed), size, mode);
}

mer::RunOptions error_options(const Vector& x_star) {
  mer::RunOptions opt;
  opt.error = [x_star](const Vector& x) { return (x - x_star).norm(); };
  opt.check_contraction = true;
  return opt;
}

// Bitwise comparison of everything a trace reports.
void expect_same_trace(const mer::RunTrace& a, const mer::RunTrace& b, std::size_t steps) {
  ASSERT_GE(a.indices.size(), steps);
  ASSERT_GE(b.indices.size(), steps);
  for (std::size_t i = 0; i < steps; ++i) EXPECT_EQ(a.step_sizes[i], b.step_sizes[i]);
  std::size_t matched = 0;
  for (const auto& ra : a.records) {
    if (ra.step > steps) break;
    for (const auto& rb : b.records)
      if (rb.step == ra.step) {
        EXPECT_EQ(ra.error, rb.error) << "step " << ra.step;
        ++matched;
      }
  }
  EXPECT_GT(matched, 0u);
}

}  // namespace

TEST(Schedule, EightSampleBufferByHand) {
  const auto s = mer::make_epoch_schedule(8, 3, mer::ConstantStep{0.1});
  ASSERT_EQ(s.num_epochs(), 3);
  EXPECT_EQ(s.epochs[0].tau, 4u);
  EXPECT_EQ(s.epochs[0].T, 2u);
  EXPECT_EQ(s.epochs[1].tau, 2u);
  EXPECT_EQ(s.epochs[2].tau, 1u);
  EXPECT_EQ(s.epochs[2].T, 8u);
  for (const auto& e : s.epochs) EXPECT_EQ(e.tau * e.T, 8u);
}

TEST(Schedule, MerIndexSetsByHand) {
  const auto p = synthetic(0.0);
  auto buf = noise_buffer(2, 8, 1);
  mer::Rng rng(0);
  const auto traces = mer::run_mer(p, buf, mer::make_epoch_schedule(8, 3, mer::ConstantStep{0.1}),
                                   mer::FixedPointInit{vec({1, 1})}, rng);
  EXPECT_EQ(traces[0].indices, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(traces[1].indices, (std::vector<std::size_t>{2, 4, 6, 8}));
  EXPECT_EQ(traces[2].indices, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8}));
}

TEST(Schedule, RejectsBadBuffersAndEpochCounts) {
  try {
    mer::make_epoch_schedule(1000, 3, mer::ConstantStep{0.1});
    FAIL() << "expected InvalidSchedule";
  } catch (const mer::InvalidSchedule& e) {
    EXPECT_NE(std::string(e.what()).find("nearest lower: 512"), std::string::npos);
  }
  EXPECT_THROW(mer::make_epoch_schedule(8, 4, mer::ConstantStep{0.1}), mer::InvalidSchedule);
  EXPECT_THROW(mer::make_epoch_schedule(8, 0, mer::ConstantStep{0.1}), mer::InvalidSchedule);
  EXPECT_THROW(mer::make_epoch_schedule(8, 2, mer::ConstantStep{0.0}), mer::InvalidArgument);
}

TEST(Schedule, PowerOfTwoHelpers) {
  EXPECT_TRUE(mer::is_power_of_two(1));
  EXPECT_TRUE(mer::is_power_of_two(16384));
  EXPECT_FALSE(mer::is_power_of_two(0));
  EXPECT_FALSE(mer::is_power_of_two(1000));
  EXPECT_EQ(mer::floor_power_of_two(1000), 512u);
  EXPECT_EQ(mer::floor_power_of_two(1024), 1024u);
  EXPECT_EQ(mer::log2_exact(4096), 12);
}

TEST(Serial, ZeroNoiseFollowsTheClosedForm) {
  const Vector x_star = vec({1, -2});
  const auto p = synthetic(0.0, Matrix::Identity(2, 2), x_star);
  auto buf = noise_buffer(2, 50, 3);
  const Vector x1 = vec({4, 2});
  const auto t = mer::run_serial_sa(p, buf, mer::ConstantStep{0.1}, x1, error_options(x_star));
  ASSERT_EQ(t.records.size(), 50u);
  for (const auto& r : t.records)
    EXPECT_NEAR(r.error, std::pow(0.9, static_cast<double>(r.step)) * (x1 - x_star).norm(), 1e-13);
  EXPECT_EQ(t.contraction_violations, 0u);
}

TEST(Serial, SingleSampleBufferTakesOneStep) {
  const auto p = synthetic(1.0);
  auto buf = noise_buffer(2, 1, 3);
  const auto t = mer::run_serial_sa(p, buf, mer::ConstantStep{0.1}, vec({1, 1}));
  EXPECT_EQ(t.indices.size(), 1u);
}

TEST(Skipped, StepCountsAndIndices) {
  const auto p = synthetic(1.0);
  auto small = noise_buffer(2, 10, 1);
  const auto t = mer::run_skipped_sa(p, small, 3, mer::ConstantStep{0.1}, vec({1, 1}));
  EXPECT_EQ(t.indices, (std::vector<std::size_t>{3, 6, 9}));
  auto big = noise_buffer(2, 150000, 1);
  EXPECT_EQ(mer::run_skipped_sa(p, big, 5, mer::ConstantStep{0.01}, vec({1, 1})).indices.size(), 30000u);
  EXPECT_THROW(mer::run_skipped_sa(p, small, 0, mer::ConstantStep{0.1}, vec({1, 1})), mer::InvalidSkip);
  EXPECT_THROW(mer::run_skipped_sa(p, small, 11, mer::ConstantStep{0.1}, vec({1, 1})), mer::InvalidSkip);
}

TEST(Equivalence, UnitSkipIsSerial) {
  const auto p = synthetic(0.7, vec({1, 3}).asDiagonal());
  auto b1 = noise_buffer(2, 256, 9), b2 = noise_buffer(2, 256, 9);
  const auto opt = error_options(Vector::Zero(2));
  const auto a = mer::run_serial_sa(p, b1, mer::ConstantStep{0.05}, vec({2, 2}), opt);
  const auto b = mer::run_skipped_sa(p, b2, 1, mer::ConstantStep{0.05}, vec({2, 2}), opt);
  EXPECT_EQ(a.final_iterate, b.final_iterate);
  expect_same_trace(a, b, 256);
}

TEST(Equivalence, FinalMerEpochIsSerial) {
  const auto p = synthetic(0.7, vec({1, 3}).asDiagonal());
  auto b1 = noise_buffer(2, 256, 9), b2 = noise_buffer(2, 256, 9);
  const auto opt = error_options(Vector::Zero(2));
  mer::Rng rng(1);
  const auto mer_traces = mer::run_mer(p, b1, mer::make_epoch_schedule(256, 8, mer::ConstantStep{0.05}),
                                       mer::FixedPointInit{vec({2, 2})}, rng, opt);
  const auto serial = mer::run_serial_sa(p, b2, mer::ConstantStep{0.05}, vec({2, 2}), opt);
  EXPECT_EQ(mer_traces.back().final_iterate, serial.final_iterate);
  expect_same_trace(mer_traces.back(), serial, 256);
}

TEST(Equivalence, MerEpochIsSkippedPrefix) {
  const auto p = synthetic(0.7, vec({1, 3}).asDiagonal());
  auto b1 = noise_buffer(2, 64, 4), b2 = noise_buffer(2, 64, 4);
  const auto opt = error_options(Vector::Zero(2));
  mer::Rng rng(1);
  const auto traces = mer::run_mer(p, b1, mer::make_epoch_schedule(64, 6, mer::ConstantStep{0.05}),
                                   mer::FixedPointInit{vec({2, 2})}, rng, opt);
  // Epoch 4 has tau = 4 and T = 16.
  const auto& epoch = traces[3];
  ASSERT_EQ(epoch.indices.size(), 16u);
  const auto skipped = mer::run_skipped_sa(p, b2, 4, mer::ConstantStep{0.05}, vec({2, 2}), opt);
  expect_same_trace(epoch, skipped, 16);
}

TEST(Mer, StaticModeAccounting) {
  const auto p = synthetic(1.0);
  auto buf = noise_buffer(2, 128, 2);
  mer::Rng rng(0);
  const auto traces = mer::run_mer(p, buf, mer::make_epoch_schedule(128, 7, mer::ConstantStep{0.05}),
                                   mer::FixedPointInit{vec({1, 1})}, rng);
  std::size_t total = 0;
  for (const auto& t : traces) total += t.indices.size();
  EXPECT_EQ(total, (std::size_t{1} << 8) - 2);
}

TEST(Mer, DynamicModeConsumesAndRefills) {
  const auto p = synthetic(1.0);
  auto buf = noise_buffer(2, 16, 2, mer::BufferMode::Dynamic);
  mer::Rng rng(0);
  const auto traces = mer::run_mer(p, buf, mer::make_epoch_schedule(16, 3, mer::ConstantStep{0.05}),
                                   mer::FixedPointInit{vec({1, 1})}, rng);
  EXPECT_EQ(buf.size(), 16u);
  EXPECT_EQ(buf.fresh_samples_drawn(), 2u + 4u + 8u);
}

TEST(Mer, BallReinitialisationStaysInTheBall) {
  const auto p = synthetic(1.0);
  auto buf = noise_buffer(2, 64, 2);
  mer::Rng rng(5);
  mer::RunOptions opt;
  const auto traces = mer::run_mer(p, buf, mer::make_epoch_schedule(64, 6, mer::ConstantStep{1e-9}),
                                   mer::UniformBallInit{vec({1, 1}), 0.5}, rng, opt);
  for (const auto& t : traces) EXPECT_LE((t.final_iterate - vec({1, 1})).norm(), 0.5 + 1e-6);
  EXPECT_NE(traces[0].final_iterate, traces[1].final_iterate);
}

TEST(Mer, RejectsMismatchedBuffers) {
  const auto p = synthetic(1.0);
  auto buf = noise_buffer(2, 8, 2);
  mer::Rng rng(5);
  EXPECT_THROW(mer::run_mer(p, buf, mer::make_epoch_schedule(16, 2, mer::ConstantStep{0.1}),
                            mer::FixedPointInit{vec({1, 1})}, rng),
               mer::InvalidSchedule);
}

TEST(Mer, DrySourceInDynamicMode) {
  const auto p = synthetic(1.0);
  auto remaining = std::make_shared<int>(3);
  mer::SampleSource src;
  src.name = "short";
  src.next = [remaining]() -> Sample {
    if ((*remaining)-- <= 0) throw mer::BufferExhausted("source is dry");
    return Sample{mer::RawState{-1, Vector::Zero(2)}};
  };
  std::vector<Sample> init(8, Sample{mer::RawState{-1, Vector::Zero(2)}});
  auto buf = mer::ReplayBuffer::make_dynamic(init, src);
  mer::Rng rng(0);
  EXPECT_THROW(mer::run_mer(p, buf, mer::make_epoch_schedule(8, 3, mer::ConstantStep{0.1}),
                            mer::FixedPointInit{vec({1, 1})}, rng),
               mer::BufferExhausted);
}

TEST(Sser, UnitGapIsSerialPrefix) {
  const auto p = synthetic(0.5);
  auto b1 = noise_buffer(2, 100, 6), b2 = noise_buffer(2, 100, 6);
  const auto opt = error_options(Vector::Zero(2));
  const auto a = mer::run_sser_with_gap(p, b1, 1, 0.1, vec({1, 1}), 40, opt);
  const auto b = mer::run_serial_sa(p, b2, mer::ConstantStep{0.1}, vec({1, 1}), opt);
  expect_same_trace(a, b, 40);
}

TEST(Sser, GapAndBufferChecks) {
  const auto p = synthetic(0.5);
  auto buf = noise_buffer(2, 100, 6);
  const auto t = mer::run_sser_with_gap(p, buf, 10, 0.1, vec({1, 1}), 10);
  EXPECT_EQ(t.indices, (std::vector<std::size_t>{10, 20, 30, 40, 50, 60, 70, 80, 90, 100}));
  EXPECT_THROW(mer::run_sser_with_gap(p, buf, 10, 0.1, vec({1, 1}), 11), mer::InsufficientBuffer);
  EXPECT_EQ(mer::sser_gap(1.5 * std::log(512.0), 2.0), static_cast<std::size_t>(std::round(3.0 * std::log(512.0))));
  EXPECT_THROW(mer::sser_gap(1.0, 2.0), mer::InvalidArgument);
}

TEST(Iid, ZeroNoiseMatchesSerialOnAnyStream) {
  const auto p = synthetic(0.0);
  auto src = mer::gaussian_noise_source(2, 1);
  const auto stream = mer::iid_stationary_stream(src, 30);
  auto buf = noise_buffer(2, 30, 77);
  const auto opt = error_options(Vector::Zero(2));
  const auto a = mer::run_iid_sa(p, stream, mer::ConstantStep{0.2}, vec({1, 1}), 30, opt);
  const auto b = mer::run_serial_sa(p, buf, mer::ConstantStep{0.2}, vec({1, 1}), opt);
  EXPECT_EQ(a.final_iterate, b.final_iterate);
}

TEST(Iid, SameSeedSameTrace) {
  const auto p = synthetic(1.0);
  auto run = [&] {
    auto src = mer::gaussian_noise_source(2, 99);
    const auto stream = mer::iid_stationary_stream(src, 200);
    return mer::run_iid_sa(p, stream, mer::InverseTStep{1.0}, vec({1, 1}), 200, error_options(Vector::Zero(2)));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.final_iterate, b.final_iterate);
  expect_same_trace(a, b, 200);
}

TEST(Iid, ShortStreamIsRejected) {
  const auto p = synthetic(1.0);
  auto src = mer::gaussian_noise_source(2, 1);
  const auto stream = mer::iid_stationary_stream(src, 5);
  EXPECT_THROW(mer::run_iid_sa(p, stream, mer::ConstantStep{0.1}, vec({1, 1}), 6), mer::InsufficientBuffer);
}

TEST(Averaging, RunningMeanOfIterates) {
  const auto p = synthetic(0.0);
  auto buf = noise_buffer(2, 3, 1);
  mer::RunOptions opt;
  opt.averaging = true;
  const Vector x1 = vec({1, 0});
  const auto t = mer::run_serial_sa(p, buf, mer::ConstantStep{0.5}, x1, opt);
  // Iterates 0.5, 0.25, 0.125 in the first coordinate.
  EXPECT_NEAR((*t.averaged_iterate)(0), (0.5 + 0.25 + 0.125) / 3.0, 1e-15);
  EXPECT_EQ(&t.output(), &*t.averaged_iterate);
}

TEST(StepSize, ConstantBranchSelected) {
  mer::TheoremConstants c;
  c.mu = 1.0;
  c.zeta_sq = 0.0;
  c.Lbar = 1.0;
  const auto s = mer::theorem_step_size_detail(4.0, c);
  EXPECT_DOUBLE_EQ(s.constant_branch, 3.0 / 256.0);
  EXPECT_DOUBLE_EQ(s.eta, 3.0 / 256.0);
  EXPECT_TRUE(s.pk_defaulted);
}

TEST(StepSize, HandComputedPk) {
  // Independent evaluation of p_k and the decay branch.
  mer::TheoremConstants c;
  c.mu = 0.5;
  c.zeta_sq = 2.0;
  c.Lbar = 0.1;
  c.M = 6.0;
  c.D = 3.0;
  c.sigma_sq = 0.2;
  c.F_star_norm = 0.0;
  const double T = 1024.0;
  const double ratio = (0.25 * 6.0 * 9.0) / (3.0 * 1.2);
  const double pk = 1.0 + std::log(ratio) / std::log(T);
  const double decay = pk * std::log(T) / (0.5 * T);
  const double constant = 1.5 / (16.0 * (2.0 + 16.0 * 0.01));
  const auto s = mer::theorem_step_size_detail(T, c);
  EXPECT_NEAR(s.pk, pk, 1e-12);
  EXPECT_NEAR(s.decay_branch, decay, 1e-12);
  EXPECT_NEAR(s.eta, std::min(decay, constant), 1e-12);
}

TEST(StepSize, NonPositiveDecayBranchFallsBack) {
  mer::TheoremConstants c;
  c.mu = 1.0;
  c.zeta_sq = 0.0;
  c.Lbar = 1.0;
  c.M = 1e-12;
  c.D = 0.0;
  c.sigma_sq = 1.0;
  c.F_star_norm = 1.0;
  EXPECT_THROW(mer::theorem_step_size_detail(4.0, c), mer::NonPositiveStepSize);
  std::vector<std::string> notes;
  const auto eta = mer::step_size_fn(mer::TheoremSchedule{c}, 4, &notes)(1);
  EXPECT_DOUBLE_EQ(eta, 3.0 / 256.0);
  ASSERT_EQ(notes.size(), 1u);
}

TEST(StepSize, ScheduleIsMonotoneOnceDecayIsActive) {
  mer::TheoremConstants c;
  c.mu = 1.0;
  c.zeta_sq = 0.0;
  c.Lbar = 0.01;
  const auto s = mer::make_epoch_schedule(1 << 14, 14, mer::TheoremSchedule{c});
  for (std::size_t k = 2; k < s.epochs.size(); ++k) EXPECT_LE(s.epochs[k].eta, s.epochs[k - 1].eta);
}

TEST(StepSize, RejectsDegeneratePolicies) {
  EXPECT_THROW(mer::validate_step_policy(mer::ConstantStep{-1.0}), mer::InvalidArgument);
  EXPECT_THROW(mer::validate_step_policy(mer::InverseTStep{0.0}), mer::InvalidArgument);
  EXPECT_THROW(mer::theorem_step_size_detail(1.0, mer::TheoremConstants{1.0, 0.0, 1.0, {}, {}, {}, {}}),
               mer::InvalidArgument);
}

TEST(MixingTime, ByHand) {
  // 18 C / mu = e and rho = 1/e give tau_M = 1.
  EXPECT_NEAR(mer::effective_mixing_time(0.0, std::exp(1.0) / 18.0, 1.0, std::exp(-1.0)), 1.0, 1e-14);
  EXPECT_NEAR(mer::effective_mixing_time(0.0, 1.0, 1.0, 0.5), std::log(18.0) / std::log(2.0), 1e-14);
  EXPECT_LT(mer::effective_mixing_time(0.0, 1.0, 1.0, 1e-300), 0.01);
  EXPECT_NEAR(mer::mixing_ratio(8.0, 2.0), 4.0, 0.0);
  EXPECT_THROW(mer::effective_mixing_time(0.0, 1.0, 1.0, 1.0), mer::InvalidArgument);
}

TEST(Contraction, EverySolverRespectsTheDisplacementBound) {
  mer::SyntheticLinearSpec spec;
  spec.A_op = vec({0.5, 2.0, 1.0}).asDiagonal();
  spec.x_star = vec({0.2, -0.1, 0.3});
  spec.noise_std = 1.0;
  spec.region = mer::FeasibleRegion::ball(Vector::Zero(3), 1.0);
  const auto p = mer::synthetic_linear_problem(spec);
  auto opt = error_options(spec.x_star);
  std::size_t checks = 0, violations = 0;
  auto tally = [&](const mer::RunTrace& t) {
    checks += t.contraction_checks;
    violations += t.contraction_violations;
  };
  auto buf = noise_buffer(3, 1024, 8);
  tally(mer::run_serial_sa(p, buf, mer::ConstantStep{0.3}, Vector::Zero(3), opt));
  tally(mer::run_skipped_sa(p, buf, 3, mer::ConstantStep{0.3}, Vector::Zero(3), opt));
  mer::Rng rng(2);
  for (const auto& t : mer::run_mer(p, buf, mer::make_epoch_schedule(1024, 10, mer::ConstantStep{0.3}),
                                    mer::UniformBallInit{Vector::Zero(3), 1.0}, rng, opt))
    tally(t);
  tally(mer::run_sser_with_gap(p, buf, 4, 0.3, Vector::Zero(3), 256, opt));
  auto src = mer::gaussian_noise_source(3, 5);
  tally(mer::run_iid_sa(p, mer::iid_stationary_stream(src, 1024), mer::InverseTStep{1.0}, Vector::Zero(3), 1024, opt));
  EXPECT_GT(checks, 4000u);
  EXPECT_EQ(violations, 0u);
}

TEST(RecordPolicy, LogGridContainsPowersOfTwoAndTheEnd) {
  const auto steps = mer::RecordPolicy::log_grid(5).steps(1000);
  EXPECT_TRUE(steps.count(1000));
  for (std::size_t t = 1; t <= 512; t *= 2) EXPECT_TRUE(steps.count(t)) << t;
  EXPECT_EQ(mer::RecordPolicy::final_only().steps(7), (std::set<std::size_t>{7}));
  EXPECT_EQ(mer::RecordPolicy::all().steps(3), (std::set<std::size_t>{1, 2, 3}));
  EXPECT_TRUE(mer::RecordPolicy::all().steps(0).empty());
}
