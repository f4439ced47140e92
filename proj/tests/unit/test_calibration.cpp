#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dvc/calibration.hpp"
#include "support/synthetic.hpp"

using namespace dvc;

TEST(Epistemic, Examples) {
  EXPECT_EQ(epistemic({{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}}), 0.0);
  EXPECT_DOUBLE_EQ(epistemic({{1, 0}, {0, 1}}), 0.25);
  EXPECT_EQ(epistemic({{0.9, 0.1}}), 0.0);
  EXPECT_THROW(epistemic({}), std::invalid_argument);
  EXPECT_THROW(epistemic({{0.5, 0.6}}), std::invalid_argument);
  EXPECT_THROW(epistemic({{0.5, 0.5}, {1.0}}), std::invalid_argument);
}

TEST(EpistemicProperty, PermutationInvariantZeroIffEqual) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    StochasticScores passes;
    for (int t = 0; t < 2 + trial % 6; ++t) {
      const double p = u(rng);
      passes.push_back({p, 1 - p});
    }
    const double v = epistemic(passes);
    EXPECT_GT(v, 0.0);
    auto shuffled = passes;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    EXPECT_NEAR(epistemic(shuffled), v, 1e-15);
    StochasticScores same(passes.size(), passes.front());
    EXPECT_EQ(epistemic(same), 0.0);
  }
}

TEST(TemperatureScale, Examples) {
  const auto plain = temperature_scale({1.0, -0.5, 2.0}, CalibrationModel(1.0));
  const auto soft = softmax({1.0, -0.5, 2.0});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(plain[i], soft[i]);
  const auto p = temperature_scale({2, 0}, CalibrationModel(2.0));
  const double e = std::exp(1.0);
  EXPECT_NEAR(p[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(p[1], 1 / (e + 1), 1e-15);
  EXPECT_NEAR(p[0], 0.7311, 1e-4);
  const auto flat = temperature_scale({5, -3, 1}, CalibrationModel(1e6));
  for (double v : flat) EXPECT_NEAR(v, 1.0 / 3.0, 1e-5);
  EXPECT_THROW(temperature_scale({1, NAN}, CalibrationModel()), std::invalid_argument);
  EXPECT_THROW(CalibrationModel(0.0), std::invalid_argument);
  EXPECT_THROW(CalibrationModel(-1.0), std::invalid_argument);
}

TEST(TemperatureScaleProperty, PreservesArgmax) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> n(0, 5);
  std::uniform_real_distribution<double> logt(-4, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> z(2 + trial % 5);
    for (auto& v : z) v = n(rng);
    const auto p = temperature_scale(z, CalibrationModel(std::exp(logt(rng))));
    EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), std::max_element(z.begin(), z.end()) - z.begin());
  }
}

TEST(FitTemperature, CalibratedData) {
  const auto m = fit_temperature(synthetic::tempered_set(4000, 1.0, 1));
  EXPECT_NEAR(m.temperature(), 1.0, 0.05);
}

TEST(FitTemperature, OverconfidentData) {
  auto data = synthetic::tempered_set(4000, 1.0, 2);
  for (auto& d : data) {
    for (auto& z : d.logits) z *= 3.0;
  }
  EXPECT_NEAR(fit_temperature(data).temperature(), 3.0, 0.1);
}

TEST(FitTemperature, RecoversKnownTemperature) {
  for (double t : {0.3, 0.5, 1.0, 1.7, 2.5, 4.0, 10.0}) {
    const auto m = fit_temperature(synthetic::frequency_matched_set(1000, t));
    EXPECT_NEAR(m.temperature() / t, 1.0, 0.05) << "T*=" << t;
    EXPECT_NEAR(m.temperature() / t, 1.0, 1e-4) << "T*=" << t;
  }
}

// Sampled labels: the band is more than three standard errors wide at these sizes.
TEST(FitTemperature, RecoversKnownTemperatureFromSampledLabels) {
  for (double t : {0.5, 2.5}) {
    EXPECT_NEAR(fit_temperature(synthetic::tempered_set(20000, t, 12)).temperature() / t, 1.0, 0.05) << "T*=" << t;
    EXPECT_NEAR(fit_temperature(synthetic::tempered_set(5000, t, 13, 10)).temperature() / t, 1.0, 0.05) << "T*=" << t;
  }
}

TEST(FitTemperature, Rejections) {
  EXPECT_THROW(fit_temperature({{{1, 0}, 0}}), std::invalid_argument);
  EXPECT_THROW(fit_temperature({{{1, 0}, 0}, {{2, 0}, 0}}), std::invalid_argument);
  EXPECT_THROW(fit_temperature({{{1, 0}, 0}, {{2, 0}, 2}}), std::invalid_argument);
  EXPECT_THROW(fit_temperature({{{1, 0}, 0}, {{INFINITY, 0}, 1}}), std::invalid_argument);
}

TEST(FitTemperature, MinimisesNll) {
  const auto data = synthetic::tempered_set(500, 1.3, 9, 3);
  const double t = fit_temperature(data).temperature();
  const double at = temperature_nll(data, t);
  for (double f : {0.9, 0.97, 1.03, 1.1}) EXPECT_LE(at, temperature_nll(data, t * f));
}

namespace {

// Per-bin sums with explicit edges.
double ece_oracle(const std::vector<ScoredOutcome>& xs, int bins) {
  double total = 0;
  for (int b = 0; b < bins; ++b) {
    const double lo = static_cast<double>(b) / bins, hi = static_cast<double>(b + 1) / bins;
    double conf = 0, acc = 0, n = 0;
    for (const auto& x : xs) {
      const bool in = b == bins - 1 ? x.confidence >= lo : (x.confidence >= lo && x.confidence < hi);
      if (!in) continue;
      conf += x.confidence;
      acc += x.correct;
      ++n;
    }
    if (n > 0) total += n / static_cast<double>(xs.size()) * std::fabs(acc / n - conf / n);
  }
  return total;
}

}  // namespace

TEST(Ece, Examples) {
  EXPECT_EQ(expected_calibration_error({{1.0, true}, {1.0, true}}, 10), 0.0);
  EXPECT_EQ(expected_calibration_error({{0.5, true}, {0.5, false}, {0.5, true}, {0.5, false}}, 10), 0.0);
  EXPECT_EQ(expected_calibration_error({}, 10), 0.0);
  EXPECT_THROW(expected_calibration_error({{0.5, true}}, 0), std::invalid_argument);
  EXPECT_THROW(expected_calibration_error({{1.5, true}}, 5), std::invalid_argument);
}

TEST(Ece, TenPredictionFixture) {
  const std::vector<ScoredOutcome> xs{{0.05, false}, {0.15, false}, {0.15, true}, {0.45, true}, {0.5, false},
                                      {0.62, true},  {0.7, true},   {0.88, false}, {0.95, true}, {1.0, true}};
  // Bins of 5: [0,.2) {.05F,.15F,.15T}; [.4,.6) {.45T,.5F}; [.6,.8) {.62T,.7T}; [.8,1] {.88F,.95T,1T}.
  const double hand = 0.3 * std::fabs(1.0 / 3 - 0.35 / 3) + 0.2 * std::fabs(0.5 - 0.475) +
                      0.2 * std::fabs(1.0 - 0.66) + 0.3 * std::fabs(2.0 / 3 - 2.83 / 3);
  EXPECT_NEAR(expected_calibration_error(xs, 5), hand, 1e-12);
  EXPECT_NEAR(expected_calibration_error(xs, 5), ece_oracle(xs, 5), 1e-12);
  EXPECT_NEAR(expected_calibration_error(xs, 10), ece_oracle(xs, 10), 1e-12);
}

TEST(EceProperty, BoundedAndCalibratedSetsNearZero) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoredOutcome> xs(1 + trial * 7);
    for (auto& x : xs) x = {u(rng), u(rng) < 0.5};
    const double e = expected_calibration_error(xs, 1 + trial % 15);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 1.0);
    EXPECT_NEAR(e, ece_oracle(xs, 1 + trial % 15), 1e-12);
  }
  const std::size_t n = 20000;
  std::vector<ScoredOutcome> calibrated;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = u(rng);
    calibrated.push_back({c, u(rng) < c});
  }
  EXPECT_LT(expected_calibration_error(calibrated, 10), 1.0 / std::sqrt(static_cast<double>(n)) * 3);
}
