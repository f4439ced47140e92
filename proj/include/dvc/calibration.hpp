#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

namespace dvc {

// T stochastic forward passes, each a probability vector over the classes.
using StochasticScores = std::vector<std::vector<double>>;

/// Across-pass variance of each class probability (population form),
/// averaged over classes. Zero for a single pass.
inline double epistemic(const StochasticScores& passes) {
  if (passes.empty()) throw std::invalid_argument("epistemic estimate needs at least one pass");
  const std::size_t k = passes.front().size();
  if (k == 0) throw std::invalid_argument("probability vectors must be non-empty");
  for (const auto& p : passes) {
    if (p.size() != k) throw std::invalid_argument("probability vectors must share a length");
    double s = 0.0;
    for (double v : p) s += v;
    if (std::fabs(s - 1.0) > 1e-9) throw std::invalid_argument("probability vectors must sum to 1");
  }
  // Pairwise form of the population variance: exactly zero when passes agree.
  const double t = static_cast<double>(passes.size());
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    double sq = 0.0;
    for (std::size_t i = 0; i < passes.size(); ++i) {
      for (std::size_t j = i + 1; j < passes.size(); ++j) sq += (passes[i][c] - passes[j][c]) * (passes[i][c] - passes[j][c]);
    }
    total += sq / (t * t);
  }
  return total / static_cast<double>(k);
}

class CalibrationModel {
 public:
  CalibrationModel() = default;
  explicit CalibrationModel(double temperature) : temperature_(temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
      throw std::invalid_argument("temperature must be positive and finite");
    }
  }
  double temperature() const noexcept { return temperature_; }

 private:
  double temperature_ = 1.0;
};

inline std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of an empty vector");
  const double hi = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] - hi);
  for (double& v : out) v /= sum;
  return out;
}

inline std::vector<double> temperature_scale(const std::vector<double>& logits, const CalibrationModel& model) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw std::invalid_argument("logits must be finite");
    scaled[i] = logits[i] / model.temperature();
  }
  return softmax(scaled);
}

struct LabeledLogits {
  std::vector<double> logits;
  std::size_t label = 0;
};

/// Mean negative log-likelihood of the labels under softmax(logits / T).
inline double temperature_nll(const std::vector<LabeledLogits>& data, double temperature) {
  double nll = 0.0;
  for (const auto& d : data) {
    double hi = -INFINITY;
    for (double z : d.logits) hi = std::max(hi, z / temperature);
    double sum = 0.0;
    for (double z : d.logits) sum += std::exp(z / temperature - hi);
    nll -= d.logits[d.label] / temperature - hi - std::log(sum);
  }
  return nll / static_cast<double>(data.size());
}

/// Golden-section search for the NLL-minimising temperature over log T in [-4, 4].
inline CalibrationModel fit_temperature(const std::vector<LabeledLogits>& data, double tolerance = 1e-6) {
  if (data.size() < 2) throw std::invalid_argument("temperature fitting needs at least 2 samples");
  std::vector<bool> seen;
  for (const auto& d : data) {
    if (d.logits.size() < 2 || d.label >= d.logits.size()) {
      throw std::invalid_argument("each sample needs >= 2 logits and an in-range label");
    }
    for (double z : d.logits) {
      if (!std::isfinite(z)) throw std::invalid_argument("logits must be finite");
    }
    if (seen.size() < d.logits.size()) seen.resize(d.logits.size(), false);
    seen[d.label] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw std::invalid_argument("temperature fitting needs at least two distinct labels");
  }

  const auto f = [&](double log_t) { return temperature_nll(data, std::exp(log_t)); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -4.0, hi = 4.0;
  double a = hi - inv_phi * (hi - lo);
  double b = lo + inv_phi * (hi - lo);
  double fa = f(a), fb = f(b);
  while (hi - lo > tolerance) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - inv_phi * (hi - lo);
      fa = f(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + inv_phi * (hi - lo);
      fb = f(b);
    }
  }
  return CalibrationModel(std::exp(0.5 * (lo + hi)));
}

struct ScoredOutcome {
  double confidence = 0.0;
  bool correct = false;
};

/// Expected calibration error over `bins` equal-width bins on [0,1]; bins are
/// half-open except the last, which includes 1.0.
inline double expected_calibration_error(const std::vector<ScoredOutcome>& predictions, std::size_t bins) {
  if (bins < 1) throw std::invalid_argument("ECE needs at least one bin");
  if (predictions.empty()) return 0.0;
  std::vector<double> conf_sum(bins, 0.0), correct_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (const auto& p : predictions) {
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) throw std::invalid_argument("confidence outside [0,1]");
    auto b = static_cast<std::size_t>(p.confidence * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    conf_sum[b] += p.confidence;
    correct_sum[b] += p.correct ? 1.0 : 0.0;
    ++count[b];
  }
  const double n = static_cast<double>(predictions.size());
  double ece = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    ece += (c / n) * std::fabs(correct_sum[b] / c - conf_sum[b] / c);
  }
  return ece;
}

}  // namespace dvc
