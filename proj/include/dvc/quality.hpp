#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace dvc {

// Per-frame quality factors, each in [0,1]; artifacts = 1 means artifact-free.
struct QualityFactors {
  double illumination = 1.0;
  double clarity = 1.0;
  double artifacts = 1.0;

  friend bool operator==(const QualityFactors&, const QualityFactors&) = default;
};

inline void require_valid(const QualityFactors& f) {
  for (double v : {f.illumination, f.clarity, f.artifacts}) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("quality factors must lie in [0,1]");
  }
}

class QualityWeights {
 public:
  static constexpr double kSumTolerance = 1e-9;

  QualityWeights() : QualityWeights(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0) {}

  QualityWeights(double illumination, double clarity, double artifacts)
      : illumination_(illumination), clarity_(clarity), artifacts_(artifacts) {
    if (illumination < 0.0 || clarity < 0.0 || artifacts < 0.0) {
      throw std::invalid_argument("quality weights must be nonnegative");
    }
    if (std::fabs(illumination + clarity + artifacts - 1.0) > kSumTolerance) {
      throw std::invalid_argument("quality weights must sum to 1");
    }
  }

  double illumination() const noexcept { return illumination_; }
  double clarity() const noexcept { return clarity_; }
  double artifacts() const noexcept { return artifacts_; }

  friend bool operator==(const QualityWeights&, const QualityWeights&) = default;

 private:
  double illumination_;
  double clarity_;
  double artifacts_;
};

inline double quality_score(const QualityFactors& f, const QualityWeights& w) {
  require_valid(f);
  return std::clamp(w.illumination() * f.illumination + w.clarity() * f.clarity +
                        w.artifacts() * f.artifacts,
                    0.0, 1.0);
}

enum class ThresholdMode { kBinary, kInterpolated };

inline std::string to_string(ThresholdMode m) {
  return m == ThresholdMode::kBinary ? "binary" : "interpolated";
}

inline ThresholdMode threshold_mode_from_string(const std::string& s) {
  if (s == "binary") return ThresholdMode::kBinary;
  if (s == "interpolated") return ThresholdMode::kInterpolated;
  throw std::invalid_argument("unknown threshold mode: " + s);
}

// Immutable detector threshold policy.
class ThresholdPolicy {
 public:
  ThresholdPolicy() : ThresholdPolicy(0.2, 0.5, 0.0, 1.0, ThresholdMode::kBinary) {}

  ThresholdPolicy(double tau_low, double tau_high, double q_min, double q_max, ThresholdMode mode)
      : tau_low_(tau_low), tau_high_(tau_high), q_min_(q_min), q_max_(q_max), mode_(mode) {
    if (!(tau_low > 0.0 && tau_low < tau_high && tau_high <= 1.0)) {
      throw std::invalid_argument("threshold policy requires 0 < tau_low < tau_high <= 1");
    }
    if (!(q_min < q_max) || !std::isfinite(q_min) || !std::isfinite(q_max)) {
      throw std::invalid_argument("threshold policy requires q_min < q_max");
    }
  }

  double tau_low() const noexcept { return tau_low_; }
  double tau_high() const noexcept { return tau_high_; }
  double q_min() const noexcept { return q_min_; }
  double q_max() const noexcept { return q_max_; }
  ThresholdMode mode() const noexcept { return mode_; }

  friend bool operator==(const ThresholdPolicy&, const ThresholdPolicy&) = default;

 private:
  double tau_low_;
  double tau_high_;
  double q_min_;
  double q_max_;
  ThresholdMode mode_;
};

inline double select_threshold_binary(bool adverse, const ThresholdPolicy& p) {
  return adverse ? p.tau_low() : p.tau_high();
}

/// Linear map from [q_min, q_max] onto [tau_low, tau_high]; Q is clamped first.
inline double select_threshold_interpolated(double quality, const ThresholdPolicy& p) {
  const double q = std::clamp(quality, p.q_min(), p.q_max());
  if (q <= p.q_min()) return p.tau_low();
  if (q >= p.q_max()) return p.tau_high();
  return p.tau_low() + (q - p.q_min()) * (p.tau_high() - p.tau_low()) / (p.q_max() - p.q_min());
}

// Where the adverse/clean call comes from in binary mode.
enum class AdverseSource { kBackend, kQualityScore };

inline std::string to_string(AdverseSource s) {
  return s == AdverseSource::kBackend ? "backend" : "quality";
}

inline AdverseSource adverse_source_from_string(const std::string& s) {
  if (s == "backend") return AdverseSource::kBackend;
  if (s == "quality") return AdverseSource::kQualityScore;
  throw std::invalid_argument("unknown adverse source: " + s);
}

struct ThresholdDecision {
  double tau = 0.0;
  bool adverse = false;
  std::optional<double> quality;
};

// Picks the per-frame detector threshold from the global assessment.
class ThresholdController {
 public:
  ThresholdController() = default;
  ThresholdController(ThresholdPolicy policy, QualityWeights weights, AdverseSource source,
                      double adverse_quality_cutoff = 0.5)
      : policy_(policy), weights_(weights), source_(source), cutoff_(adverse_quality_cutoff) {}

  const ThresholdPolicy& policy() const noexcept { return policy_; }

  // Interpolated mode needs quality factors; without them it falls back to
  // the binary rule on the backend's adverse flag.
  ThresholdDecision decide(bool backend_adverse, const std::optional<QualityFactors>& factors) const {
    ThresholdDecision d;
    if (factors) d.quality = quality_score(*factors, weights_);
    if (policy_.mode() == ThresholdMode::kInterpolated && d.quality) {
      d.tau = select_threshold_interpolated(*d.quality, policy_);
      d.adverse = *d.quality < cutoff_;
      return d;
    }
    d.adverse = (source_ == AdverseSource::kQualityScore && d.quality) ? (*d.quality < cutoff_)
                                                                      : backend_adverse;
    d.tau = select_threshold_binary(d.adverse, policy_);
    return d;
  }

 private:
  ThresholdPolicy policy_;
  QualityWeights weights_;
  AdverseSource source_ = AdverseSource::kBackend;
  double cutoff_ = 0.5;
};

}  // namespace dvc
