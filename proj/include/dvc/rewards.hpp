#pragma once

// Cost-sensitive detection reward:
//
//   r_total = alpha * r_iou + beta * r_conf + gamma * r_format
//
// r_iou    mean IoU over greedy one-to-one matches (0 without matches)
// r_conf   mean per-prediction calibration term minus lambda_fn * FN penalty;
//          a prediction earns c when its matched IoU > tau_iou, else 1 - c
// r_format 1 iff the raw response passes every format check

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dvc/geometry.hpp"
#include "dvc/protocol.hpp"

namespace dvc {

enum class FnPenaltyMode { kFractional, kCount };

inline std::string to_string(FnPenaltyMode m) { return m == FnPenaltyMode::kFractional ? "fractional" : "count"; }

inline FnPenaltyMode fn_penalty_mode_from_string(const std::string& s) {
  if (s == "fractional") return FnPenaltyMode::kFractional;
  if (s == "count") return FnPenaltyMode::kCount;
  throw std::invalid_argument("unknown FN penalty mode: " + s);
}

struct RewardWeights {
  double alpha = 0.6;
  double beta = 0.3;
  double gamma = 0.1;
  double lambda_fn = 2.0;
  double tau_match = 0.3;
  double tau_iou = 0.3;
  FnPenaltyMode fn_mode = FnPenaltyMode::kFractional;

  void validate() const {
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw std::invalid_argument("reward weights must be nonnegative");
    if (std::fabs(alpha + beta + gamma - 1.0) > 1e-9) throw std::invalid_argument("reward weights must sum to 1");
    if (!(lambda_fn >= 0.0)) throw std::invalid_argument("lambda_fn must be >= 0");
    if (!(tau_match > 0.0 && tau_match <= 1.0)) throw std::invalid_argument("tau_match must lie in (0,1]");
    if (!(tau_iou > 0.0 && tau_iou <= 1.0)) throw std::invalid_argument("tau_iou must lie in (0,1]");
  }

  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;
};

struct RewardBreakdown {
  double r_iou = 0.0;
  double r_conf = 0.0;
  double r_format = 0.0;
  double r_total = 0.0;
  std::size_t matches = 0;
  std::size_t predictions = 0;
  std::size_t false_negatives = 0;
};

struct IouReward {
  double r_iou = 0.0;
  std::size_t matches = 0;
};

inline IouReward reward_iou(const std::vector<Candidate>& predictions, const std::vector<BoundingBox>& gts,
                            double tau_match) {
  const auto m = greedy_match(predictions, gts, tau_match);
  IouReward out;
  out.matches = m.pairs.size();
  if (out.matches == 0) return out;
  double sum = 0.0;
  for (const auto& p : m.pairs) sum += p.iou;
  out.r_iou = sum / static_cast<double>(out.matches);
  return out;
}

namespace detail {

inline double fn_penalty(std::size_t missed, std::size_t gt_count, FnPenaltyMode mode) {
  if (gt_count == 0) return 0.0;
  return mode == FnPenaltyMode::kFractional ? static_cast<double>(missed) / static_cast<double>(gt_count)
                                            : static_cast<double>(missed);
}

inline double conf_from_match(const std::vector<Candidate>& predictions, const std::vector<BoundingBox>& gts,
                              const MatchResult& m, const RewardWeights& w) {
  const double penalty = w.lambda_fn * fn_penalty(m.unmatched_ground_truths.size(), gts.size(), w.fn_mode);
  if (predictions.empty()) return -penalty;
  std::vector<double> matched_iou(predictions.size(), -1.0);
  for (const auto& p : m.pairs) matched_iou[p.prediction] = p.iou;
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double c = predictions[i].confidence;
    sum += matched_iou[i] > w.tau_iou ? c : 1.0 - c;
  }
  return sum / static_cast<double>(predictions.size()) - penalty;
}

inline void require_confidences(const std::vector<Candidate>& predictions) {
  for (const auto& p : predictions) {
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) {
      throw std::invalid_argument("prediction confidence outside [0,1]");
    }
  }
}

}  // namespace detail

inline double reward_conf(const std::vector<Candidate>& predictions, const std::vector<BoundingBox>& gts,
                          const RewardWeights& w) {
  detail::require_confidences(predictions);
  return detail::conf_from_match(predictions, gts, greedy_match(predictions, gts, w.tau_match), w);
}

inline double reward_format(std::string_view raw_response) {
  return parse_detection(raw_response).report.ok() ? 1.0 : 0.0;
}

/// Composes the three terms for already-decoded predictions.
inline RewardBreakdown reward_from_predictions(const std::vector<Candidate>& predictions,
                                               const std::vector<BoundingBox>& gts, bool format_ok,
                                               const RewardWeights& w) {
  w.validate();
  detail::require_confidences(predictions);
  const auto m = greedy_match(predictions, gts, w.tau_match);
  RewardBreakdown b;
  b.matches = m.pairs.size();
  b.predictions = predictions.size();
  b.false_negatives = m.unmatched_ground_truths.size();
  if (b.matches > 0) {
    double sum = 0.0;
    for (const auto& p : m.pairs) sum += p.iou;
    b.r_iou = sum / static_cast<double>(b.matches);
  }
  b.r_conf = detail::conf_from_match(predictions, gts, m, w);
  b.r_format = format_ok ? 1.0 : 0.0;
  b.r_total = w.alpha * b.r_iou + w.beta * b.r_conf + w.gamma * b.r_format;
  return b;
}

/// Scores a raw detection response against pixel-space ground truths of a
/// frame of the given size. An unparseable response counts as no predictions.
inline RewardBreakdown reward_total(std::string_view raw_response, const std::vector<BoundingBox>& gts,
                                    double image_width, double image_height, const RewardWeights& w) {
  const auto parsed = parse_detection(raw_response);
  std::vector<Candidate> predictions;
  if (parsed.response) {
    for (const auto& item : parsed.response->items) {
      predictions.push_back({denormalize_from_grid(item.box, image_width, image_height), item.confidence});
    }
  }
  return reward_from_predictions(predictions, gts, parsed.report.ok(), w);
}

}  // namespace dvc
