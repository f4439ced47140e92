#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvc {

// Axis-aligned box in corner form, pixel coordinates of the image frame.
struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool degenerate() const noexcept { return width() <= 0.0 || height() <= 0.0; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline bool is_valid(const BoundingBox& b) noexcept {
  return std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) &&
         std::isfinite(b.y2) && b.x1 <= b.x2 && b.y1 <= b.y2;
}

inline void require_valid(const BoundingBox& b) {
  if (!is_valid(b)) {
    throw std::invalid_argument("bounding box must satisfy x1<=x2 and y1<=y2");
  }
}

inline bool inside_image(const BoundingBox& b, double width, double height) noexcept {
  return is_valid(b) && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width && b.y2 <= height;
}

// Detector output: a region plus its confidence in [0,1].
struct Candidate {
  BoundingBox box;
  double confidence = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

inline void require_valid(const Candidate& c) {
  require_valid(c.box);
  if (!(c.confidence >= 0.0 && c.confidence <= 1.0)) {
    throw std::invalid_argument("candidate confidence must lie in [0,1]");
  }
}

/// Intersection over union. Zero when the union is empty.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

struct MatchPair {
  std::size_t prediction = 0;
  std::size_t ground_truth = 0;
  double iou = 0.0;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<std::size_t> unmatched_predictions;
  std::vector<std::size_t> unmatched_ground_truths;
};

/// Indices of `candidates` ordered by descending confidence, lower index first on ties.
inline std::vector<std::size_t> confidence_order(const std::vector<Candidate>& candidates) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return candidates[a].confidence > candidates[b].confidence;
  });
  return order;
}

/// Greedy one-to-one matching. Predictions are visited by descending
/// confidence; each takes the free ground truth with the highest IoU and the
/// pair is kept only when that IoU reaches `tau_match`. Pairs are reported in
/// visiting order, unmatched index lists in ascending order.
inline MatchResult greedy_match(const std::vector<Candidate>& predictions,
                                const std::vector<BoundingBox>& ground_truths,
                                double tau_match) {
  if (!(tau_match > 0.0 && tau_match <= 1.0)) {
    throw std::invalid_argument("tau_match must lie in (0,1]");
  }
  MatchResult result;
  std::vector<bool> gt_taken(ground_truths.size(), false);
  std::vector<bool> pred_taken(predictions.size(), false);

  for (std::size_t p : confidence_order(predictions)) {
    double best = -1.0;
    std::size_t best_gt = ground_truths.size();
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (gt_taken[g]) continue;
      const double v = iou(predictions[p].box, ground_truths[g]);
      if (v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best_gt < ground_truths.size() && best >= tau_match) {
      gt_taken[best_gt] = true;
      pred_taken[p] = true;
      result.pairs.push_back({p, best_gt, best});
    }
  }
  for (std::size_t p = 0; p < predictions.size(); ++p) {
    if (!pred_taken[p]) result.unmatched_predictions.push_back(p);
  }
  for (std::size_t g = 0; g < ground_truths.size(); ++g) {
    if (!gt_taken[g]) result.unmatched_ground_truths.push_back(g);
  }
  return result;
}

/// True iff some final overlaps the ground truth with IoU >= tau_iou.
inline bool detected(const BoundingBox& ground_truth, const std::vector<Candidate>& finals,
                     double tau_iou) {
  if (!(tau_iou > 0.0 && tau_iou <= 1.0)) {
    throw std::invalid_argument("tau_iou must lie in (0,1]");
  }
  double best = 0.0;
  for (const auto& f : finals) best = std::max(best, iou(f.box, ground_truth));
  return !finals.empty() && best >= tau_iou;
}

/// Scales `box` about its center by `rho` and clips the result to the image.
inline BoundingBox expand_region(const BoundingBox& box, double rho, double image_width,
                                 double image_height) {
  if (!(rho >= 1.0) || !std::isfinite(rho)) {
    throw std::invalid_argument("expansion factor must be >= 1");
  }
  if (!inside_image(box, image_width, image_height)) {
    throw std::invalid_argument("box must lie inside the image");
  }
  const double cx = 0.5 * (box.x1 + box.x2);
  const double cy = 0.5 * (box.y1 + box.y2);
  const double hw = 0.5 * rho * box.width();
  const double hh = 0.5 * rho * box.height();
  return {std::max(0.0, cx - hw), std::max(0.0, cy - hh), std::min(image_width, cx + hw),
          std::min(image_height, cy + hh)};
}

// Integer box on the 0..1000 grid used by the model-facing answer format.
struct GridBox {
  int x1 = 0;
  int y1 = 0;
  int x2 = 0;
  int y2 = 0;

  friend bool operator==(const GridBox&, const GridBox&) = default;
};

inline constexpr int kGridExtent = 1000;

inline bool is_valid(const GridBox& g) noexcept {
  return g.x1 >= 0 && g.y1 >= 0 && g.x2 <= kGridExtent && g.y2 <= kGridExtent && g.x1 <= g.x2 &&
         g.y1 <= g.y2;
}

namespace detail {

inline void require_image_dims(double w, double h) {
  if (!(w > 0.0 && h > 0.0) || !std::isfinite(w) || !std::isfinite(h)) {
    throw std::invalid_argument("image dimensions must be positive");
  }
}

// Round half up on the scaled value. The tiny slack absorbs the rounding error
// of v*1000/extent when the exact quotient sits on a .5 boundary.
inline int to_grid(double v, double extent) {
  const double scaled = v * kGridExtent / extent;
  const int g = static_cast<int>(std::floor(scaled + 0.5 + 1e-9));
  return std::clamp(g, 0, kGridExtent);
}

}  // namespace detail

inline GridBox normalize_to_grid(const BoundingBox& box, double image_width, double image_height) {
  detail::require_image_dims(image_width, image_height);
  require_valid(box);
  return {detail::to_grid(box.x1, image_width), detail::to_grid(box.y1, image_height),
          detail::to_grid(box.x2, image_width), detail::to_grid(box.y2, image_height)};
}

inline BoundingBox denormalize_from_grid(const GridBox& g, double image_width, double image_height) {
  detail::require_image_dims(image_width, image_height);
  if (!is_valid(g)) throw std::invalid_argument("grid box outside [0,1000] or inverted");
  return {g.x1 * image_width / kGridExtent, g.y1 * image_height / kGridExtent,
          g.x2 * image_width / kGridExtent, g.y2 * image_height / kGridExtent};
}

}  // namespace dvc
