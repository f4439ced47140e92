#pragma once

// Two-stage detect-then-verify pipeline.
//
// Stage 1 picks a per-frame detector threshold from the global assessment and
// keeps the detector's candidates at or above it. Stage 2 hands every
// candidate's crop rectangle (plus its context-expanded rectangle) to the
// verifier and keeps a candidate only when the verdict is Yes with confidence
// >= tau_conf. Any verifier or parse failure rejects the candidate.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc/backends.hpp"
#include "dvc/dataset.hpp"
#include "dvc/geometry.hpp"
#include "dvc/parallel.hpp"
#include "dvc/protocol.hpp"
#include "dvc/quality.hpp"

namespace dvc {

struct MultiScaleConfig {
  bool enabled = true;
  std::vector<double> scales{0.8, 1.0, 1.2};
  std::vector<double> weights{0.2, 0.6, 0.2};

  friend bool operator==(const MultiScaleConfig&, const MultiScaleConfig&) = default;
};

// Which verifier score gates acceptance (together with a Yes decision).
enum class AcceptanceScore { kVerdict, kMultiScale };

inline std::string to_string(AcceptanceScore a) { return a == AcceptanceScore::kVerdict ? "verdict" : "multiscale"; }

inline AcceptanceScore acceptance_score_from_string(const std::string& s) {
  if (s == "verdict") return AcceptanceScore::kVerdict;
  if (s == "multiscale") return AcceptanceScore::kMultiScale;
  throw std::invalid_argument("unknown acceptance score: " + s);
}

struct CascadeConfig {
  ThresholdPolicy policy;
  QualityWeights quality_weights;
  AdverseSource adverse_source = AdverseSource::kBackend;
  double adverse_quality_cutoff = 0.5;
  std::optional<double> fixed_threshold;  // bypasses the controller (ablation)
  bool verify = true;                     // false: detector-only baseline
  double tau_conf = 0.7;
  double tau_iou = 0.3;
  double rho = 1.5;
  MultiScaleConfig multiscale;
  AcceptanceScore acceptance = AcceptanceScore::kVerdict;
  std::size_t verify_in_flight = 4;
  std::string class_name = "polyp";

  void validate() const {
    if (!(tau_conf >= 0.0 && tau_conf <= 1.0)) throw std::invalid_argument("tau_conf must lie in [0,1]");
    if (!(tau_iou > 0.0 && tau_iou <= 1.0)) throw std::invalid_argument("tau_iou must lie in (0,1]");
    if (!(rho >= 1.0)) throw std::invalid_argument("rho must be >= 1");
    if (fixed_threshold && !(*fixed_threshold >= 0.0 && *fixed_threshold <= 1.0)) {
      throw std::invalid_argument("fixed threshold must lie in [0,1]");
    }
    if (verify_in_flight < 1) throw std::invalid_argument("verify_in_flight must be >= 1");
    if (class_name.empty()) throw std::invalid_argument("class name must be non-empty");
    const auto& m = multiscale;
    if (m.scales.size() != m.weights.size() || m.scales.empty()) {
      throw std::invalid_argument("multi-scale scales and weights must be non-empty and equally long");
    }
    double sum = 0.0;
    for (double w : m.weights) {
      if (w < 0.0) throw std::invalid_argument("scale weights must be nonnegative");
      sum += w;
    }
    if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("scale weights must sum to 1");
    for (double s : m.scales) {
      if (!(s > 0.0)) throw std::invalid_argument("scales must be positive");
    }
  }

  ThresholdController controller() const {
    return ThresholdController(policy, quality_weights, adverse_source, adverse_quality_cutoff);
  }
};

struct VerifiedCandidate {
  Candidate candidate;
  int decision = 0;                 // d_k
  double verdict_confidence = 0.0;  // s_k
  std::optional<double> multiscale_score;
  bool accepted = false;
  BoundingBox context_crop;
  FormatReport format;
  std::string raw_response;
  int retries = 0;
  std::optional<std::string> error;
};

struct FrameResult {
  std::string frame_id;
  Condition condition = Condition::kClean;
  std::set<std::string> degradation_tags;
  std::vector<BoundingBox> ground_truths;
  double applied_threshold = 0.0;
  bool adverse = false;
  std::optional<double> quality_score;
  std::optional<double> aleatoric;
  std::vector<Candidate> stage1_candidates;
  std::vector<VerifiedCandidate> verified;
  std::vector<Candidate> finals;
  std::vector<bool> per_gt_detected;
  StageTiming timing;
  std::optional<std::string> error;  // frame-level backend failure
};

/// Keeps candidates with confidence >= tau, ordered by descending confidence
/// (original index breaks ties).
inline std::vector<Candidate> threshold_candidates(const std::vector<Candidate>& raw, double tau) {
  std::vector<Candidate> kept;
  for (std::size_t i : confidence_order(raw)) {
    if (raw[i].confidence >= tau) kept.push_back(raw[i]);
  }
  return kept;
}

struct Stage1Output {
  ThresholdDecision threshold;
  std::optional<double> aleatoric;
  std::vector<Candidate> candidates;
};

inline Stage1Output stage1(const FrameRecord& frame, DetectorBackend& detector, VerifierBackend& assessor,
                           const CascadeConfig& config) {
  Stage1Output out;
  if (config.fixed_threshold) {
    out.threshold.tau = *config.fixed_threshold;
    out.threshold.adverse = frame.condition == Condition::kDegraded;
  } else {
    const auto assessment = assessor.assess_global(frame);
    out.threshold = config.controller().decide(assessment.adverse, assessment.quality ? assessment.quality
                                                                                     : frame.quality);
    out.aleatoric = assessment.aleatoric;
  }
  out.candidates = threshold_candidates(detector.propose(frame), out.threshold.tau);
  return out;
}

namespace detail {

// Probability mass the verdict puts on "Yes".
inline double yes_score(const VerdictResponse& v) {
  return v.decision == Decision::kYes ? v.confidence : 1.0 - v.confidence;
}

inline BoundingBox clip_to_image(const BoundingBox& b, double w, double h) {
  BoundingBox c{std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h), std::clamp(b.x2, 0.0, w),
                std::clamp(b.y2, 0.0, h)};
  c.x2 = std::max(c.x1, c.x2);
  c.y2 = std::max(c.y1, c.y2);
  return c;
}

inline VerifiedCandidate verify_candidate(const FrameRecord& frame, const Candidate& cand, std::size_t index,
                                          VerifierBackend& verifier, const CascadeConfig& config,
                                          const std::string& prompt) {
  VerifiedCandidate vc;
  vc.candidate = cand;
  const BoundingBox crop = clip_to_image(cand.box, frame.image_width, frame.image_height);
  vc.context_crop = expand_region(crop, config.rho, frame.image_width, frame.image_height);

  VerifyRequest req{frame.frame_id, frame.image_ref, index, crop, vc.context_crop, 1.0, prompt, vc.candidate.confidence};
  std::optional<VerdictResponse> primary;
  try {
    const auto reply = verifier.verify(frame, req);
    vc.raw_response = reply.raw_response;
    vc.retries = reply.retries;
    const auto parsed = parse_verdict(reply.raw_response);
    vc.format = parsed.report;
    primary = parsed.response;
    if (!primary) vc.error = "unparseable verifier response";
  } catch (const BackendError& e) {
    vc.retries = e.retries();
    vc.error = std::string("verifier error: ") + e.what();
  } catch (const std::exception& e) {
    vc.error = std::string("verifier error: ") + e.what();
  }
  if (primary) {
    vc.decision = primary->decision == Decision::kYes ? 1 : 0;
    vc.verdict_confidence = primary->confidence;
  }

  if (primary && config.multiscale.enabled) {
    double score = 0.0;
    bool complete = true;
    for (std::size_t s = 0; s < config.multiscale.scales.size() && complete; ++s) {
      const double scale = config.multiscale.scales[s];
      if (std::fabs(scale - 1.0) < 1e-12) {
        score += config.multiscale.weights[s] * yes_score(*primary);
        continue;
      }
      try {
        VerifyRequest scaled = req;
        scaled.scale = scale;
        const auto parsed = parse_verdict(verifier.verify(frame, scaled).raw_response);
        if (parsed.response) {
          score += config.multiscale.weights[s] * yes_score(*parsed.response);
        } else {
          complete = false;
        }
      } catch (const std::exception&) {
        complete = false;
      }
    }
    if (complete) vc.multiscale_score = std::clamp(score, 0.0, 1.0);
  }

  if (primary && !vc.error && vc.decision == 1) {
    if (config.acceptance == AcceptanceScore::kVerdict) {
      vc.accepted = vc.verdict_confidence >= config.tau_conf;
    } else {
      vc.accepted = vc.multiscale_score && *vc.multiscale_score >= config.tau_conf;
    }
  }
  return vc;
}

}  // namespace detail

/// Verifies every candidate (up to `verify_in_flight` concurrently) and
/// returns the audit entries in candidate order.
inline std::vector<VerifiedCandidate> stage2(const FrameRecord& frame, const std::vector<Candidate>& candidates,
                                             VerifierBackend& verifier, const CascadeConfig& config) {
  const std::string prompt = render_verify_prompt(config.class_name);
  std::vector<VerifiedCandidate> out(candidates.size());
  parallel_for(candidates.size(), config.verify_in_flight, [&](std::size_t i) {
    out[i] = detail::verify_candidate(frame, candidates[i], i, verifier, config, prompt);
  });
  return out;
}

inline std::vector<Candidate> consensus_finals(const std::vector<VerifiedCandidate>& verified) {
  std::vector<Candidate> finals;
  for (const auto& v : verified) {
    if (v.accepted) finals.push_back(v.candidate);
  }
  return finals;
}

inline std::vector<bool> evaluate_frame(const FrameResult& result, double tau_iou) {
  std::vector<bool> out;
  out.reserve(result.ground_truths.size());
  for (const auto& gt : result.ground_truths) out.push_back(detected(gt, result.finals, tau_iou));
  return out;
}

inline FrameResult process_frame(const FrameRecord& frame, DetectorBackend& detector, VerifierBackend& verifier,
                                 const CascadeConfig& config) {
  FrameResult r;
  r.frame_id = frame.frame_id;
  r.condition = frame.condition;
  r.degradation_tags = frame.degradation_tags;
  r.ground_truths = frame.ground_truths;

  TimedDetector timed_detector(detector, r.timing);
  TimedVerifier timed_verifier(verifier, r.timing);
  try {
    auto s1 = stage1(frame, timed_detector, timed_verifier, config);
    r.applied_threshold = s1.threshold.tau;
    r.adverse = s1.threshold.adverse;
    r.quality_score = s1.threshold.quality;
    r.aleatoric = s1.aleatoric;
    r.stage1_candidates = std::move(s1.candidates);
  } catch (const std::exception& e) {
    r.error = e.what();
    r.per_gt_detected.assign(r.ground_truths.size(), false);
    return r;
  }

  if (config.verify) {
    r.verified = stage2(frame, r.stage1_candidates, timed_verifier, config);
  }
  r.timing.t_verify_each.resize(r.verified.size(), 0.0);

  Stopwatch post;
  r.finals = config.verify ? consensus_finals(r.verified) : r.stage1_candidates;
  r.per_gt_detected = evaluate_frame(r, config.tau_iou);
  r.timing.t_postprocess = post.elapsed_ms();
  return r;
}

enum class RunStatus { kClean = 0, kFatal = 1, kPartial = 2 };

struct DatasetRun {
  std::vector<FrameResult> results;  // dataset order
  std::vector<std::string> failed_frames;
  RunStatus status = RunStatus::kClean;
};

inline DatasetRun run_dataset(const std::vector<FrameRecord>& frames, DetectorBackend& detector,
                              VerifierBackend& verifier, const CascadeConfig& config, std::size_t workers) {
  config.validate();
  DatasetRun run;
  run.results.resize(frames.size());
  parallel_for(frames.size(), workers, [&](std::size_t i) {
    run.results[i] = process_frame(frames[i], detector, verifier, config);
  });
  for (const auto& r : run.results) {
    if (r.error) run.failed_frames.push_back(r.frame_id);
  }
  run.status = run.failed_frames.empty() ? RunStatus::kClean : RunStatus::kPartial;
  return run;
}

// ---------------------------------------------------------------------------
// Audit log: one JSON object per frame, newline-delimited. Everything under
// the "timing" key is wall-clock data; every other field is deterministic.

inline json candidate_to_json(const Candidate& c) {
  return {{"box", {c.box.x1, c.box.y1, c.box.x2, c.box.y2}}, {"conf", c.confidence}};
}

inline json audit_record(const FrameResult& r) {
  json verified = json::array();
  for (const auto& v : r.verified) {
    json e = {{"candidate", candidate_to_json(v.candidate)},
              {"decision", v.decision},
              {"verdict_confidence", v.verdict_confidence},
              {"accepted", v.accepted},
              {"context_crop", {v.context_crop.x1, v.context_crop.y1, v.context_crop.x2, v.context_crop.y2}},
              {"format", {{"valid_envelope", v.format.valid_envelope}, {"valid_payload", v.format.valid_payload},
                          {"required_fields", v.format.required_fields}, {"value_ranges", v.format.value_ranges}}},
              {"raw_response", v.raw_response},
              {"retries", v.retries}};
    e["multiscale_score"] = v.multiscale_score ? json(*v.multiscale_score) : json(nullptr);
    e["error"] = v.error ? json(*v.error) : json(nullptr);
    verified.push_back(std::move(e));
  }
  json stage1 = json::array();
  for (const auto& c : r.stage1_candidates) stage1.push_back(candidate_to_json(c));
  json finals = json::array();
  for (const auto& c : r.finals) finals.push_back(candidate_to_json(c));
  json detected_flags = json::array();
  for (bool d : r.per_gt_detected) detected_flags.push_back(d);

  json rec = {{"frame_id", r.frame_id},
              {"condition", to_string(r.condition)},
              {"tags", r.degradation_tags},
              {"tau", r.applied_threshold},
              {"adverse", r.adverse},
              {"stage1_candidates", stage1},
              {"verified", verified},
              {"finals", finals},
              {"per_gt_detected", detected_flags}};
  rec["quality_score"] = r.quality_score ? json(*r.quality_score) : json(nullptr);
  rec["aleatoric"] = r.aleatoric ? json(*r.aleatoric) : json(nullptr);
  rec["error"] = r.error ? json(*r.error) : json(nullptr);
  rec["timing"] = {{"t_preprocess_ms", r.timing.t_preprocess},
                   {"t_detect_ms", r.timing.t_detect},
                   {"t_verify_each_ms", r.timing.t_verify_each},
                   {"t_postprocess_ms", r.timing.t_postprocess},
                   {"t_total_ms", r.timing.total()}};
  return rec;
}

inline void write_audit_log(std::ostream& out, const std::vector<FrameResult>& results) {
  for (const auto& r : results) out << audit_record(r).dump() << '\n';
}

}  // namespace dvc
