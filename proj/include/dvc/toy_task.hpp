#pragma once

// Desk-scale stand-in for the verifier VLM: a linear-softmax policy that,
// for each candidate box of a synthetic frame, picks {Yes, No} x a confidence
// on the 0.00..1.00 grid (step 0.05). The Yes candidates form a detection
// response that is scored with reward_total.
//
// Candidates carry one scalar of visual evidence. Clear positives and clear
// negatives have strong evidence; hard positives and hard negatives share the
// same weak-evidence distribution, so only the reward's FN weighting decides
// how the policy treats them.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc/backends.hpp"
#include "dvc/geometry.hpp"
#include "dvc/grpo.hpp"
#include "dvc/parallel.hpp"
#include "dvc/protocol.hpp"
#include "dvc/rewards.hpp"

namespace dvc {

// clean < mild < occluded < extreme
inline int difficulty_key(const std::set<std::string>& tags) {
  static const std::set<std::string> occluding{"mucus", "stool", "bubbles", "occlusion"};
  if (tags.count("extreme")) return 3;
  for (const auto& t : tags) {
    if (occluding.count(t)) return 2;
  }
  return tags.empty() ? 0 : 1;
}

inline constexpr std::size_t kConfidenceLevels = 21;
inline constexpr std::size_t kToyActions = 2 * kConfidenceLevels;

struct ToyAction {
  Decision decision = Decision::kNo;
  double confidence = 0.0;
};

// Actions [0, 21) are Yes at confidence a/20; [21, 42) are No.
inline ToyAction decode_toy_action(std::size_t a) {
  if (a >= kToyActions) throw std::out_of_range("toy action out of range");
  const bool yes = a < kConfidenceLevels;
  const std::size_t level = yes ? a : a - kConfidenceLevels;
  return {yes ? Decision::kYes : Decision::kNo, static_cast<double>(level) / 20.0};
}

inline std::size_t encode_toy_action(Decision d, std::size_t level) {
  if (level >= kConfidenceLevels) throw std::out_of_range("confidence level out of range");
  return d == Decision::kYes ? level : kConfidenceLevels + level;
}

// phi(x, a) = one block per decision holding x (x) (1, c, c^2).
class VerifierFeatureMap {
 public:
  using Input = std::array<double, 2>;  // [bias, evidence]
  static constexpr std::size_t kBlock = 2 * 3;

  std::size_t num_actions() const { return kToyActions; }
  std::size_t dim() const { return 2 * kBlock; }
  void features(const Input& x, std::size_t a, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    const auto act = decode_toy_action(a);
    const std::size_t base = act.decision == Decision::kYes ? 0 : kBlock;
    const double c = act.confidence;
    const double powers[3] = {1.0, c, c * c};
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t p = 0; p < 3; ++p) out[base + i * 3 + p] = x[i] * powers[p];
    }
  }
};

using ToyVerifierPolicy = LinearSoftmaxPolicy<VerifierFeatureMap>;

inline ToyVerifierPolicy make_toy_policy() { return ToyVerifierPolicy(VerifierFeatureMap{}); }

struct ToyCandidate {
  BoundingBox box;
  double evidence = 0.0;
  bool positive = false;
  bool hard = false;

  VerifierFeatureMap::Input input() const { return {1.0, evidence}; }
};

struct ToyFrame {
  std::string id;
  double width = 500.0;
  double height = 500.0;
  std::set<std::string> tags;
  std::vector<BoundingBox> ground_truths;
  std::vector<ToyCandidate> candidates;

  int difficulty() const { return difficulty_key(tags); }
};

/// n frames cycling clean / mild / occluded / extreme. Every box sits in its
/// own quadrant, so candidates never compete for a ground truth.
inline std::vector<ToyFrame> make_toy_task(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto integer = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  enum Kind { kClearPos, kClearNeg, kHardPos, kHardNeg };
  static const std::vector<std::vector<Kind>> layouts{
      {kClearPos, kClearNeg},
      {kClearPos, kHardNeg},
      {kClearPos, kHardPos, kHardNeg},
      {kClearPos, kHardPos, kHardNeg},
  };
  static const std::vector<std::set<std::string>> tag_sets{{}, {"dim"}, {"mucus"}, {"extreme", "bubbles"}};

  std::vector<ToyFrame> frames;
  for (std::size_t i = 0; i < n; ++i) {
    ToyFrame f;
    f.id = "toy" + std::to_string(i);
    f.tags = tag_sets[i % 4];
    std::array<int, 4> quadrants{0, 1, 2, 3};
    std::shuffle(quadrants.begin(), quadrants.end(), rng);
    const auto& layout = layouts[i % 4];
    for (std::size_t k = 0; k < layout.size(); ++k) {
      const int q = quadrants[k];
      const int size = integer(60, 100);
      const int x0 = (q % 2) * 250 + integer(20, 230 - size);
      const int y0 = (q / 2) * 250 + integer(20, 230 - size);
      BoundingBox box{double(x0), double(y0), double(x0 + size), double(y0 + size)};
      ToyCandidate c;
      c.positive = layout[k] == kClearPos || layout[k] == kHardPos;
      c.hard = layout[k] == kHardPos || layout[k] == kHardNeg;
      if (c.positive) {
        f.ground_truths.push_back(box);
        const double dx = integer(-6, 6), dy = integer(-6, 6);
        box = {box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy};
      }
      c.box = box;
      switch (layout[k]) {
        case kClearPos: c.evidence = uniform(0.6, 1.0); break;
        case kClearNeg: c.evidence = uniform(-1.0, -0.6); break;
        default: c.evidence = uniform(-0.15, 0.15); break;
      }
      f.candidates.push_back(c);
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

/// Detection response listing the candidates answered Yes.
inline std::string toy_response(const ToyFrame& frame, const std::vector<std::size_t>& actions) {
  DetectionResponse r;
  r.think_text = "toy policy";
  for (std::size_t k = 0; k < frame.candidates.size(); ++k) {
    const auto act = decode_toy_action(actions[k]);
    if (act.decision == Decision::kYes) {
      r.items.push_back({normalize_to_grid(frame.candidates[k].box, frame.width, frame.height), act.confidence});
    }
  }
  return render_detection_response(r);
}

struct CandidateMarginal {
  double p_yes = 0.0;
  double mean_conf_given_yes = 0.0;
};

inline CandidateMarginal candidate_marginal(const ToyVerifierPolicy& policy, const ToyCandidate& c) {
  const auto p = policy.probabilities(c.input());
  CandidateMarginal m;
  double weighted = 0.0;
  for (std::size_t a = 0; a < kConfidenceLevels; ++a) {
    m.p_yes += p[a];
    weighted += p[a] * decode_toy_action(a).confidence;
  }
  m.mean_conf_given_yes = m.p_yes > 0.0 ? weighted / m.p_yes : 0.0;
  return m;
}

/// Exact expected reward of the policy on one frame. Enumerates Yes/No
/// patterns; within a pattern r_conf is linear in each confidence, and
/// candidates never share a ground truth, so the mean confidence stands in.
inline double expected_reward(const ToyVerifierPolicy& policy, const ToyFrame& frame, const RewardWeights& w) {
  const std::size_t k = frame.candidates.size();
  std::vector<CandidateMarginal> m;
  for (const auto& c : frame.candidates) m.push_back(candidate_marginal(policy, c));
  double total = 0.0;
  for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
    double p = 1.0;
    std::vector<Candidate> preds;
    for (std::size_t i = 0; i < k; ++i) {
      if (mask & (1u << i)) {
        p *= m[i].p_yes;
        preds.push_back({frame.candidates[i].box, std::clamp(m[i].mean_conf_given_yes, 0.0, 1.0)});
      } else {
        p *= 1.0 - m[i].p_yes;
      }
    }
    if (p == 0.0) continue;
    total += p * reward_from_predictions(preds, frame.ground_truths, true, w).r_total;
  }
  return total;
}

inline double expected_reward(const ToyVerifierPolicy& policy, const std::vector<ToyFrame>& frames,
                              const RewardWeights& w) {
  if (frames.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : frames) s += expected_reward(policy, f, w);
  return s / static_cast<double>(frames.size());
}

/// Mean P(Yes) over positive candidates (optionally only the hard ones).
inline double expected_recall(const ToyVerifierPolicy& policy, const std::vector<ToyFrame>& frames,
                              bool hard_only = false) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& f : frames) {
    for (const auto& c : f.candidates) {
      if (!c.positive || (hard_only && !c.hard)) continue;
      s += candidate_marginal(policy, c).p_yes;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Supervised warm start: gradient ascent on the log-likelihood of
/// (Yes, 1.00) for positives and (No, 1.00) for negatives.
inline void warm_start(ToyVerifierPolicy& policy, const std::vector<ToyFrame>& frames, std::size_t steps,
                       double learning_rate) {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.candidates.size();
  if (n == 0) return;
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<double> grad(policy.dim(), 0.0);
    for (const auto& f : frames) {
      for (const auto& c : f.candidates) {
        const auto target = encode_toy_action(c.positive ? Decision::kYes : Decision::kNo, kConfidenceLevels - 1);
        policy.accumulate_grad_log_prob(c.input(), target, 1.0 / static_cast<double>(n), grad);
      }
    }
    auto theta = policy.parameters();
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] += learning_rate * grad[j];
    policy.set_parameters(std::move(theta));
  }
}

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
  std::size_t step = 0;
  double mean_reward = 0.0;      // sampled, over the groups used for the update
  double expected_reward = 0.0;  // exact, over every training frame, before the update
  double accuracy = 0.0;
  double difficulty = 0.0;
  double dropout = 0.0;
  std::size_t active_inputs = 0;
  StepDiagnostics diagnostics;
};

struct TrainingReport {
  std::size_t start_step = 0;
  std::vector<StepRecord> steps;
  std::vector<double> theta;
  double final_expected_reward = 0.0;
  double final_difficulty = 0.0;
  bool aborted = false;
  std::string message;

  std::size_t next_step() const { return start_step + steps.size(); }
};

struct TrainOptions {
  std::size_t start_step = 0;
  std::optional<double> start_difficulty;  // resume; defaults to the schedule's initial value
  std::size_t scoring_workers = 1;
};

using ToyGroup = PolicyGroup<VerifierFeatureMap::Input>;

/// Seeded GRPO training. Inputs are visited in difficulty order; with gating
/// on, only inputs whose difficulty key is within the current curriculum
/// difficulty contribute to a step.
inline TrainingReport train(ToyVerifierPolicy& policy, const std::vector<ToyFrame>& frames,
                            const TrainSchedule& schedule, const RewardWeights& weights, std::uint64_t seed,
                            const TrainOptions& options = {}) {
  schedule.validate();
  weights.validate();
  if (frames.empty()) throw std::invalid_argument("training needs at least one input");

  std::vector<const ToyFrame*> ordered;
  for (const auto& f : frames) ordered.push_back(&f);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ToyFrame* a, const ToyFrame* b) { return a->difficulty() < b->difficulty(); });

  if (options.start_step == 0) warm_start(policy, frames, schedule.warm_start_steps, schedule.warm_start_learning_rate);

  std::mt19937_64 rng(seed);
  TrainingReport report;
  report.start_step = options.start_step;
  double difficulty = options.start_difficulty.value_or(schedule.initial_difficulty);
  const std::size_t G = schedule.group_size;

  for (std::size_t s = 0; s < schedule.steps; ++s) {
    const std::size_t t = options.start_step + s;
    StepRecord rec;
    rec.step = t;
    rec.difficulty = difficulty;
    rec.dropout = dropout_rate(static_cast<double>(t), schedule.dropout_p_max, schedule.dropout_decay);
    rec.expected_reward = expected_reward(policy, frames, weights);

    std::vector<const ToyFrame*> active;
    for (const ToyFrame* f : ordered) {
      if (!schedule.curriculum_gating || f->difficulty() <= difficulty + 1e-12) active.push_back(f);
    }
    if (active.empty()) active.push_back(ordered.front());
    rec.active_inputs = active.size();

    const auto mask = dropout_mask(policy.dim(), rec.dropout, rng);

    // Sampling is sequential on the one generator; scoring may fan out.
    std::vector<ToyGroup> groups(active.size());
    std::vector<std::vector<std::size_t>> actions(active.size() * G);
    for (std::size_t i = 0; i < active.size(); ++i) {
      groups[i].input_id = active[i]->id;
      groups[i].samples.resize(G);
      for (std::size_t g = 0; g < G; ++g) {
        auto& sample = groups[i].samples[g];
        for (const auto& c : active[i]->candidates) {
          const std::size_t a = policy.sample(c.input(), rng, mask);
          sample.steps.push_back({c.input(), a});
          actions[i * G + g].push_back(a);
        }
      }
    }
    parallel_for(active.size() * G, options.scoring_workers, [&](std::size_t idx) {
      const std::size_t i = idx / G, g = idx % G;
      auto& sample = groups[i].samples[g];
      sample.response = toy_response(*active[i], actions[idx]);
      sample.reward = reward_total(sample.response, active[i]->ground_truths, active[i]->width, active[i]->height,
                                   weights)
                          .r_total;
    });

    double reward_sum = 0.0;
    std::size_t correct = 0, decisions = 0;
    for (std::size_t i = 0; i < active.size(); ++i) {
      assign_advantages(groups[i]);
      for (std::size_t g = 0; g < G; ++g) {
        reward_sum += groups[i].samples[g].reward;
        const auto& acts = actions[i * G + g];
        for (std::size_t k = 0; k < acts.size(); ++k) {
          const bool yes = decode_toy_action(acts[k]).decision == Decision::kYes;
          correct += yes == active[i]->candidates[k].positive;
          ++decisions;
        }
      }
    }
    rec.mean_reward = reward_sum / static_cast<double>(active.size() * G);
    rec.accuracy = decisions ? static_cast<double>(correct) / static_cast<double>(decisions) : 0.0;

    rec.diagnostics = policy_gradient_step(policy, groups, schedule, mask);
    report.steps.push_back(rec);
    if (rec.diagnostics.aborted) {
      report.aborted = true;
      report.message = "step " + std::to_string(t) + ": " + rec.diagnostics.message;
      break;
    }
    difficulty = curriculum_step(difficulty, rec.accuracy, schedule.curriculum_eta, schedule.curriculum_threshold);
  }
  report.theta = policy.parameters();
  report.final_expected_reward = expected_reward(policy, frames, weights);
  report.final_difficulty = difficulty;
  return report;
}

inline json step_record_to_json(const StepRecord& r) {
  return json{{"step", r.step},
              {"mean_reward", r.mean_reward},
              {"expected_reward", r.expected_reward},
              {"grad_norm", r.diagnostics.grad_norm},
              {"applied_norm", r.diagnostics.applied_norm},
              {"loss_before", r.diagnostics.loss_before},
              {"loss_after", r.diagnostics.loss_after},
              {"accuracy", r.accuracy},
              {"difficulty", r.difficulty},
              {"dropout", r.dropout},
              {"active_inputs", r.active_inputs},
              {"aborted", r.diagnostics.aborted}};
}

// ---------------------------------------------------------------------------
// A trained policy behind the verifier interface. The detector confidence
// stands in for evidence (2c - 1); the verdict is the policy's marginal
// P(Yes), reported to two decimals.

class PolicyVerifier final : public VerifierBackend {
 public:
  explicit PolicyVerifier(ToyVerifierPolicy policy) : policy_(std::move(policy)) {}

  BackendInfo info() const override { return {"policy-verifier", "1"}; }

  GlobalAssessment assess_global(const FrameRecord& frame) override {
    return detail::assessment_from_metadata(frame);
  }

  VerifyReply verify(const FrameRecord&, const VerifyRequest& request) override {
    return {render_verdict_response(verdict(request.detector_confidence)), 0};
  }

  VerdictResponse verdict(double detector_confidence) const {
    ToyCandidate c;
    c.evidence = 2.0 * detector_confidence - 1.0;
    const double p = candidate_marginal(policy_, c).p_yes;
    const bool yes = p >= 0.5;
    const double conf = std::round((yes ? p : 1.0 - p) * 100.0) / 100.0;
    return {"policy", yes ? Decision::kYes : Decision::kNo, conf};
  }

 private:
  ToyVerifierPolicy policy_;
};

}  // namespace dvc
