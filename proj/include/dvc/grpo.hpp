#pragma once

// Group Relative Policy Optimization for small linear-softmax policies.
//
// A policy scores every action of a finite set with theta . (mask * phi(x, a))
// and normalises with a softmax. For each input a group of responses is
// sampled and scored; each sample's advantage is its reward standardised
// against the group (population std). One update minimises
//
//   L(theta) = -(1/S) sum_s A_s sum_{(x,a) in s} log pi(a|x) + lambda_decay |theta|^2
//
// with the gradient clipped to norm tau_clip before the learning-rate step.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvc {

template <typename M>
concept FeatureMap = requires(const M& m, const typename M::Input& x, std::size_t a, std::span<double> out) {
  { m.num_actions() } -> std::convertible_to<std::size_t>;
  { m.dim() } -> std::convertible_to<std::size_t>;
  m.features(x, a, out);
};

// Input is a plain feature vector; action a sees it in block a, so
// dim = actions * input size.
class BlockFeatureMap {
 public:
  using Input = std::vector<double>;
  BlockFeatureMap(std::size_t actions, std::size_t input_dim) : actions_(actions), input_dim_(input_dim) {}
  std::size_t num_actions() const { return actions_; }
  std::size_t dim() const { return actions_ * input_dim_; }
  void features(const Input& x, std::size_t a, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < input_dim_; ++i) out[a * input_dim_ + i] = x[i];
  }

 private:
  std::size_t actions_;
  std::size_t input_dim_;
};

template <FeatureMap Map>
class LinearSoftmaxPolicy {
 public:
  using Input = typename Map::Input;

  explicit LinearSoftmaxPolicy(Map map) : map_(std::move(map)), theta_(map_.dim(), 0.0) {}
  LinearSoftmaxPolicy(Map map, std::vector<double> theta) : map_(std::move(map)), theta_(std::move(theta)) {
    if (theta_.size() != map_.dim()) throw std::invalid_argument("parameter vector has the wrong dimension");
  }

  const Map& feature_map() const noexcept { return map_; }
  std::size_t num_actions() const { return map_.num_actions(); }
  std::size_t dim() const { return map_.dim(); }
  const std::vector<double>& parameters() const noexcept { return theta_; }
  void set_parameters(std::vector<double> theta) {
    if (theta.size() != theta_.size()) throw std::invalid_argument("parameter vector has the wrong dimension");
    theta_ = std::move(theta);
  }

  // `mask` (empty = all ones) multiplies the features elementwise.
  std::vector<double> probabilities(const Input& x, std::span<const double> mask = {}) const {
    const std::size_t n = num_actions();
    std::vector<double> logits(n);
    std::vector<double> phi(dim());
    for (std::size_t a = 0; a < n; ++a) {
      map_.features(x, a, phi);
      double s = 0.0;
      for (std::size_t j = 0; j < phi.size(); ++j) s += theta_[j] * phi[j] * (mask.empty() ? 1.0 : mask[j]);
      logits[a] = s;
    }
    const double hi = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) z += l = std::exp(l - hi);
    for (double& l : logits) l /= z;
    return logits;
  }

  double log_prob(const Input& x, std::size_t action, std::span<const double> mask = {}) const {
    return std::log(probabilities(x, mask)[action]);
  }

  // grad += weight * d/dtheta log pi(action | x)
  void accumulate_grad_log_prob(const Input& x, std::size_t action, double weight, std::span<double> grad,
                                std::span<const double> mask = {}) const {
    const auto p = probabilities(x, mask);
    std::vector<double> phi(dim());
    for (std::size_t a = 0; a < p.size(); ++a) {
      map_.features(x, a, phi);
      const double coef = weight * ((a == action ? 1.0 : 0.0) - p[a]);
      if (coef == 0.0) continue;
      for (std::size_t j = 0; j < phi.size(); ++j) grad[j] += coef * phi[j] * (mask.empty() ? 1.0 : mask[j]);
    }
  }

  template <typename Rng>
  std::size_t sample(const Input& x, Rng& rng, std::span<const double> mask = {}) const {
    const auto p = probabilities(x, mask);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) {
      acc += p[a];
      if (u < acc) return a;
    }
    return p.size() - 1;
  }

  std::size_t mode(const Input& x) const {
    const auto p = probabilities(x);
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }

 private:
  Map map_;
  std::vector<double> theta_;
};

// ---------------------------------------------------------------------------
// Groups and advantages

template <typename Input>
struct ActionStep {
  Input input;
  std::size_t action = 0;
};

template <typename Input>
struct PolicySample {
  std::vector<ActionStep<Input>> steps;  // one sampled response; log-prob sums over steps
  std::string response;
  double reward = 0.0;
  double advantage = 0.0;
};

template <typename Input>
struct PolicyGroup {
  std::string input_id;
  std::vector<PolicySample<Input>> samples;
  std::size_t group_size() const noexcept { return samples.size(); }
};

/// (r - mean) / population std; all zeros when the std is below 1e-12.
inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("group advantages need a group of size >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < 1e-12) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

template <typename Input>
void assign_advantages(PolicyGroup<Input>& group) {
  std::vector<double> rewards;
  for (const auto& s : group.samples) rewards.push_back(s.reward);
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < adv.size(); ++i) group.samples[i].advantage = adv[i];
}

// ---------------------------------------------------------------------------
// Schedules

struct TrainSchedule {
  double learning_rate = 0.1;
  std::size_t group_size = 4;
  double clip_norm = 1.0;
  double weight_decay = 1e-4;
  double dropout_p_max = 0.1;
  double dropout_decay = 0.02;
  double curriculum_eta = 1.0;
  double curriculum_threshold = 0.6;
  double initial_difficulty = 0.0;
  bool curriculum_gating = true;
  std::size_t steps = 200;
  std::size_t warm_start_steps = 0;
  double warm_start_learning_rate = 0.1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(dropout_p_max >= 0.0 && dropout_p_max < 1.0)) throw std::invalid_argument("dropout_p_max must lie in [0,1)");
    if (!(dropout_decay >= 0.0)) throw std::invalid_argument("dropout_decay must be >= 0");
    if (!(curriculum_eta > 0.0)) throw std::invalid_argument("curriculum_eta must be positive");
    if (!(initial_difficulty >= 0.0 && initial_difficulty <= 3.0)) {
      throw std::invalid_argument("initial_difficulty must lie in [0,3]");
    }
    if (!(warm_start_learning_rate > 0.0)) throw std::invalid_argument("warm_start_learning_rate must be positive");
  }

  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

inline double dropout_rate(double step, double p_max, double decay) {
  if (step < 0.0) throw std::invalid_argument("step must be >= 0");
  return p_max * std::exp(-decay * step);
}

inline constexpr double kMaxDifficulty = 3.0;

inline double curriculum_step(double difficulty, double accuracy, double eta, double threshold) {
  return std::clamp(difficulty + eta * std::max(0.0, accuracy - threshold), 0.0, kMaxDifficulty);
}

// Inverted dropout over feature dimensions: kept features are scaled by 1/(1-p).
template <typename Rng>
std::vector<double> dropout_mask(std::size_t dim, double rate, Rng& rng) {
  std::vector<double> mask(dim, 1.0);
  if (rate <= 0.0) return mask;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& m : mask) m = u(rng) < rate ? 0.0 : 1.0 / (1.0 - rate);
  return mask;
}

// ---------------------------------------------------------------------------
// Loss, gradient and the update step

namespace detail {

template <typename Input>
std::size_t sample_count(const std::vector<PolicyGroup<Input>>& groups) {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.samples.size();
  return n;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

template <FeatureMap Map>
double grpo_loss(const LinearSoftmaxPolicy<Map>& policy, const std::vector<PolicyGroup<typename Map::Input>>& groups,
                 double weight_decay, std::span<const double> mask = {}) {
  const std::size_t n = detail::sample_count(groups);
  double loss = 0.0;
  if (n > 0) {
    for (const auto& g : groups) {
      for (const auto& s : g.samples) {
        for (const auto& st : s.steps) loss -= s.advantage * policy.log_prob(st.input, st.action, mask);
      }
    }
    loss /= static_cast<double>(n);
  }
  double reg = 0.0;
  for (double t : policy.parameters()) reg += t * t;
  return loss + weight_decay * reg;
}

template <FeatureMap Map>
std::vector<double> grpo_gradient(const LinearSoftmaxPolicy<Map>& policy,
                                  const std::vector<PolicyGroup<typename Map::Input>>& groups, double weight_decay,
                                  std::span<const double> mask = {}) {
  std::vector<double> grad(policy.dim(), 0.0);
  const std::size_t n = detail::sample_count(groups);
  if (n > 0) {
    const double scale = -1.0 / static_cast<double>(n);
    for (const auto& g : groups) {
      for (const auto& s : g.samples) {
        if (s.advantage == 0.0) continue;
        for (const auto& st : s.steps) policy.accumulate_grad_log_prob(st.input, st.action, scale * s.advantage, grad, mask);
      }
    }
  }
  const auto& theta = policy.parameters();
  for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += 2.0 * weight_decay * theta[j];
  return grad;
}

/// min(1, tau / |g|) * g
inline std::vector<double> clip_gradient(std::vector<double> g, double clip_norm) {
  const double norm = detail::l2_norm(g);
  if (norm > clip_norm && norm > 0.0) {
    const double f = clip_norm / norm;
    for (double& x : g) x *= f;
  }
  return g;
}

struct StepDiagnostics {
  double loss_before = 0.0;
  double loss_after = 0.0;
  double grad_norm = 0.0;     // before clipping
  double applied_norm = 0.0;  // after clipping
  bool aborted = false;
  std::string message;
};

template <FeatureMap Map>
StepDiagnostics policy_gradient_step(LinearSoftmaxPolicy<Map>& policy,
                                     const std::vector<PolicyGroup<typename Map::Input>>& groups,
                                     const TrainSchedule& schedule, std::span<const double> mask = {}) {
  StepDiagnostics d;
  d.loss_before = grpo_loss(policy, groups, schedule.weight_decay, mask);
  auto grad = grpo_gradient(policy, groups, schedule.weight_decay, mask);
  d.grad_norm = detail::l2_norm(grad);
  if (!std::isfinite(d.grad_norm) || !std::isfinite(d.loss_before)) {
    d.aborted = true;
    d.message = "non-finite gradient or loss; parameters left unchanged";
    d.loss_after = d.loss_before;
    return d;
  }
  grad = clip_gradient(std::move(grad), schedule.clip_norm);
  d.applied_norm = detail::l2_norm(grad);
  auto theta = policy.parameters();
  for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= schedule.learning_rate * grad[j];
  policy.set_parameters(std::move(theta));
  d.loss_after = grpo_loss(policy, groups, schedule.weight_decay, mask);
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints: a version header, the step counter, then theta.

inline constexpr const char* kCheckpointMagic = "dvc-policy-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::size_t step = 0;  // next step to run
  double difficulty = 0.0;
  std::vector<double> theta;
};

inline std::string checkpoint_to_string(const Checkpoint& c) {
  std::ostringstream out;
  out.precision(17);
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n'
      << "step " << c.step << '\n'
      << "difficulty " << c.difficulty << '\n'
      << "dim " << c.theta.size() << '\n';
  for (std::size_t i = 0; i < c.theta.size(); ++i) out << (i ? " " : "") << c.theta[i];
  out << '\n';
  return out.str();
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  std::istringstream in(text);
  std::string magic, key;
  int version = 0;
  Checkpoint c;
  std::size_t dim = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) throw std::runtime_error("not a policy checkpoint");
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  if (!(in >> key >> c.step) || key != "step") throw std::runtime_error("checkpoint: missing step");
  if (!(in >> key >> c.difficulty) || key != "difficulty") throw std::runtime_error("checkpoint: missing difficulty");
  if (!(in >> key >> dim) || key != "dim") throw std::runtime_error("checkpoint: missing dim");
  c.theta.resize(dim);
  for (auto& t : c.theta) {
    if (!(in >> t)) throw std::runtime_error("checkpoint: truncated parameters");
  }
  return c;
}

}  // namespace dvc
