#pragma once

// Run configuration. Serialises to a JSON object with one section per
// subsystem; relative paths are resolved against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include "dvc/cascade.hpp"
#include "dvc/dataset.hpp"
#include "dvc/grpo.hpp"
#include "dvc/http_verifier.hpp"
#include "dvc/rewards.hpp"

namespace dvc {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kConfigVersion = 1;

enum class VerifierKind { kReplay, kHttp, kOracle, kPolicy };

inline std::string to_string(VerifierKind k) {
  switch (k) {
    case VerifierKind::kReplay: return "replay";
    case VerifierKind::kHttp: return "http";
    case VerifierKind::kOracle: return "oracle";
    case VerifierKind::kPolicy: return "policy";
  }
  return "replay";
}

inline VerifierKind verifier_kind_from_string(const std::string& s) {
  if (s == "replay") return VerifierKind::kReplay;
  if (s == "http") return VerifierKind::kHttp;
  if (s == "oracle") return VerifierKind::kOracle;
  if (s == "policy") return VerifierKind::kPolicy;
  throw std::invalid_argument("unknown verifier backend: " + s);
}

struct BackendConfig {
  std::string detector_file;  // replay detector NDJSON
  VerifierKind verifier = VerifierKind::kReplay;
  std::string verifier_file;      // replay verifier NDJSON
  std::string policy_checkpoint;  // policy verifier
  std::string endpoint = "http://127.0.0.1:8080";
  int timeout_ms = 2000;
  int max_attempts = 3;
  int backoff_ms = 100;
  int max_in_flight = 4;

  friend bool operator==(const BackendConfig&, const BackendConfig&) = default;
};

struct ToyTaskConfig {
  std::size_t inputs = 16;
  std::uint64_t task_seed = 7;
  std::size_t heldout_inputs = 64;
  std::uint64_t heldout_seed = 1007;

  friend bool operator==(const ToyTaskConfig&, const ToyTaskConfig&) = default;
};

struct RunConfig {
  std::string dataset;
  BackendConfig backend;
  CascadeConfig cascade;
  RewardWeights rewards;
  TrainSchedule train;
  ToyTaskConfig toy;
  std::size_t workers = 1;
  std::uint64_t seed = 0;
  std::string out = "out";

  void validate() const {
    cascade.validate();
    rewards.validate();
    train.validate();
    if (workers < 1) throw std::invalid_argument("workers must be >= 1");
    if (backend.timeout_ms < 1 || backend.max_attempts < 1 || backend.backoff_ms < 0 || backend.max_in_flight < 1) {
      throw std::invalid_argument("invalid HTTP backend settings");
    }
    if (toy.inputs < 1) throw std::invalid_argument("toy task needs at least one input");
  }

  HttpVerifierOptions http_options() const {
    HttpVerifierOptions o;
    o.endpoint = backend.endpoint;
    o.timeout_ms = backend.timeout_ms;
    o.max_attempts = backend.max_attempts;
    o.backoff_ms = backend.backoff_ms;
    o.max_in_flight = backend.max_in_flight;
    return o;
  }
};

inline bool operator==(const CascadeConfig& a, const CascadeConfig& b) {
  return a.policy == b.policy && a.quality_weights == b.quality_weights && a.adverse_source == b.adverse_source &&
         a.adverse_quality_cutoff == b.adverse_quality_cutoff && a.fixed_threshold == b.fixed_threshold &&
         a.verify == b.verify && a.tau_conf == b.tau_conf && a.tau_iou == b.tau_iou && a.rho == b.rho &&
         a.multiscale == b.multiscale && a.acceptance == b.acceptance && a.verify_in_flight == b.verify_in_flight &&
         a.class_name == b.class_name;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  return a.dataset == b.dataset && a.backend == b.backend && a.cascade == b.cascade && a.rewards == b.rewards &&
         a.train == b.train && a.toy == b.toy && a.workers == b.workers && a.seed == b.seed && a.out == b.out;
}

inline json config_to_json(const RunConfig& c) {
  const auto& cc = c.cascade;
  const auto& p = cc.policy;
  const auto& w = cc.quality_weights;
  const auto& b = c.backend;
  const auto& r = c.rewards;
  const auto& t = c.train;
  return {
      {"version", kConfigVersion},
      {"dataset", c.dataset},
      {"backend",
       {{"detector_file", b.detector_file},
        {"verifier", to_string(b.verifier)},
        {"verifier_file", b.verifier_file},
        {"policy_checkpoint", b.policy_checkpoint},
        {"endpoint", b.endpoint},
        {"timeout_ms", b.timeout_ms},
        {"max_attempts", b.max_attempts},
        {"backoff_ms", b.backoff_ms},
        {"max_in_flight", b.max_in_flight}}},
      {"threshold",
       {{"tau_low", p.tau_low()},
        {"tau_high", p.tau_high()},
        {"q_min", p.q_min()},
        {"q_max", p.q_max()},
        {"mode", to_string(p.mode())},
        {"quality_weights", {w.illumination(), w.clarity(), w.artifacts()}},
        {"adverse_source", to_string(cc.adverse_source)},
        {"adverse_quality_cutoff", cc.adverse_quality_cutoff},
        {"fixed", cc.fixed_threshold ? json(*cc.fixed_threshold) : json(nullptr)}}},
      {"cascade",
       {{"verify", cc.verify},
        {"tau_conf", cc.tau_conf},
        {"tau_iou", cc.tau_iou},
        {"rho", cc.rho},
        {"multiscale",
         {{"enabled", cc.multiscale.enabled}, {"scales", cc.multiscale.scales}, {"weights", cc.multiscale.weights}}},
        {"acceptance", to_string(cc.acceptance)},
        {"verify_in_flight", cc.verify_in_flight},
        {"class_name", cc.class_name}}},
      {"rewards",
       {{"alpha", r.alpha},
        {"beta", r.beta},
        {"gamma", r.gamma},
        {"lambda_fn", r.lambda_fn},
        {"tau_match", r.tau_match},
        {"tau_iou", r.tau_iou},
        {"fn_mode", to_string(r.fn_mode)}}},
      {"train",
       {{"learning_rate", t.learning_rate},
        {"group_size", t.group_size},
        {"clip_norm", t.clip_norm},
        {"weight_decay", t.weight_decay},
        {"dropout_p_max", t.dropout_p_max},
        {"dropout_decay", t.dropout_decay},
        {"curriculum_eta", t.curriculum_eta},
        {"curriculum_threshold", t.curriculum_threshold},
        {"initial_difficulty", t.initial_difficulty},
        {"curriculum_gating", t.curriculum_gating},
        {"steps", t.steps},
        {"warm_start_steps", t.warm_start_steps},
        {"warm_start_learning_rate", t.warm_start_learning_rate},
        {"inputs", c.toy.inputs},
        {"task_seed", c.toy.task_seed},
        {"heldout_inputs", c.toy.heldout_inputs},
        {"heldout_seed", c.toy.heldout_seed}}},
      {"workers", c.workers},
      {"seed", c.seed},
      {"out", c.out},
  };
}

namespace detail {

// Reads j[key] into `out` when present; missing keys keep the default.
template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

/// Missing keys keep their defaults; unknown sections are rejected.
inline RunConfig config_from_json(const json& j) {
  using detail::read_opt;
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  static const std::set<std::string> known{"version", "dataset", "backend", "threshold", "cascade",
                                           "rewards", "train",   "workers", "seed",      "out"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw std::invalid_argument("unknown config key: " + k);
  }
  if (j.contains("version") && j.at("version").get<int>() != kConfigVersion) {
    throw std::invalid_argument("unsupported config version");
  }
  RunConfig c;
  read_opt(j, "dataset", c.dataset);
  if (j.contains("backend")) {
    const auto& b = j.at("backend");
    read_opt(b, "detector_file", c.backend.detector_file);
    if (b.contains("verifier")) c.backend.verifier = verifier_kind_from_string(b.at("verifier").get<std::string>());
    read_opt(b, "verifier_file", c.backend.verifier_file);
    read_opt(b, "policy_checkpoint", c.backend.policy_checkpoint);
    read_opt(b, "endpoint", c.backend.endpoint);
    read_opt(b, "timeout_ms", c.backend.timeout_ms);
    read_opt(b, "max_attempts", c.backend.max_attempts);
    read_opt(b, "backoff_ms", c.backend.backoff_ms);
    read_opt(b, "max_in_flight", c.backend.max_in_flight);
  }
  auto& cc = c.cascade;
  if (j.contains("threshold")) {
    const auto& t = j.at("threshold");
    const auto& d = cc.policy;
    cc.policy = ThresholdPolicy(t.value("tau_low", d.tau_low()), t.value("tau_high", d.tau_high()),
                                t.value("q_min", d.q_min()), t.value("q_max", d.q_max()),
                                threshold_mode_from_string(t.value("mode", to_string(d.mode()))));
    if (t.contains("quality_weights")) {
      const auto w = t.at("quality_weights").get<std::vector<double>>();
      if (w.size() != 3) throw std::invalid_argument("quality_weights needs three entries");
      cc.quality_weights = QualityWeights(w[0], w[1], w[2]);
    }
    if (t.contains("adverse_source")) {
      cc.adverse_source = adverse_source_from_string(t.at("adverse_source").get<std::string>());
    }
    read_opt(t, "adverse_quality_cutoff", cc.adverse_quality_cutoff);
    if (t.contains("fixed") && !t.at("fixed").is_null()) cc.fixed_threshold = t.at("fixed").get<double>();
  }
  if (j.contains("cascade")) {
    const auto& s = j.at("cascade");
    read_opt(s, "verify", cc.verify);
    read_opt(s, "tau_conf", cc.tau_conf);
    read_opt(s, "tau_iou", cc.tau_iou);
    read_opt(s, "rho", cc.rho);
    if (s.contains("multiscale")) {
      const auto& m = s.at("multiscale");
      read_opt(m, "enabled", cc.multiscale.enabled);
      read_opt(m, "scales", cc.multiscale.scales);
      read_opt(m, "weights", cc.multiscale.weights);
    }
    if (s.contains("acceptance")) cc.acceptance = acceptance_score_from_string(s.at("acceptance").get<std::string>());
    read_opt(s, "verify_in_flight", cc.verify_in_flight);
    read_opt(s, "class_name", cc.class_name);
  }
  if (j.contains("rewards")) {
    const auto& r = j.at("rewards");
    read_opt(r, "alpha", c.rewards.alpha);
    read_opt(r, "beta", c.rewards.beta);
    read_opt(r, "gamma", c.rewards.gamma);
    read_opt(r, "lambda_fn", c.rewards.lambda_fn);
    read_opt(r, "tau_match", c.rewards.tau_match);
    read_opt(r, "tau_iou", c.rewards.tau_iou);
    if (r.contains("fn_mode")) c.rewards.fn_mode = fn_penalty_mode_from_string(r.at("fn_mode").get<std::string>());
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    auto& s = c.train;
    read_opt(t, "learning_rate", s.learning_rate);
    read_opt(t, "group_size", s.group_size);
    read_opt(t, "clip_norm", s.clip_norm);
    read_opt(t, "weight_decay", s.weight_decay);
    read_opt(t, "dropout_p_max", s.dropout_p_max);
    read_opt(t, "dropout_decay", s.dropout_decay);
    read_opt(t, "curriculum_eta", s.curriculum_eta);
    read_opt(t, "curriculum_threshold", s.curriculum_threshold);
    read_opt(t, "initial_difficulty", s.initial_difficulty);
    read_opt(t, "curriculum_gating", s.curriculum_gating);
    read_opt(t, "steps", s.steps);
    read_opt(t, "warm_start_steps", s.warm_start_steps);
    read_opt(t, "warm_start_learning_rate", s.warm_start_learning_rate);
    read_opt(t, "inputs", c.toy.inputs);
    read_opt(t, "task_seed", c.toy.task_seed);
    read_opt(t, "heldout_inputs", c.toy.heldout_inputs);
    read_opt(t, "heldout_seed", c.toy.heldout_seed);
  }
  read_opt(j, "workers", c.workers);
  read_opt(j, "seed", c.seed);
  read_opt(j, "out", c.out);
  c.validate();
  return c;
}

/// Loads a config file; relative file paths inside it become relative to
/// the file's directory.
inline RunConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  RunConfig c = config_from_json(j);
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.dataset);
  resolve(c.backend.detector_file);
  resolve(c.backend.verifier_file);
  resolve(c.backend.policy_checkpoint);
  return c;
}

/// Hash over everything that can change results. Worker count and output
/// directory are left out, and paths count by file name only so the hash
/// does not depend on where the checkout lives.
inline std::string config_hash(const RunConfig& c) {
  RunConfig h = c;
  for (std::string* p : {&h.dataset, &h.backend.detector_file, &h.backend.verifier_file, &h.backend.policy_checkpoint}) {
    *p = std::filesystem::path(*p).filename().string();
  }
  json j = config_to_json(h);
  j.erase("workers");
  j.erase("out");
  return checksum_string(j.dump());
}

inline json provenance(const RunConfig& c) {
  return {{"tool", "dvc"}, {"version", kToolVersion}, {"config_hash", config_hash(c)}, {"seed", c.seed}};
}

inline std::string provenance_comment(const RunConfig& c) {
  return "# dvc " + std::string(kToolVersion) + " config " + config_hash(c) + " seed " + std::to_string(c.seed);
}

}  // namespace dvc
