#pragma once

// Subcommands behind the `dvc` executable. Each returns a process exit code:
// 0 success, 1 fatal (config, IO, invalid input), 2 partial (some frames failed).

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dvc/backends.hpp"
#include "dvc/cascade.hpp"
#include "dvc/config.hpp"
#include "dvc/dataset.hpp"
#include "dvc/grpo.hpp"
#include "dvc/http_verifier.hpp"
#include "dvc/metrics.hpp"
#include "dvc/rewards.hpp"
#include "dvc/toy_task.hpp"

namespace dvc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFatal = 1;
inline constexpr int kExitPartial = 2;

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline std::map<std::string, FrameSize> frame_sizes(const std::vector<FrameRecord>& frames) {
  std::map<std::string, FrameSize> sizes;
  for (const auto& f : frames) sizes[f.frame_id] = {f.image_width, f.image_height};
  return sizes;
}

inline std::unique_ptr<DetectorBackend> make_detector(const RunConfig& c, const std::vector<FrameRecord>& frames) {
  if (c.backend.detector_file.empty()) throw std::runtime_error("backend.detector_file is not set");
  const auto& p = c.backend.detector_file;
  return std::make_unique<ReplayDetector>(read_file(p), p, frame_sizes(frames));
}

inline ToyVerifierPolicy load_policy(const std::string& path) {
  const auto ck = checkpoint_from_string(read_file(path));
  return ToyVerifierPolicy(VerifierFeatureMap{}, ck.theta);
}

// Trains the toy policy from the config when no checkpoint is given.
inline ToyVerifierPolicy policy_for(const RunConfig& c) {
  if (!c.backend.policy_checkpoint.empty()) return load_policy(c.backend.policy_checkpoint);
  auto policy = make_toy_policy();
  train(policy, make_toy_task(c.toy.inputs, c.toy.task_seed), c.train, c.rewards, c.seed);
  return policy;
}

inline std::unique_ptr<VerifierBackend> make_verifier(const RunConfig& c) {
  switch (c.backend.verifier) {
    case VerifierKind::kReplay: {
      if (c.backend.verifier_file.empty()) throw std::runtime_error("backend.verifier_file is not set");
      return std::make_unique<ReplayVerifier>(read_file(c.backend.verifier_file), c.backend.verifier_file);
    }
    case VerifierKind::kHttp: return std::make_unique<HttpVerifier>(c.http_options());
    case VerifierKind::kOracle: return std::make_unique<OracleVerifier>(c.cascade.tau_iou);
    case VerifierKind::kPolicy: return std::make_unique<PolicyVerifier>(policy_for(c));
  }
  throw std::logic_error("unhandled verifier kind");
}

inline std::string ndjson_with_header(const json& header, const std::vector<json>& records) {
  std::string s = json{{"provenance", header}}.dump() + "\n";
  for (const auto& r : records) s += r.dump() + "\n";
  return s;
}

}  // namespace detail

struct RunArtifacts {
  DatasetRun run;
  StratifiedReport report;
};

/// Loads the dataset, runs the cascade and writes audit.jsonl, report.json,
/// report.txt, strata.csv and latency.json into config.out.
inline int cmd_run(const RunConfig& config, std::ostream& log, RunArtifacts* artifacts = nullptr) {
  std::vector<FrameRecord> frames;
  std::unique_ptr<DetectorBackend> detector;
  std::unique_ptr<VerifierBackend> verifier;
  try {
    config.validate();
    if (config.dataset.empty()) throw std::runtime_error("no dataset given");
    if (!std::filesystem::exists(config.dataset)) throw std::runtime_error("dataset not found: " + config.dataset);
    frames = load_dataset(config.dataset);
    detector = detail::make_detector(config, frames);
    verifier = detail::make_verifier(config);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }

  RunArtifacts a;
  a.run = run_dataset(frames, *detector, *verifier, config.cascade, config.workers);
  if (auto* replay = dynamic_cast<ReplayDetector*>(detector.get())) {
    for (const auto& w : replay->warnings()) log << "warning: " << w << '\n';
  }
  a.report = build_report({{"cascade", a.run.results}}, config.cascade.tau_iou);

  try {
    const std::filesystem::path out(config.out);
    std::filesystem::create_directories(out);
    const json header = provenance(config);
    std::vector<json> audit;
    for (const auto& r : a.run.results) audit.push_back(audit_record(r));
    detail::write_text(out / "audit.jsonl", detail::ndjson_with_header(header, audit));
    json report = report_to_json(a.report, false);
    report["provenance"] = header;
    detail::write_text(out / "report.json", report.dump(2) + "\n");
    detail::write_text(out / "report.txt", provenance_comment(config) + "\n" + report_to_table(a.report));
    detail::write_text(out / "strata.csv", provenance_comment(config) + "\n" + report_to_csv(a.report));
    json latency = json::array();
    for (const auto& c : a.report.configurations) {
      latency.push_back({{"configuration", c.name},
                         {"frames", c.latency.frames},
                         {"mean_ms", c.latency.mean_ms},
                         {"p95_ms", c.latency.p95_ms}});
    }
    detail::write_text(out / "latency.json", json{{"provenance", header}, {"latency", latency}}.dump(2) + "\n");
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }

  for (const auto& id : a.run.failed_frames) log << "frame failed: " << id << '\n';
  const int status = a.run.status == RunStatus::kPartial ? kExitPartial : kExitOk;
  if (artifacts) *artifacts = std::move(a);
  return status;
}

// ---------------------------------------------------------------------------
// Batch reward scoring

struct ScoreSummary {
  std::size_t records = 0;
  std::map<std::string, std::pair<double, std::size_t>> by_stratum;  // sum, count of r_total
};

/// Scores one detection response per line ({"frame_id", "response"}) against
/// the annotation file. Writes one JSON record per line, then a summary line
/// with mean r_total per stratum. Bad lines score r_format 0.
inline int cmd_score(const std::string& responses_path, const std::string& annotations_path,
                     const RewardWeights& weights, std::ostream& out, std::ostream& log,
                     const std::optional<json>& header = std::nullopt) {
  std::map<std::string, FrameRecord> frames;
  std::string text;
  try {
    weights.validate();
    for (auto& f : load_annotations(annotations_path)) frames.emplace(f.frame_id, std::move(f));
    text = read_file(responses_path);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }

  std::vector<json> records;
  std::map<std::string, std::pair<double, std::size_t>> strata;
  auto add = [&](const std::string& key, double r) {
    strata[key].first += r;
    strata[key].second += 1;
  };
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    json rec = {{"line", line_no}};
    const FrameRecord* frame = nullptr;
    std::string response;
    try {
      const json j = json::parse(line);
      rec["frame_id"] = j.at("frame_id").get<std::string>();
      const auto it = frames.find(rec["frame_id"].get<std::string>());
      if (it == frames.end()) throw std::runtime_error("unknown frame_id");
      frame = &it->second;
      response = j.at("response").get<std::string>();
    } catch (const std::exception& e) {
      rec["error"] = e.what();
    }
    RewardBreakdown b;
    if (frame) {
      b = reward_total(response, frame->ground_truths, frame->image_width, frame->image_height, weights);
    }
    rec["r_iou"] = b.r_iou;
    rec["r_conf"] = b.r_conf;
    rec["r_format"] = b.r_format;
    rec["r_total"] = b.r_total;
    rec["matches"] = b.matches;
    rec["predictions"] = b.predictions;
    rec["false_negatives"] = b.false_negatives;
    add("all", b.r_total);
    if (frame) {
      add("condition:" + to_string(frame->condition), b.r_total);
      for (const auto& t : frame->degradation_tags) add("tag:" + t, b.r_total);
    } else {
      add("unscored", b.r_total);
    }
    records.push_back(std::move(rec));
  }
  if (records.empty()) return kExitOk;

  if (header) out << json{{"provenance", *header}}.dump() << '\n';
  for (const auto& r : records) out << r.dump() << '\n';
  json summary = json::object();
  for (const auto& [k, v] : strata) summary[k] = {{"mean_r_total", v.first / static_cast<double>(v.second)}, {"n", v.second}};
  out << json{{"summary", summary}}.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Toy GRPO training

/// Trains the toy verifier policy; writes train_report.jsonl and policy.ckpt
/// into config.out. `resume` continues from a checkpoint's step counter.
inline int cmd_train(const RunConfig& config, const std::optional<std::string>& resume, std::ostream& log,
                     TrainingReport* result = nullptr) {
  ToyVerifierPolicy policy = make_toy_policy();
  TrainOptions options;
  std::vector<ToyFrame> frames, heldout;
  try {
    config.validate();
    frames = make_toy_task(config.toy.inputs, config.toy.task_seed);
    heldout = make_toy_task(config.toy.heldout_inputs, config.toy.heldout_seed);
    if (resume) {
      const auto ck = checkpoint_from_string(read_file(*resume));
      policy.set_parameters(ck.theta);
      options.start_step = ck.step;
      options.start_difficulty = ck.difficulty;
    }
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }

  const auto report = train(policy, frames, config.train, config.rewards, config.seed + options.start_step, options);

  std::vector<json> lines;
  for (const auto& s : report.steps) lines.push_back(step_record_to_json(s));
  lines.push_back({{"final",
                    {{"next_step", report.next_step()},
                     {"expected_reward", report.final_expected_reward},
                     {"difficulty", report.final_difficulty},
                     {"heldout_recall", expected_recall(policy, heldout)},
                     {"heldout_hard_recall", expected_recall(policy, heldout, true)},
                     {"aborted", report.aborted}}}});
  try {
    const std::filesystem::path out(config.out);
    std::filesystem::create_directories(out);
    json header = provenance(config);
    header["start_step"] = report.start_step;
    detail::write_text(out / "train_report.jsonl", detail::ndjson_with_header(header, lines));
    // On abort the policy still holds the last good parameters.
    detail::write_text(out / "policy.ckpt",
                       checkpoint_to_string({report.next_step(), report.final_difficulty, policy.parameters()}));
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }
  if (result) *result = report;
  if (report.aborted) {
    log << "error: training aborted: " << report.message << '\n';
    return kExitFatal;
  }
  log << "trained to step " << report.next_step() << ", expected reward " << report.final_expected_reward << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Ablation

/// baseline       detector only at tau_high
/// fixed          cascade with tau_high on every frame
/// adaptive       cascade with the quality-driven threshold
/// adaptive+grpo  adaptive cascade with the trained toy policy as verifier
inline RunConfig variant_config(const RunConfig& base, const std::string& name) {
  RunConfig c = base;
  if (name == "baseline") {
    c.cascade.verify = false;
    c.cascade.fixed_threshold = c.cascade.policy.tau_high();
  } else if (name == "fixed") {
    c.cascade.fixed_threshold = c.cascade.policy.tau_high();
  } else if (name == "adaptive") {
    c.cascade.fixed_threshold.reset();
  } else if (name == "adaptive+grpo") {
    c.cascade.fixed_threshold.reset();
    c.backend.verifier = VerifierKind::kPolicy;
  } else {
    throw std::invalid_argument("unknown variant: " + name);
  }
  return c;
}

struct AblationResult {
  std::vector<AblationLine> lines;
  StratifiedReport report;
};

inline int cmd_ablate(const RunConfig& config, const std::vector<std::string>& variants, std::ostream& out,
                      std::ostream& log, AblationResult* result = nullptr) {
  if (variants.size() < 2) {
    log << "error: an ablation needs at least two variants (baseline first)\n";
    return kExitFatal;
  }
  std::vector<FrameRecord> frames;
  std::unique_ptr<DetectorBackend> detector;
  try {
    config.validate();
    if (!std::filesystem::exists(config.dataset)) throw std::runtime_error("dataset not found: " + config.dataset);
    frames = load_dataset(config.dataset);
    detector = detail::make_detector(config, frames);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }

  std::vector<AblationRow> rows;
  std::vector<ConfigurationRun> runs;
  for (const auto& name : variants) {
    try {
      const RunConfig vc = variant_config(config, name);
      auto verifier = detail::make_verifier(vc);
      auto run = run_dataset(frames, *detector, *verifier, vc.cascade, vc.workers);
      const auto m = metric_triple(run.results, vc.cascade.tau_iou);
      AblationRow row{name, percent_tenths(m.precision) / 10.0, percent_tenths(m.recall) / 10.0, std::nullopt};
      if (!run.failed_frames.empty()) log << name << ": " << run.failed_frames.size() << " frame(s) failed\n";
      rows.push_back(row);
      runs.push_back({name, std::move(run.results)});
    } catch (const std::exception& e) {
      rows.push_back({name, std::nullopt, std::nullopt, e.what()});
    }
  }
  AblationResult r;
  r.lines = ablation_table(rows);
  r.report = build_report(runs, config.cascade.tau_iou);
  out << ablation_to_text(r.lines);

  try {
    const std::filesystem::path dir(config.out);
    std::filesystem::create_directories(dir);
    json table = json::array();
    for (const auto& l : r.lines) {
      table.push_back({{"name", l.name},
                       {"precision", l.precision},
                       {"recall", l.recall},
                       {"delta_recall", l.delta_recall},
                       {"error", l.error ? json(*l.error) : json(nullptr)}});
    }
    detail::write_text(dir / "ablation.txt", provenance_comment(config) + "\n" + ablation_to_text(r.lines));
    detail::write_text(dir / "ablation.json", json{{"provenance", provenance(config)}, {"rows", table}}.dump(2) + "\n");
    json report = report_to_json(r.report, false);
    report["provenance"] = provenance(config);
    detail::write_text(dir / "ablation_report.json", report.dump(2) + "\n");
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFatal;
  }
  bool any_failed = false;
  for (const auto& l : r.lines) any_failed = any_failed || l.error.has_value();
  if (result) *result = std::move(r);
  return any_failed ? kExitPartial : kExitOk;
}

}  // namespace dvc
