#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <map>
#include <random>
#include <set>

#include "dvc/cascade.hpp"
#include "support/oracles.hpp"

using namespace dvc;

namespace {

const std::string kFixtures = std::string(DVC_SOURCE_DIR) + "/tests/fixtures/golden/";

class ScriptedDetector final : public DetectorBackend {
 public:
  std::map<std::string, std::vector<Candidate>> out;
  std::set<std::string> failing;
  BackendInfo info() const override { return {"scripted", "0"}; }
  std::vector<Candidate> propose(const FrameRecord& f) override {
    if (failing.count(f.frame_id)) throw BackendError("detector down");
    const auto it = out.find(f.frame_id);
    return it == out.end() ? std::vector<Candidate>{} : it->second;
  }
};

using VerdictFn = std::function<std::string(const FrameRecord&, const VerifyRequest&)>;

class ScriptedVerifier final : public VerifierBackend {
 public:
  explicit ScriptedVerifier(VerdictFn fn, bool adverse = false) : fn_(std::move(fn)), adverse_(adverse) {}
  BackendInfo info() const override { return {"scripted", "0"}; }
  GlobalAssessment assess_global(const FrameRecord&) override { return {adverse_, std::nullopt, std::nullopt}; }
  VerifyReply verify(const FrameRecord& f, const VerifyRequest& r) override {
    ++calls;
    return {fn_(f, r), 0};
  }
  std::atomic<int> calls{0};

 private:
  VerdictFn fn_;
  bool adverse_;
};

std::string verdict(const char* d, const char* c) {
  return std::string("<think>t</think><answer>[{'Decision': '") + d + "', 'Confidence': " + c + "}]</answer>";
}

FrameRecord frame(const std::string& id, Condition cond, std::vector<BoundingBox> gts = {}) {
  FrameRecord f;
  f.frame_id = id;
  f.image_width = 1000;
  f.image_height = 1000;
  f.condition = cond;
  f.ground_truths = std::move(gts);
  return f;
}

json strip_timing(json rec) {
  rec.erase("timing");
  return rec;
}

}  // namespace

TEST(Stage1, DegradedFrameUsesLowThreshold) {
  ScriptedDetector det;
  const std::vector<Candidate> raw{{{0, 0, 10, 10}, 0.25}, {{20, 20, 30, 30}, 0.45}, {{40, 40, 50, 50}, 0.15}};
  det.out["a"] = raw;
  ScriptedVerifier adverse([](auto&, auto&) { return std::string(); }, true);
  const auto s1 = stage1(frame("a", Condition::kDegraded), det, adverse, CascadeConfig{});
  EXPECT_DOUBLE_EQ(s1.threshold.tau, 0.2);
  ASSERT_EQ(s1.candidates.size(), 2u);
  EXPECT_DOUBLE_EQ(s1.candidates[0].confidence, 0.45);
  EXPECT_DOUBLE_EQ(s1.candidates[1].confidence, 0.25);
}

TEST(Stage1, CleanFrameKeepsNothingBelowHigh) {
  ScriptedDetector det;
  det.out["a"] = {{{0, 0, 10, 10}, 0.25}, {{20, 20, 30, 30}, 0.45}, {{40, 40, 50, 50}, 0.15}};
  ScriptedVerifier clean([](auto&, auto&) { return std::string(); }, false);
  const auto s1 = stage1(frame("a", Condition::kClean), det, clean, CascadeConfig{});
  EXPECT_DOUBLE_EQ(s1.threshold.tau, 0.5);
  EXPECT_TRUE(s1.candidates.empty());
}

TEST(Stage1, EmptyDetectorOutput) {
  ScriptedDetector det;
  ScriptedVerifier v([](auto&, auto&) { return std::string(); });
  EXPECT_TRUE(stage1(frame("a", Condition::kClean), det, v, CascadeConfig{}).candidates.empty());
}

TEST(Stage1, TiesKeepDetectorOrder) {
  const std::vector<Candidate> raw{{{0, 0, 1, 1}, 0.6}, {{2, 2, 3, 3}, 0.9}, {{4, 4, 5, 5}, 0.6}};
  const auto kept = threshold_candidates(raw, 0.5);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0], raw[1]);
  EXPECT_EQ(kept[1], raw[0]);
  EXPECT_EQ(kept[2], raw[2]);
}

TEST(Stage2, AcceptsYesAboveTauConf) {
  ScriptedVerifier v([](auto&, auto&) { return verdict("Yes", "0.80"); });
  const auto out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, CascadeConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(out[0].accepted);
  EXPECT_EQ(out[0].decision, 1);
  EXPECT_DOUBLE_EQ(out[0].verdict_confidence, 0.8);
}

TEST(Stage2, RejectsConfidentNo) {
  ScriptedVerifier v([](auto&, auto&) { return verdict("No", "0.99"); });
  const auto out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, CascadeConfig{});
  EXPECT_FALSE(out[0].accepted);
  EXPECT_EQ(out[0].decision, 0);
}

TEST(Stage2, RejectsYesBelowTauConf) {
  ScriptedVerifier v([](auto&, auto&) { return verdict("Yes", "0.69"); });
  EXPECT_FALSE(stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, CascadeConfig{})[0].accepted);
}

TEST(Stage2, EqualScaleScoresGiveThatScore) {
  ScriptedVerifier v([](auto&, auto&) { return verdict("Yes", "0.75"); });
  const auto out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, CascadeConfig{});
  ASSERT_TRUE(out[0].multiscale_score);
  EXPECT_NEAR(*out[0].multiscale_score, 0.75, 1e-12);
  EXPECT_EQ(v.calls.load(), 3);
}

TEST(Stage2, MultiscaleWeightsPerScale) {
  ScriptedVerifier v([](auto&, const VerifyRequest& r) {
    if (r.scale < 1.0) return verdict("Yes", "0.50");
    if (r.scale > 1.0) return verdict("No", "0.60");
    return verdict("Yes", "0.90");
  });
  const auto out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, CascadeConfig{});
  // P(Yes) per scale: 0.5, 0.9, 0.4
  EXPECT_NEAR(*out[0].multiscale_score, 0.2 * 0.5 + 0.6 * 0.9 + 0.2 * 0.4, 1e-12);
  EXPECT_TRUE(out[0].accepted);

  CascadeConfig ms;
  ms.acceptance = AcceptanceScore::kMultiScale;
  ms.tau_conf = 0.8;
  EXPECT_FALSE(stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, v, ms)[0].accepted);
}

TEST(Stage2, CropAndContextHandedToBackend) {
  std::vector<VerifyRequest> seen;
  std::mutex mu;
  ScriptedVerifier v([&](auto&, const VerifyRequest& r) {
    std::lock_guard lock(mu);
    seen.push_back(r);
    return verdict("Yes", "0.90");
  });
  CascadeConfig cfg;
  cfg.multiscale.enabled = false;
  const auto out = stage2(frame("a", Condition::kClean), {{{100, 100, 200, 200}, 0.9}}, v, cfg);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0].crop, (BoundingBox{100, 100, 200, 200}));
  EXPECT_EQ(seen[0].context_crop, (BoundingBox{75, 75, 225, 225}));
  EXPECT_EQ(seen[0].prompt, render_verify_prompt("polyp"));
  EXPECT_FALSE(out[0].multiscale_score);
}

TEST(Stage2, FailClosedOnErrorsAndGarbage) {
  ScriptedVerifier thrower([](auto&, auto&) -> std::string { throw BackendError("timeout", 2); });
  auto out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, thrower, CascadeConfig{});
  EXPECT_FALSE(out[0].accepted);
  ASSERT_TRUE(out[0].error);
  EXPECT_EQ(out[0].retries, 2);

  ScriptedVerifier garbage([](auto&, auto&) { return std::string("<answer>Yes</answer>"); });
  out = stage2(frame("a", Condition::kClean), {{{10, 10, 20, 20}, 0.9}}, garbage, CascadeConfig{});
  EXPECT_FALSE(out[0].accepted);
  EXPECT_TRUE(out[0].error);
}

TEST(Evaluate, PerGroundTruthFlags) {
  FrameResult r;
  r.ground_truths = {{0, 0, 10, 10}};
  EXPECT_EQ(evaluate_frame(r, 0.3), std::vector<bool>{false});
  r.finals = {{{0, 0, 10, 10}, 0.9}};
  EXPECT_EQ(evaluate_frame(r, 0.3), std::vector<bool>{true});
  r.finals = {{{5, 0, 15, 10}, 0.9}};
  EXPECT_EQ(evaluate_frame(r, 0.3), std::vector<bool>{true});
}

TEST(RunDataset, NoFrames) {
  ScriptedDetector det;
  ScriptedVerifier v([](auto&, auto&) { return std::string(); });
  const auto run = run_dataset({}, det, v, CascadeConfig{}, 4);
  EXPECT_TRUE(run.results.empty());
  EXPECT_EQ(run.status, RunStatus::kClean);
}

TEST(RunDataset, DetectorFailureIsPartial) {
  ScriptedDetector det;
  det.failing = {"b"};
  det.out["a"] = {{{0, 0, 10, 10}, 0.9}};
  ScriptedVerifier v([](auto&, auto&) { return verdict("Yes", "0.90"); });
  const auto run = run_dataset({frame("a", Condition::kClean, {{0, 0, 10, 10}}),
                                frame("b", Condition::kClean, {{0, 0, 10, 10}})},
                               det, v, CascadeConfig{}, 2);
  EXPECT_EQ(run.status, RunStatus::kPartial);
  EXPECT_EQ(run.failed_frames, std::vector<std::string>{"b"});
  EXPECT_EQ(run.results[0].per_gt_detected, std::vector<bool>{true});
  EXPECT_EQ(run.results[1].per_gt_detected, std::vector<bool>{false});
}

TEST(RunDataset, WorkerCountDoesNotChangeAudit) {
  const auto frames = load_dataset(kFixtures + "manifest.json");
  auto det = std::make_unique<ReplayDetector>(read_file(kFixtures + "detector.jsonl"), "detector.jsonl");
  ReplayVerifier ver(read_file(kFixtures + "verifier.jsonl"), "verifier.jsonl");
  const auto one = run_dataset(frames, *det, ver, CascadeConfig{}, 1);
  for (std::size_t workers : {2u, 8u}) {
    const auto many = run_dataset(frames, *det, ver, CascadeConfig{}, workers);
    ASSERT_EQ(many.results.size(), one.results.size());
    for (std::size_t i = 0; i < one.results.size(); ++i) {
      ASSERT_EQ(strip_timing(audit_record(one.results[i])).dump(), strip_timing(audit_record(many.results[i])).dump());
    }
  }
}

TEST(RunDataset, FixtureSpecialCases) {
  const auto frames = load_dataset(kFixtures + "manifest.json");
  auto det = std::make_unique<ReplayDetector>(read_file(kFixtures + "detector.jsonl"), "detector.jsonl");
  ReplayVerifier ver(read_file(kFixtures + "verifier.jsonl"), "verifier.jsonl");
  const auto run = run_dataset(frames, *det, ver, CascadeConfig{}, 1);
  ASSERT_EQ(run.results.size(), 20u);
  std::map<std::string, const FrameResult*> by_id;
  for (const auto& r : run.results) by_id[r.frame_id] = &r;
  for (const auto& [id, r] : by_id) {
    EXPECT_DOUBLE_EQ(r->applied_threshold, id < "f11" ? 0.5 : 0.2) << id;
  }
  // f12: the malformed "Maybe" verdict is rejected with its flags recorded.
  bool saw_maybe = false;
  for (const auto& v : by_id["f12"]->verified) {
    if (v.raw_response.find("Maybe") != std::string::npos) {
      saw_maybe = true;
      EXPECT_FALSE(v.accepted);
      EXPECT_FALSE(v.format.required_fields);
    }
  }
  EXPECT_TRUE(saw_maybe);
  // f17: Yes at 0.55 is below tau_conf.
  for (const auto& v : by_id["f17"]->verified) EXPECT_FALSE(v.accepted);
}

TEST(CascadeProperty, ConsensusSoundAndFailClosed) {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 60; ++trial) {
    ScriptedDetector det;
    std::vector<FrameRecord> frames;
    for (int f = 0; f < 5; ++f) {
      const std::string id = "t" + std::to_string(trial) + "_" + std::to_string(f);
      frames.push_back(frame(id, f % 2 ? Condition::kDegraded : Condition::kClean));
      for (int k = 0; k < 6; ++k) {
        det.out[id].push_back({oracle::to_box(oracle::random_box(rng, 1000, 200)), std::round(u(rng) * 100) / 100});
      }
    }
    std::map<std::string, std::string> replies;
    std::mutex mu;
    auto pick = [&](const FrameRecord& f, const VerifyRequest& r) {
      std::lock_guard lock(mu);
      const std::string key = f.frame_id + "/" + std::to_string(r.candidate_index) + "/" + std::to_string(r.scale);
      auto it = replies.find(key);
      if (it != replies.end()) return it->second;
      std::hash<std::string> h;
      const auto x = h(key);
      std::string out;
      switch (x % 4) {
        case 0: out = "boom"; break;
        case 1: out = verdict("No", "0.80"); break;
        default: {
          char c[8];
          std::snprintf(c, sizeof c, "%.2f", (x / 4 % 101) / 100.0);
          out = verdict("Yes", c);
        }
      }
      return replies[key] = out;
    };
    ScriptedVerifier ver(pick, trial % 2);
    CascadeConfig cfg;
    const auto run = run_dataset(frames, det, ver, cfg, 3);
    for (std::size_t i = 0; i < run.results.size(); ++i) {
      const auto& r = run.results[i];
      for (const auto& v : r.verified) {
        if (v.error) {
          ASSERT_FALSE(v.accepted);
        }
        if (v.accepted) {
          ASSERT_EQ(v.decision, 1);
          ASSERT_GE(v.verdict_confidence, cfg.tau_conf);
          ASSERT_GE(v.candidate.confidence, r.applied_threshold);
        }
      }
      for (const auto& fin : r.finals) {
        ASSERT_GE(fin.confidence, r.applied_threshold);
        bool from_detector = false;
        for (const auto& c : det.out[r.frame_id]) from_detector = from_detector || c == fin;
        ASSERT_TRUE(from_detector);
      }
      for (std::size_t k = 1; k < r.finals.size(); ++k) ASSERT_GE(r.finals[k - 1].confidence, r.finals[k].confidence);
    }
  }
}

TEST(CascadeProperty, LowerThresholdNeverLosesRecallWithOracle) {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    ScriptedDetector det;
    std::vector<BoundingBox> gts;
    for (int g = 0; g < 3; ++g) gts.push_back(oracle::to_box(oracle::random_box(rng, 1000, 300)));
    for (int k = 0; k < 8; ++k) {
      auto box = k < 3 ? gts[k] : oracle::to_box(oracle::random_box(rng, 1000, 300));
      det.out["x"].push_back({box, u(rng)});
    }
    OracleVerifier ver(0.3);
    std::vector<std::size_t> prev_finals;
    int prev_hits = -1;
    for (int t = 100; t >= 0; t -= 5) {
      CascadeConfig cfg;
      cfg.fixed_threshold = t / 100.0;
      const auto run = run_dataset({frame("x", Condition::kClean, gts)}, det, ver, cfg, 1);
      const auto& r = run.results[0];
      int hits = 0;
      for (bool d : r.per_gt_detected) hits += d;
      ASSERT_GE(hits, prev_hits);
      ASSERT_GE(r.finals.size(), prev_finals.size());
      for (const auto& pf : prev_finals) {
        bool still = false;
        for (const auto& fin : r.finals) still = still || fin == det.out["x"][pf];
        ASSERT_TRUE(still);
      }
      prev_finals.clear();
      for (const auto& fin : r.finals) {
        for (std::size_t k = 0; k < det.out["x"].size(); ++k) {
          if (det.out["x"][k] == fin) prev_finals.push_back(k);
        }
      }
      prev_hits = hits;
    }
  }
}

TEST(Config, Validation) {
  CascadeConfig c;
  EXPECT_NO_THROW(c.validate());
  c.multiscale.weights = {0.3, 0.3, 0.3};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.tau_conf = 1.2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.rho = 0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Audit, RecordCarriesCoreFields) {
  FrameResult r;
  r.frame_id = "z";
  r.applied_threshold = 0.2;
  const auto j = audit_record(r);
  for (const char* key : {"frame_id", "tau", "stage1_candidates", "verified", "finals", "per_gt_detected", "timing"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
}
