#pragma once

// Detector and verifier backend interfaces, stage timing, and the
// deterministic replay/oracle implementations used by tests and fixtures.
//
// Detector fixture (one JSON object per line):
//   {"frame_id": "f001", "boxes": [{"x1":..,"y1":..,"x2":..,"y2":..,"conf":..}]}
//   optional "width"/"height" enable bounds validation; "error": "msg" makes
//   propose() fail for that frame.
// Verifier fixture (one JSON object per line):
//   {"frame_id": "f001", "crop": [x1,y1,x2,y2], "raw_response": "<think>..",
//    "quality": {...}, "adverse": true, "scale": 1.0}
//   Lines without "crop" only carry the frame-level assessment. "scale" is
//   optional; a record without it answers every scale.

#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dvc/dataset.hpp"
#include "dvc/geometry.hpp"
#include "dvc/protocol.hpp"
#include "dvc/quality.hpp"

namespace dvc {

struct BackendInfo {
  std::string name;
  std::string version;
};

class BackendError : public std::runtime_error {
 public:
  explicit BackendError(const std::string& what, int retries = 0)
      : std::runtime_error(what), retries_(retries) {}
  int retries() const noexcept { return retries_; }

 private:
  int retries_;
};

class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;
  virtual BackendInfo info() const = 0;
  // Unthresholded candidates for the frame. Must be safe to call concurrently.
  virtual std::vector<Candidate> propose(const FrameRecord& frame) = 0;
};

struct GlobalAssessment {
  bool adverse = false;
  std::optional<QualityFactors> quality;
  std::optional<double> aleatoric;  // passed through to the audit log
};

struct VerifyRequest {
  std::string frame_id;
  std::string image_ref;
  std::size_t candidate_index = 0;
  BoundingBox crop;
  BoundingBox context_crop;
  double scale = 1.0;
  std::string prompt;
  double detector_confidence = 0.0;
};

struct VerifyReply {
  std::string raw_response;  // verbatim model output
  int retries = 0;
};

class VerifierBackend {
 public:
  virtual ~VerifierBackend() = default;
  virtual BackendInfo info() const = 0;
  virtual GlobalAssessment assess_global(const FrameRecord& frame) = 0;
  virtual VerifyReply verify(const FrameRecord& frame, const VerifyRequest& request) = 0;
};

// Milliseconds spent per pipeline stage for one frame.
struct StageTiming {
  double t_preprocess = 0.0;
  double t_detect = 0.0;
  std::vector<double> t_verify_each;
  double t_postprocess = 0.0;

  double verify_total() const noexcept {
    double s = 0.0;
    for (double t : t_verify_each) s += t;
    return s;
  }
  double total() const noexcept { return t_preprocess + t_detect + verify_total() + t_postprocess; }
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Decorators recording call durations into a StageTiming.
class TimedDetector final : public DetectorBackend {
 public:
  TimedDetector(DetectorBackend& inner, StageTiming& timing) : inner_(inner), timing_(timing) {}
  BackendInfo info() const override { return inner_.info(); }
  std::vector<Candidate> propose(const FrameRecord& frame) override {
    Stopwatch sw;
    auto out = inner_.propose(frame);
    timing_.t_detect += sw.elapsed_ms();
    return out;
  }

 private:
  DetectorBackend& inner_;
  StageTiming& timing_;
};

// Verify calls for the same candidate index (e.g. several scales) are summed
// into one t_verify_each entry.
class TimedVerifier final : public VerifierBackend {
 public:
  TimedVerifier(VerifierBackend& inner, StageTiming& timing) : inner_(inner), timing_(timing) {}
  BackendInfo info() const override { return inner_.info(); }

  GlobalAssessment assess_global(const FrameRecord& frame) override {
    Stopwatch sw;
    auto out = inner_.assess_global(frame);
    std::lock_guard lock(mu_);
    timing_.t_preprocess += sw.elapsed_ms();
    return out;
  }

  VerifyReply verify(const FrameRecord& frame, const VerifyRequest& request) override {
    Stopwatch sw;
    auto record = [&] {
      const double ms = sw.elapsed_ms();
      std::lock_guard lock(mu_);
      if (timing_.t_verify_each.size() <= request.candidate_index) {
        timing_.t_verify_each.resize(request.candidate_index + 1, 0.0);
      }
      timing_.t_verify_each[request.candidate_index] += ms;
    };
    try {
      auto out = inner_.verify(frame, request);
      record();
      return out;
    } catch (...) {
      record();
      throw;
    }
  }

 private:
  VerifierBackend& inner_;
  StageTiming& timing_;
  std::mutex mu_;
};

namespace detail {

inline bool same_box(const BoundingBox& a, const BoundingBox& b, double tol = 1e-6) {
  return std::fabs(a.x1 - b.x1) <= tol && std::fabs(a.y1 - b.y1) <= tol && std::fabs(a.x2 - b.x2) <= tol &&
         std::fabs(a.y2 - b.y2) <= tol;
}

inline GlobalAssessment assessment_from_metadata(const FrameRecord& frame) {
  return {frame.condition == Condition::kDegraded, frame.quality, std::nullopt};
}

}  // namespace detail

struct FrameSize {
  double width = 0.0;
  double height = 0.0;
};

class ReplayDetector final : public DetectorBackend {
 public:
  // `sizes` (frame_id -> image size) enables bounds validation for lines
  // that do not carry their own width/height.
  ReplayDetector(const std::string& text, const std::string& source,
                 const std::map<std::string, FrameSize>& sizes = {}) {
    detail::for_each_json_line(text, source, [&](const json& j, std::size_t line) {
      const auto id = j.at("frame_id").get<std::string>();
      if (records_.count(id)) throw FormatError(source, line, "duplicate frame_id " + id);
      Record rec;
      if (j.contains("error")) rec.error = j.at("error").get<std::string>();
      std::optional<FrameSize> size;
      if (j.contains("width") && j.contains("height")) {
        size = FrameSize{j.at("width").get<double>(), j.at("height").get<double>()};
      } else if (auto it = sizes.find(id); it != sizes.end()) {
        size = it->second;
      }
      for (const auto& b : j.value("boxes", json::array())) {
        Candidate c{{b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                     b.at("y2").get<double>()},
                    b.at("conf").get<double>()};
        if (!is_valid(c.box)) throw FormatError(source, line, "inverted box");
        if (!(c.confidence >= 0.0 && c.confidence <= 1.0)) {
          throw FormatError(source, line, "confidence outside [0,1]");
        }
        if (c.box.x1 < 0.0 || c.box.y1 < 0.0 || (size && !inside_image(c.box, size->width, size->height))) {
          throw FormatError(source, line, "box outside image bounds");
        }
        rec.candidates.push_back(c);
      }
      records_.emplace(id, std::move(rec));
    });
  }

  static ReplayDetector from_file(const std::filesystem::path& path,
                                  const std::map<std::string, FrameSize>& sizes = {}) {
    return ReplayDetector(read_file(path), path.string(), sizes);
  }

  BackendInfo info() const override { return {"replay-detector", "1"}; }

  std::vector<Candidate> propose(const FrameRecord& frame) override {
    const auto it = records_.find(frame.frame_id);
    if (it == records_.end()) {
      std::lock_guard lock(mu_);
      warnings_.push_back("no detector record for frame " + frame.frame_id);
      return {};
    }
    if (it->second.error) throw BackendError(*it->second.error);
    return it->second.candidates;
  }

  std::vector<std::string> warnings() const {
    std::lock_guard lock(mu_);
    return warnings_;
  }

 private:
  struct Record {
    std::vector<Candidate> candidates;
    std::optional<std::string> error;
  };
  std::map<std::string, Record> records_;
  mutable std::mutex mu_;
  std::vector<std::string> warnings_;
};

class ReplayVerifier final : public VerifierBackend {
 public:
  ReplayVerifier(const std::string& text, const std::string& source) {
    detail::for_each_json_line(text, source, [&](const json& j, std::size_t line) {
      auto& frame = frames_[j.at("frame_id").get<std::string>()];
      if (j.contains("adverse") || j.contains("quality")) {
        GlobalAssessment a;
        a.adverse = j.value("adverse", false);
        if (j.contains("quality") && !j.at("quality").is_null()) a.quality = detail::quality_from_json(j.at("quality"));
        if (j.contains("aleatoric")) a.aleatoric = j.at("aleatoric").get<double>();
        frame.assessment = a;
      }
      if (j.contains("crop")) {
        Response r;
        r.crop = detail::box_from_json(j.at("crop"));
        if (!is_valid(r.crop)) throw FormatError(source, line, "inverted crop");
        if (j.contains("scale")) r.scale = j.at("scale").get<double>();
        r.raw = j.at("raw_response").get<std::string>();
        frame.responses.push_back(std::move(r));
      }
    });
  }

  static ReplayVerifier from_file(const std::filesystem::path& path) {
    return ReplayVerifier(read_file(path), path.string());
  }

  BackendInfo info() const override { return {"replay-verifier", "1"}; }

  // Frames without a recorded assessment fall back to their metadata.
  GlobalAssessment assess_global(const FrameRecord& frame) override {
    const auto it = frames_.find(frame.frame_id);
    if (it != frames_.end() && it->second.assessment) return *it->second.assessment;
    return detail::assessment_from_metadata(frame);
  }

  VerifyReply verify(const FrameRecord& frame, const VerifyRequest& request) override {
    const auto it = frames_.find(frame.frame_id);
    if (it != frames_.end()) {
      const Response* any_scale = nullptr;
      for (const auto& r : it->second.responses) {
        if (!detail::same_box(r.crop, request.crop)) continue;
        if (r.scale && std::fabs(*r.scale - request.scale) < 1e-9) return {r.raw, 0};
        if (!r.scale && !any_scale) any_scale = &r;
      }
      if (any_scale) return {any_scale->raw, 0};
    }
    throw BackendError("no recorded verifier response for frame " + frame.frame_id);
  }

 private:
  struct Response {
    BoundingBox crop;
    std::optional<double> scale;
    std::string raw;
  };
  struct Frame {
    std::optional<GlobalAssessment> assessment;
    std::vector<Response> responses;
  };
  std::map<std::string, Frame> frames_;
};

// Perfect verifier: says Yes (confidence 1.00) exactly when the crop overlaps
// a ground truth with IoU >= tau_iou.
class OracleVerifier final : public VerifierBackend {
 public:
  explicit OracleVerifier(double tau_iou = 0.3) : tau_iou_(tau_iou) {}

  BackendInfo info() const override { return {"oracle-verifier", "1"}; }

  GlobalAssessment assess_global(const FrameRecord& frame) override {
    return detail::assessment_from_metadata(frame);
  }

  VerifyReply verify(const FrameRecord& frame, const VerifyRequest& request) override {
    bool hit = false;
    for (const auto& gt : frame.ground_truths) hit = hit || iou(request.crop, gt) >= tau_iou_;
    return {render_verdict_response({"oracle", hit ? Decision::kYes : Decision::kNo, 1.0}), 0};
  }

 private:
  double tau_iou_;
};

}  // namespace dvc
