#pragma once

// Frame records and the on-disk annotation/manifest formats.
//
// Annotation file: one JSON object per line
//   {"frame_id": "f001", "patient_id": "p01", "width": 384, "height": 384,
//    "image": "images/f001.png", "condition": "clean" | "degraded",
//    "tags": ["dim", "mucus"], "quality": {"illumination": .., "clarity": .., "artifacts": ..},
//    "boxes": [[x1, y1, x2, y2], ...]}
//
// Manifest: {"version": 1, "annotations": "annotations.jsonl",
//            "checksum": "fnv1a64:<16 hex digits>", "frames": ["f001", ...]}
// `frames` is optional and restricts/orders the frames used.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc/geometry.hpp"
#include "dvc/quality.hpp"
#include "json.hpp"

namespace dvc {

using json = nlohmann::json;

enum class Condition { kClean, kDegraded };

inline std::string to_string(Condition c) { return c == Condition::kClean ? "clean" : "degraded"; }

inline Condition condition_from_string(const std::string& s) {
  if (s == "clean") return Condition::kClean;
  if (s == "degraded") return Condition::kDegraded;
  throw std::invalid_argument("unknown condition: " + s);
}

struct FrameRecord {
  std::string frame_id;
  std::string patient_id;
  double image_width = 0.0;
  double image_height = 0.0;
  std::string image_ref;
  Condition condition = Condition::kClean;
  std::set<std::string> degradation_tags;
  std::optional<QualityFactors> quality;
  std::vector<BoundingBox> ground_truths;
};

/// Thrown for malformed input files; carries the offending file and line.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& file, std::size_t line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return s;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string checksum_string(std::string_view bytes) { return "fnv1a64:" + hex64(fnv1a64(bytes)); }

namespace detail {

inline BoundingBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw std::invalid_argument("box must be [x1,y1,x2,y2]");
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

inline QualityFactors quality_from_json(const json& j) {
  QualityFactors q{j.at("illumination").get<double>(), j.at("clarity").get<double>(),
                   j.at("artifacts").get<double>()};
  require_valid(q);
  return q;
}

// Calls fn(json, line_number) for every non-blank line; wraps failures with
// the file name and line.
template <typename Fn>
void for_each_json_line(const std::string& text, const std::string& source, Fn&& fn) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(line), n);
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(source, n, e.what());
    }
  }
}

}  // namespace detail

inline json quality_to_json(const QualityFactors& q) {
  return {{"illumination", q.illumination}, {"clarity", q.clarity}, {"artifacts", q.artifacts}};
}

inline FrameRecord frame_from_json(const json& j) {
  FrameRecord f;
  f.frame_id = j.at("frame_id").get<std::string>();
  if (f.frame_id.empty()) throw std::invalid_argument("frame_id must be non-empty");
  f.patient_id = j.value("patient_id", std::string{});
  f.image_width = j.at("width").get<double>();
  f.image_height = j.at("height").get<double>();
  if (!(f.image_width > 0.0 && f.image_height > 0.0)) throw std::invalid_argument("image size must be positive");
  f.image_ref = j.value("image", std::string{});
  f.condition = condition_from_string(j.value("condition", std::string("clean")));
  if (j.contains("tags")) {
    for (const auto& t : j.at("tags")) f.degradation_tags.insert(t.get<std::string>());
  }
  if (j.contains("quality") && !j.at("quality").is_null()) f.quality = detail::quality_from_json(j.at("quality"));
  for (const auto& b : j.value("boxes", json::array())) {
    const auto box = detail::box_from_json(b);
    if (!inside_image(box, f.image_width, f.image_height)) {
      throw std::invalid_argument("ground truth box outside image bounds");
    }
    f.ground_truths.push_back(box);
  }
  return f;
}

inline json frame_to_json(const FrameRecord& f) {
  json boxes = json::array();
  for (const auto& b : f.ground_truths) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  json j = {{"frame_id", f.frame_id}, {"patient_id", f.patient_id}, {"width", f.image_width},
            {"height", f.image_height}, {"image", f.image_ref}, {"condition", to_string(f.condition)},
            {"tags", f.degradation_tags}, {"boxes", boxes}};
  if (f.quality) j["quality"] = quality_to_json(*f.quality);
  return j;
}

inline std::vector<FrameRecord> parse_annotations(const std::string& text, const std::string& source) {
  std::vector<FrameRecord> frames;
  std::set<std::string> seen;
  detail::for_each_json_line(text, source, [&](const json& j, std::size_t line) {
    auto f = frame_from_json(j);
    if (!seen.insert(f.frame_id).second) throw FormatError(source, line, "duplicate frame_id " + f.frame_id);
    frames.push_back(std::move(f));
  });
  return frames;
}

inline std::vector<FrameRecord> load_annotations(const std::filesystem::path& path) {
  return parse_annotations(read_file(path), path.string());
}

struct DatasetManifest {
  std::filesystem::path annotation_path;
  std::string checksum;
  std::vector<std::string> frame_ids;  // empty: every annotated frame, file order
};

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  const json j = json::parse(read_file(path));
  DatasetManifest m;
  m.annotation_path = path.parent_path() / j.at("annotations").get<std::string>();
  m.checksum = j.value("checksum", std::string{});
  for (const auto& id : j.value("frames", json::array())) m.frame_ids.push_back(id.get<std::string>());
  return m;
}

/// Loads the frames a manifest references, verifying the annotation checksum.
inline std::vector<FrameRecord> load_dataset(const std::filesystem::path& manifest_path) {
  const auto m = load_manifest(manifest_path);
  const std::string text = read_file(m.annotation_path);
  if (!m.checksum.empty() && checksum_string(text) != m.checksum) {
    throw std::runtime_error("checksum mismatch for " + m.annotation_path.string() + ": manifest says " +
                             m.checksum + ", file is " + checksum_string(text));
  }
  auto frames = parse_annotations(text, m.annotation_path.string());
  if (m.frame_ids.empty()) return frames;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < frames.size(); ++i) index[frames[i].frame_id] = i;
  std::vector<FrameRecord> selected;
  for (const auto& id : m.frame_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("manifest references unknown frame " + id);
    selected.push_back(frames[it->second]);
  }
  return selected;
}

}  // namespace dvc
