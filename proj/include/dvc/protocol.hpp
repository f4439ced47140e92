#pragma once

// Prompt rendering and the structured answer grammar shared by the detector
// prompt and the verifier prompt:
//
//   <think> free text </think> <answer> payload </answer>
//
// The payload is a list of objects in a relaxed JSON dialect that accepts
// both single- and double-quoted strings. Parsers are total: malformed input
// never throws, it yields an absent response and a FormatReport whose flags
// say which check failed.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "dvc/geometry.hpp"
#include "dvc/prompt_templates.hpp"

namespace dvc {

struct FormatReport {
  bool valid_envelope = false;
  bool valid_payload = false;
  bool required_fields = false;
  bool value_ranges = false;

  bool ok() const noexcept { return valid_envelope && valid_payload && required_fields && value_ranges; }
  friend bool operator==(const FormatReport&, const FormatReport&) = default;
};

struct DetectionItem {
  GridBox box;
  double confidence = 0.0;

  friend bool operator==(const DetectionItem&, const DetectionItem&) = default;
};

struct DetectionResponse {
  std::string think_text;
  std::vector<DetectionItem> items;  // empty <=> "No Objects"

  friend bool operator==(const DetectionResponse&, const DetectionResponse&) = default;
};

struct DetectionParse {
  std::optional<DetectionResponse> response;
  FormatReport report;
};

enum class Decision { kNo = 0, kYes = 1 };

struct VerdictResponse {
  std::string think_text;
  Decision decision = Decision::kNo;
  double confidence = 0.0;

  friend bool operator==(const VerdictResponse&, const VerdictResponse&) = default;
};

struct VerdictParse {
  std::optional<VerdictResponse> response;
  FormatReport report;
};

namespace detail {

inline bool is_space(char c) noexcept { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

inline std::string_view trim(std::string_view s) noexcept {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline bool iequals(std::string_view a, std::string_view b) noexcept {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    char x = a[i], y = b[i];
    if (x >= 'A' && x <= 'Z') x = static_cast<char>(x - 'A' + 'a');
    if (y >= 'A' && y <= 'Z') y = static_cast<char>(y - 'A' + 'a');
    if (x != y) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Relaxed JSON values

struct Value;
using Array = std::vector<Value>;
using Object = std::vector<std::pair<std::string, Value>>;

struct Number {
  double value = 0.0;
  std::string text;  // lexical form, needed for the two-decimal check
};

struct Value {
  std::variant<std::monostate, bool, Number, std::string, Array, Object> data;

  const Number* number() const { return std::get_if<Number>(&data); }
  const std::string* string() const { return std::get_if<std::string>(&data); }
  const Array* array() const { return std::get_if<Array>(&data); }
  const Object* object() const { return std::get_if<Object>(&data); }
};

class RelaxedParser {
 public:
  explicit RelaxedParser(std::string_view text) : text_(text) {}

  // Parses the whole input as one value; nullopt on any syntax error or
  // trailing garbage.
  std::optional<Value> parse_document() {
    Value v;
    skip_ws();
    if (!parse_value(v, 0)) return std::nullopt;
    skip_ws();
    if (pos_ != text_.size()) return std::nullopt;
    return v;
  }

 private:
  static constexpr int kMaxDepth = 64;

  bool eof() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  void skip_ws() {
    while (!eof() && is_space(peek())) ++pos_;
  }

  bool consume(char c) {
    if (!eof() && peek() == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  bool parse_value(Value& out, int depth) {
    if (depth > kMaxDepth || eof()) return false;
    const char c = peek();
    if (c == '[') return parse_array(out, depth);
    if (c == '{') return parse_object(out, depth);
    if (c == '"' || c == '\'') {
      std::string s;
      if (!parse_string(s)) return false;
      out.data = std::move(s);
      return true;
    }
    if (c == '-' || (c >= '0' && c <= '9')) return parse_number(out);
    return parse_literal(out);
  }

  bool parse_literal(Value& out) {
    const auto rest = text_.substr(pos_);
    auto take = [&](std::string_view word) {
      if (rest.substr(0, word.size()) == word) {
        pos_ += word.size();
        return true;
      }
      return false;
    };
    if (take("true") || take("True")) {
      out.data = true;
      return true;
    }
    if (take("false") || take("False")) {
      out.data = false;
      return true;
    }
    if (take("null") || take("None")) {
      out.data = std::monostate{};
      return true;
    }
    return false;
  }

  bool parse_number(Value& out) {
    const std::size_t start = pos_;
    consume('-');
    auto digits = [&] {
      const std::size_t s = pos_;
      while (!eof() && peek() >= '0' && peek() <= '9') ++pos_;
      return pos_ - s;
    };
    if (digits() == 0) return false;
    if (consume('.') && digits() == 0) return false;
    if (!eof() && (peek() == 'e' || peek() == 'E')) {
      ++pos_;
      if (!consume('+')) consume('-');
      if (digits() == 0) return false;
    }
    Number n;
    n.text = std::string(text_.substr(start, pos_ - start));
    n.value = std::strtod(n.text.c_str(), nullptr);
    out.data = std::move(n);
    return true;
  }

  static void append_utf8(std::string& s, unsigned cp) {
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }

  bool parse_string(std::string& out) {
    const char quote = peek();
    ++pos_;
    while (!eof()) {
      const char c = peek();
      ++pos_;
      if (c == quote) return true;
      if (c != '\\') {
        out.push_back(c);
        continue;
      }
      if (eof()) return false;
      const char e = peek();
      ++pos_;
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\'': out.push_back('\''); break;
        case '\\': out.push_back('\\'); break;
        case '/': out.push_back('/'); break;
        case 'b': out.push_back('\b'); break;
        case 'f': out.push_back('\f'); break;
        case 'n': out.push_back('\n'); break;
        case 'r': out.push_back('\r'); break;
        case 't': out.push_back('\t'); break;
        case 'u': {
          if (text_.size() - pos_ < 4) return false;
          unsigned cp = 0;
          for (int i = 0; i < 4; ++i) {
            const char h = text_[pos_++];
            cp <<= 4;
            if (h >= '0' && h <= '9') cp |= static_cast<unsigned>(h - '0');
            else if (h >= 'a' && h <= 'f') cp |= static_cast<unsigned>(h - 'a' + 10);
            else if (h >= 'A' && h <= 'F') cp |= static_cast<unsigned>(h - 'A' + 10);
            else return false;
          }
          append_utf8(out, cp);
          break;
        }
        default: return false;
      }
    }
    return false;
  }

  bool parse_array(Value& out, int depth) {
    ++pos_;  // '['
    Array items;
    skip_ws();
    if (consume(']')) {
      out.data = std::move(items);
      return true;
    }
    for (;;) {
      skip_ws();
      Value v;
      if (!parse_value(v, depth + 1)) return false;
      items.push_back(std::move(v));
      skip_ws();
      if (consume(']')) break;
      if (!consume(',')) return false;
    }
    out.data = std::move(items);
    return true;
  }

  bool parse_object(Value& out, int depth) {
    ++pos_;  // '{'
    Object members;
    skip_ws();
    if (consume('}')) {
      out.data = std::move(members);
      return true;
    }
    for (;;) {
      skip_ws();
      if (eof() || (peek() != '"' && peek() != '\'')) return false;
      std::string key;
      if (!parse_string(key)) return false;
      skip_ws();
      if (!consume(':')) return false;
      skip_ws();
      Value v;
      if (!parse_value(v, depth + 1)) return false;
      members.emplace_back(std::move(key), std::move(v));
      skip_ws();
      if (consume('}')) break;
      if (!consume(',')) return false;
    }
    out.data = std::move(members);
    return true;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Envelope

struct Envelope {
  std::string_view think;
  std::string_view answer;
};

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

// Last complete `<think>..</think> <answer>..</answer>` occurrence.
inline std::optional<Envelope> find_last_envelope(std::string_view raw) {
  std::size_t search_end = raw.size();
  while (search_end >= kAnswerClose.size()) {
    const std::size_t close = raw.rfind(kAnswerClose, search_end - kAnswerClose.size());
    if (close == std::string_view::npos) return std::nullopt;
    search_end = close;  // next attempt looks strictly before this one
    const std::size_t open = close >= kAnswerOpen.size()
                                 ? raw.rfind(kAnswerOpen, close - kAnswerOpen.size())
                                 : std::string_view::npos;
    if (open == std::string_view::npos) continue;
    const std::string_view before = raw.substr(0, open);
    std::size_t end = before.size();
    while (end > 0 && is_space(before[end - 1])) --end;
    if (end < kThinkClose.size() || before.substr(end - kThinkClose.size(), kThinkClose.size()) != kThinkClose) {
      continue;
    }
    const std::size_t think_close = end - kThinkClose.size();
    const std::size_t think_open = before.rfind(kThinkOpen, think_close);
    if (think_open == std::string_view::npos || think_open + kThinkOpen.size() > think_close) continue;
    Envelope env;
    env.think = raw.substr(think_open + kThinkOpen.size(), think_close - think_open - kThinkOpen.size());
    env.answer = raw.substr(open + kAnswerOpen.size(), close - open - kAnswerOpen.size());
    return env;
  }
  return std::nullopt;
}

inline const Value* find_member(const Object& obj, std::string_view key, bool& duplicate) {
  const Value* found = nullptr;
  for (const auto& [k, v] : obj) {
    if (k == key) {
      if (found) duplicate = true;
      found = &v;
    }
  }
  return found;
}

// Plain decimal with at most two fractional digits, value in [0,1].
inline bool valid_confidence(const Number& n) {
  if (n.text.find_first_of("eE") != std::string::npos) return false;
  const auto dot = n.text.find('.');
  if (dot != std::string::npos && n.text.size() - dot - 1 > 2) return false;
  return n.value >= 0.0 && n.value <= 1.0;
}

inline bool integral_literal(const Number& n) {
  return n.text.find_first_of(".eE") == std::string::npos;
}

inline bool two_decimal(double c) {
  if (!(c >= 0.0 && c <= 1.0)) return false;
  const double scaled = c * 100.0;
  return std::fabs(scaled - std::round(scaled)) < 1e-9;
}

inline std::string format_confidence(double c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", c);
  return buf;
}

inline void require_plain_think(std::string_view think) {
  for (auto tag : {kThinkOpen, kThinkClose, kAnswerOpen, kAnswerClose}) {
    if (think.find(tag) != std::string_view::npos) {
      throw std::invalid_argument("think text must not contain envelope tags");
    }
  }
}

inline std::string render_template(std::string_view tmpl, std::string_view class_name) {
  if (trim(class_name).empty()) throw std::invalid_argument("class name must be non-empty");
  std::string out(tmpl);
  const auto at = out.find(prompts::kClassPlaceholder);
  out.replace(at, prompts::kClassPlaceholder.size(), class_name);
  return out;
}

}  // namespace detail

inline constexpr std::string_view kNoObjects = "No Objects";

inline std::string render_detection_prompt(std::string_view class_name) {
  return detail::render_template(prompts::kDetectionTemplate, class_name);
}

inline std::string render_verify_prompt(std::string_view class_name) {
  return detail::render_template(prompts::kVerificationTemplate, class_name);
}

inline DetectionParse parse_detection(std::string_view raw) {
  DetectionParse out;
  const auto env = detail::find_last_envelope(raw);
  if (!env) return out;
  out.report.valid_envelope = true;

  const std::string_view body = detail::trim(env->answer);
  if (detail::iequals(body, kNoObjects)) {
    out.report.valid_payload = out.report.required_fields = out.report.value_ranges = true;
    out.response = DetectionResponse{std::string(env->think), {}};
    return out;
  }

  auto doc = detail::RelaxedParser(body).parse_document();
  if (!doc || !doc->array()) return out;
  out.report.valid_payload = true;

  struct Raw {
    const detail::Array* position;
    const detail::Number* confidence;
  };
  std::vector<Raw> raws;
  bool fields_ok = !doc->array()->empty();  // an empty list must be spelled "No Objects"
  for (const auto& element : *doc->array()) {
    const auto* obj = element.object();
    if (!obj) {
      fields_ok = false;
      break;
    }
    bool dup = false;
    const auto* pos = detail::find_member(*obj, "Position", dup);
    const auto* conf = detail::find_member(*obj, "Confidence", dup);
    if (dup || !pos || !conf || !pos->array() || pos->array()->size() != 4 || !conf->number()) {
      fields_ok = false;
      break;
    }
    for (const auto& coord : *pos->array()) {
      if (!coord.number()) fields_ok = false;
    }
    if (!fields_ok) break;
    raws.push_back({pos->array(), conf->number()});
  }
  if (!fields_ok) return out;
  out.report.required_fields = true;

  DetectionResponse resp{std::string(env->think), {}};
  bool ranges_ok = true;
  for (const auto& r : raws) {
    int c[4] = {0, 0, 0, 0};
    for (int i = 0; i < 4; ++i) {
      const auto& n = *(*r.position)[static_cast<std::size_t>(i)].number();
      if (!detail::integral_literal(n) || !(n.value >= 0.0 && n.value <= kGridExtent)) {
        ranges_ok = false;
        break;
      }
      c[i] = static_cast<int>(n.value);
    }
    const GridBox g{c[0], c[1], c[2], c[3]};
    if (!ranges_ok || !is_valid(g) || !detail::valid_confidence(*r.confidence)) {
      ranges_ok = false;
      break;
    }
    resp.items.push_back({g, r.confidence->value});
  }
  if (!ranges_ok) return out;
  out.report.value_ranges = true;
  out.response = std::move(resp);
  return out;
}

inline VerdictParse parse_verdict(std::string_view raw) {
  VerdictParse out;
  const auto env = detail::find_last_envelope(raw);
  if (!env) return out;
  out.report.valid_envelope = true;

  auto doc = detail::RelaxedParser(detail::trim(env->answer)).parse_document();
  if (!doc || !doc->array()) return out;
  out.report.valid_payload = true;

  const auto& arr = *doc->array();
  if (arr.size() != 1 || !arr[0].object()) return out;
  bool dup = false;
  const auto* decision = detail::find_member(*arr[0].object(), "Decision", dup);
  const auto* conf = detail::find_member(*arr[0].object(), "Confidence", dup);
  if (dup || !decision || !conf || !decision->string() || !conf->number()) return out;
  const std::string_view token = detail::trim(*decision->string());
  Decision d;
  if (detail::iequals(token, "yes")) {
    d = Decision::kYes;
  } else if (detail::iequals(token, "no")) {
    d = Decision::kNo;
  } else {
    return out;
  }
  out.report.required_fields = true;

  if (!detail::valid_confidence(*conf->number())) return out;
  out.report.value_ranges = true;
  out.response = VerdictResponse{std::string(env->think), d, conf->number()->value};
  return out;
}

/// Canonical double-quoted answer body; "No Objects" for an empty list.
inline std::string render_detection_answer(const std::vector<DetectionItem>& items) {
  if (items.empty()) return std::string(kNoObjects);
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (!is_valid(it.box)) throw std::invalid_argument("grid box outside [0,1000] or inverted");
    if (!detail::two_decimal(it.confidence)) {
      throw std::invalid_argument("confidence must be a two-decimal value in [0,1]");
    }
    if (i > 0) out += ", ";
    out += "{\"Position\": [" + std::to_string(it.box.x1) + ", " + std::to_string(it.box.y1) + ", " +
           std::to_string(it.box.x2) + ", " + std::to_string(it.box.y2) + "], \"Confidence\": " +
           detail::format_confidence(it.confidence) + "}";
  }
  out += "]";
  return out;
}

inline std::string render_detection_response(const DetectionResponse& r) {
  detail::require_plain_think(r.think_text);
  return "<think>" + r.think_text + "</think><answer>" + render_detection_answer(r.items) + "</answer>";
}

inline std::string render_verdict_answer(Decision d, double confidence) {
  if (!detail::two_decimal(confidence)) {
    throw std::invalid_argument("confidence must be a two-decimal value in [0,1]");
  }
  return std::string("[{\"Decision\": \"") + (d == Decision::kYes ? "Yes" : "No") +
         "\", \"Confidence\": " + detail::format_confidence(confidence) + "}]";
}

inline std::string render_verdict_response(const VerdictResponse& r) {
  detail::require_plain_think(r.think_text);
  return "<think>" + r.think_text + "</think><answer>" + render_verdict_answer(r.decision, r.confidence) +
         "</answer>";
}

}  // namespace dvc
