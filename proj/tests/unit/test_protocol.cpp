#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "dvc/protocol.hpp"

using namespace dvc;

namespace {

std::string slurp(const std::string& rel) {
  std::ifstream in(std::string(DVC_SOURCE_DIR) + "/" + rel, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool all_flags(const FormatReport& r) {
  return r.valid_envelope && r.valid_payload && r.required_fields && r.value_ranges;
}

}  // namespace

TEST(Prompts, DetectionMatchesGolden) {
  const auto p = render_detection_prompt("polyp");
  EXPECT_EQ(p, slurp("tests/golden/prompts/detection_polyp.txt"));
  EXPECT_NE(p.find("Detect all objects of class {polyp} in the image."), std::string::npos);
  EXPECT_NE(p.find("return \"No Objects\""), std::string::npos);
}

TEST(Prompts, VerifyMatchesGolden) {
  const auto p = render_verify_prompt("polyp");
  EXPECT_EQ(p, slurp("tests/golden/prompts/verification_polyp.txt"));
  EXPECT_NE(p.find("decide if it contains a {polyp}."), std::string::npos);
  EXPECT_EQ(p, render_verify_prompt("polyp"));
}

TEST(Prompts, OtherClassSubstitutes) {
  auto p = render_detection_prompt("lesion");
  auto want = render_detection_prompt("polyp");
  want.replace(want.find("{polyp}"), 7, "{lesion}");
  EXPECT_EQ(p, want);
}

TEST(Prompts, EmptyOrBlankClassRejected) {
  EXPECT_THROW(render_detection_prompt(""), std::invalid_argument);
  EXPECT_THROW(render_verify_prompt("   \t"), std::invalid_argument);
}

TEST(ParseDetection, SingleQuotedItem) {
  const auto r = parse_detection(
      "<think>ok</think><answer>[{'Position': [100,200,300,400], 'Confidence': 0.85}]</answer>");
  EXPECT_TRUE(all_flags(r.report));
  ASSERT_TRUE(r.response);
  EXPECT_EQ(r.response->think_text, "ok");
  ASSERT_EQ(r.response->items.size(), 1u);
  EXPECT_EQ(r.response->items[0].box, (GridBox{100, 200, 300, 400}));
  EXPECT_DOUBLE_EQ(r.response->items[0].confidence, 0.85);
}

TEST(ParseDetection, DoubleQuotedItem) {
  const auto r = parse_detection(
      "<think></think>\n<answer> [{\"Position\": [0, 0, 1000, 1000], \"Confidence\": 1}] </answer>");
  EXPECT_TRUE(all_flags(r.report));
  ASSERT_TRUE(r.response);
  EXPECT_EQ(r.response->items[0].box, (GridBox{0, 0, 1000, 1000}));
}

TEST(ParseDetection, NoObjects) {
  const auto r = parse_detection("<think>x</think><answer>No Objects</answer>");
  EXPECT_TRUE(all_flags(r.report));
  ASSERT_TRUE(r.response);
  EXPECT_TRUE(r.response->items.empty());
  EXPECT_TRUE(parse_detection("<think>x</think><answer>  no objects\n</answer>").response);
}

TEST(ParseDetection, MissingAnswerClose) {
  const auto r = parse_detection("<think>ok</think><answer>[{'Position': [1,2,3,4], 'Confidence': 0.5}]");
  EXPECT_FALSE(r.response);
  EXPECT_FALSE(r.report.valid_envelope);
}

TEST(ParseDetection, LastEnvelopeWins) {
  const auto r = parse_detection(
      "<think>a</think><answer>No Objects</answer> draft over <think>b</think>"
      "<answer>[{'Position': [1,2,3,4], 'Confidence': 0.5}]</answer>");
  ASSERT_TRUE(r.response);
  EXPECT_EQ(r.response->think_text, "b");
  EXPECT_EQ(r.response->items.size(), 1u);
}

TEST(ParseDetection, FlagsPinpointFailure) {
  auto r = parse_detection("<think>x</think><answer>[{'Position': [1,2,3,4], 'Confidence': 0.5</answer>");
  EXPECT_TRUE(r.report.valid_envelope);
  EXPECT_FALSE(r.report.valid_payload);

  r = parse_detection("<think>x</think><answer>[{'Box': [1,2,3,4], 'Confidence': 0.5}]</answer>");
  EXPECT_TRUE(r.report.valid_payload);
  EXPECT_FALSE(r.report.required_fields);

  r = parse_detection("<think>x</think><answer>[]</answer>");
  EXPECT_TRUE(r.report.valid_payload);
  EXPECT_FALSE(r.report.required_fields);

  for (const char* bad : {"[{'Position': [1,2,3,1001], 'Confidence': 0.5}]",
                          "[{'Position': [5,2,3,4], 'Confidence': 0.5}]",
                          "[{'Position': [1.5,2,3,4], 'Confidence': 0.5}]",
                          "[{'Position': [1,2,3,4], 'Confidence': 0.555}]",
                          "[{'Position': [1,2,3,4], 'Confidence': 1.5}]",
                          "[{'Position': [1,2,3,4], 'Confidence': 5e-1}]"}) {
    r = parse_detection(std::string("<think>x</think><answer>") + bad + "</answer>");
    EXPECT_TRUE(r.report.required_fields) << bad;
    EXPECT_FALSE(r.report.value_ranges) << bad;
    EXPECT_FALSE(r.response) << bad;
  }
}

TEST(ParseVerdict, Yes) {
  const auto r = parse_verdict("<think>round, vascular</think><answer>[{'Decision': 'Yes', 'Confidence': 0.91}]</answer>");
  EXPECT_TRUE(all_flags(r.report));
  ASSERT_TRUE(r.response);
  EXPECT_EQ(r.response->decision, Decision::kYes);
  EXPECT_DOUBLE_EQ(r.response->confidence, 0.91);
}

TEST(ParseVerdict, CaseNormalized) {
  const auto r = parse_verdict("<think></think><answer>[{\"Decision\": \"no\", \"Confidence\": 0.2}]</answer>");
  ASSERT_TRUE(r.response);
  EXPECT_EQ(r.response->decision, Decision::kNo);
}

TEST(ParseVerdict, MaybeFailsRequiredFields) {
  const auto r = parse_verdict("<think></think><answer>[{'Decision': 'maybe', 'Confidence': 0.5}]</answer>");
  EXPECT_TRUE(r.report.valid_payload);
  EXPECT_FALSE(r.report.required_fields);
  EXPECT_FALSE(r.response);
}

TEST(ParseVerdict, OutOfRangeConfidence) {
  const auto r = parse_verdict("<think></think><answer>[{'Decision': 'Yes', 'Confidence': 1.50}]</answer>");
  EXPECT_TRUE(r.report.required_fields);
  EXPECT_FALSE(r.report.value_ranges);
  EXPECT_FALSE(r.response);
}

TEST(ParseVerdict, ExactlyOneElement) {
  const auto r = parse_verdict(
      "<think></think><answer>[{'Decision': 'Yes', 'Confidence': 0.5}, {'Decision': 'No', 'Confidence': 0.5}]"
      "</answer>");
  EXPECT_FALSE(r.report.required_fields);
}

TEST(RenderDetection, EmptyIsNoObjects) {
  EXPECT_EQ(render_detection_answer({}), "No Objects");
  EXPECT_EQ(render_detection_response({"t", {}}), "<think>t</think><answer>No Objects</answer>");
}

TEST(RenderDetection, CanonicalSingleItem) {
  EXPECT_EQ(render_detection_answer({{{1, 2, 3, 4}, 0.5}}), "[{\"Position\": [1, 2, 3, 4], \"Confidence\": 0.50}]");
}

TEST(RenderDetection, RejectsInvalidItems) {
  EXPECT_THROW(render_detection_answer({{{1, 2, 3, 1001}, 0.5}}), std::invalid_argument);
  EXPECT_THROW(render_detection_answer({{{1, 2, 3, 4}, 0.123}}), std::invalid_argument);
  EXPECT_THROW(render_detection_response({"<answer>", {}}), std::invalid_argument);
}

TEST(RoundTrip, RandomDetections) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coord(0, 1000), count(0, 6), pct(0, 100);
  for (int trial = 0; trial < 1000; ++trial) {
    DetectionResponse r{"think " + std::to_string(trial), {}};
    for (int i = count(rng); i > 0; --i) {
      int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
      if (a > b) std::swap(a, b);
      if (c > d) std::swap(c, d);
      r.items.push_back({{a, c, b, d}, pct(rng) / 100.0});
    }
    const auto parsed = parse_detection(render_detection_response(r));
    ASSERT_TRUE(all_flags(parsed.report));
    ASSERT_TRUE(parsed.response);
    ASSERT_EQ(parsed.response->think_text, r.think_text);
    ASSERT_EQ(parsed.response->items.size(), r.items.size());
    for (std::size_t i = 0; i < r.items.size(); ++i) {
      ASSERT_EQ(parsed.response->items[i].box, r.items[i].box);
      ASSERT_DOUBLE_EQ(parsed.response->items[i].confidence, r.items[i].confidence);
    }
  }
}

TEST(RoundTrip, RandomVerdicts) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> pct(0, 100), coin(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const VerdictResponse v{"", coin(rng) ? Decision::kYes : Decision::kNo, pct(rng) / 100.0};
    const auto parsed = parse_verdict(render_verdict_response(v));
    ASSERT_TRUE(all_flags(parsed.report));
    ASSERT_TRUE(parsed.response);
    ASSERT_EQ(parsed.response->decision, v.decision);
    ASSERT_DOUBLE_EQ(parsed.response->confidence, v.confidence);
  }
}

TEST(Fuzz, ParsersAreTotalAndFlagsSound) {
  std::mt19937_64 rng(7);
  const std::vector<std::string> pieces{"<think>", "</think>", "<answer>", "</answer>", "[", "]", "{", "}",
                                        "'Position'", "\"Confidence\"", "'Decision'", "'Yes'", ":", ",",
                                        "0.5", "1000", "-3", "1e9", "No Objects", "\"", "'", "\\", " ", "\x00",
                                        "\xff", "[1,2,3,4]", "nan", "true"};
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1);
  std::uniform_int_distribution<int> len(0, 30), byte(0, 255);
  for (int trial = 0; trial < 20000; ++trial) {
    std::string s;
    for (int i = len(rng); i > 0; --i) {
      if (trial % 3 == 0) s.push_back(static_cast<char>(byte(rng)));
      else s += pieces[pick(rng)];
    }
    DetectionParse d;
    VerdictParse v;
    ASSERT_NO_THROW(d = parse_detection(s));
    ASSERT_NO_THROW(v = parse_verdict(s));
    ASSERT_EQ(all_flags(d.report), d.response.has_value());
    ASSERT_EQ(all_flags(v.report), v.response.has_value());
    if (d.response) {
      for (const auto& it : d.response->items) {
        ASSERT_TRUE(is_valid(it.box));
        ASSERT_GE(it.confidence, 0.0);
        ASSERT_LE(it.confidence, 1.0);
      }
    }
    if (v.response) {
      ASSERT_GE(v.response->confidence, 0.0);
      ASSERT_LE(v.response->confidence, 1.0);
    }
  }
}
