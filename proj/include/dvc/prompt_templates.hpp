#pragma once

#include <string_view>

namespace dvc::prompts {

// Template resources. Any byte change to these strings is a protocol change
// and must bump kTemplateVersion; golden copies live in tests/golden/prompts.
inline constexpr std::string_view kTemplateVersion = "v1";
inline constexpr std::string_view kClassPlaceholder = "{class}";

// The rendered prompt shows the class in braces, e.g. "class {polyp}", so the
// placeholder sits inside a literal pair of braces.

inline constexpr std::string_view kDetectionTemplate =
    "Detect all objects of class {{class}} in the image.\n"
    "Return a list of bounding boxes with integer coordinates (x1,y1,x2,y2) \xE2\x88\x88 [0,1000] "
    "and a confidence \xE2\x88\x88 [0,1] (two decimals).\n"
    "If no object exists, return \"No Objects\".\n"
    "Answer format: <think>...</think><answer>[{'Position': [x1,y1,x2,y2], 'Confidence': c}, "
    "...]</answer>\n";

inline constexpr std::string_view kVerificationTemplate =
    "Examine the cropped region and decide if it contains a {{class}}.\n"
    "Return a binary decision (\"Yes\" / \"No\") and a confidence \xE2\x88\x88 [0,1] (two "
    "decimals).\n"
    "Answer format: <think>...</think><answer>[{'Decision': 'Yes/No', 'Confidence': "
    "c}]</answer>\n";

}  // namespace dvc::prompts
