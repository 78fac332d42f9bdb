#pragma once

// Bundled prompt material: the twenty open-ended questions, the prefill
// detection system prompt, and the eight domain-matched prompt pairs.

#include <string>
#include <vector>

namespace plab {

struct PromptPair {
  std::string domain;
  std::string underspecified;
  std::string specific;
  std::string prefill;

  void validate() const;  // all fields nonempty
};

const std::vector<std::string>& open_prompts();
const std::string& prefill_system_prompt();
/// Underspecified and specific prompts have equal byte length, hence equal
/// token counts under the byte tokenizer.
const std::vector<PromptPair>& prompt_pairs();
const PromptPair& prompt_pair(const std::string& domain);

inline constexpr const char* kVerdictCue = "\n\nVERDICT:";
inline constexpr const char* kVerdictPrefilled = " PREFILLED";
inline constexpr const char* kVerdictNotPrefilled = " NOT PREFILLED";

}  // namespace plab
