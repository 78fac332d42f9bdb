#pragma once

// Topic commitment on underspecified prompts and the on-policy / off-policy
// prefill crossover.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "plab/prompts.hpp"
#include "plab/runtime.hpp"
#include "plab/trace.hpp"

namespace plab {

struct TopicLexicon {
  // domain -> topic -> keywords (case-folded; multi-word keywords allowed)
  std::map<std::string, std::map<std::string, std::vector<std::string>>> domains;

  void validate() const;
  const std::map<std::string, std::vector<std::string>>& topics(const std::string& domain) const;

  static TopicLexicon from_json(const nlohmann::json& j);
};

TopicLexicon load_lexicon(const std::string& path);
/// The bundled lexicon covering the eight prompt-pair domains.
std::string default_lexicon_path();

inline constexpr std::size_t kTopicWindow = 50;

/// Lower-cased alphanumeric words of `text`, in order.
std::vector<std::string> words_of(std::string_view text);

/// Earliest keyword hit within the first `window` words wins; at equal start
/// the longer keyword, then the lexicographically smaller topic. nullopt when
/// nothing matches. Throws on empty text.
std::optional<std::string> topic_classify(std::string_view text, const TopicLexicon& lexicon,
                                          const std::string& domain, std::size_t window = kTopicWindow);

struct CommitmentStats {
  std::string domain;
  std::size_t n_samples = 0;
  std::size_t classified = 0;
  std::size_t unclassified_count = 0;
  std::size_t distinct_topics = 0;
  std::optional<std::string> mode_topic;   // lexicographically smallest on ties
  std::optional<double> mode_fraction;     // over classified samples; absent when none classified
  std::map<std::string, std::size_t> topic_counts;

  bool defined() const { return mode_fraction.has_value(); }
};

CommitmentStats commitment_stats(std::span<const std::string> samples, const TopicLexicon& lexicon,
                                 const std::string& domain, std::size_t window = kTopicWindow);

struct CrossoverArm {
  std::vector<double> body_entropy;  // per included generation
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t excluded = 0;          // responses too short for the body window
};

struct CrossoverResult {
  std::string domain;
  CrossoverArm on_policy;
  CrossoverArm off_policy;
  std::optional<double> gap;  // off - on; absent if either arm is empty
};

inline constexpr std::size_t kBodyStart = 6;
inline constexpr std::size_t kBodyEnd = 300;

CrossoverResult crossover_from_traces(const std::string& domain, std::span<const Trace> on_policy,
                                      std::span<const Trace> off_policy, std::size_t body_start = kBodyStart,
                                      std::size_t body_end = kBodyEnd);

struct CrossoverConfig {
  PromptPair pair;
  std::size_t n = 10;
  std::size_t max_tokens = kBodyEnd;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::optional<std::string> system_prompt;
  std::size_t body_start = kBodyStart;
  std::size_t body_end = kBodyEnd;
};

struct CrossoverRun {
  CrossoverResult result;
  std::vector<Trace> on_policy;
  std::vector<Trace> off_policy;
};

/// on-policy: specific prompt + prefill; off-policy: underspecified prompt +
/// prefill. Generation i of both arms draws from the same seed substream.
CrossoverRun crossover_experiment(const ModelWeights& weights, const CrossoverConfig& config);

/// Chat prompt with an opened assistant turn, optionally followed by a prefill.
TokenSeq chat_prompt(const std::optional<std::string>& system, const std::string& user,
                     const std::string& prefill = {});

/// `n` sampled completions of `user` (decoded response text only).
std::vector<std::string> sample_completions(const ModelWeights& weights, const std::string& user, std::size_t n,
                                            std::size_t max_tokens, double temperature, std::uint64_t seed,
                                            const std::string& stream);

void write_commitment_csv(std::ostream& os, std::span<const CommitmentStats> rows);
void write_crossover_csv(std::ostream& os, std::span<const CrossoverResult> rows);
nlohmann::json to_json(const CommitmentStats& s);
nlohmann::json to_json(const CrossoverResult& r);

}  // namespace plab
