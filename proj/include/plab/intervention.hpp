#pragma once

// Interventional protocols on the micro-runtime: centroid steering sweeps,
// verdict-probability readout, the four-arm KV-patch prefill experiment and
// subspace-filtered patching.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/entropy.hpp"
#include "plab/geometry.hpp"
#include "plab/prompts.hpp"
#include "plab/runtime.hpp"

namespace plab {

// ---------------------------------------------------------------------------
// Steering sweeps

struct SteeringContext {
  std::string id;
  std::vector<TokenId> tokens;
};

struct SteeringSweepOptions {
  double frac = 0.5;
  std::uint32_t layer_lo = 0;
  std::uint32_t layer_hi = 0;
  PositionPredicate where = PositionPredicate::all();
  std::optional<std::size_t> measure_position;  // default: final context position
};

struct SteeringBin {
  double bin_feature_mean = 0.0;
  double entropy_mean = 0.0;
  double entropy_stddev = 0.0;      // over contexts (population)
  std::vector<double> per_context;
};

struct SteeringSweepResult {
  Feature feature = Feature::PredEntropy;
  std::uint32_t source_layer = 0;
  std::string condition;
  double frac = 0.0;
  std::uint32_t layer_lo = 0;
  std::uint32_t layer_hi = 0;
  std::vector<std::string> context_ids;
  std::vector<double> baseline_H0;  // per context
  double baseline_mean = 0.0;
  std::vector<SteeringBin> bins;    // ordered by bin_feature_mean
  std::optional<LinearFit> trend;   // entropy_mean on bin_feature_mean
};

/// frac * (centroid_b - grand mean of the set's source activations).
std::vector<double> steering_vector(const CentroidSet& set, std::size_t bin, double frac);

/// Entropy of the distribution emitted at `measure_position` with optional steering.
double steered_entropy(const ModelWeights& weights, std::span<const TokenId> context, const SteeringSpec* steering,
                       std::size_t measure_position);

SteeringSweepResult steering_sweep(const ModelWeights& weights, std::span<const SteeringContext> contexts,
                                   const CentroidSet& set, const SteeringSweepOptions& options);

// ---------------------------------------------------------------------------
// Verdict readout

struct VerdictReadout {
  double p_prefilled = 0.5;
  double logp_prefilled = 0.0;      // summed over the continuation's tokens
  double logp_not_prefilled = 0.0;
};

/// Scores " PREFILLED" against " NOT PREFILLED" after the session's current
/// state (which must end at the verdict cue). The session is restored.
VerdictReadout verdict_probability(Session& session, const ForwardOptions& options = {});
VerdictReadout verdict_probability(Session& session, std::span<const TokenId> prefilled,
                                   std::span<const TokenId> not_prefilled, const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Prefill experiment

enum class PrefillDirection : std::uint8_t { InduceFalsePositive, SuppressTruePositive };
enum class PrefillArm : std::uint8_t { PrefillOnly, PrefillPlusPatch, NoPrefill, NoPrefillPlusPatch };
std::string_view to_string(PrefillDirection d);
std::string_view to_string(PrefillArm a);
PrefillDirection parse_direction(std::string_view s);

struct PrefillExperimentConfig {
  PromptPair pair;
  PrefillDirection direction = PrefillDirection::SuppressTruePositive;
  std::size_t onset_offset = 0;  // relative to the first generated token; at most answer_tokens
  PatchMode patch_mode = PatchMode::Full;
  std::size_t answer_tokens = 24;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::string system_prompt = prefill_system_prompt();
  std::optional<std::string> donor_prompt;  // default: the pair's specific prompt
  const SubspaceBasis* basis = nullptr;     // required for InSpan / Complement
  bool record_deltas = false;
  bool keep_logits = false;
};

struct ByteSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct VerdictResult {
  std::string domain;
  PrefillArm arm = PrefillArm::NoPrefill;
  PrefillDirection direction = PrefillDirection::SuppressTruePositive;
  PatchMode patch_mode = PatchMode::None;
  VerdictReadout verdict;
  std::size_t onset = 0;
  std::size_t onset_offset = 0;
  std::size_t generation_start = 0;
  Span user_span;
  std::string transcript;
  std::optional<ByteSpan> prefill_bytes;
  TokenSeq tokens;
  bool truncated = false;
  std::vector<PatchDelta> deltas;            // when record_deltas
  std::vector<std::vector<double>> logits;   // per position, when keep_logits
};

struct PrefillExperimentResult {
  PrefillDirection direction = PrefillDirection::SuppressTruePositive;
  std::array<VerdictResult, 4> arms;  // indexed by PrefillArm

  const VerdictResult& arm(PrefillArm a) const { return arms[static_cast<std::size_t>(a)]; }
};

/// Donor KV: the user-content span of the donor prompt under the same system prompt.
SpanKV donor_kv(const ModelWeights& weights, const std::string& system_prompt, const std::string& donor_prompt,
                Span expected_span);

/// One arm. `patch` = false or mode None runs the unpatched control.
VerdictResult run_prefill_arm(const ModelWeights& weights, const PrefillExperimentConfig& config, bool prefill,
                              bool patch);

/// Runs all four arms (prefill x patch).
PrefillExperimentResult prefill_experiment(const ModelWeights& weights, const PrefillExperimentConfig& config);

/// Delta filter keeping the in-span or complement component.
std::function<void(std::span<double>)> subspace_filter(const SubspaceBasis& basis, PatchMode mode);

PrefillExperimentResult subspace_filtered_patch(const ModelWeights& weights, PrefillExperimentConfig config,
                                                const SubspaceBasis& basis, PatchMode mode);

nlohmann::json to_json(const VerdictResult& r);
nlohmann::json to_json(const PrefillExperimentConfig& c);
nlohmann::json to_json(const SteeringSweepResult& r);
void write_steering_csv(std::ostream& os, const SteeringSweepResult& r);

}  // namespace plab
