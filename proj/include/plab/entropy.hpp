#pragma once

// Observational statistics over traces: entropy kernels, role-conditional
// summaries, generator x evaluator matrices, self-advantage, single-step
// surprise sweeps, the relative-excess-surprise feedback fit, entropy
// trajectories and body-window entropy.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/tokenizer.hpp"
#include "plab/trace.hpp"

namespace plab {

class Session;

// ---------------------------------------------------------------------------
// Distribution kernels

/// Shannon entropy (nats) of softmax(logits / T), max-subtracted.
/// T = 0 returns 0 by convention. Throws on non-finite logits or T < 0.
double entropy_of(std::span<const double> logits, double temperature = 1.0);
std::vector<double> log_softmax(std::span<const double> logits);
/// -log p(token) under softmax(logits).
double surprise_of(std::span<const double> logits, TokenId token);
/// Token ids by decreasing probability; ties go to the lower id.
std::vector<TokenId> rank_order(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Role statistics

struct Summary {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double stddev = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
};

Summary summarize(std::vector<double> values);

struct RoleStats {
  std::map<Role, Summary> by_role;               // roles with no tokens are absent
  std::map<Role, std::vector<double>> values;    // per-token predicted entropies
};

struct RoleStatsOptions {
  bool include_special = false;
};

/// Groups each record's predicted entropy by the role of the emitting position.
RoleStats role_stats(std::span<const Trace> traces, const RoleStatsOptions& options = {});

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};
Histogram histogram(std::span<const double> values, std::size_t bins, double lo, double hi);

// ---------------------------------------------------------------------------
// Cross-model matrices

enum class Tristate : std::uint8_t { False, True, Indeterminate };
std::string_view to_string(Tristate t);

struct CrossMatrix {
  std::vector<std::string> generators;  // rows, sorted
  std::vector<std::string> evaluators;  // columns, sorted
  TemplateCondition condition = TemplateCondition::AssistantField;
  std::vector<std::vector<std::optional<double>>> cells;  // [generator][evaluator], mean nats
  std::vector<std::vector<std::size_t>> counts;           // tokens per cell
};

struct CrossMatrixResult {
  CrossMatrix matrix;
  std::vector<Tristate> diagonal_minimum;  // per evaluator column
};

/// Role whose tokens carry the evaluated response text under a condition.
Role response_role(TemplateCondition condition);

/// Cell = token-weighted mean predicted entropy over response-span tokens of
/// every trace in the (generator, evaluator) cell. Traces of other conditions
/// (or other personas, when `persona` is given) are ignored.
CrossMatrixResult cross_matrix(std::span<const Trace> traces, TemplateCondition condition,
                               const std::optional<std::string>& persona = std::nullopt);
std::vector<TemplateCondition> conditions_present(std::span<const Trace> traces);
std::vector<Tristate> diagonal_minimum_flags(const CrossMatrix& m);

struct SelfAdvantage {
  std::string evaluator;
  bool defined = false;  // false when the column lacks the diagonal or any cross cell
  double self = 0.0;
  double cross_mean = 0.0;
  double cross_min = 0.0;
  double cross_max = 0.0;
  double advantage = 0.0;  // cross_mean - self
  std::size_t n_cross = 0;
};

std::vector<SelfAdvantage> self_advantage(const CrossMatrix& m);

/// Size-class / training-stage aggregation: one row per (group, condition).
struct GroupedAdvantage {
  std::string group;
  TemplateCondition condition = TemplateCondition::AssistantField;
  double self_mean = 0.0;
  double cross_mean = 0.0;
  double cross_min = 0.0;
  double cross_max = 0.0;
  std::size_t n_models = 0;
};

std::vector<GroupedAdvantage> aggregate_advantage(std::span<const CrossMatrixResult> matrices,
                                                  const std::map<std::string, std::string>& group_of);

// ---------------------------------------------------------------------------
// Single-step surprise sweep and the feedback fit

struct SweepRecord {
  std::string context_id;
  double baseline_H = 0.0;
  std::size_t rank = 0;
  TokenId token_id = 0;
  double surprise = 0.0;
  double next_H = 0.0;
  std::optional<double> rel_excess;  // (S - H) / H, only when H >= floor
  std::optional<double> rel_delta;   // (H' - H) / H
};

std::vector<std::size_t> default_ranks(std::size_t n = 20);

/// Feeds `context` after the session's current state, then for each rank r
/// appends the rank-r token of the context's next-token distribution and
/// records the entropy at the new position. The session is restored.
std::vector<SweepRecord> single_step_sweep(Session& session, std::span<const TokenId> context,
                                           std::span<const std::size_t> ranks, const std::string& context_id);

struct FeedbackFit {
  double a = 0.0;
  double beta = 0.0;
  double rmse = 0.0;
  std::size_t n_points = 0;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double rmse = 0.0;
  std::size_t n = 0;
};

/// Ordinary least squares y = slope * x + intercept.
LinearFit ols(std::span<const double> x, std::span<const double> y);

/// OLS of rel_delta on rel_excess over records carrying both.
FeedbackFit fit_feedback(std::span<const SweepRecord> records);

// ---------------------------------------------------------------------------
// Trajectories and body entropy

struct Trajectory {
  std::vector<std::uint32_t> positions;
  std::vector<double> raw;
  std::vector<double> smoothed;
  std::size_t window = 1;  // after clamping
  double slope = 0.0;      // nats per token, OLS over the raw series
  double intercept = 0.0;
};

/// Centered moving average of the predicted entropy (truncated at the edges).
Trajectory trajectory(const Trace& trace, std::size_t window);

struct TrajectoryBand {
  std::vector<double> mean;  // per record index
  std::vector<double> stddev;
  std::vector<std::size_t> count;
};
TrajectoryBand trajectory_band(std::span<const Trace> traces, std::size_t window);

struct BodyEntropy {
  double mean = 0.0;
  std::size_t start = 0;  // response-token ordinals actually used: [start, end)
  std::size_t end = 0;
  std::size_t count = 0;
};

/// Mean predicted entropy over response tokens with ordinal in [start, min(end, n)).
BodyEntropy body_entropy(const Trace& trace, std::size_t start = 6, std::size_t end = 300);

// ---------------------------------------------------------------------------
// Emitters (stable column schemas)

std::string format_real(double x);

void write_role_stats_csv(std::ostream& os, const RoleStats& stats);
void write_matrix_csv(std::ostream& os, const CrossMatrix& m);
void write_matrix_flags_csv(std::ostream& os, const CrossMatrixResult& r);
void write_self_advantage_csv(std::ostream& os, const CrossMatrix& m, std::span<const SelfAdvantage> rows);
void write_grouped_advantage_csv(std::ostream& os, std::span<const GroupedAdvantage> rows);
void write_sweep_csv(std::ostream& os, std::span<const SweepRecord> records);
std::vector<SweepRecord> read_sweep_csv(std::istream& is);
void write_fit_csv(std::ostream& os, const FeedbackFit& fit);
void write_trajectory_csv(std::ostream& os, const std::string& trace_id, const Trajectory& t);

nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const RoleStats& s);
nlohmann::json to_json(const CrossMatrixResult& r);
nlohmann::json to_json(const SelfAdvantage& s);
nlohmann::json to_json(const SweepRecord& r);
nlohmann::json to_json(const FeedbackFit& f);
nlohmann::json to_json(const Trajectory& t);
nlohmann::json to_json(const BodyEntropy& b);

}  // namespace plab
