#pragma once

// Trace data model and the "PLTR" container.
//
// A trace is the exchange object between capture, the micro-runtime and every
// analysis: one record per token with entropy/surprise bookkeeping in nats,
// plus optional hidden-state vectors at selected layers.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace plab {

enum class TemplateCondition : std::uint8_t { AssistantField, UserField, NoTemplate };
enum class Role : std::uint8_t { System = 0, User = 1, Assistant = 2, Untagged = 3 };
enum class Origin : std::uint8_t { TeacherForced = 0, Sampled = 1, Prefilled = 2 };

std::string_view to_string(TemplateCondition c);
std::string_view to_string(Role r);
std::string_view to_string(Origin o);
TemplateCondition parse_condition(std::string_view s);
Role parse_role(std::string_view s);

/// Entropies below this floor are flagged; ratio quantities skip them.
inline constexpr double kEntropyFloor = 1e-4;
inline constexpr std::size_t kDefaultTopK = 32;

struct TraceMeta {
  std::string model_id;
  std::uint32_t vocab_size = 2;
  std::uint32_t d_model = 1;
  std::uint32_t n_layers = 1;
  std::vector<std::uint32_t> captured_layers;
  TemplateCondition template_condition = TemplateCondition::AssistantField;
  std::string generator_id;
  std::string evaluator_id;
  std::optional<std::string> persona;
  double temperature = 0.0;
  // Template/delimiter token ids; analytics exclude them from role means by default.
  std::vector<std::uint32_t> special_token_ids;

  bool operator==(const TraceMeta&) const = default;
};

struct TopKEntry {
  std::uint32_t token_id = 0;
  float logprob = 0.0f;
  bool operator==(const TopKEntry&) const = default;
};

struct TokenRecord {
  std::uint32_t position = 0;
  std::uint32_t token_id = 0;
  Role role = Role::Untagged;
  Origin origin = Origin::TeacherForced;
  double surprise = 0.0;           // S_t: -log P_{t-1}(token_t)
  double incoming_entropy = 0.0;   // H_t: entropy of the distribution token_t was drawn from
  double predicted_entropy = 0.0;  // H_{t+1}: entropy of the distribution this position emits
  std::vector<TopKEntry> topk;     // top-k of the distribution this position emits

  bool operator==(const TokenRecord&) const = default;
};

struct HiddenRecord {
  std::uint32_t position = 0;
  std::uint16_t layer = 0;
  std::vector<float> vector;
  bool operator==(const HiddenRecord&) const = default;
};

struct Trace {
  TraceMeta meta;
  std::vector<TokenRecord> tokens;
  std::vector<HiddenRecord> hidden;  // ordered by (position, layer); empty when absent

  bool operator==(const Trace&) const = default;

  /// Number of top-k pairs per record (all records agree, checked by validate).
  std::size_t topk_width() const { return tokens.empty() ? 0 : tokens.front().topk.size(); }
  bool is_special(std::uint32_t token_id) const;
};

/// Raised when a trace violates an invariant. `position` names the first
/// failing record when the failure is record-local.
class TraceValidationError : public std::runtime_error {
 public:
  TraceValidationError(const std::string& what, std::optional<std::uint32_t> position = std::nullopt);
  std::optional<std::uint32_t> position() const { return position_; }

 private:
  std::optional<std::uint32_t> position_;
};

void validate(const Trace& trace);

bool low_entropy(const TokenRecord& r);

std::size_t write_trace(const Trace& trace, std::ostream& out);
Trace read_trace(std::istream& in);

void save_trace(const Trace& trace, const std::string& path);
Trace load_trace(const std::string& path);

// ---------------------------------------------------------------------------
// Derived per-position features

enum class Feature : std::uint8_t {
  PredEntropy,
  NextPredEntropy,
  IncomingEntropy,
  IncomingSurprise,
  PrevSurprise,
  EmaEntropyBack,
  EmaEntropyFwd,
  EmaSurpriseBack,
  EmaSurpriseFwd,
  ExcessSurprise,
};

inline constexpr Feature kAllFeatures[] = {
    Feature::PredEntropy,     Feature::NextPredEntropy, Feature::IncomingEntropy, Feature::IncomingSurprise,
    Feature::PrevSurprise,    Feature::EmaEntropyBack,  Feature::EmaEntropyFwd,   Feature::EmaSurpriseBack,
    Feature::EmaSurpriseFwd,  Feature::ExcessSurprise,
};

std::string_view to_string(Feature f);
Feature parse_feature(std::string_view s);

enum class EmaDirection : std::uint8_t { Backward, Forward };

struct FeatureParams {
  double halflife = 5.0;  // tokens
};

/// One value per token record; NaN where the feature is undefined
/// (previous surprise at the first record, next prediction at the last).
struct FeatureSeries {
  Feature feature = Feature::PredEntropy;
  std::vector<std::uint32_t> positions;
  std::vector<double> values;
  std::optional<std::pair<EmaDirection, double>> ema;  // direction, halflife
};

double ema_alpha(double halflife);
std::vector<double> ema_backward(const std::vector<double>& x, double halflife);
std::vector<double> ema_forward(const std::vector<double>& x, double halflife);

FeatureSeries derive_feature(const Trace& trace, Feature feature, const FeatureParams& params = {});

}  // namespace plab
