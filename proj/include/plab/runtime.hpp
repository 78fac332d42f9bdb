#pragma once

// Micro-runtime: a small pre-norm decoder-only transformer (RMS norm, rotary
// positions, multi-head attention, SiLU MLP) with hidden-state taps, an
// externally writable KV cache, residual-stream steering and attention-level
// KV patching.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "plab/rng.hpp"
#include "plab/tokenizer.hpp"
#include "plab/trace.hpp"

namespace plab {

struct ModelDims {
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_head = 16;
  std::uint32_t d_ff = 256;
  std::uint32_t n_layers = 4;
  std::uint32_t vocab_size = tok::kMinVocab;
  std::uint32_t max_context = 1024;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  bool operator==(const ModelDims&) const = default;
};

struct LayerWeights {
  std::vector<float> attn_norm;  // [d_model]
  std::vector<float> wq, wk, wv;  // [d_model][d_model], row = output
  std::vector<float> wo;          // [d_model][d_model]
  std::vector<float> mlp_norm;    // [d_model]
  std::vector<float> w_in;        // [d_ff][d_model]
  std::vector<float> w_out;       // [d_model][d_ff]

  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelDims dims;
  std::vector<float> tok_embed;  // [vocab][d_model]
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // [d_model]
  std::vector<float> unembed;     // [vocab][d_model]

  bool operator==(const ModelWeights&) const = default;

  /// Throws std::invalid_argument on inconsistent shapes or non-finite entries.
  void validate() const;

  /// Zero-filled weights with unit norm gains.
  static ModelWeights zeros(const ModelDims& dims);
  /// Seeded Gaussian initialization; `logit_scale` sets the typical logit spread.
  static ModelWeights random(const ModelDims& dims, std::uint64_t seed, double logit_scale = 2.0);
};

void write_weights(const ModelWeights& w, std::ostream& out);
ModelWeights read_weights(std::istream& in);
void save_weights(const ModelWeights& w, const std::string& path);
ModelWeights load_weights(const std::string& path);

struct ContextOverflow : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// KV cache

/// Keys (post-rotary) and values of a contiguous position span at every layer.
struct SpanKV {
  Span span;
  std::vector<std::vector<double>> keys;    // [layer][position-in-span * d_model]
  std::vector<std::vector<double>> values;  // same layout

  bool operator==(const SpanKV&) const = default;
};

class KVCache {
 public:
  KVCache() = default;
  KVCache(std::uint32_t n_layers, std::uint32_t width, std::uint32_t max_context);
  explicit KVCache(const ModelDims& dims) : KVCache(dims.n_layers, dims.d_model, dims.max_context) {}

  std::size_t length() const { return length_; }
  std::uint32_t layers() const { return static_cast<std::uint32_t>(keys_.size()); }
  std::uint32_t width() const { return width_; }
  std::uint32_t capacity() const { return max_context_; }

  std::span<const double> key(std::uint32_t layer, std::size_t pos) const;
  std::span<const double> value(std::uint32_t layer, std::size_t pos) const;
  std::span<double> key(std::uint32_t layer, std::size_t pos);
  std::span<double> value(std::uint32_t layer, std::size_t pos);

  void truncate(std::size_t length);
  SpanKV extract(Span span) const;
  void clear() { truncate(0); }

  bool operator==(const KVCache&) const = default;

 private:
  friend class ForwardPass;
  void reserve_position(std::size_t pos);

  std::uint32_t width_ = 0;
  std::uint32_t max_context_ = 0;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

// ---------------------------------------------------------------------------
// Interventions

struct PositionPredicate {
  enum class Kind : std::uint8_t { AllFrom, Explicit, LastOnly };
  Kind kind = Kind::AllFrom;
  std::size_t from = 0;                // AllFrom: positions >= from
  std::vector<std::size_t> positions;  // Explicit

  static PositionPredicate all() { return {}; }
  static PositionPredicate all_from(std::size_t p) { return {Kind::AllFrom, p, {}}; }
  static PositionPredicate only(std::vector<std::size_t> ps) { return {Kind::Explicit, 0, std::move(ps)}; }
  /// Last position of each forward call.
  static PositionPredicate last() { return {Kind::LastOnly, 0, {}}; }
};

/// Adds `coefficient * vector` to the residual stream after the block output
/// of every layer in [layer_lo, layer_hi] at matching positions.
struct SteeringSpec {
  std::uint32_t layer_lo = 0;
  std::uint32_t layer_hi = 0;
  PositionPredicate where;
  std::vector<double> vector;
  double coefficient = 1.0;

  void validate(const ModelDims& dims) const;
};

/// Replace the KV entries of `target` (all layers) with donor entries.
/// Positions >= onset are the first to attend to the replaced entries.
struct PatchSpec {
  Span target;
  SpanKV donor;
  std::size_t onset = 0;

  void validate() const;
};

void apply_patch(KVCache& cache, const PatchSpec& patch);

enum class PatchMode : std::uint8_t { Full, InSpan, Complement, None };
std::string_view to_string(PatchMode m);
PatchMode parse_patch_mode(std::string_view s);

/// Attention-level patch: for positions >= onset, attention output is computed
/// against the original cache and against the cache with `target` replaced by
/// the donor entries. Full adds the patched output; other modes add the
/// original output plus the delta passed through `filter`.
struct AttentionOverride {
  PatchSpec patch;
  PatchMode mode = PatchMode::Full;
  std::function<void(std::span<double>)> filter;  // in-place delta projection
};

// ---------------------------------------------------------------------------
// Forward pass

struct HiddenState {
  std::uint32_t layer = 0;
  std::size_t position = 0;
  std::vector<double> values;
};

/// Residual-stream delta contributed by an attention override.
struct PatchDelta {
  std::uint32_t layer = 0;
  std::size_t position = 0;
  std::vector<double> added;  // what the selected mode added on top of the original output
  std::vector<double> full;   // patched minus original attention output
};

struct ForwardOptions {
  std::vector<std::uint32_t> taps;
  const SteeringSpec* steering = nullptr;
  const AttentionOverride* override = nullptr;
  bool record_deltas = false;
  // Tap the residual after the attention add instead of after the full block.
  bool tap_post_attention = false;
};

struct ForwardResult {
  std::vector<std::vector<double>> logits;  // one row per new position
  std::vector<HiddenState> hidden;          // ordered by (position, layer)
  std::vector<PatchDelta> deltas;
};

/// Runs `tokens` at positions cache.length() .. + n, appending to the cache.
ForwardResult forward(const ModelWeights& weights, std::span<const TokenId> tokens, KVCache& cache,
                      const ForwardOptions& options = {});

// ---------------------------------------------------------------------------
// Sessions and decoding

/// Weights + cache + logits history. Single owner; not shareable mid-flight.
class Session {
 public:
  explicit Session(std::shared_ptr<const ModelWeights> weights);

  const ModelWeights& weights() const { return *weights_; }
  std::shared_ptr<const ModelWeights> shared_weights() const { return weights_; }
  const KVCache& cache() const { return cache_; }
  KVCache& cache() { return cache_; }
  std::size_t length() const { return cache_.length(); }

  /// Logits emitted at the last fed position.
  const std::vector<double>& last_logits() const;
  const std::vector<double>& logits_at(std::size_t position) const;

  ForwardResult feed(std::span<const TokenId> tokens, const ForwardOptions& options = {});
  ForwardResult feed(TokenId token, const ForwardOptions& options = {});
  void truncate(std::size_t length);
  void reset() { truncate(0); }

 private:
  std::shared_ptr<const ModelWeights> weights_;
  KVCache cache_;
  std::vector<std::vector<double>> logits_;
};

/// T = 0 picks the argmax (lowest id on ties); otherwise inverse-CDF sampling
/// from softmax(logits / T) with one uniform draw.
TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng);

/// Per-position statistics recorder. Entropy and surprise always come from
/// the model's full T = 1 distribution.
struct TraceOptions {
  std::string model_id = "micro";
  std::string generator_id = "micro";
  std::string evaluator_id = "micro";
  TemplateCondition condition = TemplateCondition::AssistantField;
  std::optional<std::string> persona;
  std::vector<std::uint32_t> taps;
  std::size_t topk = kDefaultTopK;
  Role generated_role = Role::Assistant;
};

class TraceBuilder {
 public:
  TraceBuilder(const ModelWeights& weights, const TraceOptions& options, double temperature);

  /// `incoming` is the distribution the token was drawn from (null for the first token).
  void add(TokenId token, Role role, Origin origin, const std::vector<double>* incoming,
           const std::vector<double>& emitted);
  void add_hidden(const std::vector<HiddenState>& states);
  std::size_t size() const { return trace_.tokens.size(); }
  Trace finish() &&;

 private:
  Trace trace_;
  std::size_t topk_;
};

/// Teacher-forced scoring of a tagged sequence.
Trace score(const ModelWeights& weights, const TokenSeq& seq, const TraceOptions& options = {});

struct GenerateResult {
  Trace trace;
  TokenSeq tokens;  // prompt + generated
  bool truncated = false;
};

GenerateResult generate(const ModelWeights& weights, const TokenSeq& prompt, std::size_t n, double temperature,
                        std::uint64_t seed, const SteeringSpec* steering = nullptr,
                        const TraceOptions& options = {});

/// Continues decoding in an existing session (which must have been fed at
/// least one token). Appends generated tokens to `tokens` and records to
/// `builder` when non-null. Returns false if the context filled up first.
bool decode(Session& session, std::size_t n, double temperature, Rng& rng, TokenSeq& tokens,
            const ForwardOptions& options = {}, TraceBuilder* builder = nullptr,
            Role role = Role::Assistant);

}  // namespace plab
