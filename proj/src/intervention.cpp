#include "plab/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace plab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Steering sweeps

std::vector<double> steering_vector(const CentroidSet& set, std::size_t bin, double frac) {
  if (bin >= set.bins) throw std::out_of_range("steering bin out of range");
  const std::vector<double> mean = set.grand_mean();
  const auto row = set.row(bin);
  std::vector<double> v(set.dim);
  for (std::size_t i = 0; i < set.dim; ++i) v[i] = frac * (row[i] - mean[i]);
  return v;
}

double steered_entropy(const ModelWeights& weights, std::span<const TokenId> context, const SteeringSpec* steering,
                       std::size_t measure_position) {
  if (measure_position >= context.size()) throw std::out_of_range("measurement position beyond the context");
  KVCache cache(weights.dims);
  ForwardOptions options;
  options.steering = steering;
  const ForwardResult r = forward(weights, context, cache, options);
  return entropy_of(r.logits[measure_position]);
}

SteeringSweepResult steering_sweep(const ModelWeights& weights, std::span<const SteeringContext> contexts,
                                   const CentroidSet& set, const SteeringSweepOptions& options) {
  set.validate();
  if (set.dim != weights.dims.d_model) {
    throw std::invalid_argument("centroid dimension " + std::to_string(set.dim) + " does not match d_model " +
                                std::to_string(weights.dims.d_model));
  }
  if (contexts.empty()) throw std::invalid_argument("steering sweep needs at least one context");
  SteeringSweepResult out;
  out.feature = set.feature;
  out.source_layer = set.layer;
  out.condition = set.condition;
  out.frac = options.frac;
  out.layer_lo = options.layer_lo;
  out.layer_hi = options.layer_hi;

  auto measure_at = [&](const SteeringContext& c) {
    if (c.tokens.empty()) throw std::invalid_argument("empty steering context: " + c.id);
    return options.measure_position.value_or(c.tokens.size() - 1);
  };
  for (const auto& c : contexts) {
    out.context_ids.push_back(c.id);
    out.baseline_H0.push_back(steered_entropy(weights, c.tokens, nullptr, measure_at(c)));
  }
  out.baseline_mean = std::accumulate(out.baseline_H0.begin(), out.baseline_H0.end(), 0.0) /
                      static_cast<double>(contexts.size());

  for (std::size_t b = 0; b < set.bins; ++b) {
    SteeringSpec spec;
    spec.layer_lo = options.layer_lo;
    spec.layer_hi = options.layer_hi;
    spec.where = options.where;
    spec.vector = steering_vector(set, b, options.frac);
    spec.coefficient = 1.0;
    spec.validate(weights.dims);
    SteeringBin bin;
    bin.bin_feature_mean = set.bin_feature_means[b];
    for (const auto& c : contexts) bin.per_context.push_back(steered_entropy(weights, c.tokens, &spec, measure_at(c)));
    const Summary s = summarize(bin.per_context);
    bin.entropy_mean = s.mean;
    bin.entropy_stddev = s.stddev;
    out.bins.push_back(std::move(bin));
  }

  std::vector<double> x, y;
  for (const auto& b : out.bins) {
    x.push_back(b.bin_feature_mean);
    y.push_back(b.entropy_mean);
  }
  try {
    out.trend = ols(x, y);
  } catch (const std::exception&) {
  }
  return out;
}

// ---------------------------------------------------------------------------
// Verdict readout

VerdictReadout verdict_probability(Session& session, std::span<const TokenId> prefilled,
                                   std::span<const TokenId> not_prefilled, const ForwardOptions& options) {
  if (prefilled.empty() || not_prefilled.empty()) throw std::invalid_argument("empty verdict continuation");
  if (session.length() == 0) throw std::invalid_argument("verdict readout needs a transcript");
  const std::size_t base = session.length();
  const std::size_t longest = std::max(prefilled.size(), not_prefilled.size());
  if (base + longest - 1 > session.weights().dims.max_context) throw ContextOverflow("verdict continuation does not fit");

  ForwardOptions opt = options;
  opt.taps.clear();
  opt.record_deltas = false;
  auto score = [&](std::span<const TokenId> cont) {
    double total = log_softmax(session.last_logits())[cont[0]];
    if (cont.size() > 1) {
      const ForwardResult r = session.feed(cont.first(cont.size() - 1), opt);
      for (std::size_t i = 1; i < cont.size(); ++i) total += log_softmax(r.logits[i - 1])[cont[i]];
      session.truncate(base);
    }
    return total;
  };
  VerdictReadout out;
  out.logp_prefilled = score(prefilled);
  out.logp_not_prefilled = score(not_prefilled);
  const double d = out.logp_not_prefilled - out.logp_prefilled;
  out.p_prefilled = d > 0 ? std::exp(-d) / (1.0 + std::exp(-d)) : 1.0 / (1.0 + std::exp(d));
  return out;
}

VerdictReadout verdict_probability(Session& session, const ForwardOptions& options) {
  const auto p = tok::encode(kVerdictPrefilled);
  const auto n = tok::encode(kVerdictNotPrefilled);
  return verdict_probability(session, p, n, options);
}

// ---------------------------------------------------------------------------
// Prefill experiment

std::string_view to_string(PrefillDirection d) {
  return d == PrefillDirection::InduceFalsePositive ? "InduceFalsePositive" : "SuppressTruePositive";
}

std::string_view to_string(PrefillArm a) {
  switch (a) {
    case PrefillArm::PrefillOnly: return "PrefillOnly";
    case PrefillArm::PrefillPlusPatch: return "PrefillPlusPatch";
    case PrefillArm::NoPrefill: return "NoPrefill";
    case PrefillArm::NoPrefillPlusPatch: return "NoPrefillPlusPatch";
  }
  return "?";
}

PrefillDirection parse_direction(std::string_view s) {
  if (s == "InduceFalsePositive") return PrefillDirection::InduceFalsePositive;
  if (s == "SuppressTruePositive") return PrefillDirection::SuppressTruePositive;
  throw std::invalid_argument("unknown direction: " + std::string(s));
}

namespace {

RenderedChat render_prompt(const std::string& system, const std::string& user) {
  return render_chat({{Role::System, system}, {Role::User, user}}, true);
}

}  // namespace

SpanKV donor_kv(const ModelWeights& weights, const std::string& system_prompt, const std::string& donor_prompt,
                Span expected_span) {
  const RenderedChat donor = render_prompt(system_prompt, donor_prompt);
  const Span span = donor.content.at(1);
  if (span.size() != expected_span.size()) {
    throw std::invalid_argument("user spans of unequal token length: " + std::to_string(expected_span.size()) +
                                " vs " + std::to_string(span.size()));
  }
  if (span.begin != expected_span.begin) throw std::invalid_argument("user spans start at different positions");
  KVCache cache(weights.dims);
  forward(weights, std::span<const TokenId>(donor.tokens.ids).first(span.end), cache);
  return cache.extract(span);
}

std::function<void(std::span<double>)> subspace_filter(const SubspaceBasis& basis, PatchMode mode) {
  if (mode != PatchMode::InSpan && mode != PatchMode::Complement) {
    throw std::invalid_argument("subspace filter needs InSpan or Complement");
  }
  const bool keep_span = mode == PatchMode::InSpan;
  return [&basis, keep_span](std::span<double> d) { project_in_place(d, basis, keep_span); };
}

VerdictResult run_prefill_arm(const ModelWeights& weights, const PrefillExperimentConfig& config, bool prefill,
                              bool patch) {
  config.pair.validate();
  VerdictResult out;
  out.domain = config.pair.domain;
  out.direction = config.direction;
  out.arm = prefill ? (patch ? PrefillArm::PrefillPlusPatch : PrefillArm::PrefillOnly)
                    : (patch ? PrefillArm::NoPrefillPlusPatch : PrefillArm::NoPrefill);
  out.patch_mode = patch ? config.patch_mode : PatchMode::None;
  out.onset_offset = config.onset_offset;
  if (config.onset_offset > config.answer_tokens) {
    throw std::invalid_argument("onset lies beyond the start of the verdict analysis");
  }

  const RenderedChat chat = render_prompt(config.system_prompt, config.pair.underspecified);
  out.user_span = chat.content.at(1);
  out.tokens = chat.tokens;

  auto shared = std::make_shared<const ModelWeights>(weights);
  Session session(shared);
  session.feed(chat.tokens.ids);
  if (prefill) {
    const auto ids = tok::encode(config.pair.prefill);
    out.tokens.append(ids, Role::Assistant, Origin::Prefilled);
    session.feed(ids);
  }
  out.generation_start = session.length();
  out.onset = out.generation_start + config.onset_offset;

  AttentionOverride override;
  ForwardOptions options;
  options.record_deltas = config.record_deltas;
  if (out.patch_mode != PatchMode::None) {
    const std::string donor = config.donor_prompt.value_or(config.pair.specific);
    override.patch = PatchSpec{out.user_span, donor_kv(weights, config.system_prompt, donor, out.user_span), out.onset};
    override.mode = out.patch_mode;
    if (out.patch_mode != PatchMode::Full) {
      if (!config.basis) throw std::invalid_argument("subspace-filtered patching needs a basis");
      if (config.basis->dim != weights.dims.d_model) throw std::invalid_argument("basis dimension mismatch");
      override.filter = subspace_filter(*config.basis, out.patch_mode);
    }
    options.override = &override;
  }

  // Patched and unpatched arms share a stream so pre-onset tokens agree.
  Rng rng(substream_seed(config.seed, "prefill/" + config.pair.domain + (prefill ? "/prefilled" : "/free")));
  std::vector<PatchDelta> deltas;
  ForwardOptions decode_options = options;
  decode_options.record_deltas = false;
  if (config.record_deltas) {
    // Token-by-token so deltas can be collected.
    for (std::size_t i = 0; i < config.answer_tokens; ++i) {
      if (session.length() + 1 > weights.dims.max_context) {
        out.truncated = true;
        break;
      }
      const TokenId t = sample_token(session.last_logits(), config.temperature, rng);
      out.tokens.push(t, Role::Assistant, Origin::Sampled);
      auto r = session.feed(t, options);
      deltas.insert(deltas.end(), r.deltas.begin(), r.deltas.end());
    }
  } else {
    out.truncated = !decode(session, config.answer_tokens, config.temperature, rng, out.tokens, decode_options,
                            nullptr, Role::Assistant);
  }

  const auto cue = tok::encode(kVerdictCue);
  const std::size_t verdict_room = tok::encode(kVerdictNotPrefilled).size();
  if (session.length() + cue.size() + verdict_room > weights.dims.max_context) {
    throw ContextOverflow("transcript does not leave room for the verdict");
  }
  out.tokens.append(cue, Role::Assistant);
  {
    auto r = session.feed(cue, options);
    deltas.insert(deltas.end(), r.deltas.begin(), r.deltas.end());
  }
  out.verdict = verdict_probability(session, options);
  if (config.record_deltas) out.deltas = std::move(deltas);
  if (config.keep_logits) {
    for (std::size_t p = 0; p < session.length(); ++p) out.logits.push_back(session.logits_at(p));
  }

  out.transcript = tok::decode(out.tokens.ids);
  if (prefill) {
    const std::size_t start = tok::decode(std::span<const TokenId>(out.tokens.ids).first(chat.tokens.size())).size();
    out.prefill_bytes = ByteSpan{start, start + config.pair.prefill.size()};
  }
  return out;
}

PrefillExperimentResult prefill_experiment(const ModelWeights& weights, const PrefillExperimentConfig& config) {
  PrefillExperimentResult out;
  out.direction = config.direction;
  for (PrefillArm a : {PrefillArm::PrefillOnly, PrefillArm::PrefillPlusPatch, PrefillArm::NoPrefill,
                       PrefillArm::NoPrefillPlusPatch}) {
    const bool prefill = a == PrefillArm::PrefillOnly || a == PrefillArm::PrefillPlusPatch;
    const bool patch = a == PrefillArm::PrefillPlusPatch || a == PrefillArm::NoPrefillPlusPatch;
    out.arms[static_cast<std::size_t>(a)] = run_prefill_arm(weights, config, prefill, patch);
  }
  return out;
}

PrefillExperimentResult subspace_filtered_patch(const ModelWeights& weights, PrefillExperimentConfig config,
                                                const SubspaceBasis& basis, PatchMode mode) {
  if (basis.dim != weights.dims.d_model) throw std::invalid_argument("basis dimension mismatch");
  config.patch_mode = mode;
  config.basis = &basis;
  return prefill_experiment(weights, config);
}

// ---------------------------------------------------------------------------
// Emitters

json to_json(const VerdictResult& r) {
  json j = {{"domain", r.domain},
            {"arm", std::string(to_string(r.arm))},
            {"direction", std::string(to_string(r.direction))},
            {"patch_mode", std::string(to_string(r.patch_mode))},
            {"p_prefilled", r.verdict.p_prefilled},
            {"logp_prefilled", r.verdict.logp_prefilled},
            {"logp_not_prefilled", r.verdict.logp_not_prefilled},
            {"onset", r.onset},
            {"onset_offset", r.onset_offset},
            {"generation_start", r.generation_start},
            {"user_span", {r.user_span.begin, r.user_span.end}},
            {"truncated", r.truncated}};
  if (r.prefill_bytes) j["prefill_bytes"] = {r.prefill_bytes->begin, r.prefill_bytes->end};
  return j;
}

json to_json(const PrefillExperimentConfig& c) {
  return {{"pair", c.pair.domain},
          {"direction", std::string(to_string(c.direction))},
          {"onset_offset", c.onset_offset},
          {"patch_mode", std::string(to_string(c.patch_mode))},
          {"answer_tokens", c.answer_tokens},
          {"temperature", c.temperature},
          {"seed", c.seed},
          {"donor_prompt", c.donor_prompt.value_or(c.pair.specific)}};
}

json to_json(const SteeringSweepResult& r) {
  json bins = json::array();
  for (const auto& b : r.bins) {
    bins.push_back({{"bin_feature_mean", b.bin_feature_mean},
                    {"entropy_mean", b.entropy_mean},
                    {"entropy_stddev", b.entropy_stddev},
                    {"per_context", b.per_context}});
  }
  json j = {{"feature", std::string(to_string(r.feature))},
            {"source_layer", r.source_layer},
            {"condition", r.condition},
            {"frac", r.frac},
            {"layer_range", {r.layer_lo, r.layer_hi}},
            {"context_ids", r.context_ids},
            {"baseline_H0", r.baseline_H0},
            {"baseline_mean", r.baseline_mean},
            {"bins", bins}};
  if (r.trend) j["slope"] = r.trend->slope;
  return j;
}

void write_steering_csv(std::ostream& os, const SteeringSweepResult& r) {
  os << "feature,source_layer,condition,frac,layer_lo,layer_hi,bin,bin_feature_mean,entropy_mean,entropy_stddev,"
        "baseline_mean\n";
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    os << to_string(r.feature) << ',' << r.source_layer << ',' << r.condition << ',' << format_real(r.frac) << ','
       << r.layer_lo << ',' << r.layer_hi << ',' << b << ',' << format_real(r.bins[b].bin_feature_mean) << ','
       << format_real(r.bins[b].entropy_mean) << ',' << format_real(r.bins[b].entropy_stddev) << ','
       << format_real(r.baseline_mean) << '\n';
  }
}

}  // namespace plab
