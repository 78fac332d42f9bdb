#include "plab/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "plab/binary_io.hpp"

namespace plab {

using nlohmann::json;

namespace {

constexpr char kTraceMagic[4] = {'P', 'L', 'T', 'R'};
constexpr std::uint16_t kTraceVersion = 1;

template <typename Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::string_view (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<Enum>(i);
  }
  throw std::invalid_argument(std::string("unknown ") + what + ": " + std::string(s));
}

constexpr std::string_view kConditionNames[] = {"AssistantField", "UserField", "NoTemplate"};
constexpr std::string_view kRoleNames[] = {"System", "User", "Assistant", "Untagged"};
constexpr std::string_view kOriginNames[] = {"TeacherForced", "Sampled", "Prefilled"};
constexpr std::string_view kFeatureNames[] = {
    "PredEntropy",     "NextPredEntropy", "IncomingEntropy", "IncomingSurprise", "PrevSurprise",
    "EmaEntropyBack",  "EmaEntropyFwd",   "EmaSurpriseBack", "EmaSurpriseFwd",   "ExcessSurprise",
};

bool finite_nonneg(double x) { return std::isfinite(x) && x >= 0.0; }

json meta_to_json(const TraceMeta& m) {
  json j;
  j["model_id"] = m.model_id;
  j["vocab_size"] = m.vocab_size;
  j["d_model"] = m.d_model;
  j["n_layers"] = m.n_layers;
  j["captured_layers"] = m.captured_layers;
  j["template_condition"] = std::string(to_string(m.template_condition));
  j["generator_id"] = m.generator_id;
  j["evaluator_id"] = m.evaluator_id;
  if (m.persona) j["persona"] = *m.persona;
  j["temperature"] = m.temperature;
  j["special_token_ids"] = m.special_token_ids;
  return j;
}

TraceMeta meta_from_json(const json& j) {
  TraceMeta m;
  try {
    m.model_id = j.at("model_id").get<std::string>();
    m.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    m.d_model = j.at("d_model").get<std::uint32_t>();
    m.n_layers = j.at("n_layers").get<std::uint32_t>();
    m.captured_layers = j.at("captured_layers").get<std::vector<std::uint32_t>>();
    m.template_condition = parse_condition(j.at("template_condition").get<std::string>());
    m.generator_id = j.at("generator_id").get<std::string>();
    m.evaluator_id = j.at("evaluator_id").get<std::string>();
    if (j.contains("persona") && !j["persona"].is_null()) m.persona = j["persona"].get<std::string>();
    m.temperature = j.at("temperature").get<double>();
    if (j.contains("special_token_ids")) {
      m.special_token_ids = j["special_token_ids"].get<std::vector<std::uint32_t>>();
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad trace header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bad trace header: ") + e.what());
  }
  return m;
}

}  // namespace

std::string_view to_string(TemplateCondition c) { return kConditionNames[static_cast<int>(c)]; }
std::string_view to_string(Role r) { return kRoleNames[static_cast<int>(r)]; }
std::string_view to_string(Origin o) { return kOriginNames[static_cast<int>(o)]; }
std::string_view to_string(Feature f) { return kFeatureNames[static_cast<int>(f)]; }

TemplateCondition parse_condition(std::string_view s) {
  return parse_enum<TemplateCondition>(s, kConditionNames, "template condition");
}
Role parse_role(std::string_view s) { return parse_enum<Role>(s, kRoleNames, "role"); }
Feature parse_feature(std::string_view s) { return parse_enum<Feature>(s, kFeatureNames, "feature"); }

bool Trace::is_special(std::uint32_t token_id) const {
  return std::find(meta.special_token_ids.begin(), meta.special_token_ids.end(), token_id) !=
         meta.special_token_ids.end();
}

TraceValidationError::TraceValidationError(const std::string& what, std::optional<std::uint32_t> position)
    : std::runtime_error(position ? what + " (position " + std::to_string(*position) + ")" : what),
      position_(position) {}

bool low_entropy(const TokenRecord& r) { return r.incoming_entropy < kEntropyFloor; }

void validate(const Trace& t) {
  const TraceMeta& m = t.meta;
  if (m.vocab_size < 2) throw TraceValidationError("vocab_size must be >= 2");
  if (m.d_model < 1) throw TraceValidationError("d_model must be positive");
  if (m.n_layers < 1) throw TraceValidationError("n_layers must be positive");
  if (!finite_nonneg(m.temperature)) throw TraceValidationError("temperature must be finite and >= 0");
  for (auto layer : m.captured_layers) {
    if (layer >= m.n_layers) throw TraceValidationError("captured layer " + std::to_string(layer) + " out of range");
  }
  if (t.tokens.empty()) throw TraceValidationError("trace has no token records");

  const std::size_t k = t.tokens.front().topk.size();
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    const TokenRecord& r = t.tokens[i];
    const auto pos = r.position;
    if (i > 0 && r.position <= t.tokens[i - 1].position) {
      throw TraceValidationError("positions not strictly increasing", pos);
    }
    if (r.token_id >= m.vocab_size) throw TraceValidationError("token_id out of vocabulary", pos);
    if (static_cast<int>(r.role) > 3) throw TraceValidationError("bad role tag", pos);
    if (static_cast<int>(r.origin) > 2) throw TraceValidationError("bad origin tag", pos);
    if (!finite_nonneg(r.surprise)) throw TraceValidationError("surprise must be finite and >= 0", pos);
    if (!finite_nonneg(r.incoming_entropy)) throw TraceValidationError("incoming entropy must be finite and >= 0", pos);
    if (!finite_nonneg(r.predicted_entropy)) throw TraceValidationError("predicted entropy must be finite and >= 0", pos);
    if (r.topk.size() != k) throw TraceValidationError("inconsistent top-k width", pos);
    for (std::size_t j = 0; j < r.topk.size(); ++j) {
      const auto& e = r.topk[j];
      if (e.token_id >= m.vocab_size) throw TraceValidationError("top-k token out of vocabulary", pos);
      if (std::isnan(e.logprob) || e.logprob > 0.0f) throw TraceValidationError("top-k logprob must be <= 0", pos);
      if (j > 0 && e.logprob > r.topk[j - 1].logprob) throw TraceValidationError("top-k logprobs not nonincreasing", pos);
    }
    // Min-entropy bound: when the realized token is the predecessor's argmax,
    // its surprise is -log p_max, which never exceeds the entropy.
    if (i > 0 && k > 0 && t.tokens[i - 1].position + 1 == r.position &&
        t.tokens[i - 1].topk.front().token_id == r.token_id) {
      const double tol = 1e-9 * std::max(1.0, r.incoming_entropy);
      if (r.surprise > r.incoming_entropy + tol) {
        throw TraceValidationError("argmax token has surprise above incoming entropy", pos);
      }
      const double s_max = -static_cast<double>(t.tokens[i - 1].topk.front().logprob);
      if (r.incoming_entropy + 1e-5 * std::max(1.0, s_max) < s_max) {
        throw TraceValidationError("incoming entropy below -log p_max of predecessor", pos);
      }
    }
  }

  for (std::size_t i = 0; i < t.hidden.size(); ++i) {
    const HiddenRecord& h = t.hidden[i];
    if (i > 0) {
      const auto& p = t.hidden[i - 1];
      if (std::pair(h.position, h.layer) <= std::pair(p.position, p.layer)) {
        throw TraceValidationError("hidden records not strictly ordered by (position, layer)", h.position);
      }
    }
    if (std::find(m.captured_layers.begin(), m.captured_layers.end(), h.layer) == m.captured_layers.end()) {
      throw TraceValidationError("hidden layer " + std::to_string(h.layer) + " not captured", h.position);
    }
    if (h.vector.size() != m.d_model) throw TraceValidationError("hidden vector length != d_model", h.position);
    for (float v : h.vector) {
      if (!std::isfinite(v)) throw TraceValidationError("non-finite hidden entry", h.position);
    }
    const auto it = std::lower_bound(t.tokens.begin(), t.tokens.end(), h.position,
                                     [](const TokenRecord& r, std::uint32_t p) { return r.position < p; });
    const bool known = it != t.tokens.end() && it->position == h.position;
    if (!known) throw TraceValidationError("hidden record at unknown position", h.position);
  }
}

std::size_t write_trace(const Trace& trace, std::ostream& out) {
  validate(trace);
  json header = meta_to_json(trace.meta);
  header["k"] = trace.topk_width();
  header["record_count"] = trace.tokens.size();
  header["hidden_count"] = trace.hidden.size();
  const std::string header_text = header.dump();

  std::size_t bytes = 0;
  out.write(kTraceMagic, 4);
  le::put<std::uint16_t>(out, kTraceVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(header_text.size()));
  le::put_bytes(out, header_text);
  bytes += 4 + 2 + 4 + header_text.size();

  for (const auto& r : trace.tokens) {
    le::put<std::uint32_t>(out, r.position);
    le::put<std::uint32_t>(out, r.token_id);
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.role));
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(r.origin));
    le::put<double>(out, r.surprise);
    le::put<double>(out, r.incoming_entropy);
    le::put<double>(out, r.predicted_entropy);
    for (const auto& e : r.topk) {
      le::put<std::uint32_t>(out, e.token_id);
      le::put<float>(out, e.logprob);
    }
    bytes += 4 + 4 + 1 + 1 + 3 * 8 + r.topk.size() * 8;
  }
  for (const auto& h : trace.hidden) {
    le::put<std::uint32_t>(out, h.position);
    le::put<std::uint16_t>(out, h.layer);
    for (float v : h.vector) le::put<float>(out, v);
    bytes += 4 + 2 + h.vector.size() * 4;
  }
  if (!out) throw std::runtime_error("failed writing trace");
  return bytes;
}

Trace read_trace(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kTraceMagic)) {
    throw FormatError("not a trace container (bad magic)");
  }
  const auto version = le::get<std::uint16_t>(in, "version");
  if (version != kTraceVersion) throw FormatError("unsupported trace version " + std::to_string(version));
  const auto header_len = le::get<std::uint32_t>(in, "header length");
  const std::string header_text = le::get_bytes(in, header_len, "header");

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("trace header is not JSON: ") + e.what());
  }
  Trace t;
  t.meta = meta_from_json(header);
  std::size_t k = 0, n_records = 0, n_hidden = 0;
  try {
    k = header.at("k").get<std::size_t>();
    n_records = header.at("record_count").get<std::size_t>();
    n_hidden = header.value("hidden_count", std::size_t{0});
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad trace header: ") + e.what());
  }

  t.tokens.resize(n_records);
  for (auto& r : t.tokens) {
    r.position = le::get<std::uint32_t>(in, "token record");
    r.token_id = le::get<std::uint32_t>(in, "token record");
    const auto role = le::get<std::uint8_t>(in, "token record");
    const auto origin = le::get<std::uint8_t>(in, "token record");
    if (role > 3) throw TraceValidationError("bad role tag", r.position);
    if (origin > 2) throw TraceValidationError("bad origin tag", r.position);
    r.role = static_cast<Role>(role);
    r.origin = static_cast<Origin>(origin);
    r.surprise = le::get<double>(in, "token record");
    r.incoming_entropy = le::get<double>(in, "token record");
    r.predicted_entropy = le::get<double>(in, "token record");
    r.topk.resize(k);
    for (auto& e : r.topk) {
      e.token_id = le::get<std::uint32_t>(in, "top-k entry");
      e.logprob = le::get<float>(in, "top-k entry");
    }
  }
  t.hidden.resize(n_hidden);
  for (auto& h : t.hidden) {
    h.position = le::get<std::uint32_t>(in, "hidden block");
    h.layer = le::get<std::uint16_t>(in, "hidden block");
    h.vector.resize(t.meta.d_model);
    for (auto& v : h.vector) v = le::get<float>(in, "hidden block");
  }
  validate(t);
  return t;
}

void save_trace(const Trace& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_trace(trace, out);
}

Trace load_trace(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_trace(in);
}

// ---------------------------------------------------------------------------

double ema_alpha(double halflife) {
  if (!(halflife > 0.0)) throw std::invalid_argument("EMA halflife must be > 0");
  return 1.0 - std::exp2(-1.0 / halflife);
}

std::vector<double> ema_backward(const std::vector<double>& x, double halflife) {
  const double alpha = ema_alpha(halflife);
  std::vector<double> e(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    e[t] = t == 0 ? x[0] : alpha * x[t] + (1.0 - alpha) * e[t - 1];
  }
  return e;
}

std::vector<double> ema_forward(const std::vector<double>& x, double halflife) {
  std::vector<double> reversed(x.rbegin(), x.rend());
  auto e = ema_backward(reversed, halflife);
  std::reverse(e.begin(), e.end());
  return e;
}

FeatureSeries derive_feature(const Trace& trace, Feature feature, const FeatureParams& params) {
  const auto& toks = trace.tokens;
  const std::size_t n = toks.size();
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();

  FeatureSeries out;
  out.feature = feature;
  out.positions.reserve(n);
  for (const auto& r : toks) out.positions.push_back(r.position);

  auto column = [&](auto field) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = toks[i].*field;
    return v;
  };

  switch (feature) {
    case Feature::PredEntropy:
      out.values = column(&TokenRecord::predicted_entropy);
      break;
    case Feature::NextPredEntropy:
      out.values.assign(n, nan);
      for (std::size_t i = 0; i + 1 < n; ++i) {
        if (toks[i + 1].position == toks[i].position + 1) out.values[i] = toks[i + 1].predicted_entropy;
      }
      break;
    case Feature::IncomingEntropy:
      out.values = column(&TokenRecord::incoming_entropy);
      break;
    case Feature::IncomingSurprise:
      out.values = column(&TokenRecord::surprise);
      break;
    case Feature::PrevSurprise:
      out.values.assign(n, nan);
      for (std::size_t i = 1; i < n; ++i) {
        if (toks[i - 1].position + 1 == toks[i].position) out.values[i] = toks[i - 1].surprise;
      }
      break;
    case Feature::EmaEntropyBack:
      out.values = ema_backward(column(&TokenRecord::incoming_entropy), params.halflife);
      out.ema = {EmaDirection::Backward, params.halflife};
      break;
    case Feature::EmaEntropyFwd:
      out.values = ema_forward(column(&TokenRecord::incoming_entropy), params.halflife);
      out.ema = {EmaDirection::Forward, params.halflife};
      break;
    case Feature::EmaSurpriseBack:
      out.values = ema_backward(column(&TokenRecord::surprise), params.halflife);
      out.ema = {EmaDirection::Backward, params.halflife};
      break;
    case Feature::EmaSurpriseFwd:
      out.values = ema_forward(column(&TokenRecord::surprise), params.halflife);
      out.ema = {EmaDirection::Forward, params.halflife};
      break;
    case Feature::ExcessSurprise:
      out.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) out.values[i] = toks[i].surprise - toks[i].incoming_entropy;
      break;
  }
  return out;
}

}  // namespace plab
