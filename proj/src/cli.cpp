#include "plab/cli.hpp"
#include "plab/binary_io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "plab/entropy.hpp"
#include "plab/geometry.hpp"
#include "plab/intervention.hpp"
#include "plab/prompts.hpp"
#include "plab/runtime.hpp"
#include "plab/semantic.hpp"
#include "plab/svg.hpp"
#include "plab/trace.hpp"

namespace plab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kSubcommands = {"analyze",  "matrix",   "sweep",    "fit",      "centroids", "geometry",
                                               "steer",    "kv-patch", "semantic", "traject",  "report"};

ModelDims demo_dims() {
  ModelDims d;
  d.d_model = 32;
  d.n_heads = 4;
  d.d_head = 8;
  d.d_ff = 64;
  d.n_layers = 2;
  d.max_context = 2048;
  return d;
}

struct Params {
  std::string subcommand;
  std::uint64_t seed = 0;
  std::vector<std::string> traces;
  std::optional<std::string> weights;
  std::optional<std::pair<std::uint32_t, std::uint32_t>> layers;
  std::size_t bins = 20;
  double frac = 0.5;
  std::size_t ranks = 20;
  std::vector<std::string> formats = {"csv"};
  std::vector<std::string> inputs;
  ModelDims model = demo_dims();

  bool include_special = false;
  std::size_t prompts = 4;
  std::size_t n_tokens = 32;
  double temperature = 1.0;
  std::vector<std::string> conditions = {"AssistantField", "UserField", "NoTemplate"};
  std::optional<std::string> persona;
  std::map<std::string, std::string> group_of;
  std::vector<std::string> contexts;
  std::vector<std::string> features;
  double halflife = 5.0;
  bool matched_range = false;
  std::vector<std::string> domains;
  std::string direction = "SuppressTruePositive";
  std::size_t onset = 1;
  std::string patch_mode = "Full";
  std::size_t answer_tokens = 24;
  std::size_t samples = 50;
  std::size_t generations = 10;
  std::size_t max_tokens = 64;
  std::size_t body_start = kBodyStart;
  std::size_t body_end = kBodyEnd;
  std::optional<std::string> lexicon;
  std::size_t window = 9;

  bool want(const std::string& f) const { return std::find(formats.begin(), formats.end(), f) != formats.end(); }
};

const std::set<std::string> kCommonKeys = {"schema_version", "seed", "traces", "weights", "layers", "bins",
                                           "frac",           "ranks", "format", "inputs",  "model"};

const std::map<std::string, std::string> kDescriptions = {
    {"analyze", "per-role entropy statistics"},
    {"matrix", "generator x evaluator entropy matrices and self-advantage"},
    {"sweep", "single-step surprise sweep and feedback fit"},
    {"fit", "feedback fit over an existing sweep CSV"},
    {"centroids", "binned hidden-state centroids (PLCS)"},
    {"geometry", "CKA, Procrustes, matched cosine and PCA over centroid sets"},
    {"steer", "centroid-difference steering sweep"},
    {"kv-patch", "prefill-detection experiment with KV patching"},
    {"semantic", "commitment and crossover statistics"},
    {"traject", "smoothed entropy trajectories"},
    {"report", "markdown summary with reference values"}};

const std::map<std::string, std::set<std::string>> kSubcommandKeys = {
    {"analyze", {"include_special", "prompts", "n_tokens", "temperature", "conditions", "persona"}},
    {"matrix", {"group_of", "prompts", "n_tokens", "temperature", "conditions", "persona"}},
    {"sweep", {"contexts", "prompts"}},
    {"fit", {}},
    {"centroids", {"features", "halflife", "prompts", "n_tokens", "temperature"}},
    {"geometry", {"features", "halflife", "prompts", "n_tokens", "temperature", "matched_range"}},
    {"steer", {"features", "halflife", "prompts", "n_tokens", "temperature", "contexts"}},
    {"kv-patch",
     {"domains", "direction", "onset", "patch_mode", "answer_tokens", "temperature", "features", "halflife", "prompts",
      "n_tokens"}},
    {"semantic",
     {"domains", "samples", "generations", "max_tokens", "temperature", "lexicon", "body_start", "body_end"}},
    {"traject", {"window", "prompts", "n_tokens", "temperature", "conditions", "persona"}},
    {"report",
     {"include_special", "prompts", "n_tokens", "temperature", "conditions", "persona", "window", "group_of"}},
};

// ---------------------------------------------------------------------------
// Config parsing

std::size_t as_size(const json& j, const std::string& path) {
  if (!j.is_number_unsigned()) throw SchemaError(path + ": expected a nonnegative integer");
  return j.get<std::size_t>();
}
std::uint32_t as_u32(const json& j, const std::string& path) {
  const std::size_t v = as_size(j, path);
  if (v > 0xffffffffULL) throw SchemaError(path + ": value too large");
  return static_cast<std::uint32_t>(v);
}
double as_real(const json& j, const std::string& path) {
  if (!j.is_number()) throw SchemaError(path + ": expected a number");
  return j.get<double>();
}
std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw SchemaError(path + ": expected a string");
  return j.get<std::string>();
}
bool as_bool(const json& j, const std::string& path) {
  if (!j.is_boolean()) throw SchemaError(path + ": expected a boolean");
  return j.get<bool>();
}
std::vector<std::string> as_strings(const json& j, const std::string& path) {
  if (!j.is_array()) throw SchemaError(path + ": expected an array of strings");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_string(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

std::pair<std::uint32_t, std::uint32_t> parse_layers(const std::string& s, const std::string& path) {
  const auto dots = s.find("..");
  try {
    if (dots == std::string::npos) {
      std::size_t used = 0;
      const auto v = static_cast<std::uint32_t>(std::stoul(s, &used));
      if (used != s.size()) throw std::invalid_argument(s);
      return {v, v};
    }
    std::size_t u1 = 0, u2 = 0;
    const std::string a = s.substr(0, dots), b = s.substr(dots + 2);
    const auto lo = static_cast<std::uint32_t>(std::stoul(a, &u1));
    const auto hi = static_cast<std::uint32_t>(std::stoul(b, &u2));
    if (u1 != a.size() || u2 != b.size() || lo > hi) throw std::invalid_argument(s);
    return {lo, hi};
  } catch (const std::logic_error&) {
    throw SchemaError(path + ": expected a layer range a..b, got '" + s + "'");
  }
}

void apply_config(const json& cfg, Params& p) {
  if (!cfg.is_object()) throw SchemaError("$: config must be a JSON object");
  const auto& specific = kSubcommandKeys.at(p.subcommand);
  for (const auto& [key, value] : cfg.items()) {
    const std::string path = "$." + key;
    if (!kCommonKeys.count(key) && !specific.count(key)) {
      throw SchemaError(path + ": unknown key for subcommand '" + p.subcommand + "'");
    }
    if (key == "schema_version") {
      if (as_size(value, path) != 1) throw SchemaError(path + ": unsupported schema version");
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) throw SchemaError(path + ": expected a nonnegative integer");
      p.seed = value.get<std::uint64_t>();
    } else if (key == "traces") {
      p.traces = as_strings(value, path);
    } else if (key == "weights") {
      p.weights = as_string(value, path);
    } else if (key == "layers") {
      if (value.is_string()) {
        p.layers = parse_layers(value.get<std::string>(), path);
      } else if (value.is_array() && value.size() == 2) {
        p.layers = {as_u32(value[0], path + "[0]"), as_u32(value[1], path + "[1]")};
        if (p.layers->first > p.layers->second) throw SchemaError(path + ": lo > hi");
      } else {
        throw SchemaError(path + ": expected \"a..b\" or [a, b]");
      }
    } else if (key == "bins") {
      p.bins = as_size(value, path);
    } else if (key == "frac") {
      p.frac = as_real(value, path);
    } else if (key == "ranks") {
      p.ranks = as_size(value, path);
    } else if (key == "format") {
      p.formats = value.is_string() ? std::vector<std::string>{value.get<std::string>()} : as_strings(value, path);
    } else if (key == "inputs") {
      p.inputs = as_strings(value, path);
    } else if (key == "model") {
      if (!value.is_object()) throw SchemaError(path + ": expected an object");
      for (const auto& [mk, mv] : value.items()) {
        const std::string mp = path + "." + mk;
        if (mk == "d_model") p.model.d_model = as_u32(mv, mp);
        else if (mk == "n_heads") p.model.n_heads = as_u32(mv, mp);
        else if (mk == "d_head") p.model.d_head = as_u32(mv, mp);
        else if (mk == "d_ff") p.model.d_ff = as_u32(mv, mp);
        else if (mk == "n_layers") p.model.n_layers = as_u32(mv, mp);
        else if (mk == "vocab_size") p.model.vocab_size = as_u32(mv, mp);
        else if (mk == "max_context") p.model.max_context = as_u32(mv, mp);
        else throw SchemaError(mp + ": unknown key");
      }
    } else if (key == "include_special") {
      p.include_special = as_bool(value, path);
    } else if (key == "prompts") {
      p.prompts = as_size(value, path);
    } else if (key == "n_tokens") {
      p.n_tokens = as_size(value, path);
    } else if (key == "temperature") {
      p.temperature = as_real(value, path);
    } else if (key == "conditions") {
      p.conditions = as_strings(value, path);
    } else if (key == "persona") {
      p.persona = as_string(value, path);
    } else if (key == "group_of") {
      if (!value.is_object()) throw SchemaError(path + ": expected an object of model -> group");
      for (const auto& [m, g] : value.items()) p.group_of[m] = as_string(g, path + "." + m);
    } else if (key == "contexts") {
      p.contexts = as_strings(value, path);
    } else if (key == "features") {
      p.features = as_strings(value, path);
    } else if (key == "halflife") {
      p.halflife = as_real(value, path);
    } else if (key == "matched_range") {
      p.matched_range = as_bool(value, path);
    } else if (key == "domains") {
      p.domains = as_strings(value, path);
    } else if (key == "direction") {
      p.direction = as_string(value, path);
    } else if (key == "onset") {
      p.onset = as_size(value, path);
    } else if (key == "patch_mode") {
      p.patch_mode = as_string(value, path);
    } else if (key == "answer_tokens") {
      p.answer_tokens = as_size(value, path);
    } else if (key == "samples") {
      p.samples = as_size(value, path);
    } else if (key == "generations") {
      p.generations = as_size(value, path);
    } else if (key == "max_tokens") {
      p.max_tokens = as_size(value, path);
    } else if (key == "lexicon") {
      p.lexicon = as_string(value, path);
    } else if (key == "body_start") {
      p.body_start = as_size(value, path);
    } else if (key == "body_end") {
      p.body_end = as_size(value, path);
    } else if (key == "window") {
      p.window = as_size(value, path);
    }
  }
}

void check_params(const Params& p) {
  for (const auto& f : p.formats) {
    if (f != "csv" && f != "json" && f != "svg") throw SchemaError("$.format: unknown format '" + f + "'");
  }
  if (p.bins < 2) throw SchemaError("$.bins: need at least 2 bins");
  if (p.ranks < 1) throw SchemaError("$.ranks: need at least 1 rank");
  if (!(p.temperature >= 0.0)) throw SchemaError("$.temperature: must be >= 0");
  if (!(p.halflife > 0.0)) throw SchemaError("$.halflife: must be > 0");
  if (!std::isfinite(p.frac)) throw SchemaError("$.frac: must be finite");
  if (p.prompts < 1 || p.prompts > open_prompts().size()) throw SchemaError("$.prompts: must be in 1..20");
  if (p.n_tokens < 1) throw SchemaError("$.n_tokens: must be >= 1");
  if (p.window < 1) throw SchemaError("$.window: must be >= 1");
  if (p.samples < 1 || p.generations < 1 || p.max_tokens < 1) throw SchemaError("$.samples: counts must be >= 1");
  if (p.body_end <= p.body_start) throw SchemaError("$.body_end: must exceed body_start");
  if (p.model.d_model != p.model.n_heads * p.model.d_head) throw SchemaError("$.model: d_model != n_heads * d_head");
  if (p.model.vocab_size < tok::kMinVocab) throw SchemaError("$.model.vocab_size: must be >= 260");
  for (const auto& c : p.conditions) {
    try {
      parse_condition(c);
    } catch (const std::exception&) {
      throw SchemaError("$.conditions: unknown condition '" + c + "'");
    }
  }
  for (const auto& f : p.features) {
    try {
      parse_feature(f);
    } catch (const std::exception&) {
      throw SchemaError("$.features: unknown feature '" + f + "'");
    }
  }
  for (const auto& d : p.domains) {
    try {
      prompt_pair(d);
    } catch (const std::exception&) {
      throw SchemaError("$.domains: unknown domain '" + d + "'");
    }
  }
  try {
    parse_direction(p.direction);
  } catch (const std::exception&) {
    throw SchemaError("$.direction: expected InduceFalsePositive or SuppressTruePositive");
  }
  try {
    parse_patch_mode(p.patch_mode);
  } catch (const std::exception&) {
    throw SchemaError("$.patch_mode: expected Full, InSpan, Complement or None");
  }
}

json params_json(const Params& p) {
  json j = {{"subcommand", p.subcommand},
            {"seed", p.seed},
            {"traces", p.traces},
            {"bins", p.bins},
            {"frac", p.frac},
            {"ranks", p.ranks},
            {"format", p.formats},
            {"inputs", p.inputs},
            {"model",
             {{"d_model", p.model.d_model},
              {"n_heads", p.model.n_heads},
              {"d_head", p.model.d_head},
              {"d_ff", p.model.d_ff},
              {"n_layers", p.model.n_layers},
              {"vocab_size", p.model.vocab_size},
              {"max_context", p.model.max_context}}}};
  if (p.weights) j["weights"] = *p.weights;
  if (p.layers) j["layers"] = {p.layers->first, p.layers->second};
  for (const auto& key : kSubcommandKeys.at(p.subcommand)) {
    if (key == "include_special") j[key] = p.include_special;
    else if (key == "prompts") j[key] = p.prompts;
    else if (key == "n_tokens") j[key] = p.n_tokens;
    else if (key == "temperature") j[key] = p.temperature;
    else if (key == "conditions") j[key] = p.conditions;
    else if (key == "persona") j[key] = p.persona ? json(*p.persona) : json(nullptr);
    else if (key == "group_of") j[key] = p.group_of;
    else if (key == "contexts") j[key] = p.contexts;
    else if (key == "features") j[key] = p.features;
    else if (key == "halflife") j[key] = p.halflife;
    else if (key == "matched_range") j[key] = p.matched_range;
    else if (key == "domains") j[key] = p.domains;
    else if (key == "direction") j[key] = p.direction;
    else if (key == "onset") j[key] = p.onset;
    else if (key == "patch_mode") j[key] = p.patch_mode;
    else if (key == "answer_tokens") j[key] = p.answer_tokens;
    else if (key == "samples") j[key] = p.samples;
    else if (key == "generations") j[key] = p.generations;
    else if (key == "max_tokens") j[key] = p.max_tokens;
    else if (key == "lexicon") j[key] = p.lexicon ? json(*p.lexicon) : json(nullptr);
    else if (key == "body_start") j[key] = p.body_start;
    else if (key == "body_end") j[key] = p.body_end;
    else if (key == "window") j[key] = p.window;
  }
  return j;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("cannot read input " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void require_exists(const std::string& path) {
  if (!fs::exists(path)) throw MissingInput("input not found: " + path);
}

// ---------------------------------------------------------------------------
// Run context

class Context {
 public:
  Context(Params params, fs::path out, std::ostream& os) : p(std::move(params)), out_dir(std::move(out)), log(os) {}

  Params p;
  fs::path out_dir;
  std::ostream& log;
  std::map<std::string, bool> checks;
  std::vector<std::string> annotations;
  std::vector<std::string> input_paths;
  std::vector<std::string> files;

  void write(const std::string& name, const std::string& content) {
    const fs::path path = out_dir / name;
    fs::create_directories(path.parent_path());
    write_text_file(path.string(), content);
    files.push_back(name);
  }
  void check(const std::string& name, bool ok) {
    auto [it, inserted] = checks.emplace(name, ok);
    if (!inserted) it->second = it->second && ok;
  }
  void input(const std::string& path) {
    require_exists(path);
    input_paths.push_back(path);
  }

  void write_manifest() {
    json cfg = params_json(p);
    json inputs = json::array();
    for (const auto& path : input_paths) {
      inputs.push_back({{"path", path}, {"fnv1a64", hex64(fnv1a64(read_file(path)))}});
    }
    std::vector<std::string> sorted = files;
    std::sort(sorted.begin(), sorted.end());
    json m = {{"tool", "plab"},
              {"version", kVersion},
              {"subcommand", p.subcommand},
              {"seed", p.seed},
              {"config", cfg},
              {"config_hash", hex64(fnv1a64(cfg.dump()))},
              {"inputs", inputs},
              {"outputs", sorted},
              {"checks", checks},
              {"annotations", annotations}};
    const fs::path path = out_dir / "manifest.json";
    write_text_file(path.string(), m.dump(2) + "\n");
  }

  bool all_checks_pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& kv) { return kv.second; });
  }
};

std::string csv_of(const std::function<void(std::ostream&)>& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

// Appends CSV text, dropping the header line after the first block.
void append_csv(std::string& dst, const std::string& block) {
  if (dst.empty()) {
    dst = block;
    return;
  }
  const auto nl = block.find('\n');
  if (nl != std::string::npos) dst += block.substr(nl + 1);
}

// ---------------------------------------------------------------------------
// Models and demo data

struct NamedModel {
  std::string name;
  std::shared_ptr<const ModelWeights> weights;
};

std::shared_ptr<const ModelWeights> primary_weights(Context& c) {
  if (c.p.weights) {
    c.input(*c.p.weights);
    return std::make_shared<const ModelWeights>(load_weights(*c.p.weights));
  }
  return std::make_shared<const ModelWeights>(
      ModelWeights::random(c.p.model, substream_seed(c.p.seed, "model/micro-a"), 3.0));
}

std::vector<NamedModel> demo_models(Context& c) {
  std::vector<NamedModel> models;
  models.push_back({c.p.weights ? "primary" : "micro-a", primary_weights(c)});
  const ModelDims dims = models.front().weights->dims;
  for (const std::string name : {"micro-b", "micro-c"}) {
    models.push_back({name, std::make_shared<const ModelWeights>(
                                ModelWeights::random(dims, substream_seed(c.p.seed, "model/" + name), 3.0))});
  }
  return models;
}

std::string response_text(const ModelWeights& w, const Params& p, const std::string& prompt, const std::string& model,
                          std::size_t index) {
  const TokenSeq seq = chat_prompt(p.persona, prompt);
  const auto r = generate(w, seq, p.n_tokens, p.temperature,
                          substream_seed(p.seed, "gen/" + model + "/" + std::to_string(index)));
  std::vector<TokenId> ids(r.tokens.ids.begin() + static_cast<std::ptrdiff_t>(seq.size()), r.tokens.ids.end());
  std::erase_if(ids, [](TokenId t) { return t >= 256; });
  return tok::decode(ids);
}

struct DemoTrace {
  std::string id;
  Trace trace;
};

/// Every evaluator scores every generator's responses under each condition.
std::vector<DemoTrace> demo_traces(Context& c, const std::vector<std::string>& conditions,
                                   const std::vector<std::uint32_t>& taps, bool primary_evaluator_only) {
  const auto models = demo_models(c);
  std::vector<std::vector<std::string>> responses(models.size());
  for (std::size_t g = 0; g < models.size(); ++g) {
    for (std::size_t i = 0; i < c.p.prompts; ++i) {
      responses[g].push_back(response_text(*models[g].weights, c.p, open_prompts()[i], models[g].name, i));
    }
  }
  std::vector<DemoTrace> out;
  for (const auto& cond_name : conditions) {
    const TemplateCondition cond = parse_condition(cond_name);
    for (std::size_t e = 0; e < models.size(); ++e) {
      if (primary_evaluator_only && e > 0) break;
      for (std::size_t g = 0; g < models.size(); ++g) {
        for (std::size_t i = 0; i < c.p.prompts; ++i) {
          const RenderedChat chat = render_for_condition(cond, c.p.persona, open_prompts()[i], responses[g][i]);
          TraceOptions o;
          o.model_id = models[e].name;
          o.generator_id = models[g].name;
          o.evaluator_id = models[e].name;
          o.condition = cond;
          o.persona = c.p.persona;
          o.taps = taps;
          out.push_back({models[g].name + "_by_" + models[e].name + "_" + cond_name + "_p" + std::to_string(i),
                         score(*models[e].weights, chat.tokens, o)});
        }
      }
    }
  }
  c.annotations.push_back("demo traces generated by seeded micro-runtime models (no --trace given)");
  return out;
}

std::vector<DemoTrace> load_or_demo(Context& c, const std::vector<std::string>& conditions,
                                    const std::vector<std::uint32_t>& taps = {}, bool primary_only = false) {
  if (c.p.traces.empty()) return demo_traces(c, conditions, taps, primary_only);
  std::vector<DemoTrace> out;
  for (const auto& path : c.p.traces) {
    c.input(path);
    try {
      out.push_back({fs::path(path).stem().string(), load_trace(path)});
    } catch (const TraceValidationError& e) {
      throw InvariantError(path + ": " + e.what());
    } catch (const FormatError& e) {
      throw InvariantError(path + ": " + e.what());
    }
  }
  c.check("traces_valid", true);
  return out;
}

std::vector<Trace> just_traces(const std::vector<DemoTrace>& v) {
  std::vector<Trace> out;
  for (const auto& d : v) out.push_back(d.trace);
  return out;
}

std::pair<std::uint32_t, std::uint32_t> layer_range(const Params& p, const ModelDims& dims) {
  const auto r = p.layers.value_or(std::pair<std::uint32_t, std::uint32_t>{0, dims.n_layers - 1});
  if (r.second >= dims.n_layers) {
    throw SchemaError("$.layers: layer " + std::to_string(r.second) + " beyond the model's " +
                      std::to_string(dims.n_layers) + " layers");
  }
  return r;
}

std::vector<Feature> selected_features(const Params& p) {
  if (p.features.empty()) return {std::begin(kAllFeatures), std::end(kAllFeatures)};
  std::vector<Feature> out;
  for (const auto& f : p.features) out.push_back(parse_feature(f));
  return out;
}

std::string policy_label(const Trace& t) {
  return t.meta.generator_id == t.meta.evaluator_id ? "on-policy" : "off-policy";
}

struct CentroidBuild {
  std::vector<CentroidSet> sets;
  std::map<std::tuple<Feature, std::uint32_t, std::string>, BinSamples> samples;
};

CentroidBuild build_all_centroids(Context& c, const std::vector<DemoTrace>& traces, std::uint32_t lo,
                                  std::uint32_t hi) {
  CentroidBuild out;
  std::map<std::string, std::vector<Trace>> by_label;
  for (const auto& d : traces) by_label[policy_label(d.trace)].push_back(d.trace);
  FeatureParams fp;
  fp.halflife = c.p.halflife;
  for (Feature f : selected_features(c.p)) {
    for (std::uint32_t layer = lo; layer <= hi; ++layer) {
      for (const auto& [label, ts] : by_label) {
        BinSamples s = collect_samples(ts, f, layer, fp);
        if (s.values.size() < c.p.bins) {
          c.annotations.push_back("skipped " + std::string(to_string(f)) + " layer " + std::to_string(layer) + " " +
                                  label + ": " + std::to_string(s.values.size()) + " samples < bins");
          continue;
        }
        CentroidSet set = build_centroids(s, c.p.bins, f, layer, label);
        c.check("centroid_counts_sum", set.sample_count() == s.values.size());
        out.sets.push_back(std::move(set));
        out.samples[{f, layer, label}] = std::move(s);
      }
    }
  }
  return out;
}

std::vector<std::uint32_t> tap_list(std::uint32_t lo, std::uint32_t hi) {
  std::vector<std::uint32_t> taps;
  for (std::uint32_t l = lo; l <= hi; ++l) taps.push_back(l);
  return taps;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_analyze(Context& c) {
  const auto traces = just_traces(load_or_demo(c, c.p.conditions));
  RoleStatsOptions o;
  o.include_special = c.p.include_special;
  const RoleStats stats = role_stats(traces, o);
  for (const auto& [role, s] : stats.by_role) {
    c.log << "role " << to_string(role) << " mean " << format_real(s.mean) << " median " << format_real(s.median)
          << " n " << s.count << '\n';
    c.check("role_entropy_nonnegative", s.min >= 0.0);
  }
  if (c.p.want("csv")) c.write("role_stats.csv", csv_of([&](std::ostream& os) { write_role_stats_csv(os, stats); }));
  if (c.p.want("json")) c.write("role_stats.json", to_json(stats).dump(2) + "\n");
  if (c.p.want("svg")) c.write("role_stats.svg", svg_role_bars(stats));
  c.annotations.push_back(std::string("special tokens ") + (o.include_special ? "included in" : "excluded from") +
                          " role means");
  c.annotations.push_back("user-turn entropies are measured on teacher-forced tokens");
}

void cmd_matrix(Context& c) {
  const auto traces = just_traces(load_or_demo(c, c.p.conditions));
  std::string matrix_csv, flags_csv, adv_csv;
  json all = json::array();
  std::vector<CrossMatrixResult> results;
  for (TemplateCondition cond : conditions_present(traces)) {
    CrossMatrixResult r = cross_matrix(traces, cond, c.p.persona);
    for (std::size_t g = 0; g < r.matrix.generators.size(); ++g)
      for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e)
        if (r.matrix.cells[g][e]) c.check("reported_cells_have_tokens", r.matrix.counts[g][e] >= 1);
    const auto adv = self_advantage(r.matrix);
    append_csv(matrix_csv, csv_of([&](std::ostream& os) { write_matrix_csv(os, r.matrix); }));
    append_csv(flags_csv, csv_of([&](std::ostream& os) { write_matrix_flags_csv(os, r); }));
    append_csv(adv_csv, csv_of([&](std::ostream& os) { write_self_advantage_csv(os, r.matrix, adv); }));
    json j = to_json(r);
    j["self_advantage"] = json::array();
    for (const auto& a : adv) j["self_advantage"].push_back(to_json(a));
    all.push_back(j);
    for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e) {
      c.log << to_string(cond) << ' ' << r.matrix.evaluators[e] << " diagonal_is_column_min "
            << to_string(r.diagonal_minimum[e]) << '\n';
    }
    if (c.p.want("svg")) c.write("matrix_" + std::string(to_string(cond)) + ".svg", svg_matrix(r));
    results.push_back(std::move(r));
  }
  if (c.p.want("csv")) {
    c.write("matrix.csv", matrix_csv);
    c.write("matrix_flags.csv", flags_csv);
    c.write("self_advantage.csv", adv_csv);
  }
  if (!c.p.group_of.empty()) {
    const auto grouped = aggregate_advantage(results, c.p.group_of);
    if (c.p.want("csv"))
      c.write("grouped_advantage.csv", csv_of([&](std::ostream& os) { write_grouped_advantage_csv(os, grouped); }));
  }
  if (c.p.want("json")) c.write("matrix.json", all.dump(2) + "\n");
}

std::vector<SteeringContext> contexts_for(const Params& p) {
  std::vector<SteeringContext> out;
  if (!p.contexts.empty()) {
    for (std::size_t i = 0; i < p.contexts.size(); ++i)
      out.push_back({"ctx" + std::to_string(i), chat_prompt(std::nullopt, p.contexts[i]).ids});
  } else {
    for (std::size_t i = 0; i < p.prompts; ++i)
      out.push_back({"prompt" + std::to_string(i + 1), chat_prompt(std::nullopt, open_prompts()[i]).ids});
  }
  return out;
}

void cmd_sweep(Context& c) {
  auto weights = primary_weights(c);
  if (c.p.ranks > weights->dims.vocab_size) throw SchemaError("$.ranks: exceeds the vocabulary");
  Session session(weights);
  std::vector<SweepRecord> records;
  const auto ranks = default_ranks(c.p.ranks);
  for (const auto& ctx : contexts_for(c.p)) {
    session.reset();
    session.feed(ctx.tokens.front());
    const std::vector<double> before = session.last_logits();
    const std::size_t len = session.length();
    auto r = single_step_sweep(session, std::span<const TokenId>(ctx.tokens).subspan(1), ranks, ctx.id);
    c.check("session_restored", session.length() == len && session.last_logits() == before);
    for (std::size_t i = 1; i < r.size(); ++i) c.check("surprise_nondecreasing_in_rank", r[i].surprise >= r[i - 1].surprise);
    records.insert(records.end(), r.begin(), r.end());
  }
  if (c.p.want("csv")) c.write("sweep.csv", csv_of([&](std::ostream& os) { write_sweep_csv(os, records); }));
  json j = {{"records", json::array()}};
  for (const auto& r : records) j["records"].push_back(to_json(r));
  try {
    const FeedbackFit fit = fit_feedback(records);
    c.log << std::setprecision(10) << "a = " << fit.a << "\nbeta = " << fit.beta << '\n';
    c.check("fit_rmse_nonnegative", fit.rmse >= 0.0);
    j["fit"] = to_json(fit);
    if (c.p.want("csv")) c.write("fit.csv", csv_of([&](std::ostream& os) { write_fit_csv(os, fit); }));
    if (c.p.want("svg")) c.write("sweep.svg", svg_sweep(records, fit));
  } catch (const std::exception& e) {
    c.annotations.push_back(std::string("feedback fit unavailable: ") + e.what());
  }
  if (c.p.want("json")) c.write("sweep.json", j.dump(2) + "\n");
}

void cmd_fit(Context& c) {
  const std::string path = !c.p.inputs.empty() ? c.p.inputs.front() : std::string(PLAB_DATA_DIR) + "/sweep_synthetic.csv";
  c.input(path);
  std::ifstream in(path);
  std::vector<SweepRecord> records;
  try {
    records = read_sweep_csv(in);
  } catch (const std::invalid_argument& e) {
    throw SchemaError(path + ": " + e.what());
  }
  const FeedbackFit fit = fit_feedback(records);
  c.log << std::setprecision(10) << "a = " << fit.a << "\nbeta = " << fit.beta << "\nrmse = " << fit.rmse
        << "\nn_points = " << fit.n_points << '\n';
  c.check("fit_rmse_nonnegative", fit.rmse >= 0.0);
  c.check("fit_points", fit.n_points >= 2);
  if (c.p.want("csv")) c.write("fit.csv", csv_of([&](std::ostream& os) { write_fit_csv(os, fit); }));
  if (c.p.want("json")) c.write("fit.json", to_json(fit).dump(2) + "\n");
  if (c.p.want("svg")) c.write("sweep.svg", svg_sweep(records, fit));
}

CentroidBuild centroids_from_traces(Context& c, std::uint32_t& lo, std::uint32_t& hi) {
  auto weights = primary_weights(c);
  std::tie(lo, hi) = layer_range(c.p, weights->dims);
  const auto traces = load_or_demo(c, {"AssistantField"}, tap_list(lo, hi), true);
  return build_all_centroids(c, traces, lo, hi);
}

void cmd_centroids(Context& c) {
  std::uint32_t lo = 0, hi = 0;
  const CentroidBuild b = centroids_from_traces(c, lo, hi);
  if (b.sets.empty()) throw InvariantError("no centroid set could be built (too few samples)");
  std::ostringstream bin;
  write_centroid_sets(b.sets, bin);
  c.write("centroids.plcs", bin.str());
  if (c.p.want("csv")) c.write("centroids.csv", csv_of([&](std::ostream& os) { write_centroids_csv(os, b.sets); }));
  c.log << "centroid sets " << b.sets.size() << '\n';
  c.annotations.push_back("conditions: on-policy = generator equals evaluator, off-policy otherwise");
}

void cmd_geometry(Context& c) {
  std::vector<CentroidSet> sets;
  CentroidBuild built;
  if (!c.p.inputs.empty()) {
    for (const auto& path : c.p.inputs) {
      c.input(path);
      try {
        auto s = load_centroid_sets(path);
        sets.insert(sets.end(), s.begin(), s.end());
      } catch (const FormatError& e) {
        throw InvariantError(path + ": " + e.what());
      }
    }
  } else {
    std::uint32_t lo = 0, hi = 0;
    built = centroids_from_traces(c, lo, hi);
    sets = built.sets;
  }
  if (sets.empty()) throw InvariantError("no centroid sets");

  std::vector<GeometryRow> rows;
  std::string pca_csv;
  std::vector<PcPanel> panels;
  for (const auto& s : sets) {
    if (s.bins < 4) continue;
    const PcaResult pca = pca_top3(s);
    double sum = 0.0;
    for (std::size_t i = 0; i < pca.explained.size(); ++i) {
      sum += pca.explained[i];
      if (i > 0) c.check("pca_fractions_nonincreasing", pca.explained[i] <= pca.explained[i - 1] + 1e-12);
    }
    c.check("pca_fractions_sum_le_1", sum <= 1.0 + 1e-9);
    append_csv(pca_csv, csv_of([&](std::ostream& os) { write_pca_csv(os, s, pca); }));
    panels.push_back({std::string(to_string(s.feature)) + " L" + std::to_string(s.layer), s.condition, pca,
                      s.bin_feature_means});
  }
  // Pair sets with equal (feature, layer) across the first two conditions.
  std::set<std::string> conds;
  for (const auto& s : sets) conds.insert(s.condition);
  if (conds.size() >= 2) {
    const std::string ca = *conds.begin(), cb = *std::next(conds.begin());
    for (const auto& a : sets) {
      if (a.condition != ca) continue;
      for (const auto& b : sets) {
        if (b.condition != cb || b.feature != a.feature || b.layer != a.layer) continue;
        if (c.p.matched_range && !built.samples.empty()) {
          const MatchedPair m = rebin_matched(built.samples.at({a.feature, a.layer, ca}),
                                              built.samples.at({b.feature, b.layer, cb}), c.p.bins, a.feature,
                                              a.layer, ca, cb);
          auto r = compare_sets(m.a, m.b);
          rows.insert(rows.end(), r.begin(), r.end());
        } else if (a.bins == b.bins && a.dim == b.dim) {
          auto r = compare_sets(a, b);
          rows.insert(rows.end(), r.begin(), r.end());
        }
      }
    }
  }
  for (const auto& r : rows) {
    if (r.metric == "linear_cka" && r.value) c.check("cka_in_unit_interval", *r.value >= -1e-12 && *r.value <= 1 + 1e-12);
  }
  const SubspaceBasis basis = span_basis(sets);
  rows.push_back({"all", 0, "span_rank", static_cast<double>(basis.rank())});
  if (c.p.want("csv")) {
    c.write("geometry.csv", csv_of([&](std::ostream& os) { write_geometry_csv(os, rows); }));
    c.write("pca.csv", pca_csv);
  }
  if (c.p.want("json")) {
    json j = json::array();
    for (const auto& r : rows)
      j.push_back({{"feature", r.feature}, {"layer", r.layer}, {"metric", r.metric},
                   {"value", r.value ? json(*r.value) : json(nullptr)}});
    c.write("geometry.json", j.dump(2) + "\n");
  }
  if (c.p.want("svg") && !panels.empty()) c.write("pc_curves.svg", svg_pc_grid(panels));
  c.annotations.push_back("centering: each centroid set is centered by its own mean");
  c.annotations.push_back(c.p.matched_range ? "bins rebinned over the intersection of feature ranges"
                                            : "bins matched by index");
}

void cmd_steer(Context& c) {
  auto weights = primary_weights(c);
  const auto [lo, hi] = layer_range(c.p, weights->dims);
  CentroidSet set;
  if (!c.p.inputs.empty()) {
    c.input(c.p.inputs.front());
    const auto sets = load_centroid_sets(c.p.inputs.front());
    if (sets.empty()) throw InvariantError("centroid file holds no sets");
    set = sets.front();
    if (!c.p.features.empty()) {
      const Feature want = parse_feature(c.p.features.front());
      auto it = std::find_if(sets.begin(), sets.end(), [&](const CentroidSet& s) { return s.feature == want; });
      if (it == sets.end()) throw SchemaError("$.features: no centroid set for the requested feature");
      set = *it;
    }
  } else {
    Params saved = c.p;
    if (c.p.features.empty()) c.p.features = {"IncomingSurprise"};
    else c.p.features.resize(1);
    const auto traces = load_or_demo(c, {"AssistantField"}, {hi}, true);
    const CentroidBuild b = build_all_centroids(c, traces, hi, hi);
    c.p = saved;
    auto it = std::find_if(b.sets.begin(), b.sets.end(), [](const CentroidSet& s) { return s.condition == "on-policy"; });
    if (it == b.sets.end()) throw InvariantError("no on-policy centroid set could be built");
    set = *it;
  }
  SteeringSweepOptions o;
  o.frac = c.p.frac;
  o.layer_lo = lo;
  o.layer_hi = hi;
  const auto contexts = contexts_for(c.p);
  const SteeringSweepResult r = steering_sweep(*weights, contexts, set, o);
  for (std::size_t b = 1; b < r.bins.size(); ++b)
    c.check("bins_ordered", r.bins[b].bin_feature_mean >= r.bins[b - 1].bin_feature_mean);
  if (r.trend) c.log << "slope " << format_real(r.trend->slope) << '\n';
  c.log << "baseline " << format_real(r.baseline_mean) << '\n';
  if (c.p.want("csv")) c.write("steering.csv", csv_of([&](std::ostream& os) { write_steering_csv(os, r); }));
  if (c.p.want("json")) c.write("steering.json", to_json(r).dump(2) + "\n");
  if (c.p.want("svg")) c.write("steering.svg", svg_steering(r));
  c.annotations.push_back("steering is added after each block output, so steered positions also write steered K/V");
  c.annotations.push_back("entropy measured at the final context position");
}

void cmd_kv_patch(Context& c) {
  auto weights = primary_weights(c);
  const PatchMode mode = parse_patch_mode(c.p.patch_mode);
  std::optional<SubspaceBasis> basis;
  if (mode == PatchMode::InSpan || mode == PatchMode::Complement) {
    Params saved = c.p;
    if (!c.p.layers) c.p.layers = {{0, weights->dims.n_layers - 1}};
    std::uint32_t lo = 0, hi = 0;
    const CentroidBuild b = centroids_from_traces(c, lo, hi);
    c.p = saved;
    if (b.sets.empty()) throw InvariantError("no centroid sets for the subspace basis");
    basis = span_basis(b.sets);
    c.log << "basis rank " << basis->rank() << '\n';
  }
  std::vector<std::string> domains = c.p.domains;
  if (domains.empty())
    for (const auto& p : prompt_pairs()) domains.push_back(p.domain);

  std::string jsonl;
  json experiments = json::array();
  std::vector<VerdictResult> all;
  for (const auto& d : domains) {
    PrefillExperimentConfig cfg;
    cfg.pair = prompt_pair(d);
    cfg.direction = parse_direction(c.p.direction);
    cfg.onset_offset = c.p.onset;
    cfg.patch_mode = mode;
    cfg.answer_tokens = c.p.answer_tokens;
    cfg.temperature = c.p.temperature;
    cfg.seed = c.p.seed;
    cfg.basis = basis ? &*basis : nullptr;
    cfg.keep_logits = true;
    if (cfg.onset_offset > cfg.answer_tokens) throw SchemaError("$.onset: beyond the verdict analysis start");
    const PrefillExperimentResult r = prefill_experiment(*weights, cfg);
    for (auto [plain, patched] : {std::pair{PrefillArm::PrefillOnly, PrefillArm::PrefillPlusPatch},
                                  std::pair{PrefillArm::NoPrefill, PrefillArm::NoPrefillPlusPatch}}) {
      const auto& a = r.arm(plain);
      const auto& b = r.arm(patched);
      bool same = true;
      for (std::size_t pos = 0; pos < b.onset && pos < a.logits.size() && pos < b.logits.size(); ++pos)
        same = same && a.logits[pos] == b.logits[pos];
      c.check("pre_onset_bit_identical", same);
    }
    experiments.push_back(to_json(cfg));
    for (const auto& arm : r.arms) {
      c.check("p_in_unit_interval", arm.verdict.p_prefilled >= 0.0 && arm.verdict.p_prefilled <= 1.0);
      jsonl += to_json(arm).dump() + "\n";
      c.write("transcripts/" + d + "_" + std::string(to_string(arm.arm)) + ".txt", arm.transcript);
      c.log << d << ' ' << to_string(arm.arm) << " p_prefilled " << format_real(arm.verdict.p_prefilled) << '\n';
      all.push_back(arm);
    }
  }
  c.write("results.jsonl", jsonl);
  c.write("experiment.json", json{{"experiments", experiments}, {"seed", c.p.seed}}.dump(2) + "\n");
  if (c.p.want("svg")) c.write("verdicts.svg", svg_verdict_bars(all));
  c.annotations.push_back("patch replaces K and V at every layer over the user-content span");
  c.annotations.push_back("onset offset counts from the first generated token");
}

void cmd_semantic(Context& c) {
  const std::string lex_path = c.p.lexicon.value_or(default_lexicon_path());
  c.input(lex_path);
  TopicLexicon lexicon;
  try {
    lexicon = load_lexicon(lex_path);
  } catch (const std::invalid_argument& e) {
    throw SchemaError(e.what());
  }
  std::vector<std::string> domains = c.p.domains;
  if (domains.empty())
    for (const auto& p : prompt_pairs()) domains.push_back(p.domain);

  std::map<std::string, std::vector<std::string>> samples;
  std::shared_ptr<const ModelWeights> weights;
  if (!c.p.inputs.empty()) {
    c.input(c.p.inputs.front());
    json j;
    try {
      j = json::parse(read_file(c.p.inputs.front()));
      for (const auto& d : domains) samples[d] = j.at(d).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
      throw SchemaError(c.p.inputs.front() + ": " + e.what());
    }
  }
  weights = primary_weights(c);
  std::vector<CommitmentStats> stats;
  std::vector<CrossoverResult> crossovers;
  for (const auto& d : domains) {
    if (c.p.inputs.empty()) {
      samples[d] = sample_completions(*weights, prompt_pair(d).underspecified, c.p.samples, c.p.max_tokens,
                                      c.p.temperature, c.p.seed, "semantic/" + d);
    }
    const CommitmentStats s = commitment_stats(samples[d], lexicon, d);
    if (s.mode_fraction) {
      const double k = *s.mode_fraction * static_cast<double>(s.classified);
      c.check("mode_count_integral", std::abs(k - std::round(k)) < 1e-9);
    }
    c.check("sample_accounting", s.classified + s.unclassified_count == s.n_samples);
    stats.push_back(s);

    CrossoverConfig cc;
    cc.pair = prompt_pair(d);
    cc.n = c.p.generations;
    cc.max_tokens = c.p.max_tokens;
    cc.temperature = c.p.temperature;
    cc.seed = c.p.seed;
    cc.body_start = c.p.body_start;
    cc.body_end = c.p.body_end;
    crossovers.push_back(crossover_experiment(*weights, cc).result);
    c.log << d << " mode_fraction "
          << (s.mode_fraction ? format_real(*s.mode_fraction) : std::string("undefined")) << " gap "
          << (crossovers.back().gap ? format_real(*crossovers.back().gap) : std::string("undefined")) << '\n';
  }
  if (c.p.want("csv")) {
    c.write("commitment.csv", csv_of([&](std::ostream& os) { write_commitment_csv(os, stats); }));
    c.write("crossover.csv", csv_of([&](std::ostream& os) { write_crossover_csv(os, crossovers); }));
  }
  if (c.p.want("json")) {
    json j = {{"commitment", json::array()}, {"crossover", json::array()}};
    for (const auto& s : stats) j["commitment"].push_back(to_json(s));
    for (const auto& r : crossovers) j["crossover"].push_back(to_json(r));
    c.write("semantic.json", j.dump(2) + "\n");
  }
  if (c.p.want("svg")) c.write("commitment.svg", svg_commitment(stats));
  c.annotations.push_back("unclassified completions are counted separately for manual review");
}

void cmd_traject(Context& c) {
  const auto traces = load_or_demo(c, c.p.conditions);
  std::string csv = "trace_id,position,raw_nats,smoothed_nats\n";
  std::string trends = "trace_id,window,slope_nats_per_token,intercept_nats\n";
  std::vector<Trajectory> series;
  std::vector<std::string> labels;
  json j = json::array();
  for (const auto& d : traces) {
    const Trajectory t = trajectory(d.trace, c.p.window);
    c.check("window_within_length", t.window <= d.trace.tokens.size());
    csv += csv_of([&](std::ostream& os) { write_trajectory_csv(os, d.id, t); });
    trends += d.id + "," + std::to_string(t.window) + "," + format_real(t.slope) + "," + format_real(t.intercept) + "\n";
    json tj = to_json(t);
    tj["trace_id"] = d.id;
    j.push_back(tj);
    if (series.size() < 8) {
      series.push_back(t);
      labels.push_back(d.id);
    }
  }
  if (c.p.want("csv")) {
    c.write("trajectory.csv", csv);
    c.write("trends.csv", trends);
  }
  if (c.p.want("json")) c.write("trajectory.json", j.dump(2) + "\n");
  if (c.p.want("svg")) c.write("trajectory.svg", svg_trajectories(series, labels));
}

json load_reference_values() {
  const std::string path = std::string(PLAB_DATA_DIR) + "/reference_values.json";
  std::ifstream in(path);
  if (!in) return json::array();
  return json::parse(in);
}

void cmd_report(Context& c) {
  const auto demo = load_or_demo(c, c.p.conditions);
  const auto traces = just_traces(demo);
  RoleStatsOptions o;
  o.include_special = c.p.include_special;
  const RoleStats stats = role_stats(traces, o);
  std::ostringstream md;
  md << "# plab report\n\nseed: " << c.p.seed << "\n\n## Entropy by role (nats)\n\n"
     << "| role | n | mean | median | stddev |\n|---|---|---|---|---|\n";
  for (const auto& [role, s] : stats.by_role) {
    md << "| " << to_string(role) << " | " << s.count << " | " << format_real(s.mean) << " | "
       << format_real(s.median) << " | " << format_real(s.stddev) << " |\n";
  }
  json j = {{"role_stats", to_json(stats)}, {"matrices", json::array()}};
  for (TemplateCondition cond : conditions_present(traces)) {
    const CrossMatrixResult r = cross_matrix(traces, cond, c.p.persona);
    j["matrices"].push_back(to_json(r));
    md << "\n## Cross matrix: " << to_string(cond) << "\n\n| generator \\ evaluator |";
    for (const auto& e : r.matrix.evaluators) md << ' ' << e << " |";
    md << "\n|---|";
    for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e) md << "---|";
    md << '\n';
    for (std::size_t g = 0; g < r.matrix.generators.size(); ++g) {
      md << "| " << r.matrix.generators[g] << " |";
      for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e) {
        const auto& v = r.matrix.cells[g][e];
        md << ' ' << (v ? format_real(*v) : "n/a") << " |";
      }
      md << '\n';
    }
    md << "\ndiagonal is column minimum:";
    for (std::size_t e = 0; e < r.matrix.evaluators.size(); ++e)
      md << ' ' << r.matrix.evaluators[e] << '=' << to_string(r.diagonal_minimum[e]);
    md << '\n';
    if (c.p.want("svg")) c.write("matrix_" + std::string(to_string(cond)) + ".svg", svg_matrix(r));
  }
  md << "\n## Entropy trends (window " << c.p.window << ")\n\n| trace | slope (nats/token) |\n|---|---|\n";
  for (std::size_t i = 0; i < demo.size() && i < 12; ++i) {
    md << "| " << demo[i].id << " | " << format_real(trajectory(demo[i].trace, c.p.window).slope) << " |\n";
  }
  const json refs = load_reference_values();
  if (!refs.empty()) {
    md << "\n## Published reference values (large production models; not computed here)\n\n"
       << "| quantity | value | unit |\n|---|---|---|\n";
    for (const auto& r : refs) {
      md << "| " << r.at("quantity").get<std::string>() << " | " << r.at("value").dump() << " | "
         << r.at("unit").get<std::string>() << " |\n";
    }
    j["reference_values"] = refs;
  }
  md << "\n## Notes\n\n";
  for (const auto& a : c.annotations) md << "- " << a << '\n';
  md << "- special tokens " << (o.include_special ? "included in" : "excluded from") << " role means\n"
     << "- user-turn entropies are measured on teacher-forced tokens\n"
     << "- centroid sets are centered by their own mean\n"
     << "- steering is added after each block output\n";
  c.write("report.md", md.str());
  if (c.p.want("json")) c.write("report.json", j.dump(2) + "\n");
  if (c.p.want("svg")) c.write("role_stats.svg", svg_role_bars(stats));
  c.check("role_entropy_nonnegative", std::all_of(stats.by_role.begin(), stats.by_role.end(),
                                                  [](const auto& kv) { return kv.second.min >= 0.0; }));
}

void dispatch(Context& c) {
  const std::string& s = c.p.subcommand;
  if (s == "analyze") cmd_analyze(c);
  else if (s == "matrix") cmd_matrix(c);
  else if (s == "sweep") cmd_sweep(c);
  else if (s == "fit") cmd_fit(c);
  else if (s == "centroids") cmd_centroids(c);
  else if (s == "geometry") cmd_geometry(c);
  else if (s == "steer") cmd_steer(c);
  else if (s == "kv-patch") cmd_kv_patch(c);
  else if (s == "semantic") cmd_semantic(c);
  else if (s == "traject") cmd_traject(c);
  else if (s == "report") cmd_report(c);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"plab: on-policy recognition laboratory"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", std::string("plab ") + kVersion);

  struct Flags {
    std::string config, out = "plab-out", layers;
    std::uint64_t seed = 0;
    std::vector<std::string> traces, inputs, formats;
    std::string weights;
    std::size_t bins = 0, ranks = 0;
    double frac = 0.0;
  } f;
  std::map<std::string, CLI::App*> subs;
  std::map<std::string, std::map<std::string, CLI::Option*>> opts;
  for (const auto& name : kSubcommands) {
    CLI::App* sc = app.add_subcommand(name, kDescriptions.at(name));
    auto& o = opts[name];
    o["config"] = sc->add_option("--config", f.config, "JSON config file");
    o["out"] = sc->add_option("--out", f.out, "output directory");
    o["seed"] = sc->add_option("--seed", f.seed, "seed (u64)");
    o["trace"] = sc->add_option("--trace", f.traces, "trace file(s)");
    o["weights"] = sc->add_option("--weights", f.weights, "PLWT weight file");
    o["layers"] = sc->add_option("--layers", f.layers, "layer range a..b");
    o["bins"] = sc->add_option("--bins", f.bins, "bin count");
    o["frac"] = sc->add_option("--frac", f.frac, "steering fraction");
    o["ranks"] = sc->add_option("--ranks", f.ranks, "number of ranks to sweep");
    o["format"] = sc->add_option("--format", f.formats, "csv, json or svg (repeatable)");
    o["input"] = sc->add_option("--input", f.inputs, "subcommand input file(s)");
    subs[name] = sc;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << "plab " << kVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  Params p;
  for (const auto& [name, sc] : subs) {
    if (sc->parsed()) p.subcommand = name;
  }
  auto& o = opts[p.subcommand];
  try {
    if (o["config"]->count()) {
      if (!fs::exists(f.config)) throw MissingInput("config not found: " + f.config);
      json cfg;
      try {
        cfg = json::parse(read_file(f.config));
      } catch (const json::parse_error& e) {
        throw SchemaError(std::string("$: invalid JSON: ") + e.what());
      }
      apply_config(cfg, p);
    }
    if (o["seed"]->count()) p.seed = f.seed;
    if (o["trace"]->count()) p.traces = f.traces;
    if (o["weights"]->count()) p.weights = f.weights;
    if (o["layers"]->count()) p.layers = parse_layers(f.layers, "--layers");
    if (o["bins"]->count()) p.bins = f.bins;
    if (o["frac"]->count()) p.frac = f.frac;
    if (o["ranks"]->count()) p.ranks = f.ranks;
    if (o["format"]->count()) p.formats = f.formats;
    if (o["input"]->count()) p.inputs = f.inputs;
    check_params(p);
    for (const auto& t : p.traces) require_exists(t);
    if (p.weights) require_exists(*p.weights);
    for (const auto& i : p.inputs) require_exists(i);

    fs::create_directories(f.out);
    Context c(p, f.out, out);
    if (o["config"]->count()) c.input(f.config);
    dispatch(c);
    c.write_manifest();
    if (!c.all_checks_pass()) {
      for (const auto& [name, ok] : c.checks)
        if (!ok) err << "invariant failed: " << name << '\n';
      return kExitInvariant;
    }
    return kExitOk;
  } catch (const SchemaError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const MissingInput& e) {
    err << "missing input: " << e.what() << '\n';
    return kExitMissingInput;
  } catch (const InvariantError& e) {
    err << "invariant failed: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace plab::cli
