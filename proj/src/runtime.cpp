#include "plab/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "plab/binary_io.hpp"
#include "plab/entropy.hpp"
#include "plab/tensor_container.hpp"

namespace plab {

namespace {

constexpr char kWeightMagic[5] = "PLWT";

void check_size(const std::vector<float>& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw std::invalid_argument(name + " has " + std::to_string(v.size()) + " entries, expected " +
                                std::to_string(n));
  }
  for (float x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument(name + " has non-finite entries");
  }
}

// y[r] = sum_c W[r][c] * x[c]
void matvec(const std::vector<float>& w, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = w.data() + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(row[c]) * x[c];
    y[r] = acc;
  }
}

void rms_norm(const std::vector<double>& x, const std::vector<float>& gain, double eps, std::vector<double>& out) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  out.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * static_cast<double>(gain[i]);
}

void apply_rotary(double* v, std::size_t n_heads, std::size_t d_head, std::size_t pos, double base) {
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* head = v + h * d_head;
    for (std::size_t i = 0; i < d_head / 2; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
      const double angle = static_cast<double>(pos) * freq;
      const double c = std::cos(angle), s = std::sin(angle);
      const double x0 = head[2 * i], x1 = head[2 * i + 1];
      head[2 * i] = x0 * c - x1 * s;
      head[2 * i + 1] = x0 * s + x1 * c;
    }
  }
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

bool steering_applies(const SteeringSpec& s, std::uint32_t layer, std::size_t pos, std::size_t last_pos) {
  if (layer < s.layer_lo || layer > s.layer_hi) return false;
  switch (s.where.kind) {
    case PositionPredicate::Kind::AllFrom: return pos >= s.where.from;
    case PositionPredicate::Kind::Explicit:
      return std::find(s.where.positions.begin(), s.where.positions.end(), pos) != s.where.positions.end();
    case PositionPredicate::Kind::LastOnly: return pos == last_pos;
  }
  return false;
}

std::vector<float> gaussian(std::size_t n, double stddev, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Weights

void ModelWeights::validate() const {
  const auto& d = dims;
  if (d.d_model == 0 || d.n_heads == 0 || d.d_head == 0 || d.n_layers == 0 || d.d_ff == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (d.d_model != d.n_heads * d.d_head) throw std::invalid_argument("d_model must equal n_heads * d_head");
  if (d.d_head % 2 != 0) throw std::invalid_argument("d_head must be even for rotary encoding");
  if (d.vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (d.max_context == 0) throw std::invalid_argument("max_context must be positive");
  if (!(d.rope_base > 0.0) || !(d.norm_eps >= 0.0)) throw std::invalid_argument("bad rope_base / norm_eps");
  const std::size_t dm = d.d_model, V = d.vocab_size, ff = d.d_ff;
  check_size(tok_embed, V * dm, "tok_embed");
  if (layers.size() != d.n_layers) throw std::invalid_argument("layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    check_size(L.attn_norm, dm, p + "attn_norm");
    check_size(L.wq, dm * dm, p + "wq");
    check_size(L.wk, dm * dm, p + "wk");
    check_size(L.wv, dm * dm, p + "wv");
    check_size(L.wo, dm * dm, p + "wo");
    check_size(L.mlp_norm, dm, p + "mlp_norm");
    check_size(L.w_in, ff * dm, p + "w_in");
    check_size(L.w_out, dm * ff, p + "w_out");
  }
  check_size(final_norm, dm, "final_norm");
  check_size(unembed, V * dm, "unembed");
}

ModelWeights ModelWeights::zeros(const ModelDims& dims) {
  ModelWeights w;
  w.dims = dims;
  const std::size_t dm = dims.d_model, V = dims.vocab_size, ff = dims.d_ff;
  w.tok_embed.assign(V * dm, 0.0f);
  w.layers.resize(dims.n_layers);
  for (auto& L : w.layers) {
    L.attn_norm.assign(dm, 1.0f);
    L.wq.assign(dm * dm, 0.0f);
    L.wk.assign(dm * dm, 0.0f);
    L.wv.assign(dm * dm, 0.0f);
    L.wo.assign(dm * dm, 0.0f);
    L.mlp_norm.assign(dm, 1.0f);
    L.w_in.assign(ff * dm, 0.0f);
    L.w_out.assign(dm * ff, 0.0f);
  }
  w.final_norm.assign(dm, 1.0f);
  w.unembed.assign(V * dm, 0.0f);
  return w;
}

ModelWeights ModelWeights::random(const ModelDims& dims, std::uint64_t seed, double logit_scale) {
  ModelWeights w = zeros(dims);
  Rng rng(seed);
  const std::size_t dm = dims.d_model, V = dims.vocab_size, ff = dims.d_ff;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(dm));
  const double ff_scale = 1.0 / std::sqrt(static_cast<double>(ff));
  w.tok_embed = gaussian(V * dm, 1.0, rng);
  for (auto& L : w.layers) {
    L.wq = gaussian(dm * dm, in_scale, rng);
    L.wk = gaussian(dm * dm, in_scale, rng);
    L.wv = gaussian(dm * dm, in_scale, rng);
    L.wo = gaussian(dm * dm, in_scale, rng);
    L.w_in = gaussian(ff * dm, in_scale, rng);
    L.w_out = gaussian(dm * ff, ff_scale, rng);
  }
  w.unembed = gaussian(V * dm, logit_scale * in_scale, rng);
  return w;
}

void write_weights(const ModelWeights& w, std::ostream& out) {
  w.validate();
  TensorFile file;
  const auto& d = w.dims;
  file.header["dims"] = {{"d_model", d.d_model},     {"n_heads", d.n_heads},         {"d_head", d.d_head},
                         {"d_ff", d.d_ff},           {"n_layers", d.n_layers},       {"vocab_size", d.vocab_size},
                         {"max_context", d.max_context}, {"rope_base", d.rope_base}, {"norm_eps", d.norm_eps}};
  auto add = [&](std::string name, std::vector<std::size_t> shape, const std::vector<float>& data) {
    file.tensors.push_back({std::move(name), std::move(shape), DType::F32, {data.begin(), data.end()}});
  };
  const std::size_t dm = d.d_model, V = d.vocab_size, ff = d.d_ff;
  add("tok_embed", {V, dm}, w.tok_embed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_norm", {dm}, L.attn_norm);
    add(p + "wq", {dm, dm}, L.wq);
    add(p + "wk", {dm, dm}, L.wk);
    add(p + "wv", {dm, dm}, L.wv);
    add(p + "wo", {dm, dm}, L.wo);
    add(p + "mlp_norm", {dm}, L.mlp_norm);
    add(p + "w_in", {ff, dm}, L.w_in);
    add(p + "w_out", {dm, ff}, L.w_out);
  }
  add("final_norm", {dm}, w.final_norm);
  add("unembed", {V, dm}, w.unembed);
  write_tensor_file(file, kWeightMagic, out);
}

ModelWeights read_weights(std::istream& in) {
  const TensorFile file = read_tensor_file(in, kWeightMagic);
  ModelWeights w;
  try {
    const auto& j = file.header.at("dims");
    auto& d = w.dims;
    d.d_model = j.at("d_model").get<std::uint32_t>();
    d.n_heads = j.at("n_heads").get<std::uint32_t>();
    d.d_head = j.at("d_head").get<std::uint32_t>();
    d.d_ff = j.at("d_ff").get<std::uint32_t>();
    d.n_layers = j.at("n_layers").get<std::uint32_t>();
    d.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    d.max_context = j.at("max_context").get<std::uint32_t>();
    d.rope_base = j.at("rope_base").get<double>();
    d.norm_eps = j.at("norm_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad weight header: ") + e.what());
  }
  auto get = [&](const std::string& name) {
    const auto& t = file.at(name);
    return std::vector<float>(t.values.begin(), t.values.end());
  };
  w.tok_embed = get("tok_embed");
  w.layers.resize(w.dims.n_layers);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    L.attn_norm = get(p + "attn_norm");
    L.wq = get(p + "wq");
    L.wk = get(p + "wk");
    L.wv = get(p + "wv");
    L.wo = get(p + "wo");
    L.mlp_norm = get(p + "mlp_norm");
    L.w_in = get(p + "w_in");
    L.w_out = get(p + "w_out");
  }
  w.final_norm = get("final_norm");
  w.unembed = get("unembed");
  try {
    w.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid weights: ") + e.what());
  }
  return w;
}

void save_weights(const ModelWeights& w, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_weights(w, out);
}

ModelWeights load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_weights(in);
}

// ---------------------------------------------------------------------------
// KV cache

KVCache::KVCache(std::uint32_t n_layers, std::uint32_t width, std::uint32_t max_context)
    : width_(width), max_context_(max_context), keys_(n_layers), values_(n_layers) {}

std::span<const double> KVCache::key(std::uint32_t layer, std::size_t pos) const {
  return {keys_.at(layer).data() + pos * width_, width_};
}
std::span<const double> KVCache::value(std::uint32_t layer, std::size_t pos) const {
  return {values_.at(layer).data() + pos * width_, width_};
}
std::span<double> KVCache::key(std::uint32_t layer, std::size_t pos) {
  return {keys_.at(layer).data() + pos * width_, width_};
}
std::span<double> KVCache::value(std::uint32_t layer, std::size_t pos) {
  return {values_.at(layer).data() + pos * width_, width_};
}

void KVCache::reserve_position(std::size_t pos) {
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    keys_[l].resize((pos + 1) * width_, 0.0);
    values_[l].resize((pos + 1) * width_, 0.0);
  }
}

void KVCache::truncate(std::size_t length) {
  if (length > length_) throw std::out_of_range("cannot truncate cache beyond its length");
  length_ = length;
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    keys_[l].resize(length * width_);
    values_[l].resize(length * width_);
  }
}

SpanKV KVCache::extract(Span span) const {
  if (span.end > length_ || span.begin > span.end) throw std::out_of_range("span outside cache");
  SpanKV out;
  out.span = span;
  out.keys.resize(keys_.size());
  out.values.resize(values_.size());
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    out.keys[l].assign(keys_[l].begin() + static_cast<std::ptrdiff_t>(span.begin * width_),
                       keys_[l].begin() + static_cast<std::ptrdiff_t>(span.end * width_));
    out.values[l].assign(values_[l].begin() + static_cast<std::ptrdiff_t>(span.begin * width_),
                         values_[l].begin() + static_cast<std::ptrdiff_t>(span.end * width_));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Interventions

void SteeringSpec::validate(const ModelDims& dims) const {
  if (layer_lo > layer_hi || layer_hi >= dims.n_layers) throw std::invalid_argument("steering layer range invalid");
  if (vector.size() != dims.d_model) throw std::invalid_argument("steering vector length != d_model");
  for (double v : vector) {
    if (!std::isfinite(v)) throw std::invalid_argument("steering vector has non-finite entries");
  }
  if (!std::isfinite(coefficient)) throw std::invalid_argument("steering coefficient must be finite");
}

void PatchSpec::validate() const {
  if (target.begin > target.end) throw std::invalid_argument("patch target span is reversed");
  if (donor.span.size() != target.size()) {
    throw std::invalid_argument("donor span length " + std::to_string(donor.span.size()) +
                                " != target span length " + std::to_string(target.size()));
  }
  if (onset < target.end) throw std::invalid_argument("patch onset precedes the end of the target span");
}

void apply_patch(KVCache& cache, const PatchSpec& patch) {
  patch.validate();
  if (patch.target.end > cache.length()) throw std::out_of_range("cache does not cover the patch target");
  if (patch.donor.keys.size() != cache.layers() || patch.donor.values.size() != cache.layers()) {
    throw std::invalid_argument("donor layer count != cache layer count");
  }
  const std::size_t w = cache.width();
  for (std::uint32_t l = 0; l < cache.layers(); ++l) {
    if (patch.donor.keys[l].size() != patch.target.size() * w || patch.donor.values[l].size() != patch.target.size() * w) {
      throw std::invalid_argument("donor entries have the wrong width");
    }
    for (std::size_t i = 0; i < patch.target.size(); ++i) {
      auto k = cache.key(l, patch.target.begin + i);
      auto v = cache.value(l, patch.target.begin + i);
      std::copy_n(patch.donor.keys[l].begin() + static_cast<std::ptrdiff_t>(i * w), w, k.begin());
      std::copy_n(patch.donor.values[l].begin() + static_cast<std::ptrdiff_t>(i * w), w, v.begin());
    }
  }
}

std::string_view to_string(PatchMode m) {
  switch (m) {
    case PatchMode::Full: return "Full";
    case PatchMode::InSpan: return "InSpan";
    case PatchMode::Complement: return "Complement";
    case PatchMode::None: return "None";
  }
  return "?";
}

PatchMode parse_patch_mode(std::string_view s) {
  for (auto m : {PatchMode::Full, PatchMode::InSpan, PatchMode::Complement, PatchMode::None}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown patch mode: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Forward pass

class ForwardPass {
 public:
  ForwardPass(const ModelWeights& w, KVCache& cache, const ForwardOptions& opt)
      : w_(w), d_(w.dims), cache_(cache), opt_(opt) {
    const std::size_t dm = d_.d_model;
    xn_.resize(dm);
    q_.resize(dm);
    k_.resize(dm);
    v_.resize(dm);
    heads_.resize(dm);
    attn_.resize(dm);
    ff_.resize(d_.d_ff);
    mlp_.resize(dm);
    scores_.resize(d_.max_context);
    if (opt_.override) {
      attn_alt_.resize(dm);
      heads_alt_.resize(dm);
    }
  }

  ForwardResult run(std::span<const TokenId> tokens) {
    if (cache_.layers() != d_.n_layers || cache_.width() != d_.d_model) {
      throw std::invalid_argument("cache shape does not match the model");
    }
    for (auto tap : opt_.taps) {
      if (tap >= d_.n_layers) throw std::invalid_argument("tap layer out of range");
    }
    if (opt_.steering) opt_.steering->validate(d_);
    if (opt_.override) {
      opt_.override->patch.validate();
      if (opt_.override->patch.target.end > cache_.length() + tokens.size()) {
        throw std::out_of_range("patch target beyond the sequence");
      }
    }
    if (cache_.length() + tokens.size() > d_.max_context) {
      throw ContextOverflow("context overflow: " + std::to_string(cache_.length() + tokens.size()) + " > " +
                            std::to_string(d_.max_context));
    }
    for (TokenId t : tokens) {
      if (t >= d_.vocab_size) throw std::invalid_argument("token id out of vocabulary");
    }

    ForwardResult result;
    const std::size_t first = cache_.length();
    const std::size_t last = first + tokens.size() - 1;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      step(tokens[i], first + i, last, result);
    }
    return result;
  }

 private:
  void step(TokenId token, std::size_t pos, std::size_t last_pos, ForwardResult& result) {
    const std::size_t dm = d_.d_model;
    std::vector<double> x(dm);
    for (std::size_t i = 0; i < dm; ++i) x[i] = w_.tok_embed[token * dm + i];

    cache_.reserve_position(pos);
    const AttentionOverride* ov = opt_.override;
    const bool patched = ov && ov->mode != PatchMode::None && pos >= ov->patch.onset;

    for (std::uint32_t l = 0; l < d_.n_layers; ++l) {
      const LayerWeights& L = w_.layers[l];
      rms_norm(x, L.attn_norm, d_.norm_eps, xn_);
      matvec(L.wq, dm, dm, xn_.data(), q_.data());
      matvec(L.wk, dm, dm, xn_.data(), k_.data());
      matvec(L.wv, dm, dm, xn_.data(), v_.data());
      apply_rotary(q_.data(), d_.n_heads, d_.d_head, pos, d_.rope_base);
      apply_rotary(k_.data(), d_.n_heads, d_.d_head, pos, d_.rope_base);
      std::copy(k_.begin(), k_.end(), cache_.key(l, pos).begin());
      std::copy(v_.begin(), v_.end(), cache_.value(l, pos).begin());

      if (!patched) {
        attend(l, pos, nullptr, heads_);
        matvec(L.wo, dm, dm, heads_.data(), attn_.data());
        for (std::size_t i = 0; i < dm; ++i) x[i] += attn_[i];
      } else {
        // attn_alt_ = output against the patched view, attn_ = against the original.
        attend(l, pos, &ov->patch, heads_alt_);
        matvec(L.wo, dm, dm, heads_alt_.data(), attn_alt_.data());
        const bool need_original = ov->mode != PatchMode::Full || opt_.record_deltas;
        if (need_original) {
          attend(l, pos, nullptr, heads_);
          matvec(L.wo, dm, dm, heads_.data(), attn_.data());
        }
        PatchDelta delta;
        if (need_original) {
          delta.full.resize(dm);
          for (std::size_t i = 0; i < dm; ++i) delta.full[i] = attn_alt_[i] - attn_[i];
        }
        if (ov->mode == PatchMode::Full) {
          for (std::size_t i = 0; i < dm; ++i) x[i] += attn_alt_[i];
          if (opt_.record_deltas) delta.added = delta.full;
        } else {
          delta.added = delta.full;
          if (ov->filter) ov->filter(delta.added);
          for (std::size_t i = 0; i < dm; ++i) x[i] += attn_[i] + delta.added[i];
        }
        if (opt_.record_deltas) {
          delta.layer = l;
          delta.position = pos;
          result.deltas.push_back(std::move(delta));
        }
      }

      if (opt_.tap_post_attention) tap(l, pos, x, result);

      rms_norm(x, L.mlp_norm, d_.norm_eps, xn_);
      matvec(L.w_in, d_.d_ff, dm, xn_.data(), ff_.data());
      for (auto& f : ff_) f = silu(f);
      matvec(L.w_out, dm, d_.d_ff, ff_.data(), mlp_.data());
      for (std::size_t i = 0; i < dm; ++i) x[i] += mlp_[i];

      if (opt_.steering && steering_applies(*opt_.steering, l, pos, last_pos)) {
        const auto& s = *opt_.steering;
        for (std::size_t i = 0; i < dm; ++i) x[i] += s.coefficient * s.vector[i];
      }
      if (!opt_.tap_post_attention) tap(l, pos, x, result);
    }

    rms_norm(x, w_.final_norm, d_.norm_eps, xn_);
    std::vector<double> logits(d_.vocab_size);
    matvec(w_.unembed, d_.vocab_size, dm, xn_.data(), logits.data());
    result.logits.push_back(std::move(logits));
    cache_.length_ = pos + 1;
  }

  void tap(std::uint32_t layer, std::size_t pos, const std::vector<double>& x, ForwardResult& result) {
    if (std::find(opt_.taps.begin(), opt_.taps.end(), layer) != opt_.taps.end()) {
      result.hidden.push_back({layer, pos, x});
    }
  }

  // Causal attention for the query in q_ over positions [0, pos]; entries in
  // the patch target span come from the donor when `patch` is non-null.
  void attend(std::uint32_t layer, std::size_t pos, const PatchSpec* patch, std::vector<double>& out) {
    const std::size_t dh = d_.d_head;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto key_at = [&](std::size_t j) -> const double* {
      if (patch && j >= patch->target.begin && j < patch->target.end) {
        return patch->donor.keys[layer].data() + (j - patch->target.begin) * d_.d_model;
      }
      return cache_.key(layer, j).data();
    };
    auto value_at = [&](std::size_t j) -> const double* {
      if (patch && j >= patch->target.begin && j < patch->target.end) {
        return patch->donor.values[layer].data() + (j - patch->target.begin) * d_.d_model;
      }
      return cache_.value(layer, j).data();
    };
    for (std::size_t h = 0; h < d_.n_heads; ++h) {
      const double* qh = q_.data() + h * dh;
      double max_score = -INFINITY;
      for (std::size_t j = 0; j <= pos; ++j) {
        const double* kh = key_at(j) + h * dh;
        double s = 0.0;
        for (std::size_t i = 0; i < dh; ++i) s += qh[i] * kh[i];
        scores_[j] = s * scale;
        max_score = std::max(max_score, scores_[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores_[j] = std::exp(scores_[j] - max_score);
        z += scores_[j];
      }
      double* oh = out.data() + h * dh;
      std::fill(oh, oh + dh, 0.0);
      for (std::size_t j = 0; j <= pos; ++j) {
        const double a = scores_[j] / z;
        const double* vh = value_at(j) + h * dh;
        for (std::size_t i = 0; i < dh; ++i) oh[i] += a * vh[i];
      }
    }
  }

  const ModelWeights& w_;
  const ModelDims& d_;
  KVCache& cache_;
  const ForwardOptions& opt_;
  std::vector<double> xn_, q_, k_, v_, heads_, heads_alt_, attn_, attn_alt_, ff_, mlp_, scores_;
};

ForwardResult forward(const ModelWeights& weights, std::span<const TokenId> tokens, KVCache& cache,
                      const ForwardOptions& options) {
  if (tokens.empty()) return {};
  ForwardPass pass(weights, cache, options);
  return pass.run(tokens);
}

// ---------------------------------------------------------------------------
// Session

Session::Session(std::shared_ptr<const ModelWeights> weights)
    : weights_(std::move(weights)), cache_(weights_->dims) {
  weights_->validate();
}

const std::vector<double>& Session::last_logits() const {
  if (logits_.empty()) throw std::logic_error("session has not been fed");
  return logits_.back();
}

const std::vector<double>& Session::logits_at(std::size_t position) const { return logits_.at(position); }

ForwardResult Session::feed(std::span<const TokenId> tokens, const ForwardOptions& options) {
  ForwardResult r = forward(*weights_, tokens, cache_, options);
  logits_.insert(logits_.end(), r.logits.begin(), r.logits.end());
  return r;
}

ForwardResult Session::feed(TokenId token, const ForwardOptions& options) {
  return feed(std::span<const TokenId>(&token, 1), options);
}

void Session::truncate(std::size_t length) {
  cache_.truncate(length);
  logits_.resize(length);
}

// ---------------------------------------------------------------------------
// Decoding

TokenId sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
  if (temperature == 0.0) return rank_order(logits).front();
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - max_logit) / temperature);
    z += p[i];
  }
  const double u = rng.uniform() * z;
  double cum = 0.0;
  std::size_t chosen = logits.size() - 1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (u < cum) {
      chosen = i;
      break;
    }
  }
  while (p[chosen] == 0.0 && chosen > 0) --chosen;
  return static_cast<TokenId>(chosen);
}

TraceBuilder::TraceBuilder(const ModelWeights& weights, const TraceOptions& options, double temperature)
    : topk_(std::min<std::size_t>(options.topk, weights.dims.vocab_size)) {
  auto& m = trace_.meta;
  m.model_id = options.model_id;
  m.vocab_size = weights.dims.vocab_size;
  m.d_model = weights.dims.d_model;
  m.n_layers = weights.dims.n_layers;
  m.captured_layers = options.taps;
  std::sort(m.captured_layers.begin(), m.captured_layers.end());
  m.template_condition = options.condition;
  m.generator_id = options.generator_id;
  m.evaluator_id = options.evaluator_id;
  m.persona = options.persona;
  m.temperature = temperature;
  if (weights.dims.vocab_size >= tok::kMinVocab) m.special_token_ids = tok::special_ids();
}

void TraceBuilder::add(TokenId token, Role role, Origin origin, const std::vector<double>* incoming,
                       const std::vector<double>& emitted) {
  TokenRecord r;
  r.position = static_cast<std::uint32_t>(trace_.tokens.size());
  r.token_id = token;
  r.role = role;
  r.origin = origin;
  if (incoming) {
    r.incoming_entropy = entropy_of(*incoming);
    r.surprise = surprise_of(*incoming, token);
  }
  r.predicted_entropy = entropy_of(emitted);
  const auto lp = log_softmax(emitted);
  const auto order = rank_order(emitted);
  r.topk.reserve(topk_);
  for (std::size_t i = 0; i < topk_; ++i) r.topk.push_back({order[i], static_cast<float>(lp[order[i]])});
  trace_.tokens.push_back(std::move(r));
}

void TraceBuilder::add_hidden(const std::vector<HiddenState>& states) {
  for (const auto& s : states) {
    trace_.hidden.push_back({static_cast<std::uint32_t>(s.position), static_cast<std::uint16_t>(s.layer),
                             std::vector<float>(s.values.begin(), s.values.end())});
  }
}

Trace TraceBuilder::finish() && {
  validate(trace_);
  return std::move(trace_);
}

Trace score(const ModelWeights& weights, const TokenSeq& seq, const TraceOptions& options) {
  if (seq.size() == 0) throw std::invalid_argument("cannot score an empty sequence");
  KVCache cache(weights.dims);
  ForwardOptions fo;
  fo.taps = options.taps;
  ForwardResult r = forward(weights, seq.ids, cache, fo);
  TraceBuilder builder(weights, options, 0.0);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    builder.add(seq.ids[i], seq.roles[i], seq.origins[i], i > 0 ? &r.logits[i - 1] : nullptr, r.logits[i]);
  }
  builder.add_hidden(r.hidden);
  return std::move(builder).finish();
}

bool decode(Session& session, std::size_t n, double temperature, Rng& rng, TokenSeq& tokens,
            const ForwardOptions& options, TraceBuilder* builder, Role role) {
  for (std::size_t i = 0; i < n; ++i) {
    if (session.length() >= session.weights().dims.max_context) return false;
    const std::vector<double> incoming = session.last_logits();
    const TokenId next = sample_token(incoming, temperature, rng);
    ForwardResult r = session.feed(next, options);
    tokens.push(next, role, Origin::Sampled);
    if (builder) {
      builder->add(next, role, Origin::Sampled, &incoming, r.logits.back());
      builder->add_hidden(r.hidden);
    }
  }
  return true;
}

GenerateResult generate(const ModelWeights& weights, const TokenSeq& prompt, std::size_t n, double temperature,
                        std::uint64_t seed, const SteeringSpec* steering, const TraceOptions& options) {
  if (n == 0) throw std::invalid_argument("generate needs n >= 1");
  if (!(temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
  if (prompt.size() == 0) throw std::invalid_argument("generate needs a nonempty prompt");
  auto shared = std::make_shared<const ModelWeights>(weights);
  Session session(shared);
  ForwardOptions fo;
  fo.taps = options.taps;
  fo.steering = steering;

  GenerateResult out;
  out.tokens = prompt;
  TraceBuilder builder(weights, options, temperature);
  ForwardResult r = session.feed(prompt.ids, fo);
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    builder.add(prompt.ids[i], prompt.roles[i], prompt.origins[i], i > 0 ? &r.logits[i - 1] : nullptr, r.logits[i]);
  }
  builder.add_hidden(r.hidden);
  Rng rng(seed);
  out.truncated = !decode(session, n, temperature, rng, out.tokens, fo, &builder, options.generated_role);
  out.trace = std::move(builder).finish();
  return out;
}

}  // namespace plab
