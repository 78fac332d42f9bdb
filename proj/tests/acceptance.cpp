// Acceptance suite: one PASS/FAIL line per criterion, with its runtime budget.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "plab/cli.hpp"
#include "plab/entropy.hpp"
#include "plab/geometry.hpp"
#include "plab/intervention.hpp"
#include "plab/prompts.hpp"
#include "plab/runtime.hpp"
#include "plab/semantic.hpp"
#include "reference_model.hpp"
#include "test_support.hpp"

using namespace plab;
using Eigen::MatrixXd;
using testsupport::max_abs_diff;

namespace {

struct Verdict {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) detail << "failed: " << what << "; ";
    ok = ok && cond;
  }
  void note(const std::string& key, double v) { detail << key << "=" << std::setprecision(3) << v << " "; }
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.ok = false;
    v.detail << "exception: " << e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < budget_s;
  const bool pass = v.ok && in_time;
  if (!pass) ++failures;
  std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(34) << name << std::right << std::fixed
            << std::setprecision(2) << std::setw(8) << secs << "s / " << budget_s << "s  "
            << (in_time ? "" : "over budget; ") << v.detail.str() << std::defaultfloat << '\n';
  std::cout.flush();
}

MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& g) {
  std::normal_distribution<double> n;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(g);
  return m;
}

CentroidSet as_set(const MatrixXd& m) {
  CentroidSet s;
  s.bins = static_cast<std::size_t>(m.rows());
  s.dim = static_cast<std::size_t>(m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) s.matrix.push_back(m(i, j));
  s.counts.assign(s.bins, 1);
  for (std::size_t b = 0; b < s.bins; ++b) s.bin_feature_means.push_back(static_cast<double>(b));
  return s;
}

MatrixXd rotation(Eigen::Index d, std::mt19937_64& g) {
  Eigen::HouseholderQR<MatrixXd> qr(gaussian(d, d, g));
  return qr.householderQ();
}

std::shared_ptr<const ModelWeights> oracle_model(std::uint64_t seed) {
  ModelDims d;
  d.d_model = 64;
  d.n_heads = 4;
  d.d_head = 16;
  d.d_ff = 256;
  d.n_layers = 4;
  d.max_context = 64;
  return std::make_shared<const ModelWeights>(ModelWeights::random(d, seed, 3.0));
}

PrefillExperimentConfig patch_config(std::uint64_t seed) {
  PrefillExperimentConfig c;
  c.pair = prompt_pairs()[seed % prompt_pairs().size()];
  c.answer_tokens = 8;
  c.onset_offset = seed % 9;
  c.seed = seed;
  c.keep_logits = true;
  return c;
}

void entropy_kernel(Verdict& v) {
  double worst = 0.0;
  for (std::size_t n : {10u, 100u, 128000u}) {
    worst = std::max(worst, std::abs(entropy_of(std::vector<double>(n, 0.0)) - std::log(static_cast<double>(n))));
  }
  v.note("uniform_err", worst);
  v.require(worst < 1e-9, "uniform entropy");
  std::mt19937_64 g(2024);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_int_distribution<std::size_t> size(2, 300);
  double shift_err = 0.0;
  bool bound = true;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> l(size(g));
    for (auto& x : l) x = n(g);
    const double h = entropy_of(l);
    std::vector<double> s = l;
    const double c = n(g) * 100.0;
    for (auto& x : s) x += c;
    shift_err = std::max(shift_err, std::abs(entropy_of(s) - h));
    bound = bound && h >= surprise_of(l, rank_order(l).front());
  }
  v.note("shift_err", shift_err);
  v.require(shift_err < 1e-12, "shift invariance");
  v.require(bound, "H >= S_argmax");
}

void feedback_fit(Verdict& v) {
  std::ifstream in(std::string(PLAB_DATA_DIR) + "/sweep_synthetic.csv");
  const FeedbackFit exact = fit_feedback(read_sweep_csv(in));
  const double e1 = std::max(std::abs(exact.a - 0.5), std::abs(exact.beta + 0.2));
  v.note("exact_err", e1);
  v.require(e1 < 1e-9, "exact synthetic");
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> x(-1.0, 2.0);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<SweepRecord> recs(500);
  for (auto& r : recs) {
    r.rel_excess = x(g);
    r.rel_delta = 0.5 * *r.rel_excess - 0.2 + noise(g);
  }
  const FeedbackFit noisy = fit_feedback(recs);
  const double e2 = std::max(std::abs(noisy.a - 0.5), std::abs(noisy.beta + 0.2));
  v.note("noisy_err", e2);
  v.require(e2 < 0.02, "noisy synthetic");
}

void runtime_oracle(Verdict& v) {
  double ref_err = 0.0, inc_err = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto w = oracle_model(1000 + seed);
    const auto tokens = testsupport::random_tokens(32, seed, w->dims.vocab_size);
    KVCache full(w->dims);
    const auto got = forward(*w, tokens, full);
    const auto want = ref::run(*w, tokens);
    KVCache inc(w->dims);
    for (std::size_t p = 0; p < tokens.size(); ++p) {
      ref_err = std::max(ref_err, max_abs_diff(got.logits[p], want.logits[p]));
      const auto step = forward(*w, std::span<const TokenId>(tokens).subspan(p, 1), inc);
      inc_err = std::max(inc_err, max_abs_diff(step.logits[0], got.logits[p]));
    }
  }
  v.note("ref_err", ref_err);
  v.note("incremental_err", inc_err);
  v.require(ref_err < 1e-5, "reference equivalence");
  v.require(inc_err < 1e-5, "incremental consistency");
}

void kv_patching(Verdict& v) {
  bool self_noop = true, causal = true;
  double franken = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = testsupport::random_model(500 + seed, 32, 3);
    const auto host = testsupport::random_tokens(24, seed);
    const auto donor_tokens = testsupport::random_tokens(24, seed + 77);
    const std::size_t b = 2 + seed % 5, e = b + 4 + seed % 3, onset = e + 2 + seed % 4;

    KVCache plain_cache(w->dims);
    const auto plain = forward(*w, host, plain_cache);

    // Self-donor: bit-exact no-op.
    AttentionOverride self;
    self.patch = {{b, e}, plain_cache.extract({b, e}), onset};
    ForwardOptions so;
    so.override = &self;
    KVCache c1(w->dims);
    self_noop = self_noop && forward(*w, host, c1, so).logits == plain.logits;

    // Foreign donor against the frankenstein-cache oracle.
    KVCache dc(w->dims);
    forward(*w, donor_tokens, dc);
    const SpanKV donor = dc.extract({b, e});
    KVCache c2(w->dims);
    forward(*w, std::span<const TokenId>(host).first(onset), c2);
    apply_patch(c2, {{b, e}, donor, onset});
    const auto cont = forward(*w, std::span<const TokenId>(host).subspan(onset), c2);
    ref::Frankenstein fr{b, e, onset, &donor};
    const auto want = ref::run(*w, host, nullptr, &fr);
    for (std::size_t i = 0; i < cont.logits.size(); ++i)
      franken = std::max(franken, max_abs_diff(cont.logits[i], want.logits[onset + i]));

    // Onset causality through the full experiment protocol.
    const auto r = prefill_experiment(*w, patch_config(seed));
    for (auto [a, p] : {std::pair{PrefillArm::PrefillOnly, PrefillArm::PrefillPlusPatch},
                        std::pair{PrefillArm::NoPrefill, PrefillArm::NoPrefillPlusPatch}}) {
      const auto& x = r.arm(a);
      const auto& y = r.arm(p);
      for (std::size_t pos = 0; pos < x.onset; ++pos) causal = causal && x.logits[pos] == y.logits[pos];
    }
  }
  v.note("frankenstein_err", franken);
  v.require(self_noop, "self-donor no-op");
  v.require(franken < 1e-9, "frankenstein oracle");
  v.require(causal, "pre-onset bit-identical");
}

void subspace_patching(Verdict& v) {
  double sum_err = 0.0, full_err = 0.0, collapse_err = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto w = testsupport::random_model(700 + seed, 32, 3);
    std::mt19937_64 g(seed);
    std::vector<std::vector<double>> vs;
    for (int i = 0; i < 6; ++i) {
      const MatrixXd row = gaussian(1, w->dims.d_model, g);
      vs.emplace_back(row.data(), row.data() + row.size());
    }
    const SubspaceBasis basis = span_basis(vs, w->dims.d_model);
    PrefillExperimentConfig c = patch_config(seed);
    c.onset_offset = c.answer_tokens;
    c.record_deltas = true;
    const auto full = subspace_filtered_patch(*w, c, basis, PatchMode::Full);
    const auto in = subspace_filtered_patch(*w, c, basis, PatchMode::InSpan);
    const auto comp = subspace_filtered_patch(*w, c, basis, PatchMode::Complement);
    for (auto arm : {PrefillArm::PrefillPlusPatch, PrefillArm::NoPrefillPlusPatch}) {
      const auto& df = full.arm(arm).deltas;
      const auto& di = in.arm(arm).deltas;
      const auto& dc = comp.arm(arm).deltas;
      v.require(!df.empty() && df.size() == di.size() && di.size() == dc.size(), "delta bookkeeping");
      for (std::size_t k = 0; k < df.size(); ++k) {
        // Per run: the filtered part plus its complement reproduces the full delta.
        const Decomposition d = decompose(di[k].full, basis);
        std::vector<double> s(d.in_span.size());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = di[k].added[i] + d.complement[i];
        sum_err = std::max(sum_err, max_abs_diff(s, di[k].full));
        // Across runs at the injection layer.
        if (df[k].layer == 0) {
          for (std::size_t i = 0; i < s.size(); ++i) s[i] = di[k].added[i] + dc[k].added[i];
          sum_err = std::max(sum_err, max_abs_diff(s, df[k].added));
        }
      }
    }
    PrefillExperimentConfig plain_c = patch_config(seed);
    const auto plain = prefill_experiment(*w, plain_c);
    const auto full2 = subspace_filtered_patch(*w, plain_c, basis, PatchMode::Full);
    const SubspaceBasis everything = SubspaceBasis::full(w->dims.d_model);
    const auto collapsed = subspace_filtered_patch(*w, plain_c, everything, PatchMode::InSpan);
    for (auto arm : {PrefillArm::PrefillPlusPatch, PrefillArm::NoPrefillPlusPatch}) {
      full_err = std::max(full_err, std::abs(full2.arm(arm).verdict.p_prefilled - plain.arm(arm).verdict.p_prefilled));
      collapse_err =
          std::max(collapse_err, std::abs(collapsed.arm(arm).verdict.p_prefilled - plain.arm(arm).verdict.p_prefilled));
    }
  }
  v.note("sum_err", sum_err);
  v.note("full_err", full_err);
  v.note("collapse_err", collapse_err);
  v.require(sum_err < 1e-5, "InSpan + Complement = Full");
  v.require(full_err < 1e-6, "Full reproduces plain patch");
  v.require(collapse_err < 1e-6, "full basis collapses InSpan");
}

void geometry_metrics(Verdict& v) {
  std::mt19937_64 g(99);
  double cka_self = 0.0, cka_rot = 0.0, proc = 0.0, cos_err = 0.0, pca_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixXd a = gaussian(20, 12, g);
    cka_self = std::max(cka_self, std::abs(*linear_cka(as_set(a), as_set(a)) - 1.0));
    cka_rot = std::max(cka_rot, std::abs(*linear_cka(as_set(a), as_set(a * rotation(12, g))) - 1.0));
    const MatrixXd moved = (2.5 * a * rotation(12, g)).rowwise() + gaussian(1, 12, g).row(0);
    proc = std::max(proc, std::abs(procrustes_similarity(as_set(a), as_set(moved)) - 1.0));
    const MatrixXd ac = a.rowwise() - a.colwise().mean();
    cos_err = std::max(cos_err, std::abs(*matched_cosine(as_set(a), as_set(-ac)).mean + 1.0));

    const PcaResult p = pca_top3(as_set(a));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(ac.transpose() * ac);
    const double total = es.eigenvalues().sum();
    for (int c = 0; c < 3; ++c) {
      const Eigen::Index k = es.eigenvalues().size() - 1 - c;
      pca_err = std::max(pca_err, std::abs(p.explained[c] - es.eigenvalues()(k) / total));
      const Eigen::VectorXd proj = ac * es.eigenvectors().col(k);
      double same = 0, flip = 0;
      for (Eigen::Index i = 0; i < proj.size(); ++i) {
        same = std::max(same, std::abs(p.coords[i * 3 + c] - proj(i)));
        flip = std::max(flip, std::abs(p.coords[i * 3 + c] + proj(i)));
      }
      pca_err = std::max(pca_err, std::min(same, flip));
    }
  }
  bool balanced = true;
  std::uniform_int_distribution<std::size_t> nb(2, 40), nn(40, 2000);
  std::normal_distribution<double> n;
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t B = nb(g), N = nn(g);
    std::vector<double> vals(N);
    for (auto& x : vals) x = std::round(n(g) * 8.0) / 8.0;
    const Binning bin = quantile_bin(vals, B);
    const auto [lo, hi] = std::minmax_element(bin.sizes.begin(), bin.sizes.end());
    balanced = balanced && *hi - *lo <= 1;
  }
  v.note("cka_self", cka_self);
  v.note("cka_rot", cka_rot);
  v.note("procrustes", proc);
  v.note("cosine", cos_err);
  v.note("pca", pca_err);
  v.require(cka_self < 1e-12, "CKA(A,A) = 1");
  v.require(cka_rot < 1e-9, "CKA rotation invariance");
  v.require(proc < 1e-8, "Procrustes invariance");
  v.require(cos_err < 1e-12, "matched cosine of negation");
  v.require(pca_err < 1e-6, "PCA oracle");
  v.require(balanced, "quantile balance");
}

void steering_contract(Verdict& v) {
  bool noop = true, linear = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto w = testsupport::random_model(900 + seed, 32, 3);
    const auto tokens = testsupport::random_tokens(12, seed);
    SteeringSpec s;
    s.layer_lo = 1;
    s.layer_hi = 2;
    std::mt19937_64 g(seed);
    const MatrixXd vec = gaussian(1, w->dims.d_model, g);
    s.vector.assign(vec.data(), vec.data() + vec.size());
    s.coefficient = 0.0;
    ForwardOptions plain, steered;
    plain.taps = steered.taps = {1};
    steered.steering = &s;
    KVCache a(w->dims), b(w->dims), c(w->dims);
    const auto ra = forward(*w, tokens, a, plain);
    noop = noop && forward(*w, tokens, b, steered).logits == ra.logits;
    s.coefficient = 1.3;
    const auto rc = forward(*w, tokens, c, steered);
    for (std::size_t k = 0; k < ra.hidden.size(); ++k) {
      std::vector<double> expect = ra.hidden[k].values;
      for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += s.coefficient * s.vector[i];
      linear = linear && rc.hidden[k].values == expect;
    }
  }
  v.require(noop, "zero coefficient no-op");
  v.require(linear, "injection-site linearity");

  // Planted entropy-controlling direction; the oracle replays each bin with the
  // reference model (second pass, independent code path).
  const ModelWeights w = testsupport::planted_model();
  CentroidSet set;
  set.feature = Feature::IncomingSurprise;
  set.bins = 12;
  set.dim = 8;
  set.counts.assign(12, 1);
  set.matrix.assign(12 * 8, 0.0);
  for (std::size_t b = 0; b < 12; ++b) {
    set.bin_feature_means.push_back(0.25 * static_cast<double>(b));
    set.matrix[b * 8 + 1] = 0.15 * static_cast<double>(b);
  }
  SteeringSweepOptions o;
  o.frac = 0.8;
  o.layer_lo = 0;
  o.layer_hi = 1;
  const std::vector<SteeringContext> ctx = {{"a", {'a', 'b', 'c'}}, {"b", {'x', 'y'}}};
  const auto r = steering_sweep(w, ctx, set, o);
  bool monotone = true;
  double oracle_err = 0.0;
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    if (b > 0) monotone = monotone && r.bins[b].entropy_mean < r.bins[b - 1].entropy_mean;
    ref::Steer st{0, 1, steering_vector(set, b, 0.8), 1.0, 0};
    for (std::size_t c = 0; c < ctx.size(); ++c) {
      const auto out = ref::run(w, ctx[c].tokens, &st);
      oracle_err = std::max(oracle_err, std::abs(entropy_of(out.logits.back()) - r.bins[b].per_context[c]));
    }
  }
  v.note("oracle_err", oracle_err);
  v.require(monotone, "monotone in bin value");
  v.require(oracle_err < 1e-9, "two-pass oracle");
}

void sweep_protocol(Verdict& v) {
  bool invariant = true, bound = true;
  double worst = -1e300;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto w = testsupport::random_model(1200 + seed);
    Session s(w);
    s.feed(testsupport::random_tokens(5, seed));
    const KVCache before = s.cache();
    const auto logits = s.last_logits();
    const auto ranks = default_ranks(20);
    single_step_sweep(s, testsupport::random_tokens(4, seed + 1), ranks, "c");
    invariant = invariant && s.cache() == before && s.last_logits() == logits;

    TokenSeq prompt;
    prompt.append(testsupport::random_tokens(6, seed + 2), Role::User);
    const auto g = generate(*w, prompt, 24, 0.0, seed);
    for (std::size_t i = prompt.size(); i < g.trace.tokens.size(); ++i) {
      const auto& r = g.trace.tokens[i];
      worst = std::max(worst, r.surprise - r.incoming_entropy);
      bound = bound && r.surprise - r.incoming_entropy <= 0.0;
    }
  }
  v.note("max_excess", worst);
  v.require(invariant, "session invariant");
  v.require(bound, "ExcessSurprise <= 0 at T = 0");
}

void semantic_stats(Verdict& v) {
  const auto j = nlohmann::json::parse(testsupport::slurp(std::string(PLAB_TEST_DATA_DIR) + "/commitment_food.json"));
  const auto samples = j.at("food").get<std::vector<std::string>>();
  const CommitmentStats s = commitment_stats(samples, load_lexicon(default_lexicon_path()), "food");
  v.require(s.classified == 47 && s.unclassified_count == 3 && s.distinct_topics == 4, "fixture counts");
  v.require(s.mode_topic == "haggis" && s.mode_fraction == 39.0 / 47.0, "fixture mode");
  const auto w = testsupport::random_model(77);
  CrossoverConfig c;
  c.pair = prompt_pair("element");
  c.pair.specific = c.pair.underspecified;
  c.n = 5;
  c.max_tokens = 40;
  const auto r = crossover_experiment(*w, c);
  v.require(r.result.gap.has_value() && *r.result.gap == 0.0, "control gap exactly 0");
}

void reproducibility(Verdict& v) {
  namespace fs = std::filesystem;
  testsupport::TempDir dir("acceptance_repro");
  testsupport::spit(dir / "small.json", R"({"prompts": 2, "n_tokens": 16})");
  testsupport::spit(dir / "sem.json",
                    R"({"domains": ["food", "element"], "samples": 6, "generations": 3, "max_tokens": 24, "body_start": 2})");
  testsupport::spit(dir / "kv.json", R"({"domains": ["food", "sport"], "answer_tokens": 6, "onset": 2})");
  const std::vector<std::pair<std::string, std::string>> jobs = {
      {"analyze", "small.json"}, {"matrix", "small.json"},   {"sweep", ""},         {"fit", ""},
      {"centroids", "small.json"}, {"geometry", "small.json"}, {"steer", "small.json"}, {"kv-patch", "kv.json"},
      {"semantic", "sem.json"},   {"traject", "small.json"}, {"report", "small.json"}};
  std::size_t compared = 0;
  for (const auto& [sub, cfg] : jobs) {
    std::map<std::string, std::string> runs[2];
    for (int k = 0; k < 2; ++k) {
      const std::string out = dir / (sub + std::to_string(k));
      std::vector<std::string> args = {sub, "--seed", "17", "--out", out, "--format", "csv", "--format", "json"};
      if (!cfg.empty()) args.insert(args.end(), {"--config", dir / cfg});
      std::ostringstream so, se;
      const int code = cli::run(args, so, se);
      v.require(code == cli::kExitOk, sub + " exit " + std::to_string(code) + " " + se.str());
      for (const auto& e : fs::recursive_directory_iterator(out))
        if (e.is_regular_file()) runs[k][fs::relative(e.path(), out).string()] = testsupport::slurp(e.path().string());
    }
    v.require(!runs[0].empty() && runs[0] == runs[1], sub + " outputs differ between runs");
    compared += runs[0].size();
  }
  v.note("files", static_cast<double>(compared));
}

}  // namespace

int main() {
  criterion("entropy kernel", 1, entropy_kernel);
  criterion("feedback fit", 1, feedback_fit);
  criterion("micro-runtime oracle equivalence", 120, runtime_oracle);
  criterion("KV patching", 60, kv_patching);
  criterion("subspace-filtered patching", 60, subspace_patching);
  criterion("geometry metrics", 30, geometry_metrics);
  criterion("steering contract", 60, steering_contract);
  criterion("sweep protocol", 60, sweep_protocol);
  criterion("semantic stats", 10, semantic_stats);
  criterion("CLI reproducibility", 300, reproducibility);
  std::cout << (failures == 0 ? "ALL CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAILED") << '\n';
  return failures == 0 ? 0 : 1;
}
