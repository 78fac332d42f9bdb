#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "plab/binary_io.hpp"
#include "plab/entropy.hpp"
#include "plab/runtime.hpp"
#include "reference_model.hpp"
#include "test_support.hpp"

using namespace plab;
using testsupport::max_abs_diff;

TEST_CASE("forward matches the naive reference") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto w = testsupport::random_model(seed, 32, 3);
    const auto tokens = testsupport::random_tokens(20, seed + 100, w->dims.vocab_size);
    KVCache cache(w->dims);
    const auto got = forward(*w, tokens, cache);
    const auto want = ref::run(*w, tokens);
    for (std::size_t p = 0; p < tokens.size(); ++p) CHECK(max_abs_diff(got.logits[p], want.logits[p]) < 1e-9);
  }
}

TEST_CASE("incremental decoding equals a single full pass") {
  const auto w = testsupport::random_model(7, 16, 2);
  const auto tokens = testsupport::random_tokens(24, 8);
  KVCache full(w->dims);
  const auto all = forward(*w, tokens, full);
  KVCache inc(w->dims);
  for (std::size_t i = 0; i < tokens.size(); i += 5) {
    const std::size_t n = std::min<std::size_t>(5, tokens.size() - i);
    const auto part = forward(*w, std::span<const TokenId>(tokens).subspan(i, n), inc);
    for (std::size_t j = 0; j < n; ++j) CHECK(part.logits[j] == all.logits[i + j]);
  }
  CHECK(inc == full);
}

TEST_CASE("hidden taps report the residual after each tapped block") {
  const auto w = testsupport::random_model(9, 16, 3);
  const auto tokens = testsupport::random_tokens(6, 3);
  KVCache cache(w->dims);
  ForwardOptions o;
  o.taps = {0, 2};
  const auto r = forward(*w, tokens, cache, o);
  const auto want = ref::run(*w, tokens);
  REQUIRE(r.hidden.size() == 12);
  for (const auto& h : r.hidden) {
    std::vector<double> row(w->dims.d_model);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = want.residual[h.layer](h.position, c);
    CHECK(max_abs_diff(h.values, row) < 1e-9);
  }
}

TEST_CASE("weights container round trip") {
  const auto w = testsupport::random_model(3);
  std::stringstream ss;
  write_weights(*w, ss);
  const ModelWeights back = read_weights(ss);
  CHECK(back == *w);
  std::string bad = ss.str();
  bad[0] = 'Q';
  std::istringstream in(bad);
  CHECK_THROWS_AS(read_weights(in), FormatError);
}

TEST_CASE("weight validation") {
  ModelWeights w = ModelWeights::zeros(testsupport::small_dims());
  CHECK_NOTHROW(w.validate());
  w.unembed.pop_back();
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
}

TEST_CASE("sampling") {
  Rng rng(1);
  const std::vector<double> tie = {1.0, 3.0, 3.0, 0.0};
  CHECK(sample_token(tie, 0.0, rng) == 1);

  // Empirical frequencies follow the softmax at T = 1.
  const std::vector<double> logits = {0.0, std::log(3.0)};
  int ones = 0;
  for (int i = 0; i < 20000; ++i) ones += sample_token(logits, 1.0, rng) == 1;
  CHECK(ones / 20000.0 == doctest::Approx(0.75).epsilon(0.02));
  CHECK_THROWS_AS(sample_token(logits, -1.0, rng), std::invalid_argument);
}

TEST_CASE("generation is seed-deterministic") {
  const auto w = testsupport::random_model(5);
  TokenSeq prompt;
  prompt.append(tok::encode("abc"), Role::User);
  const auto a = generate(*w, prompt, 12, 1.0, 42);
  const auto b = generate(*w, prompt, 12, 1.0, 42);
  const auto c = generate(*w, prompt, 12, 1.0, 43);
  CHECK(a.tokens.ids == b.tokens.ids);
  CHECK(a.trace == b.trace);
  CHECK(a.tokens.ids != c.tokens.ids);
  CHECK_NOTHROW(validate(a.trace));
}

TEST_CASE("generation stops at the context limit") {
  ModelDims d = testsupport::small_dims();
  d.max_context = 10;
  const ModelWeights w = ModelWeights::random(d, 1);
  TokenSeq prompt;
  prompt.append(tok::encode("abcdef"), Role::User);
  const auto r = generate(w, prompt, 50, 0.0, 1);
  CHECK(r.truncated);
  CHECK(r.tokens.size() == 10);
  KVCache cache(d);
  const auto long_seq = testsupport::random_tokens(11, 2);
  CHECK_THROWS_AS(forward(w, long_seq, cache), ContextOverflow);
}

TEST_CASE("session truncation restores earlier state") {
  Session s(testsupport::random_model(4));
  s.feed(testsupport::random_tokens(5, 1));
  const auto logits = s.last_logits();
  const KVCache snapshot = s.cache();
  s.feed(testsupport::random_tokens(3, 2));
  s.truncate(5);
  CHECK(s.last_logits() == logits);
  CHECK(s.cache() == snapshot);
}

TEST_CASE("zero-coefficient steering is a bit-exact no-op") {
  const auto w = testsupport::random_model(6);
  const auto tokens = testsupport::random_tokens(10, 6);
  SteeringSpec s;
  s.layer_lo = 0;
  s.layer_hi = 1;
  s.vector.assign(w->dims.d_model, 3.0);
  s.coefficient = 0.0;
  KVCache a(w->dims), b(w->dims);
  ForwardOptions o;
  o.steering = &s;
  CHECK(forward(*w, tokens, a).logits == forward(*w, tokens, b, o).logits);
}

TEST_CASE("steering matches the reference with the vector added") {
  const auto w = testsupport::random_model(12, 16, 3);
  const auto tokens = testsupport::random_tokens(8, 12);
  SteeringSpec s;
  s.layer_lo = 1;
  s.layer_hi = 2;
  s.where = PositionPredicate::all_from(3);
  s.vector = std::vector<double>(w->dims.d_model, 0.0);
  for (std::size_t i = 0; i < s.vector.size(); ++i) s.vector[i] = std::sin(1.0 + i);
  s.coefficient = 0.7;
  KVCache cache(w->dims);
  ForwardOptions o;
  o.steering = &s;
  const auto got = forward(*w, tokens, cache, o);
  ref::Steer rs{1, 2, s.vector, 0.7, 3};
  const auto want = ref::run(*w, tokens, &rs);
  for (std::size_t p = 0; p < tokens.size(); ++p) CHECK(max_abs_diff(got.logits[p], want.logits[p]) < 1e-9);

  s.layer_hi = 9;
  CHECK_THROWS_AS(s.validate(w->dims), std::invalid_argument);
}

TEST_CASE("self-donor KV patch is a bit-exact no-op") {
  const auto w = testsupport::random_model(21);
  const auto tokens = testsupport::random_tokens(16, 21);
  KVCache base(w->dims);
  const auto plain = forward(*w, tokens, base);
  KVCache cache(w->dims);
  forward(*w, std::span<const TokenId>(tokens).first(8), cache);
  AttentionOverride ov;
  ov.patch.target = {2, 6};
  ov.patch.donor = cache.extract({2, 6});
  ov.patch.onset = 8;
  ForwardOptions o;
  o.override = &ov;
  const auto patched = forward(*w, std::span<const TokenId>(tokens).subspan(8), cache, o);
  for (std::size_t i = 0; i < 8; ++i) CHECK(patched.logits[i] == plain.logits[8 + i]);
}

TEST_CASE("patched decode equals the frankenstein-cache oracle") {
  const auto w = testsupport::random_model(22, 16, 3);
  const auto host = testsupport::random_tokens(14, 1);
  const auto donor_seq = testsupport::random_tokens(14, 2);
  KVCache donor_cache(w->dims);
  forward(*w, donor_seq, donor_cache);
  const Span span{3, 7};
  const SpanKV donor = donor_cache.extract(span);

  // Overwrite the cache after the prefix, then keep decoding.
  KVCache cache(w->dims);
  forward(*w, std::span<const TokenId>(host).first(9), cache);
  apply_patch(cache, {span, donor, 9});
  const auto cont = forward(*w, std::span<const TokenId>(host).subspan(9), cache);

  ref::Frankenstein fr{3, 7, 9, &donor};
  const auto want = ref::run(*w, host, nullptr, &fr);
  for (std::size_t i = 0; i < cont.logits.size(); ++i) CHECK(max_abs_diff(cont.logits[i], want.logits[9 + i]) < 1e-9);

  // The attention-level override produces the same continuation.
  KVCache cache2(w->dims);
  forward(*w, std::span<const TokenId>(host).first(9), cache2);
  AttentionOverride ov;
  ov.patch = {span, donor, 9};
  ForwardOptions o;
  o.override = &ov;
  const auto cont2 = forward(*w, std::span<const TokenId>(host).subspan(9), cache2, o);
  for (std::size_t i = 0; i < cont.logits.size(); ++i) CHECK(max_abs_diff(cont.logits[i], cont2.logits[i]) < 1e-12);
}

TEST_CASE("override is inactive before onset") {
  const auto w = testsupport::random_model(23);
  const auto host = testsupport::random_tokens(12, 3);
  KVCache donor_cache(w->dims);
  forward(*w, testsupport::random_tokens(12, 4), donor_cache);
  AttentionOverride ov;
  ov.patch = {{1, 4}, donor_cache.extract({1, 4}), 7};
  ForwardOptions o;
  o.override = &ov;
  KVCache a(w->dims), b(w->dims);
  const auto plain = forward(*w, host, a);
  const auto patched = forward(*w, host, b, o);
  for (std::size_t p = 0; p < 7; ++p) CHECK(plain.logits[p] == patched.logits[p]);
  bool changed = false;
  for (std::size_t p = 7; p < host.size(); ++p) changed = changed || plain.logits[p] != patched.logits[p];
  CHECK(changed);
}

TEST_CASE("filtered override modes decompose the full delta") {
  const auto w = testsupport::random_model(24);
  const auto host = testsupport::random_tokens(10, 5);
  KVCache donor_cache(w->dims);
  forward(*w, testsupport::random_tokens(10, 6), donor_cache);
  AttentionOverride ov;
  ov.patch = {{0, 4}, donor_cache.extract({0, 4}), 6};
  ov.mode = PatchMode::InSpan;
  ov.filter = [](std::span<double> v) { std::fill(v.begin(), v.end(), 0.0); };
  ForwardOptions o;
  o.override = &ov;
  o.record_deltas = true;
  KVCache a(w->dims), b(w->dims);
  const auto plain = forward(*w, host, a);
  const auto zeroed = forward(*w, host, b, o);
  // A zero filter reproduces the unpatched run exactly.
  for (std::size_t p = 0; p < host.size(); ++p) CHECK(max_abs_diff(plain.logits[p], zeroed.logits[p]) < 1e-12);
  CHECK(zeroed.deltas.size() == (host.size() - 6) * w->dims.n_layers);
}

TEST_CASE("rank order breaks ties by id") {
  const std::vector<double> l = {0.5, 2.0, 0.5, 2.0};
  CHECK(rank_order(l) == std::vector<TokenId>{1, 3, 0, 2});
}
