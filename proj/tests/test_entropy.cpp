#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "plab/entropy.hpp"
#include "plab/runtime.hpp"
#include "test_support.hpp"

using namespace plab;

namespace {

// Reference entropy via explicit probabilities in long double.
double entropy_oracle(const std::vector<double>& logits) {
  long double m = *std::max_element(logits.begin(), logits.end());
  long double z = 0;
  for (double l : logits) z += std::exp(static_cast<long double>(l) - m);
  long double h = 0;
  for (double l : logits) {
    const long double p = std::exp(static_cast<long double>(l) - m) / z;
    if (p > 0) h -= p * std::log(p);
  }
  return static_cast<double>(h);
}

Trace cell_trace(const std::string& gen, const std::string& eval, TemplateCondition c,
                 const std::vector<std::pair<Role, double>>& records, std::uint32_t special_at = 99) {
  Trace t;
  t.meta.model_id = eval;
  t.meta.vocab_size = 300;
  t.meta.generator_id = gen;
  t.meta.evaluator_id = eval;
  t.meta.template_condition = c;
  t.meta.special_token_ids = {256, 257, 258, 259};
  for (std::uint32_t i = 0; i < records.size(); ++i) {
    TokenRecord r;
    r.position = i;
    r.token_id = i == special_at ? 258 : 65;
    r.role = records[i].first;
    r.predicted_entropy = records[i].second;
    t.tokens.push_back(r);
  }
  return t;
}

}  // namespace

TEST_CASE("entropy of the uniform distribution is ln V") {
  for (std::size_t v : {10u, 100u, 128000u}) {
    const std::vector<double> zeros(v, 0.0);
    CHECK(std::abs(entropy_of(zeros) - std::log(static_cast<double>(v))) < 1e-9);
  }
}

TEST_CASE("entropy kernel against a long-double oracle") {
  std::mt19937_64 g(5);
  std::normal_distribution<double> n(0.0, 4.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> l(50);
    for (auto& x : l) x = n(g);
    CHECK(entropy_of(l) == doctest::Approx(entropy_oracle(l)).epsilon(1e-12));
    std::vector<double> shifted = l;
    for (auto& x : shifted) x += 1234.5;
    CHECK(std::abs(entropy_of(shifted) - entropy_of(l)) < 1e-12);
    const TokenId top = rank_order(l).front();
    CHECK(entropy_of(l) >= surprise_of(l, top) - 1e-12);
  }
}

TEST_CASE("entropy edge cases") {
  const std::vector<double> l = {1.0, 2.0, 3.0};
  CHECK(entropy_of(l, 0.0) == 0.0);
  CHECK_THROWS_AS(entropy_of(l, -1.0), std::invalid_argument);
  const std::vector<double> bad = {1.0, NAN};
  CHECK_THROWS_AS(entropy_of(bad), std::invalid_argument);
  const std::vector<double> peaked = {0.0, -1e6, -1e6};
  CHECK(entropy_of(peaked) == doctest::Approx(0.0));
  CHECK(entropy_of(peaked) >= 0.0);
  // Temperature scaling: softmax(l / 2) has the same entropy as softmax(l * 0.5).
  const std::vector<double> half = {0.5, 1.0, 1.5};
  CHECK(entropy_of(l, 2.0) == doctest::Approx(entropy_of(half)));
}

TEST_CASE("log_softmax and surprise") {
  const std::vector<double> l = {0.0, std::log(3.0)};
  const auto ls = log_softmax(l);
  CHECK(ls[1] == doctest::Approx(std::log(0.75)));
  CHECK(surprise_of(l, 0) == doctest::Approx(-std::log(0.25)));
}

TEST_CASE("summaries") {
  const Summary s = summarize({3.0, 1.0, 2.0, 10.0});
  CHECK(s.count == 4);
  CHECK(s.mean == 4.0);
  CHECK(s.median == 2.5);
  CHECK(s.min == 1.0);
  CHECK(s.max == 10.0);
  CHECK(s.stddev == doctest::Approx(std::sqrt((1 + 9 + 4 + 36) / 4.0)));
}

TEST_CASE("role statistics exclude special tokens by default") {
  std::vector<Trace> ts = {cell_trace("a", "a", TemplateCondition::AssistantField,
                                      {{Role::User, 2.0}, {Role::Assistant, 9.0}, {Role::Assistant, 0.5}}, 1)};
  const RoleStats s = role_stats(ts);
  CHECK(s.by_role.at(Role::Assistant).count == 1);
  CHECK(s.by_role.at(Role::Assistant).mean == 0.5);
  CHECK(s.by_role.count(Role::System) == 0);
  RoleStatsOptions o;
  o.include_special = true;
  CHECK(role_stats(ts, o).by_role.at(Role::Assistant).mean == doctest::Approx(4.75));
}

TEST_CASE("cross matrix cells are token-weighted means over the response role") {
  const auto A = TemplateCondition::AssistantField;
  std::vector<Trace> ts = {
      cell_trace("m1", "m1", A, {{Role::User, 5.0}, {Role::Assistant, 1.0}, {Role::Assistant, 2.0}}),
      cell_trace("m1", "m1", A, {{Role::Assistant, 4.0}}),
      cell_trace("m2", "m1", A, {{Role::Assistant, 3.0}}),
      cell_trace("m1", "m2", A, {{Role::Assistant, 0.5}}),
      cell_trace("m2", "m2", A, {{Role::Assistant, 1.0}}),
      cell_trace("m2", "m2", TemplateCondition::NoTemplate, {{Role::Untagged, 7.0}}),
  };
  const auto r = cross_matrix(ts, A);
  REQUIRE(r.matrix.generators == std::vector<std::string>{"m1", "m2"});
  CHECK(*r.matrix.cells[0][0] == doctest::Approx(7.0 / 3.0));
  CHECK(r.matrix.counts[0][0] == 3);
  CHECK(*r.matrix.cells[1][0] == 3.0);
  CHECK(r.diagonal_minimum[0] == Tristate::True);
  CHECK(r.diagonal_minimum[1] == Tristate::False);

  const auto adv = self_advantage(r.matrix);
  CHECK(adv[0].defined);
  CHECK(adv[0].advantage == doctest::Approx(3.0 - 7.0 / 3.0));
  CHECK(adv[1].advantage == doctest::Approx(-0.5));

  const std::vector<CrossMatrixResult> rs = {r};
  const auto grouped = aggregate_advantage(rs, {{"m1", "small"}, {"m2", "small"}});
  REQUIRE(grouped.size() == 1);
  CHECK(grouped[0].n_models == 2);
  CHECK(grouped[0].self_mean == doctest::Approx((7.0 / 3.0 + 1.0) / 2.0));

  const auto conds = conditions_present(ts);
  CHECK(conds.size() == 2);
}

TEST_CASE("missing self cell leaves the flag indeterminate") {
  const auto A = TemplateCondition::AssistantField;
  std::vector<Trace> ts = {cell_trace("m2", "m1", A, {{Role::Assistant, 1.0}})};
  const auto r = cross_matrix(ts, A);
  CHECK(r.diagonal_minimum[0] == Tristate::Indeterminate);
  CHECK_FALSE(self_advantage(r.matrix)[0].defined);
}

TEST_CASE("OLS and the feedback fit") {
  std::vector<SweepRecord> recs;
  for (int i = 0; i < 30; ++i) {
    SweepRecord r;
    r.rel_excess = -1.0 + i * 0.1;
    r.rel_delta = 0.5 * *r.rel_excess - 0.2;
    recs.push_back(r);
  }
  SweepRecord floor_rec;  // no ratios: skipped
  recs.push_back(floor_rec);
  const FeedbackFit f = fit_feedback(recs);
  CHECK(std::abs(f.a - 0.5) < 1e-12);
  CHECK(std::abs(f.beta + 0.2) < 1e-12);
  CHECK(f.n_points == 30);

  std::vector<double> same_x(5, 1.0), y(5, 2.0);
  CHECK_THROWS_AS(ols(same_x, y), std::domain_error);
}

TEST_CASE("sweep CSV round trip") {
  std::vector<SweepRecord> recs(2);
  recs[0] = {"c", 1.5, 0, 7, 0.25, 1.25, -0.5, -0.25};
  recs[1] = {"c", 1.5, 1, 9, 3.0, 2.0, 1.0, 1.0 / 3.0};
  std::stringstream ss;
  write_sweep_csv(ss, recs);
  const auto back = read_sweep_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].token_id == 9);
  CHECK(*back[1].rel_delta == 1.0 / 3.0);
  std::istringstream bad("a,b\n1,2\n");
  CHECK_THROWS_AS(read_sweep_csv(bad), std::invalid_argument);
}

TEST_CASE("single-step sweep leaves the session unchanged") {
  Session s(testsupport::random_model(31));
  s.feed(testsupport::random_tokens(4, 1));
  const KVCache before = s.cache();
  const auto logits = s.last_logits();
  const auto ctx = testsupport::random_tokens(6, 2);
  const auto ranks = default_ranks(20);
  const auto recs = single_step_sweep(s, ctx, ranks, "ctx");
  CHECK(s.cache() == before);
  CHECK(s.last_logits() == logits);
  REQUIRE(recs.size() == 20);
  for (std::size_t i = 1; i < recs.size(); ++i) CHECK(recs[i].surprise >= recs[i - 1].surprise);

  // Oracle: replay the rank-5 token directly.
  Session fresh(testsupport::random_model(31));
  fresh.feed(testsupport::random_tokens(4, 1));
  fresh.feed(ctx);
  const double h = entropy_of(fresh.last_logits());
  fresh.feed(recs[5].token_id);
  CHECK(recs[5].next_H == entropy_of(fresh.last_logits()));
  CHECK(recs[5].baseline_H == h);
}

TEST_CASE("greedy generation never has positive excess surprise") {
  const auto w = testsupport::random_model(32);
  TokenSeq prompt;
  prompt.append(tok::encode("the"), Role::User);
  const auto r = generate(*w, prompt, 30, 0.0, 1);
  for (std::size_t i = prompt.size(); i < r.trace.tokens.size(); ++i) {
    const auto& rec = r.trace.tokens[i];
    CHECK(rec.surprise - rec.incoming_entropy <= 1e-12);
  }
}

TEST_CASE("trajectories") {
  Trace t = cell_trace("a", "a", TemplateCondition::AssistantField,
                       {{Role::User, 1.0}, {Role::Assistant, 2.0}, {Role::Assistant, 3.0}, {Role::Assistant, 4.0}});
  const Trajectory tr = trajectory(t, 3);
  CHECK(tr.smoothed[0] == doctest::Approx(1.5));
  CHECK(tr.smoothed[1] == doctest::Approx(2.0));
  CHECK(tr.smoothed[3] == doctest::Approx(3.5));
  CHECK(tr.slope == doctest::Approx(1.0));
  CHECK(trajectory(t, 100).window == 4);
  CHECK(trajectory(t, 0).window == 1);
}

TEST_CASE("body entropy uses response ordinals") {
  std::vector<std::pair<Role, double>> recs = {{Role::User, 9.0}};
  for (int i = 0; i < 10; ++i) recs.push_back({Role::Assistant, static_cast<double>(i)});
  const Trace t = cell_trace("a", "a", TemplateCondition::AssistantField, recs);
  const BodyEntropy b = body_entropy(t, 6, 300);
  CHECK(b.count == 4);
  CHECK(b.mean == doctest::Approx(7.5));
  CHECK_THROWS_AS(body_entropy(t, 10, 300), std::invalid_argument);
}

TEST_CASE("histogram") {
  const std::vector<double> v = {0.0, 0.1, 0.5, 0.99, 1.0, 5.0};
  const auto h = histogram(v, 2, 0.0, 1.0);
  CHECK(h.counts[0] == 2);
  CHECK(h.counts[1] == 4);
}

TEST_CASE("format_real is shortest round-trip") {
  CHECK(format_real(0.5) == "0.5");
  CHECK(std::stod(format_real(0.1 + 0.2)) == 0.1 + 0.2);
}
