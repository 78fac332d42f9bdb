#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include <random>
#include <sstream>

#include "plab/binary_io.hpp"
#include "plab/geometry.hpp"
#include "plab/runtime.hpp"
#include "test_support.hpp"

using namespace plab;
using Eigen::MatrixXd;

namespace {

MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(g);
  return m;
}

MatrixXd random_rotation(Eigen::Index d, std::uint64_t seed) {
  Eigen::HouseholderQR<MatrixXd> qr(random_matrix(d, d, seed));
  return qr.householderQ();
}

std::vector<double> flat(const MatrixXd& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[i * m.cols() + j] = m(i, j);
  return v;
}

CentroidSet as_set(const MatrixXd& m, const std::string& cond = "x") {
  CentroidSet s;
  s.feature = Feature::IncomingSurprise;
  s.condition = cond;
  s.bins = static_cast<std::size_t>(m.rows());
  s.dim = static_cast<std::size_t>(m.cols());
  s.matrix = flat(m);
  s.counts.assign(s.bins, 1);
  for (std::size_t b = 0; b < s.bins; ++b) s.bin_feature_means.push_back(0.1 * b);
  return s;
}

MatrixXd centered(const MatrixXd& m) { return m.rowwise() - m.colwise().mean(); }

double cka_oracle(const MatrixXd& x, const MatrixXd& y) {
  const MatrixXd xc = centered(x), yc = centered(y);
  const double num = (yc.transpose() * xc).squaredNorm();
  return num / ((xc.transpose() * xc).norm() * (yc.transpose() * yc).norm());
}

double procrustes_oracle(const MatrixXd& x, const MatrixXd& y) {
  MatrixXd xc = centered(x), yc = centered(y);
  xc /= xc.norm();
  yc /= yc.norm();
  Eigen::JacobiSVD<MatrixXd> svd(xc.transpose() * yc);
  return svd.singularValues().sum();
}

}  // namespace

TEST_CASE("quantile bins are balanced within one") {
  std::mt19937_64 g(1);
  std::uniform_int_distribution<std::size_t> nb(2, 30), nn(30, 400);
  std::exponential_distribution<double> e(1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = nb(g), n = std::max(nn(g), B);
    std::vector<double> v(n);
    for (auto& x : v) x = std::floor(e(g) * 4.0) / 4.0;  // plenty of ties
    const Binning bin = quantile_bin(v, B);
    const auto [lo, hi] = std::minmax_element(bin.sizes.begin(), bin.sizes.end());
    CHECK(*hi - *lo <= 1);
    CHECK(std::accumulate(bin.sizes.begin(), bin.sizes.end(), std::size_t{0}) == n);
    // Bins are ordered: every value in bin b is <= every value in bin b + 1.
    std::vector<double> bmax(B, -1e300), bmin(B, 1e300);
    for (std::size_t i = 0; i < n; ++i) {
      bmax[bin.bin_of[i]] = std::max(bmax[bin.bin_of[i]], v[i]);
      bmin[bin.bin_of[i]] = std::min(bmin[bin.bin_of[i]], v[i]);
    }
    for (std::size_t b = 1; b < B; ++b) CHECK(bmax[b - 1] <= bmin[b]);
  }
  const std::vector<double> three = {1, 2, 3};
  CHECK_THROWS_AS(quantile_bin(three, 4), std::invalid_argument);
  CHECK_THROWS_AS(quantile_bin(three, 1), std::invalid_argument);
  const std::vector<double> with_nan = {1, NAN, 3};
  CHECK_THROWS_AS(quantile_bin(with_nan, 2), std::invalid_argument);
}

TEST_CASE("centroids are per-bin means") {
  BinSamples s;
  for (int i = 0; i < 6; ++i) {
    s.values.push_back(5 - i);
    s.vectors.push_back({static_cast<double>(i), 1.0});
  }
  const CentroidSet c = build_centroids(s, 3, Feature::PredEntropy, 2, "on");
  CHECK(c.bin_feature_means == std::vector<double>{0.5, 2.5, 4.5});
  CHECK(c.row(0)[0] == 4.5);  // values 0, 1 came from i = 5, 4
  CHECK(c.row(2)[0] == 0.5);
  CHECK(c.sample_count() == 6);
  CHECK(c.grand_mean()[0] == doctest::Approx(2.5));
}

TEST_CASE("CKA identities and oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const MatrixXd a = random_matrix(12, 7, seed);
    const MatrixXd b = random_matrix(12, 5, seed + 100);
    CHECK(*linear_cka(as_set(a), as_set(a)) == doctest::Approx(1.0).epsilon(1e-12));
    const MatrixXd rotated = a * random_rotation(7, seed + 7);
    CHECK(std::abs(*linear_cka(as_set(a), as_set(rotated)) - 1.0) < 1e-9);
    const auto ab = linear_cka(flat(a), flat(b), 12, 7, 5);
    CHECK(std::abs(*ab - cka_oracle(a, b)) < 1e-10);
  }
  const MatrixXd flat_rows = MatrixXd::Ones(5, 3);
  CHECK_FALSE(linear_cka(as_set(flat_rows), as_set(random_matrix(5, 3, 1))).has_value());
}

TEST_CASE("Procrustes invariances and oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const MatrixXd a = random_matrix(10, 6, seed);
    const MatrixXd b = random_matrix(10, 6, seed + 50);
    const MatrixXd moved = (3.7 * a * random_rotation(6, seed)).rowwise() + random_matrix(1, 6, seed + 9).row(0);
    CHECK(std::abs(procrustes_similarity(as_set(a), as_set(moved)) - 1.0) < 1e-8);
    CHECK(std::abs(procrustes_similarity(as_set(a), as_set(b)) - procrustes_oracle(a, b)) < 1e-10);
    // Different widths are allowed.
    const MatrixXd c = random_matrix(10, 3, seed + 70);
    CHECK(std::abs(procrustes_similarity(flat(a), flat(c), 10, 6, 3) - procrustes_oracle(a, c)) < 1e-10);
  }
  CHECK_THROWS_AS(procrustes_similarity(as_set(MatrixXd::Ones(4, 2)), as_set(random_matrix(4, 2, 1))),
                  std::domain_error);
}

TEST_CASE("matched cosine") {
  const MatrixXd a = random_matrix(8, 5, 3);
  CHECK(*matched_cosine(as_set(a), as_set(-a)).mean == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(*matched_cosine(as_set(a), as_set(a)).mean == doctest::Approx(1.0).epsilon(1e-12));
  MatrixXd sym(3, 2);
  sym << 1, 0, 0, 0, -1, 0;  // middle row is the mean
  const auto r = matched_cosine(as_set(sym), as_set(sym));
  CHECK(r.excluded == 1);
  CHECK(r.used == 2);
}

TEST_CASE("PCA agrees with a dense eigensolver") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const MatrixXd a = random_matrix(15, 9, seed);
    const PcaResult p = pca_top3(as_set(a));
    const MatrixXd xc = centered(a);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(xc.transpose() * xc);
    const auto& vals = es.eigenvalues();  // ascending
    const double total = vals.sum();
    REQUIRE(p.components == 3);
    for (int c = 0; c < 3; ++c) {
      const Eigen::Index k = vals.size() - 1 - c;
      CHECK(std::abs(p.explained[c] - vals(k) / total) < 1e-6);
      const Eigen::VectorXd proj = xc * es.eigenvectors().col(k);
      double same = 0, flip = 0;
      for (Eigen::Index i = 0; i < proj.size(); ++i) {
        same = std::max(same, std::abs(p.coords[i * 3 + c] - proj(i)));
        flip = std::max(flip, std::abs(p.coords[i * 3 + c] + proj(i)));
      }
      CHECK(std::min(same, flip) < 1e-6);
    }
  }
  // Rank two input flags the deficiency.
  MatrixXd low = random_matrix(6, 2, 3) * random_matrix(2, 5, 4);
  const PcaResult p = pca_top3(as_set(low));
  CHECK(p.rank_deficient);
  CHECK(p.components == 2);
}

TEST_CASE("symmetric eigen solver") {
  const MatrixXd m = random_matrix(6, 6, 8);
  const MatrixXd s = m + m.transpose();
  const SymmetricEigen e = symmetric_eigen(flat(s), 6);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(s);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(e.values[i] - es.eigenvalues()(5 - i)) < 1e-10);
}

TEST_CASE("span basis and decomposition") {
  const MatrixXd a = random_matrix(5, 12, 1);
  MatrixXd rows(6, 12);
  rows << a, a.row(0) + 2.0 * a.row(1);  // dependent row
  std::vector<std::vector<double>> vs;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    vs.emplace_back(12);
    for (Eigen::Index j = 0; j < 12; ++j) vs.back()[j] = rows(i, j);
  }
  const SubspaceBasis basis = span_basis(vs, 12);
  CHECK(basis.rank() == 5);
  for (std::size_t i = 0; i < basis.rank(); ++i)
    for (std::size_t j = 0; j < basis.rank(); ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 12; ++k) dot += basis.vectors[i][k] * basis.vectors[j][k];
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
    }
  std::vector<double> v(12);
  for (std::size_t k = 0; k < 12; ++k) v[k] = std::cos(0.3 * k);
  const Decomposition d = decompose(v, basis);
  for (std::size_t k = 0; k < 12; ++k) CHECK(d.in_span[k] + d.complement[k] == doctest::Approx(v[k]));
  double cross = 0;
  for (std::size_t k = 0; k < 12; ++k) cross += d.in_span[k] * d.complement[k];
  CHECK(std::abs(cross) < 1e-12);
  // A row of the span is entirely in-span.
  const Decomposition dr = decompose(vs[5], basis);
  for (double c : dr.complement) CHECK(std::abs(c) < 1e-9);

  const SubspaceBasis full = SubspaceBasis::full(4);
  std::vector<double> w = {1, 2, 3, 4};
  project_in_place(w, full, false);
  for (double c : w) CHECK(c == 0.0);
}

TEST_CASE("centroid set container round trip") {
  std::vector<CentroidSet> sets = {as_set(random_matrix(4, 3, 1), "on-policy"), as_set(random_matrix(5, 3, 2), "off")};
  sets[1].feature = Feature::EmaEntropyFwd;
  sets[1].layer = 7;
  sets[1].counts = {3, 3, 2, 4, 1};
  std::stringstream ss;
  write_centroid_sets(sets, ss);
  CHECK(read_centroid_sets(ss) == sets);
  std::string bad = ss.str();
  bad[1] = 'X';
  std::istringstream in(bad);
  CHECK_THROWS_AS(read_centroid_sets(in), FormatError);
}

TEST_CASE("matched-range rebinning") {
  BinSamples a, b;
  for (int i = 0; i <= 100; ++i) {
    a.values.push_back(i * 0.01);          // [0, 1]
    a.vectors.push_back({i * 0.01, 1.0});
    b.values.push_back(0.5 + i * 0.01);    // [0.5, 1.5]
    b.vectors.push_back({1.0, i * 0.01});
  }
  const MatchedPair m = rebin_matched(a, b, 5, Feature::PredEntropy, 0, "a", "b");
  CHECK(m.a.bins == m.b.bins);
  CHECK(m.a.bins + m.dropped_bins == 5);
  CHECK(m.a.bin_feature_means.front() >= 0.5);
  CHECK(m.b.bin_feature_means.back() <= 1.0);
}

TEST_CASE("samples pair features with hidden states") {
  const auto w = testsupport::random_model(4);
  TokenSeq seq;
  seq.append(tok::encode("hello there"), Role::User);
  TraceOptions o;
  o.taps = {1};
  const std::vector<Trace> ts = {score(*w, seq, o)};
  const BinSamples s = collect_samples(ts, Feature::PrevSurprise, 1);
  CHECK(s.values.size() == seq.size() - 1);  // first position undefined
  CHECK(s.dim() == w->dims.d_model);
  CHECK(s.values[0] == ts[0].tokens[0].surprise);
}

TEST_CASE("compare_sets rows") {
  const auto rows = compare_sets(as_set(random_matrix(6, 4, 1)), as_set(random_matrix(6, 4, 2)));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].metric == "matched_cosine");
  CHECK(rows[2].metric == "linear_cka");
  CHECK(rows[3].metric == "procrustes");
}
