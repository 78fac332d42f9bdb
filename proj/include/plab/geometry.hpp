#pragma once

// Activation geometry over binned hidden states: quantile binning, centroid
// sets, PCA of centroid curves, matched-bin cosine, linear CKA, Procrustes
// similarity, and the orthonormal span used for subspace-filtered patching.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/trace.hpp"

namespace plab {

struct Binning {
  std::vector<std::size_t> bin_of;  // per input value
  std::vector<std::size_t> sizes;   // per bin
  std::vector<double> edges;        // B + 1: lowest value of each bin, then the overall max
};

/// Equal-population bins: after a stable sort, bin b takes ranks
/// [floor(b n / B), floor((b + 1) n / B)). Ties keep input order.
Binning quantile_bin(std::span<const double> values, std::size_t bins);

/// Feature values paired with the hidden vectors at the same positions.
struct BinSamples {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
  std::size_t dim() const { return vectors.empty() ? 0 : vectors.front().size(); }
};

/// Pairs the hidden record at `layer` with the feature at the same position,
/// skipping positions where the feature is undefined.
BinSamples collect_samples(std::span<const Trace> traces, Feature feature, std::uint32_t layer,
                           const FeatureParams& params = {}, std::optional<Role> role = std::nullopt);

struct CentroidSet {
  Feature feature = Feature::PredEntropy;
  std::uint32_t layer = 0;
  std::string condition;
  std::size_t bins = 0;
  std::size_t dim = 0;
  std::vector<double> bin_feature_means;  // [bins], nats
  std::vector<double> matrix;             // [bins][dim]
  std::vector<std::size_t> counts;        // [bins]

  std::span<const double> row(std::size_t b) const { return {matrix.data() + b * dim, dim}; }
  std::size_t sample_count() const;
  /// Count-weighted mean of the rows, i.e. the mean of the source activations.
  std::vector<double> grand_mean() const;
  void validate() const;

  bool operator==(const CentroidSet&) const = default;
};

CentroidSet build_centroids(const BinSamples& samples, std::size_t bins, Feature feature, std::uint32_t layer,
                            std::string condition);

/// Rebins both sample sets with equal-width bins over the intersection of
/// their feature ranges; bins empty in either set are dropped from both.
struct MatchedPair {
  CentroidSet a;
  CentroidSet b;
  std::size_t dropped_bins = 0;
};
MatchedPair rebin_matched(const BinSamples& a, const BinSamples& b, std::size_t bins, Feature feature,
                          std::uint32_t layer, const std::string& condition_a, const std::string& condition_b);

void write_centroid_sets(std::span<const CentroidSet> sets, std::ostream& out);
std::vector<CentroidSet> read_centroid_sets(std::istream& in);
void save_centroid_sets(std::span<const CentroidSet> sets, const std::string& path);
std::vector<CentroidSet> load_centroid_sets(const std::string& path);

// ---------------------------------------------------------------------------
// Linear algebra helpers (row-major, dense)

struct SymmetricEigen {
  std::vector<double> values;   // descending
  std::vector<double> vectors;  // [n][n], column j pairs with values[j]
};

/// Cyclic Jacobi eigensolver for a symmetric n x n matrix.
SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n);

/// Rows minus their (unweighted) mean row.
std::vector<double> center_rows(std::span<const double> m, std::size_t rows, std::size_t cols);

// ---------------------------------------------------------------------------
// Comparisons

struct PcaResult {
  std::size_t components = 0;          // min(3, rank)
  std::size_t rows = 0;
  std::vector<double> coords;          // [rows][components]
  std::vector<double> explained;       // variance fraction per component
  bool rank_deficient = false;         // rank < 3
};

PcaResult pca_top3(const CentroidSet& set);

struct CosineResult {
  std::optional<double> mean;  // absent when every row was excluded
  std::size_t used = 0;
  std::size_t excluded = 0;    // zero-norm centered rows
};

CosineResult matched_cosine(const CentroidSet& a, const CentroidSet& b);

/// Undefined (nullopt) when either centered matrix is zero.
std::optional<double> linear_cka(const CentroidSet& a, const CentroidSet& b);
std::optional<double> linear_cka(std::span<const double> x, std::span<const double> y, std::size_t rows,
                                 std::size_t x_cols, std::size_t y_cols);

/// 1 - min_R |X - Y R|^2 / 2 over orthogonal R, for centered unit-norm X, Y.
/// Throws on a zero-variance input.
double procrustes_similarity(const CentroidSet& a, const CentroidSet& b);
double procrustes_similarity(std::span<const double> x, std::span<const double> y, std::size_t rows,
                             std::size_t x_cols, std::size_t y_cols);

// ---------------------------------------------------------------------------
// Subspaces

struct SubspaceBasis {
  std::size_t dim = 0;
  std::vector<std::vector<double>> vectors;  // orthonormal

  std::size_t rank() const { return vectors.size(); }
  static SubspaceBasis full(std::size_t dim);
};

inline constexpr double kSpanTolerance = 1e-8;

/// Orthonormal basis of the span of every set's centered rows (modified
/// Gram-Schmidt with pivoting on residual norm, re-orthogonalized).
SubspaceBasis span_basis(std::span<const CentroidSet> sets, double relative_tolerance = kSpanTolerance);
SubspaceBasis span_basis(const std::vector<std::vector<double>>& vectors, std::size_t dim,
                         double relative_tolerance = kSpanTolerance);

struct Decomposition {
  std::vector<double> in_span;
  std::vector<double> complement;
};

Decomposition decompose(std::span<const double> v, const SubspaceBasis& basis);
void project_in_place(std::span<double> v, const SubspaceBasis& basis, bool keep_span);

// ---------------------------------------------------------------------------
// Reports

struct GeometryRow {
  std::string feature;
  std::uint32_t layer = 0;
  std::string metric;
  std::optional<double> value;
};

/// matched_cosine, linear_cka and procrustes rows for one pair of sets.
std::vector<GeometryRow> compare_sets(const CentroidSet& a, const CentroidSet& b);
void write_geometry_csv(std::ostream& os, std::span<const GeometryRow> rows);
void write_centroids_csv(std::ostream& os, std::span<const CentroidSet> sets);
void write_pca_csv(std::ostream& os, const CentroidSet& set, const PcaResult& pca);

}  // namespace plab
