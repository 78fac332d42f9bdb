#include "plab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "plab/binary_io.hpp"
#include "plab/entropy.hpp"
#include "plab/tensor_container.hpp"

namespace plab {

namespace {

constexpr char kCentroidMagic[5] = "PLCS";

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Gram matrix of the rows: [rows][rows].
std::vector<double> gram(std::span<const double> m, std::size_t rows, std::size_t cols) {
  std::vector<double> g(rows * rows);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = i; j < rows; ++j) {
      const double v = dot(m.subspan(i * cols, cols), m.subspan(j * cols, cols));
      g[i * rows + j] = v;
      g[j * rows + i] = v;
    }
  }
  return g;
}

// Singular values of an m x n matrix by one-sided Jacobi on its columns.
std::vector<double> singular_values(std::vector<double> a, std::size_t m, std::size_t n) {
  std::vector<std::vector<double>> col(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) col[j][i] = a[i * n + j];
  }
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double alpha = dot(col[i], col[i]);
        const double beta = dot(col[j], col[j]);
        const double gamma = dot(col[i], col[j]);
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double xi = col[i][k], xj = col[j][k];
          col[i][k] = c * xi - s * xj;
          col[j][k] = s * xi + c * xj;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = norm(col[j]);
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

// Coordinates of each row in an orthonormal basis of the row space.
std::vector<double> row_space_coords(std::span<const double> m, std::size_t rows, std::size_t cols,
                                     std::size_t& k) {
  std::vector<std::vector<double>> vs;
  for (std::size_t i = 0; i < rows; ++i) vs.emplace_back(m.begin() + i * cols, m.begin() + (i + 1) * cols);
  const SubspaceBasis q = span_basis(vs, cols, 1e-12);
  k = q.rank();
  std::vector<double> c(rows * k);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < k; ++j) c[i * k + j] = dot(m.subspan(i * cols, cols), q.vectors[j]);
  }
  return c;
}

std::vector<double> centered_unit(std::span<const double> m, std::size_t rows, std::size_t cols) {
  std::vector<double> c = center_rows(m, rows, cols);
  const double f = norm(c);
  if (!(f > 0.0)) throw std::domain_error("degenerate configuration: zero variance");
  for (auto& v : c) v /= f;
  return c;
}

void require_same_rows(const CentroidSet& a, const CentroidSet& b) {
  if (a.bins != b.bins) throw std::invalid_argument("centroid sets differ in bin count");
}

}  // namespace

// ---------------------------------------------------------------------------
// Binning and centroids

Binning quantile_bin(std::span<const double> values, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("quantile_bin needs at least 2 bins");
  const std::size_t n = values.size();
  if (n < bins) throw std::invalid_argument("quantile_bin needs at least as many values as bins");
  for (double v : values) {
    if (std::isnan(v)) throw std::invalid_argument("quantile_bin: NaN value");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Binning out;
  out.bin_of.resize(n);
  out.sizes.assign(bins, 0);
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * n / bins;
    const std::size_t hi = (b + 1) * n / bins;
    out.edges.push_back(values[order[lo]]);
    for (std::size_t r = lo; r < hi; ++r) out.bin_of[order[r]] = b;
    out.sizes[b] = hi - lo;
  }
  out.edges.push_back(values[order.back()]);
  return out;
}

BinSamples collect_samples(std::span<const Trace> traces, Feature feature, std::uint32_t layer,
                           const FeatureParams& params, std::optional<Role> role) {
  BinSamples out;
  for (const auto& t : traces) {
    if (t.hidden.empty()) continue;
    const FeatureSeries f = derive_feature(t, feature, params);
    std::map<std::uint32_t, std::size_t> index;
    for (std::size_t i = 0; i < t.tokens.size(); ++i) index[t.tokens[i].position] = i;
    for (const auto& h : t.hidden) {
      if (h.layer != layer) continue;
      const std::size_t i = index.at(h.position);
      if (role && t.tokens[i].role != *role) continue;
      if (!std::isfinite(f.values[i])) continue;
      out.values.push_back(f.values[i]);
      out.vectors.emplace_back(h.vector.begin(), h.vector.end());
    }
  }
  return out;
}

std::size_t CentroidSet::sample_count() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::vector<double> CentroidSet::grand_mean() const {
  std::vector<double> m(dim, 0.0);
  const double n = static_cast<double>(sample_count());
  if (n == 0) throw std::invalid_argument("centroid set has no samples");
  for (std::size_t b = 0; b < bins; ++b) {
    const auto r = row(b);
    for (std::size_t i = 0; i < dim; ++i) m[i] += static_cast<double>(counts[b]) * r[i];
  }
  for (auto& v : m) v /= n;
  return m;
}

void CentroidSet::validate() const {
  if (bins == 0 || dim == 0) throw std::invalid_argument("centroid set is empty");
  if (bin_feature_means.size() != bins || counts.size() != bins || matrix.size() != bins * dim) {
    throw std::invalid_argument("centroid set shapes are inconsistent");
  }
  for (std::size_t b = 1; b < bins; ++b) {
    if (bin_feature_means[b] < bin_feature_means[b - 1]) {
      throw std::invalid_argument("bin feature means must be nondecreasing");
    }
  }
  for (double v : matrix) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite centroid entry");
  }
}

CentroidSet build_centroids(const BinSamples& samples, std::size_t bins, Feature feature, std::uint32_t layer,
                            std::string condition) {
  if (samples.values.size() != samples.vectors.size()) {
    throw std::invalid_argument("feature values and hidden vectors are not aligned");
  }
  const Binning binning = quantile_bin(samples.values, bins);
  CentroidSet set;
  set.feature = feature;
  set.layer = layer;
  set.condition = std::move(condition);
  set.bins = bins;
  set.dim = samples.dim();
  set.bin_feature_means.assign(bins, 0.0);
  set.matrix.assign(bins * set.dim, 0.0);
  set.counts = binning.sizes;
  for (std::size_t i = 0; i < samples.values.size(); ++i) {
    const std::size_t b = binning.bin_of[i];
    if (samples.vectors[i].size() != set.dim) throw std::invalid_argument("hidden vectors differ in length");
    set.bin_feature_means[b] += samples.values[i];
    for (std::size_t k = 0; k < set.dim; ++k) set.matrix[b * set.dim + k] += samples.vectors[i][k];
  }
  for (std::size_t b = 0; b < bins; ++b) {
    const double c = static_cast<double>(set.counts[b]);
    set.bin_feature_means[b] /= c;
    for (std::size_t k = 0; k < set.dim; ++k) set.matrix[b * set.dim + k] /= c;
  }
  set.validate();
  return set;
}

MatchedPair rebin_matched(const BinSamples& a, const BinSamples& b, std::size_t bins, Feature feature,
                          std::uint32_t layer, const std::string& condition_a, const std::string& condition_b) {
  if (bins < 2) throw std::invalid_argument("rebin_matched needs at least 2 bins");
  if (a.values.empty() || b.values.empty()) throw std::invalid_argument("rebin_matched needs samples in both sets");
  if (a.dim() != b.dim()) throw std::invalid_argument("sample sets differ in dimension");
  const auto [amin, amax] = std::minmax_element(a.values.begin(), a.values.end());
  const auto [bmin, bmax] = std::minmax_element(b.values.begin(), b.values.end());
  const double lo = std::max(*amin, *bmin);
  const double hi = std::min(*amax, *bmax);
  if (!(hi > lo)) throw std::invalid_argument("feature ranges do not overlap");

  struct Acc {
    std::vector<double> sum_value;
    std::vector<std::vector<double>> sum_vec;
    std::vector<std::size_t> count;
  };
  auto accumulate = [&](const BinSamples& s) {
    Acc acc{std::vector<double>(bins, 0.0), std::vector<std::vector<double>>(bins, std::vector<double>(s.dim(), 0.0)),
            std::vector<std::size_t>(bins, 0)};
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double v = s.values[i];
      if (v < lo || v > hi) continue;
      auto k = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      k = std::min(k, bins - 1);
      acc.sum_value[k] += v;
      for (std::size_t j = 0; j < s.dim(); ++j) acc.sum_vec[k][j] += s.vectors[i][j];
      ++acc.count[k];
    }
    return acc;
  };
  const Acc acc_a = accumulate(a);
  const Acc acc_b = accumulate(b);

  MatchedPair out;
  auto init = [&](CentroidSet& set, const std::string& cond) {
    set.feature = feature;
    set.layer = layer;
    set.condition = cond;
    set.dim = a.dim();
  };
  init(out.a, condition_a);
  init(out.b, condition_b);
  auto push = [&](CentroidSet& set, const Acc& acc, std::size_t k) {
    const double c = static_cast<double>(acc.count[k]);
    set.bin_feature_means.push_back(acc.sum_value[k] / c);
    for (double v : acc.sum_vec[k]) set.matrix.push_back(v / c);
    set.counts.push_back(acc.count[k]);
    ++set.bins;
  };
  for (std::size_t k = 0; k < bins; ++k) {
    if (acc_a.count[k] == 0 || acc_b.count[k] == 0) {
      ++out.dropped_bins;
      continue;
    }
    push(out.a, acc_a, k);
    push(out.b, acc_b, k);
  }
  if (out.a.bins == 0) throw std::invalid_argument("no bin is populated in both sets");
  out.a.validate();
  out.b.validate();
  return out;
}

void write_centroid_sets(std::span<const CentroidSet> sets, std::ostream& out) {
  TensorFile file;
  nlohmann::json meta = nlohmann::json::array();
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& s = sets[i];
    s.validate();
    meta.push_back({{"feature", std::string(to_string(s.feature))},
                    {"layer", s.layer},
                    {"condition", s.condition},
                    {"bins", s.bins},
                    {"dim", s.dim}});
    const std::string p = "set." + std::to_string(i) + ".";
    file.tensors.push_back({p + "bin_feature_means", {s.bins}, DType::F64, s.bin_feature_means});
    file.tensors.push_back({p + "matrix", {s.bins, s.dim}, DType::F64, s.matrix});
    file.tensors.push_back(
        {p + "counts", {s.bins}, DType::F64, std::vector<double>(s.counts.begin(), s.counts.end())});
  }
  file.header["sets"] = meta;
  write_tensor_file(file, kCentroidMagic, out);
}

std::vector<CentroidSet> read_centroid_sets(std::istream& in) {
  const TensorFile file = read_tensor_file(in, kCentroidMagic);
  std::vector<CentroidSet> sets;
  try {
    const auto& meta = file.header.at("sets");
    for (std::size_t i = 0; i < meta.size(); ++i) {
      CentroidSet s;
      s.feature = parse_feature(meta[i].at("feature").get<std::string>());
      s.layer = meta[i].at("layer").get<std::uint32_t>();
      s.condition = meta[i].at("condition").get<std::string>();
      s.bins = meta[i].at("bins").get<std::size_t>();
      s.dim = meta[i].at("dim").get<std::size_t>();
      const std::string p = "set." + std::to_string(i) + ".";
      s.bin_feature_means = file.at(p + "bin_feature_means").values;
      s.matrix = file.at(p + "matrix").values;
      for (double c : file.at(p + "counts").values) {
        if (c < 0 || c != std::floor(c)) throw FormatError("centroid counts must be nonnegative integers");
        s.counts.push_back(static_cast<std::size_t>(c));
      }
      s.validate();
      sets.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("centroid header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("centroid set: ") + e.what());
  }
  return sets;
}

void save_centroid_sets(std::span<const CentroidSet> sets, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_centroid_sets(sets, out);
}

std::vector<CentroidSet> load_centroid_sets(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_centroid_sets(in);
}

// ---------------------------------------------------------------------------
// Linear algebra

SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw std::invalid_argument("symmetric_eigen: size mismatch");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  auto off = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return s;
  };
  double total = 0.0;
  for (double x : a) total += x * x;

  for (int sweep = 0; sweep < 100 && off() > 1e-30 * total; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  SymmetricEigen out;
  out.values.resize(n);
  out.vectors.resize(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a[order[j] * n + order[j]];
    for (std::size_t i = 0; i < n; ++i) out.vectors[i * n + j] = v[i * n + order[j]];
  }
  return out;
}

std::vector<double> center_rows(std::span<const double> m, std::size_t rows, std::size_t cols) {
  if (m.size() != rows * cols) throw std::invalid_argument("center_rows: size mismatch");
  std::vector<double> mean(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) mean[j] += m[i * cols + j];
  for (auto& x : mean) x /= static_cast<double>(rows);
  std::vector<double> out(m.begin(), m.end());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] -= mean[j];
  return out;
}

// ---------------------------------------------------------------------------
// Comparisons

PcaResult pca_top3(const CentroidSet& set) {
  set.validate();
  if (set.bins < 4) throw std::invalid_argument("pca_top3 needs at least 4 bins");
  const std::size_t b = set.bins;
  const std::vector<double> x = center_rows(set.matrix, b, set.dim);
  const SymmetricEigen eig = symmetric_eigen(gram(x, b, set.dim), b);

  double total = 0.0;
  for (double l : eig.values) total += std::max(l, 0.0);
  PcaResult out;
  out.rows = b;
  if (!(total > 0.0)) {
    out.rank_deficient = true;
    return out;
  }
  std::size_t rank = 0;
  for (double l : eig.values) {
    if (l > 1e-12 * eig.values.front()) ++rank;
  }
  out.components = std::min<std::size_t>(3, rank);
  out.rank_deficient = rank < 3;
  out.coords.assign(b * out.components, 0.0);
  for (std::size_t c = 0; c < out.components; ++c) {
    const double s = std::sqrt(eig.values[c]);
    std::size_t arg = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (std::abs(eig.vectors[i * b + c]) > std::abs(eig.vectors[arg * b + c])) arg = i;
    }
    const double sign = eig.vectors[arg * b + c] < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < b; ++i) out.coords[i * out.components + c] = sign * s * eig.vectors[i * b + c];
    out.explained.push_back(eig.values[c] / total);
  }
  return out;
}

CosineResult matched_cosine(const CentroidSet& a, const CentroidSet& b) {
  require_same_rows(a, b);
  if (a.dim != b.dim) throw std::invalid_argument("centroid sets differ in dimension");
  const std::vector<double> x = center_rows(a.matrix, a.bins, a.dim);
  const std::vector<double> y = center_rows(b.matrix, b.bins, b.dim);
  const std::span<const double> xs(x), ys(y);
  CosineResult out;
  double sum = 0.0;
  for (std::size_t r = 0; r < a.bins; ++r) {
    const auto xr = xs.subspan(r * a.dim, a.dim);
    const auto yr = ys.subspan(r * a.dim, a.dim);
    const double nx = norm(xr), ny = norm(yr);
    if (!(nx > 0.0) || !(ny > 0.0)) {
      ++out.excluded;
      continue;
    }
    sum += std::clamp(dot(xr, yr) / (nx * ny), -1.0, 1.0);
    ++out.used;
  }
  if (out.used > 0) out.mean = sum / static_cast<double>(out.used);
  return out;
}

std::optional<double> linear_cka(std::span<const double> x, std::span<const double> y, std::size_t rows,
                                 std::size_t x_cols, std::size_t y_cols) {
  const std::vector<double> xc = center_rows(x, rows, x_cols);
  const std::vector<double> yc = center_rows(y, rows, y_cols);
  const std::vector<double> k = gram(xc, rows, x_cols);
  const std::vector<double> l = gram(yc, rows, y_cols);
  double kl = 0.0, kk = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    kl += k[i] * l[i];
    kk += k[i] * k[i];
    ll += l[i] * l[i];
  }
  if (!(kk > 0.0) || !(ll > 0.0)) return std::nullopt;
  return kl / (std::sqrt(kk) * std::sqrt(ll));
}

std::optional<double> linear_cka(const CentroidSet& a, const CentroidSet& b) {
  require_same_rows(a, b);
  return linear_cka(a.matrix, b.matrix, a.bins, a.dim, b.dim);
}

double procrustes_similarity(std::span<const double> x, std::span<const double> y, std::size_t rows,
                             std::size_t x_cols, std::size_t y_cols) {
  const std::vector<double> xc = centered_unit(x, rows, x_cols);
  const std::vector<double> yc = centered_unit(y, rows, y_cols);
  // X^T Y has the singular values of Cx^T Cy, with C the row-space coordinates.
  std::size_t kx = 0, ky = 0;
  const std::vector<double> cx = row_space_coords(xc, rows, x_cols, kx);
  const std::vector<double> cy = row_space_coords(yc, rows, y_cols, ky);
  std::vector<double> m(kx * ky, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < kx; ++i)
      for (std::size_t j = 0; j < ky; ++j) m[i * ky + j] += cx[r * kx + i] * cy[r * ky + j];
  const std::vector<double> sv = singular_values(std::move(m), kx, ky);
  const double nuclear = std::accumulate(sv.begin(), sv.end(), 0.0);
  return std::clamp(nuclear, 0.0, 1.0);
}

double procrustes_similarity(const CentroidSet& a, const CentroidSet& b) {
  require_same_rows(a, b);
  return procrustes_similarity(a.matrix, b.matrix, a.bins, a.dim, b.dim);
}

// ---------------------------------------------------------------------------
// Subspaces

SubspaceBasis SubspaceBasis::full(std::size_t dim) {
  SubspaceBasis b;
  b.dim = dim;
  for (std::size_t i = 0; i < dim; ++i) {
    std::vector<double> e(dim, 0.0);
    e[i] = 1.0;
    b.vectors.push_back(std::move(e));
  }
  return b;
}

SubspaceBasis span_basis(const std::vector<std::vector<double>>& vectors, std::size_t dim,
                         double relative_tolerance) {
  SubspaceBasis basis;
  basis.dim = dim;
  std::vector<std::vector<double>> residual = vectors;
  double scale = 0.0;
  for (const auto& r : residual) {
    if (r.size() != dim) throw std::invalid_argument("span_basis: vector dimension mismatch");
    scale = std::max(scale, norm(r));
  }
  if (!(scale > 0.0)) return basis;
  const double tol = relative_tolerance * scale;
  std::vector<bool> used(residual.size(), false);

  while (basis.rank() < dim) {
    std::size_t pivot = residual.size();
    double best = tol;
    for (std::size_t i = 0; i < residual.size(); ++i) {
      if (used[i]) continue;
      const double n = norm(residual[i]);
      if (n > best) {
        best = n;
        pivot = i;
      }
    }
    if (pivot == residual.size()) break;
    used[pivot] = true;
    std::vector<double> q = residual[pivot];
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis.vectors) {
        const double c = dot(q, b);
        for (std::size_t k = 0; k < dim; ++k) q[k] -= c * b[k];
      }
    }
    const double qn = norm(q);
    if (!(qn > tol)) continue;
    for (auto& v : q) v /= qn;
    for (std::size_t i = 0; i < residual.size(); ++i) {
      if (used[i]) continue;
      const double c = dot(residual[i], q);
      for (std::size_t k = 0; k < dim; ++k) residual[i][k] -= c * q[k];
    }
    basis.vectors.push_back(std::move(q));
  }
  return basis;
}

SubspaceBasis span_basis(std::span<const CentroidSet> sets, double relative_tolerance) {
  if (sets.empty()) throw std::invalid_argument("span_basis needs at least one centroid set");
  const std::size_t dim = sets.front().dim;
  std::vector<std::vector<double>> rows;
  for (const auto& s : sets) {
    if (s.dim != dim) throw std::invalid_argument("centroid sets differ in dimension");
    const std::vector<double> c = center_rows(s.matrix, s.bins, s.dim);
    for (std::size_t r = 0; r < s.bins; ++r) rows.emplace_back(c.begin() + r * dim, c.begin() + (r + 1) * dim);
  }
  return span_basis(rows, dim, relative_tolerance);
}

Decomposition decompose(std::span<const double> v, const SubspaceBasis& basis) {
  if (v.size() != basis.dim) throw std::invalid_argument("decompose: dimension mismatch");
  Decomposition d;
  d.in_span.assign(v.size(), 0.0);
  for (const auto& q : basis.vectors) {
    const double c = dot(v, q);
    for (std::size_t k = 0; k < v.size(); ++k) d.in_span[k] += c * q[k];
  }
  d.complement.resize(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) d.complement[k] = v[k] - d.in_span[k];
  return d;
}

void project_in_place(std::span<double> v, const SubspaceBasis& basis, bool keep_span) {
  Decomposition d = decompose(v, basis);
  const auto& keep = keep_span ? d.in_span : d.complement;
  std::copy(keep.begin(), keep.end(), v.begin());
}

// ---------------------------------------------------------------------------
// Reports

std::vector<GeometryRow> compare_sets(const CentroidSet& a, const CentroidSet& b) {
  const std::string f(to_string(a.feature));
  std::vector<GeometryRow> rows;
  const CosineResult cos = matched_cosine(a, b);
  rows.push_back({f, a.layer, "matched_cosine", cos.mean});
  rows.push_back({f, a.layer, "matched_cosine_excluded_rows", static_cast<double>(cos.excluded)});
  rows.push_back({f, a.layer, "linear_cka", linear_cka(a, b)});
  std::optional<double> proc;
  try {
    proc = procrustes_similarity(a, b);
  } catch (const std::domain_error&) {
  }
  rows.push_back({f, a.layer, "procrustes", proc});
  return rows;
}

void write_geometry_csv(std::ostream& os, std::span<const GeometryRow> rows) {
  os << "feature,layer,metric,value\n";
  for (const auto& r : rows) {
    os << r.feature << ',' << r.layer << ',' << r.metric << ',' << (r.value ? format_real(*r.value) : "undefined")
       << '\n';
  }
}

void write_centroids_csv(std::ostream& os, std::span<const CentroidSet> sets) {
  os << "feature,layer,condition,bin,bin_feature_mean,count\n";
  for (const auto& s : sets) {
    for (std::size_t b = 0; b < s.bins; ++b) {
      os << to_string(s.feature) << ',' << s.layer << ',' << s.condition << ',' << b << ','
         << format_real(s.bin_feature_means[b]) << ',' << s.counts[b] << '\n';
    }
  }
}

void write_pca_csv(std::ostream& os, const CentroidSet& set, const PcaResult& pca) {
  os << "feature,layer,condition,bin,bin_feature_mean,pc1,pc2,pc3\n";
  for (std::size_t b = 0; b < pca.rows; ++b) {
    os << to_string(set.feature) << ',' << set.layer << ',' << set.condition << ',' << b << ','
       << format_real(set.bin_feature_means[b]);
    for (std::size_t c = 0; c < 3; ++c) {
      os << ',';
      if (c < pca.components) os << format_real(pca.coords[b * pca.components + c]);
    }
    os << '\n';
  }
}

}  // namespace plab
