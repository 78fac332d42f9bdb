#pragma once

// Naive layer-major transformer used as an oracle for the micro-runtime.
// Everything is recomputed from scratch with dense Eigen matrices; no cache.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include "plab/runtime.hpp"

namespace ref {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Steer {
  std::uint32_t lo = 0, hi = 0;
  std::vector<double> vector;
  double coefficient = 1.0;
  std::size_t from = 0;
};

// Queries at positions >= onset see donor keys/values on [begin, end).
struct Frankenstein {
  std::size_t begin = 0, end = 0, onset = 0;
  const plab::SpanKV* donor = nullptr;
};

inline MatrixXd to_matrix(const std::vector<float>& w, std::size_t rows, std::size_t cols) {
  MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = w[r * cols + c];
  return m;
}

inline MatrixXd rms_rows(const MatrixXd& x, const std::vector<float>& gain, double eps) {
  MatrixXd out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double rms = std::sqrt(x.row(r).squaredNorm() / static_cast<double>(x.cols()) + eps);
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / rms * gain[c];
  }
  return out;
}

inline void rotate_rows(MatrixXd& m, const plab::ModelDims& d) {
  for (Eigen::Index pos = 0; pos < m.rows(); ++pos) {
    for (std::size_t h = 0; h < d.n_heads; ++h) {
      for (std::size_t i = 0; i < d.d_head / 2; ++i) {
        const double theta = static_cast<double>(pos) / std::pow(d.rope_base, 2.0 * i / d.d_head);
        const auto c0 = static_cast<Eigen::Index>(h * d.d_head + 2 * i);
        std::complex<double> z(m(pos, c0), m(pos, c0 + 1));
        z *= std::polar(1.0, theta);
        m(pos, c0) = z.real();
        m(pos, c0 + 1) = z.imag();
      }
    }
  }
}

struct Output {
  std::vector<std::vector<double>> logits;
  std::vector<MatrixXd> keys, values;  // per layer, post-rotary, [pos][d_model]
  std::vector<MatrixXd> residual;      // per layer, after the block (and steering)
};

inline Output run(const plab::ModelWeights& w, const std::vector<plab::TokenId>& tokens, const Steer* steer = nullptr,
                  const Frankenstein* patch = nullptr) {
  const auto& d = w.dims;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto dm = static_cast<Eigen::Index>(d.d_model);
  MatrixXd x(n, dm);
  for (Eigen::Index p = 0; p < n; ++p)
    for (Eigen::Index c = 0; c < dm; ++c) x(p, c) = w.tok_embed[tokens[p] * d.d_model + c];

  Output out;
  for (std::uint32_t l = 0; l < d.n_layers; ++l) {
    const auto& L = w.layers[l];
    const MatrixXd xn = rms_rows(x, L.attn_norm, d.norm_eps);
    MatrixXd q = xn * to_matrix(L.wq, d.d_model, d.d_model).transpose();
    MatrixXd k = xn * to_matrix(L.wk, d.d_model, d.d_model).transpose();
    MatrixXd v = xn * to_matrix(L.wv, d.d_model, d.d_model).transpose();
    rotate_rows(q, d);
    rotate_rows(k, d);
    MatrixXd k_alt = k, v_alt = v;
    if (patch) {
      for (std::size_t j = patch->begin; j < patch->end; ++j)
        for (Eigen::Index c = 0; c < dm; ++c) {
          k_alt(j, c) = patch->donor->keys[l][(j - patch->begin) * d.d_model + c];
          v_alt(j, c) = patch->donor->values[l][(j - patch->begin) * d.d_model + c];
        }
    }
    out.keys.push_back(k);
    out.values.push_back(v);

    MatrixXd heads = MatrixXd::Zero(n, dm);
    for (Eigen::Index p = 0; p < n; ++p) {
      const bool use_alt = patch && static_cast<std::size_t>(p) >= patch->onset;
      const MatrixXd& kk = use_alt ? k_alt : k;
      const MatrixXd& vv = use_alt ? v_alt : v;
      for (std::size_t h = 0; h < d.n_heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * d.d_head);
        const auto dh = static_cast<Eigen::Index>(d.d_head);
        VectorXd s = kk.block(0, c0, p + 1, dh) * q.block(p, c0, 1, dh).transpose();
        s /= std::sqrt(static_cast<double>(d.d_head));
        s = (s.array() - s.maxCoeff()).exp();
        s /= s.sum();
        heads.block(p, c0, 1, dh) = s.transpose() * vv.block(0, c0, p + 1, dh);
      }
    }
    x += heads * to_matrix(L.wo, d.d_model, d.d_model).transpose();
    const MatrixXd xn2 = rms_rows(x, L.mlp_norm, d.norm_eps);
    MatrixXd f = xn2 * to_matrix(L.w_in, d.d_ff, d.d_model).transpose();
    f = f.unaryExpr([](double z) { return z / (1.0 + std::exp(-z)); });
    x += f * to_matrix(L.w_out, d.d_model, d.d_ff).transpose();
    if (steer && l >= steer->lo && l <= steer->hi) {
      for (Eigen::Index p = static_cast<Eigen::Index>(steer->from); p < n; ++p)
        for (Eigen::Index c = 0; c < dm; ++c) x(p, c) += steer->coefficient * steer->vector[c];
    }
    out.residual.push_back(x);
  }
  const MatrixXd logits = rms_rows(x, w.final_norm, d.norm_eps) * to_matrix(w.unembed, d.vocab_size, d.d_model).transpose();
  for (Eigen::Index p = 0; p < n; ++p) {
    std::vector<double> row(d.vocab_size);
    for (std::size_t t = 0; t < d.vocab_size; ++t) row[t] = logits(p, static_cast<Eigen::Index>(t));
    out.logits.push_back(std::move(row));
  }
  return out;
}

}  // namespace ref
