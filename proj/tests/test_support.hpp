#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "plab/runtime.hpp"

namespace testsupport {

inline plab::ModelDims small_dims(std::uint32_t d_model = 16, std::uint32_t layers = 2) {
  plab::ModelDims d;
  d.d_model = d_model;
  d.n_heads = 2;
  d.d_head = d_model / 2;
  d.d_ff = 2 * d_model;
  d.n_layers = layers;
  d.max_context = 1024;
  return d;
}

inline std::shared_ptr<const plab::ModelWeights> random_model(std::uint64_t seed, std::uint32_t d_model = 16,
                                                               std::uint32_t layers = 2, double logit_scale = 3.0) {
  return std::make_shared<const plab::ModelWeights>(
      plab::ModelWeights::random(small_dims(d_model, layers), seed, logit_scale));
}

inline std::vector<plab::TokenId> random_tokens(std::size_t n, std::uint64_t seed, plab::TokenId vocab = 256) {
  std::mt19937_64 g(seed);
  std::vector<plab::TokenId> out(n);
  for (auto& t : out) t = static_cast<plab::TokenId>(g() % vocab);
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Zero attention and MLP; every token embeds to e0 + offset * e1; unembed row t
// reads e1 with weight w_t. Output entropy falls as the e1 coordinate grows.
inline plab::ModelWeights planted_model(double offset = 2.0) {
  plab::ModelDims d = small_dims(8, 2);
  plab::ModelWeights w = plab::ModelWeights::zeros(d);
  for (std::uint32_t t = 0; t < d.vocab_size; ++t) {
    w.tok_embed[t * d.d_model + 0] = 1.0f;
    w.tok_embed[t * d.d_model + 1] = static_cast<float>(offset);
    w.unembed[t * d.d_model + 1] = static_cast<float>(0.02 * static_cast<double>(t % 97));
  }
  return w;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) {
    path = std::filesystem::temp_directory_path() / ("plab_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

}  // namespace testsupport
