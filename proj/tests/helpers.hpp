#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "qeebm/autodiff.hpp"
#include "qeebm/models.hpp"
#include "qeebm/rng.hpp"

namespace testing {

inline qeebm::ad::Parameter& param(qeebm::ParameterStore& s, const std::string& name) {
  for (auto& p : s.parameters())
    if (p.name == name) return p;
  throw std::invalid_argument("no parameter " + name);
}

/// Zero output projection: every next-token distribution is uniform.
inline void make_uniform(qeebm::TaskNet& net) {
  std::fill(param(net, "out.w").value.begin(), param(net, "out.w").value.end(), 0.0);
  std::fill(param(net, "out.b").value.begin(), param(net, "out.b").value.end(), 0.0);
}

/// Output bias that puts (almost) all mass on `token` regardless of context.
inline void rig_token(qeebm::TaskNet& net, qeebm::Token token, double margin = 60.0) {
  make_uniform(net);
  param(net, "out.b").value[static_cast<std::size_t>(token)] = margin;
}

inline qeebm::ModelDims small_dims(int vocab = 10) { return qeebm::ModelDims{vocab, 8, 2, 16, 0.3}; }

inline std::vector<double> random_values(qeebm::RngStream& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline qeebm::TokenSeq random_tokens(qeebm::RngStream& rng, int vocab, int lo, int hi) {
  qeebm::TokenSeq s(static_cast<std::size_t>(rng.uniform_int(lo, hi)));
  for (auto& t : s) t = rng.uniform_int(qeebm::special::kCount, vocab - 1);
  return s;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("qeebm-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing
