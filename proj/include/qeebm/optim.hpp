#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "qeebm/models.hpp"

namespace qeebm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over every non-frozen parameter of the given stores. Moment estimates are keyed by
/// parameter name, so parameters added later (adapters) simply start with fresh moments.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  /// Clips the joint gradient to max_norm (when > 0), applies one update and returns the
  /// pre-clipping gradient norm. Gradients are left in place.
  double step(std::span<ParameterStore* const> stores, double max_norm);

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Plain gradient descent step on every non-frozen parameter.
void sgd_step(ParameterStore& store, double lr);

}  // namespace qeebm
