#include "qeebm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace qeebm {

double Adam::step(std::span<ParameterStore* const> stores, double max_norm) {
  std::vector<ad::Parameter*> params;
  double sq = 0.0;
  for (ParameterStore* s : stores)
    for (auto& p : s->parameters()) {
      if (p.frozen) continue;
      params.push_back(&p);
      for (double g : p.grad) sq += g * g;
    }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw std::runtime_error("non-finite gradient norm");
  const double factor = (max_norm > 0.0 && norm > max_norm) ? max_norm / norm : 1.0;

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (ad::Parameter* p : params) {
    auto& st = state_[p->name];
    if (st.m.size() != p->size()) {
      st.m.assign(p->size(), 0.0);
      st.v.assign(p->size(), 0.0);
    }
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i] * factor;
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
      p->value[i] -= cfg_.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg_.eps);
    }
  }
  return norm;
}

void sgd_step(ParameterStore& store, double lr) {
  for (auto& p : store.parameters()) {
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.size(); ++i) p.value[i] -= lr * p.grad[i];
  }
}

}  // namespace qeebm
