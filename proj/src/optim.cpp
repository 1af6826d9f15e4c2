#include "prrg/optim.hpp"

#include <cmath>

namespace prrg {

void AdamW::update(const std::string& name, std::span<double> w, std::span<const double> g, double lr,
                   double grad_scale) {
  AdamMoments& mom = moments_[name];
  if (mom.m.size() != w.size()) {
    mom.m.assign(w.size(), 0.0);
    mom.v.assign(w.size(), 0.0);
  }
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = g.empty() ? 0.0 : g[i] * grad_scale;
    w[i] *= decay;
    mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * gi;
    mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * gi * gi;
    const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

double AdamW::step(std::vector<NamedParam>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double scale = cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
  begin_step();
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    update(p.name, p.tensor.mutable_data(), p.tensor.grad(), cfg_.lr(p.group), scale);
  }
  return norm;
}

void zero_grads(std::vector<NamedParam>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace prrg
