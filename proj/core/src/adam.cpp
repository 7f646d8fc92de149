#include "tsrq/adam.hpp"

#include <cmath>
#include <utility>

#include "tsrq/errors.hpp"

namespace tsrq {

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  if (!(cfg_.lr > 0.0f)) throw ArgumentError("adam: lr must be positive");
  if (!(cfg_.beta1 >= 0.0f && cfg_.beta1 < 1.0f) ||
      !(cfg_.beta2 >= 0.0f && cfg_.beta2 < 1.0f)) {
    throw ArgumentError("adam: betas must lie in [0,1)");
  }
  if (!(cfg_.eps > 0.0f)) throw ArgumentError("adam: eps must be positive");
}

void Adam::add_param(Tensor p, float weight_decay, bool skip_nonfinite) {
  if (!p.requires_grad()) {
    throw ArgumentError("adam: parameter does not require grad");
  }
  Group g;
  g.p = std::move(p);
  g.m.assign(static_cast<size_t>(g.p.numel()), 0.0f);
  g.v.assign(static_cast<size_t>(g.p.numel()), 0.0f);
  g.weight_decay = weight_decay;
  g.skip_nonfinite = skip_nonfinite;
  groups_.push_back(std::move(g));
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t_);
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t_);
  for (auto& g : groups_) {
    if (!g.p.requires_grad()) {
      throw StateError("adam: parameter has no gradient; run backward first");
    }
    float* pv = g.p.data();
    const float* gv = std::as_const(g.p).grad();
    const int64_t n = g.p.numel();
    for (int64_t i = 0; i < n; ++i) {
      if (g.skip_nonfinite && !std::isfinite(pv[i])) continue;
      const double gi = gv[i];
      double m = cfg_.beta1 * g.m[static_cast<size_t>(i)] +
                 (1.0 - cfg_.beta1) * gi;
      double v = cfg_.beta2 * g.v[static_cast<size_t>(i)] +
                 (1.0 - cfg_.beta2) * gi * gi;
      g.m[static_cast<size_t>(i)] = static_cast<float>(m);
      g.v[static_cast<size_t>(i)] = static_cast<float>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double update = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      if (g.weight_decay != 0.0f) {
        // decoupled decay: applied directly to the value, not the gradient
        update += static_cast<double>(cfg_.lr) * g.weight_decay * pv[i];
      }
      pv[i] = static_cast<float>(pv[i] - update);
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_) g.p.zero_grad();
}

}  // namespace tsrq
