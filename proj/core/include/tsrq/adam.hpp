#pragma once

// Adam with bias correction and optional decoupled weight decay per
// parameter group. Parameters whose current value is non-finite can be
// marked skip_nonfinite so frozen entries are left untouched, moments
// included.

#include <cstdint>
#include <vector>

#include "tsrq/tensor.hpp"

namespace tsrq {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  // the tensor handle aliases caller storage; updates mutate it in place
  void add_param(Tensor p, float weight_decay = 0.0f,
                 bool skip_nonfinite = false);

  // applies one update from the gradients currently held by the params
  void step();
  void zero_grad();
  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Group {
    Tensor p;
    std::vector<float> m;
    std::vector<float> v;
    float weight_decay;
    bool skip_nonfinite;
  };
  AdamConfig cfg_;
  std::vector<Group> groups_;
  int64_t t_ = 0;
};

}  // namespace tsrq
