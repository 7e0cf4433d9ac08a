#pragma once

#include <unordered_map>
#include <utility>

#include "sst/nn/graph.hpp"

namespace sst::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm clip; 0 disables
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Applies one update from the accumulated gradients, then zeroes them.
  // Returns the pre-clip global gradient norm (for divergence diagnostics).
  double step(ParamStore& params);

 private:
  AdamConfig cfg_;
  long long t_ = 0;
  std::unordered_map<Tensor*, std::pair<Mat, Mat>> moments_;
};

}  // namespace sst::nn
