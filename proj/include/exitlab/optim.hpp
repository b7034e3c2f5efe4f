#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "exitlab/params.hpp"

namespace exitlab {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;  // 0 gives a momentum-free adaptive step
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

// Adam restricted to the tensors selected by `trainable`; frozen tensors are
// never written. Every step bumps params.version.
class Adam {
 public:
  Adam(const ModelParams& params, AdamSettings settings, std::vector<bool> trainable);

  // Returns the (pre-clip) global gradient norm over trainable tensors.
  double step(ModelParams& params, const ParamGrads& grads);

  const std::vector<bool>& trainable() const { return trainable_; }

 private:
  AdamSettings settings_;
  std::vector<bool> trainable_;
  ParamGrads m_;
  ParamGrads v_;
  long t_ = 0;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index must write
// only its own outputs; callers reduce results in index order afterwards, so
// results do not depend on the worker count.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

int default_workers();

}  // namespace exitlab
