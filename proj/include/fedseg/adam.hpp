#pragma once

#include "fedseg/tensor.hpp"

#include <vector>

namespace fedseg {

// Per-parameter Adam moments. Buffers are laid out in the order of the
// parameter list given to adam_step and are sized lazily on the first call.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step_count = 0;
    std::vector<Eigen::ArrayXd> m;
    std::vector<Eigen::ArrayXd> v;
};

// Standard Adam update with bias correction, applied in place to the given
// parameters. A parameter without a populated gradient is treated as having
// zero gradient (its moments still decay).
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

}  // namespace fedseg
