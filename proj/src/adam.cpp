#include "fedseg/adam.hpp"

#include <cmath>

namespace fedseg {

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i] = Eigen::ArrayXd::Zero(params[i].numel());
            state.v[i] = Eigen::ArrayXd::Zero(params[i].numel());
        }
    }
    if (state.m.size() != params.size())
        throw TensorError("adam_step: state tracks " + std::to_string(state.m.size()) +
                          " parameters, got " + std::to_string(params.size()));

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (state.m[i].size() != p.numel())
            throw TensorError("adam_step: moment shape mismatch for parameter " +
                              std::to_string(i) + ": " + std::to_string(state.m[i].size()) +
                              " vs " + std::to_string(p.numel()));
        const double* g = p.has_grad() ? p.grad().data() : nullptr;
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        double* x = p.data();
        const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
        const double inv_bc2 = 1.0 / bc2;
        const double step_scale = lr / bc1;
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            const double gj = g ? g[j] : 0.0;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            x[j] -= step_scale * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
        }
        if (!p.array().allFinite()) throw TensorError("adam_step: non-finite parameter update");
    }
}

}  // namespace fedseg
