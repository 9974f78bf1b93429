#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fedseg {

struct GradCheckResult {
    std::string op;
    double max_rel_err = 0.0;
    std::int64_t checked_elements = 0;
    bool pass = false;
};

// Central finite-difference check (eps 1e-5) of every differentiable op
// against its backward rule, over `shapes_per_op` randomized shapes each.
// The numeric side never touches the backward rules, only forward
// evaluations. `mutate_op` perturbs the analytic gradient of the named op
// by 1% — a fixture proving the harness reports a corrupted backward rule.
std::vector<GradCheckResult> run_gradcheck_suite(int shapes_per_op, std::uint64_t seed,
                                                 double tolerance = 1e-4,
                                                 const std::string& mutate_op = "");

}  // namespace fedseg
