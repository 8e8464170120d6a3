#pragma once

#include "klvcg/model.hpp"

namespace klvcg {

struct GradCheckCase {
    std::string name;
    FiniteDiffReport report;
};

// Finite-difference sweep: one case per differentiable op, a fused
// attention composite, and the end-to-end tiny model in both decode modes.
// Op cases use op_tol, model cases e2e_tol (max relative error).
std::vector<GradCheckCase> gradient_suite(uint64_t seed, double op_tol = 1e-4,
                                          double e2e_tol = 1e-3);

bool all_passed(const std::vector<GradCheckCase>& cases);

}  // namespace klvcg
