#pragma once

#include <string>
#include <vector>

#include "redec/tensor.hpp"

namespace redec {

struct GradCheckResult {
    std::string op;
    int instances = 0;
    int coords_checked = 0;
    int coords_skipped = 0;  // kink-adjacent coordinates, detected and resampled
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = false;
};

std::vector<std::string> gradcheck_op_names();

// Central finite differences against tape gradients over seeded random
// instances. `tol` bounds non-smooth ops; smooth ops are held to
// min(tol, 1e-6). Throws nothing; inspect `pass` per op.
std::vector<GradCheckResult> run_gradcheck(const std::vector<std::string>& ops, double tol, int instances,
                                           uint64_t seed);

}  // namespace redec
