#pragma once

#include <functional>
#include <vector>

#include "branchkit/ops.hpp"

namespace branchkit::ad {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Relative error convention used throughout verification:
// |a-b| / max(|a|,|b|,1e-8), defined as 0 when both magnitudes are < 1e-12.
double rel_err(double a, double b);

// Compares the tape gradient of a random fixed projection of f's output
// against central differences with step `eps`, over every coordinate of every
// input. Returns the worst relative error. f must be deterministic (checked
// by double evaluation) and must not mutate its inputs.
double grad_check(const TensorFn& f, std::vector<Tensor> inputs, double eps = 1e-5);

}  // namespace branchkit::ad
