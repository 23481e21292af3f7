#pragma once

#include <utility>
#include <vector>

#include "branchkit/tensor.hpp"

namespace branchkit::ad {

// Elementwise binaries. `b` broadcasts to `a` (never the reverse): shapes are
// right-aligned and every axis of b must equal a's or be 1; missing leading
// axes replicate. The gradient of a broadcast operand is the sum-reduction of
// the unbroadcast gradient.
enum class Binary { add, sub, mul, logaddexp };
Tensor binary_elementwise(const Tensor& a, const Tensor& b, Binary kind);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor logaddexp(const Tensor& a, const Tensor& b);

enum class Unary { exp, log, sigmoid, tanh, erf, relu, neg, sqrt, rsqrt, recip };
Tensor unary(const Tensor& x, Unary kind);
Tensor scale(const Tensor& x, double c);   // c * x
Tensor shift(const Tensor& x, double c);   // x + c

// Batched matrix product over the two trailing axes. Leading (batch) axes are
// right-aligned and broadcast where equal, 1, or absent. Transpose flags apply
// to the trailing two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

enum class Reduce { sum, mean, max };
Tensor reduce(const Tensor& x, int axis, Reduce kind, bool keepdim = false);
Tensor sum_all(const Tensor& x);  // scalar of shape [1]

// Split in two equal halves along `axis` (A = first half, B = second half);
// concat is its exact inverse.
std::pair<Tensor, Tensor> split2(const Tensor& x, int axis);
Tensor concat(const std::vector<Tensor>& xs, int axis);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);

// Gather of flat indices; backward scatter-adds.
Tensor pick(const Tensor& x, const std::vector<std::int64_t>& flat_indices);

}  // namespace branchkit::ad
