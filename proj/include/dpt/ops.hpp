#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dpt/tensor.hpp"

// Differentiable operators. Every op records its local gradient rule on the
// tape when any input requires a gradient. Axes may be negative (counted
// from the end).
namespace dpt {

// a:[m,k] x b:[k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Affine map x:[m,k] w:[k,n] b:[n] -> x w + b, fused into one tape node.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Batched product. a:[g,m,k], b:[g,k,n] (or [g,n,k] with transpose_b) -> [g,m,n].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Pointwise maximum. The backward pass routes the gradient to the larger
// operand; ties go to `a`.
Tensor elementwise_max(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);

// Max-stabilized softmax along `axis`. Throws NumericError on NaN input.
Tensor softmax(const Tensor& x, int axis);
// log(sum(exp(x))) along `axis`; the axis is removed from the result.
Tensor logsumexp(const Tensor& x, int axis);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
// Rows of `table` ([v,d]) selected by `ids` -> [ids.size(), d]. The backward
// pass scatter-adds into the selected rows.
Tensor embedding_gather(const Tensor& table, std::span<const int> ids);

// Mean negative log-likelihood of `targets` under softmax(logits) over the
// rows where mask != 0. logits:[r,k]; targets and mask have length r.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

}  // namespace dpt
