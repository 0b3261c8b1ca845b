#pragma once

#include <vector>

#include "groupalign/tensor.hpp"

// Differentiable tensor ops. Every op validates shapes, wires a backward
// closure into the graph when grad mode is on, and rejects non-finite
// outputs. Broadcasting is deliberately limited to one pattern: a rank-1
// vector applied across the rows of a rank-2 matrix.

namespace groupalign {

// [m,k]x[k,n] -> [m,n]; a may be rank-1 and is then treated as a single row.
Tensor matmul(const Tensor& a, const Tensor& b);

// Rank-2 only.
Tensor transpose(const Tensor& a);

// Same shape, or a rank-2 with b a rank-1 row vector of matching width.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Multiply every element of a by a one-element tensor s (s stays in the
// graph, unlike the double overload of scale).
Tensor mul_scalar(const Tensor& a, const Tensor& s);

Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// Numerically stable log(sigmoid(x)); never -inf for finite x.
Tensor log_sigmoid(const Tensor& a);
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(const Tensor& a);
// Gradient is zero outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);

// Row-wise for rank-2, whole vector for rank-1. Max-subtracted.
Tensor softmax(const Tensor& a);
// Rank-1 -> one-element tensor; max-subtracted, exact for a single element.
Tensor logsumexp(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Column means of a rank-2 tensor -> rank-1.
Tensor mean_axis0(const Tensor& a);
// Rank-1 vectors of equal length -> one-element tensor.
Tensor dot(const Tensor& a, const Tensor& b);
// Elementwise sum of same-shape tensors; xs must be non-empty.
Tensor add_n(const std::vector<Tensor>& xs);

// All rank-1 -> rank-1 end-to-end; all rank-2 with equal row counts ->
// column-wise concatenation.
Tensor concat(const std::vector<Tensor>& xs);
// Half-open column range [c0, c1); element range for rank-1.
Tensor slice_cols(const Tensor& a, int c0, int c1);

// Gather rows of a rank-2 table; duplicate ids accumulate gradient.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);

// Same elements, same row-major order, new shape; numel must match.
Tensor reshape(const Tensor& a, std::vector<int> shape);

// Row-wise layer normalization with learned gain and bias (both rank-1,
// matching the row width). Population variance.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Rank-1 vectors -> one-element tensor in [-1, 1]. Throws
// DegenerateInputError when either vector has zero norm.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace groupalign
