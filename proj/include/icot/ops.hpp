#pragma once

#include <utility>
#include <vector>

#include "icot/tensor.hpp"

namespace icot {

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);

// [m x n] + [n], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& b);

// 2-D matrix product, BLAS-backed.
Tensor matmul(const Tensor& a, const Tensor& b);
// Same product with a fixed per-row accumulation order, so one row of the
// result is bit-identical whether computed alone or inside a larger batch.
// For small matrices only (the output projection).
Tensor matmul_rowwise(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

Tensor relu(const Tensor& x);
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);

// Numerically stable (max-subtracted). 1-D tensors reduce over the whole
// vector; 2-D over the given axis (0 columns, 1 rows; -1 = last).
Tensor softmax(const Tensor& x, int axis);

// Mean negative log-likelihood over rows whose target != ignore_id.
// logits is [T x V] (or [V], treated as one row); targets has one id per row.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_id);

// Mean squared error over all elements.
Tensor mse(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);

// Row gather: out[i] = table[ids[i]].
Tensor embed(const Tensor& table, const std::vector<int>& ids);

// 1-D: axis 0. 2-D: axis 0 stacks rows, axis 1 stacks columns.
Tensor concat(const Tensor& a, const Tensor& b, int axis);

// Slicing; gradients scatter back into the source.
Tensor row(const Tensor& x, int i);
Tensor cols(const Tensor& x, int c0, int c1);
Tensor stack_rows(const std::vector<Tensor>& rows);

// Copy of x with the listed rows replaced by the given 1-D vectors.
// Gradients flow into the replacement vectors, not the overwritten rows.
Tensor replace_rows(const Tensor& x,
                    const std::vector<std::pair<int, Tensor>>& subs);

Tensor reshape(const Tensor& x, const Shape& shape);

// Normalization over the last axis; gain/bias may be null (parameter-free).
Tensor layer_norm(const Tensor& x, const Tensor* gain, const Tensor* bias,
                  float eps);

// Value-level argmax of one row of a 2-D tensor (or of a 1-D tensor with
// r == 0); ties resolve to the lowest index.
int argmax_row(const Tensor& x, int r);

}  // namespace icot
