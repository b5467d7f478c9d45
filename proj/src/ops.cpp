#include "icot/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>

extern "C" void openblas_set_num_threads(int);

namespace icot {
namespace {

// Single BLAS thread: keeps accumulation order fixed so repeated runs are
// bit-identical.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit g_blas_init;

std::vector<NodePtr> grad_parents(std::initializer_list<const Tensor*> inputs) {
  std::vector<NodePtr> out;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) out.push_back(t->node());
  }
  return out;
}

Tensor finish(NodePtr out, std::vector<NodePtr> parents,
              std::function<void(TensorNode&)> backprop) {
  if (grad_enabled() && !parents.empty()) {
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backprop = std::move(backprop);
  }
  return Tensor(out);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* opname) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(opname) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  }
}

void check_2d(const Tensor& x, const char* opname) {
  if (x.ndim() != 2) {
    throw DimensionError(std::string(opname) + ": expected 2-D, got " +
                         shape_str(x.shape()));
  }
}

// y = f(x) elementwise with dy/dx supplied per element.
Tensor unary_elementwise(const Tensor& x, float (*f)(float), float (*df)(float)) {
  auto out = make_node(x.shape(), false);
  const auto& xv = x.node()->value;
  for (size_t i = 0; i < xv.size(); ++i) out->value[i] = f(xv[i]);
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn, df](TensorNode& n) {
    for (size_t i = 0; i < n.flow.size(); ++i) {
      xn->flow[i] += n.flow[i] * df(xn->value[i]);
    }
  });
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

float gelu_fwd(float x) {
  float u = kGeluC * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.f + std::tanh(u));
}

float gelu_df(float x) {
  float u = kGeluC * (x + 0.044715f * x * x * x);
  float t = std::tanh(u);
  float sech2 = 1.f - t * t;
  return 0.5f * (1.f + t) + 0.5f * x * sech2 * kGeluC * (1.f + 3.f * 0.044715f * x * x);
}

float sigmoid_fwd(float x) { return 1.f / (1.f + std::exp(-x)); }
float sigmoid_df(float x) {
  float s = sigmoid_fwd(x);
  return s * (1.f - s);
}

float tanh_fwd(float x) { return std::tanh(x); }
float tanh_df(float x) {
  float t = std::tanh(x);
  return 1.f - t * t;
}

float relu_fwd(float x) { return x > 0.f ? x : 0.f; }
float relu_df(float x) { return x > 0.f ? 1.f : 0.f; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a.shape(), false);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg](TensorNode& n) {
    if (ag)
      for (size_t i = 0; i < n.flow.size(); ++i) an->flow[i] += n.flow[i];
    if (bg)
      for (size_t i = 0; i < n.flow.size(); ++i) bn->flow[i] += n.flow[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a.shape(), false);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] - bv[i];
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg](TensorNode& n) {
    if (ag)
      for (size_t i = 0; i < n.flow.size(); ++i) an->flow[i] += n.flow[i];
    if (bg)
      for (size_t i = 0; i < n.flow.size(); ++i) bn->flow[i] -= n.flow[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto out = make_node(a.shape(), false);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg](TensorNode& n) {
    if (ag)
      for (size_t i = 0; i < n.flow.size(); ++i) an->flow[i] += n.flow[i] * bn->value[i];
    if (bg)
      for (size_t i = 0; i < n.flow.size(); ++i) bn->flow[i] += n.flow[i] * an->value[i];
  });
}

Tensor scale(const Tensor& x, float s) {
  auto out = make_node(x.shape(), false);
  const auto& xv = x.node()->value;
  for (size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * s;
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn, s](TensorNode& n) {
    for (size_t i = 0; i < n.flow.size(); ++i) xn->flow[i] += n.flow[i] * s;
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  check_2d(x, "add_bias");
  if (b.ndim() != 1 || b.dim(0) != x.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) +
                         " does not match " + shape_str(x.shape()));
  }
  int m = x.dim(0), nn = x.dim(1);
  auto out = make_node(x.shape(), false);
  const float* xv = x.data();
  const float* bv = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out->value[i * nn + j] = xv[i * nn + j] + bv[j];
  NodePtr xn = x.node(), bn = b.node();
  bool xg = x.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&x, &b}), [xn, bn, xg, bg, m, nn](TensorNode& n) {
    if (xg)
      for (size_t i = 0; i < n.flow.size(); ++i) xn->flow[i] += n.flow[i];
    if (bg)
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) bn->flow[j] += n.flow[i * nn + j];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto out = make_node({m, nn}, false);
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, nn, k, 1.f, a.data(), k,
              b.data(), nn, 0.f, out->value.data(), nn);
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, m, k, nn](TensorNode& n) {
    // dA += dC * B^T ; dB += A^T * dC
    if (ag) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, nn, 1.f, n.flow.data(),
                  nn, bn->value.data(), nn, 1.f, an->flow.data(), k);
    }
    if (bg) {
      cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, nn, m, 1.f,
                  an->value.data(), k, n.flow.data(), nn, 1.f, bn->flow.data(), nn);
    }
  });
}

Tensor matmul_rowwise(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_rowwise");
  check_2d(b, "matmul_rowwise");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul_rowwise: inner dimensions disagree, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto out = make_node({m, nn}, false);
  const float* av = a.data();
  const float* bv = b.data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < nn; ++j) {
      float acc = 0.f;
      for (int p = 0; p < k; ++p) acc += av[static_cast<size_t>(i) * k + p] * bv[static_cast<size_t>(p) * nn + j];
      out->value[static_cast<size_t>(i) * nn + j] = acc;
    }
  }
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, m, k, nn](TensorNode& n) {
    if (ag) {
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, nn, 1.f, n.flow.data(),
                  nn, bn->value.data(), nn, 1.f, an->flow.data(), k);
    }
    if (bg) {
      cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, nn, m, 1.f,
                  an->value.data(), k, n.flow.data(), nn, 1.f, bn->flow.data(), nn);
    }
  });
}

Tensor transpose(const Tensor& x) {
  check_2d(x, "transpose");
  int m = x.dim(0), nn = x.dim(1);
  auto out = make_node({nn, m}, false);
  const float* xv = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < nn; ++j) out->value[j * m + i] = xv[i * nn + j];
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn, m, nn](TensorNode& n) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < nn; ++j) xn->flow[i * nn + j] += n.flow[j * m + i];
  });
}

Tensor relu(const Tensor& x) { return unary_elementwise(x, relu_fwd, relu_df); }
Tensor gelu(const Tensor& x) { return unary_elementwise(x, gelu_fwd, gelu_df); }
Tensor sigmoid(const Tensor& x) { return unary_elementwise(x, sigmoid_fwd, sigmoid_df); }
Tensor tanh_act(const Tensor& x) { return unary_elementwise(x, tanh_fwd, tanh_df); }

namespace {

// Softmax over contiguous or strided slices: `count` slices of `len`
// elements spaced `stride` apart, slice s starting at base(s).
void softmax_slices(const float* in, float* out, int count, int len, int stride,
                    int slice_step) {
  for (int s = 0; s < count; ++s) {
    const float* src = in + s * slice_step;
    float* dst = out + s * slice_step;
    float mx = src[0];
    for (int i = 1; i < len; ++i) mx = std::max(mx, src[i * stride]);
    float denom = 0.f;
    for (int i = 0; i < len; ++i) {
      float e = std::exp(src[i * stride] - mx);
      dst[i * stride] = e;
      denom += e;
    }
    for (int i = 0; i < len; ++i) dst[i * stride] /= denom;
  }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  int count, len, stride, slice_step;
  if (x.ndim() == 1) {
    count = 1;
    len = x.dim(0);
    stride = 1;
    slice_step = 0;
  } else if (x.ndim() == 2) {
    if (axis == -1) axis = 1;
    if (axis == 1) {
      count = x.dim(0);
      len = x.dim(1);
      stride = 1;
      slice_step = x.dim(1);
    } else if (axis == 0) {
      count = x.dim(1);
      len = x.dim(0);
      stride = x.dim(1);
      slice_step = 1;
    } else {
      throw ContractError("softmax: axis " + std::to_string(axis) + " out of range for " +
                          shape_str(x.shape()));
    }
  } else {
    throw ContractError("softmax: expected 1-D or 2-D, got " + shape_str(x.shape()));
  }
  auto out = make_node(x.shape(), false);
  softmax_slices(x.data(), out->value.data(), count, len, stride, slice_step);
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}),
                [xn, count, len, stride, slice_step](TensorNode& n) {
                  // dx = y .* (dy - sum(dy .* y)) per slice
                  for (int s = 0; s < count; ++s) {
                    const float* y = n.value.data() + s * slice_step;
                    const float* dy = n.flow.data() + s * slice_step;
                    float* dx = xn->flow.data() + s * slice_step;
                    float dot = 0.f;
                    for (int i = 0; i < len; ++i) dot += dy[i * stride] * y[i * stride];
                    for (int i = 0; i < len; ++i)
                      dx[i * stride] += y[i * stride] * (dy[i * stride] - dot);
                  }
                });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     int ignore_id) {
  int rows, vocab;
  if (logits.ndim() == 1) {
    rows = 1;
    vocab = logits.dim(0);
  } else if (logits.ndim() == 2) {
    rows = logits.dim(0);
    vocab = logits.dim(1);
  } else {
    throw ContractError("cross_entropy: logits must be 1-D or 2-D, got " +
                        shape_str(logits.shape()));
  }
  if (static_cast<int>(targets.size()) != rows) {
    throw ContractError("cross_entropy: " + std::to_string(targets.size()) +
                        " targets for " + std::to_string(rows) + " rows");
  }
  int n_valid = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || t >= vocab) {
      throw ContractError("cross_entropy: target id " + std::to_string(t) +
                          " outside vocab of size " + std::to_string(vocab));
    }
    ++n_valid;
  }
  if (n_valid == 0) throw ContractError("cross_entropy: no supervised positions");

  // Keep probabilities for the backward pass.
  std::vector<float> probs(static_cast<size_t>(rows) * vocab);
  softmax_slices(logits.data(), probs.data(), rows, vocab, 1, vocab);

  double loss = 0.0;
  const float* lv = logits.data();
  for (int r = 0; r < rows; ++r) {
    int t = targets[r];
    if (t == ignore_id) continue;
    const float* rowp = lv + static_cast<size_t>(r) * vocab;
    float mx = rowp[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, rowp[j]);
    float denom = 0.f;
    for (int j = 0; j < vocab; ++j) denom += std::exp(rowp[j] - mx);
    loss -= static_cast<double>(rowp[t] - mx - std::log(denom));
  }
  auto out = make_node({1}, false);
  out->value[0] = static_cast<float>(loss / n_valid);

  NodePtr ln = logits.node();
  return finish(out, grad_parents({&logits}),
                [ln, targets, ignore_id, rows, vocab, n_valid,
                 probs = std::move(probs)](TensorNode& n) {
                  float g = n.flow[0] / static_cast<float>(n_valid);
                  for (int r = 0; r < rows; ++r) {
                    int t = targets[r];
                    if (t == ignore_id) continue;
                    float* dst = ln->flow.data() + static_cast<size_t>(r) * vocab;
                    const float* p = probs.data() + static_cast<size_t>(r) * vocab;
                    for (int j = 0; j < vocab; ++j) dst[j] += g * p[j];
                    dst[t] -= g;
                  }
                });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    double d = static_cast<double>(av[i]) - bv[i];
    acc += d * d;
  }
  auto out = make_node({1}, false);
  float inv_n = 1.f / static_cast<float>(av.size());
  out->value[0] = static_cast<float>(acc) * inv_n;
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, inv_n](TensorNode& n) {
    float g = 2.f * n.flow[0] * inv_n;
    for (size_t i = 0; i < an->value.size(); ++i) {
      float d = an->value[i] - bn->value[i];
      if (ag) an->flow[i] += g * d;
      if (bg) bn->flow[i] -= g * d;
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.node()->value) acc += v;
  auto out = make_node({1}, false);
  out->value[0] = static_cast<float>(acc);
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn](TensorNode& n) {
    for (size_t i = 0; i < xn->flow.size(); ++i) xn->flow[i] += n.flow[0];
  });
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embed");
  int v = table.dim(0), h = table.dim(1);
  if (ids.empty()) throw ContractError("embed: empty id sequence");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ContractError("embed: id " + std::to_string(id) + " outside table of " +
                          std::to_string(v) + " rows");
    }
  }
  int t = static_cast<int>(ids.size());
  auto out = make_node({t, h}, false);
  const float* tv = table.data();
  for (int i = 0; i < t; ++i) {
    std::copy(tv + static_cast<size_t>(ids[i]) * h, tv + static_cast<size_t>(ids[i] + 1) * h,
              out->value.begin() + static_cast<size_t>(i) * h);
  }
  NodePtr tn = table.node();
  return finish(out, grad_parents({&table}), [tn, ids, h](TensorNode& n) {
    for (size_t i = 0; i < ids.size(); ++i) {
      float* dst = tn->flow.data() + static_cast<size_t>(ids[i]) * h;
      const float* src = n.flow.data() + i * h;
      for (int j = 0; j < h; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.ndim() != b.ndim()) {
    throw DimensionError("concat: rank mismatch, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  NodePtr out;
  if (a.ndim() == 1) {
    if (axis != 0) throw ContractError("concat: axis must be 0 for 1-D");
    out = make_node({a.dim(0) + b.dim(0)}, false);
    std::copy(a.data(), a.data() + a.numel(), out->value.begin());
    std::copy(b.data(), b.data() + b.numel(), out->value.begin() + a.numel());
    NodePtr an = a.node(), bn = b.node();
    bool ag = a.requires_grad(), bg = b.requires_grad();
    int64_t na = a.numel();
    return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, na](TensorNode& n) {
      if (ag)
        for (int64_t i = 0; i < na; ++i) an->flow[i] += n.flow[i];
      if (bg)
        for (size_t i = na; i < n.flow.size(); ++i) bn->flow[i - na] += n.flow[i];
    });
  }
  check_2d(a, "concat");
  if (axis == 0) {
    if (a.dim(1) != b.dim(1)) {
      throw DimensionError("concat axis 0: column counts differ, " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
    }
    out = make_node({a.dim(0) + b.dim(0), a.dim(1)}, false);
    std::copy(a.data(), a.data() + a.numel(), out->value.begin());
    std::copy(b.data(), b.data() + b.numel(), out->value.begin() + a.numel());
    NodePtr an = a.node(), bn = b.node();
    bool ag = a.requires_grad(), bg = b.requires_grad();
    int64_t na = a.numel();
    return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, na](TensorNode& n) {
      if (ag)
        for (int64_t i = 0; i < na; ++i) an->flow[i] += n.flow[i];
      if (bg)
        for (size_t i = na; i < n.flow.size(); ++i) bn->flow[i - na] += n.flow[i];
    });
  }
  if (axis != 1) throw ContractError("concat: axis must be 0 or 1");
  if (a.dim(0) != b.dim(0)) {
    throw DimensionError("concat axis 1: row counts differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  int m = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  out = make_node({m, ca + cb}, false);
  for (int i = 0; i < m; ++i) {
    std::copy(a.data() + static_cast<size_t>(i) * ca, a.data() + static_cast<size_t>(i + 1) * ca,
              out->value.begin() + static_cast<size_t>(i) * (ca + cb));
    std::copy(b.data() + static_cast<size_t>(i) * cb, b.data() + static_cast<size_t>(i + 1) * cb,
              out->value.begin() + static_cast<size_t>(i) * (ca + cb) + ca);
  }
  NodePtr an = a.node(), bn = b.node();
  bool ag = a.requires_grad(), bg = b.requires_grad();
  return finish(out, grad_parents({&a, &b}), [an, bn, ag, bg, m, ca, cb](TensorNode& n) {
    for (int i = 0; i < m; ++i) {
      const float* src = n.flow.data() + static_cast<size_t>(i) * (ca + cb);
      if (ag) {
        float* dst = an->flow.data() + static_cast<size_t>(i) * ca;
        for (int j = 0; j < ca; ++j) dst[j] += src[j];
      }
      if (bg) {
        float* dst = bn->flow.data() + static_cast<size_t>(i) * cb;
        for (int j = 0; j < cb; ++j) dst[j] += src[ca + j];
      }
    }
  });
}

Tensor row(const Tensor& x, int i) {
  check_2d(x, "row");
  if (i < 0 || i >= x.dim(0)) {
    throw ContractError("row: index " + std::to_string(i) + " out of range for " +
                        shape_str(x.shape()));
  }
  int nn = x.dim(1);
  auto out = make_node({nn}, false);
  std::copy(x.data() + static_cast<size_t>(i) * nn, x.data() + static_cast<size_t>(i + 1) * nn,
            out->value.begin());
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn, i, nn](TensorNode& n) {
    float* dst = xn->flow.data() + static_cast<size_t>(i) * nn;
    for (int j = 0; j < nn; ++j) dst[j] += n.flow[j];
  });
}

Tensor cols(const Tensor& x, int c0, int c1) {
  check_2d(x, "cols");
  if (c0 < 0 || c1 > x.dim(1) || c0 >= c1) {
    throw ContractError("cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                        ") invalid for " + shape_str(x.shape()));
  }
  int m = x.dim(0), nn = x.dim(1), w = c1 - c0;
  auto out = make_node({m, w}, false);
  for (int i = 0; i < m; ++i) {
    std::copy(x.data() + static_cast<size_t>(i) * nn + c0,
              x.data() + static_cast<size_t>(i) * nn + c1,
              out->value.begin() + static_cast<size_t>(i) * w);
  }
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn, m, nn, c0, w](TensorNode& n) {
    for (int i = 0; i < m; ++i) {
      float* dst = xn->flow.data() + static_cast<size_t>(i) * nn + c0;
      const float* src = n.flow.data() + static_cast<size_t>(i) * w;
      for (int j = 0; j < w; ++j) dst[j] += src[j];
    }
  });
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: empty input");
  int nn = rows[0].ndim() == 1 ? rows[0].dim(0) : -1;
  if (nn < 0) throw ContractError("stack_rows: inputs must be 1-D");
  for (const auto& r : rows) {
    if (r.ndim() != 1 || r.dim(0) != nn) {
      throw DimensionError("stack_rows: row " + shape_str(r.shape()) +
                           " does not match width " + std::to_string(nn));
    }
  }
  int k = static_cast<int>(rows.size());
  auto out = make_node({k, nn}, false);
  for (int i = 0; i < k; ++i) {
    std::copy(rows[i].data(), rows[i].data() + nn,
              out->value.begin() + static_cast<size_t>(i) * nn);
  }
  std::vector<NodePtr> parents;
  std::vector<std::pair<int, NodePtr>> grads;
  for (int i = 0; i < k; ++i) {
    if (rows[i].requires_grad()) {
      parents.push_back(rows[i].node());
      grads.emplace_back(i, rows[i].node());
    }
  }
  return finish(out, std::move(parents), [grads, nn](TensorNode& n) {
    for (const auto& [i, p] : grads) {
      const float* src = n.flow.data() + static_cast<size_t>(i) * nn;
      for (int j = 0; j < nn; ++j) p->flow[j] += src[j];
    }
  });
}

Tensor replace_rows(const Tensor& x, const std::vector<std::pair<int, Tensor>>& subs) {
  check_2d(x, "replace_rows");
  int m = x.dim(0), nn = x.dim(1);
  std::vector<bool> seen(static_cast<size_t>(m), false);
  for (const auto& [i, v] : subs) {
    if (i < 0 || i >= m) {
      throw ContractError("replace_rows: row " + std::to_string(i) + " out of range for " +
                          shape_str(x.shape()));
    }
    if (seen[static_cast<size_t>(i)]) {
      throw ContractError("replace_rows: duplicate row " + std::to_string(i));
    }
    seen[static_cast<size_t>(i)] = true;
    if (v.ndim() != 1 || v.dim(0) != nn) {
      throw DimensionError("replace_rows: vector " + shape_str(v.shape()) +
                           " does not match row width of " + shape_str(x.shape()));
    }
  }
  auto out = make_node(x.shape(), false);
  out->value = x.node()->value;
  for (const auto& [i, v] : subs) {
    std::copy(v.data(), v.data() + nn, out->value.begin() + static_cast<size_t>(i) * nn);
  }
  std::vector<NodePtr> parents;
  if (x.requires_grad()) parents.push_back(x.node());
  std::vector<std::pair<int, NodePtr>> vgrads;
  for (const auto& [i, v] : subs) {
    if (v.requires_grad()) {
      parents.push_back(v.node());
      vgrads.emplace_back(i, v.node());
    }
  }
  NodePtr xn = x.node();
  bool xg = x.requires_grad();
  std::vector<int> replaced;
  for (const auto& [i, v] : subs) replaced.push_back(i);
  return finish(out, std::move(parents),
                [xn, xg, vgrads, replaced, m, nn](TensorNode& n) {
                  if (xg) {
                    std::vector<bool> skip(static_cast<size_t>(m), false);
                    for (int i : replaced) skip[static_cast<size_t>(i)] = true;
                    for (int i = 0; i < m; ++i) {
                      if (skip[static_cast<size_t>(i)]) continue;
                      const float* src = n.flow.data() + static_cast<size_t>(i) * nn;
                      float* dst = xn->flow.data() + static_cast<size_t>(i) * nn;
                      for (int j = 0; j < nn; ++j) dst[j] += src[j];
                    }
                  }
                  for (const auto& [i, p] : vgrads) {
                    const float* src = n.flow.data() + static_cast<size_t>(i) * nn;
                    for (int j = 0; j < nn; ++j) p->flow[j] += src[j];
                  }
                });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  }
  auto out = make_node(shape, false);
  out->value = x.node()->value;
  NodePtr xn = x.node();
  return finish(out, grad_parents({&x}), [xn](TensorNode& n) {
    for (size_t i = 0; i < n.flow.size(); ++i) xn->flow[i] += n.flow[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor* gain, const Tensor* bias, float eps) {
  if (eps <= 0.f) throw ContractError("layer_norm: eps must be positive");
  int rows, h;
  if (x.ndim() == 1) {
    rows = 1;
    h = x.dim(0);
  } else if (x.ndim() == 2) {
    rows = x.dim(0);
    h = x.dim(1);
  } else {
    throw ContractError("layer_norm: expected 1-D or 2-D, got " + shape_str(x.shape()));
  }
  for (const Tensor* p : {gain, bias}) {
    if (p && (p->ndim() != 1 || p->dim(0) != h)) {
      throw DimensionError("layer_norm: parameter " + shape_str(p->shape()) +
                           " does not match feature width of " + shape_str(x.shape()));
    }
  }

  auto out = make_node(x.shape(), false);
  // xhat kept for backward: (x - mean) / sqrt(var + eps)
  std::vector<float> xhat(static_cast<size_t>(rows) * h);
  std::vector<float> inv_std(static_cast<size_t>(rows));
  const float* xv = x.data();
  for (int r = 0; r < rows; ++r) {
    const float* src = xv + static_cast<size_t>(r) * h;
    float mean = 0.f;
    for (int j = 0; j < h; ++j) mean += src[j];
    mean /= static_cast<float>(h);
    float var = 0.f;
    for (int j = 0; j < h; ++j) {
      float d = src[j] - mean;
      var += d * d;
    }
    var /= static_cast<float>(h);
    float istd = 1.f / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = istd;
    float* xh = xhat.data() + static_cast<size_t>(r) * h;
    float* dst = out->value.data() + static_cast<size_t>(r) * h;
    for (int j = 0; j < h; ++j) {
      xh[j] = (src[j] - mean) * istd;
      dst[j] = xh[j];
    }
    if (gain) {
      const float* g = gain->data();
      for (int j = 0; j < h; ++j) dst[j] *= g[j];
    }
    if (bias) {
      const float* b = bias->data();
      for (int j = 0; j < h; ++j) dst[j] += b[j];
    }
  }

  std::vector<const Tensor*> ins{&x};
  if (gain) ins.push_back(gain);
  if (bias) ins.push_back(bias);
  std::vector<NodePtr> parents;
  for (const Tensor* t : ins)
    if (t->requires_grad()) parents.push_back(t->node());

  NodePtr xn = x.node();
  NodePtr gn = gain ? gain->node() : nullptr;
  NodePtr bn = bias ? bias->node() : nullptr;
  bool xg = x.requires_grad();
  bool gg = gain && gain->requires_grad();
  bool bg = bias && bias->requires_grad();
  return finish(out, std::move(parents),
                [xn, gn, bn, xg, gg, bg, rows, h, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](TensorNode& n) {
                  for (int r = 0; r < rows; ++r) {
                    const float* dy = n.flow.data() + static_cast<size_t>(r) * h;
                    const float* xh = xhat.data() + static_cast<size_t>(r) * h;
                    if (bg) {
                      for (int j = 0; j < h; ++j) bn->flow[j] += dy[j];
                    }
                    if (gg) {
                      for (int j = 0; j < h; ++j) gn->flow[j] += dy[j] * xh[j];
                    }
                    if (!xg) continue;
                    // d xhat = dy * gain; dx = istd*(dxh - mean(dxh) - xh*mean(dxh*xh))
                    float istd = inv_std[static_cast<size_t>(r)];
                    float mean_dxh = 0.f, mean_dxh_xh = 0.f;
                    for (int j = 0; j < h; ++j) {
                      float dxh = gn ? dy[j] * gn->value[j] : dy[j];
                      mean_dxh += dxh;
                      mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= static_cast<float>(h);
                    mean_dxh_xh /= static_cast<float>(h);
                    float* dx = xn->flow.data() + static_cast<size_t>(r) * h;
                    for (int j = 0; j < h; ++j) {
                      float dxh = gn ? dy[j] * gn->value[j] : dy[j];
                      dx[j] += istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                  }
                });
}

int argmax_row(const Tensor& x, int r) {
  int nn;
  const float* base;
  if (x.ndim() == 1) {
    if (r != 0) throw ContractError("argmax_row: row must be 0 for 1-D");
    nn = x.dim(0);
    base = x.data();
  } else {
    check_2d(x, "argmax_row");
    if (r < 0 || r >= x.dim(0)) {
      throw ContractError("argmax_row: row " + std::to_string(r) + " out of range");
    }
    nn = x.dim(1);
    base = x.data() + static_cast<size_t>(r) * nn;
  }
  int best = 0;
  for (int j = 1; j < nn; ++j) {
    if (base[j] > base[best]) best = j;
  }
  return best;
}

}  // namespace icot
