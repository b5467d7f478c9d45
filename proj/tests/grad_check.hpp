#pragma once

// Central finite-difference gradient oracle. Independent of the backward
// pass: it only re-evaluates the forward closure at displaced inputs.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "icot/tensor.hpp"

namespace icot::testing {

struct GradCheckResult {
  long n_coords = 0;
  long n_rel_ok = 0;      // relative error <= rel_tol
  long n_abs_fallback = 0;  // relative failed but absolute <= abs_tol
  double worst_rel = 0.0;
  double worst_abs = 0.0;

  double frac_rel_ok() const {
    return n_coords ? static_cast<double>(n_rel_ok) / n_coords : 1.0;
  }
  // Spec tolerance: rel err <= rel_tol on >= min_frac of coordinates and
  // abs err <= abs_tol on the rest.
  bool pass(double min_frac = 0.95) const {
    return frac_rel_ok() >= min_frac &&
           n_rel_ok + n_abs_fallback == n_coords;
  }
};

// make_loss rebuilds the scalar loss graph from the current values of
// `inputs` on every call; eval_loss re-evaluates the same function for the
// FD quotient (may be a double-precision reference).
inline GradCheckResult fd_check_vs(const std::function<Tensor()>& make_loss,
                                   const std::function<double()>& eval_loss,
                                   std::vector<Tensor> inputs, float h = 1e-3f,
                                   double rel_tol = 1e-3, double abs_tol = 1e-4) {
  for (auto& t : inputs) {
    t.zero_grad();
  }
  Tensor loss = make_loss();
  backward(loss);

  std::vector<std::vector<float>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckResult res;
  NoGradGuard ng;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    float* vals = inputs[ti].data();
    for (int64_t i = 0; i < inputs[ti].numel(); ++i) {
      float saved = vals[i];
      vals[i] = saved + h;
      double lp = eval_loss();
      vals[i] = saved - h;
      double lm = eval_loss();
      vals[i] = saved;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[ti][static_cast<size_t>(i)];
      double abs_err = std::fabs(a - numeric);
      double denom = std::max(std::fabs(a), std::fabs(numeric));
      double rel_err = denom > 0 ? abs_err / denom : 0.0;
      res.n_coords++;
      res.worst_abs = std::max(res.worst_abs, abs_err);
      if (rel_err <= rel_tol) {
        res.n_rel_ok++;
      } else {
        res.worst_rel = std::max(res.worst_rel, rel_err);
        if (abs_err <= abs_tol) res.n_abs_fallback++;
      }
    }
  }
  return res;
}

// FD quotient from the f32 loss itself.
inline GradCheckResult fd_check(const std::function<Tensor()>& make_loss,
                                std::vector<Tensor> inputs, float h = 1e-3f,
                                double rel_tol = 1e-3, double abs_tol = 1e-4) {
  auto eval = [&]() {
    NoGradGuard ng;
    return static_cast<double>(make_loss().item());
  };
  return fd_check_vs(make_loss, eval, std::move(inputs), h, rel_tol, abs_tol);
}

}  // namespace icot::testing
