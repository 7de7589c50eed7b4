#pragma once

// Central-difference verification of reverse-mode gradients. Runs in double
// precision; float step sizes around 1e-5 would drown in rounding error.

#include <functional>
#include <string>
#include <vector>

#include "scn/tensor.hpp"

namespace scn {

struct GradCheckInput {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckInput> inputs;
  double tol = 1e-4;
  bool passed = true;
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& in : inputs) m = std::max(m, in.max_rel_err);
    return m;
  }
};

/// Compares the recorded reverse-mode gradient of f against
/// (f(x+h) - f(x-h)) / 2h for every element of every input. The relative
/// error denominator is max(1, |analytic|, |numeric|), so tiny gradients are
/// judged on absolute error.
GradCheckReport grad_check(
    const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
    std::vector<Tensor64> inputs, double h = 1e-5, double tol = 1e-4,
    const std::vector<std::string>& names = {});

struct SuiteCaseResult {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = true;
};

/// Gradient checks for every differentiable operation in the toolkit,
/// each over `seeds` random restarts. Backs the `gradcheck` CLI command.
std::vector<SuiteCaseResult> run_gradient_suite(int seeds = 5, double h = 1e-5,
                                                double tol = 1e-4);

}  // namespace scn
