#pragma once

#include "bolmo/graph.h"

#include <functional>
#include <string>
#include <vector>

namespace bolmo {

// Builds a scalar loss from leaves bound to the check point.
using LossBuilder = std::function<Var(Graph &, const std::vector<Var> &)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    int worst_input = -1;
};

// Compares the analytic gradient of `build` at `point` against central
// differences (f(x+eps) - f(x-eps)) / 2eps, element by element.
//
// The relative error of input k is ||g_analytic - g_numeric|| / max(||g_analytic||,
// ||g_numeric||, 1e-12); the result is the maximum over inputs whose flag in
// `check` is set (all inputs when `check` is empty).
GradCheckResult finite_difference_check(const LossBuilder & build, const std::vector<Tensor> & point,
                                        double eps = 1e-5, const std::vector<bool> & check = {});

} // namespace bolmo
