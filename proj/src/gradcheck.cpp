#include "bolmo/gradcheck.h"

#include <algorithm>
#include <cmath>

namespace bolmo {

namespace {

double eval_loss(const LossBuilder & build, const std::vector<Tensor> & point) {
    Graph g;
    std::vector<Var> leaves;
    leaves.reserve(point.size());
    for (const Tensor & t : point) leaves.push_back(g.constant(t));
    return g.value(build(g, leaves)).item();
}

} // namespace

GradCheckResult finite_difference_check(const LossBuilder & build, const std::vector<Tensor> & point, double eps,
                                        const std::vector<bool> & check) {
    Graph g;
    std::vector<Var> leaves;
    for (size_t k = 0; k < point.size(); ++k) {
        const bool on = check.empty() || check[k];
        leaves.push_back(g.leaf(point[k], on));
    }
    Var loss = build(g, leaves);
    g.backward(loss);

    GradCheckResult result;
    std::vector<Tensor> probe = point;
    for (size_t k = 0; k < point.size(); ++k) {
        if (!(check.empty() || check[k])) continue;
        const Tensor analytic = g.grad(leaves[k]);
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (int64_t i = 0; i < point[k].numel(); ++i) {
            const double x0 = point[k][i];
            probe[k][i] = x0 + eps;
            const double fp = eval_loss(build, probe);
            probe[k][i] = x0 - eps;
            const double fm = eval_loss(build, probe);
            probe[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * eps);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
        if (rel > result.max_rel_error || result.worst_input < 0) {
            result.max_rel_error = std::max(result.max_rel_error, rel);
            result.worst_input = static_cast<int>(k);
        }
    }
    return result;
}

} // namespace bolmo
