#include "bolmo/optim.h"

#include "bolmo/errors.h"

#include <cmath>

namespace bolmo {

bool default_decays(const std::string & name, const Tensor & value) {
    return value.rank() >= 2 && name.find("embed") == std::string::npos;
}

AdamWStepStats adamw_step(ParamStore & params, const GradMap & grads, AdamWState & state,
                          const std::function<double(const std::string &)> & lr_for, const AdamWConfig & cfg,
                          const std::function<bool(const std::string &, const Tensor &)> & decays) {
    AdamWStepStats stats;
    double sq = 0.0;
    for (const auto & [name, g] : grads) {
        if (g.shape() != params.get(name).shape()) {
            throw ShapeError("adamw: gradient shape " + shape_str(g.shape()) + " does not match parameter " + name);
        }
        for (double v : g.values()) {
            if (!std::isfinite(v)) throw NumericError("adamw: non-finite gradient for " + name);
            sq += v * v;
        }
    }
    stats.grad_norm = std::sqrt(sq);
    if (cfg.grad_clip > 0.0 && stats.grad_norm > cfg.grad_clip) stats.clip_scale = cfg.grad_clip / stats.grad_norm;

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (const auto & [name, g] : grads) {
        Tensor & p = params.get_mut(name);
        auto [mit, m_new] = state.m.try_emplace(name, p.shape(), 0.0);
        auto [vit, v_new] = state.v.try_emplace(name, p.shape(), 0.0);
        Tensor & m = mit->second;
        Tensor & v = vit->second;
        const double lr = lr_for(name);
        const double wd = decays(name, p) ? cfg.weight_decay : 0.0;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i] * stats.clip_scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * p[i]);
        }
    }
    return stats;
}

} // namespace bolmo
