#pragma once

#include "bolmo/param_store.h"
#include "bolmo/tensor.h"

#include <functional>
#include <map>
#include <string>

namespace bolmo {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 0.5; // max global gradient L2 norm; <= 0 disables clipping
};

// First/second moments per trainable parameter. Only parameters that have
// received a gradient get a moment slot, so frozen groups cost nothing.
struct AdamWState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    int64_t step = 0;
};

struct AdamWStepStats {
    double grad_norm = 0.0;  // before clipping
    double clip_scale = 1.0; // factor applied to every gradient
};

using GradMap = std::map<std::string, Tensor>;

// Parameters decayed by default: matrices that are not embedding tables.
bool default_decays(const std::string & name, const Tensor & value);

// One AdamW update over the parameters present in `grads`.
//
// The global gradient norm is clipped to cfg.grad_clip before the moments are
// updated; weight decay is decoupled (p -= lr * wd * p) and applied only where
// `decays` holds. `lr_for` maps a parameter name to its learning rate, which
// lets callers run separate groups. Throws NumericError on a non-finite grad.
AdamWStepStats adamw_step(ParamStore & params, const GradMap & grads, AdamWState & state,
                          const std::function<double(const std::string &)> & lr_for, const AdamWConfig & cfg,
                          const std::function<bool(const std::string &, const Tensor &)> & decays = default_decays);

} // namespace bolmo
