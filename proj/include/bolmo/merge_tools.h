#pragma once

#include "bolmo/data.h"
#include "bolmo/model.h"
#include "bolmo/param_store.h"

#include <iosfwd>
#include <vector>

namespace bolmo {

// posttrained - base over the global-model tensors only. Throws on name or
// shape mismatch between the two checkpoints.
ParamStore weight_delta(const ParamStore & base, const ParamStore & posttrained);

// target + scale * delta. Every delta tensor must exist in target with the
// same shape and be a global-model tensor; all other tensors are copied.
ParamStore apply_delta(const ParamStore & target, const ParamStore & delta, double scale = 1.0);

// bolmo.global + (posttrained.global - base.global).
ParamStore task_arithmetic_merge(const ParamStore & bolmo, const ParamStore & base, const ParamStore & posttrained);

// The post-trained teacher with every non-global tensor (input and output
// embeddings) taken from the base teacher.
ParamStore reset_embeddings(const ParamStore & base, const ParamStore & posttrained);

struct ResetCheck {
    double posttrained_nats = 0.0; // per token
    double reset_nats = 0.0;
    double ratio = 0.0;            // reset / posttrained
};
ResetCheck reset_embeddings_check(const ParamStore & base, const ParamStore & posttrained,
                                  const std::vector<EncodedDoc> & docs, const ModelConfig & c);

struct Spectrum {
    std::vector<double> singular_values; // descending
    std::vector<double> ratio;           // sigma_i^2 / sum sigma_j^2
    std::vector<double> cumulative;
};
Spectrum spectrum_report(const Tensor & matrix);
// One line per singular value: index, sigma, ratio, cumulative.
void write_spectrum(std::ostream & os, const Spectrum & s);

} // namespace bolmo
