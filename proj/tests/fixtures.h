#pragma once

#include "bolmo/model.h"

#include <random>

namespace bolmo::testing {

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.d = 8;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.mlstm.heads = 2;
    c.mlstm.qk_dim = 2;
    c.mlstm.v_dim = 3;
    c.mlstm.input_gate_bias_init = -1.0;
    c.ffn_expansion = 0.75;
    c.global.layers = 1;
    c.global.heads = 2;
    c.global.head_dim = 4;
    c.global.ffn_hidden = 6;
    c.n_probe = 1;
    c.subword_vocab = 260;
    c.byte_embed_init_std = 1.0;
    return c;
}

// Randomizes every tensor so zero-initialized weights still get checked.
inline ParamStore jitter(ParamStore ps, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto & [n, t] : ps)
        for (auto & x : t.values()) x += nd(rng);
    return ps;
}

} // namespace bolmo::testing
