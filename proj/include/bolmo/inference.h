#pragma once

#include "bolmo/model.h"
#include "bolmo/param_store.h"
#include "bolmo/tokenizer.h"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace bolmo {

struct SamplerConfig {
    double temperature = 0.6;
    double top_p = 0.6;
    uint64_t seed = 0;
};

struct DecodeOptions {
    int64_t patch_cap = 64; // a boundary is forced once the open patch holds this many bytes
    uint8_t eot = kEotByte;
};

// Incremental generation state for one byte stream.
struct DecodeState {
    MlstmStates encoder, decoder;
    KvCache cache;                 // one entry per closed patch
    std::vector<uint8_t> bytes;    // every byte seen so far
    std::vector<uint8_t> mask;     // boundary flag per byte
    std::vector<uint8_t> pending;  // bytes of the open patch
    Tensor h_hat;                  // [1, d] latest global output
    Tensor logp;                   // [512] log-probs of the next fused symbol
    std::mt19937_64 rng;
    int64_t global_calls = 0;      // global invocations after prefill
};

// Runs the prompt with non-causal boundaries and a forced boundary after its
// last byte. The prompt is a model-level sequence (documents start with BOS).
DecodeState prefill(const ParamStore & params, const SuffixIndex & index, std::span<const uint8_t> prompt,
                    const ModelConfig & c, uint64_t seed = 0);

// Feeds one fused symbol. The boundary bit is forced on when the open patch
// reaches the cap; the symbol actually applied is returned.
int32_t advance(const ParamStore & params, const SuffixIndex & index, DecodeState & state, int32_t symbol,
                const ModelConfig & c, const DecodeOptions & opts = {});

// Samples the next symbol from state.logp and feeds it.
int32_t decode_step(const ParamStore & params, const SuffixIndex & index, DecodeState & state,
                    const ModelConfig & c, const SamplerConfig & sampler, const DecodeOptions & opts = {});

// Temperature then nucleus sampling from log-probs; temperature 0 is argmax.
int32_t sample(std::span<const double> logp, const SamplerConfig & cfg, std::mt19937_64 & rng);
// The renormalized distribution sample() draws from (temperature > 0).
std::vector<double> sampling_distribution(std::span<const double> logp, const SamplerConfig & cfg);

// Generates up to max_bytes after BOS + prompt, stopping before the
// end-of-text byte. Returns the generated bytes only.
ByteSeq generate(const ParamStore & params, const SuffixIndex & index, std::span<const uint8_t> prompt,
                 int64_t max_bytes, const ModelConfig & c, const SamplerConfig & sampler,
                 const DecodeOptions & opts = {});

} // namespace bolmo
