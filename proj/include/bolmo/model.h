#pragma once

#include "bolmo/fused_ops.h"
#include "bolmo/graph.h"
#include "bolmo/optim.h"
#include "bolmo/param_store.h"
#include "bolmo/tokenizer.h"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace bolmo {

struct MlstmConfig {
    int64_t heads = 4;
    int64_t qk_dim = 16;
    int64_t v_dim = 32;
    double gate_soft_cap = 15.0;
    double input_gate_bias_init = -10.0;
    double forget_gate_bias_lo = 3.0; // forget biases spread linearly over heads
    double forget_gate_bias_hi = 6.0;
    bool operator==(const MlstmConfig &) const = default;
};

struct GlobalConfig {
    int64_t layers = 2;
    int64_t heads = 4;
    int64_t head_dim = 32;
    int64_t ffn_hidden = 256;
    double rope_theta = 10000.0;
    bool operator==(const GlobalConfig &) const = default;
};

struct ModelConfig {
    int64_t d = 128;
    int64_t encoder_layers = 1;
    int64_t decoder_layers = 4;
    MlstmConfig mlstm;
    double ffn_expansion = 1.375;
    GlobalConfig global;
    int64_t vocab_fused = 512;
    int64_t n_probe = 2;
    int64_t subword_vocab = 512;
    double norm_eps = 1e-6;
    double boundary_threshold = 0.5;
    bool causal_boundary = false;
    double embed_init_std = 1.0;
    double byte_embed_init_std = 0.1;

    int64_t local_ffn_hidden() const;
    // Throws ConfigError on inconsistent values.
    void validate() const;
    bool operator==(const ModelConfig &) const = default;
};

// Flat key=value view of a config ("model.d", "model.mlstm.heads", ...).
std::map<std::string, std::string> config_to_kv(const ModelConfig & c);
// Unknown "model.*" keys are rejected; keys outside "model." are ignored.
ModelConfig config_from_kv(const std::map<std::string, std::string> & kv, ModelConfig base = {});

// ---------------------------------------------------------------- symbols

constexpr uint8_t kBosByte = 0x00;
constexpr uint8_t kEotByte = 0x00;

inline int32_t fused_symbol(uint8_t byte, bool boundary) { return byte + (boundary ? 256 : 0); }
inline uint8_t fused_byte(int32_t s) { return static_cast<uint8_t>(s % 256); }
inline bool fused_boundary(int32_t s) { return s >= 256; }

// ---------------------------------------------------------------- layout

// Documents concatenated along the sequence axis; document k occupies rows
// [offsets[k], offsets[k+1]).
struct SeqLayout {
    std::vector<int64_t> offsets{0};

    static SeqLayout single(int64_t n);
    static SeqLayout from_lengths(const std::vector<int64_t> & lengths);
    int64_t size() const { return offsets.back(); }
    int64_t docs() const { return static_cast<int64_t>(offsets.size()) - 1; }
    std::vector<uint8_t> seg_start() const;
    std::vector<int64_t> seg_ids() const;
    std::vector<int64_t> positions() const; // index within the document
};

// Patch layout implied by a mask over a byte layout: patch p belongs to the
// document containing its end byte.
SeqLayout patch_layout(const SeqLayout & bytes, const BoundaryMask & mask);

// ---------------------------------------------------------------- params

// Binds ParamStore tensors into a graph on first use.
class ParamBinder {
public:
    using Filter = std::function<bool(const std::string &)>;
    ParamBinder(Graph & g, const ParamStore & ps, Filter trainable = nullptr);

    Graph & graph() { return g_; }
    const ParamStore & store() const { return ps_; }
    Var operator()(const std::string & name);
    // Uses `v` for `name` instead of the stored tensor.
    void bind(const std::string & name, Var v) { bound_[name] = v; }
    // Gradients of every trainable tensor bound so far (zeros if unreached).
    GradMap gradients() const;

private:
    Graph & g_;
    const ParamStore & ps_;
    Filter trainable_;
    std::map<std::string, Var> bound_;
};

ParamStore init_teacher(const ModelConfig & c, uint64_t seed);
ParamStore init_bolmo(const ModelConfig & c, uint64_t seed);
// Bolmo parameters whose global model (and, unless fresh_subword, the
// subword-suffix table) come from the teacher.
ParamStore byteify(const ParamStore & teacher, const ModelConfig & c, uint64_t seed, bool fresh_subword = false);

bool is_global_param(const std::string & name);
// Parameter count of everything outside the global model and subword tables.
int64_t local_param_count(const ParamStore & ps);

// ---------------------------------------------------------------- layers

using MlstmStates = std::vector<MlstmState>;

Var rmsnorm_gain(ParamBinder & b, Var x, const std::string & weight, double eps);
Var swiglu(ParamBinder & b, Var x, const std::string & prefix);

// Pre-norm residual mLSTM block followed by a pre-norm SwiGLU block.
Var mlstm_block(ParamBinder & b, const std::string & prefix, Var x, std::span<const uint8_t> seg_start,
                const ModelConfig & c, const MlstmState * init, MlstmState * final);
Var local_stack(ParamBinder & b, const std::string & prefix, int64_t layers, Var x,
                std::span<const uint8_t> seg_start, const ModelConfig & c, const MlstmStates * init,
                MlstmStates * final);

Var embed_bytes(ParamBinder & b, std::span<const uint8_t> x, std::span<const TokenId> suffix_ids);
Var local_encode(ParamBinder & b, Var e, std::span<const uint8_t> seg_start, const ModelConfig & c,
                 const MlstmStates * init = nullptr, MlstmStates * final = nullptr);
Var local_decode(ParamBinder & b, Var z, std::span<const uint8_t> seg_start, const ModelConfig & c,
                 const MlstmStates * init = nullptr, MlstmStates * final = nullptr);

// Scores at every position that is not forced. Forced positions (the first
// and last byte of each document) are always boundaries.
struct BoundaryScores {
    Var p;                          // [positions.size()]
    std::vector<int64_t> positions; // byte index of each score
};
BoundaryScores predict_boundaries(ParamBinder & b, Var e_hat, const SeqLayout & layout, const ModelConfig & c);
// p_t = 1/2 (1 - cos(q, k)) for given rows.
Var boundary_score_rows(ParamBinder & b, Var e_hat, const std::vector<int64_t> & q_rows,
                        const std::vector<int64_t> & k_rows);
std::vector<uint8_t> forced_boundaries(const SeqLayout & layout);
BoundaryMask threshold_mask(const Tensor & p, const std::vector<int64_t> & positions, const SeqLayout & layout,
                            double threshold);

Var pool_last(Graph & g, Var e_hat, const BoundaryMask & mask);

// Key/value rows per global layer for incremental decoding of one document.
struct KvCache {
    std::vector<Tensor> k, v;
    int64_t length = 0;
};

struct GlobalOut {
    Var h_hat;          // after the final norm
    std::optional<Var> probe; // residual stream after n_probe blocks
};
// Causal transformer over patches; attention stays inside each document and
// rotary positions count patches within the document. With a cache, the
// input continues the cached (single) document and the cache is extended.
GlobalOut global_forward(ParamBinder & b, Var h, const SeqLayout & patches, const ModelConfig & c,
                         int64_t n_probe = -1, KvCache * cache = nullptr);
// The first `layers` global blocks, without the final norm.
Var global_prefix(ParamBinder & b, Var h, const SeqLayout & patches, const ModelConfig & c, int64_t layers);

// k(j) for every byte: index of the last patch ending at or before j inside
// the same document, or -1.
std::vector<int64_t> depool_index(const SeqLayout & layout, const BoundaryMask & mask);
Var depool(ParamBinder & b, Var e_hat, Var h_hat, const std::vector<int64_t> & index);

Var lm_head_fused(ParamBinder & b, Var z_hat, const ModelConfig & c); // log-probs [N, 512]

// next-symbol target at every byte (-1 at the last byte of a document)
std::vector<int32_t> fused_targets(std::span<const uint8_t> x, const BoundaryMask & mask, const SeqLayout & layout);

struct ForwardOut {
    Var e, e_hat;
    BoundaryScores scores;
    BoundaryMask mask;
    Var h, h_hat, z, z_hat, logp;
};
// Full byte-level forward. Pools with `mask` when given, otherwise with the
// thresholded predictions.
ForwardOut forward_full(ParamBinder & b, std::span<const uint8_t> x, std::span<const TokenId> suffix_ids,
                        const SeqLayout & layout, const ModelConfig & c, const BoundaryMask * mask = nullptr);

// Teacher subword LM: final normed states [T, d] and next-token log-probs [T, V].
struct TeacherOut {
    Var states, logp, embeddings;
};
TeacherOut teacher_forward(ParamBinder & b, std::span<const TokenId> tokens, const SeqLayout & layout,
                           const ModelConfig & c);

// Suffix ids of a document laid out as [BOS] + content (+ EOT).
std::vector<TokenId> document_suffix_ids(const SuffixIndex & index, std::span<const uint8_t> doc);

} // namespace bolmo
