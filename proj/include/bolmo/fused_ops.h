#pragma once

#include "bolmo/graph.h"

#include <cstdint>
#include <span>
#include <vector>

namespace bolmo {

// Recurrent state of one mLSTM layer: per head a v_dim x qk_dim matrix
// memory C, a normalizer n and the log-scale stabilizer m.
struct MlstmState {
    int64_t heads = 0, qk_dim = 0, v_dim = 0;
    std::vector<double> C, n, m;
    std::vector<uint8_t> started;

    static MlstmState empty(int64_t heads, int64_t qk_dim, int64_t v_dim);
};

// Stabilized exponential-gated matrix-memory recurrence, run sequentially.
//
//   m_t = max(logf_t + m_{t-1}, ig_t)
//   C_t = exp(logf_t + m_{t-1} - m_t) C_{t-1} + exp(ig_t - m_t) v_t k_t^T
//   n_t = exp(logf_t + m_{t-1} - m_t) n_{t-1} + exp(ig_t - m_t) k_t
//   h_t = C_t q_t' / max(|n_t . q_t'|, exp(-m_t)),   q' = q / sqrt(qk_dim)
//
// q, k: [N, heads*qk_dim]; v: [N, heads*v_dim]; ig, logf: [N, heads].
// State resets wherever seg_start is set. `init` continues a previous call
// (no gradient flows into it); `final` receives the state after row N-1.
Var mlstm_scan(Graph & g, Var q, Var k, Var v, Var ig, Var logf, int64_t heads, std::span<const uint8_t> seg_start,
               const MlstmState * init = nullptr, MlstmState * final = nullptr);

// Rotary embedding over pairs (2i, 2i+1) of every head, at the given positions.
Var rope(Graph & g, Var x, int64_t heads, const std::vector<int64_t> & positions, double theta);

// Softmax attention; query i sees key j iff kv_seg[j] == q_seg[i] and
// j <= q_key_limit[i]. Keys of a segment must be contiguous.
Var causal_attention(Graph & g, Var q, Var k, Var v, int64_t heads, const std::vector<int64_t> & q_seg,
                     const std::vector<int64_t> & q_key_limit, const std::vector<int64_t> & kv_seg);

} // namespace bolmo
