#include "bolmo/inference.h"

#include "bolmo/errors.h"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bolmo {

namespace {

Tensor last_row(const Tensor & t) {
    const int64_t r = t.rows() - 1, d = t.cols();
    Tensor out({d});
    std::copy(t.row(r).begin(), t.row(r).end(), out.data());
    return out;
}

TokenId next_suffix_id(const SuffixIndex & index, const std::vector<uint8_t> & bytes) {
    if (bytes.size() == 1) return SubwordVocab::kBos;
    std::span<const uint8_t> body(bytes.data() + 1, bytes.size() - 1);
    return index.longest_suffix_token(body, body.size() - 1);
}

} // namespace

DecodeState prefill(const ParamStore & params, const SuffixIndex & index, std::span<const uint8_t> prompt,
                    const ModelConfig & c, uint64_t seed) {
    if (prompt.empty()) throw InputError("prefill: empty prompt");
    Graph g;
    ParamBinder b(g, params);
    const SeqLayout layout = SeqLayout::single(static_cast<int64_t>(prompt.size()));
    const auto seg = layout.seg_start();
    const auto suffix = document_suffix_ids(index, prompt);

    DecodeState s;
    s.rng.seed(seed);
    s.bytes.assign(prompt.begin(), prompt.end());
    Var e = embed_bytes(b, prompt, suffix);
    Var e_hat = local_encode(b, e, seg, c, nullptr, &s.encoder);
    const BoundaryScores scores = predict_boundaries(b, e_hat, layout, c);
    const BoundaryMask mask = threshold_mask(g.value(scores.p), scores.positions, layout, c.boundary_threshold);
    s.mask = mask.flags();
    Var h = pool_last(g, e_hat, mask);
    Var h_hat = global_forward(b, h, patch_layout(layout, mask), c, -1, &s.cache).h_hat;
    Var z = depool(b, e_hat, h_hat, depool_index(layout, mask));
    Var z_hat = local_decode(b, z, seg, c, nullptr, &s.decoder);
    s.logp = last_row(g.value(lm_head_fused(b, z_hat, c)));
    const Tensor & hh = g.value(h_hat);
    s.h_hat = Tensor({1, hh.cols()});
    std::copy(hh.row(hh.rows() - 1).begin(), hh.row(hh.rows() - 1).end(), s.h_hat.data());
    return s;
}

int32_t advance(const ParamStore & params, const SuffixIndex & index, DecodeState & state, int32_t symbol,
                const ModelConfig & c, const DecodeOptions & opts) {
    if (symbol < 0 || symbol >= 512) throw InputError("advance: symbol out of range");
    if (state.bytes.empty()) throw InputError("advance: state was not prefilled");
    const uint8_t byte = fused_byte(symbol);
    bool boundary = fused_boundary(symbol);
    if (!boundary && static_cast<int64_t>(state.pending.size()) + 1 >= opts.patch_cap) boundary = true;

    state.bytes.push_back(byte);
    state.mask.push_back(boundary ? 1 : 0);
    const uint8_t x[1] = {byte};
    const TokenId sid[1] = {next_suffix_id(index, state.bytes)};
    const uint8_t seg[1] = {0};

    Graph g;
    ParamBinder b(g, params);
    MlstmStates enc, dec;
    Var e_hat = local_encode(b, embed_bytes(b, x, sid), seg, c, &state.encoder, &enc);
    if (boundary) {
        Var h = pool_last(g, e_hat, BoundaryMask::all_true(1));
        state.h_hat = g.value(global_forward(b, h, SeqLayout::single(1), c, -1, &state.cache).h_hat);
        ++state.global_calls;
        state.pending.clear();
    } else {
        state.pending.push_back(byte);
    }
    Var z = depool(b, e_hat, g.constant(state.h_hat), {0});
    Var z_hat = local_decode(b, z, seg, c, &state.decoder, &dec);
    state.logp = last_row(g.value(lm_head_fused(b, z_hat, c)));
    state.encoder = std::move(enc);
    state.decoder = std::move(dec);
    return fused_symbol(byte, boundary);
}

std::vector<double> sampling_distribution(std::span<const double> logp, const SamplerConfig & cfg) {
    if (!(cfg.temperature > 0.0)) throw ConfigError("sampling_distribution: temperature must be positive");
    if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0)) throw ConfigError("sampler: top_p must lie in (0, 1]");
    const size_t n = logp.size();
    std::vector<double> p(n);
    double mx = -INFINITY;
    for (double v : logp) mx = std::max(mx, v / cfg.temperature);
    double z = 0.0;
    for (size_t i = 0; i < n; ++i) z += p[i] = std::exp(logp[i] / cfg.temperature - mx);
    for (auto & v : p) v /= z;
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p[a] > p[b]; });
    std::vector<double> out(n, 0.0);
    double mass = 0.0;
    for (size_t i : order) {
        out[i] = p[i];
        mass += p[i];
        if (mass >= cfg.top_p) break;
    }
    for (auto & v : out) v /= mass;
    return out;
}

int32_t sample(std::span<const double> logp, const SamplerConfig & cfg, std::mt19937_64 & rng) {
    if (logp.empty()) throw InputError("sample: empty distribution");
    for (double v : logp)
        if (std::isnan(v) || v == INFINITY) throw NumericError("sample: non-finite log-probs");
    if (cfg.temperature < 0.0) throw ConfigError("sampler: temperature must be non-negative");
    if (cfg.temperature == 0.0) {
        if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0)) throw ConfigError("sampler: top_p must lie in (0, 1]");
        return static_cast<int32_t>(std::max_element(logp.begin(), logp.end()) - logp.begin());
    }
    const auto p = sampling_distribution(logp, cfg);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    int32_t last = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) continue;
        last = static_cast<int32_t>(i);
        acc += p[i];
        if (u < acc) return last;
    }
    return last;
}

int32_t decode_step(const ParamStore & params, const SuffixIndex & index, DecodeState & state,
                    const ModelConfig & c, const SamplerConfig & sampler, const DecodeOptions & opts) {
    const int32_t s = sample(state.logp.values(), sampler, state.rng);
    return advance(params, index, state, s, c, opts);
}

ByteSeq generate(const ParamStore & params, const SuffixIndex & index, std::span<const uint8_t> prompt,
                 int64_t max_bytes, const ModelConfig & c, const SamplerConfig & sampler, const DecodeOptions & opts) {
    if (max_bytes < 0) throw InputError("generate: max_bytes must be non-negative");
    ByteSeq out;
    if (max_bytes == 0) return out;
    ByteSeq seq{kBosByte};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    DecodeState state = prefill(params, index, seq, c, sampler.seed);
    while (static_cast<int64_t>(out.size()) < max_bytes) {
        const int32_t s = sample(state.logp.values(), sampler, state.rng);
        if (fused_byte(s) == opts.eot) break;
        out.push_back(fused_byte(s));
        if (static_cast<int64_t>(out.size()) < max_bytes) advance(params, index, state, s, c, opts);
    }
    return out;
}

} // namespace bolmo
