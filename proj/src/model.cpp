#include "bolmo/model.h"

#include "bolmo/errors.h"
#include "bolmo/kv.h"

#include <cmath>

namespace bolmo {

// ---------------------------------------------------------------- config

int64_t ModelConfig::local_ffn_hidden() const {
    return std::max<int64_t>(1, static_cast<int64_t>(std::llround(ffn_expansion * static_cast<double>(d))));
}

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string & msg) {
        if (!ok) throw ConfigError("model config: " + msg);
    };
    need(d > 0, "d must be positive");
    need(encoder_layers >= 1 && decoder_layers >= 1, "local stacks need at least one layer");
    need(mlstm.heads > 0 && mlstm.qk_dim > 0 && mlstm.v_dim > 0, "mlstm dims must be positive");
    need(d % mlstm.heads == 0, "d must be divisible by mlstm.heads");
    need(mlstm.gate_soft_cap > 0, "gate_soft_cap must be positive");
    need(ffn_expansion > 0, "ffn_expansion must be positive");
    need(global.layers >= 1 && global.heads > 0 && global.head_dim > 0 && global.ffn_hidden > 0,
         "global dims must be positive");
    need(d % global.heads == 0, "d must be divisible by global.heads");
    need(global.head_dim % 2 == 0, "global.head_dim must be even for rotary embeddings");
    need(global.rope_theta > 1.0, "rope_theta must exceed 1");
    need(vocab_fused == 512, "vocab_fused must be 2*256");
    need(n_probe >= 0 && n_probe <= global.layers, "n_probe must lie in [0, global.layers]");
    need(subword_vocab >= SubwordVocab::kFirstMerge, "subword_vocab must be at least 257");
    need(norm_eps > 0, "norm_eps must be positive");
    need(boundary_threshold > 0 && boundary_threshold < 1, "boundary_threshold must lie in (0, 1)");
}

namespace {

template <class C, class F>
void visit_fields(C & c, F && f) {
    f("model.d", c.d);
    f("model.encoder_layers", c.encoder_layers);
    f("model.decoder_layers", c.decoder_layers);
    f("model.mlstm.heads", c.mlstm.heads);
    f("model.mlstm.qk_dim", c.mlstm.qk_dim);
    f("model.mlstm.v_dim", c.mlstm.v_dim);
    f("model.mlstm.gate_soft_cap", c.mlstm.gate_soft_cap);
    f("model.mlstm.input_gate_bias_init", c.mlstm.input_gate_bias_init);
    f("model.mlstm.forget_gate_bias_lo", c.mlstm.forget_gate_bias_lo);
    f("model.mlstm.forget_gate_bias_hi", c.mlstm.forget_gate_bias_hi);
    f("model.ffn_expansion", c.ffn_expansion);
    f("model.global.layers", c.global.layers);
    f("model.global.heads", c.global.heads);
    f("model.global.head_dim", c.global.head_dim);
    f("model.global.ffn_hidden", c.global.ffn_hidden);
    f("model.global.rope_theta", c.global.rope_theta);
    f("model.vocab_fused", c.vocab_fused);
    f("model.n_probe", c.n_probe);
    f("model.subword_vocab", c.subword_vocab);
    f("model.norm_eps", c.norm_eps);
    f("model.boundary_threshold", c.boundary_threshold);
    f("model.causal_boundary", c.causal_boundary);
    f("model.embed_init_std", c.embed_init_std);
    f("model.byte_embed_init_std", c.byte_embed_init_std);
}

} // namespace

std::map<std::string, std::string> config_to_kv(const ModelConfig & c) {
    std::map<std::string, std::string> kv;
    ModelConfig copy = c;
    visit_fields(copy, [&](const char * k, auto & v) { kv[k] = kv_format(v); });
    return kv;
}

ModelConfig config_from_kv(const std::map<std::string, std::string> & kv, ModelConfig base) {
    std::map<std::string, bool> known;
    visit_fields(base, [&](const char * k, auto & v) {
        known[k] = true;
        auto it = kv.find(k);
        if (it != kv.end()) kv_parse(k, it->second, v);
    });
    for (const auto & [k, v] : kv)
        if (starts_with(k, "model.") && !known.count(k)) throw ConfigError("unknown config key: " + k);
    return base;
}

// ---------------------------------------------------------------- layout

SeqLayout SeqLayout::single(int64_t n) { return from_lengths({n}); }

SeqLayout SeqLayout::from_lengths(const std::vector<int64_t> & lengths) {
    SeqLayout l;
    for (int64_t n : lengths) {
        if (n <= 0) throw InputError("SeqLayout: documents must be non-empty");
        l.offsets.push_back(l.offsets.back() + n);
    }
    return l;
}

std::vector<uint8_t> SeqLayout::seg_start() const {
    std::vector<uint8_t> s(static_cast<size_t>(size()), 0);
    for (int64_t k = 0; k < docs(); ++k) s[static_cast<size_t>(offsets[k])] = 1;
    return s;
}

std::vector<int64_t> SeqLayout::seg_ids() const {
    std::vector<int64_t> s(static_cast<size_t>(size()));
    for (int64_t k = 0; k < docs(); ++k)
        for (int64_t i = offsets[k]; i < offsets[k + 1]; ++i) s[static_cast<size_t>(i)] = k;
    return s;
}

std::vector<int64_t> SeqLayout::positions() const {
    std::vector<int64_t> s(static_cast<size_t>(size()));
    for (int64_t k = 0; k < docs(); ++k)
        for (int64_t i = offsets[k]; i < offsets[k + 1]; ++i) s[static_cast<size_t>(i)] = i - offsets[k];
    return s;
}

SeqLayout patch_layout(const SeqLayout & bytes, const BoundaryMask & mask) {
    if (static_cast<int64_t>(mask.size()) != bytes.size()) throw ShapeError("patch_layout: mask length");
    std::vector<int64_t> counts;
    for (int64_t k = 0; k < bytes.docs(); ++k) {
        int64_t c = 0;
        for (int64_t i = bytes.offsets[k]; i < bytes.offsets[k + 1]; ++i) c += mask[static_cast<size_t>(i)];
        if (c == 0) throw InputError("patch_layout: document without a patch");
        counts.push_back(c);
    }
    return SeqLayout::from_lengths(counts);
}

// ---------------------------------------------------------------- params

ParamBinder::ParamBinder(Graph & g, const ParamStore & ps, Filter trainable)
    : g_(g), ps_(ps), trainable_(std::move(trainable)) {}

Var ParamBinder::operator()(const std::string & name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const bool train = trainable_ && trainable_(name);
    Var v = g_.leaf(ps_.get(name), train);
    bound_.emplace(name, v);
    return v;
}

GradMap ParamBinder::gradients() const {
    GradMap out;
    for (const auto & [name, v] : bound_)
        if (g_.requires_grad(v)) out.emplace(name, g_.grad(v));
    return out;
}

namespace {

struct Init {
    std::mt19937_64 rng;
    explicit Init(uint64_t seed) : rng(seed) {}

    Tensor normal(Shape s, double std) {
        Tensor t(std::move(s));
        std::normal_distribution<double> nd(0.0, 1.0);
        for (auto & x : t.values()) x = std * nd(rng);
        return t;
    }
};

void add_ffn(ParamStore & ps, Init & in, const std::string & p, int64_t d, int64_t f, double out_scale) {
    ps.set(p + "w1", in.normal({d, f}, 1.0 / std::sqrt(static_cast<double>(d))));
    ps.set(p + "w3", in.normal({d, f}, 1.0 / std::sqrt(static_cast<double>(d))));
    ps.set(p + "w2", in.normal({f, d}, out_scale / std::sqrt(static_cast<double>(f))));
}

void add_global(ParamStore & ps, Init & in, const ModelConfig & c) {
    const int64_t d = c.d, w = c.global.heads * c.global.head_dim;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(c.global.layers));
    for (int64_t l = 0; l < c.global.layers; ++l) {
        const std::string p = "global.layers." + std::to_string(l) + ".";
        ps.set(p + "attn_norm", Tensor({d}, 1.0));
        ps.set(p + "wq", in.normal({d, w}, 1.0 / std::sqrt(static_cast<double>(d))));
        ps.set(p + "wk", in.normal({d, w}, 1.0 / std::sqrt(static_cast<double>(d))));
        ps.set(p + "wv", in.normal({d, w}, 1.0 / std::sqrt(static_cast<double>(d))));
        ps.set(p + "wo", in.normal({w, d}, out_scale / std::sqrt(static_cast<double>(w))));
        ps.set(p + "ffn_norm", Tensor({d}, 1.0));
        add_ffn(ps, in, p + "ffn.", d, c.global.ffn_hidden, out_scale);
    }
    ps.set("global.final_norm", Tensor({d}, 1.0));
}

void add_local(ParamStore & ps, Init & in, const ModelConfig & c, const std::string & stack, int64_t layers) {
    const int64_t d = c.d, H = c.mlstm.heads, dk = c.mlstm.qk_dim, dv = c.mlstm.v_dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(layers));
    for (int64_t l = 0; l < layers; ++l) {
        const std::string p = stack + ".layers." + std::to_string(l) + ".";
        ps.set(p + "norm", Tensor({d}, 1.0));
        ps.set(p + "wq", in.normal({d, H * dk}, sd));
        ps.set(p + "wk", in.normal({d, H * dk}, sd));
        ps.set(p + "wv", in.normal({d, H * dv}, sd));
        ps.set(p + "wi", in.normal({d, H}, 0.1 * sd));
        ps.set(p + "bi", Tensor({H}, c.mlstm.input_gate_bias_init));
        ps.set(p + "wf", in.normal({d, H}, 0.1 * sd));
        Tensor bf({H});
        for (int64_t h = 0; h < H; ++h) {
            const double u = H == 1 ? 0.0 : static_cast<double>(h) / static_cast<double>(H - 1);
            bf[h] = c.mlstm.forget_gate_bias_lo + u * (c.mlstm.forget_gate_bias_hi - c.mlstm.forget_gate_bias_lo);
        }
        ps.set(p + "bf", bf);
        ps.set(p + "wo_gate", in.normal({d, H * dv}, sd));
        ps.set(p + "head_norm", Tensor({H * dv}, 1.0));
        ps.set(p + "wout", in.normal({H * dv, d}, out_scale / std::sqrt(static_cast<double>(H * dv))));
        ps.set(p + "ffn_norm", Tensor({d}, 1.0));
        add_ffn(ps, in, p + "ffn.", d, c.local_ffn_hidden(), out_scale);
    }
}

} // namespace

ParamStore init_teacher(const ModelConfig & c, uint64_t seed) {
    c.validate();
    Init in(seed);
    ParamStore ps;
    ps.set("tok_embed.weight", in.normal({c.subword_vocab, c.d}, c.embed_init_std));
    add_global(ps, in, c);
    ps.set("unembed.weight", in.normal({c.d, c.subword_vocab}, 1.0 / std::sqrt(static_cast<double>(c.d))));
    return ps;
}

ParamStore init_bolmo(const ModelConfig & c, uint64_t seed) {
    c.validate();
    Init in(seed);
    ParamStore ps;
    ps.set("byte_embed.weight", in.normal({256, c.d}, c.byte_embed_init_std));
    ps.set("subword_embed.weight", in.normal({c.subword_vocab, c.d}, c.embed_init_std));
    add_local(ps, in, c, "encoder", c.encoder_layers);
    const double sd = 1.0 / std::sqrt(static_cast<double>(c.d));
    ps.set("boundary.wq", in.normal({c.d, c.d}, sd));
    ps.set("boundary.wk", in.normal({c.d, c.d}, sd));
    add_global(ps, in, c);
    ps.set("depool.weight", Tensor({c.d, c.d}, 0.0));
    ps.set("start_vector", in.normal({c.d}, 1.0));
    add_local(ps, in, c, "decoder", c.decoder_layers);
    ps.set("lm_head.norm", Tensor({c.d}, 1.0));
    ps.set("lm_head.weight", in.normal({c.d, c.vocab_fused}, 0.02 * sd));
    return ps;
}

ParamStore byteify(const ParamStore & teacher, const ModelConfig & c, uint64_t seed, bool fresh_subword) {
    ParamStore ps = init_bolmo(c, seed);
    for (const auto & [name, t] : teacher) {
        if (!is_global_param(name)) continue;
        if (!ps.contains(name)) throw InputError("byteify: teacher tensor not in the model: " + name);
        if (ps.get(name).shape() != t.shape()) throw ShapeError("byteify: shape mismatch for " + name);
        ps.set(name, t);
    }
    for (const auto & [name, t] : ps)
        if (is_global_param(name) && !teacher.contains(name)) throw InputError("byteify: teacher lacks " + name);
    if (!fresh_subword) {
        const Tensor & emb = teacher.get("tok_embed.weight");
        if (emb.shape() != ps.get("subword_embed.weight").shape()) throw ShapeError("byteify: embedding shape");
        ps.set("subword_embed.weight", emb);
    }
    return ps;
}

bool is_global_param(const std::string & name) { return starts_with(name, "global."); }

int64_t local_param_count(const ParamStore & ps) {
    return ps.numel([](const std::string & n) {
        for (const char * p : {"encoder.", "decoder.", "boundary.", "depool.", "lm_head."})
            if (starts_with(n, p)) return true;
        return false;
    });
}

// ---------------------------------------------------------------- layers

Var rmsnorm_gain(ParamBinder & b, Var x, const std::string & weight, double eps) {
    Graph & g = b.graph();
    return g.mul(g.rmsnorm(x, eps), b(weight));
}

Var swiglu(ParamBinder & b, Var x, const std::string & p) {
    Graph & g = b.graph();
    Var a = g.silu(g.matmul(x, b(p + "w1")));
    Var u = g.matmul(x, b(p + "w3"));
    return g.matmul(g.mul(a, u), b(p + "w2"));
}

Var mlstm_block(ParamBinder & b, const std::string & p, Var x, std::span<const uint8_t> seg_start,
                const ModelConfig & c, const MlstmState * init, MlstmState * final) {
    Graph & g = b.graph();
    const int64_t N = g.value(x).rows(), H = c.mlstm.heads, dv = c.mlstm.v_dim;
    const double cap = c.mlstm.gate_soft_cap;
    Var xn = rmsnorm_gain(b, x, p + "norm", c.norm_eps);
    Var q = g.matmul(xn, b(p + "wq"));
    Var k = g.matmul(xn, b(p + "wk"));
    Var v = g.matmul(xn, b(p + "wv"));
    Var ig = g.softcap(g.add(g.matmul(xn, b(p + "wi")), b(p + "bi")), cap);
    Var lf = g.log_sigmoid(g.softcap(g.add(g.matmul(xn, b(p + "wf")), b(p + "bf")), cap));
    Var hs = mlstm_scan(g, q, k, v, ig, lf, H, seg_start, init, final);
    Var hn = g.reshape(g.rmsnorm(g.reshape(hs, {N * H, dv}), c.norm_eps), {N, H * dv});
    hn = g.mul(hn, b(p + "head_norm"));
    Var o = g.sigmoid(g.matmul(xn, b(p + "wo_gate")));
    x = g.add(x, g.matmul(g.mul(hn, o), b(p + "wout")));
    return g.add(x, swiglu(b, rmsnorm_gain(b, x, p + "ffn_norm", c.norm_eps), p + "ffn."));
}

Var local_stack(ParamBinder & b, const std::string & prefix, int64_t layers, Var x,
                std::span<const uint8_t> seg_start, const ModelConfig & c, const MlstmStates * init,
                MlstmStates * final) {
    if (init && static_cast<int64_t>(init->size()) != layers) throw ShapeError("local_stack: state count");
    if (final) final->assign(static_cast<size_t>(layers), MlstmState{});
    for (int64_t l = 0; l < layers; ++l) {
        x = mlstm_block(b, prefix + ".layers." + std::to_string(l) + ".", x, seg_start, c,
                        init ? &(*init)[static_cast<size_t>(l)] : nullptr,
                        final ? &(*final)[static_cast<size_t>(l)] : nullptr);
    }
    return x;
}

Var embed_bytes(ParamBinder & b, std::span<const uint8_t> x, std::span<const TokenId> suffix_ids) {
    if (x.size() != suffix_ids.size()) throw ShapeError("embed_bytes: one suffix id per byte");
    if (x.empty()) throw InputError("embed_bytes: empty input");
    Graph & g = b.graph();
    std::vector<int64_t> bi(x.begin(), x.end()), si(suffix_ids.begin(), suffix_ids.end());
    const int64_t V = b.store().get("subword_embed.weight").rows();
    for (int64_t s : si)
        if (s < 0 || s >= V) throw InputError("embed_bytes: suffix id out of range: " + std::to_string(s));
    return g.add(g.gather_rows(b("byte_embed.weight"), bi), g.gather_rows(b("subword_embed.weight"), si));
}

Var local_encode(ParamBinder & b, Var e, std::span<const uint8_t> seg_start, const ModelConfig & c,
                 const MlstmStates * init, MlstmStates * final) {
    return local_stack(b, "encoder", c.encoder_layers, e, seg_start, c, init, final);
}

Var local_decode(ParamBinder & b, Var z, std::span<const uint8_t> seg_start, const ModelConfig & c,
                 const MlstmStates * init, MlstmStates * final) {
    return local_stack(b, "decoder", c.decoder_layers, z, seg_start, c, init, final);
}

std::vector<uint8_t> forced_boundaries(const SeqLayout & layout) {
    std::vector<uint8_t> f(static_cast<size_t>(layout.size()), 0);
    for (int64_t k = 0; k < layout.docs(); ++k) {
        f[static_cast<size_t>(layout.offsets[k])] = 1;
        f[static_cast<size_t>(layout.offsets[k + 1] - 1)] = 1;
    }
    return f;
}

Var boundary_score_rows(ParamBinder & b, Var e_hat, const std::vector<int64_t> & q_rows,
                        const std::vector<int64_t> & k_rows) {
    Graph & g = b.graph();
    Var Q = g.gather_rows(g.matmul(e_hat, b("boundary.wq")), q_rows);
    Var K = g.gather_rows(g.matmul(e_hat, b("boundary.wk")), k_rows);
    return g.shift(g.scale(g.cosine_rows(Q, K, 1e-8), -0.5), 0.5);
}

BoundaryScores predict_boundaries(ParamBinder & b, Var e_hat, const SeqLayout & layout, const ModelConfig & c) {
    if (b.graph().value(e_hat).rows() != layout.size()) throw ShapeError("predict_boundaries: layout size");
    BoundaryScores out;
    std::vector<int64_t> q_rows, k_rows;
    const auto forced = forced_boundaries(layout);
    for (int64_t t = 0; t < layout.size(); ++t) {
        if (forced[static_cast<size_t>(t)]) continue;
        out.positions.push_back(t);
        // non-causal: (t+1, t); causal: (t, t-1). Both stay inside the document.
        q_rows.push_back(c.causal_boundary ? t : t + 1);
        k_rows.push_back(c.causal_boundary ? t - 1 : t);
    }
    if (out.positions.empty()) {
        out.p = b.graph().constant(Tensor({0}));
        return out;
    }
    out.p = boundary_score_rows(b, e_hat, q_rows, k_rows);
    return out;
}

BoundaryMask threshold_mask(const Tensor & p, const std::vector<int64_t> & positions, const SeqLayout & layout,
                            double threshold) {
    std::vector<uint8_t> f = forced_boundaries(layout);
    if (p.numel() != static_cast<int64_t>(positions.size())) throw ShapeError("threshold_mask: score count");
    for (size_t k = 0; k < positions.size(); ++k)
        f[static_cast<size_t>(positions[k])] = p[static_cast<int64_t>(k)] > threshold ? 1 : 0;
    return BoundaryMask(std::move(f));
}

Var pool_last(Graph & g, Var e_hat, const BoundaryMask & mask) {
    if (static_cast<int64_t>(mask.size()) != g.value(e_hat).rows()) throw ShapeError("pool_last: mask length");
    auto ends = mask.patch_ends();
    if (ends.empty()) throw InputError("pool_last: mask has no boundary");
    return g.gather_rows(e_hat, ends);
}

namespace {

struct AttnIndex {
    std::vector<int64_t> q_seg, q_limit, kv_seg, pos;
};

Var global_block(ParamBinder & b, int64_t l, Var x, const AttnIndex & ai, const ModelConfig & c, KvCache * cache) {
    Graph & g = b.graph();
    const std::string p = "global.layers." + std::to_string(l) + ".";
    const int64_t H = c.global.heads;
    Var a = rmsnorm_gain(b, x, p + "attn_norm", c.norm_eps);
    Var q = rope(g, g.matmul(a, b(p + "wq")), H, ai.pos, c.global.rope_theta);
    Var k = rope(g, g.matmul(a, b(p + "wk")), H, ai.pos, c.global.rope_theta);
    Var v = g.matmul(a, b(p + "wv"));
    if (cache) {
        if (cache->length > 0) {
            k = g.concat_rows({g.constant(cache->k[static_cast<size_t>(l)]), k});
            v = g.concat_rows({g.constant(cache->v[static_cast<size_t>(l)]), v});
        }
        cache->k[static_cast<size_t>(l)] = g.value(k);
        cache->v[static_cast<size_t>(l)] = g.value(v);
    }
    Var o = causal_attention(g, q, k, v, H, ai.q_seg, ai.q_limit, ai.kv_seg);
    x = g.add(x, g.matmul(o, b(p + "wo")));
    return g.add(x, swiglu(b, rmsnorm_gain(b, x, p + "ffn_norm", c.norm_eps), p + "ffn."));
}

AttnIndex attn_index(const SeqLayout & patches, int64_t rows, const KvCache * cache) {
    if (patches.size() != rows) throw ShapeError("global_forward: patch layout size");
    AttnIndex ai;
    if (cache) {
        if (patches.docs() != 1) throw InputError("global_forward: a cache holds one document");
        const int64_t L = cache->length;
        ai.q_seg.assign(static_cast<size_t>(rows), 0);
        ai.kv_seg.assign(static_cast<size_t>(L + rows), 0);
        for (int64_t i = 0; i < rows; ++i) {
            ai.q_limit.push_back(L + i);
            ai.pos.push_back(L + i);
        }
    } else {
        ai.q_seg = patches.seg_ids();
        ai.kv_seg = ai.q_seg;
        ai.pos = patches.positions();
        for (int64_t i = 0; i < rows; ++i) ai.q_limit.push_back(i);
    }
    return ai;
}

} // namespace

GlobalOut global_forward(ParamBinder & b, Var h, const SeqLayout & patches, const ModelConfig & c, int64_t n_probe,
                         KvCache * cache) {
    Graph & g = b.graph();
    if (n_probe > c.global.layers) throw InputError("global_forward: n_probe exceeds the layer count");
    if (cache && cache->k.size() != static_cast<size_t>(c.global.layers)) {
        if (cache->length != 0) throw ShapeError("global_forward: cache layer count");
        cache->k.assign(static_cast<size_t>(c.global.layers), Tensor());
        cache->v.assign(static_cast<size_t>(c.global.layers), Tensor());
    }
    const AttnIndex ai = attn_index(patches, g.value(h).rows(), cache);
    GlobalOut out;
    if (n_probe == 0) out.probe = h;
    Var x = h;
    for (int64_t l = 0; l < c.global.layers; ++l) {
        x = global_block(b, l, x, ai, c, cache);
        if (l + 1 == n_probe) out.probe = x;
    }
    if (cache) cache->length += g.value(h).rows();
    out.h_hat = rmsnorm_gain(b, x, "global.final_norm", c.norm_eps);
    return out;
}

Var global_prefix(ParamBinder & b, Var h, const SeqLayout & patches, const ModelConfig & c, int64_t layers) {
    if (layers < 0 || layers > c.global.layers) throw InputError("global_prefix: layer count out of range");
    const AttnIndex ai = attn_index(patches, b.graph().value(h).rows(), nullptr);
    Var x = h;
    for (int64_t l = 0; l < layers; ++l) x = global_block(b, l, x, ai, c, nullptr);
    return x;
}

std::vector<int64_t> depool_index(const SeqLayout & layout, const BoundaryMask & mask) {
    if (static_cast<int64_t>(mask.size()) != layout.size()) throw ShapeError("depool_index: mask length");
    std::vector<int64_t> idx(static_cast<size_t>(layout.size()));
    int64_t patch = -1;
    for (int64_t k = 0; k < layout.docs(); ++k) {
        int64_t cur = -1;
        for (int64_t j = layout.offsets[k]; j < layout.offsets[k + 1]; ++j) {
            if (mask[static_cast<size_t>(j)]) cur = ++patch;
            idx[static_cast<size_t>(j)] = cur;
        }
    }
    return idx;
}

Var depool(ParamBinder & b, Var e_hat, Var h_hat, const std::vector<int64_t> & index) {
    Graph & g = b.graph();
    const int64_t P = g.value(h_hat).rows(), d = g.value(h_hat).cols();
    if (static_cast<int64_t>(index.size()) != g.value(e_hat).rows()) throw ShapeError("depool: index length");
    Var table = g.concat_rows({h_hat, g.reshape(b("start_vector"), {1, d})});
    std::vector<int64_t> rows(index.size());
    for (size_t j = 0; j < index.size(); ++j) {
        if (index[j] >= P) throw ShapeError("depool: patch index out of range");
        rows[j] = index[j] < 0 ? P : index[j];
    }
    return g.add(g.matmul(e_hat, b("depool.weight")), g.gather_rows(table, rows));
}

Var lm_head_fused(ParamBinder & b, Var z_hat, const ModelConfig & c) {
    Graph & g = b.graph();
    return g.log_softmax(g.matmul(rmsnorm_gain(b, z_hat, "lm_head.norm", c.norm_eps), b("lm_head.weight")));
}

std::vector<int32_t> fused_targets(std::span<const uint8_t> x, const BoundaryMask & mask, const SeqLayout & layout) {
    if (static_cast<int64_t>(x.size()) != layout.size() || mask.size() != x.size())
        throw ShapeError("fused_targets: length mismatch");
    std::vector<int32_t> t(x.size(), -1);
    for (int64_t k = 0; k < layout.docs(); ++k)
        for (int64_t j = layout.offsets[k]; j + 1 < layout.offsets[k + 1]; ++j)
            t[static_cast<size_t>(j)] = fused_symbol(x[static_cast<size_t>(j + 1)], mask[static_cast<size_t>(j + 1)]);
    return t;
}

ForwardOut forward_full(ParamBinder & b, std::span<const uint8_t> x, std::span<const TokenId> suffix_ids,
                        const SeqLayout & layout, const ModelConfig & c, const BoundaryMask * mask) {
    Graph & g = b.graph();
    if (static_cast<int64_t>(x.size()) != layout.size()) throw ShapeError("forward_full: layout size");
    const auto seg = layout.seg_start();
    ForwardOut o;
    o.e = embed_bytes(b, x, suffix_ids);
    o.e_hat = local_encode(b, o.e, seg, c);
    o.scores = predict_boundaries(b, o.e_hat, layout, c);
    o.mask = mask ? *mask : threshold_mask(g.value(o.scores.p), o.scores.positions, layout, c.boundary_threshold);
    o.h = pool_last(g, o.e_hat, o.mask);
    o.h_hat = global_forward(b, o.h, patch_layout(layout, o.mask), c).h_hat;
    o.z = depool(b, o.e_hat, o.h_hat, depool_index(layout, o.mask));
    o.z_hat = local_decode(b, o.z, seg, c);
    o.logp = lm_head_fused(b, o.z_hat, c);
    return o;
}

TeacherOut teacher_forward(ParamBinder & b, std::span<const TokenId> tokens, const SeqLayout & layout,
                           const ModelConfig & c) {
    Graph & g = b.graph();
    if (static_cast<int64_t>(tokens.size()) != layout.size()) throw ShapeError("teacher_forward: layout size");
    std::vector<int64_t> ids(tokens.begin(), tokens.end());
    TeacherOut o;
    o.embeddings = g.gather_rows(b("tok_embed.weight"), ids);
    o.states = global_forward(b, o.embeddings, layout, c).h_hat;
    o.logp = g.log_softmax(g.matmul(o.states, b("unembed.weight")));
    return o;
}

std::vector<TokenId> document_suffix_ids(const SuffixIndex & index, std::span<const uint8_t> doc) {
    if (doc.empty()) throw InputError("document_suffix_ids: empty document");
    std::vector<TokenId> out(doc.size());
    out[0] = SubwordVocab::kBos;
    auto body = doc.subspan(1);
    for (size_t i = 0; i < body.size(); ++i) out[i + 1] = index.longest_suffix_token(body, i);
    return out;
}

} // namespace bolmo
