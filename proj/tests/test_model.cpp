#include <doctest.h>

#include "bolmo/errors.h"
#include "bolmo/gradcheck.h"
#include "bolmo/model.h"
#include "fixtures.h"
#include "test_util.h"

#include <cmath>
#include <random>

using namespace bolmo;
using bolmo::testing::random_tensor;
using bolmo::testing::uniform_tensor;
using bolmo::testing::jitter;
using bolmo::testing::tiny_config;

namespace {

// Direct unstabilized mLSTM: raw exponential gates and max(|n.q|, 1).
Tensor naive_mlstm(const Tensor & q, const Tensor & k, const Tensor & v, const Tensor & ig, const Tensor & lf,
                   int64_t H, const std::vector<uint8_t> & seg) {
    const int64_t N = q.rows(), dk = q.cols() / H, dv = v.cols() / H;
    Tensor y({N, H * dv});
    for (int64_t h = 0; h < H; ++h) {
        std::vector<double> C(dv * dk, 0.0), n(dk, 0.0);
        for (int64_t t = 0; t < N; ++t) {
            if (seg[t]) {
                std::fill(C.begin(), C.end(), 0.0);
                std::fill(n.begin(), n.end(), 0.0);
            }
            const double f = std::exp(lf.at(t, h)), i = std::exp(ig.at(t, h));
            for (int64_t a = 0; a < dv; ++a)
                for (int64_t b = 0; b < dk; ++b) C[a * dk + b] = f * C[a * dk + b] + i * v.at(t, h * dv + a) * k.at(t, h * dk + b);
            double dot = 0.0;
            for (int64_t b = 0; b < dk; ++b) {
                n[b] = f * n[b] + i * k.at(t, h * dk + b);
                dot += n[b] * q.at(t, h * dk + b) / std::sqrt(double(dk));
            }
            const double den = std::max(std::abs(dot), 1.0);
            for (int64_t a = 0; a < dv; ++a) {
                double s = 0.0;
                for (int64_t b = 0; b < dk; ++b) s += C[a * dk + b] * q.at(t, h * dk + b) / std::sqrt(double(dk));
                y.at(t, h * dv + a) = s / den;
            }
        }
    }
    return y;
}

// Attention with an explicit visibility matrix.
Tensor naive_attention(const Tensor & q, const Tensor & k, const Tensor & v, int64_t H,
                       const std::vector<int64_t> & seg) {
    const int64_t N = q.rows(), hd = q.cols() / H;
    Tensor y({N, q.cols()});
    for (int64_t h = 0; h < H; ++h)
        for (int64_t i = 0; i < N; ++i) {
            std::vector<double> s(N, -INFINITY);
            double mx = -INFINITY;
            for (int64_t j = 0; j <= i; ++j) {
                if (seg[j] != seg[i]) continue;
                double d = 0.0;
                for (int64_t c = 0; c < hd; ++c) d += q.at(i, h * hd + c) * k.at(j, h * hd + c);
                s[j] = d / std::sqrt(double(hd));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (int64_t j = 0; j < N; ++j) z += std::isfinite(s[j]) ? std::exp(s[j] - mx) : 0.0;
            for (int64_t j = 0; j < N; ++j) {
                if (!std::isfinite(s[j])) continue;
                const double p = std::exp(s[j] - mx) / z;
                for (int64_t c = 0; c < hd; ++c) y.at(i, h * hd + c) += p * v.at(j, h * hd + c);
            }
        }
    return y;
}

Var weighted_sum(Graph & g, Var y, uint64_t seed) {
    std::mt19937_64 rng(seed);
    return g.sum(g.mul(y, g.constant(random_tensor(g.value(y).shape(), rng))));
}

// Gradient check of `layer` w.r.t. the named parameters and an input tensor.
double param_gradcheck(const ParamStore & ps, const std::vector<std::string> & names, const Tensor & input,
                       const std::function<Var(ParamBinder &, Var)> & layer) {
    std::vector<Tensor> point{input};
    for (const auto & n : names) point.push_back(ps.get(n));
    auto build = [&](Graph & g, const std::vector<Var> & leaves) {
        ParamBinder b(g, ps);
        for (size_t i = 0; i < names.size(); ++i) b.bind(names[i], leaves[i + 1]);
        return weighted_sum(g, layer(b, leaves[0]), 99);
    };
    return finite_difference_check(build, point, 1e-5).max_rel_error;
}

std::vector<std::string> names_with_prefix(const ParamStore & ps, const std::string & prefix) {
    std::vector<std::string> out;
    for (const auto & [n, t] : ps)
        if (starts_with(n, prefix)) out.push_back(n);
    return out;
}

} // namespace

TEST_CASE("mlstm scan matches the unstabilized recurrence") {
    std::mt19937_64 rng(1);
    const int64_t N = 9, H = 2, dk = 3, dv = 4;
    Tensor q = random_tensor({N, H * dk}, rng), k = random_tensor({N, H * dk}, rng), v = random_tensor({N, H * dv}, rng);
    Tensor ig = random_tensor({N, H}, rng, 2.0), lfr = random_tensor({N, H}, rng);
    Tensor lf(lfr.shape());
    for (int64_t i = 0; i < lf.numel(); ++i) lf[i] = -std::log1p(std::exp(-lfr[i]));
    std::vector<uint8_t> seg{1, 0, 0, 0, 1, 0, 0, 0, 0};
    Graph g;
    Tensor y = g.value(mlstm_scan(g, g.constant(q), g.constant(k), g.constant(v), g.constant(ig), g.constant(lf), H, seg));
    Tensor ref = naive_mlstm(q, k, v, ig, lf, H, seg);
    CHECK(max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("mlstm scan state carries across calls") {
    std::mt19937_64 rng(2);
    const int64_t N = 8, H = 2, dk = 2, dv = 3;
    Tensor q = random_tensor({N, H * dk}, rng), k = random_tensor({N, H * dk}, rng), v = random_tensor({N, H * dv}, rng);
    Tensor ig = random_tensor({N, H}, rng), lf = uniform_tensor({N, H}, rng, -2.0, -0.01);
    std::vector<uint8_t> seg(N, 0);
    seg[0] = 1;
    Graph g;
    Tensor full = g.value(mlstm_scan(g, g.constant(q), g.constant(k), g.constant(v), g.constant(ig), g.constant(lf), H, seg));
    MlstmState st;
    for (int64_t t = 0; t < N; ++t) {
        auto row = [&](const Tensor & x) { return g.constant(Tensor({1, x.cols()}, std::vector<double>(x.row(t).begin(), x.row(t).end()))); };
        std::vector<uint8_t> s1{seg[t]};
        MlstmState next;
        Tensor y = g.value(mlstm_scan(g, row(q), row(k), row(v), row(ig), row(lf), H, s1, t ? &st : nullptr, &next));
        st = next;
        for (int64_t c = 0; c < y.cols(); ++c) CHECK(y.at(0, c) == full.at(t, c));
    }
}

TEST_CASE("mlstm scan gradient") {
    std::mt19937_64 rng(3);
    const int64_t N = 7, H = 2, dk = 3, dv = 2;
    std::vector<uint8_t> seg{1, 0, 0, 1, 0, 0, 0};
    std::vector<Tensor> point{random_tensor({N, H * dk}, rng), random_tensor({N, H * dk}, rng),
                              random_tensor({N, H * dv}, rng), random_tensor({N, H}, rng, 1.5),
                              random_tensor({N, H}, rng)};
    auto build = [&](Graph & g, const std::vector<Var> & x) {
        Var lf = g.log_sigmoid(x[4]);
        return weighted_sum(g, mlstm_scan(g, x[0], x[1], x[2], x[3], lf, H, seg), 5);
    };
    CHECK(finite_difference_check(build, point).max_rel_error < 1e-6);
}

TEST_CASE("mlstm scan gradient in the normalizer-floor regime") {
    std::mt19937_64 rng(4);
    const int64_t N = 6, H = 1;
    std::vector<uint8_t> seg{1, 0, 0, 0, 0, 0};
    std::vector<Tensor> point{random_tensor({N, 2}, rng, 0.1), random_tensor({N, 2}, rng, 0.1),
                              random_tensor({N, 3}, rng), random_tensor({N, 1}, rng, 0.5, -10.0),
                              random_tensor({N, 1}, rng)};
    auto build = [&](Graph & g, const std::vector<Var> & x) {
        return weighted_sum(g, mlstm_scan(g, x[0], x[1], x[2], x[3], g.log_sigmoid(x[4]), H, seg), 6);
    };
    CHECK(finite_difference_check(build, point).max_rel_error < 1e-6);
}

TEST_CASE("attention matches the dense reference and its gradient") {
    std::mt19937_64 rng(5);
    const int64_t N = 7, H = 2, hd = 3;
    std::vector<int64_t> seg{0, 0, 0, 1, 1, 1, 1};
    std::vector<int64_t> lim{0, 1, 2, 3, 4, 5, 6};
    Tensor q = random_tensor({N, H * hd}, rng), k = random_tensor({N, H * hd}, rng), v = random_tensor({N, H * hd}, rng);
    Graph g;
    Tensor y = g.value(causal_attention(g, g.constant(q), g.constant(k), g.constant(v), H, seg, lim, seg));
    CHECK(max_abs_diff(y, naive_attention(q, k, v, H, seg)) < 1e-12);

    auto build = [&](Graph & gg, const std::vector<Var> & x) {
        return weighted_sum(gg, causal_attention(gg, x[0], x[1], x[2], H, seg, lim, seg), 7);
    };
    CHECK(finite_difference_check(build, {q, k, v}).max_rel_error < 1e-6);
}

TEST_CASE("rope preserves norms, depends on relative position, and has the right gradient") {
    std::mt19937_64 rng(6);
    Tensor x = random_tensor({1, 8}, rng), y = random_tensor({1, 8}, rng);
    auto at = [&](const Tensor & t, int64_t pos) {
        Graph g;
        return g.value(rope(g, g.constant(t), 2, {pos}, 10000.0));
    };
    auto dot = [](const Tensor & a, const Tensor & b) {
        double s = 0;
        for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
        return s;
    };
    CHECK(dot(at(x, 5), at(x, 5)) == doctest::Approx(dot(x, x)).epsilon(1e-12));
    CHECK(dot(at(x, 7), at(y, 3)) == doctest::Approx(dot(at(x, 14), at(y, 10))).epsilon(1e-10));
    CHECK(bit_equal(at(x, 0), x));
    auto build = [&](Graph & g, const std::vector<Var> & v) {
        return weighted_sum(g, rope(g, v[0], 2, {0, 3, 11}, 100.0), 8);
    };
    CHECK(finite_difference_check(build, {random_tensor({3, 8}, rng)}).max_rel_error < 1e-6);
}

TEST_CASE("layer gradients: mLSTM block, SwiGLU, attention block, boundary predictor") {
    const ModelConfig c = tiny_config();
    const ParamStore ps = jitter(init_bolmo(c, 11), 12);
    std::mt19937_64 rng(13);
    const SeqLayout layout = SeqLayout::from_lengths({3, 4});
    const auto seg = layout.seg_start();
    Tensor x = random_tensor({7, c.d}, rng);

    SUBCASE("mlstm block") {
        const auto names = names_with_prefix(ps, "encoder.layers.0.");
        REQUIRE(names.size() == 15);
        const double err = param_gradcheck(ps, names, x, [&](ParamBinder & b, Var in) {
            return mlstm_block(b, "encoder.layers.0.", in, seg, c, nullptr, nullptr);
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("swiglu") {
        const auto names = names_with_prefix(ps, "decoder.layers.0.ffn.");
        const double err = param_gradcheck(ps, names, x, [&](ParamBinder & b, Var in) {
            return swiglu(b, in, "decoder.layers.0.ffn.");
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("attention block") {
        auto names = names_with_prefix(ps, "global.");
        const double err = param_gradcheck(ps, names, x, [&](ParamBinder & b, Var in) {
            return global_forward(b, in, layout, c).h_hat;
        });
        CHECK(err < 1e-4);
    }
    SUBCASE("boundary predictor") {
        for (bool causal : {false, true}) {
            ModelConfig cc = c;
            cc.causal_boundary = causal;
            const double err = param_gradcheck(ps, {"boundary.wq", "boundary.wk"}, x, [&](ParamBinder & b, Var in) {
                return predict_boundaries(b, in, layout, cc).p;
            });
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("end-to-end gradient on a 6-byte input") {
    const ModelConfig c = tiny_config();
    const ParamStore ps = jitter(init_bolmo(c, 21), 22);
    const ByteSeq x{0, 'a', 'b', ' ', 'c', 0};
    const std::vector<TokenId> suffix{SubwordVocab::kBos, 'a', 'b', ' ', 'c', 0};
    const SeqLayout layout = SeqLayout::single(6);
    const BoundaryMask mask({1, 0, 1, 0, 1, 1});
    std::vector<std::string> names;
    for (const auto & [n, t] : ps) names.push_back(n);
    std::vector<Tensor> point;
    for (const auto & n : names) point.push_back(ps.get(n));
    auto build = [&](Graph & g, const std::vector<Var> & leaves) {
        ParamBinder b(g, ps);
        for (size_t i = 0; i < names.size(); ++i) b.bind(names[i], leaves[i]);
        ForwardOut o = forward_full(b, x, suffix, layout, c, &mask);
        return g.add(weighted_sum(g, o.logp, 1), weighted_sum(g, o.scores.p, 2));
    };
    CHECK(finite_difference_check(build, point).max_rel_error < 1e-4);
}

TEST_CASE("embed_bytes") {
    ModelConfig c = tiny_config();
    ParamStore ps = init_bolmo(c, 1);
    Graph g;
    const ByteSeq x{'a', 'b', 'a'};
    const std::vector<TokenId> suffix{'a', 300 - 41, 258};
    ParamBinder b(g, ps);
    Tensor e = g.value(embed_bytes(b, x, suffix));
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < c.d; ++j)
            CHECK(e.at(i, j) == ps.get("byte_embed.weight").at(x[i], j) + ps.get("subword_embed.weight").at(suffix[i], j));
    // same byte, different suffix
    CHECK(e.at(0, 0) != e.at(2, 0));
    ps.set("subword_embed.weight", Tensor(ps.get("subword_embed.weight").shape(), 0.0));
    Graph g2;
    ParamBinder b2(g2, ps);
    Tensor e2 = g2.value(embed_bytes(b2, x, suffix));
    for (int64_t j = 0; j < c.d; ++j) CHECK(e2.at(1, j) == ps.get("byte_embed.weight").at('b', j));
    const std::vector<TokenId> bad{'a', 'b', 9999};
    CHECK_THROWS_AS(embed_bytes(b2, x, bad), InputError);
}

TEST_CASE("local encoder: single step and causality") {
    ModelConfig c = tiny_config();
    const ParamStore ps = jitter(init_bolmo(c, 3), 4);
    std::mt19937_64 rng(5);
    Tensor e = random_tensor({6, c.d}, rng);
    auto run = [&](const Tensor & in) {
        Graph g;
        ParamBinder b(g, ps);
        return g.value(local_encode(b, g.constant(in), SeqLayout::single(in.rows()).seg_start(), c));
    };
    Tensor base = run(e);
    // a length-1 sequence sees no history
    Tensor first = run(Tensor({1, c.d}, std::vector<double>(e.row(0).begin(), e.row(0).end())));
    for (int64_t j = 0; j < c.d; ++j) CHECK(std::abs(first.at(0, j) - base.at(0, j)) < 1e-12);
    for (int64_t t = 0; t < 6; ++t) {
        Tensor p = e;
        p.at(t, 0) += 1.0;
        Tensor y = run(p);
        for (int64_t s = 0; s < t; ++s)
            for (int64_t j = 0; j < c.d; ++j) REQUIRE(y.at(s, j) == base.at(s, j));
        CHECK(y.at(t, 0) != base.at(t, 0));
    }
}

TEST_CASE("boundary predictor geometry") {
    ModelConfig c = tiny_config();
    ParamStore ps = init_bolmo(c, 1);
    Tensor eye({c.d, c.d});
    for (int64_t i = 0; i < c.d; ++i) eye.at(i, i) = 1.0;
    ps.set("boundary.wq", eye);
    ps.set("boundary.wk", eye);
    auto score = [&](std::vector<double> a, std::vector<double> b) {
        Graph g;
        ParamBinder bd(g, ps);
        std::vector<double> rows = b; // row 0 = k side, row 1 = q side
        rows.insert(rows.end(), a.begin(), a.end());
        Var e = g.constant(Tensor({2, c.d}, rows));
        return g.value(boundary_score_rows(bd, e, {1}, {0}))[0];
    };
    std::vector<double> u(c.d, 0.0), w(c.d, 0.0), neg(c.d, 0.0);
    u[0] = 1.0;
    neg[0] = -2.0;
    w[1] = 3.0;
    CHECK(std::abs(score(u, u)) < 1e-8);
    CHECK(std::abs(score(neg, u) - 1.0) < 1e-8);
    CHECK(score(w, u) == doctest::Approx(0.5).epsilon(1e-15));
    // zero vectors are guarded
    CHECK(std::isfinite(score(std::vector<double>(c.d, 0.0), u)));
}

TEST_CASE("predict_boundaries positions and forced flags") {
    ModelConfig c = tiny_config();
    ParamStore ps = init_bolmo(c, 1);
    const SeqLayout layout = SeqLayout::from_lengths({4, 2, 3});
    std::mt19937_64 rng(1);
    Graph g;
    ParamBinder b(g, ps);
    BoundaryScores s = predict_boundaries(b, g.constant(random_tensor({9, c.d}, rng)), layout, c);
    CHECK(s.positions == std::vector<int64_t>{1, 2, 7});
    BoundaryMask m = threshold_mask(Tensor({3}, 0.0), s.positions, layout, 0.5);
    CHECK(m.flags() == std::vector<uint8_t>{1, 0, 0, 1, 1, 1, 1, 0, 1});
    BoundaryMask all = threshold_mask(Tensor({3}, 0.9), s.positions, layout, 0.5);
    CHECK(all == BoundaryMask::all_true(9));
}

TEST_CASE("pool_last examples") {
    Graph g;
    Tensor r({4, 2}, std::vector<double>{0, 0, 1, 1, 2, 2, 3, 3});
    Var e = g.constant(r);
    Tensor h = g.value(pool_last(g, e, BoundaryMask({0, 1, 0, 1})));
    CHECK(h == Tensor({2, 2}, std::vector<double>{1, 1, 3, 3}));
    CHECK(g.value(pool_last(g, e, BoundaryMask::all_true(4))) == r);
    CHECK(g.value(pool_last(g, e, BoundaryMask({0, 0, 0, 1}))) == Tensor({1, 2}, std::vector<double>{3, 3}));
    CHECK_THROWS_AS(pool_last(g, e, BoundaryMask({0, 0, 0, 0})), InputError);
}

TEST_CASE("depool rule") {
    CHECK(depool_index(SeqLayout::single(4), BoundaryMask({0, 1, 0, 1})) == std::vector<int64_t>{-1, 0, 0, 1});
    CHECK(depool_index(SeqLayout::single(3), BoundaryMask::all_true(3)) == std::vector<int64_t>{0, 1, 2});
    CHECK(depool_index(SeqLayout::from_lengths({2, 2}), BoundaryMask({1, 1, 0, 1})) == std::vector<int64_t>{0, 1, -1, 2});

    ModelConfig c = tiny_config();
    ParamStore ps = jitter(init_bolmo(c, 2), 3);
    std::mt19937_64 rng(4);
    Graph g;
    ParamBinder b(g, ps);
    Tensor e = random_tensor({4, c.d}, rng), hh = random_tensor({2, c.d}, rng);
    Tensor z = g.value(depool(b, g.constant(e), g.constant(hh), {-1, -1, 0, 0}));
    const Tensor & W = ps.get("depool.weight");
    for (int64_t j = 0; j < 4; ++j)
        for (int64_t o = 0; o < c.d; ++o) {
            double s = 0;
            for (int64_t i = 0; i < c.d; ++i) s += e.at(j, i) * W.at(i, o);
            const double add = j < 2 ? ps.get("start_vector")[o] : hh.at(0, o);
            CHECK(z.at(j, o) == doctest::Approx(s + add).epsilon(1e-12));
        }
}

TEST_CASE("lm head is a normalized distribution over fused symbols") {
    ModelConfig c = tiny_config();
    ParamStore ps = jitter(init_bolmo(c, 5), 6);
    std::mt19937_64 rng(7);
    Graph g;
    ParamBinder b(g, ps);
    Tensor lp = g.value(lm_head_fused(b, g.constant(random_tensor({5, c.d}, rng)), c));
    REQUIRE(lp.cols() == 512);
    for (int64_t r = 0; r < 5; ++r) {
        double s = 0, byte_a = 0;
        for (int64_t k = 0; k < 512; ++k) s += std::exp(lp.at(r, k));
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        byte_a = std::exp(lp.at(r, fused_symbol('a', false))) + std::exp(lp.at(r, fused_symbol('a', true)));
        CHECK(byte_a > 0.0);
    }
    ps.set("lm_head.weight", Tensor(ps.get("lm_head.weight").shape(), 0.0));
    Graph g2;
    ParamBinder b2(g2, ps);
    Tensor u = g2.value(lm_head_fused(b2, g2.constant(random_tensor({2, c.d}, rng)), c));
    for (int64_t k = 0; k < u.numel(); ++k) CHECK(u[k] == doctest::Approx(std::log(1.0 / 512)).epsilon(1e-14));
}

TEST_CASE("fused symbols") {
    for (int s = 0; s < 512; ++s) CHECK(fused_symbol(fused_byte(s), fused_boundary(s)) == s);
    CHECK(fused_byte(256 + 65) == 65);
    CHECK(fused_boundary(256 + 65));
    const ByteSeq x{0, 'a', 'b', 0, 0, 'c', 0};
    const BoundaryMask m({1, 0, 1, 1, 1, 1, 1});
    auto t = fused_targets(x, m, SeqLayout::from_lengths({4, 3}));
    CHECK(t == std::vector<int32_t>{'a', 'b' + 256, 256, -1, 'c' + 256, 256, -1});
}

TEST_CASE("global model: causality over patches, probe at zero, documents isolated") {
    ModelConfig c = tiny_config();
    c.global.layers = 2;
    c.n_probe = 2;
    ParamStore ps = jitter(init_bolmo(c, 8), 9);
    std::mt19937_64 rng(10);
    Tensor h = random_tensor({6, c.d}, rng);
    const SeqLayout two = SeqLayout::from_lengths({3, 3});
    auto run = [&](const Tensor & in, const SeqLayout & l, int64_t probe) {
        Graph g;
        ParamBinder b(g, ps);
        GlobalOut o = global_forward(b, g.constant(in), l, c, probe);
        return std::pair{g.value(o.h_hat), g.value(*o.probe)};
    };
    auto [base, probe0] = run(h, SeqLayout::single(6), 0);
    CHECK(probe0 == h);
    for (int64_t k = 0; k < 6; ++k) {
        Tensor p = h;
        p.at(k, 1) += 0.5;
        Tensor y = run(p, SeqLayout::single(6), 0).first;
        for (int64_t j = 0; j < k; ++j)
            for (int64_t i = 0; i < c.d; ++i) REQUIRE(y.at(j, i) == base.at(j, i));
    }
    // second document does not see the first
    Tensor docs = run(h, two, 1).first;
    Tensor p = h;
    p.at(0, 0) += 1.0;
    Tensor docs2 = run(p, two, 1).first;
    for (int64_t j = 3; j < 6; ++j)
        for (int64_t i = 0; i < c.d; ++i) CHECK(docs.at(j, i) == docs2.at(j, i));
    // the probe after all layers is the pre-norm stream
    Graph g;
    ParamBinder b(g, ps);
    GlobalOut o = global_forward(b, g.constant(h), SeqLayout::single(6), c, 2);
    CHECK(bit_equal(g.value(*o.probe), g.value(global_prefix(b, g.constant(h), SeqLayout::single(6), c, 2))));
    CHECK_THROWS_AS(global_forward(b, g.constant(h), SeqLayout::single(6), c, 3), InputError);
}

TEST_CASE("global model with a cache equals the batch pass") {
    ModelConfig c = tiny_config();
    c.global.layers = 2;
    ParamStore ps = jitter(init_bolmo(c, 30), 31);
    std::mt19937_64 rng(32);
    Tensor h = random_tensor({5, c.d}, rng);
    Graph g;
    ParamBinder b(g, ps);
    Tensor full = g.value(global_forward(b, g.constant(h), SeqLayout::single(5), c).h_hat);
    KvCache cache;
    Tensor first({2, c.d}, std::vector<double>(h.data(), h.data() + 2 * c.d));
    Tensor out = g.value(global_forward(b, g.constant(first), SeqLayout::single(2), c, -1, &cache).h_hat);
    CHECK(cache.length == 2);
    for (int64_t i = 2; i < 5; ++i) {
        Tensor row({1, c.d}, std::vector<double>(h.row(i).begin(), h.row(i).end()));
        Tensor y = g.value(global_forward(b, g.constant(row), SeqLayout::single(1), c, -1, &cache).h_hat);
        for (int64_t j = 0; j < c.d; ++j) CHECK(y.at(0, j) == doctest::Approx(full.at(i, j)).epsilon(1e-12));
    }
    CHECK(cache.length == 5);
    CHECK(cache.k[0].rows() == 5);
}

TEST_CASE("full model has one byte of lookahead and depool is causal") {
    ModelConfig c = tiny_config();
    ParamStore ps = jitter(init_bolmo(c, 40), 41);
    std::mt19937_64 rng(42);
    ByteSeq x{0, 'h', 'e', 'l', 'l', 'o', ' ', 'w', 0};
    std::vector<TokenId> suffix(x.begin(), x.end());
    suffix[0] = SubwordVocab::kBos;
    const SeqLayout layout = SeqLayout::single(static_cast<int64_t>(x.size()));
    auto run = [&](const ByteSeq & in) {
        std::vector<TokenId> s(in.begin(), in.end());
        s[0] = SubwordVocab::kBos;
        Graph g;
        ParamBinder b(g, ps);
        ForwardOut o = forward_full(b, in, s, layout, c);
        return std::pair{g.value(o.logp), o.mask};
    };
    auto [base, base_mask] = run(x);
    for (size_t t = 2; t + 1 < x.size(); ++t) {
        ByteSeq p = x;
        p[t] = static_cast<uint8_t>(p[t] ^ 0x21);
        auto [y, m] = run(p);
        for (size_t j = 0; j + 1 < t; ++j)
            for (int64_t k = 0; k < 512; ++k)
                REQUIRE(std::abs(y.at(static_cast<int64_t>(j), k) - base.at(static_cast<int64_t>(j), k)) < 1e-10);
    }
    // with a fixed mask the model is strictly causal
    for (size_t t = 1; t + 1 < x.size(); ++t) {
        ByteSeq p = x;
        p[t] = static_cast<uint8_t>(p[t] ^ 0x21);
        std::vector<TokenId> s(p.begin(), p.end());
        s[0] = SubwordVocab::kBos;
        Graph g1, g2;
        ParamBinder b1(g1, ps), b2(g2, ps);
        Tensor y1 = g1.value(forward_full(b1, x, suffix, layout, c, &base_mask).z);
        Tensor y2 = g2.value(forward_full(b2, p, s, layout, c, &base_mask).z);
        for (size_t j = 0; j < t; ++j)
            for (int64_t k = 0; k < c.d; ++k) REQUIRE(y1.at(static_cast<int64_t>(j), k) == y2.at(static_cast<int64_t>(j), k));
    }
}

TEST_CASE("forward_full shapes and bit determinism") {
    ModelConfig c = tiny_config();
    ParamStore a = init_bolmo(c, 77), b = init_bolmo(c, 77);
    CHECK(a == b);
    CHECK(!(a == init_bolmo(c, 78)));
    const ByteSeq x{0, 'a', 'b', 'c', 'd', 0};
    const std::vector<TokenId> s{SubwordVocab::kBos, 'a', 'b', 'c', 'd', 0};
    const BoundaryMask m({1, 0, 1, 0, 1, 1});
    auto run = [&](const ParamStore & ps) {
        Graph g;
        ParamBinder bd(g, ps);
        ForwardOut o = forward_full(bd, x, s, SeqLayout::single(6), c, &m);
        CHECK(g.value(o.h).rows() == m.count());
        CHECK(g.value(o.logp).rows() == 6);
        return g.value(o.logp);
    };
    CHECK(bit_equal(run(a), run(b)));
}

TEST_CASE("gate pre-activations stay inside the soft cap") {
    Graph g;
    Var x = g.constant(Tensor::vector({-1e6, -40.0, 0.0, 40.0, 1e6}));
    Tensor y = g.value(g.softcap(x, 15.0));
    for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i]) <= 15.0);
    CHECK(std::abs(y[1]) < 15.0);
    CHECK(std::abs(y[3]) < 15.0);
}

TEST_CASE("parameter counts and config round trip") {
    ModelConfig c;
    ParamStore ps = init_bolmo(c, 1);
    const int64_t n = local_param_count(ps);
    CHECK(n == local_param_count(init_bolmo(c, 2)));
    CHECK(n > 0);
    const ParamStore t = init_teacher(c, 3);
    ParamStore bolmo = byteify(t, c, 4);
    CHECK(bit_equal(bolmo.get("subword_embed.weight"), t.get("tok_embed.weight")));
    CHECK(bit_equal(bolmo.get("global.layers.1.wq"), t.get("global.layers.1.wq")));
    CHECK(!bit_equal(byteify(t, c, 4, true).get("subword_embed.weight"), t.get("tok_embed.weight")));
    for (double v : bolmo.get("depool.weight").values()) CHECK(v == 0.0);

    ModelConfig d = c;
    d.d = 96;
    d.mlstm.gate_soft_cap = 12.5;
    d.causal_boundary = true;
    CHECK(config_from_kv(config_to_kv(d)) == d);
    CHECK_THROWS_AS(config_from_kv({{"model.nope", "1"}}), ConfigError);
    CHECK_THROWS_AS(config_from_kv({{"model.d", "abc"}}), ConfigError);
    ModelConfig bad = c;
    bad.n_probe = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.vocab_fused = 300;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("teacher forward is a causal LM") {
    ModelConfig c = tiny_config();
    ParamStore ps = jitter(init_teacher(c, 50), 51);
    const std::vector<TokenId> toks{256, 10, 20, 30};
    Graph g;
    ParamBinder b(g, ps);
    TeacherOut o = teacher_forward(b, toks, SeqLayout::single(4), c);
    const Tensor & lp = g.value(o.logp);
    CHECK(lp.cols() == c.subword_vocab);
    double s = 0;
    for (int64_t k = 0; k < lp.cols(); ++k) s += std::exp(lp.at(0, k));
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}
