#include <doctest.h>

#include "bolmo/errors.h"
#include "bolmo/merge_tools.h"
#include "bolmo/training.h"
#include "fixtures.h"
#include "test_util.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

using namespace bolmo;
using bolmo::testing::jitter;
using bolmo::testing::random_tensor;
using bolmo::testing::tiny_config;

namespace {

// Small multiplicative perturbation keeps post and base within a factor of 2.
ParamStore nudge(ParamStore ps, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.2, 0.2);
    for (auto & [n, t] : ps)
        for (auto & x : t.values()) x *= 1.0 + u(rng);
    return ps;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
    const size_t n = a.size();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-30) break;
        for (size_t p = 0; p < n; ++p)
            for (size_t q = p + 1; q < n; ++q) {
                if (a[p][q] == 0.0) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (size_t i = 0; i < n; ++i) ev[i] = a[i][i];
    std::sort(ev.begin(), ev.end(), std::greater<>());
    return ev;
}

} // namespace

TEST_CASE("task arithmetic: identities") {
    const ModelConfig c = tiny_config();
    const ParamStore base = jitter(init_teacher(c, 1), 2);
    const ParamStore post = nudge(base, 3);
    const ParamStore bolmo = byteify(jitter(init_teacher(c, 4), 5), c, 6);

    CHECK(task_arithmetic_merge(bolmo, base, base) == bolmo);

    const ParamStore same_global = byteify(base, c, 7);
    const ParamStore merged = task_arithmetic_merge(same_global, base, post);
    for (const auto & [name, t] : merged) {
        if (is_global_param(name)) CHECK(bit_equal(t, post.get(name)));
        else CHECK(bit_equal(t, same_global.get(name)));
    }

    ParamStore a, b, p;
    a.set("global.w", Tensor::vector({3.0}));
    a.set("byte_embed.weight", Tensor::vector({1.0}));
    b.set("global.w", Tensor::vector({2.0}));
    b.set("tok_embed.weight", Tensor::vector({9.0}));
    p.set("global.w", Tensor::vector({5.0}));
    p.set("tok_embed.weight", Tensor::vector({8.0}));
    const ParamStore m = task_arithmetic_merge(a, b, p);
    CHECK(m.get("global.w")[0] == 6.0);
    CHECK(m.get("byte_embed.weight")[0] == 1.0);
    CHECK(!m.contains("tok_embed.weight"));
    CHECK(weight_delta(b, p).size() == 1);
}

TEST_CASE("task arithmetic: locality and inversion") {
    const ModelConfig c = tiny_config();
    const ParamStore base = jitter(init_teacher(c, 10), 11);
    const ParamStore post = jitter(base, 12);
    const ParamStore bolmo = byteify(jitter(init_teacher(c, 13), 14), c, 15);
    const ParamStore delta = weight_delta(base, post);
    const ParamStore merged = apply_delta(bolmo, delta);
    int64_t changed = 0;
    for (const auto & [name, t] : bolmo) {
        if (!is_global_param(name)) CHECK(bit_equal(merged.get(name), t));
        else changed += !bit_equal(merged.get(name), t);
    }
    CHECK(changed == static_cast<int64_t>(delta.size()));

    const ParamStore restored = apply_delta(merged, delta, -1.0);
    int64_t exact = 0, total = 0;
    for (const auto & [name, t] : bolmo) {
        const Tensor & r = restored.get(name);
        const Tensor & mm = merged.get(name);
        for (int64_t i = 0; i < t.numel(); ++i) {
            // one rounding of the merged value at most
            const double ulp = std::numeric_limits<double>::epsilon() * std::max(std::abs(mm[i]), std::abs(t[i]));
            CHECK(std::abs(r[i] - t[i]) <= ulp);
            exact += r[i] == t[i];
            ++total;
        }
    }
    MESSAGE("bit-exact after inversion: " << exact << " / " << total);
}

TEST_CASE("task arithmetic: mismatches throw") {
    const ModelConfig c = tiny_config();
    const ParamStore base = init_teacher(c, 1);
    ParamStore other = base;
    other.erase("global.final_norm");
    CHECK_THROWS_AS(weight_delta(base, other), InputError);
    ParamStore reshaped = base;
    reshaped.set("global.final_norm", Tensor({c.d + 1}, 1.0));
    CHECK_THROWS_AS(weight_delta(base, reshaped), ShapeError);
    ModelConfig wide = c;
    wide.global.ffn_hidden = 10;
    const ParamStore bolmo_wide = init_bolmo(wide, 2);
    CHECK_THROWS_AS(task_arithmetic_merge(bolmo_wide, base, base), ShapeError);
    ParamStore bad;
    bad.set("byte_embed.weight", Tensor({256, c.d}));
    CHECK_THROWS_AS(apply_delta(init_bolmo(c, 3), bad), InputError);
}

TEST_CASE("reset embeddings") {
    const ModelConfig c = tiny_config();
    const auto corpus = synthetic_corpus(SyntheticKind::Base, 12, 1);
    const SubwordVocab vocab = train_bpe(corpus, c.subword_vocab);
    const auto docs = encode_corpus(corpus, vocab, 64);
    const ParamStore base = jitter(init_teacher(c, 1), 2);
    const ResetCheck same = reset_embeddings_check(base, base, docs, c);
    CHECK(same.ratio == 1.0);

    TrainConfig cfg;
    cfg.steps = 10;
    cfg.warmup_steps = 2;
    cfg.batch_bytes = 256;
    cfg.lr = 1e-2;
    const ParamStore post = train_teacher(base, docs, c, cfg);
    const ParamStore reset = reset_embeddings(base, post);
    for (const auto & [name, t] : reset)
        CHECK(bit_equal(t, is_global_param(name) ? post.get(name) : base.get(name)));
    const ResetCheck r = reset_embeddings_check(base, post, docs, c);
    CHECK(std::isfinite(r.ratio));
    CHECK(r.ratio == doctest::Approx(r.reset_nats / r.posttrained_nats));
    CHECK(r.ratio > 0.9);
}

TEST_CASE("spectrum report") {
    Tensor rank1({4, 3});
    const double u[4] = {1, -2, 0.5, 3}, v[3] = {2, 1, -1};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) rank1.at(i, j) = u[i] * v[j];
    const Spectrum r1 = spectrum_report(rank1);
    CHECK(r1.ratio[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r1.ratio[1] < 1e-28);
    CHECK(r1.cumulative.back() == doctest::Approx(1.0).epsilon(1e-14));

    Tensor eye({5, 5});
    for (int i = 0; i < 5; ++i) eye.at(i, i) = 1.0;
    for (double x : spectrum_report(eye).ratio) CHECK(x == doctest::Approx(0.2).epsilon(1e-14));

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor m = random_tensor({12, 7}, rng);
        std::vector<std::vector<double>> gram(7, std::vector<double>(7, 0.0));
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 7; ++j)
                for (int k = 0; k < 12; ++k) gram[i][j] += m.at(k, i) * m.at(k, j);
        const auto ev = jacobi_eigenvalues(gram);
        double total = 0.0;
        for (double e : ev) total += e;
        const Spectrum s = spectrum_report(m);
        REQUIRE(s.ratio.size() == 7);
        for (size_t i = 0; i < 7; ++i) {
            CHECK(std::abs(s.ratio[i] - ev[i] / total) < 1e-8);
            CHECK(std::abs(s.singular_values[i] - std::sqrt(ev[i])) < 1e-8);
        }
    }
    std::ostringstream os;
    write_spectrum(os, r1);
    CHECK(os.str().rfind("index\tsigma\tratio\tcumulative\n0\t", 0) == 0);
    CHECK_THROWS_AS(spectrum_report(Tensor({0, 3})), InputError);
    CHECK_THROWS_AS(spectrum_report(Tensor({2, 2})), NumericError);
}
