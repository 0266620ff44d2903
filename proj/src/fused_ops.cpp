#include "bolmo/fused_ops.h"

#include "bolmo/errors.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace bolmo {

MlstmState MlstmState::empty(int64_t heads, int64_t qk_dim, int64_t v_dim) {
    MlstmState s;
    s.heads = heads;
    s.qk_dim = qk_dim;
    s.v_dim = v_dim;
    s.C.assign(static_cast<size_t>(heads * v_dim * qk_dim), 0.0);
    s.n.assign(static_cast<size_t>(heads * qk_dim), 0.0);
    s.m.assign(static_cast<size_t>(heads), 0.0);
    s.started.assign(static_cast<size_t>(heads), 0);
    return s;
}

namespace {

void require(bool ok, const std::string & what) {
    if (!ok) throw ShapeError(what);
}

} // namespace

Var mlstm_scan(Graph & g, Var qv, Var kv, Var vv, Var igv, Var lfv, int64_t H, std::span<const uint8_t> seg_start,
               const MlstmState * init, MlstmState * final) {
    const Tensor & Q = g.value(qv);
    const Tensor & K = g.value(kv);
    const Tensor & V = g.value(vv);
    const Tensor & IG = g.value(igv);
    const Tensor & LF = g.value(lfv);
    const int64_t N = Q.rows();
    require(H > 0 && Q.cols() % H == 0 && V.cols() % H == 0, "mlstm_scan: width not divisible by heads");
    const int64_t dk = Q.cols() / H, dv = V.cols() / H;
    require(K.rows() == N && V.rows() == N && IG.rows() == N && LF.rows() == N, "mlstm_scan: row mismatch");
    require(K.cols() == H * dk && IG.cols() == H && LF.cols() == H, "mlstm_scan: column mismatch");
    require(static_cast<int64_t>(seg_start.size()) == N, "mlstm_scan: seg_start length");

    MlstmState st = init ? *init : MlstmState::empty(H, dk, dv);
    require(st.heads == H && st.qk_dim == dk && st.v_dim == dv, "mlstm_scan: state shape");
    const int64_t cs = dv * dk;

    // Saved for backward: C_t, n_t and the per-step scalars.
    auto C0 = std::make_shared<std::vector<double>>(st.C);
    auto n0 = std::make_shared<std::vector<double>>(st.n);
    auto Cs = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H * cs));
    auto ns = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H * dk));
    auto fp = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H));
    auto ip = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H));
    auto den = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H));
    auto dots = std::make_shared<std::vector<double>>(static_cast<size_t>(N * H));
    auto dot_branch = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(N * H));

    const double qscale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor Y({N, H * dv});
    std::vector<double> qs(static_cast<size_t>(dk));
    for (int64_t t = 0; t < N; ++t) {
        for (int64_t h = 0; h < H; ++h) {
            double * C = st.C.data() + h * cs;
            double * n = st.n.data() + h * dk;
            const double * q = Q.data() + t * H * dk + h * dk;
            const double * k = K.data() + t * H * dk + h * dk;
            const double * v = V.data() + t * H * dv + h * dv;
            const double ig = IG.at(t, h), lf = LF.at(t, h);
            const bool fresh = seg_start[static_cast<size_t>(t)] || !st.started[static_cast<size_t>(h)];
            double m, f;
            if (fresh) {
                m = ig;
                f = 0.0;
            } else {
                m = std::max(lf + st.m[static_cast<size_t>(h)], ig);
                f = std::exp(lf + st.m[static_cast<size_t>(h)] - m);
            }
            const double i = std::exp(ig - m);
            for (int64_t a = 0; a < dv; ++a) {
                double * row = C + a * dk;
                const double iv = i * v[a];
                for (int64_t b = 0; b < dk; ++b) row[b] = f * row[b] + iv * k[b];
            }
            for (int64_t b = 0; b < dk; ++b) n[b] = f * n[b] + i * k[b];
            double dot = 0.0;
            for (int64_t b = 0; b < dk; ++b) {
                qs[b] = q[b] * qscale;
                dot += n[b] * qs[b];
            }
            const double floor = std::exp(-m);
            const bool use_dot = std::abs(dot) >= floor;
            const double d = use_dot ? std::abs(dot) : floor;
            double * y = Y.data() + t * H * dv + h * dv;
            for (int64_t a = 0; a < dv; ++a) {
                const double * row = C + a * dk;
                double s = 0.0;
                for (int64_t b = 0; b < dk; ++b) s += row[b] * qs[b];
                y[a] = s / d;
            }
            st.m[static_cast<size_t>(h)] = m;
            st.started[static_cast<size_t>(h)] = 1;
            const size_t th = static_cast<size_t>(t * H + h);
            std::copy(C, C + cs, Cs->data() + th * cs);
            std::copy(n, n + dk, ns->data() + th * dk);
            (*fp)[th] = f;
            (*ip)[th] = i;
            (*den)[th] = d;
            (*dots)[th] = dot;
            (*dot_branch)[th] = use_dot ? 1 : 0;
        }
    }
    if (final) *final = st;

    std::vector<uint8_t> seg(seg_start.begin(), seg_start.end());
    return g.make_node(std::move(Y), {qv, kv, vv, igv, lfv},
        [=, seg = std::move(seg)](Graph & gr, int32_t self) {
            const Tensor & dY = gr.grad_acc(Var{self});
            const Tensor & Qv = gr.value(qv);
            const Tensor & Kv = gr.value(kv);
            const Tensor & Vv = gr.value(vv);
            const Tensor & Yv = gr.value(Var{self});
            Tensor & dQ = gr.grad_acc(qv);
            Tensor & dK = gr.grad_acc(kv);
            Tensor & dV = gr.grad_acc(vv);
            Tensor & dIG = gr.grad_acc(igv);
            Tensor & dLF = gr.grad_acc(lfv);
            std::vector<double> dC(static_cast<size_t>(cs)), dn(static_cast<size_t>(dk)), qsv(static_cast<size_t>(dk)),
                dnum(static_cast<size_t>(dv));
            for (int64_t h = 0; h < H; ++h) {
                std::fill(dC.begin(), dC.end(), 0.0);
                std::fill(dn.begin(), dn.end(), 0.0);
                for (int64_t t = N - 1; t >= 0; --t) {
                    const size_t th = static_cast<size_t>(t * H + h);
                    const double * C = Cs->data() + th * cs;
                    const double * n = ns->data() + th * dk;
                    const double * q = Qv.data() + t * H * dk + h * dk;
                    const double * k = Kv.data() + t * H * dk + h * dk;
                    const double * v = Vv.data() + t * H * dv + h * dv;
                    const double * dy = dY.data() + t * H * dv + h * dv;
                    const double * y = Yv.data() + t * H * dv + h * dv;
                    const double d = (*den)[th], f = (*fp)[th], i = (*ip)[th];

                    double gy = 0.0;
                    for (int64_t a = 0; a < dv; ++a) {
                        dnum[a] = dy[a] / d;
                        gy += dy[a] * y[a];
                    }
                    const double ddot = (*dot_branch)[th] ? (-gy / d) * ((*dots)[th] >= 0 ? 1.0 : -1.0) : 0.0;
                    for (int64_t b = 0; b < dk; ++b) qsv[b] = q[b] * qscale;

                    // dq' = C^T dnum + ddot n
                    double * dq = dQ.data() + t * H * dk + h * dk;
                    for (int64_t b = 0; b < dk; ++b) {
                        double s = ddot * n[b];
                        for (int64_t a = 0; a < dv; ++a) s += C[a * dk + b] * dnum[a];
                        dq[b] += s * qscale;
                    }
                    for (int64_t a = 0; a < dv; ++a)
                        for (int64_t b = 0; b < dk; ++b) dC[a * dk + b] += dnum[a] * qsv[b];
                    for (int64_t b = 0; b < dk; ++b) dn[b] += ddot * qsv[b];

                    // through C_t = f C_{t-1} + i v k^T and n_t = f n_{t-1} + i k
                    double * dk_ = dK.data() + t * H * dk + h * dk;
                    double * dv_ = dV.data() + t * H * dv + h * dv;
                    double di = 0.0;
                    for (int64_t a = 0; a < dv; ++a) {
                        const double * row = dC.data() + a * dk;
                        double ck = 0.0;
                        for (int64_t b = 0; b < dk; ++b) ck += row[b] * k[b];
                        di += v[a] * ck;
                        dv_[a] += i * ck;
                    }
                    for (int64_t b = 0; b < dk; ++b) {
                        double s = dn[b];
                        for (int64_t a = 0; a < dv; ++a) s += dC[a * dk + b] * v[a];
                        dk_[b] += i * s;
                        di += dn[b] * k[b];
                    }
                    dIG.at(t, h) += di * i;

                    if (f != 0.0) {
                        const bool first = t == 0;
                        const double * Cp = first ? C0->data() + h * cs : Cs->data() + (th - H) * cs;
                        const double * np_ = first ? n0->data() + h * dk : ns->data() + (th - H) * dk;
                        double df = 0.0;
                        for (int64_t e = 0; e < cs; ++e) df += dC[e] * Cp[e];
                        for (int64_t b = 0; b < dk; ++b) df += dn[b] * np_[b];
                        dLF.at(t, h) += df * f;
                    }
                    if (seg[static_cast<size_t>(t)] || f == 0.0) {
                        std::fill(dC.begin(), dC.end(), 0.0);
                        std::fill(dn.begin(), dn.end(), 0.0);
                    } else {
                        for (auto & e : dC) e *= f;
                        for (auto & e : dn) e *= f;
                    }
                }
            }
        },
        "mlstm_scan");
}

Var rope(Graph & g, Var xv, int64_t heads, const std::vector<int64_t> & positions, double theta) {
    const Tensor & X = g.value(xv);
    const int64_t N = X.rows(), W = X.cols();
    require(heads > 0 && W % heads == 0 && (W / heads) % 2 == 0, "rope: head_dim must be even");
    require(static_cast<int64_t>(positions.size()) == N, "rope: positions length");
    const int64_t hd = W / heads;
    auto cs = std::make_shared<std::vector<double>>(static_cast<size_t>(N * hd));
    for (int64_t r = 0; r < N; ++r)
        for (int64_t i = 0; i < hd / 2; ++i) {
            const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double ang = static_cast<double>(positions[static_cast<size_t>(r)]) * freq;
            (*cs)[static_cast<size_t>(r * hd + 2 * i)] = std::cos(ang);
            (*cs)[static_cast<size_t>(r * hd + 2 * i + 1)] = std::sin(ang);
        }
    Tensor Y(X.shape());
    for (int64_t r = 0; r < N; ++r)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < hd / 2; ++i) {
                const double c = (*cs)[static_cast<size_t>(r * hd + 2 * i)], s = (*cs)[static_cast<size_t>(r * hd + 2 * i + 1)];
                const int64_t o = r * W + h * hd + 2 * i;
                const double x0 = X[o], x1 = X[o + 1];
                Y[o] = x0 * c - x1 * s;
                Y[o + 1] = x0 * s + x1 * c;
            }
    return g.make_node(std::move(Y), {xv}, [=](Graph & gr, int32_t self) {
        const Tensor & dY = gr.grad_acc(Var{self});
        Tensor & dX = gr.grad_acc(xv);
        for (int64_t r = 0; r < N; ++r)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t i = 0; i < hd / 2; ++i) {
                    const double c = (*cs)[static_cast<size_t>(r * hd + 2 * i)], s = (*cs)[static_cast<size_t>(r * hd + 2 * i + 1)];
                    const int64_t o = r * W + h * hd + 2 * i;
                    dX[o] += dY[o] * c + dY[o + 1] * s;
                    dX[o + 1] += -dY[o] * s + dY[o + 1] * c;
                }
    }, "rope");
}

Var causal_attention(Graph & g, Var qv, Var kv, Var vv, int64_t H, const std::vector<int64_t> & q_seg,
                     const std::vector<int64_t> & q_key_limit, const std::vector<int64_t> & kv_seg) {
    const Tensor & Q = g.value(qv);
    const Tensor & K = g.value(kv);
    const Tensor & V = g.value(vv);
    const int64_t NQ = Q.rows(), NK = K.rows(), W = Q.cols();
    require(H > 0 && W % H == 0, "attention: width not divisible by heads");
    require(K.cols() == W && V.cols() == W && V.rows() == NK, "attention: q/k/v shapes");
    require(static_cast<int64_t>(q_seg.size()) == NQ && static_cast<int64_t>(q_key_limit.size()) == NQ &&
                static_cast<int64_t>(kv_seg.size()) == NK,
            "attention: index lengths");
    const int64_t hd = W / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    // first key index of each query's segment
    auto lo = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(NQ));
    for (int64_t i = 0; i < NQ; ++i) {
        const int64_t lim = q_key_limit[static_cast<size_t>(i)];
        require(lim >= 0 && lim < NK && kv_seg[static_cast<size_t>(lim)] == q_seg[static_cast<size_t>(i)],
                "attention: query " + std::to_string(i) + " has no visible key");
        int64_t j = lim;
        while (j > 0 && kv_seg[static_cast<size_t>(j - 1)] == q_seg[static_cast<size_t>(i)]) --j;
        (*lo)[static_cast<size_t>(i)] = j;
    }
    auto off = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(NQ + 1), 0);
    for (int64_t i = 0; i < NQ; ++i)
        (*off)[static_cast<size_t>(i + 1)] = (*off)[static_cast<size_t>(i)] + q_key_limit[static_cast<size_t>(i)] - (*lo)[static_cast<size_t>(i)] + 1;
    const int64_t total = (*off)[static_cast<size_t>(NQ)];
    auto P = std::make_shared<std::vector<double>>(static_cast<size_t>(total * H));
    auto lim = std::make_shared<std::vector<int64_t>>(q_key_limit);

    Tensor Y({NQ, W});
    for (int64_t i = 0; i < NQ; ++i) {
        const int64_t j0 = (*lo)[static_cast<size_t>(i)], j1 = q_key_limit[static_cast<size_t>(i)];
        for (int64_t h = 0; h < H; ++h) {
            const double * q = Q.data() + i * W + h * hd;
            double * p = P->data() + ((*off)[static_cast<size_t>(i)]) * H + h * (j1 - j0 + 1);
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t j = j0; j <= j1; ++j) {
                const double * k = K.data() + j * W + h * hd;
                double s = 0.0;
                for (int64_t c = 0; c < hd; ++c) s += q[c] * k[c];
                p[j - j0] = s * scale;
                mx = std::max(mx, p[j - j0]);
            }
            double z = 0.0;
            for (int64_t j = j0; j <= j1; ++j) z += (p[j - j0] = std::exp(p[j - j0] - mx));
            double * y = Y.data() + i * W + h * hd;
            for (int64_t j = j0; j <= j1; ++j) {
                p[j - j0] /= z;
                const double * v = V.data() + j * W + h * hd;
                for (int64_t c = 0; c < hd; ++c) y[c] += p[j - j0] * v[c];
            }
        }
    }
    return g.make_node(std::move(Y), {qv, kv, vv}, [=](Graph & gr, int32_t self) {
        const Tensor & dY = gr.grad_acc(Var{self});
        const Tensor & Qv = gr.value(qv);
        const Tensor & Kv = gr.value(kv);
        const Tensor & Vv = gr.value(vv);
        Tensor & dQ = gr.grad_acc(qv);
        Tensor & dK = gr.grad_acc(kv);
        Tensor & dV = gr.grad_acc(vv);
        std::vector<double> dp;
        for (int64_t i = 0; i < NQ; ++i) {
            const int64_t j0 = (*lo)[static_cast<size_t>(i)], j1 = (*lim)[static_cast<size_t>(i)];
            const int64_t L = j1 - j0 + 1;
            dp.resize(static_cast<size_t>(L));
            for (int64_t h = 0; h < H; ++h) {
                const double * p = P->data() + ((*off)[static_cast<size_t>(i)]) * H + h * L;
                const double * dy = dY.data() + i * W + h * hd;
                const double * q = Qv.data() + i * W + h * hd;
                double * dq = dQ.data() + i * W + h * hd;
                double pdp = 0.0;
                for (int64_t j = j0; j <= j1; ++j) {
                    const double * v = Vv.data() + j * W + h * hd;
                    double * dv = dV.data() + j * W + h * hd;
                    double s = 0.0;
                    for (int64_t c = 0; c < hd; ++c) {
                        s += dy[c] * v[c];
                        dv[c] += p[j - j0] * dy[c];
                    }
                    dp[j - j0] = s;
                    pdp += p[j - j0] * s;
                }
                for (int64_t j = j0; j <= j1; ++j) {
                    const double ds = p[j - j0] * (dp[j - j0] - pdp) * scale;
                    const double * k = Kv.data() + j * W + h * hd;
                    double * dk = dK.data() + j * W + h * hd;
                    for (int64_t c = 0; c < hd; ++c) {
                        dq[c] += ds * k[c];
                        dk[c] += ds * q[c];
                    }
                }
            }
        }
    }, "attention");
}

} // namespace bolmo
