#include "bolmo/graph.h"

#include "bolmo/errors.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace bolmo {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor & t) { return MapC(t.data(), t.rows(), t.cols()); }
Map as_mat(Tensor & t) { return Map(t.data(), t.rows(), t.cols()); }

void check_finite(const Tensor & t, const char * op) {
    if (!t.all_finite()) {
        throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
}

Shape rows_shape(const Tensor & t) { return Shape{t.rows()}; }

double stable_log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

// ---------------------------------------------------------------------------
// core

const Graph::Node & Graph::node(Var v) const {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw Error("invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

Graph::Node & Graph::node(Var v) {
    if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size()) throw Error("invalid Var handle");
    return nodes_[static_cast<size_t>(v.id)];
}

Var Graph::constant(Tensor value) { return leaf(std::move(value), false); }

Var Graph::leaf(Tensor value, bool requires_grad) {
    check_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

const Tensor & Graph::value(Var v) const { return node(v).value; }
bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }
bool Graph::has_grad(Var v) const { return node(v).grad_ready; }

Tensor Graph::grad(Var v) const {
    const Node & n = node(v);
    if (n.grad_ready) return n.grad;
    return Tensor(n.value.shape(), 0.0);
}

Tensor & Graph::grad_acc(Var v) {
    Node & n = node(v);
    if (!n.grad_ready) {
        n.grad = Tensor(n.value.shape(), 0.0);
        n.grad_ready = true;
    }
    return n.grad;
}

Var Graph::make_node(Tensor value, const std::vector<Var> & parents, BackwardFn fn, const char * op_name) {
    check_finite(value, op_name);
    Node n;
    n.value = std::move(value);
    n.op = op_name;
    for (Var p : parents) {
        n.parents.push_back(p.id);
        if (node(p).requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

void Graph::backward(Var loss) {
    if (node(loss).value.numel() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(node(loss).value.shape()));
    }
    for (Node & n : nodes_) {
        n.grad_ready = false;
        n.grad = Tensor();
    }
    if (!node(loss).requires_grad) return;
    grad_acc(loss)[0] = 1.0;
    for (int32_t id = loss.id; id >= 0; --id) {
        Node & n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_ready || !n.backward) continue;
        // backward fns never append nodes, so `n` stays valid
        n.backward(*this, id);
        check_finite(nodes_[static_cast<size_t>(id)].grad, nodes_[static_cast<size_t>(id)].op);
    }
}

// ---------------------------------------------------------------------------
// linear algebra

Var Graph::matmul(Var a, Var b) {
    const Tensor & A = value(a);
    const Tensor & B = value(b);
    if (B.rank() != 2 || A.cols() != B.dim(0)) {
        throw ShapeError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    }
    Shape out_shape = A.shape();
    if (out_shape.empty()) out_shape = {1};
    out_shape.back() = B.dim(1);
    Tensor Y(out_shape);
    as_mat(Y).noalias() = as_mat(A) * as_mat(B);
    return make_node(std::move(Y), {a, b}, [a, b](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        if (g.requires_grad(a)) {
            Tensor & dA = g.grad_acc(a);
            as_mat(dA).noalias() += as_mat(dY) * as_mat(g.value(b)).transpose();
        }
        if (g.requires_grad(b)) {
            Tensor & dB = g.grad_acc(b);
            as_mat(dB).noalias() += as_mat(g.value(a)).transpose() * as_mat(dY);
        }
    }, "matmul");
}

Var Graph::transpose(Var a) {
    const Tensor & A = value(a);
    if (A.rank() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(A.shape()));
    Tensor Y({A.dim(1), A.dim(0)});
    as_mat(Y) = as_mat(A).transpose();
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        as_mat(g.grad_acc(a)) += as_mat(g.grad_acc(Var{self})).transpose();
    }, "transpose");
}

// ---------------------------------------------------------------------------
// elementwise binary

Var Graph::binary_broadcast(Var a, Var b, int kind) {
    const Tensor & A = value(a);
    const Tensor & B = value(b);
    const bool same = A.shape() == B.shape();
    const bool trailing = !same && B.rank() == 1 && B.numel() == A.cols();
    if (!same && !trailing) {
        throw ShapeError("elementwise op: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    }
    const int64_t n = A.numel();
    const int64_t c = A.cols();
    Tensor Y(A.shape());
    for (int64_t i = 0; i < n; ++i) {
        const double x = A[i];
        const double y = B[same ? i : i % c];
        Y[i] = kind == 0 ? x + y : kind == 1 ? x - y : x * y;
    }
    static constexpr const char * names[] = {"add", "sub", "mul"};
    return make_node(std::move(Y), {a, b}, [a, b, kind, same, n, c](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        if (g.requires_grad(a)) {
            Tensor & dA = g.grad_acc(a);
            if (kind == 2) {
                const Tensor & B = g.value(b);
                for (int64_t i = 0; i < n; ++i) dA[i] += dY[i] * B[same ? i : i % c];
            } else {
                for (int64_t i = 0; i < n; ++i) dA[i] += dY[i];
            }
        }
        if (g.requires_grad(b)) {
            Tensor & dB = g.grad_acc(b);
            const double sign = kind == 1 ? -1.0 : 1.0;
            if (kind == 2) {
                const Tensor & A = g.value(a);
                for (int64_t i = 0; i < n; ++i) dB[same ? i : i % c] += dY[i] * A[i];
            } else {
                for (int64_t i = 0; i < n; ++i) dB[same ? i : i % c] += sign * dY[i];
            }
        }
    }, names[kind]);
}

Var Graph::add(Var a, Var b) { return binary_broadcast(a, b, 0); }
Var Graph::sub(Var a, Var b) { return binary_broadcast(a, b, 1); }
Var Graph::mul(Var a, Var b) { return binary_broadcast(a, b, 2); }

// ---------------------------------------------------------------------------
// elementwise unary

// f(x) -> y; df(x, y) -> dy/dx
template <class F, class D> Var Graph::unary(Var a, F f, D df, const char * name) {
    const Tensor & A = value(a);
    Tensor Y(A.shape());
    for (int64_t i = 0; i < A.numel(); ++i) Y[i] = f(A[i]);
    return make_node(std::move(Y), {a}, [a, df](Graph & g, int32_t self) {
        const Tensor & X = g.value(a);
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t i = 0; i < X.numel(); ++i) dX[i] += dY[i] * df(X[i], Yv[i]);
    }, name);
}

Var Graph::scale(Var a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; }, "scale");
}

Var Graph::shift(Var a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; }, "shift");
}

Var Graph::square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Var Graph::exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Var Graph::log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Var Graph::sigmoid(Var a) {
    return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Var Graph::log_sigmoid(Var a) {
    return unary(a, stable_log_sigmoid, [](double x, double) { return 1.0 - stable_sigmoid(x); }, "log_sigmoid");
}

Var Graph::tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

Var Graph::silu(Var a) {
    return unary(a, [](double x) { return x * stable_sigmoid(x); },
                 [](double x, double) {
                     const double s = stable_sigmoid(x);
                     return s * (1.0 + x * (1.0 - s));
                 },
                 "silu");
}

Var Graph::softcap(Var a, double cap) {
    return unary(a, [cap](double x) { return cap * std::tanh(x / cap); },
                 [cap](double, double y) {
                     const double t = y / cap;
                     return 1.0 - t * t;
                 },
                 "softcap");
}

Var Graph::log1mexp(Var a) {
    // log(1 - e^x) via the two-branch form; derivative is -1 / expm1(-x)
    return unary(a,
                 [](double x) { return x > -0.6931471805599453 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x)); },
                 [](double x, double) { return -1.0 / std::expm1(-x); }, "log1mexp");
}

Var Graph::clamp(Var a, double lo, double hi) {
    return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                 [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; }, "clamp");
}

Var Graph::stop_gradient(Var a) {
    Node n;
    n.value = value(a);
    n.op = "stop_gradient";
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

// ---------------------------------------------------------------------------
// row-wise

Var Graph::softmax(Var a) {
    const Tensor & A = value(a);
    Tensor Y(A.shape());
    const int64_t R = A.rows(), C = A.cols();
    for (int64_t r = 0; r < R; ++r) {
        auto x = A.row(r);
        auto y = Y.row(r);
        const double m = *std::max_element(x.begin(), x.end());
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) s += (y[c] = std::exp(x[c] - m));
        for (int64_t c = 0; c < C; ++c) y[c] /= s;
    }
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < Yv.rows(); ++r) {
            auto y = Yv.row(r);
            auto dy = dY.row(r);
            auto dx = dX.row(r);
            double dot = 0.0;
            for (size_t c = 0; c < y.size(); ++c) dot += y[c] * dy[c];
            for (size_t c = 0; c < y.size(); ++c) dx[c] += y[c] * (dy[c] - dot);
        }
    }, "softmax");
}

Var Graph::log_softmax(Var a) {
    const Tensor & A = value(a);
    Tensor Y(A.shape());
    for (int64_t r = 0; r < A.rows(); ++r) {
        auto x = A.row(r);
        auto y = Y.row(r);
        const double m = *std::max_element(x.begin(), x.end());
        double s = 0.0;
        for (double v : x) s += std::exp(v - m);
        const double lse = m + std::log(s);
        for (size_t c = 0; c < x.size(); ++c) y[c] = x[c] - lse;
    }
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < Yv.rows(); ++r) {
            auto y = Yv.row(r);
            auto dy = dY.row(r);
            auto dx = dX.row(r);
            double s = 0.0;
            for (double v : dy) s += v;
            for (size_t c = 0; c < y.size(); ++c) dx[c] += dy[c] - std::exp(y[c]) * s;
        }
    }, "log_softmax");
}

Var Graph::logsumexp(Var a) {
    const Tensor & A = value(a);
    Tensor Y(rows_shape(A));
    for (int64_t r = 0; r < A.rows(); ++r) {
        auto x = A.row(r);
        const double m = *std::max_element(x.begin(), x.end());
        double s = 0.0;
        for (double v : x) s += std::exp(v - m);
        Y[r] = m + std::log(s);
    }
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & X = g.value(a);
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < X.rows(); ++r) {
            auto x = X.row(r);
            auto dx = dX.row(r);
            for (size_t c = 0; c < x.size(); ++c) dx[c] += dY[r] * std::exp(x[c] - Yv[r]);
        }
    }, "logsumexp");
}

Var Graph::rmsnorm(Var a, double eps) {
    const Tensor & A = value(a);
    const int64_t R = A.rows(), C = A.cols();
    Tensor Y(A.shape());
    Tensor inv({R});
    for (int64_t r = 0; r < R; ++r) {
        auto x = A.row(r);
        double ms = 0.0;
        for (double v : x) ms += v * v;
        ms /= static_cast<double>(C);
        inv[r] = 1.0 / std::sqrt(ms + eps);
        auto y = Y.row(r);
        for (int64_t c = 0; c < C; ++c) y[c] = x[c] * inv[r];
    }
    return make_node(std::move(Y), {a}, [a, inv = std::move(inv)](Graph & g, int32_t self) {
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        const int64_t C = Yv.cols();
        for (int64_t r = 0; r < Yv.rows(); ++r) {
            auto y = Yv.row(r);
            auto dy = dY.row(r);
            auto dx = dX.row(r);
            double dot = 0.0;
            for (int64_t c = 0; c < C; ++c) dot += dy[c] * y[c];
            dot /= static_cast<double>(C);
            for (int64_t c = 0; c < C; ++c) dx[c] += inv[r] * (dy[c] - y[c] * dot);
        }
    }, "rmsnorm");
}

Var Graph::sum_cols(Var a) {
    const Tensor & A = value(a);
    Tensor Y(rows_shape(A));
    for (int64_t r = 0; r < A.rows(); ++r) {
        double s = 0.0;
        for (double v : A.row(r)) s += v;
        Y[r] = s;
    }
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < dX.rows(); ++r) {
            for (double & v : dX.row(r)) v += dY[r];
        }
    }, "sum_cols");
}

Var Graph::row_norm(Var a) {
    const Tensor & A = value(a);
    Tensor Y(rows_shape(A));
    for (int64_t r = 0; r < A.rows(); ++r) {
        double s = 0.0;
        for (double v : A.row(r)) s += v * v;
        Y[r] = std::sqrt(s);
    }
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & X = g.value(a);
        const Tensor & Yv = g.value(Var{self});
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < X.rows(); ++r) {
            if (Yv[r] == 0.0) continue; // subgradient 0 at the origin
            auto x = X.row(r);
            auto dx = dX.row(r);
            const double k = dY[r] / Yv[r];
            for (size_t c = 0; c < x.size(); ++c) dx[c] += k * x[c];
        }
    }, "row_norm");
}

Var Graph::cosine_rows(Var a, Var b, double eps) {
    const Tensor & A = value(a);
    const Tensor & B = value(b);
    if (A.shape() != B.shape()) {
        throw ShapeError("cosine_rows: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
    }
    const int64_t R = A.rows();
    Tensor Y({R});
    Tensor stats({R, 3}); // dot, |a|, |b|
    for (int64_t r = 0; r < R; ++r) {
        auto x = A.row(r);
        auto y = B.row(r);
        double dot = 0, na = 0, nb = 0;
        for (size_t c = 0; c < x.size(); ++c) {
            dot += x[c] * y[c];
            na += x[c] * x[c];
            nb += y[c] * y[c];
        }
        na = std::sqrt(na);
        nb = std::sqrt(nb);
        stats.at(r, 0) = dot;
        stats.at(r, 1) = na;
        stats.at(r, 2) = nb;
        Y[r] = dot / (na * nb + eps);
    }
    return make_node(std::move(Y), {a, b}, [a, b, eps, stats = std::move(stats)](Graph & g, int32_t self) {
        const Tensor & A = g.value(a);
        const Tensor & B = g.value(b);
        const Tensor & dY = g.grad_acc(Var{self});
        const bool ga = g.requires_grad(a), gb = g.requires_grad(b);
        Tensor * dA = ga ? &g.grad_acc(a) : nullptr;
        Tensor * dB = gb ? &g.grad_acc(b) : nullptr;
        for (int64_t r = 0; r < A.rows(); ++r) {
            const double dot = stats.at(r, 0), na = stats.at(r, 1), nb = stats.at(r, 2);
            const double den = na * nb + eps;
            auto x = A.row(r);
            auto y = B.row(r);
            // d/dx [dot / (|x||y| + eps)] = y/den - dot * |y| * x / (|x| den^2)
            if (dA) {
                auto dx = dA->row(r);
                const double k2 = na > 0 ? dot * nb / (na * den * den) : 0.0;
                for (size_t c = 0; c < x.size(); ++c) dx[c] += dY[r] * (y[c] / den - k2 * x[c]);
            }
            if (dB) {
                auto dy = dB->row(r);
                const double k2 = nb > 0 ? dot * na / (nb * den * den) : 0.0;
                for (size_t c = 0; c < y.size(); ++c) dy[c] += dY[r] * (x[c] / den - k2 * y[c]);
            }
        }
    }, "cosine_rows");
}

// ---------------------------------------------------------------------------
// reductions

Var Graph::sum(Var a) {
    const Tensor & A = value(a);
    double s = 0.0;
    for (double v : A.values()) s += v;
    return make_node(Tensor::scalar(s), {a}, [a](Graph & g, int32_t self) {
        const double d = g.grad_acc(Var{self})[0];
        for (double & v : g.grad_acc(a).values()) v += d;
    }, "sum");
}

Var Graph::mean(Var a) {
    const Tensor & A = value(a);
    if (A.numel() == 0) throw ShapeError("mean of empty tensor");
    double s = 0.0;
    for (double v : A.values()) s += v;
    const double n = static_cast<double>(A.numel());
    return make_node(Tensor::scalar(s / n), {a}, [a, n](Graph & g, int32_t self) {
        const double d = g.grad_acc(Var{self})[0] / n;
        for (double & v : g.grad_acc(a).values()) v += d;
    }, "mean");
}

Var Graph::segment_sum(Var a, const std::vector<int64_t> & groups, int64_t n_groups) {
    const Tensor & A = value(a);
    if (static_cast<int64_t>(groups.size()) != A.numel()) {
        throw ShapeError("segment_sum: " + std::to_string(groups.size()) + " group ids for " + std::to_string(A.numel()) + " values");
    }
    Tensor Y({n_groups});
    for (size_t i = 0; i < groups.size(); ++i) {
        if (groups[i] < 0) continue;
        if (groups[i] >= n_groups) throw ShapeError("segment_sum: group id out of range");
        Y[groups[i]] += A[static_cast<int64_t>(i)];
    }
    return make_node(std::move(Y), {a}, [a, groups](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (size_t i = 0; i < groups.size(); ++i) {
            if (groups[i] >= 0) dX[static_cast<int64_t>(i)] += dY[groups[i]];
        }
    }, "segment_sum");
}

// ---------------------------------------------------------------------------
// cumulative ops along axis 0

Var Graph::cumsum(Var a) {
    const Tensor & A = value(a);
    const int64_t R = A.rank() <= 1 ? A.numel() : A.dim(0);
    const int64_t C = R == 0 ? 0 : A.numel() / R;
    Tensor Y(A.shape());
    for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (int64_t r = 0; r < R; ++r) Y[r * C + c] = (s += A[r * C + c]);
    }
    return make_node(std::move(Y), {a}, [a, R, C](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (int64_t r = R - 1; r >= 0; --r) dX[r * C + c] += (s += dY[r * C + c]);
        }
    }, "cumsum");
}

Var Graph::cummax(Var a) {
    const Tensor & A = value(a);
    const int64_t R = A.rank() <= 1 ? A.numel() : A.dim(0);
    const int64_t C = R == 0 ? 0 : A.numel() / R;
    Tensor Y(A.shape());
    std::vector<int64_t> arg(static_cast<size_t>(A.numel()));
    for (int64_t c = 0; c < C; ++c) {
        double m = -std::numeric_limits<double>::infinity();
        int64_t am = 0;
        for (int64_t r = 0; r < R; ++r) {
            const double v = A[r * C + c];
            if (v > m) {
                m = v;
                am = r;
            }
            Y[r * C + c] = m;
            arg[static_cast<size_t>(r * C + c)] = am * C + c;
        }
    }
    return make_node(std::move(Y), {a}, [a, arg = std::move(arg)](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (size_t i = 0; i < arg.size(); ++i) dX[arg[i]] += dY[static_cast<int64_t>(i)];
    }, "cummax");
}

// ---------------------------------------------------------------------------
// shape / indexing

Var Graph::reshape(Var a, Shape shape) {
    Tensor Y = value(a).reshaped(std::move(shape));
    return make_node(std::move(Y), {a}, [a](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t i = 0; i < dX.numel(); ++i) dX[i] += dY[i];
    }, "reshape");
}

Var Graph::slice_rows(Var a, int64_t begin, int64_t end) {
    const Tensor & A = value(a);
    if (A.rank() != 2 || begin < 0 || end < begin || end > A.dim(0)) {
        throw ShapeError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(A.shape()));
    }
    const int64_t C = A.cols();
    Tensor Y({end - begin, C}, std::vector<double>(A.data() + begin * C, A.data() + end * C));
    return make_node(std::move(Y), {a}, [a, begin, C](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t i = 0; i < dY.numel(); ++i) dX[begin * C + i] += dY[i];
    }, "slice_rows");
}

Var Graph::slice_cols(Var a, int64_t begin, int64_t end) {
    const Tensor & A = value(a);
    if (begin < 0 || end < begin || end > A.cols()) {
        throw ShapeError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(A.shape()));
    }
    const int64_t R = A.rows(), C = A.cols(), W = end - begin;
    Shape s = A.shape();
    s.back() = W;
    Tensor Y(s);
    for (int64_t r = 0; r < R; ++r) {
        for (int64_t c = 0; c < W; ++c) Y[r * W + c] = A[r * C + begin + c];
    }
    return make_node(std::move(Y), {a}, [a, begin, R, C, W](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (int64_t r = 0; r < R; ++r) {
            for (int64_t c = 0; c < W; ++c) dX[r * C + begin + c] += dY[r * W + c];
        }
    }, "slice_cols");
}

Var Graph::concat_rows(const std::vector<Var> & parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const int64_t C = value(parts[0]).cols();
    int64_t R = 0;
    for (Var p : parts) {
        if (value(p).cols() != C) throw ShapeError("concat_rows: column mismatch");
        R += value(p).rows();
    }
    Tensor Y({R, C});
    int64_t off = 0;
    for (Var p : parts) {
        const Tensor & P = value(p);
        std::copy(P.data(), P.data() + P.numel(), Y.data() + off);
        off += P.numel();
    }
    return make_node(std::move(Y), parts, [parts](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        int64_t off = 0;
        for (Var p : parts) {
            const int64_t n = g.value(p).numel();
            if (g.requires_grad(p)) {
                Tensor & dP = g.grad_acc(p);
                for (int64_t i = 0; i < n; ++i) dP[i] += dY[off + i];
            }
            off += n;
        }
    }, "concat_rows");
}

Var Graph::concat_cols(const std::vector<Var> & parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int64_t R = value(parts[0]).rows();
    int64_t C = 0;
    for (Var p : parts) {
        if (value(p).rows() != R) throw ShapeError("concat_cols: row mismatch");
        C += value(p).cols();
    }
    Tensor Y({R, C});
    int64_t coff = 0;
    for (Var p : parts) {
        const Tensor & P = value(p);
        const int64_t W = P.cols();
        for (int64_t r = 0; r < R; ++r) {
            for (int64_t c = 0; c < W; ++c) Y[r * C + coff + c] = P[r * W + c];
        }
        coff += W;
    }
    return make_node(std::move(Y), parts, [parts, R, C](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        int64_t coff = 0;
        for (Var p : parts) {
            const int64_t W = g.value(p).cols();
            if (g.requires_grad(p)) {
                Tensor & dP = g.grad_acc(p);
                for (int64_t r = 0; r < R; ++r) {
                    for (int64_t c = 0; c < W; ++c) dP[r * W + c] += dY[r * C + coff + c];
                }
            }
            coff += W;
        }
    }, "concat_cols");
}

Var Graph::gather_rows(Var table, const std::vector<int64_t> & index) {
    const Tensor & T = value(table);
    const int64_t R = T.rows(), C = T.cols();
    Tensor Y({static_cast<int64_t>(index.size()), C});
    for (size_t i = 0; i < index.size(); ++i) {
        const int64_t r = index[i];
        if (r < 0 || r >= R) {
            throw ShapeError("gather_rows: index " + std::to_string(r) + " out of range for " + std::to_string(R) + " rows");
        }
        std::copy(T.data() + r * C, T.data() + (r + 1) * C, Y.data() + static_cast<int64_t>(i) * C);
    }
    return make_node(std::move(Y), {table}, [table, index, C](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dT = g.grad_acc(table);
        for (size_t i = 0; i < index.size(); ++i) {
            const double * src = dY.data() + static_cast<int64_t>(i) * C;
            double * dst = dT.data() + index[i] * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    }, "gather_rows");
}

Var Graph::pick(Var a, const std::vector<int64_t> & rows, const std::vector<int64_t> & cols) {
    const Tensor & A = value(a);
    if (rows.size() != cols.size()) throw ShapeError("pick: rows/cols length mismatch");
    const int64_t R = A.rows(), C = A.cols();
    Tensor Y({static_cast<int64_t>(rows.size())});
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= R || cols[i] < 0 || cols[i] >= C) throw ShapeError("pick: index out of range");
        Y[static_cast<int64_t>(i)] = A[rows[i] * C + cols[i]];
    }
    return make_node(std::move(Y), {a}, [a, rows, cols, C](Graph & g, int32_t self) {
        const Tensor & dY = g.grad_acc(Var{self});
        Tensor & dX = g.grad_acc(a);
        for (size_t i = 0; i < rows.size(); ++i) dX[rows[i] * C + cols[i]] += dY[static_cast<int64_t>(i)];
    }, "pick");
}

} // namespace bolmo
