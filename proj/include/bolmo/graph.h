#pragma once

#include "bolmo/tensor.h"

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

namespace bolmo {

// Handle to a node in a Graph.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode autodiff tape.
//
// Every op evaluates eagerly when it is recorded, so building the graph for a
// set of bound inputs *is* the forward evaluation. Nodes are appended in
// topological order; backward() walks them in reverse. Values are checked for
// NaN/Inf after every op and a NumericError is thrown instead of propagating.
//
// Broadcasting is limited to trailing-axis expansion: the right operand of an
// elementwise binary op may have shape [cols] against a left operand whose
// last extent is cols. Anything else needs an explicit reshape.
//
// A Graph is single-threaded; distinct graphs share nothing and may be used
// concurrently.
class Graph {
public:
    using BackwardFn = std::function<void(Graph &, int32_t self)>;

    Var constant(Tensor value);
    Var leaf(Tensor value, bool requires_grad = true);

    const Tensor & value(Var v) const;
    bool requires_grad(Var v) const;
    bool has_grad(Var v) const;
    // Gradient of the last backward() w.r.t. v; a zero tensor if v was unreached.
    Tensor grad(Var v) const;
    // Mutable gradient accumulator, allocated on first use. For op backward fns.
    Tensor & grad_acc(Var v);
    size_t size() const { return nodes_.size(); }

    void backward(Var loss);

    // Extension point for fused ops: records a node whose gradient is
    // propagated by `fn`. `fn` reads grad_acc(self) and accumulates into the
    // parents' grad_acc. Returns a node without grad tracking if no parent
    // requires grad.
    Var make_node(Tensor value, const std::vector<Var> & parents, BackwardFn fn, const char * op_name);

    // --- linear algebra ---
    Var matmul(Var a, Var b);  // [.., k] x [k, n] -> [.., n]
    Var transpose(Var a);      // 2-D only

    // --- elementwise binary (b may be [cols] for trailing-axis expansion) ---
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);

    // --- elementwise unary ---
    Var scale(Var a, double s);
    Var shift(Var a, double s);
    Var neg(Var a) { return scale(a, -1.0); }
    Var square(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var sigmoid(Var a);
    Var log_sigmoid(Var a);
    Var tanh(Var a);
    Var silu(Var a);
    Var softcap(Var a, double cap);   // cap * tanh(a / cap)
    Var log1mexp(Var a);              // log(1 - exp(a)), a < 0
    Var clamp(Var a, double lo, double hi);
    Var stop_gradient(Var a);

    // --- row-wise (last axis) ---
    Var softmax(Var a);
    Var log_softmax(Var a);
    Var logsumexp(Var a);             // -> [rows]
    Var rmsnorm(Var a, double eps = 1e-12);
    Var sum_cols(Var a);              // -> [rows]
    Var row_norm(Var a);              // L2 norm of each row -> [rows]
    Var cosine_rows(Var a, Var b, double eps = 1e-8); // -> [rows]

    // --- reductions ---
    Var sum(Var a);
    Var mean(Var a);
    // out[g] = sum of a[i] with groups[i] == g; groups[i] < 0 drops element i.
    Var segment_sum(Var a, const std::vector<int64_t> & groups, int64_t n_groups);

    // --- cumulative along axis 0 ---
    Var cumsum(Var a);
    Var cummax(Var a);

    // --- shape / indexing ---
    Var reshape(Var a, Shape shape);
    Var slice_rows(Var a, int64_t begin, int64_t end);
    Var slice_cols(Var a, int64_t begin, int64_t end);
    Var concat_rows(const std::vector<Var> & parts);
    Var concat_cols(const std::vector<Var> & parts);
    Var gather_rows(Var table, const std::vector<int64_t> & index);
    // out[i] = a[rows[i], cols[i]] -> [k]
    Var pick(Var a, const std::vector<int64_t> & rows, const std::vector<int64_t> & cols);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_ready = false;
        std::vector<int32_t> parents;
        BackwardFn backward;
        const char * op = "";
    };

    const Node & node(Var v) const;
    Node & node(Var v);
    Var binary_broadcast(Var a, Var b, int kind);
    template <class F, class D> Var unary(Var a, F f, D df, const char * name);

    std::deque<Node> nodes_; // deque: references to values stay valid as nodes are appended
};

} // namespace bolmo
