#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "klink/tensor.hpp"

namespace klink {

/// A named trainable tensor. Gradients from Graph::backward accumulate into grad.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T(0));
    }
};

template <typename T>
class Graph;

/// Handle to one recorded node. Cheap to copy; valid while its Graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return graph->value(id); }
    const Shape& shape() const { return value().shape(); }
    T item() const { return value().item(); }
};

/// Recorded operation graph for one forward pass. Nodes are appended in
/// creation order, which is also a topological order, so backward is a
/// single reverse sweep.
template <typename T>
class Graph {
   public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        std::string op;
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value, std::string op = "constant") {
        require_finite(op, value);
        nodes_.push_back(Node{std::move(op), std::move(value), {}, {}, {}, nullptr});
        return {this, nodes_.size() - 1};
    }

    /// Leaf for a trainable parameter. Repeated calls for the same parameter
    /// return the same node so its gradient is accumulated once.
    Var<T> param(Parameter<T>& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
        require_finite("param " + p.name, p.value);
        nodes_.push_back(Node{"param:" + p.name, p.value, {}, {}, {}, &p});
        param_nodes_.emplace(&p, nodes_.size() - 1);
        return {this, nodes_.size() - 1};
    }

    Var<T> record(std::string op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn backward) {
        require_finite(op, value);
        nodes_.push_back(Node{std::move(op), std::move(value), {}, std::move(inputs), std::move(backward), nullptr});
        return {this, nodes_.size() - 1};
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    const Node& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const { return nodes_.size(); }

    /// Output gradient of a node (valid inside a backward callback).
    const Tensor<T>& grad_out(std::size_t id) const { return nodes_[id].grad; }

    /// Gradient accumulator of an input node, allocated on first use.
    Tensor<T>& grad_in(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    /// Reverse sweep from a scalar loss. Every parameter leaf recorded on the
    /// graph gets its gradient added into Parameter::grad (zero when the loss
    /// does not depend on it). Returns the number of nodes visited.
    std::size_t backward(Var<T> loss) {
        if (loss.graph != this) throw Error("backward: loss belongs to another graph");
        if (value(loss.id).numel() != 1) {
            throw Error("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
        }
        std::vector<char> reachable(nodes_.size(), 0);
        reachable[loss.id] = 1;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            if (!reachable[id]) continue;
            for (auto in : nodes_[id].inputs) reachable[in] = 1;
        }
        for (auto& n : nodes_) n.grad = Tensor<T>();
        grad_in(loss.id).fill(T(1));

        std::size_t visited = 0;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            if (!reachable[id]) continue;
            ++visited;
            auto& n = nodes_[id];
            if (n.backward && !n.grad.empty()) n.backward(*this, id);
        }
        for (auto& n : nodes_) {
            if (!n.param) continue;
            if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
            if (n.grad.empty()) continue;
            auto& g = n.param->grad;
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        return visited;
    }

   private:
    static void require_finite(const std::string& op, const Tensor<T>& t) {
        if (!t.all_finite()) throw Error(op + ": non-finite values");
    }

    std::deque<Node> nodes_;  // stable addresses: value() references survive later ops
    std::map<const Parameter<T>*, std::size_t> param_nodes_;
};

namespace detail {

template <typename T>
[[noreturn]] void shape_error(const std::string& op, std::initializer_list<Shape> shapes) {
    std::string msg = op + ": incompatible shapes";
    for (const auto& s : shapes) msg += " " + shape_str(s);
    throw Error(msg);
}

template <typename T>
void require_rank(const std::string& op, const Tensor<T>& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw Error(op + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(t.shape()));
    }
}

template <typename T>
void require_same_graph(const Var<T>& a, const Var<T>& b) {
    if (a.graph != b.graph) throw Error("op inputs belong to different graphs");
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T s = 0;
            for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
            c[i * n + j] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            if (av == T(0)) continue;
            const T* brow = b + i * n;
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
        detail::shape_error<T>("matmul", {A.shape(), B.shape()});
    }
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor<T> out(Shape{m, n});
    detail::gemm_nn(A.data(), B.data(), out.data(), m, k, n);
    return a.graph->record("matmul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, k, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        detail::gemm_nt(go.data(), g.value(ib).data(), g.grad_in(ia).data(), m, n, k);
        detail::gemm_tn(g.value(ia).data(), go.data(), g.grad_in(ib).data(), m, k, n);
    });
}

/// [m,k] x [n,k]^T -> [m,n]; pairwise dot products of rows.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(1)) {
        detail::shape_error<T>("matmul_nt", {A.shape(), B.shape()});
    }
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
    Tensor<T> out(Shape{m, n});
    detail::gemm_nt(A.data(), B.data(), out.data(), m, k, n);
    return a.graph->record("matmul_nt", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, k, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        // dA = dC B, dB = dC^T A
        detail::gemm_nn(go.data(), g.value(ib).data(), g.grad_in(ia).data(), m, n, k);
        detail::gemm_tn(go.data(), g.value(ia).data(), g.grad_in(ib).data(), m, n, k);
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    const auto& A = a.value();
    detail::require_rank("transpose", A, 2);
    const std::size_t m = A.dim(0), n = A.dim(1);
    Tensor<T> out(Shape{n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
    return a.graph->record("transpose", std::move(out), {a.id}, [ia = a.id, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += go.at(j, i);
    });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    if (a.shape() != b.shape()) detail::shape_error<T>("add", {a.shape(), b.shape()});
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += B[i];
    return a.graph->record("add", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        for (auto id : {ia, ib}) {
            auto& gi = g.grad_in(id);
            for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    if (a.shape() != b.shape()) detail::shape_error<T>("sub", {a.shape(), b.shape()});
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
    return a.graph->record("sub", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& ga = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        auto& gb = g.grad_in(ib);
        for (std::size_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    if (a.shape() != b.shape()) detail::shape_error<T>("mul", {a.shape(), b.shape()});
    Tensor<T> out = a.value();
    const auto& B = b.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
    return a.graph->record("mul", std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& A = g.value(ia);
        const auto& B = g.value(ib);
        auto& ga = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * B[i];
        auto& gb = g.grad_in(ib);
        for (std::size_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * A[i];
    });
}

/// Adds a length-n bias to every row of an [m,n] matrix.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    detail::require_same_graph(a, bias);
    const auto& A = a.value();
    const auto& b = bias.value();
    if (A.rank() != 2 || b.numel() != A.dim(1)) detail::shape_error<T>("add_bias", {A.shape(), b.shape()});
    const std::size_t m = A.dim(0), n = A.dim(1);
    Tensor<T> out = A;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += b[j];
    return a.graph->record("add_bias", std::move(out), {a.id, bias.id}, [ia = a.id, ib = bias.id, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& ga = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        auto& gb = g.grad_in(ib);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += go.at(i, j);
    });
}

/// Adds the same length-n row to every row, broadcasting a [n] tensor; the
/// broadcast row is itself differentiable. Alias of add_bias kept for intent.
template <typename T>
Var<T> broadcast_rows(Var<T> row, std::size_t m) {
    const auto& r = row.value();
    const std::size_t n = r.numel();
    Tensor<T> out(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = r[j];
    return row.graph->record("broadcast_rows", std::move(out), {row.id}, [ir = row.id, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gr = g.grad_in(ir);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gr[j] += go.at(i, j);
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= c;
    return a.graph->record("scale", std::move(out), {a.id}, [ia = a.id, c](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += c * go[i];
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return a.graph->record("relu", std::move(out), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& x = g.value(ia);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i)
            if (x[i] > T(0)) gi[i] += go[i];
    });
}

template <typename T>
Var<T> exp(Var<T> a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = std::exp(v);
    return a.graph->record("exp", std::move(out), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& y = g.value(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += go[i] * y[i];
    });
}

template <typename T>
Var<T> log(Var<T> a) {
    const auto& x = a.value();
    for (auto v : x.values()) {
        if (!(v > T(0))) throw Error("log: non-positive input " + std::to_string(static_cast<double>(v)));
    }
    Tensor<T> out = x;
    for (auto& v : out.values()) v = std::log(v);
    return a.graph->record("log", std::move(out), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& x = g.value(ia);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += go[i] / x[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and row-wise normalizations

template <typename T>
Var<T> sum(Var<T> a) {
    T s = 0;
    for (auto v : a.value().values()) s += v;
    return a.graph->record("sum", Tensor<T>::scalar(s), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const T go = g.grad_out(self)[0];
        for (auto& v : g.grad_in(ia).values()) v += go;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const T n = static_cast<T>(a.value().numel());
    T s = 0;
    for (auto v : a.value().values()) s += v;
    return a.graph->record("mean", Tensor<T>::scalar(s / n), {a.id}, [ia = a.id, n](Graph<T>& g, std::size_t self) {
        const T go = g.grad_out(self)[0] / n;
        for (auto& v : g.grad_in(ia).values()) v += go;
    });
}

/// Mean of squared differences, a scalar.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    detail::require_same_graph(a, b);
    if (a.shape() != b.shape()) detail::shape_error<T>("mse", {a.shape(), b.shape()});
    const auto& A = a.value();
    const auto& B = b.value();
    const T n = static_cast<T>(A.numel());
    T s = 0;
    for (std::size_t i = 0; i < A.numel(); ++i) {
        const T d = A[i] - B[i];
        s += d * d;
    }
    return a.graph->record("mse", Tensor<T>::scalar(s / n), {a.id, b.id}, [ia = a.id, ib = b.id, n](Graph<T>& g, std::size_t self) {
        const T go = g.grad_out(self)[0];
        const auto& A = g.value(ia);
        const auto& B = g.value(ib);
        auto& ga = g.grad_in(ia);
        auto& gb = g.grad_in(ib);
        for (std::size_t i = 0; i < A.numel(); ++i) {
            const T d = T(2) * (A[i] - B[i]) / n * go;
            ga[i] += d;
            gb[i] -= d;
        }
    });
}

/// Row-wise softmax with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> a) {
    const auto& X = a.value();
    detail::require_rank("softmax_rows", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor<T> out(X.shape());
    for (std::size_t i = 0; i < m; ++i) {
        T mx = X.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, X.at(i, j));
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += (out.at(i, j) = std::exp(X.at(i, j) - mx));
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= s;
    }
    return a.graph->record("softmax_rows", std::move(out), {a.id}, [ia = a.id, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& y = g.value(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += go.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += y.at(i, j) * (go.at(i, j) - dot);
        }
    });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> a) {
    const auto& X = a.value();
    detail::require_rank("log_softmax_rows", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor<T> out(X.shape());
    for (std::size_t i = 0; i < m; ++i) {
        T mx = X.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, X.at(i, j));
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(X.at(i, j) - mx);
        const T lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = X.at(i, j) - lse;
    }
    return a.graph->record("log_softmax_rows", std::move(out), {a.id}, [ia = a.id, m, n](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& y = g.value(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i) {
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) s += go.at(i, j);
            for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += go.at(i, j) - std::exp(y.at(i, j)) * s;
        }
    });
}

/// Per-row log-sum-exp -> [m]. With exclude_diagonal the entry (i,i) is left
/// out of row i (requires a square input with at least two columns).
template <typename T>
Var<T> logsumexp_rows(Var<T> a, bool exclude_diagonal = false) {
    const auto& X = a.value();
    detail::require_rank("logsumexp_rows", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    if (exclude_diagonal && (m != n || n < 2)) {
        throw Error("logsumexp_rows: diagonal exclusion needs a square matrix with >= 2 columns, got " +
                    shape_str(X.shape()));
    }
    auto skip = [exclude_diagonal](std::size_t i, std::size_t j) { return exclude_diagonal && i == j; };
    Tensor<T> out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!skip(i, j)) mx = std::max(mx, X.at(i, j));
        T s = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (!skip(i, j)) s += std::exp(X.at(i, j) - mx);
        out[i] = mx + std::log(s);
    }
    return a.graph->record("logsumexp_rows", std::move(out), {a.id}, [ia = a.id, m, n, skip](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& y = g.value(self);
        const auto& X = g.value(ia);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (!skip(i, j)) gi.at(i, j) += go[i] * std::exp(X.at(i, j) - y[i]);
    });
}

/// Scales each row to unit Euclidean length. Rows of all zeros are rejected.
template <typename T>
Var<T> l2_normalize_rows(Var<T> a) {
    const auto& X = a.value();
    detail::require_rank("l2_normalize_rows", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    Tensor<T> out = X;
    std::vector<T> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += X.at(i, j) * X.at(i, j);
        if (!(s > T(0))) throw Error("l2_normalize_rows: zero row " + std::to_string(i));
        norms[i] = std::sqrt(s);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= norms[i];
    }
    return a.graph->record("l2_normalize_rows", std::move(out), {a.id}, [ia = a.id, m, n, norms = std::move(norms)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        const auto& y = g.value(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += go.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j) gi.at(i, j) += (go.at(i, j) - y.at(i, j) * dot) / norms[i];
        }
    });
}

/// Diagonal of a square matrix -> [m].
template <typename T>
Var<T> diagonal(Var<T> a) {
    const auto& X = a.value();
    if (X.rank() != 2 || X.dim(0) != X.dim(1)) detail::shape_error<T>("diagonal", {X.shape()});
    const std::size_t m = X.dim(0);
    Tensor<T> out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) out[i] = X.at(i, i);
    return a.graph->record("diagonal", std::move(out), {a.id}, [ia = a.id, m](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < m; ++i) gi.at(i, i) += go[i];
    });
}

/// Picks one column per row: out[i] = a[i, index[i]].
template <typename T>
Var<T> pick(Var<T> a, std::vector<std::size_t> index) {
    const auto& X = a.value();
    detail::require_rank("pick", X, 2);
    const std::size_t m = X.dim(0), n = X.dim(1);
    if (index.size() != m) throw Error("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(m) + " rows");
    Tensor<T> out(Shape{m});
    for (std::size_t i = 0; i < m; ++i) {
        if (index[i] >= n) throw Error("pick: index " + std::to_string(index[i]) + " out of range " + std::to_string(n));
        out[i] = X.at(i, index[i]);
    }
    return a.graph->record("pick", std::move(out), {a.id}, [ia = a.id, index = std::move(index)](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < index.size(); ++i) gi.at(i, index[i]) += go[i];
    });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return a.graph->record("reshape", std::move(out), {a.id}, [ia = a.id](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
    });
}

/// Sub-block [r0, r0+nr) x [c0, c0+nc) of a matrix.
template <typename T>
Var<T> slice(Var<T> a, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
    const auto& X = a.value();
    detail::require_rank("slice", X, 2);
    if (nr == 0 || nc == 0 || r0 + nr > X.dim(0) || c0 + nc > X.dim(1)) {
        throw Error("slice: block [" + std::to_string(r0) + "+" + std::to_string(nr) + ", " + std::to_string(c0) + "+" +
                    std::to_string(nc) + "] outside " + shape_str(X.shape()));
    }
    Tensor<T> out(Shape{nr, nc});
    for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t j = 0; j < nc; ++j) out.at(i, j) = X.at(r0 + i, c0 + j);
    return a.graph->record("slice", std::move(out), {a.id}, [ia = a.id, r0, nr, c0, nc](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        auto& gi = g.grad_in(ia);
        for (std::size_t i = 0; i < nr; ++i)
            for (std::size_t j = 0; j < nc; ++j) gi.at(r0 + i, c0 + j) += go.at(i, j);
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t r0, std::size_t nr) {
    return slice(a, r0, nr, 0, a.value().dim(1));
}

/// Concatenates matrices along axis 0 (rows) or 1 (columns).
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw Error("concat: no inputs");
    if (axis > 1) throw Error("concat: axis must be 0 or 1");
    Graph<T>* graph = parts[0].graph;
    std::vector<std::size_t> ids;
    std::size_t rows = 0, cols = 0;
    for (const auto& p : parts) {
        detail::require_same_graph(parts[0], p);
        const auto& X = p.value();
        detail::require_rank("concat", X, 2);
        ids.push_back(p.id);
        if (axis == 0) {
            if (cols && X.dim(1) != cols) detail::shape_error<T>("concat", {parts[0].shape(), X.shape()});
            cols = X.dim(1);
            rows += X.dim(0);
        } else {
            if (rows && X.dim(0) != rows) detail::shape_error<T>("concat", {parts[0].shape(), X.shape()});
            rows = X.dim(0);
            cols += X.dim(1);
        }
    }
    Tensor<T> out(Shape{rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto& X = p.value();
        for (std::size_t i = 0; i < X.dim(0); ++i)
            for (std::size_t j = 0; j < X.dim(1); ++j) {
                if (axis == 0) out.at(offset + i, j) = X.at(i, j);
                else out.at(i, offset + j) = X.at(i, j);
            }
        offset += axis == 0 ? X.dim(0) : X.dim(1);
    }
    return graph->record("concat", std::move(out), ids, [ids, axis](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        std::size_t offset = 0;
        for (auto id : ids) {
            auto& gi = g.grad_in(id);
            const std::size_t r = gi.dim(0), c = gi.dim(1);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gi.at(i, j) += axis == 0 ? go.at(offset + i, j) : go.at(i, offset + j);
            offset += axis == 0 ? r : c;
        }
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
    return concat(std::span<const Var<T>>(parts), axis);
}

template <typename T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
    std::vector<Var<T>> v(parts);
    return concat(std::span<const Var<T>>(v), axis);
}

/// Elementwise sum of equally-shaped inputs.
template <typename T>
Var<T> add_n(std::span<const Var<T>> parts) {
    if (parts.empty()) throw Error("add_n: no inputs");
    Tensor<T> out = parts[0].value();
    std::vector<std::size_t> ids{parts[0].id};
    for (std::size_t k = 1; k < parts.size(); ++k) {
        detail::require_same_graph(parts[0], parts[k]);
        const auto& X = parts[k].value();
        if (X.shape() != out.shape()) detail::shape_error<T>("add_n", {out.shape(), X.shape()});
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += X[i];
        ids.push_back(parts[k].id);
    }
    return parts[0].graph->record("add_n", std::move(out), ids, [ids](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_out(self);
        for (auto id : ids) {
            auto& gi = g.grad_in(id);
            for (std::size_t i = 0; i < go.numel(); ++i) gi[i] += go[i];
        }
    });
}

template <typename T>
Var<T> add_n(const std::vector<Var<T>>& parts) {
    return add_n(std::span<const Var<T>>(parts));
}

template <typename T>
Var<T> mean_n(std::span<const Var<T>> parts) {
    return scale(add_n(parts), T(1) / static_cast<T>(parts.size()));
}

template <typename T>
Var<T> mean_n(const std::vector<Var<T>>& parts) {
    return mean_n(std::span<const Var<T>>(parts));
}

}  // namespace klink
