#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every primitive in execution order; backward() walks the
// records in reverse, so each node is visited exactly once and fan-out
// gradients accumulate additively. Tapes are single-threaded; build one per
// batch (or per chunk of a batch) and discard it after backward().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tlstm/error.hpp"

namespace tlstm::ad {

struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Tensor(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) throw ShapeError("tensor data length does not match its shape");
    }

    [[nodiscard]] std::size_t size() const { return data.size(); }
    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    [[nodiscard]] bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    [[nodiscard]] std::string shape_str() const { return std::to_string(rows) + "x" + std::to_string(cols); }
};

/// Handle to a node on a Tape.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
};

enum class Op { leaf, matmul, add, subtract, hadamard, scalar_mul, sigmoid, tanh, mse_reduce };

class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false) {
        check_finite(value, "leaf");
        return push(Node{std::move(value), {}, Op::leaf, npos, npos, 0.0, requires_grad});
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    [[nodiscard]] const Tensor& value(Var v) const { return node(v).value; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Gradient accumulated by the last backward(); zeros when the node was not reached.
    [[nodiscard]] Tensor grad(Var v) const {
        const auto& n = node(v);
        if (n.grad.size() == 0) return Tensor(n.value.rows, n.value.cols, 0.0);
        return n.grad;
    }

    /// a (m x k) times b (k x n).
    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols != B.rows) throw ShapeError("matmul: " + A.shape_str() + " by " + B.shape_str());
        Tensor out(A.rows, B.cols, 0.0);
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t k = 0; k < A.cols; ++k) {
                const double aik = A.data[i * A.cols + k];
                const double* brow = &B.data[k * B.cols];
                double* orow = &out.data[i * out.cols];
                for (std::size_t j = 0; j < B.cols; ++j) orow[j] += aik * brow[j];
            }
        return record(std::move(out), Op::matmul, a, b);
    }

    /// Elementwise a + b; b may be a column vector (m x 1), a row vector
    /// (1 x n) or a scalar (1 x 1), broadcast over a.
    Var add(Var a, Var b) { return binary(a, b, Op::add); }
    Var subtract(Var a, Var b) { return binary(a, b, Op::subtract); }
    /// Elementwise product with the same broadcasting rules as add.
    Var hadamard(Var a, Var b) { return binary(a, b, Op::hadamard); }

    Var scalar_mul(Var a, double s) {
        Tensor out = value(a);
        for (auto& x : out.data) x *= s;
        return record(std::move(out), Op::scalar_mul, a, Var{npos}, s);
    }

    Var sigmoid(Var a) {
        Tensor out = value(a);
        for (auto& x : out.data) x = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        return record(std::move(out), Op::sigmoid, a);
    }

    Var tanh(Var a) {
        Tensor out = value(a);
        for (auto& x : out.data) x = std::tanh(x);
        return record(std::move(out), Op::tanh, a);
    }

    /// Mean of squared differences over all elements, as a 1 x 1 tensor.
    Var mse_reduce(Var pred, Var target) {
        const auto& P = value(pred);
        const auto& Y = value(target);
        if (!P.same_shape(Y)) throw ShapeError("mse_reduce: " + P.shape_str() + " vs " + Y.shape_str());
        if (P.size() == 0) throw ShapeError("mse_reduce: empty operands");
        double acc = 0.0;
        for (std::size_t i = 0; i < P.size(); ++i) {
            const double d = P.data[i] - Y.data[i];
            acc += d * d;
        }
        return record(Tensor(1, 1, acc / static_cast<double>(P.size())), Op::mse_reduce, pred, target);
    }

    /// Reverse sweep from a scalar node. Gradients of earlier sweeps are cleared.
    void backward(Var loss) {
        auto& root = node(loss);
        if (root.value.rows != 1 || root.value.cols != 1)
            throw ShapeError("backward: loss must be 1x1, got " + root.value.shape_str());
        for (auto& n : nodes_) n.grad = Tensor();
        root.grad = Tensor(1, 1, 1.0);
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (n.op == Op::leaf || n.grad.size() == 0 || !n.requires_grad) continue;
            propagate(n);
        }
    }

private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    struct Node {
        Tensor value;
        Tensor grad;
        Op op = Op::leaf;
        std::size_t a = npos;
        std::size_t b = npos;
        double scalar = 0.0;
        bool requires_grad = false;
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw ShapeError("tape: invalid variable handle");
        return nodes_[v.id];
    }
    Node& node(Var v) {
        if (v.id >= nodes_.size()) throw ShapeError("tape: invalid variable handle");
        return nodes_[v.id];
    }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    static void check_finite(const Tensor& t, const char* what) {
        for (double x : t.data)
            if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + what);
    }

    static const char* op_name(Op op) {
        switch (op) {
            case Op::leaf: return "leaf";
            case Op::matmul: return "matmul";
            case Op::add: return "add";
            case Op::subtract: return "subtract";
            case Op::hadamard: return "hadamard";
            case Op::scalar_mul: return "scalar_mul";
            case Op::sigmoid: return "sigmoid";
            case Op::tanh: return "tanh";
            case Op::mse_reduce: return "mse_reduce";
        }
        return "?";
    }

    Var record(Tensor out, Op op, Var a, Var b = Var{npos}, double scalar = 0.0) {
        check_finite(out, op_name(op));
        bool rg = nodes_[a.id].requires_grad;
        if (b.id != npos) rg = rg || nodes_[b.id].requires_grad;
        return push(Node{std::move(out), {}, op, a.id, b.id, scalar, rg});
    }

    // Index of b's element broadcast to position (i, j) of a.
    static std::size_t bcast(const Tensor& b, std::size_t i, std::size_t j) {
        return (b.rows == 1 ? 0 : i) * b.cols + (b.cols == 1 ? 0 : j);
    }

    Var binary(Var a, Var b, Op op) {
        const auto& A = value(a);
        const auto& B = value(b);
        const bool ok = (B.rows == A.rows || B.rows == 1) && (B.cols == A.cols || B.cols == 1);
        if (!ok) throw ShapeError(std::string(op_name(op)) + ": " + A.shape_str() + " with " + B.shape_str());
        Tensor out(A.rows, A.cols);
        for (std::size_t i = 0; i < A.rows; ++i)
            for (std::size_t j = 0; j < A.cols; ++j) {
                const double x = A.data[i * A.cols + j];
                const double y = B.data[bcast(B, i, j)];
                out.data[i * A.cols + j] = op == Op::add ? x + y : op == Op::subtract ? x - y : x * y;
            }
        return record(std::move(out), op, a, b);
    }

    void accumulate(std::size_t id, const Tensor& g) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
            return;
        }
        for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
    }

    // Sums g (shape of a) down to the broadcast shape of b.
    static Tensor reduce_to(const Tensor& g, const Tensor& b, const Tensor* scale) {
        Tensor out(b.rows, b.cols, 0.0);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) {
                const double v = g.data[i * g.cols + j] * (scale ? scale->data[i * g.cols + j] : 1.0);
                out.data[bcast(b, i, j)] += v;
            }
        return out;
    }

    void propagate(const Node& n) {
        const Tensor& G = n.grad;
        switch (n.op) {
            case Op::leaf: break;
            case Op::matmul: {
                const auto& A = nodes_[n.a].value;
                const auto& B = nodes_[n.b].value;
                if (nodes_[n.a].requires_grad) {
                    Tensor ga(A.rows, A.cols, 0.0);  // G * B^T
                    for (std::size_t i = 0; i < A.rows; ++i)
                        for (std::size_t k = 0; k < A.cols; ++k) {
                            double acc = 0.0;
                            for (std::size_t j = 0; j < B.cols; ++j) acc += G.data[i * G.cols + j] * B.data[k * B.cols + j];
                            ga.data[i * A.cols + k] = acc;
                        }
                    accumulate(n.a, ga);
                }
                if (nodes_[n.b].requires_grad) {
                    Tensor gb(B.rows, B.cols, 0.0);  // A^T * G
                    for (std::size_t i = 0; i < A.rows; ++i)
                        for (std::size_t k = 0; k < A.cols; ++k) {
                            const double aik = A.data[i * A.cols + k];
                            for (std::size_t j = 0; j < B.cols; ++j) gb.data[k * B.cols + j] += aik * G.data[i * G.cols + j];
                        }
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::add:
            case Op::subtract: {
                accumulate(n.a, G);
                if (nodes_[n.b].requires_grad) {
                    Tensor gb = reduce_to(G, nodes_[n.b].value, nullptr);
                    if (n.op == Op::subtract)
                        for (auto& x : gb.data) x = -x;
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::hadamard: {
                const auto& A = nodes_[n.a].value;
                const auto& B = nodes_[n.b].value;
                if (nodes_[n.a].requires_grad) {
                    Tensor ga(A.rows, A.cols);
                    for (std::size_t i = 0; i < A.rows; ++i)
                        for (std::size_t j = 0; j < A.cols; ++j)
                            ga.data[i * A.cols + j] = G.data[i * A.cols + j] * B.data[bcast(B, i, j)];
                    accumulate(n.a, ga);
                }
                if (nodes_[n.b].requires_grad) accumulate(n.b, reduce_to(G, B, &A));
                break;
            }
            case Op::scalar_mul: {
                Tensor ga = G;
                for (auto& x : ga.data) x *= n.scalar;
                accumulate(n.a, ga);
                break;
            }
            case Op::sigmoid: {
                Tensor ga = G;
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    const double s = n.value.data[i];
                    ga.data[i] *= s * (1.0 - s);
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::tanh: {
                Tensor ga = G;
                for (std::size_t i = 0; i < ga.size(); ++i) {
                    const double t = n.value.data[i];
                    ga.data[i] *= 1.0 - t * t;
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::mse_reduce: {
                const auto& P = nodes_[n.a].value;
                const auto& Y = nodes_[n.b].value;
                const double scale = 2.0 * G.data[0] / static_cast<double>(P.size());
                Tensor gp(P.rows, P.cols);
                for (std::size_t i = 0; i < P.size(); ++i) gp.data[i] = scale * (P.data[i] - Y.data[i]);
                if (nodes_[n.a].requires_grad) accumulate(n.a, gp);
                if (nodes_[n.b].requires_grad) {
                    for (auto& x : gp.data) x = -x;
                    accumulate(n.b, gp);
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Relative error used by gradient_check.
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Central-difference check of `analytic` = d f / d theta at the coordinates
/// listed in `coords` (all coordinates when empty). Returns the maximum
/// relative error.
inline double gradient_check(const std::function<double(std::span<const double>)>& f, std::vector<double> theta,
                             std::span<const double> analytic, double h = 1e-5,
                             std::span<const std::size_t> coords = {}) {
    if (analytic.size() != theta.size()) throw ShapeError("gradient_check: gradient length mismatch");
    auto probe = [&](std::size_t j) {
        const double saved = theta[j];
        theta[j] = saved + h;
        const double up = f(theta);
        theta[j] = saved - h;
        const double down = f(theta);
        theta[j] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("gradient_check: non-finite probe");
        return relative_error(analytic[j], (up - down) / (2.0 * h));
    };
    double worst = 0.0;
    if (coords.empty()) {
        for (std::size_t j = 0; j < theta.size(); ++j) worst = std::max(worst, probe(j));
    } else {
        for (std::size_t j : coords) {
            if (j >= theta.size()) throw ShapeError("gradient_check: coordinate out of range");
            worst = std::max(worst, probe(j));
        }
    }
    return worst;
}

} // namespace tlstm::ad
