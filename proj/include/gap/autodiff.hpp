// Reverse-mode automatic differentiation over a small set of dense
// primitives: affine maps against a flat parameter vector, elementwise
// nonlinearities, a fused log-sum-exp-stabilized softmax-cross-entropy
// reduction, squared distances, and scalar linear combinations.
//
// A Tape is built eagerly: each builder call runs the forward computation
// and records the node. backward() then propagates adjoints from a scalar
// root down to the parameter leaf and returns d(root)/d(theta).
// Tapes are single-use and single-threaded; distinct tapes are independent.
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gap/matrix.hpp"

namespace gap {

enum class Nonlinearity { relu, tanh };
enum class Reduction { mean, sum };

/// Location of one affine layer's weights and biases inside the flat
/// parameter vector. Weights are row-major with shape (out, in).
struct LayerSlice {
    std::size_t w_offset = 0;
    std::size_t b_offset = 0;
    std::size_t in = 0;
    std::size_t out = 0;

    std::size_t weight_count() const { return in * out; }
    std::size_t param_count() const { return in * out + out; }
    bool operator==(const LayerSlice&) const = default;
};

class Tape {
public:
    using Id = std::size_t;
    static constexpr Id kNone = static_cast<Id>(-1);

    /// Constant input; never differentiated.
    Id input(Matrix x) {
        Node n;
        n.op = Op::input;
        n.out = std::move(x);
        return push(std::move(n), /*check=*/false);
    }

    /// The single parameter leaf (flat vector, stored as a 1 x P matrix).
    Id parameters(std::span<const double> theta) {
        if (params_id_ != kNone)
            throw std::logic_error("Tape: parameter leaf already registered");
        Node n;
        n.op = Op::params;
        n.out = Matrix(1, theta.size());
        std::copy(theta.begin(), theta.end(), n.out.data.begin());
        params_id_ = push(std::move(n));
        return params_id_;
    }

    /// y = x * W^T + b with (W, b) sliced from the parameter leaf.
    Id affine(Id x, Id theta, const LayerSlice& slice) {
        const Matrix& in = out_of(x);
        const Matrix& p = out_of(theta);
        require(theta == params_id_, "affine: theta operand must be the parameter leaf");
        require(in.cols == slice.in, "affine: input width does not match layer slice");
        require(slice.w_offset + slice.weight_count() <= p.cols &&
                    slice.b_offset + slice.out <= p.cols,
                "affine: layer slice exceeds parameter vector");
        Node n;
        n.op = Op::affine;
        n.a = x;
        n.b = theta;
        n.slice = slice;
        n.out = Matrix(in.rows, slice.out);
        const double* w = p.data.data() + slice.w_offset;
        const double* b = p.data.data() + slice.b_offset;
        for (std::size_t i = 0; i < in.rows; ++i) {
            const double* xi = in.data.data() + i * in.cols;
            double* yi = n.out.data.data() + i * slice.out;
            for (std::size_t o = 0; o < slice.out; ++o) {
                const double* wo = w + o * slice.in;
                double acc = b[o];
                for (std::size_t k = 0; k < slice.in; ++k) acc += xi[k] * wo[k];
                yi[o] = acc;
            }
        }
        return push(std::move(n));
    }

    Id activation(Id x, Nonlinearity f) {
        const Matrix& in = out_of(x);
        Node n;
        n.op = f == Nonlinearity::relu ? Op::relu : Op::tanh_op;
        n.a = x;
        n.out = Matrix(in.rows, in.cols);
        if (f == Nonlinearity::relu) {
            for (std::size_t i = 0; i < in.data.size(); ++i)
                n.out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
        } else {
            for (std::size_t i = 0; i < in.data.size(); ++i)
                n.out.data[i] = std::tanh(in.data[i]);
        }
        return push(std::move(n));
    }

    /// Fused softmax-cross-entropy over a batch of logit rows, reduced to a
    /// scalar. Row losses are lse(logits) - logits[label].
    Id softmax_cross_entropy(Id logits, std::vector<int> labels, Reduction red) {
        const Matrix& z = out_of(logits);
        require(z.rows > 0, "softmax_cross_entropy: empty batch");
        require(labels.size() == z.rows, "softmax_cross_entropy: label count mismatch");
        for (int y : labels)
            require(y >= 0 && static_cast<std::size_t>(y) < z.cols,
                    "softmax_cross_entropy: label out of range");
        Node n;
        n.op = Op::softmax_xent;
        n.a = logits;
        n.labels = std::move(labels);
        n.coeff = red == Reduction::mean ? 1.0 / static_cast<double>(z.rows) : 1.0;
        n.probs = Matrix(z.rows, z.cols);
        double total = 0.0;
        for (std::size_t i = 0; i < z.rows; ++i) {
            const auto row = z.row(i);
            const double lse = log_sum_exp(row);
            for (std::size_t c = 0; c < z.cols; ++c)
                n.probs(i, c) = std::exp(row[c] - lse);
            total += lse - row[static_cast<std::size_t>(n.labels[i])];
        }
        n.out = Matrix(1, 1, total * n.coeff);
        return push(std::move(n));
    }

    /// sum_i (theta_i - center_i)^2; an empty center means the origin.
    Id squared_distance(Id theta, std::vector<double> center) {
        const Matrix& p = out_of(theta);
        require(theta == params_id_, "squared_distance: operand must be the parameter leaf");
        require(center.empty() || center.size() == p.cols,
                "squared_distance: center length mismatch");
        Node n;
        n.op = Op::squared_distance;
        n.a = theta;
        n.center = std::move(center);
        double s = 0.0;
        for (std::size_t i = 0; i < p.cols; ++i) {
            const double d = p.data[i] - (n.center.empty() ? 0.0 : n.center[i]);
            s += d * d;
        }
        n.out = Matrix(1, 1, s);
        return push(std::move(n));
    }

    /// Scalar linear combination sum_k c_k * s_k of scalar nodes.
    Id combine(std::vector<std::pair<Id, double>> terms) {
        require(!terms.empty(), "combine: no terms");
        Node n;
        n.op = Op::combine;
        double s = 0.0;
        for (const auto& [id, c] : terms) {
            require(is_scalar(id), "combine: term is not a scalar node");
            s += c * value(id);
        }
        n.terms = std::move(terms);
        n.out = Matrix(1, 1, s);
        return push(std::move(n));
    }

    double value(Id id) const {
        require(is_scalar(id), "value: node is not scalar");
        return nodes_[id].out.data[0];
    }

    const Matrix& out_of(Id id) const {
        require(id < nodes_.size(), "tape: node id out of range");
        return nodes_[id].out;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Reverse pass from a scalar root; returns d(root)/d(theta) as a flat
    /// vector over the parameter leaf. Single use.
    std::vector<double> backward(Id root) {
        require(is_scalar(root), "backward: root must be scalar");
        require(params_id_ != kNone, "backward: tape has no parameter leaf");
        if (backward_done_) throw std::logic_error("backward: tape already consumed");
        backward_done_ = true;

        for (auto& n : nodes_) n.adj = Matrix(n.out.rows, n.out.cols);
        nodes_[root].adj(0, 0) = 1.0;

        for (Id id = root + 1; id-- > 0;) {
            Node& n = nodes_[id];
            switch (n.op) {
                case Op::input:
                case Op::params:
                    break;
                case Op::affine: {
                    const Matrix& x = nodes_[n.a].out;
                    Matrix& dx = nodes_[n.a].adj;
                    const Matrix& p = nodes_[n.b].out;
                    Matrix& dp = nodes_[n.b].adj;
                    const double* w = p.data.data() + n.slice.w_offset;
                    double* dw = dp.data.data() + n.slice.w_offset;
                    double* db = dp.data.data() + n.slice.b_offset;
                    for (std::size_t i = 0; i < x.rows; ++i) {
                        const double* xi = x.data.data() + i * x.cols;
                        double* dxi = dx.data.data() + i * x.cols;
                        const double* dyi = n.adj.data.data() + i * n.slice.out;
                        for (std::size_t o = 0; o < n.slice.out; ++o) {
                            const double g = dyi[o];
                            if (g == 0.0) continue;
                            const double* wo = w + o * n.slice.in;
                            double* dwo = dw + o * n.slice.in;
                            for (std::size_t k = 0; k < n.slice.in; ++k) {
                                dxi[k] += g * wo[k];
                                dwo[k] += g * xi[k];
                            }
                            db[o] += g;
                        }
                    }
                    break;
                }
                case Op::relu: {
                    const Matrix& x = nodes_[n.a].out;
                    Matrix& dx = nodes_[n.a].adj;
                    for (std::size_t i = 0; i < x.data.size(); ++i)
                        if (x.data[i] > 0.0) dx.data[i] += n.adj.data[i];
                    break;
                }
                case Op::tanh_op: {
                    Matrix& dx = nodes_[n.a].adj;
                    for (std::size_t i = 0; i < n.out.data.size(); ++i)
                        dx.data[i] += n.adj.data[i] * (1.0 - n.out.data[i] * n.out.data[i]);
                    break;
                }
                case Op::softmax_xent: {
                    Matrix& dz = nodes_[n.a].adj;
                    const double g = n.adj(0, 0) * n.coeff;
                    for (std::size_t i = 0; i < n.probs.rows; ++i) {
                        const auto yi = static_cast<std::size_t>(n.labels[i]);
                        for (std::size_t c = 0; c < n.probs.cols; ++c)
                            dz(i, c) += g * (n.probs(i, c) - (c == yi ? 1.0 : 0.0));
                    }
                    break;
                }
                case Op::squared_distance: {
                    const Matrix& p = nodes_[n.a].out;
                    Matrix& dp = nodes_[n.a].adj;
                    const double g = n.adj(0, 0);
                    for (std::size_t i = 0; i < p.cols; ++i) {
                        const double c = n.center.empty() ? 0.0 : n.center[i];
                        dp.data[i] += g * 2.0 * (p.data[i] - c);
                    }
                    break;
                }
                case Op::combine: {
                    const double g = n.adj(0, 0);
                    for (const auto& [tid, c] : n.terms) nodes_[tid].adj(0, 0) += g * c;
                    break;
                }
            }
        }
        return nodes_[params_id_].adj.data;
    }

    /// Test hook: adjoint of a scalar node after backward().
    double scalar_adjoint(Id id) const {
        require(is_scalar(id), "scalar_adjoint: node is not scalar");
        require(backward_done_, "scalar_adjoint: backward not run");
        return nodes_[id].adj(0, 0);
    }

private:
    enum class Op { input, params, affine, relu, tanh_op, softmax_xent, squared_distance, combine };

    struct Node {
        Op op;
        Id a = kNone;
        Id b = kNone;
        Matrix out;
        Matrix adj;
        LayerSlice slice{};
        std::vector<int> labels;
        Matrix probs;
        double coeff = 1.0;
        std::vector<double> center;
        std::vector<std::pair<Id, double>> terms;
    };

    static const char* op_name(Op op) {
        switch (op) {
            case Op::input: return "input";
            case Op::params: return "params";
            case Op::affine: return "affine";
            case Op::relu: return "relu";
            case Op::tanh_op: return "tanh";
            case Op::softmax_xent: return "softmax_cross_entropy";
            case Op::squared_distance: return "squared_distance";
            case Op::combine: return "combine";
        }
        return "?";
    }

    Id push(Node n, bool check = true) {
        const Id id = nodes_.size();
        if (check && !all_finite(n.out.data))
            throw std::runtime_error("non-finite value in tape node " + std::to_string(id) +
                                     " (" + op_name(n.op) + ")");
        nodes_.push_back(std::move(n));
        return id;
    }

    bool is_scalar(Id id) const {
        return id < nodes_.size() && nodes_[id].out.rows == 1 && nodes_[id].out.cols == 1;
    }

    static void require(bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(msg);
    }

    std::vector<Node> nodes_;
    Id params_id_ = kNone;
    bool backward_done_ = false;
};

/// A differentiable scalar function of (parameters, batch): the tape-builder
/// closure plus the declared parameter dimension.
struct ScalarFn {
    std::size_t param_dim = 0;
    std::function<Tape::Id(Tape&, Tape::Id, const Batch&)> build;
};

struct ValueGrad {
    double value = 0.0;
    std::vector<double> grad;
};

inline void check_params(const ScalarFn& fn, std::span<const double> theta) {
    if (theta.size() != fn.param_dim)
        throw std::invalid_argument("parameter vector length does not match declared dimension");
    if (!all_finite(theta))
        throw std::invalid_argument("parameter vector contains non-finite values");
}

/// Forward evaluation only.
inline double fn_value(const ScalarFn& fn, std::span<const double> theta, const Batch& batch) {
    check_params(fn, theta);
    Tape tape;
    const auto p = tape.parameters(theta);
    return tape.value(fn.build(tape, p, batch));
}

/// Forward plus exact reverse-mode gradient.
inline ValueGrad value_and_grad(const ScalarFn& fn, std::span<const double> theta,
                                const Batch& batch) {
    check_params(fn, theta);
    Tape tape;
    const auto p = tape.parameters(theta);
    const auto root = fn.build(tape, p, batch);
    ValueGrad vg;
    vg.value = tape.value(root);
    vg.grad = tape.backward(root);
    return vg;
}

using PlainFn = std::function<double(std::span<const double>, const Batch&)>;

/// Central-difference gradient estimate: coordinate i is
/// (f(theta + h e_i) - f(theta - h e_i)) / (2h).
inline std::vector<double> finite_diff_grad(const PlainFn& fn, std::span<const double> theta,
                                            const Batch& batch, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
    std::vector<double> point(theta.begin(), theta.end());
    std::vector<double> grad(theta.size());
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double saved = point[i];
        point[i] = saved + step;
        const double fp = fn(point, batch);
        point[i] = saved - step;
        const double fm = fn(point, batch);
        point[i] = saved;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    return grad;
}

inline std::vector<double> finite_diff_grad(const ScalarFn& fn, std::span<const double> theta,
                                            const Batch& batch, double step) {
    return finite_diff_grad(
        PlainFn([&fn](std::span<const double> t, const Batch& b) { return fn_value(fn, t, b); }),
        theta, batch, step);
}

}  // namespace gap
