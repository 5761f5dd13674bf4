// Multilayer perceptron classifier over a flat parameter vector: layout,
// initialization, plain forward pass, freezing masks for last-layer
// retraining, parameter perturbation, and binary checkpoint IO.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gap/autodiff.hpp"
#include "gap/matrix.hpp"
#include "gap/rng.hpp"

namespace gap {

struct MlpSpec {
    std::vector<std::size_t> layer_sizes;  // input dim ... output dim (= number of classes)
    Nonlinearity activation = Nonlinearity::relu;

    std::size_t num_affine_layers() const { return layer_sizes.size() - 1; }
    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t num_classes() const { return layer_sizes.back(); }

    void validate() const {
        if (layer_sizes.size() < 2)
            throw std::invalid_argument("MlpSpec: need at least input and output sizes");
        for (std::size_t s : layer_sizes)
            if (s == 0) throw std::invalid_argument("MlpSpec: layer sizes must be positive");
        if (layer_sizes.back() < 2)
            throw std::invalid_argument("MlpSpec: output size must be at least 2");
    }
};

inline std::vector<LayerSlice> mlp_layout(const MlpSpec& spec) {
    spec.validate();
    std::vector<LayerSlice> layout;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
        LayerSlice s;
        s.in = spec.layer_sizes[l];
        s.out = spec.layer_sizes[l + 1];
        s.w_offset = offset;
        s.b_offset = offset + s.weight_count();
        offset += s.param_count();
        layout.push_back(s);
    }
    return layout;
}

inline std::size_t param_count(const MlpSpec& spec) {
    std::size_t n = 0;
    for (const auto& s : mlp_layout(spec)) n += s.param_count();
    return n;
}

/// Flat parameter vector with its layer layout, a trainable mask (all true
/// unless last-layer mode is selected), and the prior mean it is anchored to.
struct ParamVector {
    std::vector<double> theta;
    std::vector<LayerSlice> layout;
    std::vector<std::uint8_t> trainable;
    std::vector<double> prior_mean;

    std::size_t dim() const { return theta.size(); }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (auto t : trainable) n += t != 0;
        return n;
    }
};

/// Zero-mean weights scaled by 1/sqrt(fan-in), zero biases. The prior mean
/// starts as a copy of theta.
inline ParamVector init_mlp(const MlpSpec& spec, std::uint64_t seed) {
    ParamVector p;
    p.layout = mlp_layout(spec);
    p.theta.assign(param_count(spec), 0.0);
    Rng rng = Rng::stream(seed, 0x1317ull);
    for (const auto& s : p.layout) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(s.in));
        for (std::size_t i = 0; i < s.weight_count(); ++i)
            p.theta[s.w_offset + i] = scale * rng.normal();
        // biases stay zero
    }
    p.trainable.assign(p.theta.size(), 1);
    p.prior_mean = p.theta;
    return p;
}

/// Forward pass for one example; plain loops, no tape.
inline std::vector<double> predict_logits(const ParamVector& params, const MlpSpec& spec,
                                          std::span<const double> x) {
    if (x.size() != spec.input_dim())
        throw std::invalid_argument("predict_logits: input dimension mismatch");
    if (params.layout != mlp_layout(spec))
        throw std::invalid_argument("predict_logits: parameter layout does not match spec");
    std::vector<double> h(x.begin(), x.end());
    for (std::size_t l = 0; l < params.layout.size(); ++l) {
        const auto& s = params.layout[l];
        std::vector<double> z(s.out);
        for (std::size_t o = 0; o < s.out; ++o) {
            const double* w = params.theta.data() + s.w_offset + o * s.in;
            double acc = params.theta[s.b_offset + o];
            for (std::size_t k = 0; k < s.in; ++k) acc += h[k] * w[k];
            z[o] = acc;
        }
        if (l + 1 < params.layout.size()) {
            if (spec.activation == Nonlinearity::relu) {
                for (double& v : z) v = v > 0.0 ? v : 0.0;
            } else {
                for (double& v : z) v = std::tanh(v);
            }
        }
        h = std::move(z);
    }
    return h;
}

inline Matrix predict_logits_batch(const ParamVector& params, const MlpSpec& spec,
                                   const Matrix& x) {
    Matrix out(x.rows, spec.num_classes());
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto logits = predict_logits(params, spec, x.row(i));
        std::copy(logits.begin(), logits.end(), out.row(i).begin());
    }
    return out;
}

/// Trainable mask restricted to the final affine layer's weights and biases.
inline ParamVector freeze_all_but_last(ParamVector params) {
    if (params.layout.empty()) throw std::invalid_argument("freeze_all_but_last: no layers");
    std::fill(params.trainable.begin(), params.trainable.end(), std::uint8_t{0});
    const auto& last = params.layout.back();
    for (std::size_t i = 0; i < last.weight_count(); ++i)
        params.trainable[last.w_offset + i] = 1;
    for (std::size_t i = 0; i < last.out; ++i)
        params.trainable[last.b_offset + i] = 1;
    return params;
}

/// theta + rho * direction, with the direction masked to trainable
/// coordinates; frozen coordinates are returned unperturbed.
inline std::vector<double> apply_perturbation(const ParamVector& params,
                                              std::span<const double> direction, double rho) {
    if (direction.size() != params.dim())
        throw std::invalid_argument("apply_perturbation: direction length mismatch");
    if (rho < 0.0) throw std::invalid_argument("apply_perturbation: rho must be nonnegative");
    std::vector<double> out = params.theta;
    if (rho == 0.0) return out;
    for (std::size_t i = 0; i < out.size(); ++i)
        if (params.trainable[i]) out[i] += rho * direction[i];
    return out;
}

inline Tape::Id build_mlp_logits(Tape& tape, Tape::Id theta, const MlpSpec& spec,
                                 const std::vector<LayerSlice>& layout, const Matrix& x) {
    Tape::Id h = tape.input(x);
    for (std::size_t l = 0; l < layout.size(); ++l) {
        h = tape.affine(h, theta, layout[l]);
        if (l + 1 < layout.size()) h = tape.activation(h, spec.activation);
    }
    return h;
}

/// Batch-mean softmax-cross-entropy of the MLP, as a differentiable ScalarFn.
inline ScalarFn mean_cross_entropy_fn(const MlpSpec& spec) {
    ScalarFn fn;
    fn.param_dim = param_count(spec);
    auto layout = mlp_layout(spec);
    fn.build = [spec, layout](Tape& tape, Tape::Id theta, const Batch& batch) {
        const auto logits = build_mlp_logits(tape, theta, spec, layout, batch.x);
        return tape.softmax_cross_entropy(logits, batch.y, Reduction::mean);
    };
    return fn;
}

/// mean CE + (weight_decay / 2) * ||theta||^2.
inline ScalarFn l2_regularized_ce_fn(const MlpSpec& spec, double weight_decay) {
    if (weight_decay == 0.0) return mean_cross_entropy_fn(spec);
    ScalarFn fn;
    fn.param_dim = param_count(spec);
    auto layout = mlp_layout(spec);
    fn.build = [spec, layout, weight_decay](Tape& tape, Tape::Id theta, const Batch& batch) {
        const auto logits = build_mlp_logits(tape, theta, spec, layout, batch.x);
        const auto ce = tape.softmax_cross_entropy(logits, batch.y, Reduction::mean);
        const auto sq = tape.squared_distance(theta, {});
        return tape.combine({{ce, 1.0}, {sq, weight_decay / 2.0}});
    };
    return fn;
}

// ---------------------------------------------------------------------------
// Checkpoint IO (.gapckpt): little-endian layout record followed by the flat
// double array. Format:
//   magic "GAPCKPT\0" | u32 version | u32 activation | u32 num_layers |
//   per layer { u64 w_offset, u64 b_offset, u64 in, u64 out } |
//   u64 P | P doubles (theta)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
    if (pos + 4 > buf.size()) throw std::runtime_error("checkpoint: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(const std::string& buf, std::size_t& pos) {
    if (pos + 8 > buf.size()) throw std::runtime_error("checkpoint: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'P', 'C', 'K', 'P', 'T', '\0'};

inline void save_checkpoint(const ParamVector& params, const MlpSpec& spec,
                            const std::string& path) {
    std::string buf;
    buf.append(kCheckpointMagic, 8);
    detail::put_u32(buf, 1);
    detail::put_u32(buf, spec.activation == Nonlinearity::relu ? 0u : 1u);
    detail::put_u32(buf, static_cast<std::uint32_t>(params.layout.size()));
    for (const auto& s : params.layout) {
        detail::put_u64(buf, s.w_offset);
        detail::put_u64(buf, s.b_offset);
        detail::put_u64(buf, s.in);
        detail::put_u64(buf, s.out);
    }
    detail::put_u64(buf, params.dim());
    for (double v : params.theta) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        detail::put_u64(buf, bits);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

/// Loads a checkpoint; the MlpSpec is reconstructed from the layout record.
/// The returned ParamVector has an all-true mask and prior_mean = theta.
inline std::pair<ParamVector, MlpSpec> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::size_t pos = 8;
    const auto version = detail::get_u32(buf, pos);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    const auto act = detail::get_u32(buf, pos);
    const auto num_layers = detail::get_u32(buf, pos);

    MlpSpec spec;
    spec.activation = act == 0 ? Nonlinearity::relu : Nonlinearity::tanh;
    ParamVector params;
    for (std::uint32_t l = 0; l < num_layers; ++l) {
        LayerSlice s;
        s.w_offset = detail::get_u64(buf, pos);
        s.b_offset = detail::get_u64(buf, pos);
        s.in = detail::get_u64(buf, pos);
        s.out = detail::get_u64(buf, pos);
        params.layout.push_back(s);
        if (l == 0) spec.layer_sizes.push_back(s.in);
        spec.layer_sizes.push_back(s.out);
    }
    const auto dim = detail::get_u64(buf, pos);
    if (buf.size() - pos != dim * 8)
        throw std::runtime_error("checkpoint: payload size mismatch in " + path);
    params.theta.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        const auto bits = detail::get_u64(buf, pos);
        std::memcpy(&params.theta[i], &bits, 8);
    }
    if (params.layout != mlp_layout(spec) || dim != param_count(spec))
        throw std::runtime_error("checkpoint: layout record does not tile the parameter vector");
    params.trainable.assign(dim, 1);
    params.prior_mean = params.theta;
    return {std::move(params), std::move(spec)};
}

}  // namespace gap
