// The group-aware prior objective. The prior is induced by a Bernoulli
// observation model whose log-likelihood is -lambda * E[c(x̂, ŷ, theta)],
// where the cost c evaluates the classification loss at adversarially
// perturbed parameters theta + rho * epsilon(theta). epsilon is the
// normalized loss gradient on the context batch and is treated as a
// constant during differentiation (stop-gradient): the gradient of the
// robustness term is the plain loss gradient evaluated at the perturbed
// point, with no d(epsilon)/d(theta) contribution.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gap/autodiff.hpp"
#include "gap/context.hpp"
#include "gap/matrix.hpp"
#include "gap/mlp.hpp"

namespace gap {

enum class PriorMeanSource { erm_checkpoint, zeros };
enum class DataFitSource { context, train };

struct GapConfig {
    double lambda = 1.0;  // prior strength
    double rho = 0.15;    // perturbation radius
    double tau = 0.0;     // Gaussian base-prior precision
    double gamma = 4.0;   // context upweighting exponent
    std::size_t context_batch_size = 128;  // S
    PriorMeanSource prior_mean_source = PriorMeanSource::erm_checkpoint;
    DataFitSource data_fit_source = DataFitSource::context;
    ContextScheme context_scheme = ContextScheme::upsample;

    void validate() const {
        if (!(lambda >= 0.0) || !std::isfinite(lambda))
            throw std::invalid_argument("GapConfig: lambda must be finite and nonnegative");
        if (!(rho >= 0.0) || !std::isfinite(rho))
            throw std::invalid_argument("GapConfig: rho must be finite and nonnegative");
        if (!(tau >= 0.0) || !std::isfinite(tau))
            throw std::invalid_argument("GapConfig: tau must be finite and nonnegative");
        if (!(gamma > 0.0) || !std::isfinite(gamma))
            throw std::invalid_argument("GapConfig: gamma must be positive and finite");
        if (context_batch_size == 0)
            throw std::invalid_argument("GapConfig: context batch size must be >= 1");
    }
};

namespace detail {

inline std::vector<double> masked(std::vector<double> v, const ParamVector& params) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!params.trainable[i]) v[i] = 0.0;
    return v;
}

}  // namespace detail

/// Worst-case perturbation direction: the gradient of the batch-mean loss,
/// restricted to trainable coordinates and normalized to unit L2 norm. A
/// gradient norm below 1e-12 yields the zero vector. The result is a plain
/// constant vector — later differentiation never sees through it.
inline std::vector<double> epsilon(const ParamVector& params, const MlpSpec& spec,
                                   const Batch& context_batch) {
    if (context_batch.empty()) throw std::invalid_argument("epsilon: empty context batch");
    auto vg = value_and_grad(mean_cross_entropy_fn(spec), params.theta, context_batch);
    auto dir = detail::masked(std::move(vg.grad), params);
    const double norm = l2_norm(dir);
    if (norm < 1e-12) return std::vector<double>(params.dim(), 0.0);
    for (double& v : dir) v /= norm;
    return dir;
}

struct TermValueGrad {
    double value = 0.0;
    std::vector<double> grad;
};

/// lambda * (mean context loss at theta + rho * epsilon). The returned
/// gradient is the loss gradient evaluated at the perturbed point with
/// epsilon held fixed.
inline TermValueGrad robustness_term(const ParamVector& params, const MlpSpec& spec,
                                     const Batch& context_batch, const GapConfig& cfg) {
    cfg.validate();
    TermValueGrad out;
    out.grad.assign(params.dim(), 0.0);
    if (cfg.lambda == 0.0) return out;
    if (context_batch.empty())
        throw std::invalid_argument("robustness_term: empty context batch");

    std::vector<double> at = params.theta;
    if (cfg.rho > 0.0) {
        const auto dir = epsilon(params, spec, context_batch);
        at = apply_perturbation(params, dir, cfg.rho);
    }
    auto vg = value_and_grad(mean_cross_entropy_fn(spec), at, context_batch);
    out.value = cfg.lambda * vg.value;
    for (std::size_t i = 0; i < vg.grad.size(); ++i) out.grad[i] = cfg.lambda * vg.grad[i];
    return out;
}

/// Log-likelihood of the "group robustness achieved" outcome:
/// -lambda * (Monte Carlo mean of the cost over the context batch).
/// Nonpositive by construction, so its exponential is a valid Bernoulli
/// probability in (0, 1].
inline double log_aux_likelihood(const ParamVector& params, const MlpSpec& spec,
                                 const Batch& context_batch, const GapConfig& cfg) {
    cfg.validate();
    if (cfg.lambda == 0.0) return 0.0;
    if (context_batch.empty())
        throw std::invalid_argument("log_aux_likelihood: empty context batch");
    std::vector<double> at = params.theta;
    if (cfg.rho > 0.0) {
        const auto dir = epsilon(params, spec, context_batch);
        at = apply_perturbation(params, dir, cfg.rho);
    }
    const double mean_cost = fn_value(mean_cross_entropy_fn(spec), at, context_batch);
    return -cfg.lambda * mean_cost;
}

struct GapLossResult {
    double value = 0.0;
    double data_fit = 0.0;
    double prior_l2 = 0.0;
    double robustness = 0.0;
    std::vector<double> grad;
};

/// Full minimization objective: batch-mean data-fit loss, Gaussian prior
/// term (tau/2)||theta - mu||^2, and the robustness regularization. The
/// gradient composes the three terms under the stop-gradient contract and
/// is zeroed on frozen coordinates. train_batch may be empty (pure-prior
/// mode); its term is then zero.
inline GapLossResult gap_loss(const ParamVector& params, const MlpSpec& spec,
                              const Batch& train_batch, const Batch& context_batch,
                              const GapConfig& cfg) {
    cfg.validate();
    GapLossResult out;
    out.grad.assign(params.dim(), 0.0);

    if (!train_batch.empty()) {
        auto vg = value_and_grad(mean_cross_entropy_fn(spec), params.theta, train_batch);
        out.data_fit = vg.value;
        out.grad = std::move(vg.grad);
    }
    if (!std::isfinite(out.data_fit))
        throw std::runtime_error("gap_loss: non-finite data-fit term");

    if (cfg.tau > 0.0) {
        if (params.prior_mean.size() != params.dim())
            throw std::invalid_argument("gap_loss: prior mean length mismatch");
        double sq = 0.0;
        for (std::size_t i = 0; i < params.dim(); ++i) {
            const double d = params.theta[i] - params.prior_mean[i];
            sq += d * d;
            out.grad[i] += cfg.tau * d;
        }
        out.prior_l2 = 0.5 * cfg.tau * sq;
    }
    if (!std::isfinite(out.prior_l2))
        throw std::runtime_error("gap_loss: non-finite prior term");

    if (cfg.lambda > 0.0) {
        auto rt = robustness_term(params, spec, context_batch, cfg);
        out.robustness = rt.value;
        for (std::size_t i = 0; i < params.dim(); ++i) out.grad[i] += rt.grad[i];
    }
    if (!std::isfinite(out.robustness))
        throw std::runtime_error("gap_loss: non-finite robustness term");

    out.grad = detail::masked(std::move(out.grad), params);
    out.value = out.data_fit + out.prior_l2 + out.robustness;
    return out;
}

}  // namespace gap
