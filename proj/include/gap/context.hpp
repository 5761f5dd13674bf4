// Group-aware context distribution over a group-labeled validation set:
// rare groups are upweighted by the exponent gamma, and context batches are
// drawn i.i.d. with replacement from the induced distribution.
#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <span>
#include <stdexcept>
#include <vector>

#include "gap/datagen.hpp"
#include "gap/matrix.hpp"
#include "gap/rng.hpp"

namespace gap {

/// How the per-group weights (N/N_g)^gamma turn into a sampling
/// distribution. `upsample` weights each *example* by (N/N_g)^gamma, giving
/// group probability proportional to N_g^(1-gamma) — exactly balanced at
/// gamma = 1. `mixture` uses (N/N_g)^gamma as group mixture weights directly.
enum class ContextScheme { upsample, mixture };

struct ContextWeights {
    double gamma = 1.0;
    ContextScheme scheme = ContextScheme::upsample;
    std::map<int, double> per_example_weight;  // weight attached to each example of group g
    std::map<int, double> group_prob;          // normalized sampling probability per group
    std::map<int, std::size_t> counts;         // source counts, kept for validation
};

/// Weights from validation group counts. gamma >= 1 is the supported range;
/// values in (0, 1) are accepted with a warning for experimentation.
inline ContextWeights compute_weights(const std::map<int, std::size_t>& counts, double gamma,
                                      ContextScheme scheme = ContextScheme::upsample) {
    if (counts.empty()) throw std::invalid_argument("compute_weights: empty group counts");
    if (!(gamma > 0.0) || !std::isfinite(gamma))
        throw std::invalid_argument("compute_weights: gamma must be positive and finite");
    if (gamma < 1.0)
        std::cerr << "compute_weights: gamma = " << gamma
                  << " is below 1; rare groups are downweighted relative to balance\n";

    std::size_t total = 0;
    for (const auto& [g, c] : counts) {
        if (c == 0)
            throw std::invalid_argument("compute_weights: group " + std::to_string(g) +
                                        " listed with count 0");
        total += c;
    }
    const double n = static_cast<double>(total);

    ContextWeights w;
    w.gamma = gamma;
    w.scheme = scheme;
    w.counts = counts;
    double norm = 0.0;
    for (const auto& [g, c] : counts) {
        const double ng = static_cast<double>(c);
        w.per_example_weight[g] = std::pow(n / ng, gamma);
        const double unnorm = scheme == ContextScheme::upsample
                                  ? std::pow(ng, 1.0 - gamma)   // N_g * (N/N_g)^gamma, N^gamma cancels
                                  : std::pow(n / ng, gamma);
        w.group_prob[g] = unnorm;
        norm += unnorm;
    }
    for (auto& [g, p] : w.group_prob) p /= norm;
    return w;
}

/// S i.i.d. draws with replacement; returns dataset row indices so callers
/// can recover group identity. Example i is drawn with probability
/// proportional to its group's per-example weight.
inline std::vector<std::size_t> sample_context_indices(const GroupedDataset& val_context,
                                                       const ContextWeights& weights,
                                                       std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw std::invalid_argument("sample_context_indices: S must be >= 1");
    if (weights.counts != val_context.group_counts)
        throw std::invalid_argument(
            "sample_context_indices: weights were built from different group counts");

    std::map<int, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < val_context.examples.size(); ++i)
        by_group[val_context.examples[i].g].push_back(i);

    std::vector<const std::vector<std::size_t>*> groups;
    std::vector<double> cdf;
    double acc = 0.0;
    for (const auto& [g, p] : weights.group_prob) {
        groups.push_back(&by_group.at(g));
        acc += p;
        cdf.push_back(acc);
    }

    std::vector<std::size_t> out;
    out.reserve(batch_size);
    for (std::size_t s = 0; s < batch_size; ++s) {
        const std::size_t gi = rng.categorical(cdf);
        const auto& members = *groups[gi];
        out.push_back(members[rng.below(members.size())]);
    }
    return out;
}

/// Context batch of (x̂, ŷ) pairs with the true labels of the drawn rows.
inline Batch sample_context_batch(const GroupedDataset& val_context,
                                  const ContextWeights& weights, std::size_t batch_size,
                                  Rng& rng) {
    const auto idx = sample_context_indices(val_context, weights, batch_size, rng);
    return to_batch(val_context, idx);
}

}  // namespace gap
