// Group-wise evaluation: per-group accuracy, worst-group accuracy,
// train-proportion-weighted average accuracy, and seed aggregation.
#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gap/datagen.hpp"
#include "gap/matrix.hpp"
#include "gap/mlp.hpp"

namespace gap {

struct GroupStat {
    std::size_t correct = 0;
    std::size_t total = 0;
    double accuracy() const { return static_cast<double>(correct) / static_cast<double>(total); }
};

struct EvalReport {
    std::map<int, double> per_group_acc;
    std::map<int, GroupStat> group_stats;
    double worst_group_acc = 0.0;
    double weighted_avg_acc = std::numeric_limits<double>::quiet_NaN();
    double overall_acc = 0.0;
    std::map<int, std::size_t> group_counts_test;
    std::vector<double> train_proportions;
    bool in_sample = false;
    std::string method;
    std::uint64_t seed = 0;
};

/// Accuracy per group; prediction is the argmax of the logits with ties
/// broken toward the lower class index. Groups absent from the test set are
/// simply not present in the result.
inline std::map<int, double> per_group_accuracy(const ParamVector& params, const MlpSpec& spec,
                                                const GroupedDataset& test) {
    if (test.empty()) throw std::invalid_argument("per_group_accuracy: empty test set");
    std::map<int, GroupStat> stats;
    for (const auto& e : test.examples) {
        const auto logits = predict_logits(params, spec, e.x);
        const auto pred = argmax_lowest(logits);
        auto& s = stats[e.g];
        ++s.total;
        if (pred == static_cast<std::size_t>(e.y)) ++s.correct;
    }
    std::map<int, double> acc;
    for (const auto& [g, s] : stats) acc[g] = s.accuracy();
    return acc;
}

inline double worst_group_accuracy(const EvalReport& report) {
    if (report.per_group_acc.empty())
        throw std::invalid_argument("worst_group_accuracy: empty report");
    double worst = 1.0;
    for (const auto& [g, a] : report.per_group_acc) worst = std::min(worst, a);
    return worst;
}

/// Sum over groups of proportion_g * accuracy_g. The proportions vector is
/// indexed by group id and must cover exactly the report's group set: any
/// positive proportion for an absent group (or group beyond the vector) is
/// a mismatch.
inline double weighted_average_accuracy(const EvalReport& report,
                                        std::span<const double> train_proportions) {
    double total = 0.0;
    for (double p : train_proportions) {
        if (!(p >= 0.0))
            throw std::invalid_argument("weighted_average_accuracy: negative proportion");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("weighted_average_accuracy: proportions must sum to 1");
    for (const auto& [g, a] : report.per_group_acc)
        if (static_cast<std::size_t>(g) >= train_proportions.size())
            throw std::invalid_argument("weighted_average_accuracy: group set mismatch");
    double acc = 0.0;
    for (std::size_t g = 0; g < train_proportions.size(); ++g) {
        if (train_proportions[g] == 0.0) continue;
        const auto it = report.per_group_acc.find(static_cast<int>(g));
        if (it == report.per_group_acc.end())
            throw std::invalid_argument(
                "weighted_average_accuracy: positive proportion for group absent from report");
        acc += train_proportions[g] * it->second;
    }
    return acc;
}

/// Full evaluation of a checkpoint against a grouped test set.
inline EvalReport evaluate(const ParamVector& params, const MlpSpec& spec,
                           const GroupedDataset& test, std::span<const double> train_proportions,
                           std::string method = "", std::uint64_t seed = 0) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    EvalReport r;
    r.method = std::move(method);
    r.seed = seed;
    r.in_sample = test.split_tag == "train";
    r.group_counts_test = test.group_counts;
    r.train_proportions.assign(train_proportions.begin(), train_proportions.end());

    std::size_t correct_total = 0;
    for (const auto& e : test.examples) {
        const auto logits = predict_logits(params, spec, e.x);
        const auto pred = argmax_lowest(logits);
        auto& s = r.group_stats[e.g];
        ++s.total;
        if (pred == static_cast<std::size_t>(e.y)) {
            ++s.correct;
            ++correct_total;
        }
    }
    for (const auto& [g, s] : r.group_stats) r.per_group_acc[g] = s.accuracy();
    r.overall_acc = static_cast<double>(correct_total) / static_cast<double>(test.size());
    r.worst_group_acc = worst_group_accuracy(r);
    if (!train_proportions.empty())
        r.weighted_avg_acc = weighted_average_accuracy(r, train_proportions);
    return r;
}

struct MetricSummary {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
    bool se_defined = false;  // false when n == 1
};

inline MetricSummary summarize(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("summarize: no values");
    MetricSummary s;
    s.n = values.size();
    bool all_equal = true;
    for (double v : values) {
        s.mean += v;
        all_equal = all_equal && v == values[0];
    }
    s.mean /= static_cast<double>(s.n);
    if (s.n == 1) return s;  // SE 0, flagged undefined
    s.se_defined = true;
    if (all_equal) {
        s.mean = values[0];
        return s;  // exactly zero spread
    }
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.se = sd / std::sqrt(static_cast<double>(s.n));
    return s;
}

struct AggregateSummary {
    MetricSummary worst;
    MetricSummary average;
};

/// Mean and standard error of the mean (sample sd, n-1 denominator) of the
/// worst-group and weighted-average accuracies across seed reports.
inline AggregateSummary aggregate(std::span<const EvalReport> reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
    std::vector<double> worst, avg;
    for (const auto& r : reports) {
        worst.push_back(r.worst_group_acc);
        avg.push_back(r.weighted_avg_acc);
    }
    return {summarize(worst), summarize(avg)};
}

}  // namespace gap
