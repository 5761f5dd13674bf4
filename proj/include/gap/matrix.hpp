// Small dense row-major matrix plus the numeric helpers shared by the
// forward and reverse passes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gap {

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::span<const double> row(std::size_t i) const {
        return {data.data() + i * cols, cols};
    }
    std::span<double> row(std::size_t i) {
        return {data.data() + i * cols, cols};
    }

    bool empty() const { return data.empty(); }
};

/// A labeled minibatch. `y` may be empty for losses that ignore labels.
struct Batch {
    Matrix x;
    std::vector<int> y;

    std::size_t size() const { return x.rows; }
    bool empty() const { return x.rows == 0; }
};

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Numerically stabilized softmax.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        total += p[i];
    }
    for (double& v : p) v /= total;
    return p;
}

inline double log_sum_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

/// Index of the largest element; ties resolve to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("argmax_lowest: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

inline double squared_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(squared_norm(v)); }

}  // namespace gap
