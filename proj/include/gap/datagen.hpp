// Synthetic subpopulation-shift data: Gaussian features with disjoint core
// (class-driven) and spurious (attribute-driven) coordinates, group-wise
// mixture sampling for train/test shift, stratified splits, and CSV IO.
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gap/matrix.hpp"
#include "gap/rng.hpp"

namespace gap {

/// One labeled example: features, class y, spurious attribute a, and the
/// group id g = y * A + a.
struct Example {
    std::vector<double> x;
    int y = 0;
    int a = 0;
    int g = 0;

    bool operator==(const Example&) const = default;
};

struct GroupedDataset {
    std::vector<Example> examples;
    std::map<int, std::size_t> group_counts;
    std::string split_tag;
    std::size_t feature_dim = 0;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }

    static GroupedDataset from_examples(std::vector<Example> ex, std::string tag,
                                        std::size_t dim = 0) {
        GroupedDataset d;
        d.examples = std::move(ex);
        d.split_tag = std::move(tag);
        d.feature_dim = d.examples.empty() ? dim : d.examples.front().x.size();
        d.recount();
        return d;
    }

    void recount() {
        group_counts.clear();
        for (const auto& e : examples) ++group_counts[e.g];
    }
};

/// Builds a minibatch from dataset rows selected by index.
inline Batch to_batch(const GroupedDataset& data, std::span<const std::size_t> idx) {
    Batch b;
    b.x = Matrix(idx.size(), data.feature_dim);
    b.y.resize(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Example& e = data.examples[idx[i]];
        std::copy(e.x.begin(), e.x.end(), b.x.row(i).begin());
        b.y[i] = e.y;
    }
    return b;
}

struct ShiftSpec {
    std::vector<double> train_group_proportions;  // simplex over C*A groups
    std::vector<double> test_group_proportions;
    double core_separation = 1.0;
    double spurious_separation = 2.0;
    double noise_sd = 1.0;
    std::size_t n_train = 5000;
    std::size_t n_val = 1200;
    std::size_t n_test = 4000;
    std::size_t core_dim = 2;
    std::size_t spurious_dim = 8;
    std::size_t num_classes = 2;
    std::size_t num_attributes = 2;

    std::size_t num_groups() const { return num_classes * num_attributes; }
    std::size_t feature_dim() const { return core_dim + spurious_dim; }

    void validate() const {
        const auto check_simplex = [this](const std::vector<double>& p, const char* name) {
            if (p.size() != num_groups())
                throw std::invalid_argument(std::string(name) + ": length must equal C*A");
            double s = 0.0;
            for (double v : p) {
                if (!(v >= 0.0)) throw std::invalid_argument(std::string(name) + ": negative entry");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-9)
                throw std::invalid_argument(std::string(name) + ": proportions must sum to 1");
        };
        check_simplex(train_group_proportions, "train_group_proportions");
        check_simplex(test_group_proportions, "test_group_proportions");
        if (n_train == 0 || n_val == 0 || n_test == 0)
            throw std::invalid_argument("ShiftSpec: counts must be positive");
        if (core_dim == 0 || spurious_dim == 0)
            throw std::invalid_argument("ShiftSpec: feature dims must be positive");
        if (num_classes < 2 || num_attributes < 1)
            throw std::invalid_argument("ShiftSpec: need >= 2 classes and >= 1 attribute");
        if (!(noise_sd > 0.0)) throw std::invalid_argument("ShiftSpec: noise_sd must be positive");
    }
};

namespace detail {

inline std::vector<double> cumulative(std::span<const double> p) {
    std::vector<double> cdf(p.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        s += p[i];
        cdf[i] = s;
    }
    return cdf;
}

inline Example draw_example(const ShiftSpec& spec, std::span<const double> cdf, Rng& rng) {
    Example e;
    e.g = static_cast<int>(rng.categorical(cdf));
    e.y = e.g / static_cast<int>(spec.num_attributes);
    e.a = e.g % static_cast<int>(spec.num_attributes);
    e.x.resize(spec.feature_dim());
    const double core_mean = spec.core_separation * (2.0 * e.y - 1.0);
    const double spur_mean = spec.spurious_separation * (2.0 * e.a - 1.0);
    for (std::size_t i = 0; i < spec.core_dim; ++i)
        e.x[i] = core_mean + spec.noise_sd * rng.normal();
    for (std::size_t i = 0; i < spec.spurious_dim; ++i)
        e.x[spec.core_dim + i] = spur_mean + spec.noise_sd * rng.normal();
    return e;
}

}  // namespace detail

/// Stratified split: each group's examples are shuffled and partitioned per
/// the fractions (floor sizes, remainder to the first split).
inline std::vector<GroupedDataset> split(const GroupedDataset& data,
                                         std::span<const double> fractions, std::uint64_t seed) {
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw std::invalid_argument("split: negative fraction");
        total += f;
    }
    if (fractions.empty() || std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");

    std::map<int, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < data.examples.size(); ++i)
        by_group[data.examples[i].g].push_back(i);

    std::vector<std::vector<std::size_t>> assigned(fractions.size());
    Rng rng = Rng::stream(seed, 0x5917ull);
    for (auto& [g, idx] : by_group) {
        rng.shuffle(idx);
        std::vector<std::size_t> sizes(fractions.size());
        std::size_t used = 0;
        for (std::size_t k = 0; k < fractions.size(); ++k) {
            sizes[k] = static_cast<std::size_t>(fractions[k] * static_cast<double>(idx.size()));
            used += sizes[k];
        }
        sizes[0] += idx.size() - used;  // remainder to the first split
        std::size_t pos = 0;
        for (std::size_t k = 0; k < fractions.size(); ++k) {
            if (sizes[k] == 0 && fractions[k] > 0.0 && idx.empty())
                std::cerr << "split: group " << g << " is empty; emitting empty slice\n";
            for (std::size_t j = 0; j < sizes[k]; ++j) assigned[k].push_back(idx[pos++]);
        }
    }

    std::vector<GroupedDataset> out;
    for (std::size_t k = 0; k < fractions.size(); ++k) {
        std::vector<Example> ex;
        ex.reserve(assigned[k].size());
        for (std::size_t i : assigned[k]) ex.push_back(data.examples[i]);
        out.push_back(GroupedDataset::from_examples(std::move(ex), data.split_tag,
                                                    data.feature_dim));
    }
    return out;
}

struct DatasetSplits {
    GroupedDataset train;
    GroupedDataset val_context;
    GroupedDataset val_tune;
    GroupedDataset test;
};

/// Draws train/val from the train-side mixture and test from the shifted
/// one, then carves validation 85/15 into context and tuning sets.
inline DatasetSplits make_spurious_gaussian(const ShiftSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto train_cdf = detail::cumulative(spec.train_group_proportions);
    const auto test_cdf = detail::cumulative(spec.test_group_proportions);

    const auto draw_split = [&](std::size_t n, std::span<const double> cdf, std::uint64_t sid,
                                const char* tag) {
        Rng rng = Rng::stream(seed, sid);
        std::vector<Example> ex;
        ex.reserve(n);
        for (std::size_t i = 0; i < n; ++i) ex.push_back(detail::draw_example(spec, cdf, rng));
        return GroupedDataset::from_examples(std::move(ex), tag, spec.feature_dim());
    };

    DatasetSplits out;
    out.train = draw_split(spec.n_train, train_cdf, 0xA0ull, "train");
    GroupedDataset val = draw_split(spec.n_val, train_cdf, 0xA1ull, "val");
    out.test = draw_split(spec.n_test, test_cdf, 0xA2ull, "test");

    const double fractions[2] = {0.85, 0.15};
    auto parts = split(val, fractions, mix64(seed ^ 0xA3ull));
    out.val_context = std::move(parts[0]);
    out.val_tune = std::move(parts[1]);
    out.val_context.split_tag = "val_context";
    out.val_tune.split_tag = "val_tune";
    return out;
}

// ---------------------------------------------------------------------------
// CSV persistence. Schema: header `x0,...,x{d-1},y,a,g,split`, UTF-8, LF
// line endings, features printed with 17 significant digits.
// ---------------------------------------------------------------------------

inline void save_csv(const GroupedDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_csv: cannot open for writing: " + path);
    for (std::size_t i = 0; i < data.feature_dim; ++i) out << "x" << i << ",";
    out << "y,a,g,split\n";
    char buf[64];
    for (const auto& e : data.examples) {
        for (double v : e.x) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            out << buf << ",";
        }
        out << e.y << "," << e.a << "," << e.g << "," << data.split_tag << "\n";
    }
    if (!out) throw std::runtime_error("save_csv: write failed: " + path);
}

inline GroupedDataset load_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_csv: cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_csv: missing header in " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();

    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    if (header.size() < 4 || header[header.size() - 4] != "y" ||
        header[header.size() - 3] != "a" || header[header.size() - 2] != "g" ||
        header.back() != "split")
        throw std::runtime_error("load_csv: unexpected header in " + path);
    const std::size_t dim = header.size() - 4;
    for (std::size_t i = 0; i < dim; ++i)
        if (header[i] != "x" + std::to_string(i))
            throw std::runtime_error("load_csv: unexpected feature column in " + path);

    GroupedDataset data;
    data.feature_dim = dim;
    std::size_t line_no = 1;
    const auto fail = [&](const std::string& why) {
        throw std::runtime_error("load_csv: " + path + ":" + std::to_string(line_no) + ": " + why);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.push_back("");
        if (cells.size() != dim + 4) fail("expected " + std::to_string(dim + 4) + " columns");
        Example e;
        e.x.resize(dim);
        try {
            std::size_t used = 0;
            for (std::size_t i = 0; i < dim; ++i) {
                e.x[i] = std::stod(cells[i], &used);
                if (used != cells[i].size()) fail("malformed feature value");
            }
            e.y = std::stoi(cells[dim], &used);
            if (used != cells[dim].size()) fail("malformed y");
            e.a = std::stoi(cells[dim + 1], &used);
            if (used != cells[dim + 1].size()) fail("malformed a");
            e.g = std::stoi(cells[dim + 2], &used);
            if (used != cells[dim + 2].size()) fail("malformed g");
        } catch (const std::invalid_argument&) {
            fail("malformed numeric value");
        } catch (const std::out_of_range&) {
            fail("numeric value out of range");
        }
        if (e.y < 0 || e.a < 0 || e.g < 0) fail("negative label");
        const std::string& tag = cells[dim + 3];
        if (data.examples.empty()) {
            data.split_tag = tag;
        } else if (tag != data.split_tag) {
            fail("mixed split tags (" + tag + " vs " + data.split_tag + ")");
        }
        data.examples.push_back(std::move(e));
    }
    data.recount();
    return data;
}

}  // namespace gap
