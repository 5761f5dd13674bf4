#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gap/datagen.hpp"
#include "gap/evalreport.hpp"
#include "gap/mlp.hpp"
#include "gap/rng.hpp"

using namespace gap;

namespace {

// four groups over two classes; features identify the class via the sign of x0
GroupedDataset toy_test_set(std::size_t per_group, double class_signal) {
    Rng rng(7);
    std::vector<Example> ex;
    for (int g = 0; g < 4; ++g) {
        const int y = g / 2, a = g % 2;
        for (std::size_t i = 0; i < per_group; ++i) {
            Example e;
            e.y = y;
            e.a = a;
            e.g = g;
            e.x = {class_signal * (2.0 * y - 1.0) + rng.normal(), rng.normal()};
            ex.push_back(std::move(e));
        }
    }
    auto d = GroupedDataset::from_examples(std::move(ex), "test");
    return d;
}

EvalReport report_with(const std::map<int, double>& acc) {
    EvalReport r;
    r.per_group_acc = acc;
    r.worst_group_acc = worst_group_accuracy(r);
    return r;
}

// predicts class 1{w . x > 0} through a single affine layer
ParamVector linear_params(double w0, double w1) {
    const MlpSpec spec{{2, 2}};
    auto p = init_mlp(spec, 0);
    p.theta = {/*W row 0*/ -w0, -w1, /*W row 1*/ w0, w1, /*b*/ 0.0, 0.0};
    return p;
}

}  // namespace

TEST_CASE("perfect and constant classifiers") {
    const MlpSpec spec{{2, 2}};
    const auto data = toy_test_set(50, 20.0);  // effectively separable

    SECTION("strong class-aligned weights are perfect everywhere") {
        const auto acc = per_group_accuracy(linear_params(5.0, 0.0), spec, data);
        for (const auto& [g, a] : acc) CHECK(a == 1.0);
    }
    SECTION("a constant class-0 predictor splits by label") {
        auto p = linear_params(0.0, 0.0);
        p.theta = {10.0, 0.0, -10.0, 0.0, 5.0, -5.0};  // logit0 always wins
        // force logits independent of x
        p.theta = {0.0, 0.0, 0.0, 0.0, 5.0, -5.0};
        const auto acc = per_group_accuracy(p, spec, data);
        CHECK(acc.at(0) == 1.0);
        CHECK(acc.at(1) == 1.0);
        CHECK(acc.at(2) == 0.0);
        CHECK(acc.at(3) == 0.0);
    }
    SECTION("argmax ties break toward the lower class index") {
        auto p = linear_params(0.0, 0.0);
        std::fill(p.theta.begin(), p.theta.end(), 0.0);  // all logits zero
        const auto acc = per_group_accuracy(p, spec, data);
        CHECK(acc.at(0) == 1.0);   // class 0 groups right
        CHECK(acc.at(2) == 0.0);   // class 1 groups wrong
    }
}

TEST_CASE("random parameters land near one half on a balanced binary task") {
    const MlpSpec spec{{2, 2}};
    const auto data = toy_test_set(500, 0.0);  // featureless task
    const auto params = init_mlp(spec, 123);
    const auto acc = per_group_accuracy(params, spec, data);
    for (const auto& [g, a] : acc) CHECK(std::abs(a - 0.5) < 0.1);  // ~4.5 sigma at n=500
}

TEST_CASE("worst group accuracy is the minimum") {
    CHECK(report_with({{0, 0.9}, {1, 0.8}, {2, 0.7}, {3, 0.95}}).worst_group_acc == 0.7);
    CHECK(report_with({{2, 0.42}}).worst_group_acc == 0.42);
    CHECK(report_with({{0, 0.6}, {1, 0.6}, {2, 0.6}}).worst_group_acc == 0.6);
    EvalReport empty;
    CHECK_THROWS_AS(worst_group_accuracy(empty), std::invalid_argument);
}

TEST_CASE("weighted average accuracy") {
    const auto r = report_with({{0, 0.9}, {1, 0.8}, {2, 0.7}, {3, 0.95}});

    SECTION("canonical four-group proportions") {
        const std::vector<double> props = {0.22, 0.01, 0.04, 0.73};
        CHECK(weighted_average_accuracy(r, props) == Catch::Approx(0.9275).epsilon(1e-15));
    }
    SECTION("uniform proportions give the plain mean") {
        const std::vector<double> props = {0.25, 0.25, 0.25, 0.25};
        CHECK(weighted_average_accuracy(r, props) ==
              Catch::Approx((0.9 + 0.8 + 0.7 + 0.95) / 4.0).epsilon(1e-15));
    }
    SECTION("one-hot proportions pick out a single group") {
        const std::vector<double> props = {0.0, 0.0, 1.0, 0.0};
        CHECK(weighted_average_accuracy(r, props) == 0.7);
    }
    SECTION("group-set mismatch is rejected") {
        const std::vector<double> too_short = {0.5, 0.5};
        CHECK_THROWS_AS(weighted_average_accuracy(r, too_short), std::invalid_argument);
        const auto partial = report_with({{0, 0.9}, {2, 0.5}});
        const std::vector<double> props = {0.25, 0.25, 0.25, 0.25};
        CHECK_THROWS_AS(weighted_average_accuracy(partial, props), std::invalid_argument);
    }
    SECTION("bounded by the worst and best group accuracies") {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            std::map<int, double> acc;
            std::vector<double> props(4);
            double s = 0.0;
            for (int g = 0; g < 4; ++g) {
                acc[g] = rng.uniform();
                props[g] = 0.05 + rng.uniform();
                s += props[g];
            }
            for (double& p : props) p /= s;
            const auto rep = report_with(acc);
            const double w = weighted_average_accuracy(rep, props);
            double lo = 1.0, hi = 0.0;
            for (const auto& [g, a] : acc) {
                lo = std::min(lo, a);
                hi = std::max(hi, a);
            }
            CHECK(w >= lo - 1e-12);
            CHECK(w <= hi + 1e-12);
        }
    }
}

TEST_CASE("weighted average under test-empirical proportions is the overall accuracy") {
    const MlpSpec spec{{2, 2}};
    const auto data = toy_test_set(250, 1.0);
    const auto params = init_mlp(spec, 3);
    auto r = evaluate(params, spec, data, {});
    std::vector<double> empirical(4);
    for (const auto& [g, c] : r.group_counts_test)
        empirical[static_cast<std::size_t>(g)] =
            static_cast<double>(c) / static_cast<double>(data.size());
    const double w = weighted_average_accuracy(r, empirical);
    CHECK(std::abs(w - r.overall_acc) <= 1e-15);
}

TEST_CASE("evaluation is pure") {
    const MlpSpec spec{{2, 2}};
    const auto data = toy_test_set(100, 1.0);
    const auto params = init_mlp(spec, 9);
    const auto a = evaluate(params, spec, data, std::vector<double>{0.25, 0.25, 0.25, 0.25});
    const auto b = evaluate(params, spec, data, std::vector<double>{0.25, 0.25, 0.25, 0.25});
    CHECK(a.per_group_acc == b.per_group_acc);
    CHECK(a.worst_group_acc == b.worst_group_acc);
    CHECK(a.weighted_avg_acc == b.weighted_avg_acc);
    CHECK(a.overall_acc == b.overall_acc);
}

TEST_CASE("in-sample evaluations are flagged") {
    const MlpSpec spec{{2, 2}};
    auto data = toy_test_set(10, 1.0);
    data.split_tag = "train";
    const auto r = evaluate(init_mlp(spec, 1), spec, data, {});
    CHECK(r.in_sample);
}

TEST_CASE("aggregate mean and standard error") {
    SECTION("identical reports give zero SE") {
        EvalReport r;
        r.per_group_acc = {{0, 0.8}};
        r.worst_group_acc = 0.8;
        r.weighted_avg_acc = 0.8;
        const std::vector<EvalReport> reps = {r, r, r};
        const auto agg = aggregate(reps);
        CHECK(agg.worst.mean == Catch::Approx(0.8).epsilon(1e-15));
        CHECK(agg.worst.se == 0.0);
        CHECK(agg.worst.se_defined);
    }
    SECTION("two values: mean 0.85, SE 0.05") {
        const std::vector<double> vals = {0.8, 0.9};
        const auto s = summarize(vals);
        CHECK(s.mean == Catch::Approx(0.85).epsilon(1e-15));
        CHECK(s.se == Catch::Approx(0.05).epsilon(1e-12));
    }
    SECTION("ten values match an independent computation") {
        const std::vector<double> vals = {0.71, 0.64, 0.80, 0.77, 0.69,
                                          0.75, 0.66, 0.73, 0.70, 0.78};
        const auto s = summarize(vals);
        CHECK(s.mean == Catch::Approx(0.72299999999999998).epsilon(1e-14));
        CHECK(s.se == Catch::Approx(0.016603212540549701).epsilon(1e-12));
    }
    SECTION("n = 1 yields SE zero flagged undefined") {
        const std::vector<double> vals = {0.4};
        const auto s = summarize(vals);
        CHECK(s.se == 0.0);
        CHECK_FALSE(s.se_defined);
    }
}
