#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "gap/mlp.hpp"
#include "gap/rng.hpp"

using namespace gap;

TEST_CASE("parameter counting") {
    CHECK(param_count(MlpSpec{{4, 8, 2}}) == 58);
    CHECK(param_count(MlpSpec{{4, 2}}) == 10);
    const auto layout = mlp_layout(MlpSpec{{4, 8, 2}});
    REQUIRE(layout.size() == 2);
    CHECK(layout[0].w_offset == 0);
    CHECK(layout[0].b_offset == 32);
    CHECK(layout[1].w_offset == 40);
    CHECK(layout[1].b_offset == 56);
}

TEST_CASE("initialization is deterministic in the seed") {
    const MlpSpec spec{{4, 8, 2}};
    const auto a = init_mlp(spec, 0);
    const auto b = init_mlp(spec, 0);
    const auto c = init_mlp(spec, 1);
    CHECK(a.theta == b.theta);
    CHECK(a.theta != c.theta);
    CHECK(a.prior_mean == a.theta);
    CHECK(a.trainable_count() == a.dim());
    // biases start at zero
    for (const auto& s : a.layout)
        for (std::size_t i = 0; i < s.out; ++i) CHECK(a.theta[s.b_offset + i] == 0.0);
}

TEST_CASE("all-zero parameters give all-zero logits") {
    const MlpSpec spec{{4, 8, 2}};
    auto params = init_mlp(spec, 0);
    std::fill(params.theta.begin(), params.theta.end(), 0.0);
    const auto logits = predict_logits(params, spec, std::vector<double>{1.0, -2.0, 0.5, 3.0});
    for (double v : logits) CHECK(v == 0.0);
}

TEST_CASE("single affine layer picks out a weight column") {
    const MlpSpec spec{{4, 2}};
    auto params = init_mlp(spec, 5);
    // x = e1 selects the first column of W plus the bias (bias is zero)
    const auto logits = predict_logits(params, spec, std::vector<double>{1.0, 0.0, 0.0, 0.0});
    const auto& s = params.layout[0];
    CHECK(logits[0] == params.theta[s.w_offset + 0 * s.in + 0]);
    CHECK(logits[1] == params.theta[s.w_offset + 1 * s.in + 0]);
}

TEST_CASE("batch evaluation equals per-example evaluation stacked") {
    Rng rng(4);
    const MlpSpec spec{{5, 7, 3}, Nonlinearity::tanh};
    const auto params = init_mlp(spec, 21);
    Matrix x(6, 5);
    for (double& v : x.data) v = rng.normal();
    const auto batch_logits = predict_logits_batch(params, spec, x);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto single = predict_logits(params, spec, x.row(i));
        for (std::size_t c = 0; c < 3; ++c) CHECK(batch_logits(i, c) == single[c]);
    }
}

TEST_CASE("one-layer logits are homogeneous in the parameters") {
    Rng rng(9);
    const MlpSpec spec{{3, 2}};
    auto params = init_mlp(spec, 2);
    const std::vector<double> x = {0.3, -1.2, 0.8};
    const auto base = predict_logits(params, spec, x);
    const double c = 2.5;
    for (double& v : params.theta) v *= c;
    const auto scaled = predict_logits(params, spec, x);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(scaled[i] == Catch::Approx(c * base[i]).epsilon(1e-12));
}

TEST_CASE("freeze_all_but_last keeps only the final layer trainable") {
    const auto frozen = freeze_all_but_last(init_mlp(MlpSpec{{4, 8, 2}}, 0));
    CHECK(frozen.trainable_count() == 18);
    const auto single = freeze_all_but_last(init_mlp(MlpSpec{{4, 2}}, 0));
    CHECK(single.trainable_count() == 10);
}

TEST_CASE("perturbation respects rho and the trainable mask") {
    const MlpSpec spec{{4, 8, 2}};
    auto params = init_mlp(spec, 3);

    SECTION("rho = 0 returns theta unchanged") {
        std::vector<double> dir(params.dim(), 1.0);
        CHECK(apply_perturbation(params, dir, 0.0) == params.theta);
    }
    SECTION("unit direction shifts a single coordinate by rho") {
        std::vector<double> dir(params.dim(), 0.0);
        dir[0] = 1.0;
        const auto out = apply_perturbation(params, dir, 0.15);
        CHECK(out[0] == params.theta[0] + 0.15);
        for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i] == params.theta[i]);
    }
    SECTION("frozen coordinates ignore nonzero directions") {
        const auto frozen = freeze_all_but_last(params);
        std::vector<double> dir(params.dim(), 1.0);
        const auto out = apply_perturbation(frozen, dir, 0.5);
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (frozen.trainable[i])
                CHECK(out[i] == frozen.theta[i] + 0.5);
            else
                CHECK(out[i] == frozen.theta[i]);
        }
    }
    SECTION("length mismatch is rejected") {
        CHECK_THROWS_AS(apply_perturbation(params, std::vector<double>{1.0}, 0.1),
                        std::invalid_argument);
    }
}

TEST_CASE("dimension mismatch in predict is rejected") {
    const MlpSpec spec{{4, 2}};
    const auto params = init_mlp(spec, 0);
    CHECK_THROWS_AS(predict_logits(params, spec, std::vector<double>{1.0}),
                    std::invalid_argument);
}

TEST_CASE("checkpoint round-trip is bit exact") {
    const MlpSpec spec{{5, 6, 3}, Nonlinearity::tanh};
    const auto params = init_mlp(spec, 31);
    const auto path = std::filesystem::temp_directory_path() / "gap_test_ckpt.gapckpt";
    save_checkpoint(params, spec, path.string());
    const auto [loaded, loaded_spec] = load_checkpoint(path.string());
    CHECK(loaded.theta == params.theta);
    CHECK(loaded.layout == params.layout);
    CHECK(loaded_spec.layer_sizes == spec.layer_sizes);
    CHECK(loaded_spec.activation == spec.activation);
    std::filesystem::remove(path);
}

TEST_CASE("invalid specs are rejected") {
    CHECK_THROWS_AS(MlpSpec{{4}}.validate(), std::invalid_argument);
    CHECK_THROWS_AS((MlpSpec{{4, 1}}).validate(), std::invalid_argument);
    CHECK_THROWS_AS((MlpSpec{{0, 2}}).validate(), std::invalid_argument);
}
