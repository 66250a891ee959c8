// Copyright 2026 The hdrvam Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "hdrvam/autodiff.hpp"
#include "oracles.hpp"

using namespace hdrvam;
using Catch::Approx;
using G = Graph<double>;

namespace {

Tensor<double> t4(const Shape& s, std::vector<double> v) { return Tensor<double>(s, std::move(v)); }

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("conv2d identity and direct arithmetic", "[tensor_ops]") {
    G g;
    auto x = g.leaf(t4(Shape{1, 1, 1, 1}, {1.0}));
    auto w = g.leaf(t4(Shape{1, 1, 1, 1}, {1.0}));
    auto b = g.leaf(t4(Shape{1}, {0.0}));
    auto y = g.conv2d(x, w, b, 1, Padding::kSame);
    CHECK(g.value(y)[0] == 1.0);

    auto x2 = g.leaf(t4(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
    auto w2 = g.leaf(t4(Shape{1, 1, 2, 2}, {1, 0, 0, 1}));
    auto y2 = g.conv2d(x2, w2, b, 1, Padding::kValid);
    REQUIRE(g.value(y2).shape() == Shape{1, 1, 1, 1});
    CHECK(g.value(y2)[0] == 5.0);
}

TEST_CASE("conv2d matches quadruple-loop oracle", "[tensor_ops]") {
    Rng rng(11);
    for (auto padding : {Padding::kSame, Padding::kValid}) {
        auto x = oracles::random_tensor(Shape{1, 2, 5, 5}, rng);
        auto w = oracles::random_tensor(Shape{3, 2, 3, 3}, rng);
        auto b = oracles::random_tensor(Shape{3}, rng);
        G g;
        auto y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 1, padding);
        CHECK(max_abs_diff(g.value(y), oracles::naive_conv2d(x, w, b, 1, padding)) <= 1e-12);
    }
    // strided case
    auto x = oracles::random_tensor(Shape{2, 3, 7, 6}, rng);
    auto w = oracles::random_tensor(Shape{4, 3, 3, 3}, rng);
    auto b = oracles::random_tensor(Shape{4}, rng);
    G g;
    auto y = g.conv2d(g.leaf(x), g.leaf(w), g.leaf(b), 2, Padding::kSame);
    CHECK(max_abs_diff(g.value(y), oracles::naive_conv2d(x, w, b, 2, Padding::kSame)) <= 1e-12);
}

TEST_CASE("conv2d shape errors name the offending axis", "[tensor_ops]") {
    G g;
    auto x = g.leaf(Tensor<double>(Shape{1, 3, 4, 4}));
    auto w = g.leaf(Tensor<double>(Shape{2, 4, 3, 3}));
    auto b = g.leaf(Tensor<double>(Shape{2}));
    CHECK_THROWS_MATCHES(g.conv2d(x, w, b, 1, Padding::kSame), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("channel axis")));
    auto bad_b = g.leaf(Tensor<double>(Shape{3}));
    auto w_ok = g.leaf(Tensor<double>(Shape{2, 3, 3, 3}));
    CHECK_THROWS_AS(g.conv2d(x, w_ok, bad_b, 1, Padding::kSame), ShapeError);
}

TEST_CASE("sepconv2d zero, identity, and composed oracle", "[tensor_ops]") {
    Rng rng(5);
    // all-zero depthwise kernels -> constant fill with bias
    {
        G g;
        auto x = g.leaf(oracles::random_tensor(Shape{1, 3, 4, 4}, rng));
        auto dw = g.leaf(Tensor<double>(Shape{3, 1, 3, 3}));
        auto pw = g.leaf(oracles::random_tensor(Shape{2, 3, 1, 1}, rng));
        auto b = g.leaf(t4(Shape{2}, {0.25, -1.5}));
        auto y = g.sepconv2d(x, dw, pw, b);
        const auto& out = g.value(y);
        for (int64_t c = 0; c < 2; ++c)
            for (int64_t i = 0; i < 16; ++i) CHECK(out[c * 16 + i] == (c == 0 ? 0.25 : -1.5));
    }
    // 1x1 depthwise of ones + pointwise identity -> input
    {
        G g;
        auto xt = oracles::random_tensor(Shape{1, 2, 3, 3}, rng);
        auto x = g.leaf(xt);
        auto dw = g.leaf(Tensor<double>::full(Shape{2, 1, 1, 1}, 1.0));
        auto pw = g.leaf(t4(Shape{2, 2, 1, 1}, {1, 0, 0, 1}));
        auto b = g.leaf(Tensor<double>(Shape{2}));
        auto y = g.sepconv2d(x, dw, pw, b);
        CHECK(g.value(y) == xt);
    }
    // random shapes vs two-stage naive oracle
    {
        auto x = oracles::random_tensor(Shape{1, 4, 6, 6}, rng);
        auto dw = oracles::random_tensor(Shape{4, 1, 3, 3}, rng);
        auto pw = oracles::random_tensor(Shape{8, 4, 1, 1}, rng);
        auto b = oracles::random_tensor(Shape{8}, rng);
        G g;
        auto y = g.sepconv2d(g.leaf(x), g.leaf(dw), g.leaf(pw), g.leaf(b));
        auto expect = oracles::naive_conv2d(oracles::naive_depthwise(x, dw), pw, b, 1, Padding::kValid);
        CHECK(max_abs_diff(g.value(y), expect) <= 1e-12);
    }
}

TEST_CASE("relu and sigmoid pointwise contracts", "[tensor_ops]") {
    G g;
    auto x = g.leaf(t4(Shape{1, 1, 1, 3}, {-1, 0, 2}));
    const auto& r = g.value(g.relu(x));
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    auto s0 = g.value(g.sigmoid(g.leaf(t4(Shape{1}, {0.0}))))[0];
    CHECK(s0 == 0.5);

    const auto& sat = g.value(g.sigmoid(g.leaf(t4(Shape{1, 1, 1, 2}, {40.0, -40.0}))));
    CHECK(sat[0] > 0.0);
    CHECK(sat[0] < 1.0);
    CHECK(1.0 - sat[0] <= 1e-15);
    CHECK(sat[1] > 0.0);
    CHECK(sat[1] < 1.0);
    CHECK(sat[1] <= 1e-15);
}

TEST_CASE("pooling examples and window oracle", "[tensor_ops]") {
    G g;
    auto y = g.maxpool2(g.leaf(t4(Shape{1, 1, 2, 2}, {1, 2, 3, 4})));
    CHECK(g.value(y)[0] == 4.0);

    auto c = g.avgpool2(g.leaf(Tensor<double>::full(Shape{1, 2, 8, 8}, 3.25)), 4);
    for (int64_t i = 0; i < g.value(c).size(); ++i) CHECK(g.value(c)[i] == 3.25);

    Rng rng(3);
    auto x = oracles::random_tensor(Shape{1, 3, 8, 8}, rng);
    G g2;
    auto mp = g2.maxpool2(g2.leaf(x));
    auto ap = g2.avgpool2(g2.leaf(x), 2);
    CHECK(g2.value(mp) == oracles::naive_maxpool2(x));
    CHECK(max_abs_diff(g2.value(ap), oracles::naive_avgpool(x, 2)) <= 1e-15);

    auto odd = g2.leaf(Tensor<double>(Shape{1, 1, 3, 4}));
    CHECK_THROWS_AS(g2.maxpool2(odd), ShapeError);
    CHECK_THROWS_AS(g2.avgpool2(odd, 3), ShapeError);
}

TEST_CASE("upsample2 constants and interpolation oracle", "[tensor_ops]") {
    G g;
    auto c = g.leaf(Tensor<double>::full(Shape{1, 2, 3, 3}, 0.75));
    const auto& up = g.value(g.upsample2(c));
    REQUIRE(up.shape() == Shape{1, 2, 6, 6});
    for (int64_t i = 0; i < up.size(); ++i) CHECK(up[i] == 0.75);

    // upsample2(maxpool2(constant)) is identity on constants
    auto pooled = g.maxpool2(g.leaf(Tensor<double>::full(Shape{1, 1, 4, 4}, -2.5)));
    const auto& roundtrip = g.value(g.upsample2(pooled));
    REQUIRE(roundtrip.shape() == Shape{1, 1, 4, 4});
    for (int64_t i = 0; i < roundtrip.size(); ++i) CHECK(roundtrip[i] == -2.5);

    Rng rng(17);
    auto x = oracles::random_tensor(Shape{1, 2, 3, 3}, rng);
    G g2;
    auto y = g2.upsample2(g2.leaf(x));
    CHECK(max_abs_diff(g2.value(y), oracles::naive_upsample2(x)) <= 1e-12);
}

TEST_CASE("concat, add, multiply", "[tensor_ops]") {
    Rng rng(23);
    auto img = oracles::random_tensor(Shape{1, 3, 2, 2}, rng, 0.0, 1.0);
    G g;
    auto i = g.leaf(img);
    auto ones = g.leaf(Tensor<double>::full(Shape{1, 1, 2, 2}, 1.0));
    auto zeros = g.leaf(Tensor<double>(Shape{1, 1, 2, 2}));
    CHECK(g.value(g.multiply(ones, i)) == img);
    const auto& z = g.value(g.multiply(zeros, i));
    for (int64_t k = 0; k < z.size(); ++k) CHECK(z[k] == 0.0);

    auto a = g.leaf(oracles::random_tensor(Shape{1, 3, 2, 2}, rng));
    auto b = g.leaf(oracles::random_tensor(Shape{1, 5, 2, 2}, rng));
    CHECK(g.value(g.concat_channels({a, b})).shape() == Shape{1, 8, 2, 2});
    CHECK_THROWS_AS(g.concat_channels({a, g.leaf(Tensor<double>(Shape{1, 2, 3, 2}))}), ShapeError);

    // commutativity is bit-exact
    auto c = g.leaf(oracles::random_tensor(Shape{1, 3, 2, 2}, rng));
    CHECK(g.value(g.add(a, c)) == g.value(g.add(c, a)));
    CHECK(g.value(g.multiply(a, c)) == g.value(g.multiply(c, a)));

    CHECK_THROWS_AS(g.add(a, b), ShapeError);
}

TEST_CASE("batchnorm normalization, zero gamma, and infer closed form", "[tensor_ops]") {
    Rng rng(29);
    auto x = oracles::random_tensor(Shape{2, 3, 4, 4}, rng);
    Tensor<double> rm(Shape{3}), rv = Tensor<double>::full(Shape{3}, 1.0);
    G g;
    auto gamma = g.leaf(Tensor<double>::full(Shape{3}, 1.0));
    auto beta = g.leaf(Tensor<double>(Shape{3}));
    // Near-zero epsilon isolates the pure normalization definition.
    auto y = g.batchnorm(g.leaf(x), gamma, beta, &rm, &rv, BnMode::kTrain, true, 1e-12, 0.99);
    const auto& out = g.value(y);
    int64_t plane = 16, n = 2;
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t i = 0; i < plane; ++i) mean += out[(ni * 3 + c) * plane + i];
        mean /= static_cast<double>(n * plane);
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t i = 0; i < plane; ++i) {
                double d = out[(ni * 3 + c) * plane + i] - mean;
                var += d * d;
            }
        var /= static_cast<double>(n * plane);
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-6);
        // momentum 0.99 folds 1% of the batch stats into the running estimates
        CHECK(rm[c] != 0.0);
        CHECK(rv[c] != 1.0);
    }

    // gamma = 0 -> output equals beta everywhere
    G g2;
    Tensor<double> rm2(Shape{3}), rv2 = Tensor<double>::full(Shape{3}, 1.0);
    auto y2 = g2.batchnorm(g2.leaf(x), g2.leaf(Tensor<double>(Shape{3})),
                           g2.leaf(Tensor<double>::full(Shape{3}, 0.射击125)), &rm2, &rv2,
                           BnMode::kTrain, false, 1e-3, 0.99);
    const auto& out2 = g2.value(y2);
    for (int64_t i = 0; i < out2.size(); ++i) CHECK(out2[i] == 0.125);

    // infer mode matches the closed-form formula
    Tensor<double> rm3(Shape{3}), rv3(Shape{3});
    for (int64_t c = 0; c < 3; ++c) {
        rm3[c] = 0.1 * static_cast<double>(c + 1);
        rv3[c] = 0.5 + 0.25 * static_cast<double>(c);
    }
    auto gm = oracles::random_tensor(Shape{3}, rng);
    auto bt = oracles::random_tensor(Shape{3}, rng);
    G g3;
    auto y3 = g3.batchnorm(g3.leaf(x), g3.leaf(gm), g3.leaf(bt), &rm3, &rv3, BnMode::kInfer, false,
                           1e-3, 0.99);
    const auto& out3 = g3.value(y3);
    for (int64_t ni = 0; ni < 2; ++ni)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < plane; ++i) {
                double xc = x[(ni * 3 + c) * plane + i];
                double want = (xc - rm3[c]) / std::sqrt(rv3[c] + 1e-3) * gm[c] + bt[c];
                CHECK(std::abs(out3[(ni * 3 + c) * plane + i] - want) <= 1e-12);
            }

    // channel mismatch
    G g4;
    Tensor<double> rm4(Shape{2}), rv4(Shape{2});
    CHECK_THROWS_AS(g4.batchnorm(g4.leaf(x), g4.leaf(Tensor<double>(Shape{2})),
                                 g4.leaf(Tensor<double>(Shape{2})), &rm4, &rv4, BnMode::kTrain,
                                 false, 1e-3, 0.99),
                    ShapeError);
}
