#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "focalconv/tensor.hpp"
#include "helpers.hpp"

using namespace focalconv;
using testutil::gradcheck_max_rel;
using testutil::probe_loss;
using testutil::random_tensor;

// Every layer op: analytic gradient vs central finite differences (h=1e-4)
// on several random shapes, relative error < 1e-4.
namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("gradcheck matmul_linear") {
    const Shape xs[] = {{3, 4}, {2, 3, 5}, {6}};
    const std::int64_t outs[] = {2, 4, 3};
    for (int i = 0; i < 3; ++i) {
        Tensor x = random_tensor(xs[i], 201 + static_cast<std::uint64_t>(i) * 7, true);
        Tensor w = random_tensor({xs[i].back(), outs[i]}, 301 + static_cast<std::uint64_t>(i), true);
        Tensor b = random_tensor({outs[i]}, 401 + static_cast<std::uint64_t>(i), true);
        auto loss = [&] { return probe_loss(matmul_linear(x, w, b), 77); };
        CHECK(gradcheck_max_rel(loss, {x, w, b}) < kTol);
    }
}

TEST_CASE("gradcheck conv2d") {
    struct Case {
        Shape x, w;
        int stride, pad;
    };
    const Case cases[] = {
        {{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 1},
        {{2, 1, 6, 4}, {2, 1, 3, 3}, 2, 1},
        {{1, 3, 4, 4}, {2, 3, 1, 1}, 1, 0},
    };
    int idx = 0;
    for (const auto& c : cases) {
        Tensor x = random_tensor(c.x, 501 + static_cast<std::uint64_t>(idx), true);
        Tensor w = random_tensor(c.w, 601 + static_cast<std::uint64_t>(idx), true);
        Tensor b = random_tensor({c.w[0]}, 701 + static_cast<std::uint64_t>(idx), true);
        auto loss = [&] { return probe_loss(conv2d(x, w, b, c.stride, c.pad), 78); };
        CHECK(gradcheck_max_rel(loss, {x, w, b}) < kTol);
        ++idx;
    }
}

TEST_CASE("gradcheck depthwise_conv2d") {
    struct Case {
        Shape x;
        int k, stride, pad;
    };
    const Case cases[] = {
        {{1, 3, 5, 5}, 3, 1, 1},
        {{2, 2, 6, 4}, 3, 2, 1},
        {{1, 4, 3, 3}, 3, 1, 0},
    };
    int idx = 0;
    for (const auto& c : cases) {
        Tensor x = random_tensor(c.x, 801 + static_cast<std::uint64_t>(idx), true);
        Tensor w = random_tensor({c.x[1], 1, c.k, c.k}, 901 + static_cast<std::uint64_t>(idx), true);
        Tensor b = random_tensor({c.x[1]}, 1001 + static_cast<std::uint64_t>(idx), true);
        auto loss = [&] { return probe_loss(depthwise_conv2d(x, w, b, c.stride, c.pad), 79); };
        CHECK(gradcheck_max_rel(loss, {x, w, b}) < kTol);
        ++idx;
    }
}

TEST_CASE("gradcheck pointwise activations") {
    const Shape shapes[] = {{7}, {3, 4}, {2, 2, 3}};
    for (int i = 0; i < 3; ++i) {
        Tensor x = random_tensor(shapes[i], 1101 + static_cast<std::uint64_t>(i), true, -2.0, 2.0);
        auto gelu_loss = [&] { return probe_loss(gelu(x), 80); };
        CHECK(gradcheck_max_rel(gelu_loss, {x}) < kTol);
        auto sig_loss = [&] { return probe_loss(sigmoid(x), 81); };
        CHECK(gradcheck_max_rel(sig_loss, {x}) < kTol);
    }
}

TEST_CASE("gradcheck softmax") {
    const Shape shapes[] = {{5}, {3, 4}, {2, 3, 4}};
    const int axes[] = {0, 1, 2};
    for (int i = 0; i < 3; ++i) {
        Tensor x = random_tensor(shapes[i], 1201 + static_cast<std::uint64_t>(i), true, -2.0, 2.0);
        auto loss = [&] { return probe_loss(softmax(x, axes[i]), 82); };
        CHECK(gradcheck_max_rel(loss, {x}) < kTol);
    }
}

TEST_CASE("gradcheck layer_norm") {
    const Shape shapes[] = {{6}, {2, 5}, {2, 3, 4, 4}};
    const int axes[] = {0, 1, 1};
    for (int i = 0; i < 3; ++i) {
        const std::int64_t c = shapes[i][static_cast<std::size_t>(axes[i])];
        Tensor x = random_tensor(shapes[i], 1301 + static_cast<std::uint64_t>(i), true);
        Tensor g = random_tensor({c}, 1401 + static_cast<std::uint64_t>(i), true);
        Tensor b = random_tensor({c}, 1501 + static_cast<std::uint64_t>(i), true);
        auto loss = [&] { return probe_loss(layer_norm(x, g, b, 1e-5, axes[i]), 83); };
        CHECK(gradcheck_max_rel(loss, {x, g, b}) < kTol);
    }
}

TEST_CASE("gradcheck global_avg_pool") {
    const Shape shapes[] = {{1, 2, 3, 3}, {2, 3, 4, 2}, {1, 1, 1, 5}};
    for (int i = 0; i < 3; ++i) {
        Tensor x = random_tensor(shapes[i], 1601 + static_cast<std::uint64_t>(i), true);
        auto loss = [&] { return probe_loss(global_avg_pool(x), 84); };
        CHECK(gradcheck_max_rel(loss, {x}) < kTol);
    }
}

TEST_CASE("gradcheck elementwise_mul with broadcast") {
    struct Case {
        Shape a, b;
    };
    const Case cases[] = {
        {{2, 3, 4, 4}, {2, 3, 1, 1}},
        {{2, 3, 4, 4}, {2, 1, 4, 4}},
        {{3, 5}, {3, 5}},
    };
    int idx = 0;
    for (const auto& c : cases) {
        Tensor a = random_tensor(c.a, 1701 + static_cast<std::uint64_t>(idx), true);
        Tensor b = random_tensor(c.b, 1801 + static_cast<std::uint64_t>(idx), true);
        auto loss = [&] { return probe_loss(elementwise_mul(a, b), 85); };
        CHECK(gradcheck_max_rel(loss, {a, b}) < kTol);
        ++idx;
    }
}

TEST_CASE("gradcheck add sub and shape ops") {
    Tensor a = random_tensor({2, 3, 2, 2}, 1901, true);
    Tensor b = random_tensor({2, 3, 1, 1}, 1902, true);
    auto add_loss = [&] { return probe_loss(add(a, b), 86); };
    CHECK(gradcheck_max_rel(add_loss, {a, b}) < kTol);
    auto sub_loss = [&] { return probe_loss(sub(a, b), 87); };
    CHECK(gradcheck_max_rel(sub_loss, {a, b}) < kTol);

    Tensor x = random_tensor({2, 4, 3}, 1903, true);
    auto perm_loss = [&] { return probe_loss(permute(x, {1, 2, 0}), 88); };
    CHECK(gradcheck_max_rel(perm_loss, {x}) < kTol);
    auto reshape_loss = [&] { return probe_loss(reshape(x, {6, 4}), 89); };
    CHECK(gradcheck_max_rel(reshape_loss, {x}) < kTol);
    auto narrow_loss = [&] { return probe_loss(narrow(x, 1, 1, 2), 90); };
    CHECK(gradcheck_max_rel(narrow_loss, {x}) < kTol);

    Tensor s = random_tensor({1, 3, 1, 2}, 1904, true);
    auto bc_loss = [&] { return probe_loss(broadcast_to(s, {2, 3, 2, 2}), 91); };
    CHECK(gradcheck_max_rel(bc_loss, {s}) < kTol);
}
