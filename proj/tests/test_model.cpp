#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "focalconv/model.hpp"
#include "helpers.hpp"

using namespace focalconv;
using testutil::random_tensor;

TEST_CASE("tiny config builds and maps (1,3,32,32) to (1,4)") {
    FocalConvNet net = build(ModelConfig::tiny(), 5);
    Tensor x = random_tensor({1, 3, 32, 32}, 6, false, 0.0, 1.0);
    std::vector<std::pair<std::string, Shape>> trace;
    Tensor logits = forward_trace(net, x, &trace);
    CHECK(logits.shape() == Shape{1, 4});
    for (double v : logits.data()) CHECK(std::isfinite(v));

    // stem halves once, each stage halves once more
    REQUIRE(trace.size() == 3);
    CHECK(trace[0].second == Shape{1, 8, 16, 16});
    CHECK(trace[1].second == Shape{1, 16, 8, 8});
    CHECK(trace[2].second == Shape{1, 32, 4, 4});
}

TEST_CASE("single-stage config builds and runs") {
    ModelConfig cfg;
    cfg.stage_depths = {1};
    cfg.stage_channels = {16};
    cfg.stem_channels = 8;
    cfg.num_classes = 4;
    cfg.input_size = {32, 32};
    FocalConvNet net = build(cfg, 1);
    Tensor x = random_tensor({2, 3, 32, 32}, 2, false, 0.0, 1.0);
    CHECK(forward(net, x).shape() == Shape{2, 4});
}

TEST_CASE("same seed builds bit-identical parameters") {
    FocalConvNet a = build(ModelConfig::tiny(), 99);
    FocalConvNet b = build(ModelConfig::tiny(), 99);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params.items()[i].first == b.params.items()[i].first);
        CHECK(a.params.items()[i].second.data() == b.params.items()[i].second.data());
    }
    FocalConvNet c = build(ModelConfig::tiny(), 100);
    CHECK(c.params.items()[0].second.data() != a.params.items()[0].second.data());
}

TEST_CASE("zeroed head emits the bias row for any image") {
    FocalConvNet net = build(ModelConfig::tiny(), 7);
    std::fill(net.head.fc_w.data().begin(), net.head.fc_w.data().end(), 0.0);
    net.head.fc_b.data() = {0.5, -1.0, 2.0, 0.25};
    Tensor x1 = random_tensor({1, 3, 32, 32}, 8, false, 0.0, 1.0);
    Tensor x2 = random_tensor({1, 3, 32, 32}, 9, false, 0.0, 1.0);
    for (const Tensor& x : {x1, x2}) {
        Tensor logits = forward(net, x);
        CHECK(logits.data() == std::vector<double>{0.5, -1.0, 2.0, 0.25});
    }
}

TEST_CASE("permuting the batch permutes logits rows identically") {
    FocalConvNet net = build(ModelConfig::tiny(), 11);
    Tensor a = random_tensor({1, 3, 32, 32}, 12, false, 0.0, 1.0);
    Tensor b = random_tensor({1, 3, 32, 32}, 13, false, 0.0, 1.0);
    Tensor c = random_tensor({1, 3, 32, 32}, 14, false, 0.0, 1.0);

    auto stack = [](const std::vector<Tensor>& imgs) {
        std::vector<double> data;
        for (const auto& t : imgs) data.insert(data.end(), t.data().begin(), t.data().end());
        return Tensor::from_data({static_cast<std::int64_t>(imgs.size()), 3, 32, 32},
                                 std::move(data));
    };
    Tensor fwd_abc = forward(net, stack({a, b, c}));
    Tensor fwd_cab = forward(net, stack({c, a, b}));
    const std::int64_t k = fwd_abc.dim(1);
    for (std::int64_t j = 0; j < k; ++j) {
        CHECK(fwd_abc.at({0, j}) == fwd_cab.at({1, j}));
        CHECK(fwd_abc.at({1, j}) == fwd_cab.at({2, j}));
        CHECK(fwd_abc.at({2, j}) == fwd_cab.at({0, j}));
    }
}

TEST_CASE("forward output is invariant to batch size for a fixed image") {
    FocalConvNet net = build(ModelConfig::tiny(), 21);
    Tensor img = random_tensor({1, 3, 32, 32}, 22, false, 0.0, 1.0);
    Tensor other = random_tensor({1, 3, 32, 32}, 23, false, 0.0, 1.0);
    std::vector<double> both = img.data();
    both.insert(both.end(), other.data().begin(), other.data().end());

    Tensor solo = forward(net, img);
    Tensor pair = forward(net, Tensor::from_data({2, 3, 32, 32}, std::move(both)));
    for (std::int64_t j = 0; j < solo.dim(1); ++j) {
        CHECK(solo.at({0, j}) == pair.at({0, j}));
    }
}

TEST_CASE("init scheme: bias zeros, norm ones, conv variance near 2/fan_in") {
    std::mt19937_64 rng(31);
    Tensor b = init_param(InitKind::Zeros, {64}, 64, rng);
    for (double v : b.data()) CHECK(v == 0.0);
    Tensor g = init_param(InitKind::Ones, {64}, 64, rng);
    for (double v : g.data()) CHECK(v == 1.0);

    const std::int64_t fan_in = 288;  // 3x3 conv over 32 channels
    Tensor w = init_param(InitKind::ConvWeight, {64, 32, 3, 3}, fan_in, rng);  // 18432 draws
    double mean = 0.0;
    for (double v : w.data()) mean += v;
    mean /= static_cast<double>(w.size());
    double var = 0.0;
    for (double v : w.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.size());
    const double target = 2.0 / static_cast<double>(fan_in);
    CHECK(var == doctest::Approx(target).epsilon(0.10));

    Tensor lw = init_param(InitKind::LinearWeight, {100, 100}, 100, rng);
    const double bound = std::sqrt(1.0 / 100.0);
    for (double v : lw.data()) {
        CHECK(v >= -bound);
        CHECK(v <= bound);
    }
}

TEST_CASE("config validation fires before allocation") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.input_size = {30, 32};  // not divisible by 2^(stages+1)
    CHECK_THROWS_AS(build(cfg, 0), ConfigError);

    ModelConfig bad_kernels = ModelConfig::tiny();
    bad_kernels.focal_kernels = {3, 3};  // three levels expect three kernels
    CHECK_THROWS_AS(bad_kernels.validate(), ConfigError);

    ModelConfig even_kernel = ModelConfig::tiny();
    even_kernel.focal_kernels = {3, 4, 3};
    CHECK_THROWS_AS(even_kernel.validate(), ConfigError);

    ModelConfig mismatched = ModelConfig::tiny();
    mismatched.stage_channels = {16};
    CHECK_THROWS_AS(mismatched.validate(), ConfigError);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.gates_per_channel = true;
    ModelConfig back = ModelConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK(back.stage_depths == cfg.stage_depths);
    CHECK(back.gates_per_channel);

    CHECK_THROWS_AS(ModelConfig::from_json("{\"stage_depht\": [1]}"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::from_json("not json"), ConfigError);
    CHECK_THROWS_AS(ModelConfig::from_json("{\"num_classes\": \"eleven\"}"), ConfigError);
}

TEST_CASE("wrong input shape raises a dimension error") {
    FocalConvNet net = build(ModelConfig::tiny(), 41);
    Tensor bad = random_tensor({1, 3, 16, 16}, 42);
    CHECK_THROWS_AS(forward(net, bad), DimensionError);
    Tensor bad_c = random_tensor({1, 1, 32, 32}, 43);
    CHECK_THROWS_AS(forward(net, bad_c), DimensionError);
}

TEST_CASE("default config: stage ladder and block counts") {
    const ModelConfig cfg;
    CHECK(cfg.stage_depths == std::vector<int>{2, 2, 5, 2});
    int total_blocks = 0;
    for (int d : cfg.stage_depths) total_blocks += d;
    CHECK(total_blocks == 11);
    CHECK(cfg.focal_levels == 3);
    CHECK(cfg.num_classes == 11);
    CHECK(cfg.input_size == std::array<int, 2>{224, 224});
    cfg.validate();
}
