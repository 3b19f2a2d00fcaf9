#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "focalconv/engine.hpp"
#include "helpers.hpp"

using namespace focalconv;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("focalconv_engine_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// log-sum-exp computed independently, one scalar at a time
double ce_oracle(const std::vector<std::vector<double>>& logits, const std::vector<int>& labels,
                 const std::vector<double>& weights) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t r = 0; r < logits.size(); ++r) {
        double mx = logits[r][0];
        for (double v : logits[r]) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : logits[r]) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        const double w = weights[static_cast<std::size_t>(labels[r])];
        num += w * (lse - logits[r][static_cast<std::size_t>(labels[r])]);
        den += w;
    }
    return num / den;
}

}  // namespace

TEST_CASE("weighted ce: uniform weights reduce to mean cross-entropy") {
    Tensor logits = random_tensor({4, 3}, 11, false, -2.0, 2.0);
    std::vector<int> labels{0, 2, 1, 0};
    Tensor uniform = Tensor::full({3}, 1.0);
    std::vector<std::vector<double>> rows(4, std::vector<double>(3));
    for (int r = 0; r < 4; ++r)
        for (int j = 0; j < 3; ++j) rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] = logits.at({r, j});
    const double expect = ce_oracle(rows, labels, {1.0, 1.0, 1.0});
    CHECK(weighted_ce(logits, labels, uniform).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("weighted ce: saturated logits give near-zero loss") {
    Tensor logits = Tensor::from_data({2, 2}, {30.0, 0.0, 0.0, 30.0});
    Tensor w = Tensor::ones({2});
    CHECK(weighted_ce(logits, {0, 1}, w).item() < 1e-4);
}

TEST_CASE("weighted ce: hand value for the two-sample case") {
    Tensor logits = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor w = Tensor::from_data({2}, {1.0, 3.0});
    // each sample: -log(e^1/(e^1+e^0)) = log(1+e^-1)
    const double per_sample = std::log(1.0 + std::exp(-1.0));
    const double expect = (1.0 * per_sample + 3.0 * per_sample) / 4.0;
    CHECK(weighted_ce(logits, {0, 1}, w).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("weighted ce: constant weights cancel") {
    Tensor logits = random_tensor({5, 4}, 21, false, -3.0, 3.0);
    std::vector<int> labels{3, 1, 0, 2, 1};
    const double a = weighted_ce(logits, labels, Tensor::full({4}, 1.0)).item();
    const double b = weighted_ce(logits, labels, Tensor::full({4}, 7.5)).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("weighted ce: loss is invariant under within-batch permutation") {
    Tensor logits = random_tensor({6, 3}, 31, false, -2.0, 2.0);
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    Tensor w = Tensor::from_data({3}, {0.5, 1.0, 2.5});
    const double base = weighted_ce(logits, labels, w).item();

    std::vector<int> perm{5, 3, 0, 4, 2, 1};
    std::vector<double> shuffled(18);
    std::vector<int> shuffled_labels(6);
    for (int r = 0; r < 6; ++r) {
        for (int j = 0; j < 3; ++j) {
            shuffled[static_cast<std::size_t>(r * 3 + j)] =
                logits.at({perm[static_cast<std::size_t>(r)], j});
        }
        shuffled_labels[static_cast<std::size_t>(r)] =
            labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])];
    }
    const double permuted =
        weighted_ce(Tensor::from_data({6, 3}, shuffled), shuffled_labels, w).item();
    CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("weighted ce error contracts") {
    Tensor w = Tensor::ones({2});
    Tensor bad = Tensor::from_data({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS(weighted_ce(bad, {0}, w), NumericError);

    Tensor logits = Tensor::from_data({1, 2}, {0.0, 0.0});
    CHECK_THROWS_AS(weighted_ce(logits, {2}, w), DataError);
    CHECK_THROWS_AS(weighted_ce(logits, {0}, Tensor::zeros({2})), ConfigError);
    CHECK_THROWS_AS(weighted_ce(logits, {0, 1}, w), DimensionError);
}

TEST_CASE("sgd: zero momentum is the plain update") {
    ParamStore store;
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    store.add("p", p);
    p.node()->grad = {0.5, 0.25};
    OptimizerState st = OptimizerState::create(store, 0.1, 0.0);
    sgd_step(store, st);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-12));
    CHECK(p.data()[1] == doctest::Approx(-2.0 - 0.1 * 0.25).epsilon(1e-12));
}

TEST_CASE("sgd: constant gradient builds the geometric-series velocity") {
    ParamStore store;
    Tensor p = Tensor::from_data({1}, {0.0}, true);
    store.add("p", p);
    OptimizerState st = OptimizerState::create(store, 0.001, 0.9);
    const double g = 2.0;
    const int steps = 12;
    for (int t = 0; t < steps; ++t) {
        p.node()->grad = {g};
        sgd_step(store, st);
    }
    const double expect = g * (1.0 - std::pow(0.9, steps)) / 0.1;
    CHECK(st.velocity[0].data()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("sgd: zero gradient from rest leaves parameters; velocity decays") {
    ParamStore store;
    Tensor p = Tensor::from_data({2}, {3.0, -1.0}, true);
    store.add("p", p);
    OptimizerState st = OptimizerState::create(store, 0.01, 0.9);
    sgd_step(store, st);  // no grads accumulated at all
    CHECK(p.data() == std::vector<double>{3.0, -1.0});

    p.node()->grad = {1.0, 1.0};
    sgd_step(store, st);
    const double v1 = st.velocity[0].data()[0];
    p.zero_grad();
    sgd_step(store, st);
    CHECK(st.velocity[0].data()[0] == doctest::Approx(0.9 * v1).epsilon(1e-12));
}

TEST_CASE("sgd: lr zero changes nothing") {
    ParamStore store;
    Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    store.add("p", p);
    p.node()->grad = {9.0, 9.0, 9.0};
    OptimizerState st = OptimizerState::create(store, 0.0, 0.9);
    sgd_step(store, st);
    CHECK(p.data() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("checkpoint round-trip is bit-exact; corrupt magic raises") {
    const fs::path dir = temp_dir("ckpt");
    ParamStore store;
    store.add("a.w", random_tensor({3, 4}, 41, true));
    store.add("a.b", random_tensor({4}, 42, true));
    OptimizerState st = OptimizerState::create(store, 0.05, 0.8);
    st.velocity[0].data()[2] = 0.75;

    const std::string path = (dir / "test.ckpt").string();
    save_checkpoint(store, &st, path, {{"note", "hello"}});
    Checkpoint back = load_checkpoint(path);
    REQUIRE(back.params.size() == 2);
    CHECK(back.params.get("a.w").data() == store.get("a.w").data());
    CHECK(back.params.get("a.b").data() == store.get("a.b").data());
    REQUIRE(back.optimizer.has_value());
    CHECK(back.optimizer->lr == 0.05);
    CHECK(back.optimizer->momentum == 0.8);
    CHECK(back.optimizer->velocity[0].data() == st.velocity[0].data());
    CHECK(back.meta.at("note") == "hello");

    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "XXXX garbage";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint((dir / "bad.ckpt").string()), FormatError);
}

TEST_CASE("forward after checkpoint round-trip is bit-identical") {
    const fs::path dir = temp_dir("roundtrip");
    FocalConvNet net = build(ModelConfig::tiny(), 51);
    const std::string path = (dir / "net.ckpt").string();
    save_checkpoint(net.params, nullptr, path, {{"config", net.config.to_json()}});

    Checkpoint ckpt = load_checkpoint(path);
    FocalConvNet restored = build(ModelConfig::from_json(ckpt.meta.at("config")), 999);
    load_params(restored, ckpt.params);

    for (int i = 0; i < 10; ++i) {
        Tensor x = random_tensor({1, 3, 32, 32}, 60 + static_cast<std::uint64_t>(i), false, 0.0, 1.0);
        Tensor a = forward(net, x);
        Tensor b = forward(restored, x);
        CHECK(a.data() == b.data());
    }
}

TEST_CASE("epochs=0 produces an evaluation-only record") {
    const fs::path dir = temp_dir("e0");
    Manifest data = synth_dataset(3, 3, 32, 7, (dir / "data").string());
    ModelConfig cfg = ModelConfig::tiny();
    cfg.num_classes = 3;
    FocalConvNet net = build(cfg, 3);
    TrainOptions opts;
    opts.epochs = 0;
    opts.batch_size = 4;
    opts.output_dir = (dir / "run").string();
    TrainResult res = train(net, data, nullptr, opts);
    REQUIRE(res.history.size() == 1);
    CHECK(res.history[0].epoch == 0);
    CHECK(std::isfinite(res.history[0].loss));
    CHECK(fs::exists(dir / "run" / "history.csv"));
    CHECK(fs::exists(dir / "run" / "best.ckpt"));
}

TEST_CASE("two runs with the same seed are bit-for-bit identical") {
    const fs::path dir = temp_dir("det");
    Manifest data = synth_dataset(3, 4, 32, 11, (dir / "data").string());
    ModelConfig cfg = ModelConfig::tiny();
    cfg.num_classes = 3;
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 4;
    opts.seed = 5;

    FocalConvNet net_a = build(cfg, opts.seed);
    TrainResult a = train(net_a, data, nullptr, opts);
    FocalConvNet net_b = build(cfg, opts.seed);
    TrainResult b = train(net_b, data, nullptr, opts);
    CHECK(history_csv(a.history) == history_csv(b.history));
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].loss == b.history[i].loss);  // exact
    }
    for (std::size_t i = 0; i < net_a.params.size(); ++i) {
        CHECK(net_a.params.items()[i].second.data() == net_b.params.items()[i].second.data());
    }
}

TEST_CASE("divergence aborts with a diagnostic naming the batch") {
    const fs::path dir = temp_dir("diverge");
    Manifest data = synth_dataset(4, 3, 32, 19, (dir / "data").string());
    FocalConvNet net = build(ModelConfig::tiny(), 2);
    TrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 4;
    opts.lr = 1e18;  // guaranteed blow-up
    try {
        train(net, data, nullptr, opts);
        CHECK(false);
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("batch") != std::string::npos);
        CHECK(msg.find("epoch") != std::string::npos);
    }
}

TEST_CASE("training a couple of epochs keeps finite loss and writes history") {
    const fs::path dir = temp_dir("short");
    Manifest data = synth_dataset(4, 4, 32, 13, (dir / "data").string());
    FocalConvNet net = build(ModelConfig::tiny(), 1);
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 4;
    opts.seed = 1;
    opts.output_dir = (dir / "run").string();
    TrainResult res = train(net, data, nullptr, opts);
    REQUIRE(res.history.size() == 2);
    for (const auto& rec : res.history) CHECK(std::isfinite(rec.loss));
    CHECK(fs::exists(dir / "run" / "history.csv"));
    CHECK(fs::exists(dir / "run" / "history.json"));
    CHECK(fs::exists(dir / "run" / "last.ckpt"));

    std::ifstream csv(dir / "run" / "history.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "epoch,loss,acc,weighted_f1,mcc");
}
