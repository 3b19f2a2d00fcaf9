#include "focalconv/gradcheck.hpp"

#include <cmath>
#include <random>

#include "focalconv/engine.hpp"
#include "focalconv/nn.hpp"

namespace focalconv {

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad, double lo = -1.0,
                   double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    for (auto& v : data) v = dist(rng);
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// Freezes a random projection so the scalar loss is identical across the
// analytic pass and every finite-difference evaluation.
std::function<Tensor()> probe_loss_of(std::function<Tensor()> fwd, std::mt19937_64& rng) {
    Tensor r;
    {
        NoGradGuard guard;
        r = rand_tensor(fwd().shape(), rng, false);
    }
    return [fwd = std::move(fwd), r] { return sum(elementwise_mul(fwd(), r)); };
}

}  // namespace

double finite_difference_max_rel(const std::function<Tensor()>& make_loss,
                                 std::vector<Tensor> leaves, double h) {
    for (auto& leaf : leaves) leaf.zero_grad();
    backward(make_loss());

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& leaf : leaves) {
        analytic.push_back(leaf.has_grad() ? leaf.grad()
                                           : std::vector<double>(leaf.data().size(), 0.0));
    }

    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + h;
            const double lp = make_loss().item();
            data[i] = keep - h;
            const double lm = make_loss().item();
            data[i] = keep;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel =
                std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

namespace {

ConvBlockParams random_conv_block(std::int64_t c, int expansion, int se_ratio,
                                  std::mt19937_64& rng) {
    const std::int64_t e = c * expansion;
    const std::int64_t r = e / se_ratio;
    ConvBlockParams p;
    p.norm_gamma = rand_tensor({c}, rng, true, 0.5, 1.5);
    p.norm_beta = rand_tensor({c}, rng, true, -0.2, 0.2);
    p.pw1_w = rand_tensor({e, c, 1, 1}, rng, true, -0.5, 0.5);
    p.pw1_b = rand_tensor({e}, rng, true, -0.1, 0.1);
    p.dw_w = rand_tensor({e, 1, 3, 3}, rng, true, -0.5, 0.5);
    p.dw_b = rand_tensor({e}, rng, true, -0.1, 0.1);
    p.se.reduce_w = rand_tensor({r, e, 1, 1}, rng, true, -0.5, 0.5);
    p.se.reduce_b = rand_tensor({r}, rng, true, -0.1, 0.1);
    p.se.expand_w = rand_tensor({e, r, 1, 1}, rng, true, -0.5, 0.5);
    p.se.expand_b = rand_tensor({e}, rng, true, -0.1, 0.1);
    p.pw2_w = rand_tensor({c, e, 1, 1}, rng, true, -0.5, 0.5);
    p.pw2_b = rand_tensor({c}, rng, true, -0.1, 0.1);
    return p;
}

std::vector<Tensor> conv_block_leaves(const Tensor& x, const ConvBlockParams& p) {
    return {x,        p.norm_gamma, p.norm_beta,   p.pw1_w,       p.pw1_b,       p.dw_w,
            p.dw_b,   p.se.reduce_w, p.se.reduce_b, p.se.expand_w, p.se.expand_b, p.pw2_w,
            p.pw2_b};
}

FocalModulationParams random_focal_block(std::int64_t c, int levels, std::mt19937_64& rng) {
    FocalModulationParams p;
    p.focal_levels = levels;
    p.norm_gamma = rand_tensor({c}, rng, true, 0.5, 1.5);
    p.norm_beta = rand_tensor({c}, rng, true, -0.2, 0.2);
    const std::int64_t proj_c = 2 * c + (levels + 1);
    p.proj_in_w = rand_tensor({proj_c, c, 1, 1}, rng, true, -0.5, 0.5);
    p.proj_in_b = rand_tensor({proj_c}, rng, true, -0.1, 0.1);
    for (int i = 0; i < levels; ++i) {
        p.level_w.push_back(rand_tensor({c, 1, 3, 3}, rng, true, -0.5, 0.5));
        p.level_b.push_back(rand_tensor({c}, rng, true, -0.1, 0.1));
    }
    p.proj_ctx_w = rand_tensor({c, c, 1, 1}, rng, true, -0.5, 0.5);
    p.proj_ctx_b = rand_tensor({c}, rng, true, -0.1, 0.1);
    p.proj_out_w = rand_tensor({c, c, 1, 1}, rng, true, -0.5, 0.5);
    p.proj_out_b = rand_tensor({c}, rng, true, -0.1, 0.1);
    return p;
}

std::vector<Tensor> focal_block_leaves(const Tensor& x, const FocalModulationParams& p) {
    std::vector<Tensor> leaves{x, p.norm_gamma, p.norm_beta, p.proj_in_w, p.proj_in_b};
    for (std::size_t i = 0; i < p.level_w.size(); ++i) {
        leaves.push_back(p.level_w[i]);
        leaves.push_back(p.level_b[i]);
    }
    leaves.push_back(p.proj_ctx_w);
    leaves.push_back(p.proj_ctx_b);
    leaves.push_back(p.proj_out_w);
    leaves.push_back(p.proj_out_b);
    return leaves;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_battery(std::uint64_t seed, double tolerance) {
    std::mt19937_64 rng(seed);
    std::vector<GradCheckEntry> entries;
    auto record = [&](const std::string& name, double rel) {
        entries.push_back({name, rel, rel < tolerance});
    };

    for (int i = 0; i < 3; ++i) {
        const std::int64_t rows = 2 + i;
        const std::int64_t cin = 3 + i;
        const std::int64_t cout = 2 + i;
        Tensor x = rand_tensor({rows, cin}, rng, true);
        Tensor w = rand_tensor({cin, cout}, rng, true);
        Tensor b = rand_tensor({cout}, rng, true);
        record("linear/" + std::to_string(i),
               finite_difference_max_rel(
                   probe_loss_of([&] { return matmul_linear(x, w, b); }, rng), {x, w, b}));
    }

    {
        const struct {
            Shape x, w;
            int stride, pad;
        } cases[] = {
            {{1, 2, 5, 5}, {2, 2, 3, 3}, 1, 1},
            {{2, 1, 6, 4}, {2, 1, 3, 3}, 2, 1},
            {{1, 3, 4, 4}, {2, 3, 1, 1}, 1, 0},
        };
        int i = 0;
        for (const auto& c : cases) {
            Tensor x = rand_tensor(c.x, rng, true);
            Tensor w = rand_tensor(c.w, rng, true);
            Tensor b = rand_tensor({c.w[0]}, rng, true);
            record("conv2d/" + std::to_string(i++),
                   finite_difference_max_rel(
                       probe_loss_of([&] { return conv2d(x, w, b, c.stride, c.pad); }, rng),
                       {x, w, b}));
        }
    }

    {
        const struct {
            Shape x;
            int stride, pad;
        } cases[] = {{{1, 3, 5, 5}, 1, 1}, {{2, 2, 6, 4}, 2, 1}, {{1, 4, 4, 4}, 1, 1}};
        int i = 0;
        for (const auto& c : cases) {
            Tensor x = rand_tensor(c.x, rng, true);
            Tensor w = rand_tensor({c.x[1], 1, 3, 3}, rng, true);
            Tensor b = rand_tensor({c.x[1]}, rng, true);
            record("depthwise_conv2d/" + std::to_string(i++),
                   finite_difference_max_rel(
                       probe_loss_of([&] { return depthwise_conv2d(x, w, b, c.stride, c.pad); },
                                     rng),
                       {x, w, b}));
        }
    }

    for (int i = 0; i < 3; ++i) {
        Tensor x = rand_tensor({2, 4 + i}, rng, true, -2.0, 2.0);
        record("gelu/" + std::to_string(i),
               finite_difference_max_rel(probe_loss_of([&] { return gelu(x); }, rng), {x}));
        record("sigmoid/" + std::to_string(i),
               finite_difference_max_rel(probe_loss_of([&] { return sigmoid(x); }, rng), {x}));
        record("softmax/" + std::to_string(i),
               finite_difference_max_rel(probe_loss_of([&] { return softmax(x, 1); }, rng), {x}));
    }

    for (int i = 0; i < 3; ++i) {
        const std::int64_t n = 2 + i;
        const std::int64_t k = 3 + i;
        Tensor logits = rand_tensor({n, k}, rng, true, -2.0, 2.0);
        std::vector<int> labels;
        for (std::int64_t r = 0; r < n; ++r) {
            labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(k)));
        }
        Tensor weights = rand_tensor({k}, rng, false, 0.5, 2.0);
        record("softmax_ce/" + std::to_string(i),
               finite_difference_max_rel([&] { return weighted_ce(logits, labels, weights); },
                                         {logits}));
    }

    for (int i = 0; i < 3; ++i) {
        const std::int64_t c = 3 + i;
        Tensor x = rand_tensor({2, c, 3, 3}, rng, true);
        Tensor g = rand_tensor({c}, rng, true, 0.5, 1.5);
        Tensor b = rand_tensor({c}, rng, true, -0.2, 0.2);
        record("layer_norm/" + std::to_string(i),
               finite_difference_max_rel(
                   probe_loss_of([&] { return layer_norm(x, g, b, 1e-5, 1); }, rng), {x, g, b}));
    }

    for (int i = 0; i < 3; ++i) {
        Tensor x = rand_tensor({1 + i, 2, 3, 3}, rng, true);
        record("global_avg_pool/" + std::to_string(i),
               finite_difference_max_rel(probe_loss_of([&] { return global_avg_pool(x); }, rng),
                                         {x}));
    }

    {
        const struct {
            Shape a, b;
        } cases[] = {
            {{2, 3, 3, 3}, {2, 3, 1, 1}},
            {{2, 3, 3, 3}, {2, 1, 3, 3}},
            {{2, 3, 3, 3}, {1, 3, 1, 1}},
        };
        int i = 0;
        for (const auto& c : cases) {
            Tensor a = rand_tensor(c.a, rng, true);
            Tensor b = rand_tensor(c.b, rng, true);
            record("elementwise_mul_broadcast/" + std::to_string(i++),
                   finite_difference_max_rel(
                       probe_loss_of([&] { return elementwise_mul(a, b); }, rng), {a, b}));
        }
    }

    for (int i = 0; i < 3; ++i) {
        const std::int64_t c = 4;
        Tensor x = rand_tensor({1, c, 4 + i, 4}, rng, true);
        ConvBlockParams p = random_conv_block(c, 2, 2, rng);
        record("conv_block/" + std::to_string(i),
               finite_difference_max_rel(
                   probe_loss_of([&] { return conv_block_forward(x, p); }, rng),
                   conv_block_leaves(x, p)));
    }

    for (int i = 0; i < 3; ++i) {
        const std::int64_t c = 4;
        Tensor x = rand_tensor({1, c, 4 + i, 4}, rng, true);
        FocalModulationParams p = random_focal_block(c, 2, rng);
        record("focal_modulation/" + std::to_string(i),
               finite_difference_max_rel(
                   probe_loss_of([&] { return focal_modulation_forward(x, p); }, rng),
                   focal_block_leaves(x, p)));
    }

    return entries;
}

}  // namespace focalconv
