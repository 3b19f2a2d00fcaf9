#include "focalconv/nn.hpp"

namespace focalconv {

namespace {

void check_nchw(const char* who, const Tensor& x, std::int64_t channels) {
    if (x.rank() != 4) {
        throw DimensionError(std::string(who) + ": expected (N,C,H,W), got " +
                             shape_str(x.shape()));
    }
    if (x.dim(1) != channels) {
        throw DimensionError(std::string(who) + ": input " + shape_str(x.shape()) +
                             " does not carry " + std::to_string(channels) + " channels");
    }
}

}  // namespace

Tensor se_forward(const Tensor& x, const SEParams& p) {
    check_nchw("se_forward", x, p.reduce_w.dim(1));
    Tensor pooled = global_avg_pool(x);  // (N,E,1,1)
    Tensor z = gelu(conv2d(pooled, p.reduce_w, p.reduce_b, 1, 0));
    Tensor gate = sigmoid(conv2d(z, p.expand_w, p.expand_b, 1, 0));
    return elementwise_mul(x, gate);  // (N,E,1,1) broadcast over H,W
}

Tensor conv_block_forward(const Tensor& x, const ConvBlockParams& p) {
    check_nchw("conv_block_forward", x, p.channels());
    Tensor h = p.use_pre_norm ? layer_norm(x, p.norm_gamma, p.norm_beta, p.norm_eps, 1) : x;
    h = gelu(conv2d(h, p.pw1_w, p.pw1_b, 1, 0));
    h = gelu(depthwise_conv2d(h, p.dw_w, p.dw_b, 1, 1));
    h = se_forward(h, p.se);
    h = conv2d(h, p.pw2_w, p.pw2_b, 1, 0);
    return p.use_residual ? add(x, h) : h;
}

ContextAggregation context_aggregate(const Tensor& x, const FocalModulationParams& p) {
    const std::int64_t c = p.channels();
    check_nchw("context_aggregate", x, c);
    const std::int64_t g = p.gate_channels();
    const std::int64_t n = p.focal_levels;

    Tensor proj = conv2d(x, p.proj_in_w, p.proj_in_b, 1, 0);
    ContextAggregation out;
    out.query = narrow(proj, 1, 0, c);
    out.gates = narrow(proj, 1, 2 * c, (n + 1) * g);

    Tensor m = narrow(proj, 1, c, c);  // M_0
    out.maps.reserve(static_cast<std::size_t>(n) + 2);
    out.maps.push_back(m);
    for (std::int64_t i = 0; i < n; ++i) {
        const auto k = static_cast<int>(p.level_w[static_cast<std::size_t>(i)].dim(2));
        m = gelu(depthwise_conv2d(m, p.level_w[static_cast<std::size_t>(i)],
                                  p.level_b[static_cast<std::size_t>(i)], 1, (k - 1) / 2));
        out.maps.push_back(m);
    }
    // global context: mean of M_n tiled back over the spatial grid
    out.maps.push_back(broadcast_to(global_avg_pool(m), m.shape()));
    return out;
}

Tensor focal_modulation_forward(const Tensor& x, const FocalModulationParams& p) {
    check_nchw("focal_modulation_forward", x, p.channels());
    Tensor h = p.use_pre_norm ? layer_norm(x, p.norm_gamma, p.norm_beta, p.norm_eps, 1) : x;
    ContextAggregation agg = context_aggregate(h, p);

    const std::int64_t g = p.gate_channels();
    const std::int64_t n = p.focal_levels;
    // sum over levels 1..n+1; M_0 contributes only through M_1
    Tensor modulator;
    for (std::int64_t i = 1; i <= n + 1; ++i) {
        Tensor gate = narrow(agg.gates, 1, (i - 1) * g, g);
        Tensor term = elementwise_mul(agg.maps[static_cast<std::size_t>(i)], gate);
        modulator = modulator.defined() ? add(modulator, term) : term;
    }
    modulator = conv2d(modulator, p.proj_ctx_w, p.proj_ctx_b, 1, 0);

    Tensor y = elementwise_mul(agg.query, modulator);
    if (p.use_out_proj) y = conv2d(y, p.proj_out_w, p.proj_out_b, 1, 0);
    return p.use_residual ? add(x, y) : y;
}

}  // namespace focalconv
