#ifndef FOCALCONV_NN_HPP
#define FOCALCONV_NN_HPP

#include <vector>

#include "focalconv/tensor.hpp"

namespace focalconv {

// Channel-reweighting gate from globally pooled statistics. The reduce/expand
// projections are stored as 1x1 conv weights (E/r,E,1,1) and (E,E/r,1,1).
struct SEParams {
    Tensor reduce_w, reduce_b;
    Tensor expand_w, expand_b;
};

// Inverted-bottleneck convolutional block: pointwise expand (C->E), depthwise
// 3x3, squeeze-and-excitation over E, pointwise project (E->C), pre-norm and
// residual around the whole thing.
struct ConvBlockParams {
    Tensor norm_gamma, norm_beta;  // unused when use_pre_norm is false
    Tensor pw1_w, pw1_b;           // (E,C,1,1)
    Tensor dw_w, dw_b;             // (E,1,3,3)
    SEParams se;
    Tensor pw2_w, pw2_b;           // (C,E,1,1)
    bool use_pre_norm = true;
    bool use_residual = true;
    double norm_eps = 1e-5;

    std::int64_t channels() const { return pw1_w.dim(1); }
    std::int64_t expanded() const { return pw1_w.dim(0); }
};

// Focal modulation block. One fused input projection produces the query q
// (C channels), the initial context map M_0 (C channels), and the level gates
// G (focal_levels+1 maps of gate_channels each, broadcast over C when
// single-channel). Level i refines context with a spatial-size-preserving
// depthwise conv + GeLU; the last map is the global average of M_n.
struct FocalModulationParams {
    Tensor norm_gamma, norm_beta;
    Tensor proj_in_w, proj_in_b;  // (2C+(n+1)*g, C, 1, 1)
    std::vector<Tensor> level_w;  // n entries, (C,1,k_i,k_i)
    std::vector<Tensor> level_b;
    Tensor proj_ctx_w, proj_ctx_b;  // (C,C,1,1): aggregation across channels
    Tensor proj_out_w, proj_out_b;  // (C,C,1,1)
    int focal_levels = 3;
    bool gates_per_channel = false;
    bool use_pre_norm = true;
    bool use_residual = true;
    bool use_out_proj = true;
    double norm_eps = 1e-5;

    std::int64_t channels() const { return proj_in_w.dim(1); }
    std::int64_t gate_channels() const { return gates_per_channel ? channels() : 1; }
};

// Hierarchical context maps M_0..M_{n+1} plus the gate and query slices.
struct ContextAggregation {
    std::vector<Tensor> maps;  // n+2 entries, each (N,C,H,W)
    Tensor gates;              // (N,(n+1)*g,H,W)
    Tensor query;              // (N,C,H,W)
};

Tensor se_forward(const Tensor& x, const SEParams& p);
Tensor conv_block_forward(const Tensor& x, const ConvBlockParams& p);

// Runs the input projection and the focal-level recursion on a feature map
// (pre-norm, when enabled, is applied by the block wrapper, not here).
ContextAggregation context_aggregate(const Tensor& x, const FocalModulationParams& p);

Tensor focal_modulation_forward(const Tensor& x, const FocalModulationParams& p);

}  // namespace focalconv

#endif
