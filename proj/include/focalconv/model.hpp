#ifndef FOCALCONV_MODEL_HPP
#define FOCALCONV_MODEL_HPP

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "focalconv/nn.hpp"
#include "focalconv/param_store.hpp"
#include "focalconv/tensor.hpp"

namespace focalconv {

// Declarative architecture description. JSON configs mirror these field
// names exactly; unknown keys are rejected.
struct ModelConfig {
    std::vector<int> stage_depths{2, 2, 5, 2};
    std::vector<int> stage_channels{64, 128, 320, 640};
    int stem_channels = 32;
    int focal_levels = 3;
    std::vector<int> focal_kernels{3, 3, 3};
    int num_classes = 11;
    std::array<int, 2> input_size{224, 224};
    int expansion_ratio = 4;
    int se_ratio = 4;
    bool gates_per_channel = false;
    bool use_residual = true;
    bool use_pre_norm = true;
    bool use_out_proj = true;
    bool stem_norm_act = true;

    void validate() const;  // throws ConfigError
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    static ModelConfig from_json_file(const std::string& path);

    static ModelConfig tiny();  // two shallow stages for 32x32 inputs
};

struct StemParams {
    Tensor conv1_w, conv1_b, norm1_gamma, norm1_beta;
    Tensor conv2_w, conv2_b, norm2_gamma, norm2_beta;
    bool norm_act = true;
};

struct FocalConvBlock {
    ConvBlockParams conv;
    FocalModulationParams focal;
};

struct StageParams {
    Tensor down_w, down_b;
    std::vector<FocalConvBlock> blocks;
};

struct HeadParams {
    Tensor fc_w, fc_b;  // (C, num_classes), (num_classes)
};

// Stem, four (by default) stages of FocalConv blocks, classifier head.
// Every learnable tensor is also registered in `params` under its path.
struct FocalConvNet {
    ModelConfig config;
    StemParams stem;
    std::vector<StageParams> stages;
    HeadParams head;
    ParamStore params;
};

enum class InitKind { ConvWeight, LinearWeight, Zeros, Ones };

// Truncated normal (std sqrt(2/fan_in), cut at two adjusted sigmas so the
// realized variance stays 2/fan_in) for conv weights; uniform
// +-sqrt(1/fan_in) for linear weights; zeros for biases and norm offsets;
// ones for norm scales.
Tensor init_param(InitKind kind, Shape shape, std::int64_t fan_in, std::mt19937_64& rng);

FocalConvNet build(const ModelConfig& config, std::uint64_t seed);

Tensor forward(const FocalConvNet& net, const Tensor& x);
// Same, recording (name, shape) after the stem and after every stage.
Tensor forward_trace(const FocalConvNet& net, const Tensor& x,
                     std::vector<std::pair<std::string, Shape>>* trace);

// Copies values from a loaded store into the network parameters (shapes and
// names must match exactly).
void load_params(FocalConvNet& net, const ParamStore& source);

}  // namespace focalconv

#endif
