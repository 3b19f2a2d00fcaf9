#include "focalconv/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace focalconv {

using nlohmann::json;

// ---- config -----------------------------------------------------------------

void ModelConfig::validate() const {
    if (stage_depths.empty() || stage_depths.size() != stage_channels.size()) {
        throw ConfigError("config: stage_depths and stage_channels must be non-empty and equal "
                          "length, got " +
                          std::to_string(stage_depths.size()) + " and " +
                          std::to_string(stage_channels.size()));
    }
    for (int d : stage_depths) {
        if (d < 1) throw ConfigError("config: stage depths must be >= 1");
    }
    for (int c : stage_channels) {
        if (c < 1) throw ConfigError("config: stage channels must be >= 1");
    }
    if (stem_channels < 1) throw ConfigError("config: stem_channels must be >= 1");
    if (focal_levels < 1) throw ConfigError("config: focal_levels must be >= 1");
    if (focal_kernels.size() != static_cast<std::size_t>(focal_levels)) {
        throw ConfigError("config: focal_kernels must list one kernel per focal level");
    }
    for (int k : focal_kernels) {
        if (k < 1 || k % 2 == 0) {
            throw ConfigError("config: focal kernels must be odd, got " + std::to_string(k));
        }
    }
    if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
    if (expansion_ratio < 1 || se_ratio < 1) {
        throw ConfigError("config: expansion_ratio and se_ratio must be >= 1");
    }
    for (int c : stage_channels) {
        if ((static_cast<std::int64_t>(c) * expansion_ratio) % se_ratio != 0) {
            throw ConfigError("config: expanded width " +
                              std::to_string(c * expansion_ratio) +
                              " is not divisible by se_ratio " + std::to_string(se_ratio));
        }
    }
    // stem halves once, every stage halves once more
    const int factor = 1 << (static_cast<int>(stage_depths.size()) + 1);
    for (int side : input_size) {
        if (side < factor || side % factor != 0) {
            throw ConfigError("config: input side " + std::to_string(side) +
                              " must be a positive multiple of " + std::to_string(factor));
        }
    }
}

std::string ModelConfig::to_json() const {
    json j;
    j["stage_depths"] = stage_depths;
    j["stage_channels"] = stage_channels;
    j["stem_channels"] = stem_channels;
    j["focal_levels"] = focal_levels;
    j["focal_kernels"] = focal_kernels;
    j["num_classes"] = num_classes;
    j["input_size"] = input_size;
    j["expansion_ratio"] = expansion_ratio;
    j["se_ratio"] = se_ratio;
    j["gates_per_channel"] = gates_per_channel;
    j["use_residual"] = use_residual;
    j["use_pre_norm"] = use_pre_norm;
    j["use_out_proj"] = use_out_proj;
    j["stem_norm_act"] = stem_norm_act;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");

    ModelConfig cfg;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "stage_depths") {
                cfg.stage_depths = value.get<std::vector<int>>();
            } else if (key == "stage_channels") {
                cfg.stage_channels = value.get<std::vector<int>>();
            } else if (key == "stem_channels") {
                cfg.stem_channels = value.get<int>();
            } else if (key == "focal_levels") {
                cfg.focal_levels = value.get<int>();
            } else if (key == "focal_kernels") {
                cfg.focal_kernels = value.get<std::vector<int>>();
            } else if (key == "num_classes") {
                cfg.num_classes = value.get<int>();
            } else if (key == "input_size") {
                auto v = value.get<std::vector<int>>();
                if (v.size() != 2) throw ConfigError("config: input_size must be [H, W]");
                cfg.input_size = {v[0], v[1]};
            } else if (key == "expansion_ratio") {
                cfg.expansion_ratio = value.get<int>();
            } else if (key == "se_ratio") {
                cfg.se_ratio = value.get<int>();
            } else if (key == "gates_per_channel") {
                cfg.gates_per_channel = value.get<bool>();
            } else if (key == "use_residual") {
                cfg.use_residual = value.get<bool>();
            } else if (key == "use_pre_norm") {
                cfg.use_pre_norm = value.get<bool>();
            } else if (key == "use_out_proj") {
                cfg.use_out_proj = value.get<bool>();
            } else if (key == "stem_norm_act") {
                cfg.stem_norm_act = value.get<bool>();
            } else {
                throw ConfigError("config: unknown key \"" + key + "\"");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

ModelConfig ModelConfig::tiny() {
    ModelConfig cfg;
    cfg.stage_depths = {1, 1};
    cfg.stage_channels = {16, 32};
    cfg.stem_channels = 8;
    cfg.num_classes = 4;
    cfg.input_size = {32, 32};
    return cfg;
}

// ---- initialization -----------------------------------------------------------

Tensor init_param(InitKind kind, Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    const auto count = static_cast<std::size_t>(numel(shape));
    std::vector<double> data(count);
    switch (kind) {
        case InitKind::ConvWeight: {
            // Rejection beyond two sigmas shrinks the variance by 0.7737;
            // widening the base sigma by 1/0.8796 keeps it at 2/fan_in.
            const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in)) /
                                 0.87962566103423978;
            std::normal_distribution<double> dist(0.0, sigma);
            for (auto& v : data) {
                double draw = dist(rng);
                while (std::abs(draw) > 2.0 * sigma) draw = dist(rng);
                v = draw;
            }
            break;
        }
        case InitKind::LinearWeight: {
            const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& v : data) v = dist(rng);
            break;
        }
        case InitKind::Zeros:
            break;
        case InitKind::Ones:
            std::fill(data.begin(), data.end(), 1.0);
            break;
    }
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

// ---- build ---------------------------------------------------------------------

namespace {

struct Builder {
    ParamStore& store;
    std::mt19937_64 rng;

    Tensor conv_w(const std::string& name, std::int64_t c_out, std::int64_t c_in, int k) {
        Tensor t = init_param(InitKind::ConvWeight, {c_out, c_in, k, k},
                              c_in * static_cast<std::int64_t>(k) * k, rng);
        store.add(name, t);
        return t;
    }
    Tensor dw_w(const std::string& name, std::int64_t c, int k) {
        Tensor t = init_param(InitKind::ConvWeight, {c, 1, k, k},
                              static_cast<std::int64_t>(k) * k, rng);
        store.add(name, t);
        return t;
    }
    Tensor linear_w(const std::string& name, std::int64_t c_in, std::int64_t c_out) {
        Tensor t = init_param(InitKind::LinearWeight, {c_in, c_out}, c_in, rng);
        store.add(name, t);
        return t;
    }
    Tensor bias(const std::string& name, std::int64_t n) {
        Tensor t = init_param(InitKind::Zeros, {n}, n, rng);
        store.add(name, t);
        return t;
    }
    Tensor norm_gamma(const std::string& name, std::int64_t n) {
        Tensor t = init_param(InitKind::Ones, {n}, n, rng);
        store.add(name, t);
        return t;
    }
};

ConvBlockParams build_conv_block(Builder& b, const std::string& prefix, const ModelConfig& cfg,
                                 std::int64_t c) {
    const std::int64_t e = c * cfg.expansion_ratio;
    ConvBlockParams p;
    p.use_pre_norm = cfg.use_pre_norm;
    p.use_residual = cfg.use_residual;
    if (cfg.use_pre_norm) {
        p.norm_gamma = b.norm_gamma(prefix + ".norm.gamma", c);
        p.norm_beta = b.bias(prefix + ".norm.beta", c);
    }
    p.pw1_w = b.conv_w(prefix + ".pw1.w", e, c, 1);
    p.pw1_b = b.bias(prefix + ".pw1.b", e);
    p.dw_w = b.dw_w(prefix + ".dw.w", e, 3);
    p.dw_b = b.bias(prefix + ".dw.b", e);
    p.se.reduce_w = b.conv_w(prefix + ".se.reduce.w", e / cfg.se_ratio, e, 1);
    p.se.reduce_b = b.bias(prefix + ".se.reduce.b", e / cfg.se_ratio);
    p.se.expand_w = b.conv_w(prefix + ".se.expand.w", e, e / cfg.se_ratio, 1);
    p.se.expand_b = b.bias(prefix + ".se.expand.b", e);
    p.pw2_w = b.conv_w(prefix + ".pw2.w", c, e, 1);
    p.pw2_b = b.bias(prefix + ".pw2.b", c);
    return p;
}

FocalModulationParams build_focal_block(Builder& b, const std::string& prefix,
                                        const ModelConfig& cfg, std::int64_t c) {
    FocalModulationParams p;
    p.focal_levels = cfg.focal_levels;
    p.gates_per_channel = cfg.gates_per_channel;
    p.use_pre_norm = cfg.use_pre_norm;
    p.use_residual = cfg.use_residual;
    p.use_out_proj = cfg.use_out_proj;
    if (cfg.use_pre_norm) {
        p.norm_gamma = b.norm_gamma(prefix + ".norm.gamma", c);
        p.norm_beta = b.bias(prefix + ".norm.beta", c);
    }
    const std::int64_t g = p.gates_per_channel ? c : 1;
    const std::int64_t proj_out_c = 2 * c + (cfg.focal_levels + 1) * g;
    p.proj_in_w = b.conv_w(prefix + ".proj_in.w", proj_out_c, c, 1);
    p.proj_in_b = b.bias(prefix + ".proj_in.b", proj_out_c);
    for (int i = 0; i < cfg.focal_levels; ++i) {
        const int k = cfg.focal_kernels[static_cast<std::size_t>(i)];
        const std::string level = prefix + ".level" + std::to_string(i);
        p.level_w.push_back(b.dw_w(level + ".w", c, k));
        p.level_b.push_back(b.bias(level + ".b", c));
    }
    p.proj_ctx_w = b.conv_w(prefix + ".proj_ctx.w", c, c, 1);
    p.proj_ctx_b = b.bias(prefix + ".proj_ctx.b", c);
    if (cfg.use_out_proj) {
        p.proj_out_w = b.conv_w(prefix + ".proj_out.w", c, c, 1);
        p.proj_out_b = b.bias(prefix + ".proj_out.b", c);
    }
    return p;
}

}  // namespace

FocalConvNet build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    FocalConvNet net;
    net.config = config;
    Builder b{net.params, std::mt19937_64(seed)};

    const std::int64_t stem_c = config.stem_channels;
    net.stem.norm_act = config.stem_norm_act;
    net.stem.conv1_w = b.conv_w("stem.conv1.w", stem_c, 3, 3);
    net.stem.conv1_b = b.bias("stem.conv1.b", stem_c);
    if (config.stem_norm_act) {
        net.stem.norm1_gamma = b.norm_gamma("stem.norm1.gamma", stem_c);
        net.stem.norm1_beta = b.bias("stem.norm1.beta", stem_c);
    }
    net.stem.conv2_w = b.conv_w("stem.conv2.w", stem_c, stem_c, 3);
    net.stem.conv2_b = b.bias("stem.conv2.b", stem_c);
    if (config.stem_norm_act) {
        net.stem.norm2_gamma = b.norm_gamma("stem.norm2.gamma", stem_c);
        net.stem.norm2_beta = b.bias("stem.norm2.beta", stem_c);
    }

    std::int64_t prev_c = stem_c;
    for (std::size_t s = 0; s < config.stage_depths.size(); ++s) {
        const std::int64_t c = config.stage_channels[s];
        const std::string sp = "stage" + std::to_string(s);
        StageParams stage;
        stage.down_w = b.conv_w(sp + ".down.w", c, prev_c, 3);
        stage.down_b = b.bias(sp + ".down.b", c);
        for (int blk = 0; blk < config.stage_depths[s]; ++blk) {
            const std::string bp = sp + ".block" + std::to_string(blk);
            FocalConvBlock block;
            block.conv = build_conv_block(b, bp + ".conv", config, c);
            block.focal = build_focal_block(b, bp + ".focal", config, c);
            stage.blocks.push_back(std::move(block));
        }
        net.stages.push_back(std::move(stage));
        prev_c = c;
    }

    net.head.fc_w = b.linear_w("head.fc.w", prev_c, config.num_classes);
    net.head.fc_b = b.bias("head.fc.b", config.num_classes);
    return net;
}

// ---- forward --------------------------------------------------------------------

Tensor forward_trace(const FocalConvNet& net, const Tensor& x,
                     std::vector<std::pair<std::string, Shape>>* trace) {
    const auto& cfg = net.config;
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.input_size[0] ||
        x.dim(3) != cfg.input_size[1]) {
        throw DimensionError("forward: expected (N,3," + std::to_string(cfg.input_size[0]) + "," +
                             std::to_string(cfg.input_size[1]) + "), got " + shape_str(x.shape()));
    }

    Tensor h = conv2d(x, net.stem.conv1_w, net.stem.conv1_b, 2, 1);
    if (net.stem.norm_act) {
        h = gelu(layer_norm(h, net.stem.norm1_gamma, net.stem.norm1_beta, 1e-5, 1));
    }
    h = conv2d(h, net.stem.conv2_w, net.stem.conv2_b, 1, 1);
    if (net.stem.norm_act) {
        h = gelu(layer_norm(h, net.stem.norm2_gamma, net.stem.norm2_beta, 1e-5, 1));
    }
    if (trace) trace->emplace_back("stem", h.shape());

    for (std::size_t s = 0; s < net.stages.size(); ++s) {
        const auto& stage = net.stages[s];
        h = conv2d(h, stage.down_w, stage.down_b, 2, 1);
        for (const auto& block : stage.blocks) {
            h = conv_block_forward(h, block.conv);
            h = focal_modulation_forward(h, block.focal);
        }
        if (trace) trace->emplace_back("stage" + std::to_string(s), h.shape());
    }

    Tensor pooled = global_avg_pool(h);  // (N,C,1,1)
    Tensor flat = reshape(pooled, {pooled.dim(0), pooled.dim(1)});
    return matmul_linear(flat, net.head.fc_w, net.head.fc_b);
}

Tensor forward(const FocalConvNet& net, const Tensor& x) {
    return forward_trace(net, x, nullptr);
}

void load_params(FocalConvNet& net, const ParamStore& source) {
    if (source.size() != net.params.size()) {
        throw FormatError("load_params: store has " + std::to_string(source.size()) +
                          " tensors, model expects " + std::to_string(net.params.size()));
    }
    for (const auto& [name, t] : net.params.items()) {
        const Tensor& src = source.get(name);
        if (src.shape() != t.shape()) {
            throw FormatError("load_params: shape mismatch for " + name + ": " +
                              shape_str(src.shape()) + " vs " + shape_str(t.shape()));
        }
        Tensor dst = t;  // shared handle onto the same buffer
        dst.data() = src.data();
    }
}

}  // namespace focalconv
