#include "focalconv/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace focalconv {

std::vector<int> receptive_field(const std::vector<int>& focal_kernels) {
    std::vector<int> out;
    out.reserve(focal_kernels.size());
    int r = 1;
    for (int k : focal_kernels) {
        r += k - 1;
        out.push_back(r);
    }
    return out;
}

namespace {

struct Walk {
    std::vector<LayerProfile>& layers;

    void conv(const std::string& name, std::int64_t c_in, std::int64_t c_out, int k,
              std::int64_t h_out, std::int64_t w_out) {
        const std::int64_t pos = h_out * w_out;
        layers.push_back({name, "conv" + std::to_string(k) + "x" + std::to_string(k),
                          k * k * c_in * c_out + c_out, k * k * c_in * c_out * pos, c_out * pos});
    }
    void dwconv(const std::string& name, std::int64_t c, int k, std::int64_t h_out,
                std::int64_t w_out) {
        const std::int64_t pos = h_out * w_out;
        layers.push_back({name, "dwconv" + std::to_string(k) + "x" + std::to_string(k),
                          k * k * c + c, k * k * c * pos, c * pos});
    }
    void linear(const std::string& name, std::int64_t c_in, std::int64_t c_out,
                std::int64_t positions) {
        layers.push_back(
            {name, "linear", c_in * c_out + c_out, positions * c_in * c_out, positions * c_out});
    }
    void norm(const std::string& name, std::int64_t c, std::int64_t elements) {
        layers.push_back({name, "layer_norm", 2 * c, 0, elements});
    }
    void elementwise(const std::string& name, const std::string& kind, std::int64_t elements) {
        layers.push_back({name, kind, 0, 0, elements});
    }
};

void walk_conv_block(Walk& w, const std::string& p, const ModelConfig& cfg, std::int64_t c,
                     std::int64_t s2) {
    const std::int64_t e = c * cfg.expansion_ratio;
    const std::int64_t r = e / cfg.se_ratio;
    if (cfg.use_pre_norm) w.norm(p + ".norm", c, c * s2);
    w.conv(p + ".pw1", c, e, 1, 1, s2);
    w.elementwise(p + ".pw1.act", "gelu", e * s2);
    w.dwconv(p + ".dw", e, 3, 1, s2);
    w.elementwise(p + ".dw.act", "gelu", e * s2);
    w.elementwise(p + ".se.pool", "avg_pool", e * s2);
    w.conv(p + ".se.reduce", e, r, 1, 1, 1);
    w.elementwise(p + ".se.reduce.act", "gelu", r);
    w.conv(p + ".se.expand", r, e, 1, 1, 1);
    w.elementwise(p + ".se.gate", "sigmoid", e);
    w.elementwise(p + ".se.mul", "mul", e * s2);
    w.conv(p + ".pw2", e, c, 1, 1, s2);
    if (cfg.use_residual) w.elementwise(p + ".residual", "add", c * s2);
}

void walk_focal_block(Walk& w, const std::string& p, const ModelConfig& cfg, std::int64_t c,
                      std::int64_t s2) {
    const std::int64_t g = cfg.gates_per_channel ? c : 1;
    const std::int64_t n = cfg.focal_levels;
    const std::int64_t proj_c = 2 * c + (n + 1) * g;
    if (cfg.use_pre_norm) w.norm(p + ".norm", c, c * s2);
    w.conv(p + ".proj_in", c, proj_c, 1, 1, s2);
    for (std::int64_t i = 0; i < n; ++i) {
        const int k = cfg.focal_kernels[static_cast<std::size_t>(i)];
        const std::string level = p + ".level" + std::to_string(i);
        w.dwconv(level, c, k, 1, s2);
        w.elementwise(level + ".act", "gelu", c * s2);
    }
    w.elementwise(p + ".global_ctx.pool", "avg_pool", c * s2);
    for (std::int64_t i = 1; i <= n + 1; ++i) {
        w.elementwise(p + ".gate" + std::to_string(i) + ".mul", "mul", c * s2);
        if (i > 1) w.elementwise(p + ".gate" + std::to_string(i) + ".sum", "add", c * s2);
    }
    w.conv(p + ".proj_ctx", c, c, 1, 1, s2);
    w.elementwise(p + ".query.mul", "mul", c * s2);
    if (cfg.use_out_proj) w.conv(p + ".proj_out", c, c, 1, 1, s2);
    if (cfg.use_residual) w.elementwise(p + ".residual", "add", c * s2);
}

}  // namespace

ProfileReport profile_model(const ModelConfig& config, std::array<int, 2> input_size) {
    const ModelConfig& cfg = config;
    ProfileReport report;
    report.input_size = input_size;
    report.receptive_fields = receptive_field(cfg.focal_kernels);
    Walk w{report.per_layer};

    std::int64_t h = input_size[0];
    std::int64_t wd = input_size[1];
    const std::int64_t stem_c = cfg.stem_channels;

    h /= 2;
    wd /= 2;
    w.conv("stem.conv1", 3, stem_c, 3, h, wd);
    if (cfg.stem_norm_act) {
        w.norm("stem.norm1", stem_c, stem_c * h * wd);
        w.elementwise("stem.act1", "gelu", stem_c * h * wd);
    }
    w.conv("stem.conv2", stem_c, stem_c, 3, h, wd);
    if (cfg.stem_norm_act) {
        w.norm("stem.norm2", stem_c, stem_c * h * wd);
        w.elementwise("stem.act2", "gelu", stem_c * h * wd);
    }

    std::int64_t prev_c = stem_c;
    for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
        const std::int64_t c = cfg.stage_channels[s];
        const std::string sp = "stage" + std::to_string(s);
        h /= 2;
        wd /= 2;
        w.conv(sp + ".down", prev_c, c, 3, h, wd);
        const std::int64_t s2 = h * wd;
        for (int blk = 0; blk < cfg.stage_depths[s]; ++blk) {
            const std::string bp = sp + ".block" + std::to_string(blk);
            walk_conv_block(w, bp + ".conv", cfg, c, s2);
            walk_focal_block(w, bp + ".focal", cfg, c, s2);
        }
        prev_c = c;
    }

    w.elementwise("head.pool", "avg_pool", prev_c * h * wd);
    w.linear("head.fc", prev_c, cfg.num_classes, 1);

    for (const auto& layer : report.per_layer) {
        report.total_params += layer.params;
        report.total_macs += layer.macs;
        report.total_flops_2mac += 2 * layer.macs + layer.extra_flops;
        report.total_flops_1mac += layer.macs + layer.extra_flops;
    }
    report.gflops_2mac = static_cast<double>(report.total_flops_2mac) / 1e9;
    report.gflops_1mac = static_cast<double>(report.total_flops_1mac) / 1e9;
    report.hardware = hardware_string();
    return report;
}

std::pair<std::int64_t, std::int64_t> flops_for_prefix(const ProfileReport& report,
                                                       const std::string& prefix) {
    std::int64_t macs = 0;
    std::int64_t extra = 0;
    for (const auto& layer : report.per_layer) {
        if (layer.name.rfind(prefix, 0) == 0) {
            macs += layer.macs;
            extra += layer.extra_flops;
        }
    }
    return {macs, extra};
}

ClockFn steady_clock_fn() {
    return [] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
            .count();
    };
}

double measure_throughput(const FocalConvNet& net, int batch_size, int warmup_iters,
                          int timed_iters, const ClockFn& clock) {
    if (warmup_iters < 1) throw ConfigError("throughput: warmup_iters must be >= 1");
    if (timed_iters < 1) throw ConfigError("throughput: timed_iters must be >= 1");
    if (batch_size < 1) throw ConfigError("throughput: batch_size must be >= 1");

    NoGradGuard guard;
    std::mt19937_64 rng(12345);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto& sz = net.config.input_size;
    std::vector<double> data(static_cast<std::size_t>(batch_size) * 3 *
                             static_cast<std::size_t>(sz[0]) * static_cast<std::size_t>(sz[1]));
    for (auto& v : data) v = unit(rng);
    Tensor x = Tensor::from_data({batch_size, 3, sz[0], sz[1]}, std::move(data));

    for (int i = 0; i < warmup_iters; ++i) forward(net, x);

    std::vector<double> per_batch;
    per_batch.reserve(static_cast<std::size_t>(timed_iters));
    for (int it = 0; it < timed_iters; ++it) {
        int reps = 1;
        for (;;) {
            const double t0 = clock();
            for (int r = 0; r < reps; ++r) forward(net, x);
            const double t1 = clock();
            const double dt = t1 - t0;
            if (dt > 0.0) {
                per_batch.push_back(dt / reps);
                break;
            }
            if (reps > (1 << 24)) {
                throw NumericError("throughput: clock never advanced");
            }
            reps *= 2;  // timer too coarse for this many batches
        }
    }
    std::sort(per_batch.begin(), per_batch.end());
    const std::size_t mid = per_batch.size() / 2;
    const double median = per_batch.size() % 2 == 1
                              ? per_batch[mid]
                              : 0.5 * (per_batch[mid - 1] + per_batch[mid]);
    return static_cast<double>(batch_size) / median;
}

std::string hardware_string() {
    std::string model = "unknown cpu";
    std::ifstream is("/proc/cpuinfo");
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                model = line.substr(colon + 1);
                if (!model.empty() && model.front() == ' ') model.erase(model.begin());
            }
            break;
        }
    }
    return model + " (" + std::to_string(std::thread::hardware_concurrency()) + " threads)";
}

std::string report_row(const ProfileReport& report) {
    char params[32];
    std::snprintf(params, sizeof(params), "%.2f M",
                  static_cast<double>(report.total_params) / 1e6);
    char gflops[32];
    std::snprintf(gflops, sizeof(gflops), "%.2f", report.gflops_2mac);
    char tput[32];
    if (report.throughput_ips > 0) {
        std::snprintf(tput, sizeof(tput), "%.2f", report.throughput_ips);
    } else {
        std::snprintf(tput, sizeof(tput), "-");
    }
    std::ostringstream os;
    os << "Method | Paramaters | Year | GFLOPs | Throughput\n";
    os << "FocalConvNet | " << params << " | 2022 | " << gflops << " | " << tput << "\n";
    return os.str();
}

std::string report_json(const ProfileReport& report) {
    nlohmann::json j;
    j["method"] = "FocalConvNet";
    j["input_size"] = report.input_size;
    j["total_params"] = report.total_params;
    j["total_macs"] = report.total_macs;
    j["total_flops_2mac"] = report.total_flops_2mac;
    j["total_flops_1mac"] = report.total_flops_1mac;
    j["gflops_2mac"] = report.gflops_2mac;
    j["gflops_1mac"] = report.gflops_1mac;
    j["receptive_fields"] = report.receptive_fields;
    j["convention"] = report.convention;
    j["hardware"] = report.hardware;
    if (report.throughput_ips > 0) {
        j["throughput_ips"] = report.throughput_ips;
        j["throughput_batch"] = report.throughput_batch;
    }
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : report.per_layer) {
        layers.push_back({{"name", layer.name},
                          {"kind", layer.kind},
                          {"params", layer.params},
                          {"macs", layer.macs},
                          {"extra_flops", layer.extra_flops}});
    }
    j["per_layer"] = layers;
    return j.dump(2);
}

}  // namespace focalconv
