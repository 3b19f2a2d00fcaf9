#ifndef FOCALCONV_PROFILER_HPP
#define FOCALCONV_PROFILER_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "focalconv/model.hpp"

namespace focalconv {

// One forward-pass operation at batch size 1. `macs` covers multiply-
// accumulate work (convs, linears); `extra_flops` covers biases, activations,
// elementwise math, normalization, and pooling at one flop per element.
struct LayerProfile {
    std::string name;
    std::string kind;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    std::int64_t extra_flops = 0;
};

struct ProfileReport {
    std::vector<LayerProfile> per_layer;
    std::int64_t total_params = 0;
    std::int64_t total_macs = 0;
    std::int64_t total_flops_2mac = 0;  // 2*MACs + extra
    std::int64_t total_flops_1mac = 0;  // 1*MACs + extra
    double gflops_2mac = 0.0;
    double gflops_1mac = 0.0;
    std::array<int, 2> input_size{0, 0};
    std::vector<int> receptive_fields;  // per focal level
    double throughput_ips = 0.0;        // filled by measure_throughput callers
    int throughput_batch = 0;
    std::string hardware;
    std::string convention =
        "flops counted as 2*MACs (1*MAC variant also reported); biases, activations, "
        "elementwise ops, normalization and pooling at 1 flop per element";
};

// Static accounting over the model structure at batch size 1.
ProfileReport profile_model(const ModelConfig& config, std::array<int, 2> input_size);

// r_l = 1 + sum_{i<=l} (k_i - 1)
std::vector<int> receptive_field(const std::vector<int>& focal_kernels);

// Sums MACs/extra flops of per_layer entries whose name starts with `prefix`.
std::pair<std::int64_t, std::int64_t> flops_for_prefix(const ProfileReport& report,
                                                       const std::string& prefix);

using ClockFn = std::function<double()>;  // monotonic seconds
ClockFn steady_clock_fn();

// Forward-only images/second: median over timed iterations; iteration counts
// grow automatically while the clock cannot resolve a batch. warmup >= 1.
double measure_throughput(const FocalConvNet& net, int batch_size, int warmup_iters,
                          int timed_iters, const ClockFn& clock);

std::string hardware_string();

// Table-style text row (Method | Parameters | Year | GFLOPs | Throughput).
std::string report_row(const ProfileReport& report);
std::string report_json(const ProfileReport& report);

}  // namespace focalconv

#endif
