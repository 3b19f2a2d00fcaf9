#ifndef FOCALCONV_ERRORS_HPP
#define FOCALCONV_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace focalconv {

// Shape/rank contract violations (wrong dims, degenerate output sizes).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad configuration values (model config, class weights, overrides).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Problems with input data (manifests, images, labels).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed serialized files (tensor files, checkpoints).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (loss divergence).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace focalconv

#endif
