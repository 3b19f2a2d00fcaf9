#ifndef FOCALCONV_GRADCHECK_HPP
#define FOCALCONV_GRADCHECK_HPP

#include <functional>
#include <string>
#include <vector>

#include "focalconv/tensor.hpp"

namespace focalconv {

// Central finite differences (h in f64) against recorded gradients; the
// reported error is |analytic - numeric| / max(1,|analytic|,|numeric|)
// maximized over every scalar of every leaf.
double finite_difference_max_rel(const std::function<Tensor()>& make_loss,
                                 std::vector<Tensor> leaves, double h = 1e-4);

struct GradCheckEntry {
    std::string name;
    double max_rel = 0.0;
    bool pass = false;
};

// Checks every layer op and both composite blocks on several random shapes.
std::vector<GradCheckEntry> gradcheck_battery(std::uint64_t seed, double tolerance = 1e-4);

}  // namespace focalconv

#endif
