#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nlmf/network.hpp"

namespace nlmf {

struct GradSuiteOptions {
    std::uint64_t seed = 7;
    double tolerance = 1e-4;
    double h = 1e-4;
    double kink_tol = 1e-3;  // redraw inputs landing this close to a kink
    int max_redraws = 25;
    bool inject_error = false; // corrupts one analytic gradient (negative control)
};

struct GradSuiteEntry {
    std::string fixture;
    double max_rel_err = 0;
    std::string worst_param;
    bool pass = false;
};

// Finite-difference checks for every differentiable layer type plus an
// end-to-end micro network (2 scales, C = 4/8, K = 2/2, 8x8 input).
std::vector<GradSuiteEntry> run_gradient_suite(const GradSuiteOptions& opts);

// The micro network used by the end-to-end fixture.
NetworkConfig micro_network_config();

} // namespace nlmf
