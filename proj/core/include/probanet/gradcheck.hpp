#pragma once

// Finite-difference suite over every differentiable piece of the model and
// the composed training objective.

#include <cstdint>
#include <string>
#include <vector>

namespace probanet {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    int seeds = 5;             // instances per op, seeds seed .. seed + seeds - 1
    double h = 1e-5;           // central-difference step
    double tolerance = 1e-4;   // on |analytic - numeric| / max(1, |numeric|)
    std::string op;            // empty = every op
    int max_height = 6;
    int max_width = 6;
    int max_channels = 8;
};

struct OpReport {
    std::string op;
    double worst_error = 0.0;
    std::size_t compared = 0;  // scalar derivatives compared
    bool passed = false;
};

/// conv1x1, relu, sigmoid, hadamard, variance, variance_constraint,
/// probanet_loss, head, gate, end_to_end.
const std::vector<std::string>& gradcheck_ops();

/// Throws DomainError for an unknown op name or a non-positive h.
std::vector<OpReport> run_gradcheck(const GradcheckOptions& options = {});

}  // namespace probanet
