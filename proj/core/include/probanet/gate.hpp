#pragma once

// Proposal gate: a reduce/expand pair of 1x1 convolutions producing a
// per-proposal weight t2 in (0, 1), the gated proposals a' = a * t2, and the
// threshold-truncated map b that feeds the classifier.

#include <cstdint>
#include <span>
#include <vector>

#include "probanet/rng.hpp"
#include "probanet/tensor.hpp"

namespace probanet {

struct GateParams {
    Conv1x1Params reduce;  // C -> C/r, followed by ReLU
    Conv1x1Params expand;  // C/r -> C', followed by sigmoid
    int reduction = 1;
    double threshold = 0.0;

    /// Weights uniform in +-1/sqrt(fan_in), biases zero.
    static GateParams initialize(int channels, int anchors, int reduction, double threshold, Rng& rng);

    int in_channels() const noexcept { return reduce.in_channels; }
    int out_channels() const noexcept { return expand.out_channels; }

    /// Checks C mod r == 0, 0 <= th < 1 and conv shapes. Throws DimensionError/DomainError.
    void validate() const;

    std::size_t scalar_count() const noexcept { return reduce.scalar_count() + expand.scalar_count(); }
    /// Order: reduce.weight, reduce.bias, expand.weight, expand.bias.
    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);
};

enum class GateMode { train, test };

struct GateOutput {
    FeatureMap t1_pre;   // reduce conv output before ReLU
    FeatureMap t1;       // H x W x C/r
    FeatureMap t2;       // H x W x C', per-proposal weights
    FeatureMap a_prime;  // a * t2
    FeatureMap b;        // a_prime where kept, 0 elsewhere
    std::vector<std::uint8_t> keep_mask;

    double kept_fraction() const noexcept;
};

/// In train mode keep = (t2 > th); in test mode every proposal is kept.
GateOutput gate_forward(const FeatureMap& x, const FeatureMap& a, const GateParams& params, GateMode mode);

struct GateGrads {
    FeatureMap grad_x;
    FeatureMap grad_a;
    std::vector<double> reduce_weight;
    std::vector<double> reduce_bias;
    std::vector<double> expand_weight;
    std::vector<double> expand_bias;

    /// Same ordering as GateParams::flatten.
    std::vector<double> flatten() const;
};

/// Reverse pass through gating and truncation. Truncated entries pass no
/// gradient to either factor. `grad_t2_extra`, when given, is added to the
/// cotangent of t2 directly (unmasked); the variance term enters this way.
GateGrads gate_backward(const GateOutput& out, const FeatureMap& x, const FeatureMap& a, const GateParams& params,
                        const FeatureMap& grad_b, const FeatureMap* grad_t2_extra = nullptr);

/// How the spread of gate weights is measured.
///   global     : population variance over every element of t2.
///   per_anchor : population variance over positions, taken separately for each
///                anchor channel and averaged over channels.
enum class VarianceScope { global, per_anchor };

struct VarianceTerm {
    double v = 0.0;         // max(epsilon, raw)
    double raw = 0.0;       // unclamped variance
    bool clamped = false;
    FeatureMap grad;        // dv/dt2; zero while clamped
};

VarianceTerm variance_constraint(const FeatureMap& t2, double epsilon = 1e-3,
                                 VarianceScope scope = VarianceScope::global);

struct LossTerms {
    double variance = 0.0;
    double beta = 0.0;
    double probanet_loss = 0.0;
    double cls_loss = 0.0;
    double grad_v = 0.0;  // d probanet_loss / d v with beta held fixed
};

/// beta = alpha * cls * exp(-1/v), recomputed at each call and treated as a
/// constant for differentiation. At the evaluation point beta * exp(1/v)
/// equals alpha * cls, so the term never exceeds the classification loss.
/// Requires v > 0, cls_loss >= 0, 0 <= alpha < 1.
LossTerms probanet_loss(double v, double cls_loss, double alpha = 0.5);

/// Extra scalars in the gate: C (C/r + 1) + (C/r)(C' + 1).
std::int64_t param_count(std::int64_t channels, std::int64_t anchors, std::int64_t reduction);

/// Multiply-accumulates of both gate convolutions: H W (C C/r + (C/r) C').
std::int64_t mac_count(std::int64_t height, std::int64_t width, std::int64_t channels, std::int64_t anchors,
                       std::int64_t reduction);

}  // namespace probanet
