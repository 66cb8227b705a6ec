#include "probanet/gate.hpp"

#include <cmath>
#include <string>

#include "probanet/error.hpp"

namespace probanet {

namespace {

void fill_uniform(Conv1x1Params& p, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.in_channels));
    for (auto& w : p.weight) w = rng.uniform(-bound, bound);
    for (auto& b : p.bias) b = 0.0;
}

void require_divisible(std::int64_t channels, std::int64_t reduction) {
    if (channels <= 0 || reduction <= 0) throw DomainError("channels and reduction must be positive");
    if (channels % reduction != 0)
        throw DomainError("channels (" + std::to_string(channels) + ") not divisible by reduction (" +
                          std::to_string(reduction) + ")");
}

}  // namespace

GateParams GateParams::initialize(int channels, int anchors, int reduction, double threshold, Rng& rng) {
    require_divisible(channels, reduction);
    if (anchors <= 0) throw DomainError("GateParams: anchor count must be positive");
    GateParams p;
    p.reduce = Conv1x1Params(channels / reduction, channels);
    p.expand = Conv1x1Params(anchors, channels / reduction);
    p.reduction = reduction;
    p.threshold = threshold;
    fill_uniform(p.reduce, rng);
    fill_uniform(p.expand, rng);
    p.validate();
    return p;
}

void GateParams::validate() const {
    reduce.validate();
    expand.validate();
    require_divisible(reduce.in_channels, reduction);
    if (reduce.out_channels != reduce.in_channels / reduction)
        throw DimensionError("GateParams: reduce conv must map C to C/r");
    if (expand.in_channels != reduce.out_channels)
        throw DimensionError("GateParams: expand conv input must equal C/r");
    if (!(threshold >= 0.0 && threshold < 1.0)) throw DomainError("GateParams: threshold must lie in [0, 1)");
}

std::vector<double> GateParams::flatten() const {
    std::vector<double> flat;
    flat.reserve(scalar_count());
    flat.insert(flat.end(), reduce.weight.begin(), reduce.weight.end());
    flat.insert(flat.end(), reduce.bias.begin(), reduce.bias.end());
    flat.insert(flat.end(), expand.weight.begin(), expand.weight.end());
    flat.insert(flat.end(), expand.bias.begin(), expand.bias.end());
    return flat;
}

void GateParams::assign(std::span<const double> flat) {
    if (flat.size() != scalar_count()) throw DimensionError("GateParams::assign: wrong length");
    auto it = flat.begin();
    for (auto* v : {&reduce.weight, &reduce.bias, &expand.weight, &expand.bias})
        for (auto& x : *v) x = *it++;
}

double GateOutput::kept_fraction() const noexcept {
    if (keep_mask.empty()) return 0.0;
    std::size_t kept = 0;
    for (auto k : keep_mask) kept += k;
    return static_cast<double>(kept) / static_cast<double>(keep_mask.size());
}

GateOutput gate_forward(const FeatureMap& x, const FeatureMap& a, const GateParams& params, GateMode mode) {
    params.validate();
    if (x.channels() != params.in_channels())
        throw DimensionError("gate_forward: features have " + std::to_string(x.channels()) + " channels, gate expects " +
                             std::to_string(params.in_channels()));
    const Shape proposals{x.height(), x.width(), params.out_channels()};
    if (a.shape() != proposals) throw DimensionError("gate_forward: proposal map shape does not match H x W x C'");

    GateOutput out;
    out.t1_pre = conv1x1_forward(x, params.reduce);
    out.t1 = relu(out.t1_pre);
    out.t2 = sigmoid(conv1x1_forward(out.t1, params.expand));
    out.a_prime = hadamard(a, out.t2);

    // Test mode behaves as th = 0, and t2 > 0 always, so everything survives.
    const double th = mode == GateMode::train ? params.threshold : 0.0;
    out.b = FeatureMap(proposals);
    out.keep_mask.assign(proposals.size(), 0);
    for (std::size_t n = 0; n < proposals.size(); ++n) {
        const bool keep = mode == GateMode::test || out.t2[n] > th;
        out.keep_mask[n] = keep ? 1 : 0;
        out.b[n] = keep ? out.a_prime[n] : 0.0;
    }
    return out;
}

std::vector<double> GateGrads::flatten() const {
    std::vector<double> flat;
    flat.reserve(reduce_weight.size() + reduce_bias.size() + expand_weight.size() + expand_bias.size());
    for (const auto* v : {&reduce_weight, &reduce_bias, &expand_weight, &expand_bias})
        flat.insert(flat.end(), v->begin(), v->end());
    return flat;
}

GateGrads gate_backward(const GateOutput& out, const FeatureMap& x, const FeatureMap& a, const GateParams& params,
                        const FeatureMap& grad_b, const FeatureMap* grad_t2_extra) {
    if (grad_b.shape() != out.b.shape() || a.shape() != out.b.shape())
        throw DimensionError("gate_backward: grad_b / proposal shape mismatch");
    if (x.shape() != Shape{out.b.height(), out.b.width(), params.in_channels()})
        throw DimensionError("gate_backward: feature shape mismatch");
    if (grad_t2_extra != nullptr && grad_t2_extra->shape() != out.t2.shape())
        throw DimensionError("gate_backward: extra t2 gradient shape mismatch");

    FeatureMap grad_a_prime(grad_b.shape());
    for (std::size_t n = 0; n < grad_b.size(); ++n) grad_a_prime[n] = out.keep_mask[n] ? grad_b[n] : 0.0;

    auto [grad_a, grad_t2] = hadamard_backward(a, out.t2, grad_a_prime);
    if (grad_t2_extra != nullptr)
        for (std::size_t n = 0; n < grad_t2.size(); ++n) grad_t2[n] += (*grad_t2_extra)[n];

    const FeatureMap grad_expand_pre = sigmoid_backward(out.t2, grad_t2);
    Conv1x1Grads expand_g = conv1x1_backward(out.t1, params.expand, grad_expand_pre);
    const FeatureMap grad_t1_pre = relu_backward(out.t1_pre, expand_g.grad_x);
    Conv1x1Grads reduce_g = conv1x1_backward(x, params.reduce, grad_t1_pre);

    GateGrads g;
    g.grad_x = std::move(reduce_g.grad_x);
    g.grad_a = std::move(grad_a);
    g.reduce_weight = std::move(reduce_g.grad_weight);
    g.reduce_bias = std::move(reduce_g.grad_bias);
    g.expand_weight = std::move(expand_g.grad_weight);
    g.expand_bias = std::move(expand_g.grad_bias);
    return g;
}

VarianceTerm variance_constraint(const FeatureMap& t2, double epsilon, VarianceScope scope) {
    if (!(epsilon > 0.0)) throw DomainError("variance_constraint: epsilon must be positive");
    VarianceTerm term;
    term.grad = FeatureMap(t2.shape());

    if (scope == VarianceScope::global) {
        term.raw = mean_and_variance(t2).variance;
        term.clamped = term.raw < epsilon;
        term.v = term.clamped ? epsilon : term.raw;
        if (!term.clamped) term.grad = variance_backward(t2);
        return term;
    }

    const int k_count = t2.channels();
    const auto positions = static_cast<double>(t2.shape().pixels());
    std::vector<double> means(static_cast<std::size_t>(k_count), 0.0);
    for (int i = 0; i < t2.height(); ++i)
        for (int j = 0; j < t2.width(); ++j)
            for (int k = 0; k < k_count; ++k) means[static_cast<std::size_t>(k)] += t2.at(i, j, k);
    for (auto& m : means) m /= positions;

    double acc = 0.0;
    for (int i = 0; i < t2.height(); ++i)
        for (int j = 0; j < t2.width(); ++j)
            for (int k = 0; k < k_count; ++k) {
                const double d = t2.at(i, j, k) - means[static_cast<std::size_t>(k)];
                acc += d * d;
            }
    term.raw = acc / (positions * k_count);
    term.clamped = term.raw < epsilon;
    term.v = term.clamped ? epsilon : term.raw;
    if (!term.clamped) {
        const double scale = 2.0 / (positions * k_count);
        for (int i = 0; i < t2.height(); ++i)
            for (int j = 0; j < t2.width(); ++j)
                for (int k = 0; k < k_count; ++k)
                    term.grad.at(i, j, k) = scale * (t2.at(i, j, k) - means[static_cast<std::size_t>(k)]);
    }
    return term;
}

LossTerms probanet_loss(double v, double cls_loss, double alpha) {
    if (!(v > 0.0)) throw DomainError("probanet_loss: variance must be positive (clamp before calling)");
    if (!(cls_loss >= 0.0)) throw DomainError("probanet_loss: classification loss must be non-negative");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("probanet_loss: alpha must lie in [0, 1)");
    LossTerms t;
    t.variance = v;
    t.cls_loss = cls_loss;
    t.beta = alpha * cls_loss * std::exp(-1.0 / v);
    // beta * exp(1/v) collapses to alpha * cls exactly; evaluating the product
    // directly overflows exp(1/v) for v near the clamp.
    t.probanet_loss = alpha * cls_loss;
    t.grad_v = -alpha * cls_loss / (v * v);
    return t;
}

std::int64_t param_count(std::int64_t channels, std::int64_t anchors, std::int64_t reduction) {
    require_divisible(channels, reduction);
    if (anchors <= 0) throw DomainError("param_count: anchor count must be positive");
    const std::int64_t reduced = channels / reduction;
    return channels * (reduced + 1) + reduced * (anchors + 1);
}

std::int64_t mac_count(std::int64_t height, std::int64_t width, std::int64_t channels, std::int64_t anchors,
                       std::int64_t reduction) {
    require_divisible(channels, reduction);
    if (height <= 0 || width <= 0 || anchors <= 0) throw DomainError("mac_count: dimensions must be positive");
    const std::int64_t reduced = channels / reduction;
    return height * width * (channels * reduced + reduced * anchors);
}

}  // namespace probanet
