#include "probanet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "probanet/error.hpp"
#include "probanet/gate.hpp"
#include "probanet/rng.hpp"
#include "probanet/sim.hpp"
#include "probanet/tensor.hpp"
#include "probanet/training.hpp"

namespace probanet {

namespace {

constexpr std::uint64_t kGradcheckStream = 0x6772616463686bULL;
constexpr double kKinkMargin = 1e-3;
constexpr int kMaxAttempts = 256;
constexpr double kMinVariance = 0.01;

struct Tally {
    double worst = 0.0;
    std::size_t compared = 0;

    void add(std::span<const double> analytic, std::span<const double> numeric) {
        if (analytic.size() != numeric.size()) throw DimensionError("gradcheck: gradient length mismatch");
        for (std::size_t n = 0; n < analytic.size(); ++n) {
            const double err = std::abs(analytic[n] - numeric[n]) / std::max(1.0, std::abs(numeric[n]));
            worst = std::max(worst, std::isfinite(err) ? err : HUGE_VAL);
        }
        compared += analytic.size();
    }
    void add(double analytic, double numeric) { add(std::span(&analytic, 1), std::span(&numeric, 1)); }
};

struct Context {
    const GradcheckOptions& opt;
    Rng rng;

    Shape shape(int channels = 0) {
        return {static_cast<int>(rng.range(1, opt.max_height)), static_cast<int>(rng.range(1, opt.max_width)),
                channels > 0 ? channels : static_cast<int>(rng.range(1, opt.max_channels))};
    }
    FeatureMap uniform(Shape s, double lo, double hi) {
        FeatureMap m(s);
        for (auto& v : m.values()) v = rng.uniform(lo, hi);
        return m;
    }
    // Magnitudes in [margin, 1] with random sign, clear of the ReLU kink.
    FeatureMap signed_away_from_zero(Shape s, double margin = 0.05) {
        FeatureMap m(s);
        for (auto& v : m.values()) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(margin, 1.0);
        return m;
    }
    Conv1x1Params conv(int out, int in) {
        Conv1x1Params p(out, in);
        for (auto& w : p.weight) w = rng.uniform(-1.0, 1.0);
        for (auto& b : p.bias) b = rng.uniform(-0.5, 0.5);
        return p;
    }
    // Largest divisor of c that is <= 4, drawn among the candidates.
    int reduction_for(int c) {
        std::vector<int> divisors;
        for (int r = 1; r <= std::min(c, 4); ++r)
            if (c % r == 0) divisors.push_back(r);
        return divisors[rng.below(divisors.size())];
    }
};

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
    return s;
}

std::vector<double> flat_conv(const Conv1x1Params& p) {
    std::vector<double> f(p.weight);
    f.insert(f.end(), p.bias.begin(), p.bias.end());
    return f;
}

Conv1x1Params unflat_conv(const Conv1x1Params& layout, std::span<const double> f) {
    Conv1x1Params p = layout;
    std::copy_n(f.begin(), p.weight.size(), p.weight.begin());
    std::copy(f.begin() + static_cast<std::ptrdiff_t>(p.weight.size()), f.end(), p.bias.begin());
    return p;
}

void check_conv(Context& c, Tally& t) {
    const Shape s = c.shape();
    const int out = static_cast<int>(c.rng.range(1, c.opt.max_channels));
    const FeatureMap x = c.uniform(s, -1.0, 1.0);
    const Conv1x1Params p = c.conv(out, s.channels);
    const FeatureMap g = c.uniform({s.height, s.width, out}, -1.0, 1.0);
    const Conv1x1Grads an = conv1x1_backward(x, p, g);

    t.add(an.grad_x.values(),
          finite_diff_gradient([&](const FeatureMap& xx) { return dot(g.values(), conv1x1_forward(xx, p).values()); }, x,
                               c.opt.h)
              .values());
    std::vector<double> flat_an(an.grad_weight);
    flat_an.insert(flat_an.end(), an.grad_bias.begin(), an.grad_bias.end());
    const auto flat = flat_conv(p);
    t.add(flat_an, finite_diff_gradient(
                       [&](std::span<const double> f) {
                           return dot(g.values(), conv1x1_forward(x, unflat_conv(p, f)).values());
                       },
                       flat, c.opt.h));
}

void check_relu(Context& c, Tally& t) {
    const Shape s = c.shape();
    const FeatureMap x = c.signed_away_from_zero(s);
    const FeatureMap g = c.uniform(s, -1.0, 1.0);
    t.add(relu_backward(x, g).values(),
          finite_diff_gradient([&](const FeatureMap& xx) { return dot(g.values(), relu(xx).values()); }, x, c.opt.h)
              .values());
}

void check_sigmoid(Context& c, Tally& t) {
    const Shape s = c.shape();
    const FeatureMap x = c.uniform(s, -6.0, 6.0);
    const FeatureMap g = c.uniform(s, -1.0, 1.0);
    t.add(sigmoid_backward(sigmoid(x), g).values(),
          finite_diff_gradient([&](const FeatureMap& xx) { return dot(g.values(), sigmoid(xx).values()); }, x, c.opt.h)
              .values());
}

void check_hadamard(Context& c, Tally& t) {
    const Shape s = c.shape();
    const FeatureMap a = c.uniform(s, -2.0, 2.0);
    const FeatureMap b = c.uniform(s, -2.0, 2.0);
    const FeatureMap g = c.uniform(s, -1.0, 1.0);
    const HadamardGrads an = hadamard_backward(a, b, g);
    t.add(an.grad_a.values(),
          finite_diff_gradient([&](const FeatureMap& aa) { return dot(g.values(), hadamard(aa, b).values()); }, a, c.opt.h)
              .values());
    t.add(an.grad_b.values(),
          finite_diff_gradient([&](const FeatureMap& bb) { return dot(g.values(), hadamard(a, bb).values()); }, b, c.opt.h)
              .values());
}

void check_variance(Context& c, Tally& t) {
    const FeatureMap x = c.uniform(c.shape(), -2.0, 2.0);
    t.add(variance_backward(x).values(),
          finite_diff_gradient([](const FeatureMap& xx) { return mean_and_variance(xx).variance; }, x, c.opt.h).values());
}

void check_variance_constraint(Context& c, Tally& t) {
    const double eps = 1e-3;
    for (VarianceScope scope : {VarianceScope::global, VarianceScope::per_anchor}) {
        for (int attempt = 0;; ++attempt) {
            if (attempt == kMaxAttempts) throw NumericError("gradcheck variance_constraint: no instance clear of the clamp");
            Shape s = c.shape();
            s.height = std::max(s.height, 2);
            const FeatureMap t2 = c.uniform(s, 0.01, 0.99);
            const VarianceTerm term = variance_constraint(t2, eps, scope);
            if (term.raw < eps * (1.0 + kKinkMargin) + kKinkMargin) continue;
            t.add(term.grad.values(),
                  finite_diff_gradient([&](const FeatureMap& y) { return variance_constraint(y, eps, scope).v; }, t2,
                                       c.opt.h)
                      .values());
            break;
        }
    }
}

void check_probanet_loss(Context& c, Tally& t) {
    const double v0 = c.rng.uniform(0.05, 0.3);
    const double cls = c.rng.uniform(0.1, 2.0);
    const double alpha = c.rng.uniform(0.1, 0.9);
    const LossTerms terms = probanet_loss(v0, cls, alpha);
    // beta is held at its value for v0; the loss is beta * exp(1/v), written
    // relative to v0 so the exponent stays small.
    const auto f = [&](std::span<const double> v) { return terms.probanet_loss * std::exp(1.0 / v[0] - 1.0 / v0); };
    const std::vector<double> at{v0};
    t.add(terms.grad_v, finite_diff_gradient(f, at, c.opt.h)[0]);
}

void check_head(Context& c, Tally& t) {
    const Shape s = c.shape();
    const FeatureMap b = c.uniform(s, -2.0, 2.0);
    std::vector<AnchorLabel> labels(s.size());
    MiniBatch batch;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        labels[n].cls = c.rng.below(3) == 0 ? AnchorClass::foreground : AnchorClass::background;
        if (c.rng.below(4) != 0) batch.indices.push_back(n);
    }
    if (batch.indices.empty()) batch.indices.push_back(0);
    const double scale = c.rng.uniform(-2.0, 2.0);
    const double shift = c.rng.uniform(-1.0, 1.0);
    const HeadGrads an = head_backward(b.values(), labels, batch, scale, shift);

    t.add(an.grad_b, finite_diff_gradient(
                         [&](std::span<const double> bb) { return head_forward(bb, labels, batch, scale, shift).cls_loss; },
                         b.values(), c.opt.h));
    const std::vector<double> affine{scale, shift};
    const std::vector<double> affine_an{an.grad_scale, an.grad_shift};
    t.add(affine_an, finite_diff_gradient(
                         [&](std::span<const double> p) { return head_forward(b.values(), labels, batch, p[0], p[1]).cls_loss; },
                         affine, c.opt.h));
}

double min_abs(std::span<const double> v, double centre = 0.0) {
    double m = HUGE_VAL;
    for (double x : v) m = std::min(m, std::abs(x - centre));
    return m;
}

void check_gate(Context& c, Tally& t) {
    for (int attempt = 0;; ++attempt) {
        if (attempt == kMaxAttempts) throw NumericError("gradcheck gate: no instance clear of the kinks");
        const int channels = static_cast<int>(c.rng.range(1, c.opt.max_channels));
        const int r = c.reduction_for(channels);
        const int anchors = static_cast<int>(c.rng.range(1, 4));
        const Shape s = c.shape(channels);
        GateParams p;
        p.reduce = c.conv(channels / r, channels);
        p.expand = c.conv(anchors, channels / r);
        p.reduction = r;
        p.threshold = c.rng.uniform(0.0, 0.6);
        const FeatureMap x = c.uniform(s, -1.0, 1.0);
        const FeatureMap a = c.uniform({s.height, s.width, anchors}, -2.0, 2.0);
        const GateOutput out = gate_forward(x, a, p, GateMode::train);
        if (min_abs(out.t1_pre.values()) < kKinkMargin || min_abs(out.t2.values(), p.threshold) < kKinkMargin) continue;

        const FeatureMap gb = c.uniform(out.b.shape(), -1.0, 1.0);
        const FeatureMap gt = c.uniform(out.t2.shape(), -1.0, 1.0);
        const GateGrads an = gate_backward(out, x, a, p, gb, &gt);
        const auto objective = [&](const FeatureMap& xx, const FeatureMap& aa, const GateParams& pp) {
            const GateOutput o = gate_forward(xx, aa, pp, GateMode::train);
            return dot(gb.values(), o.b.values()) + dot(gt.values(), o.t2.values());
        };
        t.add(an.grad_x.values(),
              finite_diff_gradient([&](const FeatureMap& xx) { return objective(xx, a, p); }, x, c.opt.h).values());
        t.add(an.grad_a.values(),
              finite_diff_gradient([&](const FeatureMap& aa) { return objective(x, aa, p); }, a, c.opt.h).values());
        const auto flat = p.flatten();
        t.add(an.flatten(), finite_diff_gradient(
                                [&](std::span<const double> f) {
                                    GateParams pp = p;
                                    pp.assign(f);
                                    return objective(x, a, pp);
                                },
                                flat, c.opt.h));
        return;
    }
}

void check_end_to_end(Context& c, Tally& t) {
    struct Variant {
        bool enabled;
        VarianceScope scope;
    };
    for (const Variant variant : {Variant{true, VarianceScope::global}, Variant{true, VarianceScope::per_anchor},
                                  Variant{false, VarianceScope::global}}) {
        for (int attempt = 0;; ++attempt) {
            if (attempt == kMaxAttempts) throw NumericError("gradcheck end_to_end: no instance clear of the kinks");
            SimConfig sim;
            sim.height = static_cast<int>(c.rng.range(4, std::max(4, c.opt.max_height)));
            sim.width = static_cast<int>(c.rng.range(4, std::max(4, c.opt.max_width)));
            sim.channels = std::min(8, c.opt.max_channels);
            sim.anchor_count = 3;
            sim.anchor_min_size = 1.5;
            sim.anchor_max_size = 3.0;
            sim.min_objects = 1;
            sim.max_objects = 2;
            sim.min_object_size = 1.5;
            sim.max_object_size = 3.0;

            TrainConfig tc;
            tc.r = sim.channels % 4 == 0 ? 4 : 1;
            tc.th = 0.3;
            tc.alpha = 0.5;
            tc.scenes_per_batch = 1;
            tc.batch_size = 24;
            tc.fg_per_batch = 6;
            tc.probanet_enabled = variant.enabled;
            tc.variance_scope = variant.scope;

            const std::uint64_t seed = c.rng.next_u64();
            Model model = Model::initialize(sim, tc, seed);
            for (auto& b : model.proposal.bias) b = c.rng.uniform(0.0, 0.5);
            model.gate.reduce = c.conv(model.gate.reduce.out_channels, model.gate.reduce.in_channels);
            model.gate.expand = c.conv(model.gate.expand.out_channels, model.gate.expand.in_channels);
            for (auto& w : model.gate.expand.weight) w *= 3.0;
            model.head_scale = c.rng.uniform(0.5, 2.0);
            model.head_shift = c.rng.uniform(-1.0, 1.0);

            const auto scenes = scenes_for_step(sim, tc, seed, 0);
            const StepInputs inputs = stack_scenes(scenes, AnchorGrid::from_config(sim), sim.thresholds);
            Rng sampler(seed);
            ForwardPass pass;
            try {
                pass = forward_pass(model, inputs, tc, sampler);
            } catch (const EmptyPoolError&) {
                continue;
            }
            if (min_abs(pass.a_pre.values()) < kKinkMargin || min_abs(pass.gate.t1_pre.values()) < kKinkMargin) continue;
            if (variant.enabled && min_abs(pass.gate.t2.values(), tc.th) < kKinkMargin) continue;
            // exp(1/v) is too steep for central differences at h ~ 1e-5 once v < 0.01.
            if (variant.enabled && pass.variance.v < kMinVariance) continue;

            const auto analytic = backward_pass(model, inputs, tc, pass);
            const auto flat = model.flatten();
            t.add(analytic, finite_diff_gradient(
                                [&](std::span<const double> f) { return frozen_objective(f, model, inputs, tc, pass); },
                                flat, c.opt.h));
            break;
        }
    }
}

using Check = void (*)(Context&, Tally&);

const std::vector<std::pair<std::string, Check>>& checks() {
    static const std::vector<std::pair<std::string, Check>> table{
        {"conv1x1", check_conv},
        {"relu", check_relu},
        {"sigmoid", check_sigmoid},
        {"hadamard", check_hadamard},
        {"variance", check_variance},
        {"variance_constraint", check_variance_constraint},
        {"probanet_loss", check_probanet_loss},
        {"head", check_head},
        {"gate", check_gate},
        {"end_to_end", check_end_to_end},
    };
    return table;
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [name, fn] : checks()) n.push_back(name);
        return n;
    }();
    return names;
}

std::vector<OpReport> run_gradcheck(const GradcheckOptions& options) {
    if (!(options.h > 0.0)) throw DomainError("gradcheck: step h must be positive");
    if (options.seeds <= 0) throw DomainError("gradcheck: need at least one seed");
    if (options.max_height < 1 || options.max_width < 1 || options.max_channels < 1)
        throw DomainError("gradcheck: shape limits must be positive");
    const auto& table = checks();
    if (!options.op.empty() &&
        std::none_of(table.begin(), table.end(), [&](const auto& e) { return e.first == options.op; }))
        throw DomainError("gradcheck: unknown op '" + options.op + "'");

    std::vector<OpReport> reports;
    for (std::size_t k = 0; k < table.size(); ++k) {
        const auto& [name, fn] = table[k];
        if (!options.op.empty() && name != options.op) continue;
        Tally tally;
        for (int s = 0; s < options.seeds; ++s) {
            Context ctx{options, Rng(derive_seed(options.seed + static_cast<std::uint64_t>(s), kGradcheckStream, k))};
            fn(ctx, tally);
        }
        reports.push_back({name, tally.worst, tally.compared, tally.worst < options.tolerance});
    }
    return reports;
}

}  // namespace probanet
