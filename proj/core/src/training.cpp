#include "probanet/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <string>
#include <thread>

#include "probanet/error.hpp"

namespace probanet {

namespace {

// Sub-stream identifiers for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kSceneStream = 2;
constexpr std::uint64_t kSamplerStream = 3;
constexpr std::uint64_t kEvalStream = 4;

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

SamplerConfig sampler_config(const TrainConfig& config) { return {config.batch_size, config.fg_per_batch}; }

const FeatureMap& variance_source(const ForwardPass& pass, const StepInputs& inputs, const TrainConfig& config) {
    return config.variance_target == VarianceTarget::gate ? pass.gate.t2 : inputs.features;
}

struct ClassMeans {
    double fg = 0.0;
    double bg = 0.0;
    std::size_t n_fg = 0;
    std::size_t n_bg = 0;
};

ClassMeans class_means(std::span<const double> values, std::span<const AnchorLabel> labels) {
    if (values.size() != labels.size()) throw DimensionError("class means: value/label length mismatch");
    ClassMeans m;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n].cls == AnchorClass::foreground) {
            m.fg += values[n];
            ++m.n_fg;
        } else if (labels[n].cls == AnchorClass::background) {
            m.bg += values[n];
            ++m.n_bg;
        }
    }
    if (m.n_fg) m.fg /= static_cast<double>(m.n_fg);
    if (m.n_bg) m.bg /= static_cast<double>(m.n_bg);
    return m;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (epochs < 0 || steps_per_epoch < 0) throw ConfigError("epochs and steps_per_epoch must be >= 0");
    if (lr_decay_every < 0 || !(lr_decay_factor > 0.0)) throw ConfigError("lr decay settings are invalid");
    if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (!(th >= 0.0 && th < 1.0)) throw ConfigError("th must lie in [0, 1)");
    if (r <= 0) throw ConfigError("r must be positive");
    if (scenes_per_batch <= 0) throw ConfigError("scenes_per_batch must be positive");
    if (eval_scenes <= 0) throw ConfigError("eval_scenes must be positive");
    sampler_config(*this).validate();
}

Model Model::initialize(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed) {
    sim.validate();
    config.validate();
    if (sim.channels % config.r != 0)
        throw ConfigError("channels (" + std::to_string(sim.channels) + ") not divisible by r (" +
                          std::to_string(config.r) + ")");
    Rng rng(derive_seed(seed, kInitStream));
    Model m;
    m.proposal = Conv1x1Params(sim.anchor_count, sim.channels);
    const double bound = 1.0 / std::sqrt(static_cast<double>(sim.channels));
    for (auto& w : m.proposal.weight) w = rng.uniform(-bound, bound);
    for (auto& b : m.proposal.bias) b = config.proposal_bias_init;
    m.gate = GateParams::initialize(sim.channels, sim.anchor_count, config.r, config.th, rng);
    for (auto& b : m.gate.expand.bias) b = config.gate_bias_init;
    for (auto& w : m.gate.expand.weight) w = w * config.gate_expand_init_scale + config.gate_expand_init_mean;
    m.head_shift = config.head_shift_init;
    return m;
}

std::vector<double> Model::flatten() const {
    std::vector<double> flat;
    flat.reserve(scalar_count());
    flat.insert(flat.end(), proposal.weight.begin(), proposal.weight.end());
    flat.insert(flat.end(), proposal.bias.begin(), proposal.bias.end());
    const auto g = gate.flatten();
    flat.insert(flat.end(), g.begin(), g.end());
    flat.push_back(head_scale);
    flat.push_back(head_shift);
    return flat;
}

void Model::assign(std::span<const double> flat) {
    if (flat.size() != scalar_count()) throw DimensionError("Model::assign: wrong parameter count");
    auto it = flat.begin();
    for (auto& w : proposal.weight) w = *it++;
    for (auto& b : proposal.bias) b = *it++;
    const auto n_gate = static_cast<std::ptrdiff_t>(gate.scalar_count());
    gate.assign(flat.subspan(static_cast<std::size_t>(it - flat.begin()), static_cast<std::size_t>(n_gate)));
    it += n_gate;
    head_scale = *it++;
    head_shift = *it++;
}

StepInputs stack_scenes(std::span<const Scene> scenes, const AnchorGrid& grid, const LabelThresholds& thresholds) {
    if (scenes.empty()) throw DomainError("stack_scenes: no scenes");
    const Shape one = scenes.front().features.shape();
    const int S = static_cast<int>(scenes.size());
    StepInputs in;
    std::vector<double> data;
    data.reserve(one.size() * scenes.size());
    for (int s = 0; s < S; ++s) {
        const Scene& sc = scenes[static_cast<std::size_t>(s)];
        if (sc.features.shape() != one) throw DimensionError("stack_scenes: scenes differ in shape");
        data.insert(data.end(), sc.features.values().begin(), sc.features.values().end());
        auto labels = label_anchors(sc, grid, thresholds);
        for (auto& l : labels) l.position.i += s * one.height;
        in.labels.insert(in.labels.end(), labels.begin(), labels.end());
        for (Box b : sc.objects) {
            b.y_min += s * one.height;
            b.y_max += s * one.height;
            in.objects.push_back(b);
        }
    }
    in.features = FeatureMap({one.height * S, one.width, one.channels}, std::move(data));
    return in;
}

HeadOutput head_forward(std::span<const double> b, std::span<const AnchorLabel> labels, const MiniBatch& batch,
                        double scale, double shift) {
    if (batch.size() == 0) throw DomainError("head_forward: empty batch");
    if (b.size() != labels.size()) throw DimensionError("head_forward: proposal map and labels differ in length");
    HeadOutput out;
    out.logits.reserve(batch.size());
    double total = 0.0;
    for (std::size_t idx : batch.indices) {
        if (idx >= b.size()) throw DimensionError("head_forward: batch index out of range");
        const double z = scale * b[idx] + shift;
        const double y = labels[idx].cls == AnchorClass::foreground ? 1.0 : 0.0;
        out.logits.push_back(z);
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    out.cls_loss = total / static_cast<double>(batch.size());
    return out;
}

HeadGrads head_backward(std::span<const double> b, std::span<const AnchorLabel> labels, const MiniBatch& batch,
                        double scale, double shift) {
    if (batch.size() == 0) throw DomainError("head_backward: empty batch");
    if (b.size() != labels.size()) throw DimensionError("head_backward: proposal map and labels differ in length");
    HeadGrads g;
    g.grad_b.assign(b.size(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (std::size_t idx : batch.indices) {
        const double z = scale * b[idx] + shift;
        const double y = labels[idx].cls == AnchorClass::foreground ? 1.0 : 0.0;
        const double dz = (stable_sigmoid(z) - y) * inv_n;
        g.grad_b[idx] += dz * scale;
        g.grad_scale += dz * b[idx];
        g.grad_shift += dz;
    }
    return g;
}

Separation evaluate_separation(const FeatureMap& t2, std::span<const AnchorLabel> labels) {
    const ClassMeans m = class_means(t2.values(), labels);
    if (m.n_fg == 0 || m.n_bg == 0) throw DomainError("evaluate_separation: need at least one fg and one bg anchor");
    return {m.fg, m.bg, m.fg - m.bg};
}

FeatureMap proposal_map(const Model& model, const FeatureMap& features, const TrainConfig& config) {
    FeatureMap a = conv1x1_forward(features, model.proposal);
    return config.proposal_relu ? relu(a) : a;
}

ForwardPass forward_pass(const Model& model, const StepInputs& inputs, const TrainConfig& config, Rng& sampler) {
    ForwardPass p;
    p.a_pre = conv1x1_forward(inputs.features, model.proposal);
    p.a = config.proposal_relu ? relu(p.a_pre) : p.a_pre;
    if (config.probanet_enabled) {
        p.gate = gate_forward(inputs.features, p.a, model.gate, GateMode::train);
        p.b = p.gate.b;
        p.keep_mask = p.gate.keep_mask;
    } else {
        p.gate = gate_forward(inputs.features, p.a, model.gate, GateMode::test);
        p.b = p.a;
    }
    p.batch = sample_minibatch(inputs.labels, p.keep_mask, sampler, sampler_config(config));
    p.head = head_forward(p.b.values(), inputs.labels, p.batch, model.head_scale, model.head_shift);
    p.variance = variance_constraint(variance_source(p, inputs, config), config.epsilon, config.variance_scope);
    if (config.probanet_enabled && std::isfinite(p.head.cls_loss)) {
        p.loss = probanet_loss(p.variance.v, p.head.cls_loss, config.alpha);
    } else if (config.probanet_enabled) {
        p.loss.variance = p.variance.v;
        p.loss.cls_loss = p.head.cls_loss;
        p.loss.probanet_loss = p.head.cls_loss;
    } else {
        p.loss.variance = p.variance.v;
        p.loss.cls_loss = p.head.cls_loss;
    }
    return p;
}

std::vector<double> backward_pass(const Model& model, const StepInputs& inputs, const TrainConfig& config,
                                  const ForwardPass& pass) {
    const HeadGrads hg = head_backward(pass.b.values(), inputs.labels, pass.batch, model.head_scale, model.head_shift);
    FeatureMap grad_b(pass.b.shape(), hg.grad_b);

    FeatureMap grad_a;
    std::vector<double> gate_grad(model.gate.scalar_count(), 0.0);
    if (config.probanet_enabled) {
        std::optional<FeatureMap> extra;
        if (config.variance_target == VarianceTarget::gate && !pass.variance.clamped && pass.loss.grad_v != 0.0) {
            extra = pass.variance.grad;
            for (auto& v : extra->values()) v *= pass.loss.grad_v;
        }
        GateGrads gg = gate_backward(pass.gate, inputs.features, pass.a, model.gate, grad_b,
                                     extra ? &*extra : nullptr);
        grad_a = std::move(gg.grad_a);
        gate_grad = gg.flatten();
    } else {
        grad_a = std::move(grad_b);
    }

    const FeatureMap grad_a_pre = config.proposal_relu ? relu_backward(pass.a_pre, grad_a) : std::move(grad_a);
    const Conv1x1Grads pg = conv1x1_backward(inputs.features, model.proposal, grad_a_pre);

    std::vector<double> flat;
    flat.reserve(model.scalar_count());
    flat.insert(flat.end(), pg.grad_weight.begin(), pg.grad_weight.end());
    flat.insert(flat.end(), pg.grad_bias.begin(), pg.grad_bias.end());
    flat.insert(flat.end(), gate_grad.begin(), gate_grad.end());
    flat.push_back(hg.grad_scale);
    flat.push_back(hg.grad_shift);
    return flat;
}

double frozen_objective(std::span<const double> flat_params, const Model& layout, const StepInputs& inputs,
                        const TrainConfig& config, const ForwardPass& reference) {
    Model m = layout;
    m.assign(flat_params);
    const FeatureMap a = proposal_map(m, inputs.features, config);
    double objective = 0.0;
    if (config.probanet_enabled) {
        const GateOutput g = gate_forward(inputs.features, a, m.gate, GateMode::train);
        objective = head_forward(g.b.values(), inputs.labels, reference.batch, m.head_scale, m.head_shift).cls_loss;
        if (reference.loss.probanet_loss > 0.0) {
            const FeatureMap& src = config.variance_target == VarianceTarget::gate ? g.t2 : inputs.features;
            const double v = variance_constraint(src, config.epsilon, config.variance_scope).v;
            // beta_ref * exp(1/v) with beta_ref = L_ref * exp(-1/v_ref), kept in log space.
            objective += reference.loss.probanet_loss * std::exp(1.0 / v - 1.0 / reference.variance.v);
        }
    } else {
        objective = head_forward(a.values(), inputs.labels, reference.batch, m.head_scale, m.head_shift).cls_loss;
    }
    return objective;
}

TrainState initial_state(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed) {
    TrainState s{Model::initialize(sim, config, seed), {}, Rng(derive_seed(seed, kSamplerStream)), 0};
    s.velocity.assign(s.model.scalar_count(), 0.0);
    return s;
}

double effective_learning_rate(const TrainConfig& config, int step) {
    if (config.lr_decay_every <= 0 || config.steps_per_epoch <= 0) return config.learning_rate;
    const int epoch = step / config.steps_per_epoch;
    return config.learning_rate * std::pow(config.lr_decay_factor, epoch / config.lr_decay_every);
}

StepRecord train_step(TrainState& state, const StepInputs& inputs, const TrainConfig& config) {
    const ForwardPass pass = forward_pass(state.model, inputs, config, state.sampler);
    const double total = pass.head.cls_loss + pass.loss.probanet_loss;
    if (!std::isfinite(total) || !std::isfinite(pass.variance.v))
        throw NumericError("step " + std::to_string(state.step) + ": non-finite loss");

    std::vector<double> grad = backward_pass(state.model, inputs, config, pass);
    const std::size_t gate_begin = state.model.gate_offset();
    const std::size_t gate_end = gate_begin + state.model.gate.scalar_count();
    const auto trainable = [&](std::size_t n) { return config.probanet_enabled || n < gate_begin || n >= gate_end; };

    double norm2 = 0.0;
    for (std::size_t n = 0; n < grad.size(); ++n) {
        if (!std::isfinite(grad[n])) throw NumericError("step " + std::to_string(state.step) + ": non-finite gradient");
        if (trainable(n)) norm2 += grad[n] * grad[n];
    }
    if (config.grad_clip > 0.0 && norm2 > config.grad_clip * config.grad_clip) {
        const double s = config.grad_clip / std::sqrt(norm2);
        for (auto& g : grad) g *= s;
    }

    const double lr = effective_learning_rate(config, state.step);
    std::vector<double> w = state.model.flatten();
    for (std::size_t n = 0; n < w.size(); ++n) {
        if (!trainable(n)) continue;
        double& v = state.velocity[n];
        v = config.momentum * v - lr * (grad[n] + config.weight_decay * w[n]);
        w[n] += v;
    }
    state.model.assign(w);

    StepRecord rec;
    rec.step = state.step;
    rec.cls_loss = pass.head.cls_loss;
    rec.probanet_loss = pass.loss.probanet_loss;
    rec.variance = pass.variance.v;
    rec.beta = pass.loss.beta;
    rec.hard_ratio = hard_ratio(pass.batch, inputs.labels);
    const ClassMeans m = class_means(pass.gate.t2.values(), inputs.labels);
    rec.fg_gate_mean = m.fg;
    rec.bg_gate_mean = m.bg;
    rec.kept_fraction = config.probanet_enabled ? pass.gate.kept_fraction() : 1.0;
    ++state.step;
    return rec;
}

std::vector<Scene> scenes_for_step(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed, int step) {
    std::vector<Scene> scenes;
    const auto S = static_cast<std::uint64_t>(config.scenes_per_batch);
    for (std::uint64_t s = 0; s < S; ++s)
        scenes.push_back(generate_scene(sim, derive_seed(seed, kSceneStream, static_cast<std::uint64_t>(step) * S + s)));
    return scenes;
}

std::vector<Scene> evaluation_scenes(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed) {
    std::vector<Scene> scenes;
    for (int e = 0; e < config.eval_scenes; ++e)
        scenes.push_back(generate_scene(sim, derive_seed(seed, kEvalStream, static_cast<std::uint64_t>(e))));
    return scenes;
}

Evaluation evaluate_model(const Model& model, const SimConfig& sim, const TrainConfig& config, std::uint64_t seed) {
    const auto scenes = evaluation_scenes(sim, config, seed);
    const StepInputs in = stack_scenes(scenes, AnchorGrid::from_config(sim), sim.thresholds);
    const FeatureMap a = proposal_map(model, in.features, config);
    const GateOutput g = gate_forward(in.features, a, model.gate, GateMode::test);
    const FeatureMap& b = config.probanet_enabled ? g.b : a;

    Evaluation ev;
    ev.gate = evaluate_separation(g.t2, in.labels);
    std::vector<double> logits(b.size());
    for (std::size_t n = 0; n < b.size(); ++n) logits[n] = model.head_scale * b[n] + model.head_shift;
    const ClassMeans lm = class_means(logits, in.labels);
    ev.logit_gap = lm.fg - lm.bg;
    return ev;
}

double tail_hard_ratio(const MetricsLog& log) {
    if (log.empty()) return 0.0;
    const std::size_t tail = std::max<std::size_t>(1, log.size() / 4);
    double sum = 0.0;
    for (std::size_t n = log.size() - tail; n < log.size(); ++n) sum += log[n].hard_ratio;
    return sum / static_cast<double>(tail);
}

std::vector<int> snapshot_steps(const TrainConfig& config) {
    std::vector<int> steps{0};
    for (int e = 1; e <= config.epochs; ++e)
        if (const int s = e * config.steps_per_epoch; s != steps.back()) steps.push_back(s);
    return steps;
}

RunResult run_training(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed,
                       const StepObserver& observer) {
    sim.validate();
    config.validate();
    const AnchorGrid grid = AnchorGrid::from_config(sim);
    TrainState state = initial_state(sim, config, seed);

    RunResult result;
    result.seed = seed;
    result.log.reserve(static_cast<std::size_t>(config.total_steps()));
    const std::vector<int> keep = snapshot_steps(config);
    auto next_snapshot = keep.begin();
    const auto maybe_snapshot = [&] {
        if (next_snapshot != keep.end() && *next_snapshot == state.step) {
            result.snapshots.push_back({state.step, state.model});
            ++next_snapshot;
        }
    };
    maybe_snapshot();
    for (int step = 0; step < config.total_steps(); ++step) {
        const auto scenes = scenes_for_step(sim, config, seed, step);
        const StepInputs inputs = stack_scenes(scenes, grid, sim.thresholds);
        result.log.push_back(train_step(state, inputs, config));
        if (observer) observer(state, inputs, result.log.back());
        maybe_snapshot();
    }
    result.model = state.model;
    result.final_eval = evaluate_model(state.model, sim, config, seed);
    result.tail_hard_ratio = tail_hard_ratio(result.log);
    return result;
}

double ExperimentReport::mean_tail_hard_ratio_baseline() const {
    if (runs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : runs) s += r.baseline.tail_hard_ratio;
    return s / static_cast<double>(runs.size());
}

double ExperimentReport::mean_tail_hard_ratio_probanet() const {
    if (runs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : runs) s += r.probanet.tail_hard_ratio;
    return s / static_cast<double>(runs.size());
}

std::vector<std::vector<RunResult>> run_seeds(const SimConfig& sim, std::span<const TrainConfig> variants, int n_seeds,
                                              int threads) {
    if (n_seeds <= 0) throw DomainError("run_seeds: n_seeds must be positive");
    if (variants.empty()) throw DomainError("run_seeds: no variants");
    const TrainConfig& first = variants.front();
    for (const TrainConfig& v : variants) {
        if (v.learning_rate != first.learning_rate || v.momentum != first.momentum ||
            v.weight_decay != first.weight_decay || v.total_steps() != first.total_steps() || v.seed != first.seed ||
            v.scenes_per_batch != first.scenes_per_batch || v.batch_size != first.batch_size ||
            v.fg_per_batch != first.fg_per_batch || v.r != first.r)
            throw ConfigError("run_seeds: paired configs may differ only in the gate mechanism settings");
    }

    const int n_variants = static_cast<int>(variants.size());
    const int n_jobs = n_seeds * n_variants;
    std::vector<std::vector<RunResult>> results(static_cast<std::size_t>(n_seeds),
                                                std::vector<RunResult>(variants.size()));
    std::atomic<int> next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    int first_error_job = n_jobs;

    auto worker = [&] {
        for (int job = next++; job < n_jobs; job = next++) {
            const int i = job / n_variants;
            const int v = job % n_variants;
            const std::uint64_t seed = first.seed + static_cast<std::uint64_t>(i);
            try {
                results[static_cast<std::size_t>(i)][static_cast<std::size_t>(v)] =
                    run_training(sim, variants[static_cast<std::size_t>(v)], seed);
            } catch (const std::exception& e) {
                std::lock_guard lock(error_mutex);
                if (job < first_error_job) {
                    first_error_job = job;
                    first_error = std::make_exception_ptr(Error("seed " + std::to_string(seed) + ": " + e.what()));
                }
            }
        }
    };

    const int n_threads = std::clamp(threads, 1, n_jobs);
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

ExperimentReport run_experiment(const SimConfig& sim, const TrainConfig& baseline, const TrainConfig& probanet,
                                int n_seeds, int threads) {
    const TrainConfig variants[] = {baseline, probanet};
    auto results = run_seeds(sim, variants, n_seeds, threads);
    ExperimentReport report;
    for (std::size_t i = 0; i < results.size(); ++i) {
        PairedRun run;
        run.seed = baseline.seed + i;
        run.baseline = std::move(results[i][0]);
        run.probanet = std::move(results[i][1]);
        report.runs.push_back(std::move(run));
    }
    return report;
}

}  // namespace probanet
