#pragma once

// Toy two-stage training loop: proposal conv -> gate -> truncation -> fixed
// ratio sampler -> scalar-affine objectness head, trained by SGD with momentum
// on L_cls + L_gate. A baseline variant runs the same loop with the gate out of
// the data path.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "probanet/gate.hpp"
#include "probanet/rng.hpp"
#include "probanet/sim.hpp"
#include "probanet/tensor.hpp"

namespace probanet {

enum class VarianceTarget { gate, input };

struct TrainConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;
    double weight_decay = 0.005;
    int epochs = 4;
    int steps_per_epoch = 500;
    int lr_decay_every = 0;        // epochs; 0 disables step decay
    double lr_decay_factor = 0.1;
    double grad_clip = 1.0;        // global L2 norm; 0 disables

    double alpha = 0.5;
    double epsilon = 1e-3;
    double th = 0.5;
    int r = 16;
    bool proposal_relu = false;    // ReLU on the proposal conv output A
    VarianceTarget variance_target = VarianceTarget::gate;
    VarianceScope variance_scope = VarianceScope::per_anchor;
    bool probanet_enabled = true;

    int scenes_per_batch = 2;
    int batch_size = 256;
    int fg_per_batch = 64;
    int eval_scenes = 8;
    double proposal_bias_init = 0.0;
    double gate_bias_init = 0.0;   // initial expand-conv bias, sets the starting t2 level
    double head_shift_init = 0.0;
    double gate_expand_init_scale = 1.0;  // multiplies the expand-conv initial weights
    double gate_expand_init_mean = 0.3;   // added to the expand-conv initial weights after scaling

    std::uint64_t seed = 0;

    int total_steps() const noexcept { return epochs * steps_per_epoch; }
    /// Throws ConfigError.
    void validate() const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Every learnable scalar of the toy detector.
struct Model {
    Conv1x1Params proposal;  // C -> C': the proposal map A (optionally followed by ReLU)
    GateParams gate;
    double head_scale = 1.0;
    double head_shift = 0.0;

    static Model initialize(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed);

    std::size_t scalar_count() const noexcept { return proposal.scalar_count() + gate.scalar_count() + 2; }
    /// Order: proposal.weight, proposal.bias, gate (GateParams::flatten), head_scale, head_shift.
    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);

    /// Range of the gate parameters inside flatten().
    std::size_t gate_offset() const noexcept { return proposal.scalar_count(); }
};

/// Scenes of one mini-batch stacked along height, with matching labels.
struct StepInputs {
    FeatureMap features;               // (S*H) x W x C
    std::vector<AnchorLabel> labels;   // (S*H) * W * C', row-major
    std::vector<Box> objects;          // boxes of all scenes, y shifted by scene * H
};

StepInputs stack_scenes(std::span<const Scene> scenes, const AnchorGrid& grid, const LabelThresholds& thresholds);

struct HeadOutput {
    std::vector<double> logits;  // one per batch entry
    double cls_loss = 0.0;
};

struct HeadGrads {
    std::vector<double> grad_b;  // dense, same length as the proposal map
    double grad_scale = 0.0;
    double grad_shift = 0.0;
};

/// logit = scale * b[idx] + shift; mean binary cross-entropy with fg -> 1,
/// bg -> 0, in the stable max(z, 0) - z y + log1p(exp(-|z|)) form.
HeadOutput head_forward(std::span<const double> b, std::span<const AnchorLabel> labels, const MiniBatch& batch,
                        double scale, double shift);
HeadGrads head_backward(std::span<const double> b, std::span<const AnchorLabel> labels, const MiniBatch& batch,
                        double scale, double shift);

struct Separation {
    double fg_mean = 0.0;
    double bg_mean = 0.0;
    double gap = 0.0;
};

/// Means of t2 over fg and bg anchors. Throws DomainError if either class is absent.
Separation evaluate_separation(const FeatureMap& t2, std::span<const AnchorLabel> labels);

struct StepRecord {
    int step = 0;
    double cls_loss = 0.0;
    double probanet_loss = 0.0;
    double variance = 0.0;
    double beta = 0.0;
    double hard_ratio = 0.0;
    double fg_gate_mean = 0.0;
    double bg_gate_mean = 0.0;
    double kept_fraction = 0.0;
};

using MetricsLog = std::vector<StepRecord>;

/// The proposal map A for `features`.
FeatureMap proposal_map(const Model& model, const FeatureMap& features, const TrainConfig& config);

/// Everything one forward pass produces; kept for the backward pass.
struct ForwardPass {
    FeatureMap a_pre;
    FeatureMap a;
    GateOutput gate;   // in baseline mode: evaluated in test mode for logging only
    FeatureMap b;      // what the head reads
    std::vector<std::uint8_t> keep_mask;  // empty = everything kept
    MiniBatch batch;
    HeadOutput head;
    VarianceTerm variance;
    LossTerms loss;
};

ForwardPass forward_pass(const Model& model, const StepInputs& inputs, const TrainConfig& config, Rng& sampler);

/// Gradient of cls_loss + beta * exp(1/v) with respect to Model::flatten(),
/// beta held at the value stored in `pass`.
std::vector<double> backward_pass(const Model& model, const StepInputs& inputs, const TrainConfig& config,
                                  const ForwardPass& pass);

/// Re-evaluates the step objective with the mini-batch and beta frozen, as a
/// function of the flat parameters. This is what backward_pass differentiates;
/// tests and gradcheck compare the two.
double frozen_objective(std::span<const double> flat_params, const Model& layout, const StepInputs& inputs,
                        const TrainConfig& config, const ForwardPass& reference);

struct TrainState {
    Model model;
    std::vector<double> velocity;
    Rng sampler;
    int step = 0;
};

TrainState initial_state(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed);

/// One optimisation step: forward, backward, v <- mu v - lr (g + wd w), w <- w + v.
/// In baseline mode the gate parameters are frozen. Throws NumericError naming
/// the step when the loss is not finite.
StepRecord train_step(TrainState& state, const StepInputs& inputs, const TrainConfig& config);

/// Learning rate in effect at a given step (after optional step decay).
double effective_learning_rate(const TrainConfig& config, int step);

/// Scenes for a given (seed, step); identical for every variant of a paired run.
std::vector<Scene> scenes_for_step(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed, int step);
std::vector<Scene> evaluation_scenes(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed);

struct Evaluation {
    Separation gate;         // t2 over the held-out scenes, test mode
    double logit_gap = 0.0;  // mean head logit fg minus bg, test mode
};

Evaluation evaluate_model(const Model& model, const SimConfig& sim, const TrainConfig& config, std::uint64_t seed);

/// Model parameters after `step` updates.
struct Snapshot {
    int step = 0;
    Model model;
};

/// Step 0 and the end of every epoch.
std::vector<int> snapshot_steps(const TrainConfig& config);

struct RunResult {
    std::uint64_t seed = 0;
    MetricsLog log;
    Model model;
    std::vector<Snapshot> snapshots;
    Evaluation final_eval;
    double tail_hard_ratio = 0.0;  // mean over the final 25% of steps
};

/// Called after every step with the state and that step's inputs.
using StepObserver = std::function<void(const TrainState&, const StepInputs&, const StepRecord&)>;

RunResult run_training(const SimConfig& sim, const TrainConfig& config, std::uint64_t seed,
                       const StepObserver& observer = {});

/// Mean hard_ratio over the last quarter of the log (at least one record).
double tail_hard_ratio(const MetricsLog& log);

struct PairedRun {
    std::uint64_t seed = 0;
    RunResult baseline;
    RunResult probanet;
};

struct ExperimentReport {
    std::vector<PairedRun> runs;

    double mean_tail_hard_ratio_baseline() const;
    double mean_tail_hard_ratio_probanet() const;
};

/// Trains every config on seeds variants[0].seed, + 1, ...; result[i][v] is
/// seed i under variant v. Configs must agree on optimiser, batch geometry, r
/// and seed. Jobs run on up to `threads` threads; the first failing job (in
/// seed-major order) is rethrown prefixed with its seed.
std::vector<std::vector<RunResult>> run_seeds(const SimConfig& sim, std::span<const TrainConfig> variants, int n_seeds,
                                              int threads = 1);

/// Trains both configs on seeds config.seed, config.seed + 1, ...; runs are
/// independent and may execute concurrently (`threads` <= 1 runs serially).
/// Errors are rethrown prefixed with the failing seed.
ExperimentReport run_experiment(const SimConfig& sim, const TrainConfig& baseline, const TrainConfig& probanet,
                                int n_seeds, int threads = 1);

}  // namespace probanet
