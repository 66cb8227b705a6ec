#pragma once

// Run artifacts: metrics.csv, summary.csv, model snapshots, scene exports and
// gate heatmaps, laid out per run directory.
//
//   <run>/resolved-config.txt
//   <run>/metrics.csv
//   <run>/snapshots/step_<s>.txt
//   <run>/scene/features.txt, <run>/scene/boxes.csv     (first held-out scene)
//   <run>/heatmaps/t2_step<s>_k<k>.pgm, top_step<s>.ppm

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "probanet/config.hpp"
#include "probanet/training.hpp"

namespace probanet {

inline constexpr const char* kMetricsHeader =
    "step,cls_loss,probanet_loss,variance,beta,hard_ratio,fg_gate_mean,bg_gate_mean,kept_fraction";

/// Shortest round-trip decimal form.
std::string format_number(double v);

void write_metrics_csv(std::ostream& out, const MetricsLog& log);
/// Throws IoError on a wrong header or malformed row.
MetricsLog read_metrics_csv(std::istream& in);

struct VariantSummary {
    std::string name;  // column prefix, e.g. "baseline"
    double tail_hard_ratio = 0.0;
    Evaluation eval;
};

struct SummaryRow {
    std::uint64_t seed = 0;
    std::vector<VariantSummary> variants;  // same names, same order, in every row
};

VariantSummary summarize(std::string name, const RunResult& run);

/// seed,<v>_tail_hard_ratio,<v>_gate_fg_mean,<v>_gate_bg_mean,<v>_gate_gap,<v>_logit_gap,...
void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows);

/// "params N" then one value per line, in Model::flatten order.
void write_model(std::ostream& out, const Model& model);
/// `layout` supplies the shapes; throws IoError on a count mismatch or bad value.
Model read_model(std::istream& in, const Model& layout);

struct HeatmapFiles {
    std::filesystem::path pgm;
    std::filesystem::path ppm;
};

/// Renders channel `channel` of the test-mode gate weights on the first
/// held-out scene, plus the top-5%/top-1% overlay, into <run>/heatmaps.
/// Throws DimensionError for a channel outside [0, C').
HeatmapFiles render_heatmaps(const std::filesystem::path& run_dir, const ExperimentConfig& config,
                             const Model& model, int step, int channel);

/// Writes every artifact of one run. `config` is the run's own resolved
/// config (its seed and variant). Heatmaps are rendered for every channel at
/// the final snapshot. Throws IoError when a file cannot be written.
void write_run_directory(const std::filesystem::path& run_dir, const ExperimentConfig& config, const RunResult& run);

struct LoadedRun {
    ExperimentConfig config;
    Model model;
};

/// Reads resolved-config.txt and the snapshot for `step`. Throws IoError when
/// the run directory or config is missing and DomainError when no snapshot
/// exists for `step`.
LoadedRun load_run_snapshot(const std::filesystem::path& run_dir, int step);

}  // namespace probanet
