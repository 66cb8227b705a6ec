#include "probanet/report.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "probanet/error.hpp"
#include "probanet/gate.hpp"
#include "probanet/netpbm.hpp"

namespace probanet {

namespace fs = std::filesystem;

namespace {

double parse_double(std::string_view text, const std::string& where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw IoError(where + ": bad number '" + std::string(text) + "'");
    return v;
}

std::ofstream open_out(const fs::path& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    return out;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    return in;
}

void make_dirs(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

fs::path snapshot_path(const fs::path& run_dir, int step) {
    return run_dir / "snapshots" / ("step_" + std::to_string(step) + ".txt");
}

}  // namespace

std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void write_metrics_csv(std::ostream& out, const MetricsLog& log) {
    out << kMetricsHeader << '\n';
    for (const StepRecord& r : log) {
        out << r.step;
        for (double v : {r.cls_loss, r.probanet_loss, r.variance, r.beta, r.hard_ratio, r.fg_gate_mean, r.bg_gate_mean,
                         r.kept_fraction})
            out << ',' << format_number(v);
        out << '\n';
    }
}

MetricsLog read_metrics_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) throw IoError("metrics.csv: unexpected header");
    MetricsLog log;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = "metrics.csv line " + std::to_string(line_no);
        std::vector<std::string_view> fields;
        std::string_view rest(line);
        for (;;) {
            const auto comma = rest.find(',');
            fields.push_back(rest.substr(0, comma));
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
        if (fields.size() != 9) throw IoError(where + ": expected 9 fields");
        StepRecord r;
        int step = 0;
        auto [ptr, ec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), step);
        if (ec != std::errc{} || ptr != fields[0].data() + fields[0].size()) throw IoError(where + ": bad step");
        r.step = step;
        double* targets[] = {&r.cls_loss, &r.probanet_loss, &r.variance, &r.beta, &r.hard_ratio,
                             &r.fg_gate_mean, &r.bg_gate_mean, &r.kept_fraction};
        for (std::size_t f = 1; f < 9; ++f) *targets[f - 1] = parse_double(fields[f], where);
        log.push_back(r);
    }
    return log;
}

VariantSummary summarize(std::string name, const RunResult& run) {
    return {std::move(name), run.tail_hard_ratio, run.final_eval};
}

void write_summary_csv(std::ostream& out, std::span<const SummaryRow> rows) {
    out << "seed";
    if (!rows.empty())
        for (const auto& v : rows.front().variants)
            for (const char* col : {"_tail_hard_ratio", "_gate_fg_mean", "_gate_bg_mean", "_gate_gap", "_logit_gap"})
                out << ',' << v.name << col;
    out << '\n';
    for (const SummaryRow& row : rows) {
        if (!rows.empty() && row.variants.size() != rows.front().variants.size())
            throw DimensionError("write_summary_csv: rows list different variants");
        out << row.seed;
        for (const auto& v : row.variants)
            for (double x : {v.tail_hard_ratio, v.eval.gate.fg_mean, v.eval.gate.bg_mean, v.eval.gate.gap, v.eval.logit_gap})
                out << ',' << format_number(x);
        out << '\n';
    }
}

void write_model(std::ostream& out, const Model& model) {
    const auto flat = model.flatten();
    out << "params " << flat.size() << '\n';
    for (double v : flat) out << format_number(v) << '\n';
}

Model read_model(std::istream& in, const Model& layout) {
    std::string word;
    std::size_t count = 0;
    if (!(in >> word >> count) || word != "params") throw IoError("snapshot: expected 'params N' header");
    if (count != layout.scalar_count())
        throw IoError("snapshot: holds " + std::to_string(count) + " parameters, config implies " +
                      std::to_string(layout.scalar_count()));
    std::vector<double> flat(count);
    std::string token;
    for (std::size_t n = 0; n < count; ++n) {
        if (!(in >> token)) throw IoError("snapshot: truncated");
        flat[n] = parse_double(token, "snapshot value " + std::to_string(n));
    }
    Model m = layout;
    m.assign(flat);
    return m;
}

HeatmapFiles render_heatmaps(const fs::path& run_dir, const ExperimentConfig& config, const Model& model, int step,
                             int channel) {
    const SimConfig& sim = config.sim;
    if (channel < 0 || channel >= sim.anchor_count)
        throw DimensionError("channel " + std::to_string(channel) + " outside [0, " +
                             std::to_string(sim.anchor_count) + ")");
    const Scene scene = evaluation_scenes(sim, config.train, config.train.seed).front();
    const AnchorGrid grid = AnchorGrid::from_config(sim);
    const FeatureMap a = proposal_map(model, scene.features, config.train);
    const GateOutput g = gate_forward(scene.features, a, model.gate, GateMode::test);

    const fs::path dir = run_dir / "heatmaps";
    make_dirs(dir);
    HeatmapFiles files{dir / ("t2_step" + std::to_string(step) + "_k" + std::to_string(channel) + ".pgm"),
                       dir / ("top_step" + std::to_string(step) + ".ppm")};

    GrayImage heat = channel_heatmap(g.t2, channel);
    heat.comments.push_back("gate weights t2, step " + std::to_string(step));
    auto pgm = open_out(files.pgm, true);
    write_pgm(pgm, heat);

    RgbImage overlay = top_weight_overlay(scene, grid, g.t2);
    overlay.comments.push_back("gate weights t2, step " + std::to_string(step));
    auto ppm = open_out(files.ppm, true);
    write_ppm(ppm, overlay);
    return files;
}

void write_run_directory(const fs::path& run_dir, const ExperimentConfig& config, const RunResult& run) {
    make_dirs(run_dir / "snapshots");
    make_dirs(run_dir / "scene");
    {
        auto out = open_out(run_dir / "resolved-config.txt");
        out << format_config(config);
    }
    {
        auto out = open_out(run_dir / "metrics.csv");
        write_metrics_csv(out, run.log);
    }
    for (const Snapshot& s : run.snapshots) {
        auto out = open_out(snapshot_path(run_dir, s.step));
        write_model(out, s.model);
    }
    const Scene scene = evaluation_scenes(config.sim, config.train, config.train.seed).front();
    {
        auto out = open_out(run_dir / "scene" / "features.txt");
        write_feature_map(out, scene.features);
    }
    {
        auto out = open_out(run_dir / "scene" / "boxes.csv");
        write_boxes_csv(out, scene.objects);
    }
    if (!run.snapshots.empty()) {
        const Snapshot& last = run.snapshots.back();
        for (int k = 0; k < config.sim.anchor_count; ++k) render_heatmaps(run_dir, config, last.model, last.step, k);
    }
}

LoadedRun load_run_snapshot(const fs::path& run_dir, int step) {
    const fs::path config_path = run_dir / "resolved-config.txt";
    if (!fs::exists(config_path)) throw IoError("no resolved-config.txt in '" + run_dir.string() + "'");
    LoadedRun loaded;
    loaded.config = load_config(config_path.string());
    const fs::path snap = snapshot_path(run_dir, step);
    if (!fs::exists(snap)) throw DomainError("no snapshot for step " + std::to_string(step) + " in '" + run_dir.string() + "'");
    auto in = open_in(snap);
    const Model layout = Model::initialize(loaded.config.sim, loaded.config.train, loaded.config.train.seed);
    loaded.model = read_model(in, layout);
    return loaded;
}

}  // namespace probanet
