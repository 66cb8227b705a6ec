#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "probanet/config.hpp"
#include "probanet/error.hpp"
#include "probanet/gate.hpp"
#include "probanet/gradcheck.hpp"
#include "probanet/report.hpp"
#include "probanet/training.hpp"

namespace fs = std::filesystem;
using namespace probanet;

namespace {

enum Exit : int { kOk = 0, kValidation = 1, kUsage = 2, kIo = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fixed2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// ---- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
    std::uint64_t seed = 0;
    double eps = 1e-5;
    std::string op;
    int seeds = 5;
    std::string shape = "6x6x8";
};

GradcheckOptions gradcheck_options(const GradcheckArgs& a) {
    GradcheckOptions o;
    o.seed = a.seed;
    o.h = a.eps;
    o.op = a.op;
    o.seeds = a.seeds;
    int dims[3] = {};
    const char* p = a.shape.data();
    const char* end = p + a.shape.size();
    for (int d = 0; d < 3; ++d) {
        auto [next, ec] = std::from_chars(p, end, dims[d]);
        if (ec != std::errc{} || dims[d] < 1) throw UsageError("--shapes expects HxWxC, got '" + a.shape + "'");
        p = next;
        if (d < 2) {
            if (p == end || *p != 'x') throw UsageError("--shapes expects HxWxC, got '" + a.shape + "'");
            ++p;
        }
    }
    if (p != end) throw UsageError("--shapes expects HxWxC, got '" + a.shape + "'");
    o.max_height = dims[0];
    o.max_width = dims[1];
    o.max_channels = dims[2];
    return o;
}

int cmd_gradcheck(const GradcheckArgs& a) {
    if (!(a.eps > 0.0)) throw UsageError("--eps must be positive");
    const GradcheckOptions opt = gradcheck_options(a);
    std::vector<OpReport> reports;
    try {
        reports = run_gradcheck(opt);
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    }
    std::vector<std::string> failed;
    std::printf("%-20s %12s %9s\n", "op", "worst_error", "compared");
    for (const OpReport& r : reports) {
        std::printf("%-20s %12.3e %9zu %s\n", r.op.c_str(), r.worst_error, r.compared, r.passed ? "ok" : "FAIL");
        if (!r.passed) failed.push_back(r.op);
    }
    if (failed.empty()) {
        std::printf("all %zu ops within %.0e\n", reports.size(), opt.tolerance);
        return kOk;
    }
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    std::fprintf(stderr, "gradcheck failed: %s exceeds %.0e\n", names.c_str(), opt.tolerance);
    return kValidation;
}

// ---- count -----------------------------------------------------------------

struct CountArgs {
    std::int64_t channels = 512;
    std::int64_t anchors = 18;
    std::int64_t reduction = 16;
    std::int64_t height = 38;
    std::int64_t width = 50;
};

int cmd_count(const CountArgs& a) {
    if (a.channels % a.reduction != 0)
        throw UsageError("--channels " + std::to_string(a.channels) + " is not divisible by --reduction " +
                         std::to_string(a.reduction));
    const std::int64_t params = param_count(a.channels, a.anchors, a.reduction);
    const std::int64_t macs = mac_count(a.height, a.width, a.channels, a.anchors, a.reduction);
    const std::int64_t cr = a.channels / a.reduction;
    const std::int64_t allocated = a.channels * cr + cr + cr * a.anchors + a.anchors;

    std::printf("gate overhead  C=%lld C'=%lld r=%lld H=%lld W=%lld\n", static_cast<long long>(a.channels),
                static_cast<long long>(a.anchors), static_cast<long long>(a.reduction),
                static_cast<long long>(a.height), static_cast<long long>(a.width));
    std::printf("params %lld (%s MB), macs %lld (%s G)\n", static_cast<long long>(params),
                fixed2(static_cast<double>(params) * 4.0 / (1024.0 * 1024.0)).c_str(), static_cast<long long>(macs),
                fixed2(static_cast<double>(macs) / 1e9).c_str());
    std::printf("allocated weights %lld\n", static_cast<long long>(allocated));
    return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string out;
    bool baseline = false;
    bool probanet = false;
    int seeds = 1;
};

int cmd_train(const TrainArgs& a) {
    if (a.seeds < 1) throw UsageError("--seeds must be at least 1");
    const ExperimentConfig config = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
    config.validate();

    std::vector<std::pair<std::string, TrainConfig>> variants;
    if (!a.probanet) {
        TrainConfig t = config.train;
        t.probanet_enabled = false;
        variants.emplace_back("baseline", t);
    }
    if (!a.baseline) {
        TrainConfig t = config.train;
        t.probanet_enabled = true;
        variants.emplace_back("probanet", t);
    }
    std::vector<TrainConfig> train_configs;
    for (const auto& v : variants) train_configs.push_back(v.second);

    const fs::path out(a.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create '" + out.string() + "': " + ec.message());
    {
        std::ofstream f(out / "resolved-config.txt");
        if (!f) throw IoError("cannot write '" + (out / "resolved-config.txt").string() + "'");
        f << format_config(config);
    }

    const int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    const auto results = run_seeds(config.sim, train_configs, a.seeds, threads);

    std::vector<SummaryRow> rows;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const std::uint64_t seed = config.train.seed + i;
        SummaryRow row{seed, {}};
        std::printf("seed %llu", static_cast<unsigned long long>(seed));
        for (std::size_t v = 0; v < variants.size(); ++v) {
            ExperimentConfig run_config = config;
            run_config.train = variants[v].second;
            run_config.train.seed = seed;
            const RunResult& run = results[i][v];
            write_run_directory(out / ("seed_" + std::to_string(seed)) / variants[v].first, run_config, run);
            row.variants.push_back(summarize(variants[v].first, run));
            std::printf("  %s hard_ratio %.4f gap %.4f", variants[v].first.c_str(), run.tail_hard_ratio,
                        run.final_eval.gate.gap);
        }
        std::printf("\n");
        rows.push_back(std::move(row));
    }

    std::ofstream summary(out / "summary.csv");
    if (!summary) throw IoError("cannot write '" + (out / "summary.csv").string() + "'");
    write_summary_csv(summary, rows);
    if (variants.size() == 2) {
        double base = 0.0, pn = 0.0;
        for (const auto& r : rows) {
            base += r.variants[0].tail_hard_ratio;
            pn += r.variants[1].tail_hard_ratio;
        }
        const double n = static_cast<double>(rows.size());
        std::printf("mean tail hard_ratio  baseline %.4f  probanet %.4f  uplift %+.4f\n", base / n, pn / n,
                    (pn - base) / n);
    }
    return kOk;
}

// ---- heatmap ---------------------------------------------------------------

struct HeatmapArgs {
    std::string run;
    int channel = 0;
    std::optional<int> step;
};

int latest_snapshot(const fs::path& run_dir) {
    const fs::path dir = run_dir / "snapshots";
    if (!fs::is_directory(dir)) throw IoError("no snapshots in '" + run_dir.string() + "'");
    std::optional<int> best;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("step_", 0) != 0 || entry.path().extension() != ".txt") continue;
        const std::string digits = entry.path().stem().string().substr(5);
        int step = 0;
        auto [p, err] = std::from_chars(digits.data(), digits.data() + digits.size(), step);
        if (err == std::errc{} && p == digits.data() + digits.size()) best = std::max(best.value_or(step), step);
    }
    if (!best) throw IoError("no snapshots in '" + run_dir.string() + "'");
    return *best;
}

int cmd_heatmap(const HeatmapArgs& a) {
    const fs::path run_dir(a.run);
    if (!fs::is_directory(run_dir)) throw IoError("no run directory '" + a.run + "'");
    const int step = a.step ? *a.step : latest_snapshot(run_dir);
    LoadedRun loaded;
    try {
        loaded = load_run_snapshot(run_dir, step);
    } catch (const DomainError& e) {
        throw UsageError(e.what());
    }
    HeatmapFiles files;
    try {
        files = render_heatmaps(run_dir, loaded.config, loaded.model, step, a.channel);
    } catch (const DimensionError& e) {
        throw UsageError(e.what());
    }
    std::printf("%s\n%s\n", files.pgm.string().c_str(), files.ppm.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Proposal gating on a synthetic detector: gradient checks, complexity counts, training, heatmaps"};
    app.require_subcommand(1);

    GradcheckArgs gc;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every op and the full loss");
    gradcheck->add_option("--seed", gc.seed, "first seed")->capture_default_str();
    gradcheck->add_option("--eps", gc.eps, "central-difference step")->capture_default_str();
    gradcheck->add_option("--op", gc.op, "check only this op")
        ->check(CLI::IsMember(gradcheck_ops()));
    gradcheck->add_option("--seeds", gc.seeds, "instances per op")->capture_default_str();
    gradcheck->add_option("--shapes", gc.shape, "largest feature map, HxWxC")->capture_default_str();

    CountArgs cn;
    auto* count = app.add_subcommand("count", "extra parameters and MACs of the gate");
    count->add_option("--channels", cn.channels, "input channels C")->check(CLI::PositiveNumber)->capture_default_str();
    count->add_option("--anchors", cn.anchors, "anchors per position C'")->check(CLI::PositiveNumber)->capture_default_str();
    count->add_option("--reduction", cn.reduction, "reduction ratio r")->check(CLI::PositiveNumber)->capture_default_str();
    count->add_option("--height", cn.height, "feature map height")->check(CLI::PositiveNumber)->capture_default_str();
    count->add_option("--width", cn.width, "feature map width")->check(CLI::PositiveNumber)->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "train baseline and gated variants over seeds");
    train->add_option("--config", tr.config, "key = value experiment file (defaults when omitted)");
    train->add_option("--out", tr.out, "output directory")->required();
    auto* only_baseline = train->add_flag("--baseline", tr.baseline, "train only the baseline");
    auto* only_probanet = train->add_flag("--probanet", tr.probanet, "train only the gated variant");
    only_baseline->excludes(only_probanet);
    train->add_option("--seeds", tr.seeds, "seeds, starting at the config seed")->capture_default_str();

    HeatmapArgs hm;
    auto* heatmap = app.add_subcommand("heatmap", "render gate-weight images from a run snapshot");
    heatmap->add_option("--run", hm.run, "run directory (<out>/seed_<s>/<variant>)")->required();
    heatmap->add_option("--channel", hm.channel, "anchor channel")->capture_default_str();
    heatmap->add_option("--step", hm.step, "snapshot step (latest when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gradcheck) return cmd_gradcheck(gc);
        if (*count) return cmd_count(cn);
        if (*train) return cmd_train(tr);
        if (*heatmap) return cmd_heatmap(hm);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidation;
    }
    return kUsage;
}
