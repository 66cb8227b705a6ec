// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance --cli <path to probanet> --work <scratch dir> [--seeds 10]

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "probanet/config.hpp"
#include "probanet/error.hpp"
#include "probanet/report.hpp"
#include "probanet/rng.hpp"
#include "probanet/sim.hpp"
#include "probanet/training.hpp"

namespace fs = std::filesystem;
using namespace probanet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool passed = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << '\n'
              << std::flush;
    failures += o.passed ? 0 : 1;
}

struct CommandResult {
    int status = -1;
    std::string output;
};

CommandResult run_command(const std::string& command) {
    CommandResult r;
    std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen((command + " 2>&1").c_str(), "r"), pclose);
    if (!pipe) return r;
    std::array<char, 512> buf{};
    while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) r.output += buf.data();
    r.status = pclose(pipe.release());
    return r;
}

std::string quoted(const std::string& s) { return "'" + s + "'"; }

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

Outcome check_count_line(const std::string& cli, const std::string& expected) {
    const auto t0 = Clock::now();
    const CommandResult r = run_command(quoted(cli) +
                                        " count --channels 512 --anchors 18 --reduction 16 --height 38 --width 50");
    const double elapsed = seconds_since(t0);
    const bool found = r.output.find(expected) != std::string::npos;
    std::ostringstream d;
    d << "found \"" << expected << "\": " << (found ? "yes" : "no") << ", " << elapsed << " s";
    if (!found) d << ", output: " << one_line(r.output);
    return {r.status == 0 && found && elapsed < 1.0, d.str()};
}

Outcome check_gradcheck(const std::string& cli) {
    const auto t0 = Clock::now();
    const CommandResult r = run_command(quoted(cli) + " gradcheck --seeds 5 --shapes 6x6x8");
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "exit " << r.status << ", " << elapsed << " s";
    const auto last = r.output.find_last_not_of('\n');
    const auto start = r.output.rfind('\n', last);
    d << ", " << r.output.substr(start == std::string::npos ? 0 : start + 1);
    return {r.status == 0 && elapsed < 10.0, one_line(d.str())};
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_variance(const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream o;
    o.setf(std::ios::fixed);
    o.precision(digits);
    o << v;
    return o.str();
}

enum Variant : std::size_t { kBaseline, kProbanet, kNoVarianceLoss, kControl, kVariantCount };

struct Experiment {
    std::vector<std::vector<RunResult>> runs;  // [seed][variant]
    double seconds = 0.0;
};

Experiment run_main_experiment(const ExperimentConfig& defaults, int n_seeds) {
    std::vector<TrainConfig> variants(kVariantCount, defaults.train);
    variants[kBaseline].probanet_enabled = false;
    variants[kNoVarianceLoss].alpha = 0.0;
    variants[kControl].alpha = 0.0;
    variants[kControl].th = 0.0;
    const int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    const auto t0 = Clock::now();
    Experiment e;
    e.runs = run_seeds(defaults.sim, variants, n_seeds, threads);
    e.seconds = seconds_since(t0);
    return e;
}

Outcome check_uplift(const ExperimentConfig& defaults, const Experiment& e) {
    std::vector<double> base, pn;
    int wins = 0;
    for (const auto& seed : e.runs) {
        base.push_back(seed[kBaseline].tail_hard_ratio);
        pn.push_back(seed[kProbanet].tail_hard_ratio);
        wins += pn.back() > base.back() ? 1 : 0;
    }
    const double uplift = mean(pn) - mean(base);
    const int n = static_cast<int>(e.runs.size());
    const int steps = defaults.train.total_steps();
    const bool defaults_match = defaults.train.th == 0.5 && defaults.train.r == 16 && defaults.train.alpha == 0.5 &&
                                steps == 2000;
    std::ostringstream d;
    d << "baseline " << fmt(mean(base)) << ", probanet " << fmt(mean(pn)) << ", uplift " << fmt(uplift)
      << " (need >= 0.05), wins " << wins << "/" << n << " (need >= " << (8 * n + 9) / 10 << "), " << steps
      << " steps, experiment " << fmt(e.seconds, 1) << " s";
    return {defaults_match && uplift >= 0.05 && wins * 10 >= 8 * n && e.seconds < 300.0, d.str()};
}

Outcome check_separation(const Experiment& e) {
    int wins = 0;
    std::vector<double> with, without;
    for (const auto& seed : e.runs) {
        with.push_back(seed[kProbanet].final_eval.gate.gap);
        without.push_back(seed[kNoVarianceLoss].final_eval.gate.gap);
        wins += with.back() >= without.back() ? 1 : 0;
    }
    const int n = static_cast<int>(e.runs.size());
    std::ostringstream d;
    d << "mean gap alpha=0.5 " << fmt(mean(with)) << ", alpha=0 " << fmt(mean(without)) << ", wins " << wins << "/"
      << n << " (need >= " << (8 * n + 9) / 10 << ")";
    return {wins * 10 >= 8 * n, d.str()};
}

Outcome check_loss_bound(const Experiment& e) {
    std::size_t checked = 0, violations = 0;
    for (const auto& seed : e.runs) {
        for (std::size_t v : {kProbanet, kNoVarianceLoss}) {
            for (const StepRecord& rec : seed[v].log) {
                if (!(rec.cls_loss > 0.0)) continue;
                ++checked;
                violations += rec.probanet_loss < rec.cls_loss ? 0 : 1;
            }
        }
    }
    std::ostringstream d;
    d << violations << " violations over " << checked << " logged steps";
    return {checked > 0 && violations == 0, d.str()};
}

Outcome check_control(const Experiment& e) {
    std::vector<double> base, control;
    for (const auto& seed : e.runs) {
        base.push_back(seed[kBaseline].tail_hard_ratio);
        control.push_back(seed[kControl].tail_hard_ratio);
    }
    const double n = static_cast<double>(e.runs.size());
    const double diff = mean(control) - mean(base);
    const double sigma = std::sqrt(sample_variance(base) / n + sample_variance(control) / n);
    std::ostringstream d;
    d << "baseline " << fmt(mean(base)) << ", th=0 alpha=0 " << fmt(mean(control)) << ", |diff| "
      << fmt(std::abs(diff), 5) << " vs 2 sigma " << fmt(2.0 * sigma, 5);
    return {std::abs(diff) < 2.0 * sigma, d.str()};
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[fs::relative(entry.path(), root).generic_string()] =
            std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    return files;
}

Outcome check_determinism(const ExperimentConfig& defaults, const Experiment& e, const fs::path& work) {
    ExperimentConfig run_config = defaults;
    const RunResult& first = e.runs.front()[kProbanet];
    run_config.train.seed = first.seed;
    const RunResult again = run_training(run_config.sim, run_config.train, run_config.train.seed);

    const fs::path a = work / "determinism" / "a", b = work / "determinism" / "b";
    fs::remove_all(work / "determinism");
    write_run_directory(a, run_config, first);
    write_run_directory(b, run_config, again);
    const auto ta = read_tree(a), tb = read_tree(b);
    std::size_t images = 0, differing = 0;
    for (const auto& [name, bytes] : ta) {
        if (name.ends_with(".pgm") || name.ends_with(".ppm")) ++images;
        const auto it = tb.find(name);
        if (it == tb.end() || it->second != bytes) ++differing;
    }
    const bool has_metrics = ta.contains("metrics.csv");
    std::ostringstream d;
    d << ta.size() << " files (" << images << " images), " << differing << " differ, file sets "
      << (ta.size() == tb.size() ? "match" : "differ");
    return {has_metrics && images > 0 && differing == 0 && ta.size() == tb.size(), d.str()};
}

Outcome check_sampler(const ExperimentConfig& defaults) {
    const SimConfig& sim = defaults.sim;
    const TrainConfig& tc = defaults.train;
    const AnchorGrid grid = AnchorGrid::from_config(sim);
    const SamplerConfig sc{tc.batch_size, tc.fg_per_batch};
    Rng rng(derive_seed(tc.seed, 0xacce));
    std::size_t violations = 0, empty_pools = 0;
    constexpr int kBatches = 10000;
    constexpr int kScenes = 50;
    std::vector<std::vector<AnchorLabel>> label_sets;
    for (int s = 0; s < kScenes; ++s) label_sets.push_back(label_anchors(generate_scene(sim, derive_seed(s, 0xacce)), grid, sim.thresholds));

    for (int n = 0; n < kBatches; ++n) {
        const auto& labels = label_sets[static_cast<std::size_t>(n % kScenes)];
        std::vector<std::uint8_t> mask;
        if (n % 3 != 0) {
            const double keep = rng.uniform(0.0, 1.0);
            mask.resize(labels.size());
            for (auto& m : mask) m = rng.uniform(0.0, 1.0) < keep ? 1 : 0;
        }
        int fg_pool = 0, bg_pool = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (!mask.empty() && !mask[i]) continue;
            fg_pool += labels[i].cls == AnchorClass::foreground;
            bg_pool += labels[i].cls == AnchorClass::background;
        }
        MiniBatch b;
        try {
            b = sample_minibatch(labels, mask, rng, sc);
        } catch (const EmptyPoolError&) {
            ++empty_pools;
            violations += bg_pool == 0 ? 0 : 1;
            continue;
        }
        bool ok = bg_pool > 0 && b.fg_count <= sc.fg_capacity && static_cast<int>(b.size()) <= sc.batch_size &&
                  b.fg_count + b.bg_count == static_cast<int>(b.size()) &&
                  b.fg_count == std::min(fg_pool, sc.fg_capacity) &&
                  b.bg_count == std::min(bg_pool, sc.batch_size - b.fg_count);
        std::set<std::size_t> seen;
        for (std::size_t i = 0; ok && i < b.size(); ++i) {
            const std::size_t idx = b.indices[i];
            const bool is_fg = labels[idx].cls == AnchorClass::foreground;
            ok = seen.insert(idx).second && (mask.empty() || mask[idx]) && labels[idx].cls != AnchorClass::ignore &&
                 is_fg == (i < static_cast<std::size_t>(b.fg_count));
        }
        violations += ok ? 0 : 1;
    }
    std::ostringstream d;
    d << violations << " violations over " << kBatches << " batches (" << empty_pools << " empty pools)";
    return {violations == 0, d.str()};
}

template <class F>
void guarded(int id, const std::string& name, F&& f) {
    try {
        report(id, name, f());
    } catch (const std::exception& ex) {
        report(id, name, {false, std::string("error: ") + ex.what()});
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli;
    fs::path work = fs::temp_directory_path() / "probanet_acceptance";
    int n_seeds = 10;
    for (int i = 1; i + 1 < argc; i += 2) {
        const std::string flag = argv[i];
        if (flag == "--cli") cli = argv[i + 1];
        else if (flag == "--work") work = argv[i + 1];
        else if (flag == "--seeds") n_seeds = std::stoi(argv[i + 1]);
        else {
            std::cerr << "usage: acceptance --cli <probanet> [--work <dir>] [--seeds N]\n";
            return 2;
        }
    }
    if (cli.empty() || n_seeds < 2) {
        std::cerr << "usage: acceptance --cli <probanet> [--work <dir>] [--seeds N]\n";
        return 2;
    }
    fs::create_directories(work);
    const ExperimentConfig defaults;

    guarded(1, "parameter overhead", [&] { return check_count_line(cli, "params 17504 (0.07 MB)"); });
    guarded(2, "MAC overhead", [&] { return check_count_line(cli, "macs 32224000 (0.03 G)"); });
    guarded(3, "gradient check", [&] { return check_gradcheck(cli); });

    Experiment e;
    std::string experiment_error;
    try {
        e = run_main_experiment(defaults, n_seeds);
    } catch (const std::exception& ex) {
        experiment_error = ex.what();
    }
    const auto needs_experiment = [&](auto check) {
        return [&, check] {
            if (!experiment_error.empty()) return Outcome{false, "experiment failed: " + experiment_error};
            return check();
        };
    };
    guarded(4, "hard-ratio uplift", needs_experiment([&] { return check_uplift(defaults, e); }));
    guarded(5, "gate separation", needs_experiment([&] { return check_separation(e); }));
    guarded(6, "variance loss bound", needs_experiment([&] { return check_loss_bound(e); }));
    guarded(7, "no-effect control", needs_experiment([&] { return check_control(e); }));
    guarded(8, "determinism", needs_experiment([&] { return check_determinism(defaults, e, work); }));
    guarded(9, "sampler contract", [&] { return check_sampler(defaults); });

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << '\n';
    return failures == 0 ? 0 : 1;
}
