#include "probanet/sim.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "probanet/error.hpp"

namespace probanet {

double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

void LabelThresholds::validate() const {
    if (!(0.0 <= hard_bg_min_iou && hard_bg_min_iou <= bg_iou && bg_iou <= fg_iou && fg_iou <= hard_fg_max_iou &&
          hard_fg_max_iou <= 1.0))
        throw ConfigError("label thresholds must satisfy 0 <= hard_bg_min <= bg <= fg <= hard_fg_max <= 1");
}

void SimConfig::validate() const {
    if (height <= 0 || width <= 0 || channels <= 0) throw ConfigError("grid dimensions must be positive");
    if (anchor_count <= 0) throw ConfigError("anchor_count must be positive");
    if (!(anchor_min_size > 0.0 && anchor_min_size <= anchor_max_size))
        throw ConfigError("anchor sizes must satisfy 0 < min <= max");
    if (min_objects < 0 || max_objects < min_objects) throw ConfigError("object count range is invalid");
    if (!(min_object_size > 0.0 && min_object_size <= max_object_size))
        throw ConfigError("object sizes must satisfy 0 < min <= max");
    if (max_object_size > std::min(height, width))
        throw ConfigError("max_object_size exceeds the grid");
    if (!(feature_gain >= 0.0) || !(noise_level >= 0.0)) throw ConfigError("feature_gain and noise_level must be >= 0");
    if (!(bump_width_min > 0.0 && bump_width_min <= bump_width_max))
        throw ConfigError("bump widths must satisfy 0 < min <= max");
    thresholds.validate();
}

Scene generate_scene(const SimConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    Scene scene;
    scene.seed = seed;

    const auto n_objects = static_cast<int>(rng.range(config.min_objects, config.max_objects));
    scene.objects.reserve(static_cast<std::size_t>(n_objects));
    for (int o = 0; o < n_objects; ++o) {
        const double w = rng.uniform(config.min_object_size, config.max_object_size);
        const double h = rng.uniform(config.min_object_size, config.max_object_size);
        const double x0 = rng.uniform(0.0, config.width - w);
        const double y0 = rng.uniform(0.0, config.height - h);
        scene.objects.push_back({x0, y0, x0 + w, y0 + h});
    }

    const int C = config.channels;
    scene.features = FeatureMap({config.height, config.width, C});
    std::vector<double> ex(static_cast<std::size_t>(config.width));
    std::vector<double> ey(static_cast<std::size_t>(config.height));
    for (const Box& b : scene.objects) {
        const double cx = 0.5 * (b.x_min + b.x_max);
        const double cy = 0.5 * (b.y_min + b.y_max);
        const double hx = 0.5 * (b.x_max - b.x_min);
        const double hy = 0.5 * (b.y_max - b.y_min);
        for (int c = 0; c < C; ++c) {
            const double t = C > 1 ? static_cast<double>(c) / (C - 1) : 0.0;
            const double wc = config.bump_width_min + t * (config.bump_width_max - config.bump_width_min);
            const double gain = config.feature_gain * (1.0 - 0.5 * t);
            const double sx = hx * wc;
            const double sy = hy * wc;
            for (int j = 0; j < config.width; ++j) {
                const double dx = j + 0.5 - cx;
                ex[static_cast<std::size_t>(j)] = std::exp(-dx * dx / (2.0 * sx * sx));
            }
            for (int i = 0; i < config.height; ++i) {
                const double dy = i + 0.5 - cy;
                ey[static_cast<std::size_t>(i)] = std::exp(-dy * dy / (2.0 * sy * sy));
            }
            for (int i = 0; i < config.height; ++i)
                for (int j = 0; j < config.width; ++j)
                    scene.features.at(i, j, c) += gain * ey[static_cast<std::size_t>(i)] * ex[static_cast<std::size_t>(j)];
        }
    }
    if (config.noise_level > 0.0)
        for (auto& v : scene.features.values()) v += rng.uniform(0.0, config.noise_level);
    return scene;
}

AnchorGrid::AnchorGrid(int height, int width, std::vector<double> anchor_widths, std::vector<double> anchor_heights)
    : height_(height), width_(width), widths_(std::move(anchor_widths)), heights_(std::move(anchor_heights)) {
    if (height_ <= 0 || width_ <= 0) throw DimensionError("AnchorGrid: grid must be non-empty");
    if (widths_.empty() || widths_.size() != heights_.size())
        throw DimensionError("AnchorGrid: need matching, non-empty anchor width/height lists");
}

AnchorGrid AnchorGrid::from_config(const SimConfig& config) {
    config.validate();
    std::vector<double> sizes(static_cast<std::size_t>(config.anchor_count));
    for (int k = 0; k < config.anchor_count; ++k) {
        const double t = config.anchor_count > 1 ? static_cast<double>(k) / (config.anchor_count - 1) : 0.0;
        sizes[static_cast<std::size_t>(k)] = config.anchor_min_size + t * (config.anchor_max_size - config.anchor_min_size);
    }
    return AnchorGrid(config.height, config.width, sizes, sizes);
}

Box AnchorGrid::box(int i, int j, int k) const noexcept {
    const double cx = j + 0.5;
    const double cy = i + 0.5;
    const double hw = 0.5 * widths_[static_cast<std::size_t>(k)];
    const double hh = 0.5 * heights_[static_cast<std::size_t>(k)];
    return {cx - hw, cy - hh, cx + hw, cy + hh};
}

std::vector<AnchorLabel> label_anchors(const Scene& scene, const AnchorGrid& grid, const LabelThresholds& thresholds) {
    thresholds.validate();
    if (scene.features.height() != grid.height() || scene.features.width() != grid.width())
        throw DimensionError("label_anchors: anchor grid does not match scene features");

    const std::size_t n_obj = scene.objects.size();
    std::vector<AnchorLabel> labels(grid.size());
    std::vector<double> overlaps(grid.size() * n_obj, 0.0);
    std::vector<double> best_per_object(n_obj, 0.0);

    std::size_t n = 0;
    for (int i = 0; i < grid.height(); ++i)
        for (int j = 0; j < grid.width(); ++j)
            for (int k = 0; k < grid.anchors(); ++k, ++n) {
                const Box a = grid.box(i, j, k);
                AnchorLabel& l = labels[n];
                l.position = {i, j, k};
                for (std::size_t o = 0; o < n_obj; ++o) {
                    const double v = iou(a, scene.objects[o]);
                    overlaps[n * n_obj + o] = v;
                    l.iou = std::max(l.iou, v);
                    best_per_object[o] = std::max(best_per_object[o], v);
                }
                if (l.iou < thresholds.bg_iou)
                    l.cls = AnchorClass::background;
                else if (l.iou >= thresholds.fg_iou)
                    l.cls = AnchorClass::foreground;
                else
                    l.cls = AnchorClass::ignore;
            }

    // Every object claims its best-matching anchor(s), ties included.
    for (std::size_t m = 0; m < labels.size(); ++m)
        for (std::size_t o = 0; o < n_obj; ++o)
            if (best_per_object[o] > 0.0 && overlaps[m * n_obj + o] == best_per_object[o])
                labels[m].cls = AnchorClass::foreground;

    for (auto& l : labels) {
        const bool hard_bg = l.cls == AnchorClass::background && l.iou >= thresholds.hard_bg_min_iou;
        const bool hard_fg =
            l.cls == AnchorClass::foreground && l.iou >= thresholds.fg_iou && l.iou < thresholds.hard_fg_max_iou;
        l.difficulty = hard_bg || hard_fg ? Difficulty::hard : Difficulty::easy;
    }
    return labels;
}

void SamplerConfig::validate() const {
    if (batch_size <= 0 || fg_capacity < 0 || fg_capacity > batch_size)
        throw ConfigError("sampler needs batch_size > 0 and 0 <= fg_capacity <= batch_size");
}

namespace {

// Partial Fisher-Yates: the first `take` entries of `pool` become a uniform
// draw without replacement.
void draw(std::vector<std::size_t>& pool, std::size_t take, Rng& rng) {
    for (std::size_t t = 0; t < take; ++t) {
        const std::size_t r = t + static_cast<std::size_t>(rng.below(pool.size() - t));
        std::swap(pool[t], pool[r]);
    }
    pool.resize(take);
}

}  // namespace

MiniBatch sample_minibatch(std::span<const AnchorLabel> labels, std::span<const std::uint8_t> keep_mask, Rng& rng,
                           const SamplerConfig& config) {
    config.validate();
    if (!keep_mask.empty() && keep_mask.size() != labels.size())
        throw DimensionError("sample_minibatch: keep mask length differs from label count");

    std::vector<std::size_t> fg;
    std::vector<std::size_t> bg;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (!keep_mask.empty() && keep_mask[n] == 0) continue;
        if (labels[n].cls == AnchorClass::foreground)
            fg.push_back(n);
        else if (labels[n].cls == AnchorClass::background)
            bg.push_back(n);
    }
    if (bg.empty())
        throw EmptyPoolError(fg.empty() ? "sample_minibatch: no candidates survive the mask"
                                        : "sample_minibatch: no background candidates survive the mask");

    const std::size_t n_fg = std::min(fg.size(), static_cast<std::size_t>(config.fg_capacity));
    const std::size_t n_bg = std::min(bg.size(), static_cast<std::size_t>(config.batch_size) - n_fg);
    draw(fg, n_fg, rng);
    draw(bg, n_bg, rng);

    MiniBatch batch;
    batch.fg_count = static_cast<int>(n_fg);
    batch.bg_count = static_cast<int>(n_bg);
    batch.indices = std::move(fg);
    batch.indices.insert(batch.indices.end(), bg.begin(), bg.end());
    return batch;
}

double hard_ratio(const MiniBatch& batch, std::span<const AnchorLabel> labels) {
    if (batch.size() == 0) throw DomainError("hard_ratio: empty batch");
    std::size_t hard = 0;
    for (std::size_t idx : batch.indices) {
        if (idx >= labels.size()) throw DimensionError("hard_ratio: batch index out of range");
        hard += labels[idx].difficulty == Difficulty::hard ? 1 : 0;
    }
    return static_cast<double>(hard) / static_cast<double>(batch.size());
}

void write_boxes_csv(std::ostream& out, std::span<const Box> boxes) {
    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    for (const Box& b : boxes) out << b.x_min << ',' << b.y_min << ',' << b.x_max << ',' << b.y_max << '\n';
    out.precision(old_precision);
}

std::vector<Box> read_boxes_csv(std::istream& in) {
    std::vector<Box> boxes;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        Box b;
        char c1 = 0, c2 = 0, c3 = 0;
        if (!(ls >> b.x_min >> c1 >> b.y_min >> c2 >> b.x_max >> c3 >> b.y_max) || c1 != ',' || c2 != ',' || c3 != ',')
            throw IoError("boxes.csv line " + std::to_string(line_no) + ": expected x_min,y_min,x_max,y_max");
        boxes.push_back(b);
    }
    return boxes;
}

}  // namespace probanet
