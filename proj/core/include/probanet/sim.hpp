#pragma once

// Synthetic proposal populations: scenes with planted objects, an anchor grid
// over the feature map, IoU labelling with easy/hard tags, and the fixed-ratio
// mini-batch sampler.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "probanet/rng.hpp"
#include "probanet/tensor.hpp"

namespace probanet {

/// Axis-aligned box in feature-grid units; x runs along width, y along height.
struct Box {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 0.0;
    double y_max = 0.0;

    double area() const noexcept { return (x_max - x_min) * (y_max - y_min); }
    bool valid() const noexcept { return x_min < x_max && y_min < y_max; }

    friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);

struct LabelThresholds {
    double fg_iou = 0.7;
    double bg_iou = 0.3;
    double hard_bg_min_iou = 0.1;  // bg with iou in [hard_bg_min_iou, bg_iou) is hard
    double hard_fg_max_iou = 0.75; // fg with iou in [fg_iou, hard_fg_max_iou) is hard

    void validate() const;

    friend bool operator==(const LabelThresholds&, const LabelThresholds&) = default;
};

struct SimConfig {
    int height = 24;
    int width = 24;
    int channels = 64;

    int anchor_count = 5;  // C', square anchors with sides spaced evenly in [min, max]
    double anchor_min_size = 6.0;
    double anchor_max_size = 18.0;

    int min_objects = 2;
    int max_objects = 4;
    double min_object_size = 6.0;
    double max_object_size = 18.0;

    // Feature synthesis: each object adds a separable Gaussian bump to every
    // channel; channel c uses bump width (object half-extent * w_c) with w_c
    // spread evenly over [bump_width_min, bump_width_max] and amplitude
    // feature_gain * (1 - c / (2 (C - 1))). Uniform noise in [0, noise_level)
    // is added on top.
    double feature_gain = 3.0;
    double noise_level = 1.0;
    double bump_width_min = 0.6;
    double bump_width_max = 1.5;

    LabelThresholds thresholds{};

    /// Throws ConfigError.
    void validate() const;

    friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

struct Scene {
    std::vector<Box> objects;
    FeatureMap features;  // H x W x C
    std::uint64_t seed = 0;
};

/// Fully determined by (config, seed).
Scene generate_scene(const SimConfig& config, std::uint64_t seed);

class AnchorGrid {
public:
    AnchorGrid(int height, int width, std::vector<double> anchor_widths, std::vector<double> anchor_heights);

    static AnchorGrid from_config(const SimConfig& config);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int anchors() const noexcept { return static_cast<int>(widths_.size()); }
    std::size_t size() const noexcept {
        return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_) * widths_.size();
    }

    /// Anchor k centred on cell (i, j), i.e. at (j + 0.5, i + 0.5).
    Box box(int i, int j, int k) const noexcept;

private:
    int height_;
    int width_;
    std::vector<double> widths_;
    std::vector<double> heights_;
};

enum class AnchorClass : std::uint8_t { background, foreground, ignore };
enum class Difficulty : std::uint8_t { easy, hard };

struct AnchorPos {
    int i = 0;
    int j = 0;
    int k = 0;
    friend bool operator==(const AnchorPos&, const AnchorPos&) = default;
};

struct AnchorLabel {
    AnchorPos position;
    double iou = 0.0;  // best IoU over objects
    AnchorClass cls = AnchorClass::background;
    Difficulty difficulty = Difficulty::easy;
};

/// One label per anchor in row-major (i, j, k) order, so label n lines up with
/// element n of an H x W x C' feature map. fg: iou >= fg_iou or the argmax
/// anchor(s) of some object; bg: iou < bg_iou; ignore otherwise.
std::vector<AnchorLabel> label_anchors(const Scene& scene, const AnchorGrid& grid,
                                       const LabelThresholds& thresholds = {});

struct SamplerConfig {
    int batch_size = 256;
    int fg_capacity = 64;  // 1:3 foreground-background

    void validate() const;
};

struct MiniBatch {
    std::vector<std::size_t> indices;  // into the label list; fg entries first
    int fg_count = 0;
    int bg_count = 0;

    std::size_t size() const noexcept { return indices.size(); }
};

/// Uniform sampling without replacement among anchors whose keep_mask entry is
/// set (an empty mask keeps everything). Ignore-class anchors are never drawn.
/// Up to fg_capacity foreground; the rest of the batch is filled with
/// background. Throws EmptyPoolError if no background candidate survives.
MiniBatch sample_minibatch(std::span<const AnchorLabel> labels, std::span<const std::uint8_t> keep_mask, Rng& rng,
                           const SamplerConfig& config = {});

/// Fraction of batch entries tagged hard. Throws DomainError on an empty batch.
double hard_ratio(const MiniBatch& batch, std::span<const AnchorLabel> labels);

/// One box per line: x_min,y_min,x_max,y_max
void write_boxes_csv(std::ostream& out, std::span<const Box> boxes);
std::vector<Box> read_boxes_csv(std::istream& in);

}  // namespace probanet
