#pragma once

// Binary NetPBM output (P5 grayscale, P6 colour) plus the helpers the gate
// heatmaps need.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "probanet/sim.hpp"
#include "probanet/tensor.hpp"

namespace probanet {

struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
    std::vector<std::string> comments;
};

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<Rgb> pixels;  // row-major
    std::vector<std::string> comments;

    RgbImage() = default;
    RgbImage(int w, int h, Rgb fill = {0, 0, 0});

    Rgb& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)]; }
    const Rgb& at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
    }
};

void write_pgm(std::ostream& out, const GrayImage& image);
void write_ppm(std::ostream& out, const RgbImage& image);
GrayImage read_pgm(std::istream& in);
RgbImage read_ppm(std::istream& in);

/// Per-image min-max normalisation to [0, 255]; a constant input maps to 128.
/// The min and max used are recorded as a comment line.
GrayImage normalized_gray(std::span<const double> values, int width, int height);

/// One channel of an H x W x C map as a W x H grayscale image.
GrayImage channel_heatmap(const FeatureMap& map, int channel);

/// ceil(fraction * n), robust to the representation error of fraction * n
/// (0.05 * 100 is slightly above 5 in binary floating point).
std::size_t top_count(double fraction, std::size_t n);

/// Indices of the top_count(fraction, n) largest values; ties go to the lower
/// index, which for a row-major H x W x C' map is (i, j, k) lexical order.
/// The result is sorted by index.
std::vector<std::size_t> top_fraction(std::span<const double> values, double fraction);

struct OverlayStyle {
    int cell_pixels = 8;
    Rgb object = {0, 200, 0};
    Rgb top5 = {0, 0, 255};
    Rgb top1 = {255, 0, 0};
};

/// Scene rendered as its channel-mean intensity with the objects outlined,
/// anchors in the top 5% of `weights` outlined in blue and the top 1% in red.
/// `weights` is an H x W x C' map aligned with `grid`.
RgbImage top_weight_overlay(const Scene& scene, const AnchorGrid& grid, const FeatureMap& weights,
                            const OverlayStyle& style = {});

}  // namespace probanet
