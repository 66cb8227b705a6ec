#include "probanet/netpbm.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include "probanet/error.hpp"

namespace probanet {

namespace {

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void write_header(std::ostream& out, const char* magic, int width, int height, const std::vector<std::string>& comments) {
    out << magic << '\n';
    for (const auto& c : comments) out << "# " << c << '\n';
    out << width << ' ' << height << "\n255\n";
}

// Reads the next whitespace-separated header token, skipping '#' comments.
std::string header_token(std::istream& in, std::vector<std::string>* comments) {
    std::string token;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
            if (comments) comments->push_back(line.size() > 0 && line[0] == ' ' ? line.substr(1) : line);
            continue;
        }
        if (std::isspace(c)) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(static_cast<char>(c));
    }
    return token;
}

int header_int(std::istream& in, std::vector<std::string>* comments) {
    const std::string t = header_token(in, comments);
    int v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || ptr != t.data() + t.size() || v <= 0) throw IoError("netpbm: bad header field '" + t + "'");
    return v;
}

void draw_rect(RgbImage& img, const Box& box, int scale, Rgb colour) {
    const auto to_px = [scale](double v) { return static_cast<int>(std::lround(v * scale)); };
    const int x0 = std::clamp(to_px(box.x_min), 0, img.width - 1);
    const int x1 = std::clamp(to_px(box.x_max) - 1, 0, img.width - 1);
    const int y0 = std::clamp(to_px(box.y_min), 0, img.height - 1);
    const int y1 = std::clamp(to_px(box.y_max) - 1, 0, img.height - 1);
    for (int x = x0; x <= x1; ++x) {
        img.at(x, y0) = colour;
        img.at(x, y1) = colour;
    }
    for (int y = y0; y <= y1; ++y) {
        img.at(x0, y) = colour;
        img.at(x1, y) = colour;
    }
}

}  // namespace

RgbImage::RgbImage(int w, int h, Rgb fill) : width(w), height(h) {
    if (w <= 0 || h <= 0) throw DimensionError("RgbImage: dimensions must be positive");
    pixels.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill);
}

void write_pgm(std::ostream& out, const GrayImage& image) {
    if (image.pixels.size() != static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height))
        throw DimensionError("write_pgm: pixel count does not match dimensions");
    write_header(out, "P5", image.width, image.height, image.comments);
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw IoError("write_pgm: write failed");
}

void write_ppm(std::ostream& out, const RgbImage& image) {
    if (image.pixels.size() != static_cast<std::size_t>(image.width) * static_cast<std::size_t>(image.height))
        throw DimensionError("write_ppm: pixel count does not match dimensions");
    write_header(out, "P6", image.width, image.height, image.comments);
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size() * 3));
    if (!out) throw IoError("write_ppm: write failed");
}

GrayImage read_pgm(std::istream& in) {
    GrayImage img;
    if (header_token(in, &img.comments) != "P5") throw IoError("read_pgm: not a P5 file");
    img.width = header_int(in, &img.comments);
    img.height = header_int(in, &img.comments);
    if (header_int(in, &img.comments) != 255) throw IoError("read_pgm: only maxval 255 is supported");
    img.pixels.resize(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw IoError("read_pgm: truncated raster");
    return img;
}

RgbImage read_ppm(std::istream& in) {
    RgbImage img;
    if (header_token(in, &img.comments) != "P6") throw IoError("read_ppm: not a P6 file");
    img.width = header_int(in, &img.comments);
    img.height = header_int(in, &img.comments);
    if (header_int(in, &img.comments) != 255) throw IoError("read_ppm: only maxval 255 is supported");
    img.pixels.resize(static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
    const auto bytes = static_cast<std::streamsize>(img.pixels.size() * 3);
    in.read(reinterpret_cast<char*>(img.pixels.data()), bytes);
    if (in.gcount() != bytes) throw IoError("read_ppm: truncated raster");
    return img;
}

GrayImage normalized_gray(std::span<const double> values, int width, int height) {
    if (width <= 0 || height <= 0 || values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
        throw DimensionError("normalized_gray: value count does not match dimensions");
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!std::isfinite(lo) || !std::isfinite(hi)) throw NumericError("normalized_gray: non-finite value");

    GrayImage img;
    img.width = width;
    img.height = height;
    img.comments.push_back("normalization min-max min=" + format_double(lo) + " max=" + format_double(hi));
    img.pixels.resize(values.size());
    const double range = hi - lo;
    for (std::size_t n = 0; n < values.size(); ++n)
        img.pixels[n] = range > 0.0 ? static_cast<std::uint8_t>(std::lround((values[n] - lo) / range * 255.0)) : 128;
    return img;
}

GrayImage channel_heatmap(const FeatureMap& map, int channel) {
    if (channel < 0 || channel >= map.channels())
        throw DimensionError("channel_heatmap: channel " + std::to_string(channel) + " out of range");
    std::vector<double> plane;
    plane.reserve(map.shape().pixels());
    for (int i = 0; i < map.height(); ++i)
        for (int j = 0; j < map.width(); ++j) plane.push_back(map.at(i, j, channel));
    GrayImage img = normalized_gray(plane, map.width(), map.height());
    img.comments.push_back("channel " + std::to_string(channel));
    return img;
}

std::size_t top_count(double fraction, std::size_t n) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw DomainError("top_count: fraction must lie in [0, 1]");
    const double x = fraction * static_cast<double>(n);
    const double nearest = std::round(x);
    const double count = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
    return std::min(n, static_cast<std::size_t>(count));
}

std::vector<std::size_t> top_fraction(std::span<const double> values, double fraction) {
    const std::size_t k = top_count(fraction, values.size());
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

RgbImage top_weight_overlay(const Scene& scene, const AnchorGrid& grid, const FeatureMap& weights,
                            const OverlayStyle& style) {
    const FeatureMap& f = scene.features;
    if (weights.shape() != Shape{grid.height(), grid.width(), grid.anchors()})
        throw DimensionError("top_weight_overlay: weights must be H x W x C' matching the anchor grid");
    if (f.height() != grid.height() || f.width() != grid.width())
        throw DimensionError("top_weight_overlay: scene does not match the anchor grid");
    if (style.cell_pixels <= 0) throw DomainError("top_weight_overlay: cell_pixels must be positive");

    std::vector<double> intensity;
    intensity.reserve(f.shape().pixels());
    for (int i = 0; i < f.height(); ++i)
        for (int j = 0; j < f.width(); ++j) {
            double s = 0.0;
            for (double v : f.pixel(i, j)) s += v;
            intensity.push_back(s / f.channels());
        }
    const GrayImage base = normalized_gray(intensity, f.width(), f.height());

    const int scale = style.cell_pixels;
    RgbImage img(f.width() * scale, f.height() * scale);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const std::uint8_t g = base.pixels[static_cast<std::size_t>(y / scale) * static_cast<std::size_t>(f.width()) +
                                               static_cast<std::size_t>(x / scale)];
            img.at(x, y) = {g, g, g};
        }

    for (const Box& b : scene.objects) draw_rect(img, b, scale, style.object);
    const auto top5 = top_fraction(weights.values(), 0.05);
    const auto top1 = top_fraction(weights.values(), 0.01);
    const int anchors = grid.anchors();
    const auto anchor_box = [&](std::size_t n) {
        const auto pix = static_cast<int>(n / static_cast<std::size_t>(anchors));
        return grid.box(pix / grid.width(), pix % grid.width(), static_cast<int>(n % static_cast<std::size_t>(anchors)));
    };
    for (std::size_t n : top5) draw_rect(img, anchor_box(n), scale, style.top5);
    for (std::size_t n : top1) draw_rect(img, anchor_box(n), scale, style.top1);

    img.comments = base.comments;
    img.comments.push_back("top5% anchors " + std::to_string(top5.size()) + " (blue), top1% anchors " +
                           std::to_string(top1.size()) + " (red)");
    return img;
}

}  // namespace probanet
