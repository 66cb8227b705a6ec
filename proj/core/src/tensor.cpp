#include "probanet/tensor.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "probanet/error.hpp"

namespace probanet {

namespace {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << s.height << "x" << s.width << "x" << s.channels;
    return os.str();
}

void require_same_shape(const FeatureMap& a, const FeatureMap& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

void require_finite(const FeatureMap& x, const char* op) {
    if (!x.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
}

}  // namespace

FeatureMap::FeatureMap(Shape shape, double fill) : shape_(shape) {
    if (shape.height <= 0 || shape.width <= 0 || shape.channels <= 0)
        throw DimensionError("FeatureMap: dimensions must be positive, got " + shape_str(shape));
    data_.assign(shape.size(), fill);
}

FeatureMap::FeatureMap(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (shape.height <= 0 || shape.width <= 0 || shape.channels <= 0)
        throw DimensionError("FeatureMap: dimensions must be positive, got " + shape_str(shape));
    if (data_.size() != shape.size())
        throw DimensionError("FeatureMap: data length " + std::to_string(data_.size()) + " != " +
                             std::to_string(shape.size()));
}

bool FeatureMap::all_finite() const noexcept {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Conv1x1Params::Conv1x1Params(int out, int in)
    : out_channels(out),
      in_channels(in),
      weight(static_cast<std::size_t>(out) * static_cast<std::size_t>(in), 0.0),
      bias(static_cast<std::size_t>(out), 0.0) {
    if (out <= 0 || in <= 0) throw DimensionError("Conv1x1Params: channel counts must be positive");
}

void Conv1x1Params::validate() const {
    if (out_channels <= 0 || in_channels <= 0)
        throw DimensionError("Conv1x1Params: channel counts must be positive");
    if (weight.size() != static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(in_channels))
        throw DimensionError("Conv1x1Params: weight size does not match out x in");
    if (bias.size() != static_cast<std::size_t>(out_channels))
        throw DimensionError("Conv1x1Params: bias size does not match out_channels");
}

FeatureMap conv1x1_forward(const FeatureMap& x, const Conv1x1Params& p) {
    p.validate();
    if (x.channels() != p.in_channels)
        throw DimensionError("conv1x1_forward: input has " + std::to_string(x.channels()) +
                             " channels, conv expects " + std::to_string(p.in_channels));
    FeatureMap y({x.height(), x.width(), p.out_channels});
    for (int i = 0; i < x.height(); ++i) {
        for (int j = 0; j < x.width(); ++j) {
            auto in = x.pixel(i, j);
            auto out = y.pixel(i, j);
            for (int o = 0; o < p.out_channels; ++o) {
                double acc = p.bias[static_cast<std::size_t>(o)];
                const double* row = p.weight.data() + static_cast<std::size_t>(o * p.in_channels);
                for (int c = 0; c < p.in_channels; ++c) acc += row[c] * in[static_cast<std::size_t>(c)];
                out[static_cast<std::size_t>(o)] = acc;
            }
        }
    }
    require_finite(y, "conv1x1_forward");
    return y;
}

Conv1x1Grads conv1x1_backward(const FeatureMap& x, const Conv1x1Params& p, const FeatureMap& grad_out) {
    p.validate();
    if (x.channels() != p.in_channels) throw DimensionError("conv1x1_backward: input channel mismatch");
    const Shape expected{x.height(), x.width(), p.out_channels};
    if (grad_out.shape() != expected)
        throw DimensionError("conv1x1_backward: grad_out is " + shape_str(grad_out.shape()) + ", expected " +
                             shape_str(expected));

    Conv1x1Grads g{FeatureMap(x.shape()), std::vector<double>(p.weight.size(), 0.0),
                   std::vector<double>(p.bias.size(), 0.0)};
    for (int i = 0; i < x.height(); ++i) {
        for (int j = 0; j < x.width(); ++j) {
            auto in = x.pixel(i, j);
            auto go = grad_out.pixel(i, j);
            auto gx = g.grad_x.pixel(i, j);
            for (int o = 0; o < p.out_channels; ++o) {
                const double d = go[static_cast<std::size_t>(o)];
                if (d == 0.0) continue;
                g.grad_bias[static_cast<std::size_t>(o)] += d;
                const std::size_t row = static_cast<std::size_t>(o * p.in_channels);
                for (int c = 0; c < p.in_channels; ++c) {
                    const auto cc = static_cast<std::size_t>(c);
                    g.grad_weight[row + cc] += d * in[cc];
                    gx[cc] += d * p.weight[row + cc];
                }
            }
        }
    }
    return g;
}

FeatureMap relu(const FeatureMap& x) {
    FeatureMap y(x.shape());
    for (std::size_t n = 0; n < x.size(); ++n) y[n] = x[n] > 0.0 ? x[n] : 0.0;
    return y;
}

FeatureMap relu_backward(const FeatureMap& x, const FeatureMap& grad_out) {
    require_same_shape(x, grad_out, "relu_backward");
    FeatureMap g(x.shape());
    for (std::size_t n = 0; n < x.size(); ++n) g[n] = x[n] > 0.0 ? grad_out[n] : 0.0;
    return g;
}

FeatureMap sigmoid(const FeatureMap& x) {
    FeatureMap y(x.shape());
    for (std::size_t n = 0; n < x.size(); ++n) {
        // Branch on sign so exp never overflows.
        const double v = x[n];
        if (v >= 0.0) {
            y[n] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            y[n] = e / (1.0 + e);
        }
    }
    return y;
}

FeatureMap sigmoid_backward(const FeatureMap& y, const FeatureMap& grad_out) {
    require_same_shape(y, grad_out, "sigmoid_backward");
    FeatureMap g(y.shape());
    for (std::size_t n = 0; n < y.size(); ++n) g[n] = y[n] * (1.0 - y[n]) * grad_out[n];
    return g;
}

FeatureMap hadamard(const FeatureMap& a, const FeatureMap& b) {
    require_same_shape(a, b, "hadamard");
    FeatureMap y(a.shape());
    for (std::size_t n = 0; n < a.size(); ++n) y[n] = a[n] * b[n];
    require_finite(y, "hadamard");
    return y;
}

HadamardGrads hadamard_backward(const FeatureMap& a, const FeatureMap& b, const FeatureMap& grad_out) {
    require_same_shape(a, b, "hadamard_backward");
    require_same_shape(a, grad_out, "hadamard_backward");
    HadamardGrads g{FeatureMap(a.shape()), FeatureMap(a.shape())};
    for (std::size_t n = 0; n < a.size(); ++n) {
        g.grad_a[n] = b[n] * grad_out[n];
        g.grad_b[n] = a[n] * grad_out[n];
    }
    return g;
}

Moments mean_and_variance(std::span<const double> x) {
    if (x.empty()) throw DomainError("mean_and_variance: empty input");
    const auto n = static_cast<double>(x.size());
    double sum = 0.0;
    for (double v : x) sum += v;
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return {mean, ss / n};
}

Moments mean_and_variance(const FeatureMap& x) { return mean_and_variance(x.values()); }

FeatureMap variance_backward(const FeatureMap& x) {
    const Moments m = mean_and_variance(x);
    const auto n = static_cast<double>(x.size());
    FeatureMap g(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) g[k] = 2.0 * (x[k] - m.mean) / n;
    return g;
}

FeatureMap finite_diff_gradient(const ScalarFunction& f, const FeatureMap& x, double h) {
    if (!(h > 0.0)) throw DomainError("finite_diff_gradient: step must be positive");
    FeatureMap probe = x;
    FeatureMap g(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + h;
        const double fp = f(probe);
        probe[k] = orig - h;
        const double fm = f(probe);
        probe[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_gradient: non-finite evaluation at element " + std::to_string(k));
        g[k] = (fp - fm) / (2.0 * h);
    }
    return g;
}

std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> x, double h) {
    if (!(h > 0.0)) throw DomainError("finite_diff_gradient: step must be positive");
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> g(x.size(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double orig = probe[k];
        probe[k] = orig + h;
        const double fp = f(probe);
        probe[k] = orig - h;
        const double fm = f(probe);
        probe[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_gradient: non-finite evaluation at element " + std::to_string(k));
        g[k] = (fp - fm) / (2.0 * h);
    }
    return g;
}

void write_feature_map(std::ostream& out, const FeatureMap& x) {
    out << x.height() << ' ' << x.width() << ' ' << x.channels() << '\n';
    const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
    for (int i = 0; i < x.height(); ++i) {
        for (int j = 0; j < x.width(); ++j) {
            auto px = x.pixel(i, j);
            for (std::size_t c = 0; c < px.size(); ++c) {
                if (c) out << ' ';
                out << px[c];
            }
            out << '\n';
        }
    }
    out.precision(old_precision);
}

FeatureMap read_feature_map(std::istream& in) {
    Shape s;
    if (!(in >> s.height >> s.width >> s.channels)) throw IoError("read_feature_map: malformed header");
    if (s.height <= 0 || s.width <= 0 || s.channels <= 0)
        throw DimensionError("read_feature_map: non-positive dimensions in header");
    std::vector<double> data(s.size());
    for (auto& v : data)
        if (!(in >> v)) throw IoError("read_feature_map: truncated data");
    return FeatureMap(s, std::move(data));
}

}  // namespace probanet
