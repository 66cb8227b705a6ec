#pragma once

// Dense rank-3 feature maps and the handful of kernels the gate is built from.
// Every forward op has an explicit backward; there is no autodiff tape.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace probanet {

struct Shape {
    int height = 0;
    int width = 0;
    int channels = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
               static_cast<std::size_t>(channels);
    }
    std::size_t pixels() const noexcept {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }

    friend bool operator==(const Shape&, const Shape&) = default;
};

/// Row-major (h, w, c) tensor of doubles.
class FeatureMap {
public:
    FeatureMap() = default;
    explicit FeatureMap(Shape shape, double fill = 0.0);
    FeatureMap(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    int height() const noexcept { return shape_.height; }
    int width() const noexcept { return shape_.width; }
    int channels() const noexcept { return shape_.channels; }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t index(int i, int j, int k) const noexcept {
        return (static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_.width) +
                static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(shape_.channels) +
               static_cast<std::size_t>(k);
    }
    double& at(int i, int j, int k) noexcept { return data_[index(i, j, k)]; }
    double at(int i, int j, int k) const noexcept { return data_[index(i, j, k)]; }

    double& operator[](std::size_t n) noexcept { return data_[n]; }
    double operator[](std::size_t n) const noexcept { return data_[n]; }

    /// Channel vector at spatial position (i, j).
    std::span<const double> pixel(int i, int j) const noexcept {
        return {data_.data() + index(i, j, 0), static_cast<std::size_t>(shape_.channels)};
    }
    std::span<double> pixel(int i, int j) noexcept {
        return {data_.data() + index(i, j, 0), static_cast<std::size_t>(shape_.channels)};
    }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }

    bool all_finite() const noexcept;

    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;

private:
    Shape shape_{};
    std::vector<double> data_;
};

/// 1x1 convolution: a dense [out x in] matrix applied at every pixel, plus bias.
struct Conv1x1Params {
    int out_channels = 0;
    int in_channels = 0;
    std::vector<double> weight;  // row-major [out][in]
    std::vector<double> bias;    // [out]

    Conv1x1Params() = default;
    Conv1x1Params(int out, int in);

    double& w(int o, int i) noexcept { return weight[static_cast<std::size_t>(o * in_channels + i)]; }
    double w(int o, int i) const noexcept { return weight[static_cast<std::size_t>(o * in_channels + i)]; }

    std::size_t scalar_count() const noexcept { return weight.size() + bias.size(); }

    /// Throws DimensionError when the weight/bias lengths disagree with the channel counts.
    void validate() const;
};

struct Conv1x1Grads {
    FeatureMap grad_x;
    std::vector<double> grad_weight;
    std::vector<double> grad_bias;
};

FeatureMap conv1x1_forward(const FeatureMap& x, const Conv1x1Params& p);
Conv1x1Grads conv1x1_backward(const FeatureMap& x, const Conv1x1Params& p, const FeatureMap& grad_out);

FeatureMap relu(const FeatureMap& x);
/// Passes grad_out where x > 0; the subgradient at exactly 0 is 0.
FeatureMap relu_backward(const FeatureMap& x, const FeatureMap& grad_out);

FeatureMap sigmoid(const FeatureMap& x);
/// Takes the forward *output* y, not the input.
FeatureMap sigmoid_backward(const FeatureMap& y, const FeatureMap& grad_out);

FeatureMap hadamard(const FeatureMap& a, const FeatureMap& b);

struct HadamardGrads {
    FeatureMap grad_a;
    FeatureMap grad_b;
};
HadamardGrads hadamard_backward(const FeatureMap& a, const FeatureMap& b, const FeatureMap& grad_out);

struct Moments {
    double mean = 0.0;
    double variance = 0.0;  // population variance, divisor N
};

Moments mean_and_variance(std::span<const double> x);
Moments mean_and_variance(const FeatureMap& x);

/// dV/dx_k = 2 (x_k - mean) / N.
FeatureMap variance_backward(const FeatureMap& x);

using ScalarFunction = std::function<double(const FeatureMap&)>;

/// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every element.
/// Throws NumericError if f returns a non-finite value.
FeatureMap finite_diff_gradient(const ScalarFunction& f, const FeatureMap& x, double h = 1e-5);

/// Same estimator over a flat parameter vector.
std::vector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& f,
                                         std::span<const double> x, double h = 1e-5);

/// Header "H W C" then H*W lines of C space-separated values.
void write_feature_map(std::ostream& out, const FeatureMap& x);
FeatureMap read_feature_map(std::istream& in);

}  // namespace probanet
