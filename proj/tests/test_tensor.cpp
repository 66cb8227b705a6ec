#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "probanet/error.hpp"
#include "probanet/rng.hpp"
#include "probanet/tensor.hpp"

namespace probanet {
namespace {

FeatureMap random_map(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    FeatureMap m(s);
    for (auto& v : m.values()) v = rng.uniform(lo, hi);
    return m;
}

Conv1x1Params random_conv(int out, int in, Rng& rng) {
    Conv1x1Params p(out, in);
    for (auto& w : p.weight) w = rng.uniform(-1.0, 1.0);
    for (auto& b : p.bias) b = rng.uniform(-1.0, 1.0);
    return p;
}

double dot(const FeatureMap& a, const FeatureMap& b) {
    double s = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
    return s;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max(1.0, std::abs(n)); }

void expect_close(const FeatureMap& a, const FeatureMap& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t n = 0; n < a.size(); ++n) EXPECT_LT(rel_err(a[n], b[n]), tol) << "element " << n;
}

TEST(Conv1x1, UnweightedSum) {
    FeatureMap x({1, 1, 2}, {1.0, 2.0});
    Conv1x1Params p(1, 2);
    p.weight = {1.0, 1.0};
    const FeatureMap y = conv1x1_forward(x, p);
    ASSERT_EQ(y.size(), 1u);
    EXPECT_DOUBLE_EQ(y[0], 3.0);
}

TEST(Conv1x1, IdentityWeights) {
    Rng rng(1);
    const FeatureMap x = random_map({3, 2, 4}, rng);
    Conv1x1Params p(4, 4);
    for (int c = 0; c < 4; ++c) p.w(c, c) = 1.0;
    EXPECT_EQ(conv1x1_forward(x, p), x);
}

TEST(Conv1x1, MatchesPerPixelMatvec) {
    Rng rng(2);
    const FeatureMap x = random_map({2, 2, 3}, rng);
    const Conv1x1Params p = random_conv(4, 3, rng);
    const FeatureMap y = conv1x1_forward(x, p);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int o = 0; o < 4; ++o) {
                double s = p.bias[static_cast<std::size_t>(o)];
                for (int c = 0; c < 3; ++c) s += p.weight[static_cast<std::size_t>(o * 3 + c)] * x.at(i, j, c);
                EXPECT_NEAR(y.at(i, j, o), s, 1e-12);
            }
}

TEST(Conv1x1, ChannelMismatchThrows) {
    EXPECT_THROW(conv1x1_forward(FeatureMap({1, 1, 3}), Conv1x1Params(2, 4)), DimensionError);
    EXPECT_THROW(conv1x1_backward(FeatureMap({1, 1, 4}), Conv1x1Params(2, 4), FeatureMap({1, 1, 3})), DimensionError);
}

TEST(Conv1x1, LinearWithoutBias) {
    Rng rng(3);
    const FeatureMap x1 = random_map({3, 3, 5}, rng);
    const FeatureMap x2 = random_map({3, 3, 5}, rng);
    Conv1x1Params p = random_conv(2, 5, rng);
    std::fill(p.bias.begin(), p.bias.end(), 0.0);
    const double a = 0.7, b = -1.3;
    FeatureMap mix(x1.shape());
    for (std::size_t n = 0; n < mix.size(); ++n) mix[n] = a * x1[n] + b * x2[n];
    const FeatureMap y1 = conv1x1_forward(x1, p), y2 = conv1x1_forward(x2, p), ym = conv1x1_forward(mix, p);
    for (std::size_t n = 0; n < ym.size(); ++n) EXPECT_NEAR(ym[n], a * y1[n] + b * y2[n], 1e-12);
}

TEST(Conv1x1Backward, ZeroCotangent) {
    Rng rng(4);
    const FeatureMap x = random_map({2, 3, 3}, rng);
    const Conv1x1Params p = random_conv(2, 3, rng);
    const Conv1x1Grads g = conv1x1_backward(x, p, FeatureMap({2, 3, 2}));
    for (double v : g.grad_x.values()) EXPECT_EQ(v, 0.0);
    for (double v : g.grad_weight) EXPECT_EQ(v, 0.0);
    for (double v : g.grad_bias) EXPECT_EQ(v, 0.0);
}

TEST(Conv1x1Backward, ScalarChainRule) {
    Conv1x1Params p(1, 1);
    p.weight = {1.5};
    p.bias = {0.25};
    const Conv1x1Grads g = conv1x1_backward(FeatureMap({1, 1, 1}, {-2.0}), p, FeatureMap({1, 1, 1}, {3.0}));
    EXPECT_DOUBLE_EQ(g.grad_x[0], 4.5);
    EXPECT_DOUBLE_EQ(g.grad_weight[0], -6.0);
    EXPECT_DOUBLE_EQ(g.grad_bias[0], 3.0);
}

TEST(Conv1x1Backward, MatchesFiniteDifferences) {
    Rng rng(5);
    const FeatureMap x = random_map({3, 2, 4}, rng);
    const Conv1x1Params p = random_conv(3, 4, rng);
    const FeatureMap g = random_map({3, 2, 3}, rng);
    const Conv1x1Grads an = conv1x1_backward(x, p, g);
    expect_close(an.grad_x, finite_diff_gradient([&](const FeatureMap& xx) { return dot(g, conv1x1_forward(xx, p)); }, x),
                 1e-6);
    std::vector<double> flat(p.weight);
    flat.insert(flat.end(), p.bias.begin(), p.bias.end());
    const auto num = finite_diff_gradient(
        [&](std::span<const double> f) {
            Conv1x1Params q = p;
            std::copy_n(f.begin(), q.weight.size(), q.weight.begin());
            std::copy(f.begin() + static_cast<std::ptrdiff_t>(q.weight.size()), f.end(), q.bias.begin());
            return dot(g, conv1x1_forward(x, q));
        },
        flat);
    for (std::size_t n = 0; n < an.grad_weight.size(); ++n) EXPECT_LT(rel_err(an.grad_weight[n], num[n]), 1e-6);
    for (std::size_t n = 0; n < an.grad_bias.size(); ++n)
        EXPECT_LT(rel_err(an.grad_bias[n], num[an.grad_weight.size() + n]), 1e-6);
}

TEST(Relu, Values) {
    const FeatureMap y = relu(FeatureMap({1, 1, 3}, {-1.0, 0.0, 2.0}));
    EXPECT_EQ(y, FeatureMap({1, 1, 3}, {0.0, 0.0, 2.0}));
}

TEST(Relu, PositiveInputIsIdentity) {
    Rng rng(6);
    const FeatureMap x = random_map({2, 2, 3}, rng, 0.1, 2.0);
    EXPECT_EQ(relu(x), x);
}

TEST(Relu, SubgradientAtZeroIsZero) {
    const FeatureMap g = relu_backward(FeatureMap({1, 1, 3}, {-1.0, 0.0, 1.0}), FeatureMap({1, 1, 3}, 1.0));
    EXPECT_EQ(g, FeatureMap({1, 1, 3}, {0.0, 0.0, 1.0}));
}

TEST(Relu, MatchesFiniteDifferencesAwayFromZero) {
    Rng rng(7);
    FeatureMap x = random_map({3, 3, 2}, rng);
    for (auto& v : x.values()) v += v >= 0 ? 0.1 : -0.1;
    const FeatureMap g = random_map(x.shape(), rng);
    expect_close(relu_backward(x, g), finite_diff_gradient([&](const FeatureMap& xx) { return dot(g, relu(xx)); }, x),
                 1e-6);
}

TEST(Sigmoid, HalfAtZero) { EXPECT_DOUBLE_EQ(sigmoid(FeatureMap({1, 1, 1}))[0], 0.5); }

TEST(Sigmoid, SymmetryAndRange) {
    Rng rng(8);
    const FeatureMap x = random_map({4, 4, 3}, rng, -30.0, 30.0);
    FeatureMap neg(x.shape());
    for (std::size_t n = 0; n < x.size(); ++n) neg[n] = -x[n];
    const FeatureMap a = sigmoid(x), b = sigmoid(neg);
    for (std::size_t n = 0; n < x.size(); ++n) {
        EXPECT_NEAR(a[n] + b[n], 1.0, 1e-15);
        EXPECT_GT(a[n], 0.0);
        EXPECT_LT(a[n], 1.0);
    }
}

TEST(Sigmoid, MatchesFiniteDifferences) {
    Rng rng(9);
    const FeatureMap x = random_map({3, 2, 4}, rng, -4.0, 4.0);
    const FeatureMap g = random_map(x.shape(), rng);
    expect_close(sigmoid_backward(sigmoid(x), g),
                 finite_diff_gradient([&](const FeatureMap& xx) { return dot(g, sigmoid(xx)); }, x), 1e-6);
}

TEST(Hadamard, OnesAndZeros) {
    Rng rng(10);
    const FeatureMap a = random_map({2, 3, 2}, rng);
    EXPECT_EQ(hadamard(a, FeatureMap(a.shape(), 1.0)), a);
    EXPECT_EQ(hadamard(a, FeatureMap(a.shape(), 0.0)), FeatureMap(a.shape(), 0.0));
}

TEST(Hadamard, ShapeMismatchThrows) {
    EXPECT_THROW(hadamard(FeatureMap({1, 2, 3}), FeatureMap({2, 1, 3})), DimensionError);
}

TEST(Hadamard, MatchesFiniteDifferences) {
    Rng rng(11);
    const FeatureMap a = random_map({2, 2, 3}, rng), b = random_map({2, 2, 3}, rng), g = random_map({2, 2, 3}, rng);
    const HadamardGrads an = hadamard_backward(a, b, g);
    expect_close(an.grad_a, finite_diff_gradient([&](const FeatureMap& aa) { return dot(g, hadamard(aa, b)); }, a), 1e-6);
    expect_close(an.grad_b, finite_diff_gradient([&](const FeatureMap& bb) { return dot(g, hadamard(a, bb)); }, b), 1e-6);
}

TEST(Variance, ConstantIsZero) {
    const Moments m = mean_and_variance(FeatureMap({3, 3, 2}, 4.5));
    EXPECT_DOUBLE_EQ(m.mean, 4.5);
    EXPECT_EQ(m.variance, 0.0);
}

TEST(Variance, ZeroOneHalves) {
    FeatureMap x({2, 2, 2});
    for (std::size_t n = 0; n < x.size(); n += 2) x[n] = 1.0;
    EXPECT_DOUBLE_EQ(mean_and_variance(x).variance, 0.25);
}

TEST(Variance, MatchesTwoPassAndFiniteDifferences) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const FeatureMap x = random_map({3, 4, 5}, rng, -3.0, 3.0);
        double mean = 0.0;
        for (double v : x.values()) mean += v;
        mean /= static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x.values()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        const Moments m = mean_and_variance(x);
        EXPECT_NEAR(m.mean, mean, 1e-12);
        EXPECT_NEAR(m.variance, var, 1e-12);
        EXPECT_GT(m.variance, 0.0);
    }
    const FeatureMap x = random_map({2, 3, 2}, rng);
    expect_close(variance_backward(x),
                 finite_diff_gradient([](const FeatureMap& xx) { return mean_and_variance(xx).variance; }, x), 1e-6);
}

TEST(FiniteDiff, SumGivesOnes) {
    Rng rng(13);
    const FeatureMap x = random_map({2, 2, 2}, rng);
    const FeatureMap g = finite_diff_gradient(
        [](const FeatureMap& xx) {
            double s = 0.0;
            for (double v : xx.values()) s += v;
            return s;
        },
        x);
    for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, HalfSquaredNorm) {
    Rng rng(14);
    const FeatureMap x = random_map({2, 3, 2}, rng);
    const FeatureMap g = finite_diff_gradient([](const FeatureMap& xx) { return 0.5 * dot(xx, xx); }, x);
    for (std::size_t n = 0; n < x.size(); ++n) EXPECT_NEAR(g[n], x[n], 1e-9);
}

TEST(FiniteDiff, RejectsBadStepAndNonFinite) {
    const FeatureMap x({1, 1, 2}, 1.0);
    EXPECT_THROW(finite_diff_gradient([](const FeatureMap&) { return 0.0; }, x, 0.0), DomainError);
    EXPECT_THROW(finite_diff_gradient([](const FeatureMap&) { return std::nan(""); }, x), NumericError);
}

TEST(FeatureMapText, RoundTrip) {
    Rng rng(15);
    const FeatureMap x = random_map({3, 2, 4}, rng);
    std::stringstream ss;
    write_feature_map(ss, x);
    std::string header;
    std::getline(ss, header);
    EXPECT_EQ(header, "3 2 4");
    ss.seekg(0);
    EXPECT_EQ(read_feature_map(ss), x);
}

}  // namespace
}  // namespace probanet
