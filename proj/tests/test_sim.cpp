#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "probanet/error.hpp"
#include "probanet/rng.hpp"
#include "probanet/sim.hpp"

namespace probanet {
namespace {

TEST(Iou, Examples) {
    const Box a{0, 0, 2, 2};
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
    EXPECT_DOUBLE_EQ(iou(a, Box{3, 3, 4, 4}), 0.0);
    EXPECT_DOUBLE_EQ(iou(a, Box{2, 0, 4, 2}), 0.0);
    EXPECT_NEAR(iou(a, Box{1, 0, 3, 2}), 1.0 / 3.0, 1e-15);
}

TEST(Iou, SymmetricAndBounded) {
    Rng rng(1);
    for (int n = 0; n < 2000; ++n) {
        auto box = [&] {
            const double x = rng.uniform(0, 10), y = rng.uniform(0, 10);
            return Box{x, y, x + rng.uniform(0.1, 5), y + rng.uniform(0.1, 5)};
        };
        const Box a = box(), b = box();
        const double ab = iou(a, b);
        EXPECT_EQ(ab, iou(b, a));
        EXPECT_GE(ab, 0.0);
        EXPECT_LE(ab, 1.0);
    }
}

TEST(GenerateScene, Deterministic) {
    const SimConfig config;
    const Scene a = generate_scene(config, 42), b = generate_scene(config, 42);
    EXPECT_EQ(a.objects, b.objects);
    EXPECT_EQ(a.features, b.features);
    EXPECT_NE(generate_scene(config, 43).features, a.features);
}

TEST(GenerateScene, ObjectsInsideGrid) {
    const SimConfig config;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Scene s = generate_scene(config, seed);
        EXPECT_GE(static_cast<int>(s.objects.size()), config.min_objects);
        EXPECT_LE(static_cast<int>(s.objects.size()), config.max_objects);
        for (const Box& b : s.objects) {
            EXPECT_TRUE(b.valid());
            EXPECT_GE(b.x_min, 0.0);
            EXPECT_GE(b.y_min, 0.0);
            EXPECT_LE(b.x_max, config.width);
            EXPECT_LE(b.y_max, config.height);
        }
    }
}

TEST(GenerateScene, ZeroObjectsIsNoiseAndAllBackground) {
    SimConfig config;
    config.min_objects = config.max_objects = 0;
    const Scene s = generate_scene(config, 7);
    EXPECT_TRUE(s.objects.empty());
    for (double v : s.features.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LT(v, config.noise_level);
    }
    for (const AnchorLabel& l : label_anchors(s, AnchorGrid::from_config(config))) {
        EXPECT_EQ(l.cls, AnchorClass::background);
        EXPECT_EQ(l.iou, 0.0);
    }
}

TEST(GenerateScene, OversizedObjectIsConfigError) {
    SimConfig config;
    config.max_object_size = config.width + 1.0;
    EXPECT_THROW(generate_scene(config, 0), ConfigError);
}

TEST(GenerateScene, DefaultBackgroundFarOutnumbersForeground) {
    const SimConfig config;
    const AnchorGrid grid = AnchorGrid::from_config(config);
    std::size_t fg = 0, bg = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed)
        for (const AnchorLabel& l : label_anchors(generate_scene(config, seed), grid, config.thresholds)) {
            fg += l.cls == AnchorClass::foreground;
            bg += l.cls == AnchorClass::background;
        }
    ASSERT_GT(fg, 0u);
    EXPECT_GT(static_cast<double>(bg) / static_cast<double>(fg), 10.0);
}

TEST(LabelAnchors, ExactCoverIsForeground) {
    Scene scene;
    scene.features = FeatureMap({8, 8, 1});
    scene.objects = {{1.5, 1.5, 5.5, 5.5}};  // the anchor of cell (3, 3)
    const auto labels = label_anchors(scene, AnchorGrid(8, 8, {4.0}, {4.0}));
    ASSERT_EQ(labels.size(), 64u);
    const AnchorLabel& l = labels[3 * 8 + 3];
    EXPECT_EQ(l.cls, AnchorClass::foreground);
    EXPECT_DOUBLE_EQ(l.iou, 1.0);
    EXPECT_EQ(l.difficulty, Difficulty::easy);
}

TEST(LabelAnchors, HardNegativeBand) {
    Scene scene;
    scene.features = FeatureMap({8, 8, 1});
    // Anchor at cell (0, 0) is [-0.5, 1.5]^2. Object [0.5, 3.5] x [-0.5, 1.5]: overlap 2, union 4 + 6 - 2.
    scene.objects = {{0.5, -0.5, 3.5, 1.5}};
    const auto labels = label_anchors(scene, AnchorGrid(8, 8, {2.0}, {2.0}));
    const AnchorLabel& l = labels[0];
    EXPECT_NEAR(l.iou, 0.25, 1e-15);
    EXPECT_EQ(l.cls, AnchorClass::background);
    EXPECT_EQ(l.difficulty, Difficulty::hard);
}

// Brute force over all anchor/object pairs on an 8 x 8 scene with one 4 x 4 object.
TEST(LabelAnchors, MatchesBruteForce) {
    Scene scene;
    scene.features = FeatureMap({8, 8, 1});
    scene.objects = {{2.3, 1.7, 6.3, 5.7}};
    const LabelThresholds th;
    const AnchorGrid grid(8, 8, {2.0, 4.0, 6.0}, {2.0, 4.0, 6.0});
    const auto labels = label_anchors(scene, grid, th);
    ASSERT_EQ(labels.size(), 8u * 8u * 3u);

    const double sizes[3] = {2.0, 4.0, 6.0};
    std::vector<double> ious;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int k = 0; k < 3; ++k) {
                const double cx = j + 0.5, cy = i + 0.5, h = sizes[k] / 2;
                const Box& o = scene.objects[0];
                const double iw = std::max(0.0, std::min(cx + h, o.x_max) - std::max(cx - h, o.x_min));
                const double ih = std::max(0.0, std::min(cy + h, o.y_max) - std::max(cy - h, o.y_min));
                const double inter = iw * ih;
                ious.push_back(inter / (sizes[k] * sizes[k] + o.area() - inter));
            }
    const double best = *std::max_element(ious.begin(), ious.end());
    for (std::size_t n = 0; n < labels.size(); ++n) {
        const AnchorLabel& l = labels[n];
        EXPECT_EQ(l.position, (AnchorPos{static_cast<int>(n / 24), static_cast<int>(n / 3 % 8), static_cast<int>(n % 3)}));
        EXPECT_NEAR(l.iou, ious[n], 1e-12);
        const double u = ious[n];
        const AnchorClass cls = (u >= th.fg_iou || u == best) ? AnchorClass::foreground
                                : u < th.bg_iou                ? AnchorClass::background
                                                               : AnchorClass::ignore;
        EXPECT_EQ(l.cls, cls) << "anchor " << n;
        const bool hard = (cls == AnchorClass::background && u >= th.hard_bg_min_iou) ||
                          (cls == AnchorClass::foreground && u >= th.fg_iou && u < th.hard_fg_max_iou);
        EXPECT_EQ(l.difficulty == Difficulty::hard, hard) << "anchor " << n;
    }
}

std::vector<AnchorLabel> synthetic_labels(int n_fg, int n_bg_easy, int n_bg_hard, int n_ignore = 0) {
    std::vector<AnchorLabel> labels;
    auto push = [&](int count, AnchorClass cls, Difficulty d) {
        for (int n = 0; n < count; ++n) {
            AnchorLabel l;
            l.cls = cls;
            l.difficulty = d;
            labels.push_back(l);
        }
    };
    push(n_fg, AnchorClass::foreground, Difficulty::easy);
    push(n_bg_easy, AnchorClass::background, Difficulty::easy);
    push(n_bg_hard, AnchorClass::background, Difficulty::hard);
    push(n_ignore, AnchorClass::ignore, Difficulty::easy);
    Rng rng(99);
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

TEST(Sampler, FixedRatio) {
    const auto labels = synthetic_labels(100, 4000, 1000);
    Rng rng(2);
    const MiniBatch b = sample_minibatch(labels, {}, rng);
    EXPECT_EQ(b.fg_count, 64);
    EXPECT_EQ(b.bg_count, 192);
}

TEST(Sampler, PadsForegroundShortfall) {
    const auto labels = synthetic_labels(10, 4000, 1000);
    Rng rng(3);
    const MiniBatch b = sample_minibatch(labels, {}, rng);
    EXPECT_EQ(b.fg_count, 10);
    EXPECT_EQ(b.bg_count, 246);
}

TEST(Sampler, MaskWithoutEasyBackgroundGivesAllHard) {
    const auto labels = synthetic_labels(100, 4000, 500);
    std::vector<std::uint8_t> mask(labels.size());
    for (std::size_t n = 0; n < labels.size(); ++n)
        mask[n] = !(labels[n].cls == AnchorClass::background && labels[n].difficulty == Difficulty::easy);
    Rng rng(4);
    const MiniBatch b = sample_minibatch(labels, mask, rng);
    ASSERT_EQ(b.bg_count, 192);
    for (std::size_t n = static_cast<std::size_t>(b.fg_count); n < b.size(); ++n)
        EXPECT_EQ(labels[b.indices[n]].difficulty, Difficulty::hard);
}

TEST(Sampler, EmptyPoolThrows) {
    const auto labels = synthetic_labels(10, 20, 0);
    std::vector<std::uint8_t> mask(labels.size(), 0);
    Rng rng(5);
    EXPECT_THROW(sample_minibatch(labels, mask, rng), EmptyPoolError);
    for (std::size_t n = 0; n < labels.size(); ++n) mask[n] = labels[n].cls == AnchorClass::foreground;
    EXPECT_THROW(sample_minibatch(labels, mask, rng), EmptyPoolError);
}

TEST(Sampler, Deterministic) {
    const auto labels = synthetic_labels(80, 3000, 600, 50);
    Rng a(6), b(6);
    for (int n = 0; n < 20; ++n) EXPECT_EQ(sample_minibatch(labels, {}, a).indices, sample_minibatch(labels, {}, b).indices);
}

TEST(Sampler, ContractOverManyRandomBatches) {
    Rng rng(7);
    for (int trial = 0; trial < 10000; ++trial) {
        const int fg = static_cast<int>(rng.below(120));
        const int easy = static_cast<int>(rng.below(400));
        const int hard = static_cast<int>(rng.below(100)) + (easy == 0 ? 1 : 0);
        const auto labels = synthetic_labels(fg, easy, hard, static_cast<int>(rng.below(30)));
        std::vector<std::uint8_t> mask;
        if (rng.below(2)) {
            mask.resize(labels.size());
            for (auto& m : mask) m = rng.below(4) != 0;
        }
        int fg_pool = 0, bg_pool = 0;
        for (std::size_t n = 0; n < labels.size(); ++n) {
            if (!mask.empty() && !mask[n]) continue;
            fg_pool += labels[n].cls == AnchorClass::foreground;
            bg_pool += labels[n].cls == AnchorClass::background;
        }
        if (bg_pool == 0) {
            EXPECT_THROW(sample_minibatch(labels, mask, rng), EmptyPoolError);
            continue;
        }
        const MiniBatch b = sample_minibatch(labels, mask, rng);
        ASSERT_LE(b.fg_count, 64);
        ASSERT_LE(b.size(), 256u);
        ASSERT_EQ(b.fg_count + b.bg_count, static_cast<int>(b.size()));
        ASSERT_EQ(b.fg_count, std::min(fg_pool, 64));
        ASSERT_EQ(b.bg_count, std::min(bg_pool, 256 - b.fg_count));
        std::set<std::size_t> seen;
        for (std::size_t n = 0; n < b.size(); ++n) {
            const std::size_t idx = b.indices[n];
            ASSERT_TRUE(seen.insert(idx).second);
            ASSERT_TRUE(mask.empty() || mask[idx]);
            ASSERT_NE(labels[idx].cls, AnchorClass::ignore);
            ASSERT_EQ(labels[idx].cls == AnchorClass::foreground, n < static_cast<std::size_t>(b.fg_count));
        }
    }
}

TEST(Sampler, MaskingEasyBackgroundRaisesHardRatio) {
    const auto labels = synthetic_labels(40, 3000, 400);
    std::vector<std::uint8_t> mask(labels.size(), 1);
    Rng pick(8);
    for (std::size_t n = 0; n < labels.size(); ++n)
        if (labels[n].cls == AnchorClass::background && labels[n].difficulty == Difficulty::easy && pick.below(2))
            mask[n] = 0;
    Rng rng(9);
    const int batches = 2000;
    double sum_free = 0, sum_masked = 0, sq_free = 0, sq_masked = 0;
    for (int n = 0; n < batches; ++n) {
        const double f = hard_ratio(sample_minibatch(labels, {}, rng), labels);
        const double m = hard_ratio(sample_minibatch(labels, mask, rng), labels);
        sum_free += f, sq_free += f * f, sum_masked += m, sq_masked += m * m;
    }
    const double mf = sum_free / batches, mm = sum_masked / batches;
    const double se = std::sqrt((sq_free / batches - mf * mf + sq_masked / batches - mm * mm) / batches);
    EXPECT_GT(mm - mf, -3.0 * se);
    EXPECT_GT(mm, mf);
}

TEST(HardRatio, Examples) {
    std::vector<AnchorLabel> labels(4);
    labels[2].difficulty = Difficulty::hard;
    MiniBatch b;
    b.indices = {0, 1, 2, 3};
    b.bg_count = 4;
    EXPECT_DOUBLE_EQ(hard_ratio(b, labels), 0.25);
    labels[2].difficulty = Difficulty::easy;
    EXPECT_DOUBLE_EQ(hard_ratio(b, labels), 0.0);
    EXPECT_THROW(hard_ratio(MiniBatch{}, labels), DomainError);
}

TEST(HardRatio, MatchesRecount) {
    const auto labels = synthetic_labels(60, 2000, 700);
    Rng rng(10);
    for (int n = 0; n < 200; ++n) {
        const MiniBatch b = sample_minibatch(labels, {}, rng);
        int hard = 0;
        for (std::size_t idx : b.indices) hard += labels[idx].difficulty == Difficulty::hard;
        EXPECT_NEAR(hard_ratio(b, labels), static_cast<double>(hard) / static_cast<double>(b.size()), 1e-12);
    }
}

TEST(BoxesCsv, RoundTrip) {
    const std::vector<Box> boxes{{0.5, 1.25, 3, 4}, {2, 2, 7.125, 5.5}};
    std::stringstream ss;
    write_boxes_csv(ss, boxes);
    EXPECT_EQ(read_boxes_csv(ss), boxes);
    std::stringstream bad("1,2,3\n");
    EXPECT_THROW(read_boxes_csv(bad), IoError);
}

}  // namespace
}  // namespace probanet
