#include <random>

#include <gtest/gtest.h>

#include "hadnet/dataset.hpp"
#include "hadnet/errors.hpp"
#include "test_util.hpp"

using namespace hadnet;

TEST(ModalityPlan, StudentDropsContrastTeacherAppendsIt)
{
    const auto plan = ModalityPlan::from_available({"flair", "t1", "t1ce", "t2"}, "t1ce");
    EXPECT_EQ(plan.inputs(Role::Student), (std::vector<std::string>{"flair", "t1", "t2"}));
    EXPECT_EQ(plan.inputs(Role::Teacher), (std::vector<std::string>{"flair", "t1", "t2", "t1ce"}));
    EXPECT_THROW(ModalityPlan::from_available({"t1ce"}, "t1ce"), DataError);
}

TEST(Role, StringRoundTrip)
{
    for (Role r : {Role::Teacher, Role::Student}) EXPECT_EQ(role_from_string(to_string(r)), r);
    EXPECT_THROW(role_from_string("oracle"), ConfigError);
}

TEST(InputTensor, StacksRoleChannelsInPlanOrder)
{
    const Case c = testutil::phantom_case(3, Extent::make2d(32, 32));
    const auto plan = ModalityPlan::from_available(c.volume.names, "t1ce");
    const Tensor s = input_tensor(c, plan, Role::Student), t = input_tensor(c, plan, Role::Teacher);
    EXPECT_EQ(s.shape(), (std::vector<std::size_t>{3, 1, 32, 32}));
    EXPECT_EQ(t.shape(), (std::vector<std::size_t>{4, 1, 32, 32}));
    const auto& contrast = c.volume.channel("t1ce");
    for (std::size_t i = 0; i < contrast.size(); ++i) ASSERT_EQ(t[3 * 1024 + i], double(contrast.data[i]));
    for (std::size_t k = 0; k < 3 * 1024; ++k) ASSERT_EQ(s[k], t[k]);
}

TEST(Preprocess, ZScoresInsideInferredBrainMask)
{
    synth::PhantomConfig cfg;
    cfg.extent = Extent::make3d(16, 16, 16);
    cfg.nesting_radii = synth::PhantomConfig::default_radii(cfg.extent);
    cfg.seed = 5;
    const auto p = synth::generate_phantom(cfg);
    const Case c = preprocess_case("x", p.volume, p.labels, {});
    EXPECT_EQ(c.volume.brain_mask, p.volume.brain_mask);
    for (const auto& ch : c.volume.channels) {
        double m = 0, n = 0;
        for (std::size_t i = 0; i < ch.size(); ++i)
            if (c.volume.brain_mask.data[i]) m += ch.data[i], n += 1;
        EXPECT_NEAR(m / n, 0.0, 1e-5);
    }
}

TEST(Preprocess, CropAppliesToLabelsAndMismatchIsDataError)
{
    const Extent big = Extent::make2d(40, 36);
    MultiModalVolume v;
    std::mt19937_64 rng(1);
    Image a(big, 0.0f);
    std::uniform_real_distribution<float> u(0.5f, 2.0f);
    for (auto& x : a.data) x = u(rng);
    v.add("t1", a);
    v.add("t1ce", a);
    SegmentationMap s{Mask(big, 0)};
    s.labels(0, 20, 18) = 2;
    PreprocessOptions opt;
    opt.crop = Extent::make2d(32, 32);
    const Case c = preprocess_case("x", v, s, opt);
    EXPECT_EQ(c.volume.extent(), *opt.crop);
    EXPECT_EQ(c.labels.extent(), *opt.crop);
    EXPECT_EQ(c.labels.labels(0, 16, 16), 2);  // offsets (0, 4, 2)
    SegmentationMap wrong{Mask(Extent::make2d(8, 8), 0)};
    EXPECT_THROW(preprocess_case("y", v, wrong, {}), DataError);
}

TEST(RestoreExtent, InvertsCropAndPad)
{
    std::mt19937_64 rng(2);
    for (auto [orig, crop] : std::vector<std::pair<Extent, Extent>>{
             {Extent::make3d(7, 10, 9), Extent::make3d(4, 8, 8)},
             {Extent::make3d(3, 5, 6), Extent::make3d(8, 8, 8)},
             {Extent::make2d(12, 5), Extent::make2d(8, 8)}}) {
        const SegmentationMap full = testutil::random_seg(orig, rng);
        const SegmentationMap cropped = center_crop(full, crop, CropMode::PadThenCrop);
        const SegmentationMap back = restore_extent(cropped, orig);
        ASSERT_EQ(back.extent(), orig);
        const auto off = center_offsets(orig, crop);
        for (std::size_t z = 0; z < orig.dims[0]; ++z)
            for (std::size_t y = 0; y < orig.dims[1]; ++y)
                for (std::size_t x = 0; x < orig.dims[2]; ++x) {
                    const auto inside = [](std::size_t p, std::ptrdiff_t o, std::size_t n) {
                        const auto q = static_cast<std::ptrdiff_t>(p) - o;
                        return q >= 0 && q < static_cast<std::ptrdiff_t>(n);
                    };
                    const bool in = inside(z, off[0], crop.dims[0]) && inside(y, off[1], crop.dims[1]) &&
                                    inside(x, off[2], crop.dims[2]);
                    ASSERT_EQ(back.labels(z, y, x), in ? full.labels(z, y, x) : 0);
                }
    }
}

TEST(Argmax, PicksLargestWithLowerClassOnTies)
{
    Tensor p({4, 1, 1, 3});
    // voxel 0: class 2; voxel 1: tie 1/3 -> 1; voxel 2: all equal -> 0
    const double v0[4] = {0.1, 0.2, 0.6, 0.1}, v1[4] = {0.1, 0.4, 0.1, 0.4}, v2[4] = {0.25, 0.25, 0.25, 0.25};
    for (std::size_t c = 0; c < 4; ++c) {
        p[c * 3 + 0] = v0[c];
        p[c * 3 + 1] = v1[c];
        p[c * 3 + 2] = v2[c];
    }
    const auto s = argmax_labels(p);
    EXPECT_EQ(s.extent().rank, 2);
    EXPECT_EQ(s.labels.data, (std::vector<std::uint8_t>{2, 1, 0}));
    EXPECT_EQ(argmax_labels(Tensor({4, 2, 2, 2})).extent().rank, 3);
    EXPECT_THROW(argmax_labels(Tensor({4})), ShapeError);
}

TEST(LoadDataset, ReadsEverySplitFromManifest)
{
    testutil::TempDir tmp;
    synth::PhantomConfig cfg;
    cfg.extent = Extent::make2d(32, 32);
    cfg.nesting_radii = synth::PhantomConfig::default_radii(cfg.extent);
    cfg.seed = 11;
    synth::generate_dataset(cfg, 5, {0.6, 0.2, 0.2}, tmp / "d");
    const auto split = load_dataset(tmp / "d", {"t1", "t2", "flair", "t1ce"}, {});
    EXPECT_EQ(split.train.size(), 3u);
    EXPECT_EQ(split.val.size(), 1u);
    EXPECT_EQ(split.test.size(), 1u);
    const Case& c = split.train.front();
    EXPECT_EQ(c.volume.names.size(), 4u);
    EXPECT_EQ(c.labels.extent(), cfg.extent);
    EXPECT_NO_THROW(c.labels.validate());
    EXPECT_THROW(load_dataset(tmp / "missing", {"t1"}, {}), Error);
}
