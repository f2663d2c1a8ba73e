#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "hadnet/errors.hpp"
#include "hadnet/volumes.hpp"
#include "test_util.hpp"

using namespace hadnet;

namespace {

Image ramp(const Extent& e)
{
    Image img(e, 0.0f);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(i + 1);
    return img;
}

MultiModalVolume two_channel(const Extent& e)
{
    MultiModalVolume v;
    v.add("a", ramp(e));
    Image b = ramp(e);
    for (auto& x : b.data) x = x * 2 + 3;
    v.add("b", b);
    v.brain_mask = Mask(e, 1);
    return v;
}

}  // namespace

TEST(CenterCrop, OffsetsFollowFloorOfHalfDifference)
{
    const auto off = center_offsets(Extent::make3d(8, 8, 8), Extent::make3d(4, 6, 4));
    EXPECT_EQ(off[0], 2);
    EXPECT_EQ(off[1], 1);
    EXPECT_EQ(off[2], 2);
    const auto odd = center_offsets(Extent::make3d(9, 7, 5), Extent::make3d(4, 4, 4));
    EXPECT_EQ(odd[0], 2);  // floor(5/2)
    EXPECT_EQ(odd[1], 1);
    EXPECT_EQ(odd[2], 0);
}

TEST(CenterCrop, CroppedVoxelsComeFromTheOffsetWindow)
{
    const Extent in = Extent::make3d(8, 8, 8), out = Extent::make3d(4, 6, 4);
    const Image img = ramp(in);
    const Image c = center_crop(img, out);
    ASSERT_EQ(c.extent, out);
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(c(z, y, x), img(z + 2, y + 1, x + 2));
}

TEST(CenterCrop, IdentityWhenTargetEqualsInput)
{
    const Extent e = Extent::make3d(5, 6, 7);
    const auto v = two_channel(e);
    const auto c = center_crop(v, e);
    for (std::size_t i = 0; i < v.channels.size(); ++i) EXPECT_EQ(c.channels[i], v.channels[i]);
    EXPECT_EQ(c.brain_mask, v.brain_mask);
}

TEST(CenterCrop, StrictModeRejectsTargetLargerThanInput)
{
    Image img(Extent::make3d(155, 240, 240), 1.0f);
    EXPECT_THROW(center_crop(img, Extent::make3d(160, 192, 160)), ShapeError);
}

TEST(CenterCrop, PadThenCropReachesTheTargetOnShortAxes)
{
    // Storage order (d, h, w): a 240x240x155 scan stored with depth 155.
    const Extent in = Extent::make3d(155, 24, 24), target = Extent::make3d(160, 19, 16);
    Image img(in, 1.0f);
    const Image c = center_crop(img, target, CropMode::PadThenCrop);
    ASSERT_EQ(c.extent, target);
    // floor((155-160)/2) = -3: three zero slices in front, two behind.
    for (std::size_t z : {0u, 1u, 2u, 158u, 159u}) EXPECT_EQ(c(z, 5, 5), 0.0f) << z;
    for (std::size_t z : {3u, 80u, 157u}) EXPECT_EQ(c(z, 5, 5), 1.0f) << z;
}

TEST(CenterCrop, BratsSizedVolumePadsDepthAndCropsInPlane)
{
    const auto off = center_offsets(Extent::make3d(155, 240, 240), Extent::make3d(160, 192, 160));
    EXPECT_EQ(off[0], -3);
    EXPECT_EQ(off[1], 24);
    EXPECT_EQ(off[2], 40);
}

TEST(CenterCrop, AllChannelsAndMaskShareTheWindow)
{
    const Extent in = Extent::make3d(6, 6, 6), out = Extent::make3d(4, 4, 2);
    auto v = two_channel(in);
    v.brain_mask(1, 1, 2) = 0;
    const auto c = center_crop(v, out);
    for (std::size_t ch = 0; ch < 2; ++ch) EXPECT_EQ(c.channels[ch], center_crop(v.channels[ch], out));
    EXPECT_EQ(c.brain_mask, center_crop(v.brain_mask, out));
    EXPECT_EQ(c.brain_mask(0, 0, 0), 0);
}

TEST(CenterCrop, CommutesWithRegionMask)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto seg = testutil::random_seg(Extent::make3d(7, 9, 6), rng);
        const Extent target = Extent::make3d(4, 5, 3);
        for (Region r : kAllRegions)
            EXPECT_EQ(region_mask(center_crop(seg, target), r), center_crop(region_mask(seg, r), target));
    }
}

TEST(ZScore, MaskedMomentsAreStandardized)
{
    std::mt19937_64 rng(11);
    std::normal_distribution<double> n(40, 7);
    const Extent e = Extent::make3d(6, 7, 8);
    MultiModalVolume v;
    for (const char* name : {"t1", "t2"}) {
        Image img(e, 0.0f);
        for (auto& x : img.data) x = static_cast<float>(n(rng));
        v.add(name, img);
    }
    v.brain_mask = testutil::random_mask(e, rng, 0.6);
    const auto z = zscore_normalize(v);
    for (const auto& ch : z.channels) {
        double s = 0, s2 = 0, cnt = 0;
        for (std::size_t i = 0; i < ch.size(); ++i) {
            if (!v.brain_mask.data[i]) {
                EXPECT_EQ(ch.data[i], 0.0f);
                continue;
            }
            s += ch.data[i];
            s2 += static_cast<double>(ch.data[i]) * ch.data[i];
            ++cnt;
        }
        const double mu = s / cnt;
        EXPECT_LT(std::abs(mu), 1e-5);
        EXPECT_LT(std::abs(std::sqrt(s2 / cnt - mu * mu) - 1.0), 1e-5);
    }
}

TEST(ZScore, FiveVoxelHandComputation)
{
    const Extent e = Extent::make2d(1, 7);
    MultiModalVolume v;
    Image img(e, 0.0f);
    for (int i = 0; i < 5; ++i) img.data[static_cast<std::size_t>(i + 1)] = static_cast<float>(i + 1);
    img.data[6] = 99.0f;  // outside the mask
    v.add("t1", img);
    v.brain_mask = Mask(e, 0);
    for (int i = 1; i <= 5; ++i) v.brain_mask.data[static_cast<std::size_t>(i)] = 1;
    const auto z = zscore_normalize(v);
    // population std of 1..5 is sqrt(2)
    const double s = std::sqrt(2.0);
    const double want[] = {0, -2 / s, -1 / s, 0, 1 / s, 2 / s, 0};
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(z.channels[0].data[i], want[i], 1e-6) << i;
}

TEST(ZScore, ConstantChannelIsZeroedWithWarning)
{
    const Extent e = Extent::make2d(4, 4);
    MultiModalVolume v;
    v.add("flat", Image(e, 3.0f));
    v.add("ramp", ramp(e));
    v.brain_mask = Mask(e, 1);
    const auto z = zscore_normalize(v);
    for (float x : z.channels[0].data) EXPECT_EQ(x, 0.0f);
    ASSERT_EQ(z.warnings.size(), 1u);
    EXPECT_NE(z.warnings[0].find("flat"), std::string::npos);
}

TEST(ZScore, EmptyMaskIsRejected)
{
    const Extent e = Extent::make2d(3, 3);
    MultiModalVolume v;
    v.add("t1", ramp(e));
    v.brain_mask = Mask(e, 0);
    EXPECT_THROW(zscore_normalize(v), DataError);
}

TEST(ZScore, IdempotentUpToTolerance)
{
    std::mt19937_64 rng(5);
    const Extent e = Extent::make3d(5, 5, 5);
    MultiModalVolume v;
    v.add("t1", Image(e, 0.0f));
    std::gamma_distribution<double> g(2.0, 3.0);
    for (auto& x : v.channels[0].data) x = static_cast<float>(g(rng));
    v.brain_mask = testutil::random_mask(e, rng, 0.7);
    const auto once = zscore_normalize(v);
    const auto twice = zscore_normalize(once);
    for (std::size_t i = 0; i < once.channels[0].size(); ++i)
        EXPECT_NEAR(once.channels[0].data[i], twice.channels[0].data[i], 1e-4);
}

TEST(BrainMask, AnyNonzeroChannel)
{
    const Extent e = Extent::make2d(2, 3);
    MultiModalVolume v;
    Image a(e, 0.0f), b(e, 0.0f);
    a.data[1] = 1.0f;
    b.data[4] = -2.0f;
    v.add("a", a);
    v.add("b", b);
    v.brain_mask = Mask(e, 0);
    const Mask m = infer_brain_mask(v);
    EXPECT_EQ(m.data, (std::vector<std::uint8_t>{0, 1, 0, 0, 1, 0}));
}

TEST(Volume, ValidateRejectsMismatchedChannels)
{
    MultiModalVolume v;
    v.add("a", Image(Extent::make2d(4, 4)));
    v.add("b", Image(Extent::make2d(4, 5)));
    v.brain_mask = Mask(Extent::make2d(4, 4));
    EXPECT_THROW(v.validate(), ShapeError);
    EXPECT_THROW(v.channel("c"), DataError);
}

TEST(Volume, SelectKeepsRequestedOrder)
{
    auto v = two_channel(Extent::make2d(3, 3));
    const auto s = v.select({"b", "a"});
    EXPECT_EQ(s.names, (std::vector<std::string>{"b", "a"}));
    EXPECT_EQ(s.channels[0], v.channel("b"));
}

TEST(Segmentation, ValidateRejectsLabelFour)
{
    SegmentationMap s{Mask(Extent::make2d(2, 2), 0)};
    s.labels.data[3] = 4;
    EXPECT_THROW(s.validate(), DataError);
}

TEST(RegionMask, FixedLabelSets)
{
    EXPECT_EQ(RegionSpec::of(Region::WT).label_set, (std::array<bool, 4>{false, true, true, true}));
    EXPECT_EQ(RegionSpec::of(Region::TC).label_set, (std::array<bool, 4>{false, true, false, true}));
    EXPECT_EQ(RegionSpec::of(Region::ET).label_set, (std::array<bool, 4>{false, false, false, true}));
}

TEST(RegionMask, AllBackgroundGivesEmptyMasks)
{
    SegmentationMap s{Mask(Extent::make3d(3, 3, 3), 0)};
    for (Region r : kAllRegions) EXPECT_EQ(count(region_mask(s, r)), 0u);
}

TEST(RegionMask, EtIsEmptyWithoutLabelThree)
{
    std::mt19937_64 rng(1);
    auto s = testutil::random_seg(Extent::make2d(8, 8), rng);
    for (auto& v : s.labels.data)
        if (v == 3 || v == 0) v = 1;
    EXPECT_EQ(count(region_mask(s, Region::ET)), 0u);
}

TEST(RegionMask, CountsFromLabelHistogram)
{
    SegmentationMap s{Mask(Extent::make2d(5, 10), 0)};
    std::size_t i = 0;
    for (int k = 0; k < 10; ++k) s.labels.data[i++] = 1;
    for (int k = 0; k < 20; ++k) s.labels.data[i++] = 2;
    for (int k = 0; k < 5; ++k) s.labels.data[i++] = 3;
    EXPECT_EQ(count(region_mask(s, Region::WT)), 35u);
    EXPECT_EQ(count(region_mask(s, Region::TC)), 15u);
    EXPECT_EQ(count(region_mask(s, Region::ET)), 5u);
}

TEST(RegionMask, AlgebraHoldsOnRandomMaps)
{
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = testutil::random_seg(Extent::make3d(4, 5, 6), rng);
        const Mask wt = region_mask(s, Region::WT), tc = region_mask(s, Region::TC), et = region_mask(s, Region::ET);
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            EXPECT_EQ(wt.data[i], (tc.data[i] || s.labels.data[i] == 2) ? 1 : 0);
            EXPECT_LE(et.data[i], tc.data[i]);
        }
    }
}
