#include <fstream>

#include <png.h>

#include <gtest/gtest.h>

#include "hadnet/artifacts.hpp"
#include "test_util.hpp"

using namespace hadnet;

TEST(Sha256, KnownVectors)
{
    EXPECT_EQ(sha256_hex({}), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    const std::string abc = "abc";
    EXPECT_EQ(sha256_hex({reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size()}),
              "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    testutil::TempDir tmp;
    std::ofstream(tmp / "f", std::ios::binary) << "abc";
    EXPECT_EQ(sha256_file(tmp / "f"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Digests, ParamsAndDirectories)
{
    nets::ParamSet a, b;
    a.add("w", Tensor({1, 1, 1, 2}, 1.0));
    b.add("w", Tensor({1, 1, 1, 2}, 1.0));
    EXPECT_EQ(params_digest(a), params_digest(b));
    b.get("w").mutable_value()[1] = std::nextafter(1.0, 2.0);
    EXPECT_NE(params_digest(a), params_digest(b));
    nets::ParamSet c;
    c.add("v", Tensor({1, 1, 1, 2}, 1.0));
    EXPECT_NE(params_digest(a), params_digest(c));

    testutil::TempDir t1, t2;
    for (const auto* t : {&t1, &t2}) {
        fs::create_directories(*t / "sub");
        std::ofstream(*t / "x") << "1";
        std::ofstream(*t / "sub" / "y") << "2";
    }
    EXPECT_EQ(directory_digest(t1.path()), directory_digest(t2.path()));
    std::ofstream(t2 / "sub" / "y") << "3";
    EXPECT_NE(directory_digest(t1.path()), directory_digest(t2.path()));
}

TEST(Overlay, WritesValidPngWithLabelColours)
{
    testutil::TempDir tmp;
    const Extent e = Extent::make3d(2, 4, 6);
    Image bg(e, 0.0f);
    for (std::size_t i = 0; i < bg.size(); ++i) bg.data[i] = float(i);
    SegmentationMap s{Mask(e, 0)};
    s.labels(1, 2, 3) = Enhancing;
    const auto files = write_overlays(tmp.path(), "c", bg, s);
    ASSERT_EQ(files.size(), 2u);

    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    ASSERT_TRUE(png_image_begin_read_from_file(&img, files[1].c_str()));
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
    ASSERT_TRUE(png_image_finish_read(&img, nullptr, px.data(), 0, nullptr));
    EXPECT_EQ(img.width, 6u);
    EXPECT_EQ(img.height, 4u);
    const std::size_t at = (2 * 6 + 3) * 3;
    // yellow blended over grey: red and green high, blue low
    EXPECT_GT(px[at], px[at + 2]);
    EXPECT_GT(px[at + 1], px[at + 2]);
    EXPECT_EQ(label_color(NecroticCore), (Rgb{255, 0, 0}));
    EXPECT_EQ(label_color(Background), (Rgb{0, 0, 0}));
}
