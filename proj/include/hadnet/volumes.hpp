#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace hadnet {

/// Spatial extent in storage order (d, h, w). Rank-2 data keeps d == 1.
struct Extent {
    int rank = 3;
    std::array<std::size_t, 3> dims{1, 1, 1};

    static Extent make2d(std::size_t h, std::size_t w) { return {2, {1, h, w}}; }
    static Extent make3d(std::size_t d, std::size_t h, std::size_t w) { return {3, {d, h, w}}; }

    std::size_t voxels() const noexcept { return dims[0] * dims[1] * dims[2]; }
    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept
    {
        return (z * dims[1] + y) * dims[2] + x;
    }
    std::string str() const;
    friend bool operator==(const Extent&, const Extent&) = default;
};

template <typename T>
struct Grid {
    Extent extent;
    std::vector<T> data;

    Grid() = default;
    explicit Grid(Extent e, T fill = T{}) : extent(e), data(e.voxels(), fill) {}

    T& operator()(std::size_t z, std::size_t y, std::size_t x) { return data[extent.index(z, y, x)]; }
    const T& operator()(std::size_t z, std::size_t y, std::size_t x) const { return data[extent.index(z, y, x)]; }
    std::size_t size() const noexcept { return data.size(); }
    friend bool operator==(const Grid&, const Grid&) = default;
};

using Image = Grid<float>;
using Mask = Grid<std::uint8_t>;

enum Label : std::uint8_t { Background = 0, NecroticCore = 1, Edema = 2, Enhancing = 3 };
inline constexpr int kNumLabels = 4;
/// Label value used for enhancing tumour in BraTS-format files.
inline constexpr std::uint8_t kBratsEnhancing = 4;

struct MultiModalVolume {
    std::vector<std::string> names;  // ordered modality names
    std::vector<Image> channels;
    Mask brain_mask;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::vector<std::string> warnings;

    const Extent& extent() const { return brain_mask.extent; }
    std::size_t num_channels() const noexcept { return channels.size(); }
    /// Throws DataError if the modality is absent.
    const Image& channel(std::string_view name) const;
    bool has(std::string_view name) const;
    void add(std::string name, Image img);
    /// Copy holding only the listed modalities, in the listed order.
    MultiModalVolume select(const std::vector<std::string>& modalities) const;
    /// Throws ShapeError unless every channel and the mask share one extent.
    void validate() const;
};

struct SegmentationMap {
    Grid<std::uint8_t> labels;
    const Extent& extent() const { return labels.extent; }
    /// Throws DataError if any value lies outside {0,1,2,3}.
    void validate() const;
    friend bool operator==(const SegmentationMap&, const SegmentationMap&) = default;
};

enum class Region { WT, TC, ET };
inline constexpr std::array<Region, 3> kAllRegions{Region::WT, Region::TC, Region::ET};

struct RegionSpec {
    Region region;
    std::string_view name;
    std::array<bool, kNumLabels> label_set;

    static RegionSpec of(Region r);
    bool contains(std::uint8_t label) const { return label < kNumLabels && label_set[label]; }
};

enum class CropMode {
    Strict,       // target larger than input is a dimension error
    PadThenCrop,  // short axes are zero-padded (centred) up to the target
};

/// Start offsets of the centred window on each axis: floor((in - out) / 2).
/// Negative offsets (padding) only arise in PadThenCrop mode.
std::array<std::ptrdiff_t, 3> center_offsets(const Extent& in, const Extent& target);

template <typename T>
Grid<T> center_crop(const Grid<T>& g, const Extent& target, CropMode mode = CropMode::Strict);
MultiModalVolume center_crop(const MultiModalVolume& v, const Extent& target, CropMode mode = CropMode::Strict);
SegmentationMap center_crop(const SegmentationMap& s, const Extent& target, CropMode mode = CropMode::Strict);

/// True wherever any channel is nonzero.
Mask infer_brain_mask(const MultiModalVolume& v);

/// Per-channel z-score using the brain-mask mean and population standard
/// deviation; voxels outside the mask become 0. A channel whose masked std is
/// below 1e-8 is zeroed and a warning is appended.
MultiModalVolume zscore_normalize(const MultiModalVolume& v);

Mask region_mask(const SegmentationMap& seg, const RegionSpec& region);
inline Mask region_mask(const SegmentationMap& seg, Region r) { return region_mask(seg, RegionSpec::of(r)); }

std::size_t count(const Mask& m);

}  // namespace hadnet
