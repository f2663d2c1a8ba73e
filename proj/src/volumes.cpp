#include "hadnet/volumes.hpp"

#include <algorithm>
#include <cmath>

#include "hadnet/errors.hpp"

namespace hadnet {

std::string Extent::str() const
{
    if (rank == 2) return std::to_string(dims[1]) + "x" + std::to_string(dims[2]);
    return std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]);
}

const Image& MultiModalVolume::channel(std::string_view name) const
{
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return channels[i];
    throw DataError("modality '" + std::string(name) + "' not present");
}

bool MultiModalVolume::has(std::string_view name) const
{
    return std::find(names.begin(), names.end(), name) != names.end();
}

void MultiModalVolume::add(std::string name, Image img)
{
    names.push_back(std::move(name));
    channels.push_back(std::move(img));
}

MultiModalVolume MultiModalVolume::select(const std::vector<std::string>& modalities) const
{
    MultiModalVolume out;
    out.brain_mask = brain_mask;
    out.spacing = spacing;
    out.warnings = warnings;
    for (const auto& m : modalities) out.add(m, channel(m));
    return out;
}

void MultiModalVolume::validate() const
{
    if (names.size() != channels.size()) throw ShapeError("modality names and channels differ in count");
    for (std::size_t i = 0; i < channels.size(); ++i)
        if (!(channels[i].extent == brain_mask.extent))
            throw ShapeError("channel '" + names[i] + "' has extent " + channels[i].extent.str() +
                             " but the brain mask has " + brain_mask.extent.str());
}

void SegmentationMap::validate() const
{
    for (auto v : labels.data)
        if (v >= kNumLabels) throw DataError("invalid segmentation label " + std::to_string(v));
}

RegionSpec RegionSpec::of(Region r)
{
    switch (r) {
    case Region::WT: return {r, "WT", {false, true, true, true}};
    case Region::TC: return {r, "TC", {false, true, false, true}};
    case Region::ET: return {r, "ET", {false, false, false, true}};
    }
    throw std::logic_error("unknown region");
}

std::array<std::ptrdiff_t, 3> center_offsets(const Extent& in, const Extent& target)
{
    std::array<std::ptrdiff_t, 3> off{};
    for (int a = 0; a < 3; ++a) {
        auto d = static_cast<std::ptrdiff_t>(in.dims[a]) - static_cast<std::ptrdiff_t>(target.dims[a]);
        // floor division, also for negative d
        off[a] = d >= 0 ? d / 2 : -((-d + 1) / 2);
    }
    return off;
}

template <typename T>
Grid<T> center_crop(const Grid<T>& g, const Extent& target, CropMode mode)
{
    if (g.extent.rank != target.rank)
        throw ShapeError("crop target rank " + std::to_string(target.rank) + " differs from input rank " +
                         std::to_string(g.extent.rank));
    for (int a = 0; a < 3; ++a)
        if (target.dims[a] > g.extent.dims[a] && mode == CropMode::Strict)
            throw ShapeError("crop target " + target.str() + " exceeds input " + g.extent.str() + " on axis " +
                             std::to_string(a));
    auto off = center_offsets(g.extent, target);
    Grid<T> out(target);
    for (std::size_t z = 0; z < target.dims[0]; ++z) {
        auto iz = static_cast<std::ptrdiff_t>(z) + off[0];
        if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.extent.dims[0])) continue;
        for (std::size_t y = 0; y < target.dims[1]; ++y) {
            auto iy = static_cast<std::ptrdiff_t>(y) + off[1];
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.extent.dims[1])) continue;
            for (std::size_t x = 0; x < target.dims[2]; ++x) {
                auto ix = static_cast<std::ptrdiff_t>(x) + off[2];
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.extent.dims[2])) continue;
                out(z, y, x) = g(static_cast<std::size_t>(iz), static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
        }
    }
    return out;
}

template Grid<float> center_crop(const Grid<float>&, const Extent&, CropMode);
template Grid<std::uint8_t> center_crop(const Grid<std::uint8_t>&, const Extent&, CropMode);

MultiModalVolume center_crop(const MultiModalVolume& v, const Extent& target, CropMode mode)
{
    v.validate();
    MultiModalVolume out;
    out.spacing = v.spacing;
    out.warnings = v.warnings;
    out.brain_mask = center_crop(v.brain_mask, target, mode);
    for (std::size_t i = 0; i < v.channels.size(); ++i) out.add(v.names[i], center_crop(v.channels[i], target, mode));
    return out;
}

SegmentationMap center_crop(const SegmentationMap& s, const Extent& target, CropMode mode)
{
    return {center_crop(s.labels, target, mode)};
}

Mask infer_brain_mask(const MultiModalVolume& v)
{
    if (v.channels.empty()) throw DataError("cannot infer a brain mask without channels");
    Mask m(v.channels.front().extent, 0);
    for (const auto& c : v.channels) {
        if (!(c.extent == m.extent)) throw ShapeError("channels differ in extent");
        for (std::size_t i = 0; i < c.size(); ++i)
            if (c.data[i] != 0.0f) m.data[i] = 1;
    }
    return m;
}

MultiModalVolume zscore_normalize(const MultiModalVolume& v)
{
    v.validate();
    const std::size_t n = count(v.brain_mask);
    if (n == 0) throw DataError("z-score normalization needs a non-empty brain mask");
    MultiModalVolume out = v;
    for (std::size_t c = 0; c < v.channels.size(); ++c) {
        const auto& src = v.channels[c].data;
        const auto& mask = v.brain_mask.data;
        double mean = 0;
        for (std::size_t i = 0; i < src.size(); ++i)
            if (mask[i]) mean += src[i];
        mean /= static_cast<double>(n);
        double var = 0;
        for (std::size_t i = 0; i < src.size(); ++i)
            if (mask[i]) var += (src[i] - mean) * (src[i] - mean);
        const double sd = std::sqrt(var / static_cast<double>(n));
        auto& dst = out.channels[c].data;
        if (sd < 1e-8) {
            std::fill(dst.begin(), dst.end(), 0.0f);
            out.warnings.push_back("degenerate channel '" + v.names[c] + "': zero variance inside brain mask");
            continue;
        }
        for (std::size_t i = 0; i < src.size(); ++i)
            dst[i] = mask[i] ? static_cast<float>((src[i] - mean) / sd) : 0.0f;
    }
    return out;
}

Mask region_mask(const SegmentationMap& seg, const RegionSpec& region)
{
    Mask m(seg.extent(), 0);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = region.contains(seg.labels.data[i]) ? 1 : 0;
    return m;
}

std::size_t count(const Mask& m)
{
    return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(), [](auto v) { return v != 0; }));
}

}  // namespace hadnet
