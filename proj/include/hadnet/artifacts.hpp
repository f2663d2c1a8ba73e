#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hadnet/nets.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);
/// Digest over parameter names, shapes and raw float64 values, in order.
std::string params_digest(const nets::ParamSet& params);
/// Digest over every regular file below `dir` (relative path + contents, sorted by path).
std::string directory_digest(const std::filesystem::path& dir);

using Rgb = std::array<std::uint8_t, 3>;
/// Colours: necrotic core red, edema green, enhancing tumour yellow.
Rgb label_color(std::uint8_t label);

/// Grey-scale slice `z` of `background` (min-max scaled) with labels blended on top.
void write_overlay_png(const std::filesystem::path& path, const Image& background, const SegmentationMap& labels,
                       std::size_t z, double alpha = 0.6);

/// One overlay per axial slice; returns the written files.
std::vector<std::filesystem::path> write_overlays(const std::filesystem::path& dir, const std::string& stem,
                                                  const Image& background, const SegmentationMap& labels);

}  // namespace hadnet
