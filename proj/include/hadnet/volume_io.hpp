#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hadnet/volumes.hpp"

namespace hadnet {

namespace fs = std::filesystem;

/// Records every volume file a loader opens.
struct AccessLog {
    std::vector<std::string> opened;
};

struct ImageFile {
    Image image;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // storage order (d, h, w)
};

// NIfTI-1 single-file images (.nii / .nii.gz). Reading accepts uint8, int8,
// int16, uint16, int32, float32 and float64 payloads and applies scl_slope.
ImageFile read_nifti(const fs::path& path);
void write_nifti(const fs::path& path, const Image& img, const std::array<double, 3>& spacing);
void write_nifti(const fs::path& path, const Grid<std::uint8_t>& img, const std::array<double, 3>& spacing);

// Raw container: little-endian payload in `<stem>.raw` plus a text sidecar
// `<stem>.hdr` with lines `rank`, `dims d h w`, `dtype float32|uint8`,
// `modality NAME` and `spacing d h w`.
ImageFile read_raw(const fs::path& raw_path);
void write_raw(const fs::path& raw_path, const Image& img, const std::array<double, 3>& spacing,
               const std::string& modality);
void write_raw(const fs::path& raw_path, const Grid<std::uint8_t>& img, const std::array<double, 3>& spacing,
               const std::string& modality);

enum class VolumeFormat { Nifti, Raw };

/// Case layout: `<case>/<modality>.nii.gz` (or `.raw`) and `<case>/seg.nii.gz`.
/// Label files on disk use the BraTS convention {0,1,2,4}.
void save_case(const fs::path& case_dir, const MultiModalVolume& vol, const SegmentationMap* seg,
               VolumeFormat fmt = VolumeFormat::Nifti);

/// Modalities present in a case directory, sorted by name, excluding labels.
std::vector<std::string> case_modalities(const fs::path& case_dir);

/// Loads the listed modalities only; the brain mask is inferred as any
/// channel nonzero. Files opened are appended to `log` when given.
MultiModalVolume load_case_volume(const fs::path& case_dir, const std::vector<std::string>& modalities,
                                  AccessLog* log = nullptr);

fs::path find_volume_file(const fs::path& case_dir, const std::string& stem);

/// Reads a label file, mapping BraTS label 4 to the internal enhancing label 3.
SegmentationMap read_labels(const fs::path& path, AccessLog* log = nullptr);
/// Writes labels with enhancing exported as 4.
void write_labels_brats(const fs::path& path, const SegmentationMap& seg, const std::array<double, 3>& spacing);

}  // namespace hadnet
