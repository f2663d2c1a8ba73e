#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hadnet/autograd.hpp"
#include "hadnet/volume_io.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet {

/// One preprocessed case: z-scored channels (all modalities) and labels.
struct Case {
    std::string id;
    MultiModalVolume volume;
    SegmentationMap labels;
};

struct DataSplit {
    std::vector<Case> train, val, test;
};

enum class Role { Teacher, Student };
const char* to_string(Role r);
Role role_from_string(const std::string& s);

/// Modality naming: the student sees everything except `contrast`; the
/// teacher sees the student's channels followed by `contrast`.
struct ModalityPlan {
    std::vector<std::string> pre;
    std::string contrast = "t1ce";

    std::vector<std::string> inputs(Role r) const;
    static ModalityPlan from_available(const std::vector<std::string>& available, const std::string& contrast);
};

struct PreprocessOptions {
    std::optional<Extent> crop;  // pad-then-crop to this extent when set
};

/// Crop (optional), brain mask as any channel nonzero, per-channel z-score.
Case preprocess_case(std::string id, MultiModalVolume raw, SegmentationMap labels, const PreprocessOptions& opt);

/// Loads one case directory with the listed modalities and optional labels.
Case load_case(const std::filesystem::path& case_dir, const std::vector<std::string>& modalities,
               const PreprocessOptions& opt, bool with_labels, AccessLog* log = nullptr);

/// Loads every case listed in `<dir>/manifest.json` with the listed modalities.
DataSplit load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& modalities,
                       const PreprocessOptions& opt);

/// Places a (cropped) map back into `original`, undoing a centred crop or pad;
/// voxels outside the crop window become background.
SegmentationMap restore_extent(const SegmentationMap& s, const Extent& original);

/// Channel stack of the role's inputs.
Tensor input_tensor(const Case& c, const ModalityPlan& plan, Role r);

/// Per-voxel argmax over class probabilities (ties go to the lower class).
/// rank 0 infers 2 from a depth of 1.
SegmentationMap argmax_labels(const Tensor& probs, int rank = 0);

}  // namespace hadnet
