#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hadnet/volume_io.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet::synth {

/// Phantom generator settings. Lesions are nested ellipsoids (edema ⊃ core ⊃
/// enhancing); labels 1 and 3 share one intensity distribution in every
/// pre-contrast channel, and only the contrast channel lifts enhancing voxels
/// by `contrast_gap`.
struct PhantomConfig {
    Extent extent = Extent::make2d(32, 32);
    int num_modalities_pre = 3;
    double noise_std = 0.1;
    std::pair<int, int> lesion_count_range{1, 2};
    std::array<double, 3> nesting_radii{6.4, 4.35, 3.08};  // edema, core, enhancing
    double contrast_gap = 1.0;
    double aspect_jitter = 0.15;  // per-axis semi-axis factor drawn from [1-j, 1+j]
    std::uint64_t seed = 0;

    /// Radii scaled to the extent so that enhancing and necrotic voxels are balanced.
    static std::array<double, 3> default_radii(const Extent& e);
    /// Throws ConfigError on any broken invariant.
    void validate() const;
};

inline constexpr const char* kContrastModality = "t1ce";

/// Names of the pre-contrast channels for a given count (t1, t2, flair, pre3, ...).
std::vector<std::string> pre_contrast_names(int n);

struct Lesion {
    std::array<double, 3> center{};         // storage order (d, h, w)
    std::array<double, 3> aspect{1, 1, 1};  // per-axis semi-axis multiplier
    std::array<double, 3> enhancing_offset{};
};

struct Phantom {
    MultiModalVolume volume;  // pre-contrast channels followed by the contrast channel
    SegmentationMap labels;
    std::vector<Lesion> lesions;
};

Phantom generate_phantom(const PhantomConfig& cfg);

/// Deterministic per-case seed derived from the master seed.
std::uint64_t case_seed(std::uint64_t master_seed, std::uint64_t case_index);

struct SplitFractions {
    double train = 0.6, val = 0.2, test = 0.2;
};

struct Manifest {
    std::uint64_t master_seed = 0;
    std::map<std::string, std::string> case_split;  // case_id -> train|val|test

    std::vector<std::string> cases_in(const std::string& split) const;
    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path);
};

/// Number of cases per split; throws ConfigError if any split ends up empty
/// or the fractions do not sum to 1.
std::array<std::size_t, 3> split_counts(std::size_t n_cases, const SplitFractions& split);

/// Writes `n_cases` phantoms as case directories under `out_dir` plus
/// `manifest.json`.
Manifest generate_dataset(const PhantomConfig& cfg, std::size_t n_cases, const SplitFractions& split,
                          const std::filesystem::path& out_dir, VolumeFormat fmt = VolumeFormat::Nifti);

/// Expected per-label voxel counts of one lesion from the ellipsoid volumes
/// (index by label; background entry is unused).
std::array<double, kNumLabels> expected_lesion_voxels(const PhantomConfig& cfg);

}  // namespace hadnet::synth
