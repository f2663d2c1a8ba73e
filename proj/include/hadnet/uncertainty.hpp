#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hadnet/nets.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet::uncertainty {

inline constexpr int kDefaultSamples = 100;
inline const std::vector<double> kDefaultThresholds{100, 75, 50, 25};

struct UncertaintyMap {
    Grid<double> values;  // in [0, 100]
    Region region = Region::ET;
};

/// n stochastic forwards; sample i draws its dropout masks from its own
/// stream derived from (seed, i). Throws ConfigError when the network has p = 0.
std::vector<Tensor> mc_sample(const nets::SegNet& net, const Tensor& x_pre, int n, std::uint64_t seed);

/// Per voxel: p = mean region probability mass over samples, u = 100 H(p) / ln 2
/// with binary entropy H. Per-voxel sums run over sorted terms, so the result
/// does not depend on sample order. rank 0 infers 2 from a depth of 1.
UncertaintyMap entropy_uncertainty(const std::vector<Tensor>& samples, const RegionSpec& region, int rank = 0);

/// 100 * H(p) / ln 2, clamped to [0, 100].
double normalized_binary_entropy(double p);

struct FilteredResult {
    double threshold = 100;
    Mask kept;  // 1 where unc <= T
    double dice_filtered = 1;
    double ftp_ratio = 0;  // filtered correct positives / ground-truth positives
    double ftn_ratio = 0;  // filtered correct negatives / ground-truth negatives
    bool degenerate = false;  // nothing kept; dice_filtered is 1 by convention
};

FilteredResult filter_at_threshold(const Mask& pred, const UncertaintyMap& unc, const Mask& gt, double T);

/// (mean dice + (1 - mean ftp) + (1 - mean ftn)) / 3 over T in {100, 75, 50, 25}.
/// Throws ConfigError if one of the four is missing; other thresholds are ignored.
double uncertainty_score(const std::vector<FilteredResult>& results);

/// Rounded to integers for unsigned 8-bit export.
Mask to_u8(const UncertaintyMap& u);

struct CaseUncertainty {
    std::string case_id;
    Region region = Region::ET;
    std::vector<FilteredResult> per_threshold;
    double score = 0;

    nlohmann::json to_json() const;
};

/// Per-case JSON lines followed by an aggregate record.
std::string report_jsonl(const std::vector<CaseUncertainty>& cases);
/// Text table: one row per case and threshold plus the mean score.
std::string render_report(const std::vector<CaseUncertainty>& cases);

}  // namespace hadnet::uncertainty
