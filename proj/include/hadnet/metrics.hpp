#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hadnet/volumes.hpp"

namespace hadnet::metrics {

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
double dice(const Mask& pred, const Mask& gt);

struct RegionDice {
    double wt = 0, tc = 0, et = 0;

    double get(Region r) const;
    double& get(Region r);
    double mean() const { return (wt + tc + et) / 3.0; }
};

RegionDice evaluate_case(const SegmentationMap& pred, const SegmentationMap& gt);

struct TTestResult {
    bool degenerate = false;  // zero-variance differences: p undefined
    double t = 0;
    double p = 0;
    int df = 0;
};

/// Two-sided paired t-test on a - b with n-1 degrees of freedom.
TTestResult paired_ttest(std::span<const double> a, std::span<const double> b);

struct Summary {
    double mean = 0, std = 0;  // std uses n-1 (0 for a single case)
};
Summary summarize(std::span<const double> xs);

struct EvalReport {
    std::vector<std::pair<std::string, RegionDice>> per_case;

    std::vector<double> column(Region r) const;
    Summary aggregate(Region r) const;
    nlohmann::json case_record(std::size_t i) const;
    /// One JSON object per case, then one aggregate record.
    std::string to_jsonl() const;
    static EvalReport from_jsonl(const std::string& text);
};

/// Regions x methods table (Dice in %, mean ± std) followed by paired
/// t-test p-values for every method pair over common cases.
std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& methods);

struct Comparison {
    std::string a, b;
    std::map<Region, TTestResult> tests;
    std::size_t n_common = 0;
};
std::vector<Comparison> compare_all(const std::vector<std::pair<std::string, EvalReport>>& methods);

}  // namespace hadnet::metrics
