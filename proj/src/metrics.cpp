#include "hadnet/metrics.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "hadnet/errors.hpp"

namespace hadnet::metrics {

double dice(const Mask& pred, const Mask& gt)
{
    if (!(pred.extent == gt.extent)) throw ShapeError("dice on masks of different extent");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        a += p;
        b += g;
        both += p && g;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double RegionDice::get(Region r) const
{
    switch (r) {
    case Region::WT: return wt;
    case Region::TC: return tc;
    case Region::ET: return et;
    }
    return 0;
}

double& RegionDice::get(Region r)
{
    switch (r) {
    case Region::WT: return wt;
    case Region::TC: return tc;
    default: return et;
    }
}

RegionDice evaluate_case(const SegmentationMap& pred, const SegmentationMap& gt)
{
    if (!(pred.extent() == gt.extent()))
        throw ShapeError("prediction extent " + pred.extent().str() + " differs from ground truth " + gt.extent().str());
    RegionDice d;
    for (Region r : kAllRegions) d.get(r) = dice(region_mask(pred, r), region_mask(gt, r));
    return d;
}

TTestResult paired_ttest(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw std::invalid_argument("paired t-test needs equal-length samples");
    if (a.size() < 2) throw std::invalid_argument("paired t-test needs at least two pairs");
    const std::size_t n = a.size();
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0, scale = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
        scale = std::max(scale, std::abs(a[i] - b[i]));
    }
    TTestResult r;
    r.df = static_cast<int>(n - 1);
    const double var = ss / static_cast<double>(n - 1);
    // differences constant up to rounding
    if (!(std::sqrt(var) > 1e-12 * std::max(scale, 1e-300))) {
        r.degenerate = true;
        return r;
    }
    r.t = mean / std::sqrt(var / static_cast<double>(n));
    // Two-sided tail of Student's t: I_{df/(df+t^2)}(df/2, 1/2).
    const double df = r.df;
    r.p = boost::math::ibeta(df / 2.0, 0.5, df / (df + r.t * r.t));
    return r;
}

Summary summarize(std::span<const double> xs)
{
    Summary s;
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

std::vector<double> EvalReport::column(Region r) const
{
    std::vector<double> out;
    out.reserve(per_case.size());
    for (const auto& [id, d] : per_case) out.push_back(d.get(r));
    return out;
}

Summary EvalReport::aggregate(Region r) const
{
    auto c = column(r);
    return summarize(c);
}

nlohmann::json EvalReport::case_record(std::size_t i) const
{
    const auto& [id, d] = per_case.at(i);
    return {{"case", id}, {"WT", d.wt}, {"TC", d.tc}, {"ET", d.et}};
}

std::string EvalReport::to_jsonl() const
{
    std::string out;
    for (std::size_t i = 0; i < per_case.size(); ++i) out += case_record(i).dump() + "\n";
    nlohmann::json agg = {{"aggregate", true}, {"n", per_case.size()}};
    for (Region r : kAllRegions) {
        auto s = aggregate(r);
        agg[std::string(RegionSpec::of(r).name)] = {{"mean", s.mean}, {"std", s.std}};
    }
    out += agg.dump() + "\n";
    return out;
}

EvalReport EvalReport::from_jsonl(const std::string& text)
{
    EvalReport rep;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (j.value("aggregate", false)) continue;
        RegionDice d{j.at("WT").get<double>(), j.at("TC").get<double>(), j.at("ET").get<double>()};
        rep.per_case.emplace_back(j.at("case").get<std::string>(), d);
    }
    return rep;
}

std::vector<Comparison> compare_all(const std::vector<std::pair<std::string, EvalReport>>& methods)
{
    std::vector<Comparison> out;
    for (std::size_t i = 0; i < methods.size(); ++i)
        for (std::size_t j = i + 1; j < methods.size(); ++j) {
            Comparison c{methods[i].first, methods[j].first, {}, 0};
            std::map<std::string, RegionDice> b_cases(methods[j].second.per_case.begin(), methods[j].second.per_case.end());
            std::map<Region, std::vector<double>> xa, xb;
            for (const auto& [id, d] : methods[i].second.per_case) {
                auto it = b_cases.find(id);
                if (it == b_cases.end()) continue;
                ++c.n_common;
                for (Region r : kAllRegions) {
                    xa[r].push_back(d.get(r));
                    xb[r].push_back(it->second.get(r));
                }
            }
            if (c.n_common >= 2)
                for (Region r : kAllRegions) c.tests[r] = paired_ttest(xa[r], xb[r]);
            out.push_back(std::move(c));
        }
    return out;
}

std::string render_table(const std::vector<std::pair<std::string, EvalReport>>& methods)
{
    std::ostringstream out;
    char buf[64];
    out << "Dice (%), mean ± std\n";
    std::snprintf(buf, sizeof buf, "%-8s", "Region");
    out << buf;
    for (const auto& m : methods) {
        std::snprintf(buf, sizeof buf, " | %-18s", m.first.c_str());
        out << buf;
    }
    out << "\n";
    for (Region r : kAllRegions) {
        std::snprintf(buf, sizeof buf, "%-8s", std::string(RegionSpec::of(r).name).c_str());
        out << buf;
        for (const auto& m : methods) {
            auto s = m.second.aggregate(r);
            std::snprintf(buf, sizeof buf, " | %6.1f ± %-9.1f", 100.0 * s.mean, 100.0 * s.std);
            out << buf;
        }
        out << "\n";
    }
    auto comps = compare_all(methods);
    if (!comps.empty()) {
        out << "\nPaired two-sided t-test p-values\n";
        for (const auto& c : comps) {
            out << c.a << " vs " << c.b << " (n=" << c.n_common << "):";
            if (c.tests.empty()) {
                out << " insufficient common cases\n";
                continue;
            }
            for (Region r : kAllRegions) {
                const auto& t = c.tests.at(r);
                out << " " << RegionSpec::of(r).name << "=";
                if (t.degenerate) {
                    out << "degenerate";
                } else {
                    std::snprintf(buf, sizeof buf, "%.3g", t.p);
                    out << buf;
                }
            }
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace hadnet::metrics
