#include "hadnet/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <sstream>

#include "hadnet/errors.hpp"
#include "hadnet/synthdata.hpp"

namespace hadnet::uncertainty {

std::vector<Tensor> mc_sample(const nets::SegNet& net, const Tensor& x_pre, int n, std::uint64_t seed)
{
    if (!(net.config.p > 0)) throw ConfigError("MC dropout needs a network trained with dropout p > 0");
    if (n < 1) throw ConfigError("MC sample count must be >= 1");
    NoGradGuard guard;
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(synth::case_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(nets::segnet_forward(net, Var(x_pre), true, &rng).probs.value());
    }
    return out;
}

double normalized_binary_entropy(double p)
{
    p = std::clamp(p, 0.0, 1.0);
    double h = 0;
    if (p > 0) h -= p * std::log(p);
    if (p < 1) h -= (1 - p) * std::log(1 - p);
    return std::clamp(100.0 * h / std::numbers::ln2, 0.0, 100.0);
}

UncertaintyMap entropy_uncertainty(const std::vector<Tensor>& samples, const RegionSpec& region, int rank)
{
    if (samples.size() < 2) throw ConfigError("entropy needs at least two samples");
    const Tensor& s0 = samples.front();
    if (s0.rank() != 4) throw ShapeError("samples must be [C,D,H,W] probabilities");
    for (const auto& s : samples)
        if (!s.same_shape(s0)) throw ShapeError("MC samples differ in shape");
    const std::size_t C = s0.dim(0), N = s0.spatial_size();
    if (C > static_cast<std::size_t>(kNumLabels)) throw ShapeError("more classes than labels");
    if (rank == 0) rank = s0.dim(1) == 1 ? 2 : 3;

    UncertaintyMap u;
    u.region = region.region;
    u.values = Grid<double>(Extent{rank, {s0.dim(1), s0.dim(2), s0.dim(3)}}, 0.0);
    std::vector<double> mass(samples.size());
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t k = 0; k < samples.size(); ++k) {
            double m = 0;
            for (std::size_t c = 0; c < C; ++c)
                if (region.label_set[c]) m += samples[k][c * N + i];
            mass[k] = m;
        }
        std::sort(mass.begin(), mass.end());
        double sum = 0;
        for (double m : mass) sum += m;
        u.values.data[i] = normalized_binary_entropy(sum / static_cast<double>(samples.size()));
    }
    return u;
}

FilteredResult filter_at_threshold(const Mask& pred, const UncertaintyMap& unc, const Mask& gt, double T)
{
    if (!(T >= 0 && T <= 100)) throw ConfigError("threshold must lie in [0, 100]");
    if (!(pred.extent == gt.extent) || !(pred.extent == unc.values.extent))
        throw ShapeError("prediction, uncertainty and ground truth differ in extent");
    FilteredResult r;
    r.threshold = T;
    r.kept = Mask(pred.extent, 0);
    std::size_t kept = 0, a = 0, b = 0, both = 0, pos = 0, neg = 0, ftp = 0, ftn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
        pos += g;
        neg += !g;
        if (unc.values.data[i] <= T) {
            r.kept.data[i] = 1;
            ++kept;
            a += p;
            b += g;
            both += p && g;
        } else {
            ftp += p && g;
            ftn += !p && !g;
        }
    }
    if (kept == 0) {
        r.degenerate = true;
        r.dice_filtered = 1.0;
    } else {
        r.dice_filtered = a + b == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
    }
    r.ftp_ratio = pos == 0 ? 0.0 : static_cast<double>(ftp) / static_cast<double>(pos);
    r.ftn_ratio = neg == 0 ? 0.0 : static_cast<double>(ftn) / static_cast<double>(neg);
    return r;
}

double uncertainty_score(const std::vector<FilteredResult>& results)
{
    double dice = 0, ftp = 0, ftn = 0;
    for (double T : kDefaultThresholds) {
        auto it = std::find_if(results.begin(), results.end(), [T](const FilteredResult& r) { return r.threshold == T; });
        if (it == results.end()) throw ConfigError("uncertainty score needs threshold " + std::to_string(static_cast<int>(T)));
        dice += it->dice_filtered;
        ftp += it->ftp_ratio;
        ftn += it->ftn_ratio;
    }
    const double n = static_cast<double>(kDefaultThresholds.size());
    return (dice / n + (1.0 - ftp / n) + (1.0 - ftn / n)) / 3.0;
}

Mask to_u8(const UncertaintyMap& u)
{
    Mask m(u.values.extent, 0);
    for (std::size_t i = 0; i < m.size(); ++i)
        m.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(u.values.data[i], 0.0, 100.0)));
    return m;
}

nlohmann::json CaseUncertainty::to_json() const
{
    nlohmann::json th = nlohmann::json::array();
    for (const auto& r : per_threshold)
        th.push_back({{"T", r.threshold},
                      {"dice", r.dice_filtered},
                      {"ftp_ratio", r.ftp_ratio},
                      {"ftn_ratio", r.ftn_ratio},
                      {"kept", count(r.kept)},
                      {"degenerate", r.degenerate}});
    return {{"case", case_id}, {"region", std::string(RegionSpec::of(region).name)}, {"thresholds", th}, {"score", score}};
}

std::string report_jsonl(const std::vector<CaseUncertainty>& cases)
{
    std::string out;
    double sum = 0;
    for (const auto& c : cases) {
        out += c.to_json().dump() + "\n";
        sum += c.score;
    }
    nlohmann::json agg = {{"aggregate", true},
                          {"n", cases.size()},
                          {"mean_score", cases.empty() ? 0.0 : sum / static_cast<double>(cases.size())}};
    out += agg.dump() + "\n";
    return out;
}

std::string render_report(const std::vector<CaseUncertainty>& cases)
{
    std::ostringstream out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-16s %-4s %6s %8s %8s %8s %8s\n", "case", "reg", "T", "dice", "ftp", "ftn", "score");
    out << buf;
    double sum = 0;
    for (const auto& c : cases) {
        const std::string reg(RegionSpec::of(c.region).name);
        for (const auto& r : c.per_threshold) {
            std::snprintf(buf, sizeof buf, "%-16s %-4s %6.0f %8.4f %8.4f %8.4f %8.4f%s\n", c.case_id.c_str(), reg.c_str(),
                          r.threshold, r.dice_filtered, r.ftp_ratio, r.ftn_ratio, c.score, r.degenerate ? " *" : "");
            out << buf;
        }
        sum += c.score;
    }
    if (!cases.empty()) {
        std::snprintf(buf, sizeof buf, "mean score over %zu cases: %.4f\n", cases.size(), sum / static_cast<double>(cases.size()));
        out << buf;
    }
    return out.str();
}

}  // namespace hadnet::uncertainty
