#include "hadnet/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "hadnet/errors.hpp"

namespace hadnet::synth {

namespace {

using Rng = std::mt19937_64;

constexpr double kBrainSemiAxis = 0.46;  // fraction of the extent along each axis
constexpr int kPlacementAttempts = 200;

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

bool axis_active(const Extent& e, int a) { return a >= 3 - e.rank; }

struct ChannelMeans {
    double healthy, edema, necrotic, enhancing;
};

ChannelMeans pre_contrast_means(int j)
{
    switch (j) {
    case 0: return {1.0, 0.75, 0.55, 0.55};
    case 1: return {1.0, 1.7, 1.35, 1.35};
    case 2: return {1.0, 1.9, 1.25, 1.25};
    default: {
        double core = 0.7 + 0.05 * j;
        return {1.0, 1.2 + 0.1 * j, core, core};
    }
    }
}

// Normalized squared distance of voxel (z,y,x) from an ellipsoid with the
// given centre and semi-axes r * aspect, over the active axes only.
double ellipsoid_q(const Extent& e, const std::array<double, 3>& c, const std::array<double, 3>& aspect, double r,
                   std::size_t z, std::size_t y, std::size_t x)
{
    const std::array<double, 3> p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
    double q = 0;
    for (int a = 0; a < 3; ++a) {
        if (!axis_active(e, a)) continue;
        double d = (p[a] - c[a]) / (r * aspect[a]);
        q += d * d;
    }
    return q;
}

}  // namespace

std::array<double, 3> PhantomConfig::default_radii(const Extent& e)
{
    std::size_t m = SIZE_MAX;
    for (int a = 0; a < 3; ++a)
        if (axis_active(e, a)) m = std::min(m, e.dims[a]);
    const double edema = 0.2 * static_cast<double>(m);
    const double core = 0.68 * edema;
    return {edema, core, core * std::pow(0.5, 1.0 / e.rank)};
}

void PhantomConfig::validate() const
{
    if (extent.rank != 2 && extent.rank != 3) throw ConfigError("phantom rank must be 2 or 3");
    if (extent.rank == 2 && extent.dims[0] != 1) throw ConfigError("2D phantoms must have depth 1");
    if (num_modalities_pre < 2) throw ConfigError("need at least 2 pre-contrast modalities");
    if (noise_std < 0) throw ConfigError("noise_std must be nonnegative");
    if (lesion_count_range.first < 0 || lesion_count_range.second < lesion_count_range.first)
        throw ConfigError("invalid lesion_count_range");
    if (!(nesting_radii[0] > nesting_radii[1] && nesting_radii[1] > nesting_radii[2] && nesting_radii[2] > 0))
        throw ConfigError("nesting_radii must be strictly decreasing and positive");
    if (!(contrast_gap > 3.0 * noise_std)) throw ConfigError("contrast_gap must exceed 3 * noise_std");
    if (aspect_jitter < 0 || aspect_jitter >= 0.5) throw ConfigError("aspect_jitter must lie in [0, 0.5)");
    if (lesion_count_range.second > 0)
        for (int a = 0; a < 3; ++a) {
            if (!axis_active(extent, a)) continue;
            const double need = 2.0 * nesting_radii[0] * (1.0 + aspect_jitter) + 1.0;
            if (need > 2.0 * kBrainSemiAxis * static_cast<double>(extent.dims[a]))
                throw ConfigError("extent " + extent.str() + " too small for an edema ellipsoid of radius " +
                                  std::to_string(nesting_radii[0]));
        }
}

std::vector<std::string> pre_contrast_names(int n)
{
    static const char* base[] = {"t1", "t2", "flair"};
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back(i < 3 ? base[i] : "pre" + std::to_string(i));
    return names;
}

Phantom generate_phantom(const PhantomConfig& cfg)
{
    cfg.validate();
    Rng rng(cfg.seed);
    const Extent& e = cfg.extent;
    const auto& [r_edema, r_core, r_enh] = cfg.nesting_radii;

    std::array<double, 3> brain_c{}, brain_a{};
    for (int a = 0; a < 3; ++a) {
        brain_c[a] = (static_cast<double>(e.dims[a]) - 1.0) / 2.0;
        brain_a[a] = kBrainSemiAxis * static_cast<double>(e.dims[a]);
    }
    Mask brain(e, 0);
    for (std::size_t z = 0; z < e.dims[0]; ++z)
        for (std::size_t y = 0; y < e.dims[1]; ++y)
            for (std::size_t x = 0; x < e.dims[2]; ++x)
                brain(z, y, x) = ellipsoid_q(e, brain_c, brain_a, 1.0, z, y, x) <= 1.0 ? 1 : 0;

    Phantom ph;
    ph.labels.labels = Grid<std::uint8_t>(e, Background);
    auto& lab = ph.labels.labels;

    const int n_lesions =
        std::uniform_int_distribution<int>(cfg.lesion_count_range.first, cfg.lesion_count_range.second)(rng);
    for (int l = 0; l < n_lesions; ++l) {
        bool placed = false;
        for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
            Lesion les;
            for (int a = 0; a < 3; ++a) {
                if (!axis_active(e, a)) continue;
                les.aspect[a] = uniform(rng, 1.0 - cfg.aspect_jitter, 1.0 + cfg.aspect_jitter);
                const double reach = r_edema * les.aspect[a];
                les.center[a] = uniform(rng, reach, static_cast<double>(e.dims[a]) - 1.0 - reach);
            }
            // Enhancing centre: uniform in a ball (scaled coordinates) that keeps
            // the enhancing ellipsoid inside the core ellipsoid.
            std::array<double, 3> dir{};
            double norm = 0;
            for (int a = 0; a < 3; ++a)
                if (axis_active(e, a)) {
                    dir[a] = std::normal_distribution<double>(0.0, 1.0)(rng);
                    norm += dir[a] * dir[a];
                }
            norm = std::sqrt(norm);
            const double rad = 0.95 * (r_core - r_enh) * std::pow(uniform(rng, 0.0, 1.0), 1.0 / e.rank);
            for (int a = 0; a < 3; ++a)
                les.enhancing_offset[a] = norm > 0 ? dir[a] / norm * rad * les.aspect[a] : 0.0;

            bool ok = true;
            for (std::size_t z = 0; z < e.dims[0] && ok; ++z)
                for (std::size_t y = 0; y < e.dims[1] && ok; ++y)
                    for (std::size_t x = 0; x < e.dims[2] && ok; ++x)
                        if (ellipsoid_q(e, les.center, les.aspect, r_edema, z, y, x) <= 1.0 &&
                            (!brain(z, y, x) || lab(z, y, x) != Background))
                            ok = false;
            if (!ok) continue;

            std::array<double, 3> enh_c{};
            for (int a = 0; a < 3; ++a) enh_c[a] = les.center[a] + les.enhancing_offset[a];
            for (std::size_t z = 0; z < e.dims[0]; ++z)
                for (std::size_t y = 0; y < e.dims[1]; ++y)
                    for (std::size_t x = 0; x < e.dims[2]; ++x) {
                        if (ellipsoid_q(e, enh_c, les.aspect, r_enh, z, y, x) <= 1.0) lab(z, y, x) = Enhancing;
                        else if (ellipsoid_q(e, les.center, les.aspect, r_core, z, y, x) <= 1.0) lab(z, y, x) = NecroticCore;
                        else if (ellipsoid_q(e, les.center, les.aspect, r_edema, z, y, x) <= 1.0) lab(z, y, x) = Edema;
                    }
            ph.lesions.push_back(les);
            placed = true;
        }
        if (!placed && l == 0)
            throw ConfigError("could not place a lesion inside the brain of extent " + e.str());
        if (!placed) break;  // crowded brain: keep the lesions placed so far
    }

    std::normal_distribution<double> noise(0.0, 1.0);
    auto make_channel = [&](const ChannelMeans& m) {
        const double gain = uniform(rng, 0.9, 1.1);
        Image img(e, 0.0f);
        for (std::size_t i = 0; i < img.size(); ++i) {
            if (!brain.data[i]) continue;
            double mean = m.healthy;
            switch (lab.data[i]) {
            case Edema: mean = m.edema; break;
            case NecroticCore: mean = m.necrotic; break;
            case Enhancing: mean = m.enhancing; break;
            default: break;
            }
            float v = static_cast<float>(gain * (mean + cfg.noise_std * noise(rng)));
            img.data[i] = v == 0.0f ? 1e-6f : v;  // zero is reserved for outside the brain
        }
        return img;
    };

    auto names = pre_contrast_names(cfg.num_modalities_pre);
    for (int j = 0; j < cfg.num_modalities_pre; ++j) ph.volume.add(names[static_cast<std::size_t>(j)], make_channel(pre_contrast_means(j)));
    ph.volume.add(kContrastModality, make_channel({1.0, 0.9, 0.6, 0.6 + cfg.contrast_gap}));
    ph.volume.brain_mask = brain;
    return ph;
}

std::uint64_t case_seed(std::uint64_t master_seed, std::uint64_t case_index)
{
    return splitmix64(master_seed ^ splitmix64(case_index + 0x632be59bd9b4e019ULL));
}

std::vector<std::string> Manifest::cases_in(const std::string& split) const
{
    std::vector<std::string> out;
    for (const auto& [id, s] : case_split)
        if (s == split) out.push_back(id);
    return out;
}

void Manifest::save(const std::filesystem::path& path) const
{
    nlohmann::ordered_json j;
    j["master_seed"] = master_seed;
    j["cases"] = nlohmann::ordered_json::object();
    for (const auto& [id, s] : case_split) j["cases"][id] = s;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write error in " + path.string());
}

Manifest Manifest::load(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("missing manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
        Manifest m;
        m.master_seed = j.at("master_seed").get<std::uint64_t>();
        for (const auto& [id, s] : j.at("cases").items()) m.case_split[id] = s.get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& ex) {
        throw DataError("malformed manifest " + path.string() + ": " + ex.what());
    }
}

std::array<std::size_t, 3> split_counts(std::size_t n_cases, const SplitFractions& split)
{
    if (split.train < 0 || split.val < 0 || split.test < 0 ||
        std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be nonnegative and sum to 1");
    const auto n = static_cast<double>(n_cases);
    std::size_t tr = static_cast<std::size_t>(std::llround(n * split.train));
    std::size_t va = static_cast<std::size_t>(std::llround(n * split.val));
    if (tr + va > n_cases) throw ConfigError("split rounding overflows the case count");
    std::size_t te = n_cases - tr - va;
    if (tr == 0 || va == 0 || te == 0)
        throw ConfigError("every split needs at least one case (got " + std::to_string(tr) + "/" + std::to_string(va) +
                          "/" + std::to_string(te) + ")");
    return {tr, va, te};
}

Manifest generate_dataset(const PhantomConfig& cfg, std::size_t n_cases, const SplitFractions& split,
                          const std::filesystem::path& out_dir, VolumeFormat fmt)
{
    cfg.validate();
    const auto counts = split_counts(n_cases, split);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    Manifest m;
    m.master_seed = cfg.seed;
    for (std::size_t i = 0; i < n_cases; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "case_%03zu", i);
        PhantomConfig c = cfg;
        c.seed = case_seed(cfg.seed, i);
        Phantom ph = generate_phantom(c);
        save_case(out_dir / id, ph.volume, &ph.labels, fmt);
        m.case_split[id] = i < counts[0] ? "train" : (i < counts[0] + counts[1] ? "val" : "test");
    }
    m.save(out_dir / "manifest.json");
    return m;
}

std::array<double, kNumLabels> expected_lesion_voxels(const PhantomConfig& cfg)
{
    auto vol = [&](double r) {
        return cfg.extent.rank == 3 ? 4.0 / 3.0 * std::numbers::pi * r * r * r : std::numbers::pi * r * r;
    };
    const auto& r = cfg.nesting_radii;
    std::array<double, kNumLabels> out{};
    out[Enhancing] = vol(r[2]);
    out[NecroticCore] = vol(r[1]) - vol(r[2]);
    out[Edema] = vol(r[0]) - vol(r[1]);
    return out;
}

}  // namespace hadnet::synth
