#include "hadnet/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "hadnet/errors.hpp"

extern char** environ;

namespace hadnet {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Region r) { return std::string(RegionSpec::of(r).name); }

Region region_from_string(const std::string& s)
{
    for (Region r : kAllRegions)
        if (s == RegionSpec::of(r).name) return r;
    throw ConfigError("region must be WT, TC or ET, got '" + s + "'");
}

namespace {

json extent_json(const Extent& e)
{
    if (e.rank == 2) return json::array({e.dims[1], e.dims[2]});
    return json::array({e.dims[0], e.dims[1], e.dims[2]});
}

Extent extent_from(const json& j)
{
    const auto v = j.get<std::vector<std::size_t>>();
    if (v.size() == 2) return Extent::make2d(v[0], v[1]);
    if (v.size() == 3) return Extent::make3d(v[0], v[1], v[2]);
    throw ConfigError("extent must list 2 or 3 sizes");
}

json phantom_json(const synth::PhantomConfig& p)
{
    return {{"extent", extent_json(p.extent)},
            {"num_modalities_pre", p.num_modalities_pre},
            {"noise_std", p.noise_std},
            {"lesion_count_range", {p.lesion_count_range.first, p.lesion_count_range.second}},
            {"nesting_radii", p.nesting_radii},
            {"contrast_gap", p.contrast_gap},
            {"aspect_jitter", p.aspect_jitter}};
}

synth::PhantomConfig phantom_from(const json& j)
{
    synth::PhantomConfig p;
    if (j.contains("extent")) p.extent = extent_from(j.at("extent"));
    p.nesting_radii = synth::PhantomConfig::default_radii(p.extent);
    p.num_modalities_pre = j.value("num_modalities_pre", p.num_modalities_pre);
    p.noise_std = j.value("noise_std", p.noise_std);
    if (j.contains("lesion_count_range")) {
        const auto r = j.at("lesion_count_range").get<std::vector<int>>();
        if (r.size() != 2) throw ConfigError("lesion_count_range needs two values");
        p.lesion_count_range = {r[0], r[1]};
    }
    if (j.contains("nesting_radii")) p.nesting_radii = j.at("nesting_radii").get<std::array<double, 3>>();
    p.contrast_gap = j.value("contrast_gap", p.contrast_gap);
    p.aspect_jitter = j.value("aspect_jitter", p.aspect_jitter);
    return p;
}

json data_json(const DataSettings& d)
{
    return {{"cases", d.cases},
            {"split", {{"train", d.split.train}, {"val", d.split.val}, {"test", d.split.test}}},
            {"contrast", d.contrast},
            {"crop", d.crop ? extent_json(*d.crop) : json(nullptr)}};
}

DataSettings data_from(const json& j)
{
    DataSettings d;
    d.cases = j.value("cases", d.cases);
    if (j.contains("split")) {
        const json& s = j.at("split");
        for (const auto& [k, _] : s.items())
            if (k != "train" && k != "val" && k != "test") throw ConfigError("unknown split key data.split." + k);
        d.split.train = s.value("train", d.split.train);
        d.split.val = s.value("val", d.split.val);
        d.split.test = s.value("test", d.split.test);
    }
    d.contrast = j.value("contrast", d.contrast);
    if (j.contains("crop") && !j.at("crop").is_null()) d.crop = extent_from(j.at("crop"));
    return d;
}

json uncertainty_json(const UncertaintySettings& u)
{
    return {{"samples", u.samples}, {"thresholds", u.thresholds}, {"region", to_string(u.region)}};
}

UncertaintySettings uncertainty_from(const json& j)
{
    UncertaintySettings u;
    u.samples = j.value("samples", u.samples);
    if (j.contains("thresholds")) u.thresholds = j.at("thresholds").get<std::vector<double>>();
    if (j.contains("region")) u.region = region_from_string(j.at("region").get<std::string>());
    return u;
}

// Keys allowed in a section are exactly those the defaults serialise.
void check_keys(const json& given, const json& reference, const std::string& where)
{
    if (!given.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, _] : given.items())
        if (!reference.contains(k)) throw ConfigError("unknown config key " + where + "." + k);
}

}  // namespace

json RunConfig::to_json() const
{
    return {{"seed", seed},
            {"data", data_json(data)},
            {"phantom", phantom_json(phantom)},
            {"network", network.to_json()},
            {"pretrain", pretrain.to_json()},
            {"distill", distill.to_json()},
            {"uncertainty", uncertainty_json(uncertainty)}};
}

RunConfig RunConfig::from_json(const json& j)
{
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const json ref = RunConfig{}.to_json();
    check_keys(j, ref, "config");
    for (const char* s : {"data", "phantom", "network", "pretrain", "distill", "uncertainty"})
        if (j.contains(s)) check_keys(j.at(s), ref.at(s), s);
    try {
        RunConfig c;
        const json empty = json::object();
        auto sec = [&](const char* s) -> const json& { return j.contains(s) ? j.at(s) : empty; };
        c.seed = j.value("seed", c.seed);
        c.data = data_from(sec("data"));
        c.phantom = phantom_from(sec("phantom"));
        c.network = nets::NetworkConfig::from_json(sec("network"));
        if (!sec("network").contains("spatial_rank")) c.network.spatial_rank = c.phantom.extent.rank;
        if (!sec("network").contains("in_channels")) c.network.in_channels = c.phantom.num_modalities_pre;
        c.pretrain = train::PretrainConfig::from_json(sec("pretrain"));
        c.distill = train::DistillConfig::from_json(sec("distill"));
        c.uncertainty = uncertainty_from(sec("uncertainty"));
        c.phantom.seed = c.seed;
        return c;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed config: ") + ex.what());
    }
}

void RunConfig::validate() const
{
    phantom.validate();
    network.validate();
    pretrain.validate();
    distill.validate();
    synth::split_counts(std::max<std::size_t>(data.cases, 1), data.split);
    if (data.cases < 3) throw ConfigError("need at least 3 cases (one per split)");
    if (uncertainty.samples < 2) throw ConfigError("uncertainty needs at least 2 samples");
    for (double t : uncertainty.thresholds)
        if (!(t >= 0 && t <= 100)) throw ConfigError("uncertainty thresholds must lie in [0, 100]");
}

void apply_env_overrides(json& j, const std::map<std::string, std::string>& env, const std::string& prefix)
{
    auto lower = [](std::string s) {
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
        return s;
    };
    for (const auto& [name, raw] : env) {
        if (!name.starts_with(prefix)) continue;
        const std::string rest = lower(name.substr(prefix.size()));
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        const auto sep = rest.find("__");
        if (sep == std::string::npos) {
            j[rest] = value;
        } else {
            j[rest.substr(0, sep)][rest.substr(sep + 2)] = value;
        }
    }
}

std::map<std::string, std::string> environment()
{
    std::map<std::string, std::string> out;
    for (char** e = environ; e && *e; ++e) {
        const std::string s(*e);
        const auto eq = s.find('=');
        if (eq != std::string::npos) out[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return out;
}

RunConfig load_run_config(const std::optional<fs::path>& path, const std::map<std::string, std::string>& env)
{
    json j = json::object();
    if (path) {
        fs::path p = *path;
        if (fs::is_directory(p)) p /= "config.json";
        std::ifstream in(p);
        if (!in) throw ConfigError("cannot read config " + p.string());
        try {
            in >> j;
        } catch (const json::exception& ex) {
            throw ConfigError("config " + p.string() + " is not valid JSON: " + ex.what());
        }
        if (j.is_object() && j.contains("resolved")) j = j.at("resolved");
    }
    apply_env_overrides(j, env);
    RunConfig c = RunConfig::from_json(j);
    c.validate();
    return c;
}

}  // namespace hadnet
