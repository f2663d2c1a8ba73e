#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hadnet/nets.hpp"
#include "hadnet/synthdata.hpp"
#include "hadnet/train.hpp"

namespace hadnet {

struct DataSettings {
    std::size_t cases = 60;
    synth::SplitFractions split;
    std::string contrast = synth::kContrastModality;
    std::optional<Extent> crop;  // pad-then-crop target applied when loading
};

struct UncertaintySettings {
    int samples = 100;
    std::vector<double> thresholds{100, 75, 50, 25};
    Region region = Region::ET;
};

/// Everything a command needs, in one JSON document with the sections
/// seed, data, phantom, network, pretrain, distill, uncertainty.
struct RunConfig {
    std::uint64_t seed = 0;
    DataSettings data;
    synth::PhantomConfig phantom;
    nets::NetworkConfig network;
    train::PretrainConfig pretrain;
    train::DistillConfig distill;
    UncertaintySettings uncertainty;

    /// Every field, defaults included.
    nlohmann::json to_json() const;
    /// Missing fields take defaults; unknown sections or keys are ConfigErrors.
    /// A network without `spatial_rank` follows the phantom's rank, and a
    /// phantom without `nesting_radii` gets radii scaled to its extent.
    static RunConfig from_json(const nlohmann::json& j);
    void validate() const;
};

/// Applies `PREFIX<SECTION>__<KEY>=value` and `PREFIX SEED=value` variables
/// (upper case) onto a config document. Values parse as JSON, else as strings.
void apply_env_overrides(nlohmann::json& j, const std::map<std::string, std::string>& env,
                         const std::string& prefix = "HADNET_");
std::map<std::string, std::string> environment();

/// Reads a config file (or a run directory's config.json, via its "resolved"
/// section), applies environment overrides and validates.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::map<std::string, std::string>& env);

std::string to_string(Region r);
Region region_from_string(const std::string& s);

}  // namespace hadnet
