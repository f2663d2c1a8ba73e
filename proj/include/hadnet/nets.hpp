#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hadnet/autograd.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet::nets {

struct NetworkConfig {
    int k = 32;              // base filter count
    int scales = 4;          // encoder/decoder depth
    double p = 0.2;          // dropout probability
    double lrelu_slope = 0.01;
    int in_channels = 3;
    int num_classes = kNumLabels;
    int spatial_rank = 3;

    void validate() const;
    /// Throws ShapeError unless every active spatial dim is divisible by 2^scales.
    void check_input(const std::array<std::size_t, 3>& spatial) const;
    /// Channels of segmentation features at scale n (k * 2^n).
    std::size_t filters(int n) const { return static_cast<std::size_t>(k) << n; }

    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Ordered, named trainable arrays. Names follow `encoder.<n>.conv1.weight`,
/// `decoder.<n>.norm2.gamma`, `disc.block<i>.conv.bias`, ...
class ParamSet {
public:
    Var& add(std::string name, Tensor init);
    Var& get(const std::string& name);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<std::pair<std::string, Var>>& items() noexcept { return items_; }
    const std::vector<std::pair<std::string, Var>>& items() const noexcept { return items_; }

    void zero_grad();
    void set_requires_grad(bool on);
    /// Deep copy with fresh leaves (no shared storage).
    ParamSet clone() const;

private:
    std::vector<std::pair<std::string, Var>> items_;
};

/// Exact trainable scalar count.
std::size_t count_parameters(const ParamSet& params);

struct SegNet {
    NetworkConfig config;
    ParamSet params;
};

/// He-normal conv weights, zero biases, unit/zero instance-norm affines.
SegNet make_segnet(const NetworkConfig& cfg, Rng& init_rng);

struct SegOutput {
    Var logits;                // [classes, D, H, W]
    Var probs;                 // softmax over classes
    std::vector<Var> pyramid;  // level i (0-based) at input / 2^(i+1); deepest is the centre block
};

/// Encoder, centre and decoder blocks are [dropout] + 2 x (conv3 -> instance
/// norm -> leaky ReLU); the first encoder block has no dropout. Dropout is
/// active only when `stochastic` is set, drawing from `rng`.
SegOutput segnet_forward(const SegNet& net, const Var& input, bool stochastic, Rng* rng);

enum class DiscKind { Hierarchical, NonHierarchical };
const char* to_string(DiscKind k);
DiscKind disc_kind_from_string(const std::string& s);

inline constexpr int kDiscBlocks = 4;

struct Discriminator {
    DiscKind kind = DiscKind::Hierarchical;
    NetworkConfig seg_config;  // of the segmentation networks it judges
    int x_channels = 0;        // pre-contrast channels fed to block 1
    ParamSet params;

    /// Pyramid level consumed by discriminator block b (1-based), or -1.
    int level_for_block(int b) const;
};

Discriminator make_discriminator(DiscKind kind, const NetworkConfig& seg_cfg, int x_channels, Rng& init_rng);

/// Hierarchical patch discriminator: block 1 = conv4/s2 + leaky ReLU on
/// concat(x_pre, seg); blocks 2-4 = conv4/s2 + instance norm + leaky ReLU,
/// each fed concat(previous features, matching pyramid level); output conv4/s1.
/// Returns raw scores of extent input / 16.
Var hd_forward(const Discriminator& d, const Var& x_pre, const Var& seg, const std::vector<Var>& pyramid);
/// Same stack without pyramid injection.
Var ad_forward(const Discriminator& d, const Var& x_pre, const Var& seg);
/// Dispatches on d.kind; the pyramid is ignored for the non-hierarchical kind.
Var disc_forward(const Discriminator& d, const Var& x_pre, const Var& seg, const std::vector<Var>& pyramid);

// --- archives and checkpoints ---------------------------------------------

/// Binary container: "HADNETAR", u32 version, u64 + JSON metadata text,
/// u64 array count, then per array u32 name length, name, u32 rank,
/// u64 dims, float64 payload. All little-endian.
struct Archive {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor& array(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void save_archive(const std::filesystem::path& path, const Archive& a);
Archive load_archive(const std::filesystem::path& path);

void save_segnet(const std::filesystem::path& path, const SegNet& net, const nlohmann::json& extra = {});
SegNet load_segnet(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

void save_discriminator(const std::filesystem::path& path, const Discriminator& d);
Discriminator load_discriminator(const std::filesystem::path& path);

/// Copies arrays named `prefix + param name` from the archive into params.
void load_params_into(ParamSet& params, const Archive& a, const std::string& prefix = "");
void append_params(Archive& a, const ParamSet& params, const std::string& prefix = "");

/// Channel stack [C, D, H, W] of a volume's channels in order.
Tensor to_tensor(const MultiModalVolume& v);

}  // namespace hadnet::nets
