#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hadnet/dataset.hpp"
#include "hadnet/losses.hpp"
#include "hadnet/metrics.hpp"
#include "hadnet/nets.hpp"

namespace hadnet::train {

// --- optimisation ------------------------------------------------------------

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0;  // decoupled: p -= lr * wd * p before the moment step

    void validate() const;
};

/// Adam with bias correction; weight decay is decoupled from the gradient.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Updates every parameter that carries a gradient, then leaves grads untouched.
    void step(nets::ParamSet& params);

    AdamConfig& config() noexcept { return cfg_; }
    const AdamConfig& config() const noexcept { return cfg_; }
    std::uint64_t steps() const noexcept { return t_; }

    /// Stores `t` in meta[prefix + "t"] and moments as `prefix + m.<name>` arrays.
    void save_into(nets::Archive& a, const std::string& prefix) const;
    void load_from(const nets::Archive& a, const std::string& prefix);

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// --- configs -----------------------------------------------------------------

struct PretrainConfig {
    int epochs = 400;
    int batch_size = 1;
    AdamConfig adam{2e-4, 0.9, 0.999, 1e-8, 1e-5};
    int plateau_patience = 30;
    double lr_halving_factor = 0.5;
    bool augmentation = true;
    double ce_weight_gamma = 0.98;  // CE class-weight decay per epoch

    void validate() const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json& j);
};

struct DistillConfig {
    int epochs = 800;
    int batch_size = 1;
    AdamConfig adam{2e-4, 0.5, 0.999, 1e-8, 0.0};
    double lambda = 0.2;
    double hd_accuracy_gate = 0.8;
    bool hierarchical = true;
    bool augmentation = false;

    void validate() const;
    nlohmann::json to_json() const;
    static DistillConfig from_json(const nlohmann::json& j);
};

// --- state -------------------------------------------------------------------

struct TrainState {
    int epoch = 0;  // completed epochs
    std::uint64_t step = 0;
    Rng rng{0};
    double best_val_score = -1.0;
    int best_epoch = 0;
    double lr_current = 0;
    int stagnation_counter = 0;
};

/// One validation score per epoch; a strict improvement resets the counter,
/// `patience` consecutive non-improvements multiply lr by `factor` and reset it.
TrainState plateau_schedule(TrainState s, double val_score, int patience, double factor);

void save_state_fields(nets::Archive& a, const TrainState& s);
TrainState load_state_fields(const nets::Archive& a);

// --- augmentation ------------------------------------------------------------

struct AugmentRanges {
    double flip_probability = 0.5;  // per spatial axis
    double max_rotation_deg = 10;   // per rotation plane
    double min_scale = 0.9, max_scale = 1.1;
};

struct AugmentDraw {
    std::array<bool, 3> flip{false, false, false};  // storage axes d, h, w
    std::array<double, 3> rotation_deg{0, 0, 0};    // planes (h,w), (d,w), (d,h); rank 2 uses the first
    double scale = 1.0;

    bool is_identity() const;
};

AugmentDraw draw_augment(Rng& rng, const AugmentRanges& r, int rank);

/// Flips, then rotates and scales about the volume centre. Intensities are
/// interpolated linearly, labels and the brain mask by nearest neighbour;
/// samples falling outside read 0.
Case augment(const Case& c, const AugmentDraw& d);
inline Case augment(const Case& c, Rng& rng, const AugmentRanges& r = {})
{
    return augment(c, draw_augment(rng, r, c.volume.extent().rank));
}

// --- inference helpers -------------------------------------------------------

/// Deterministic (dropout off) forward followed by argmax.
SegmentationMap predict(const nets::SegNet& net, const Tensor& input, int rank);
metrics::EvalReport evaluate(const nets::SegNet& net, const std::vector<Case>& cases, const ModalityPlan& plan,
                             Role role);

/// Inverse label frequency over the training labels, clipped to [1, 10].
losses::ClassWeights initial_class_weights(const std::vector<Case>& train, double gamma);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);
/// Visiting order for one epoch, a fixed function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

// --- runs --------------------------------------------------------------------

struct RunOptions {
    std::filesystem::path run_dir;           // empty: keep everything in memory
    bool resume = false;                     // continue from run_dir/state
    int stop_after = -1;                     // end this invocation after N epochs (>= 0)
    nlohmann::json extra_config = nlohmann::json::object();  // merged into config.json
    std::function<void(const nlohmann::json&)> on_epoch;
};

struct PretrainResult {
    nets::SegNet best;
    nets::SegNet last;
    TrainState state;
    losses::ClassWeights initial_weights;
    std::vector<nlohmann::json> log;
    bool finished = false;  // false when stopped early by stop_after
};

/// Stage 1: weighted CE with per-epoch decayed class weights, AdamW, plateau
/// halving on mean validation Dice, best-validation checkpoint selection.
/// The network's in_channels is taken from the role's modality list.
PretrainResult pretrain(nets::NetworkConfig net_cfg, const DataSplit& data, const ModalityPlan& plan, Role role,
                        const PretrainConfig& cfg, std::uint64_t seed, const RunOptions& opt = {});

struct DistillStats {
    double ce = 0, adv = 0, total = 0, hd_loss = 0, hd_accuracy = 0;
    int iterations = 0, hd_updates = 0;
};

/// Everything stage 2 mutates.
struct DistillContext {
    nets::SegNet student;
    nets::Discriminator disc;
    Adam student_opt, disc_opt;
    TrainState state;
    losses::ClassWeights initial_weights;
    int weight_epoch_offset = 0;  // CE decay continues from pretraining
};

/// One pass over `train` in (seed, epoch) order. The teacher runs without
/// dropout or gradients; the discriminator is updated only on batches where
/// its accuracy is at most the gate.
DistillStats distill_epoch(DistillContext& ctx, const nets::SegNet& teacher, const std::vector<Case>& train,
                           const ModalityPlan& plan, const DistillConfig& cfg, std::uint64_t seed);

struct DistillResult {
    nets::SegNet best;
    nets::SegNet last;
    nets::Discriminator disc;
    TrainState state;
    std::vector<nlohmann::json> log;
    bool finished = false;
};

/// Throws CheckpointError unless teacher and student share k, scales, rank and
/// classes and the teacher has exactly one more input channel.
void check_compatible(const nets::NetworkConfig& teacher, const nets::NetworkConfig& student);

/// Stage 2. Selects the student with the best validation ET Dice.
/// `initial_weights` and `weight_epoch_offset` continue the stage-1 CE weight decay.
DistillResult run_distillation(const nets::SegNet& teacher, const nets::SegNet& student, const DataSplit& data,
                               const ModalityPlan& plan, const DistillConfig& cfg, std::uint64_t seed,
                               const losses::ClassWeights& initial_weights, int weight_epoch_offset,
                               const RunOptions& opt = {});

/// Reads `<run_dir>/log.jsonl`.
std::vector<nlohmann::json> read_log(const std::filesystem::path& run_dir);

}  // namespace hadnet::train
