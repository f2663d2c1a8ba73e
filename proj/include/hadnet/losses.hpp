#pragma once

#include <array>
#include <vector>

#include "hadnet/autograd.hpp"
#include "hadnet/volumes.hpp"

namespace hadnet::losses {

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kWeightDecay = 0.98;

/// Per-class cross-entropy weights. Decay shrinks the excess over 1
/// geometrically, so the loss returns to plain cross-entropy.
struct ClassWeights {
    std::vector<double> w;
    double gamma = kWeightDecay;

    static ClassWeights uniform(int num_classes) { return {std::vector<double>(static_cast<std::size_t>(num_classes), 1.0)}; }
};

/// w_e = 1 + (w_0 - 1) * gamma^epoch, per class.
ClassWeights decay_weights(const ClassWeights& w0, int epoch);

/// 1 / class frequency, clipped to [lo, hi]; absent classes get hi.
ClassWeights inverse_frequency_weights(const std::array<std::size_t, kNumLabels>& counts, double lo = 1.0,
                                       double hi = 10.0);

/// Mean over voxels of -w[y] * log(max(p[y], 1e-12)).
double weighted_ce(const Tensor& probs, const SegmentationMap& target, const ClassWeights& weights);
Var weighted_ce(const Var& probs, const SegmentationMap& target, const ClassWeights& weights);

/// mean((x - target)^2)
double mse_to(const Tensor& scores, double target);
Var mse_to(const Var& scores, double target);

struct LossBreakdown {
    double ce = 0, adv = 0, total = 0, lambda = 0;
};

/// CE against the ground truth plus lambda times the squared deviation of the
/// discriminator's scores on the student from 1.
LossBreakdown student_loss(const Tensor& probs, const SegmentationMap& target, const Tensor& scores_on_student,
                           double lambda, const ClassWeights& weights);
Var student_loss(const Var& probs, const SegmentationMap& target, const Var& scores_on_student, double lambda,
                 const ClassWeights& weights, LossBreakdown* breakdown = nullptr);

/// mean(fake^2) + mean((real - 1)^2)
double hd_loss(const Tensor& scores_fake, const Tensor& scores_real);
Var hd_loss(const Var& scores_fake, const Var& scores_real);

/// Fraction of patch scores on the right side of 0.5 (fake < 0.5, real >= 0.5),
/// averaged over both maps.
double hd_accuracy(const Tensor& scores_fake, const Tensor& scores_real);

}  // namespace hadnet::losses
