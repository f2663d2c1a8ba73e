#include "hadnet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "hadnet/errors.hpp"

namespace hadnet::losses {

ClassWeights decay_weights(const ClassWeights& w0, int epoch)
{
    if (epoch < 0) throw std::invalid_argument("epoch must be nonnegative");
    ClassWeights out = w0;
    const double f = std::pow(w0.gamma, epoch);
    for (auto& v : out.w) v = 1.0 + (v - 1.0) * f;
    return out;
}

ClassWeights inverse_frequency_weights(const std::array<std::size_t, kNumLabels>& counts, double lo, double hi)
{
    double total = 0;
    for (auto c : counts) total += static_cast<double>(c);
    ClassWeights cw;
    for (auto c : counts)
        cw.w.push_back(c == 0 || total == 0 ? hi : std::clamp(total / static_cast<double>(c), lo, hi));
    return cw;
}

namespace {

void check_ce_shapes(const Tensor& probs, const SegmentationMap& target, const ClassWeights& weights)
{
    const auto& e = target.extent();
    if (probs.rank() != 4 || probs.dim(1) != e.dims[0] || probs.dim(2) != e.dims[1] || probs.dim(3) != e.dims[2])
        throw ShapeError("probabilities " + shape_str(probs.shape()) + " do not match target extent " + e.str());
    if (weights.w.size() != probs.dim(0))
        throw ShapeError("class weight count " + std::to_string(weights.w.size()) + " differs from class count " +
                         std::to_string(probs.dim(0)));
    for (auto l : target.labels.data)
        if (l >= probs.dim(0)) throw DataError("target label " + std::to_string(l) + " outside class range");
}

void check_same(const Tensor& a, const Tensor& b)
{
    if (!a.same_shape(b))
        throw ShapeError("score maps differ in shape: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

double weighted_ce(const Tensor& probs, const SegmentationMap& target, const ClassWeights& weights)
{
    check_ce_shapes(probs, target, weights);
    const std::size_t n = target.labels.size();
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = target.labels.data[i];
        s -= weights.w[y] * std::log(std::max(probs[y * n + i], kLogClamp));
    }
    return s / static_cast<double>(n);
}

Var weighted_ce(const Var& probs, const SegmentationMap& target, const ClassWeights& weights)
{
    const double v = weighted_ce(probs.value(), target, weights);
    return make_op(Tensor({1}, v), {probs}, [labels = target.labels.data, w = weights.w](Node& n) {
        const Tensor& P = n.inputs[0]->value;
        Tensor& G = n.inputs[0]->grad_buffer();
        const std::size_t N = labels.size();
        const double scale = n.grad[0] / static_cast<double>(N);
        for (std::size_t i = 0; i < N; ++i) {
            const std::size_t idx = labels[i] * N + i;
            if (P[idx] > kLogClamp) G[idx] -= scale * w[labels[i]] / P[idx];
        }
    });
}

double mse_to(const Tensor& scores, double target)
{
    if (scores.empty()) throw ShapeError("empty score map");
    double s = 0;
    for (auto v : scores.values()) s += (v - target) * (v - target);
    return s / static_cast<double>(scores.size());
}

Var mse_to(const Var& scores, double target)
{
    return make_op(Tensor({1}, mse_to(scores.value(), target)), {scores}, [target](Node& n) {
        const Tensor& X = n.inputs[0]->value;
        Tensor& G = n.inputs[0]->grad_buffer();
        const double k = 2.0 * n.grad[0] / static_cast<double>(X.size());
        for (std::size_t i = 0; i < X.size(); ++i) G[i] += k * (X[i] - target);
    });
}

LossBreakdown student_loss(const Tensor& probs, const SegmentationMap& target, const Tensor& scores_on_student,
                           double lambda, const ClassWeights& weights)
{
    LossBreakdown b;
    b.lambda = lambda;
    b.ce = weighted_ce(probs, target, weights);
    b.adv = mse_to(scores_on_student, 1.0);
    b.total = b.ce + lambda * b.adv;
    return b;
}

Var student_loss(const Var& probs, const SegmentationMap& target, const Var& scores_on_student, double lambda,
                 const ClassWeights& weights, LossBreakdown* breakdown)
{
    if (lambda < 0) throw ConfigError("lambda must be nonnegative");
    Var ce = weighted_ce(probs, target, weights);
    Var adv = mse_to(scores_on_student, 1.0);
    Var total = ops::add(ce, ops::scale(adv, lambda));
    if (breakdown) {
        breakdown->lambda = lambda;
        breakdown->ce = ce.value()[0];
        breakdown->adv = adv.value()[0];
        breakdown->total = breakdown->ce + lambda * breakdown->adv;
    }
    return total;
}

double hd_loss(const Tensor& scores_fake, const Tensor& scores_real)
{
    check_same(scores_fake, scores_real);
    return mse_to(scores_fake, 0.0) + mse_to(scores_real, 1.0);
}

Var hd_loss(const Var& scores_fake, const Var& scores_real)
{
    check_same(scores_fake.value(), scores_real.value());
    return ops::add(mse_to(scores_fake, 0.0), mse_to(scores_real, 1.0));
}

double hd_accuracy(const Tensor& scores_fake, const Tensor& scores_real)
{
    check_same(scores_fake, scores_real);
    std::size_t correct = 0;
    for (auto v : scores_fake.values()) correct += v < 0.5 ? 1 : 0;
    for (auto v : scores_real.values()) correct += v >= 0.5 ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(scores_fake.size() + scores_real.size());
}

}  // namespace hadnet::losses
