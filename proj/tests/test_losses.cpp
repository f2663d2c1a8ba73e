#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "hadnet/losses.hpp"
#include "test_util.hpp"

using namespace hadnet;
using namespace hadnet::losses;

namespace {

Tensor uniform_probs(const Extent& e)
{
    return Tensor({4, e.dims[0], e.dims[1], e.dims[2]}, 0.25);
}

// Plain loop reference for the weighted cross-entropy.
double ce_oracle(const Tensor& p, const SegmentationMap& y, const std::vector<double>& w)
{
    const std::size_t N = y.labels.size();
    double s = 0;
    for (std::size_t i = 0; i < N; ++i) {
        const std::size_t l = y.labels.data[i];
        s -= w[l] * std::log(std::max(p[l * N + i], 1e-12));
    }
    return s / static_cast<double>(N);
}

}  // namespace

TEST(HdLoss, ClosedForms)
{
    const Tensor half({1, 1, 2, 2}, 0.5);
    EXPECT_NEAR(hd_loss(half, half), 0.5, 1e-7);
    EXPECT_NEAR(hd_loss(Tensor({1, 1, 2, 2}, 0.0), Tensor({1, 1, 2, 2}, 1.0)), 0.0, 1e-15);
    EXPECT_NEAR(hd_loss(Tensor({1, 1, 2, 2}, 1.0), Tensor({1, 1, 2, 2}, 0.0)), 2.0, 1e-15);
    const Tensor f({1, 1, 1, 2}, std::vector<double>{0.2, -0.4});
    const Tensor r({1, 1, 1, 2}, std::vector<double>{1.5, 0.0});
    EXPECT_NEAR(hd_loss(f, r), (0.04 + 0.16) / 2 + (0.25 + 1.0) / 2, 1e-15);
}

TEST(HdLoss, VarMatchesTensorOverload)
{
    std::mt19937_64 rng(1);
    const Tensor f = testutil::random_tensor({1, 2, 2, 2}, rng), r = testutil::random_tensor({1, 2, 2, 2}, rng);
    EXPECT_DOUBLE_EQ(hd_loss(Var(f), Var(r)).value()[0], hd_loss(f, r));
}

TEST(HdAccuracy, ThresholdsAtOneHalf)
{
    const Tensor f({1, 1, 1, 4}, std::vector<double>{0.1, 0.49, 0.5, 0.9});
    const Tensor r({1, 1, 1, 4}, std::vector<double>{0.5, 0.7, 0.2, 0.9});
    EXPECT_DOUBLE_EQ(hd_accuracy(f, r), (0.5 + 0.75) / 2);
    EXPECT_ANY_THROW(hd_accuracy(f, Tensor({1, 1, 1, 2})));
    EXPECT_DOUBLE_EQ(hd_accuracy(Tensor({1, 1, 1, 3}, 0.0), Tensor({1, 1, 1, 3}, 1.0)), 1.0);
}

TEST(StudentLoss, LambdaZeroIsPureCrossEntropy)
{
    std::mt19937_64 rng(2);
    const Extent e = Extent::make3d(2, 3, 2);
    const Tensor p = testutil::random_probs(4, e, rng);
    const SegmentationMap y = testutil::random_seg(e, rng);
    const Tensor scores = testutil::random_tensor({1, 1, 1, 1}, rng);
    const auto w = ClassWeights{{1.0, 2.0, 3.0, 4.0}};
    const auto bd = student_loss(p, y, scores, 0.0, w);
    EXPECT_NEAR(bd.total, weighted_ce(p, y, w), 1e-7);
    EXPECT_EQ(bd.ce, bd.total);
}

TEST(StudentLoss, TotalIsCePlusLambdaTimesAdversarial)
{
    std::mt19937_64 rng(3);
    const Extent e = Extent::make2d(4, 4);
    for (double lambda : {0.1, 0.2, 1.0, 7.5}) {
        const Tensor p = testutil::random_probs(4, e, rng);
        const SegmentationMap y = testutil::random_seg(e, rng);
        const Tensor s = testutil::random_tensor({1, 1, 1, 3}, rng, -1, 2);
        const auto w = ClassWeights::uniform(4);
        const auto bd = student_loss(p, y, s, lambda, w);
        double adv = 0;
        for (std::size_t i = 0; i < 3; ++i) adv += (s[i] - 1) * (s[i] - 1) / 3;
        EXPECT_NEAR(bd.adv, adv, 1e-12);
        EXPECT_NEAR(bd.ce, ce_oracle(p, y, w.w), 1e-12);
        EXPECT_NEAR(bd.total, bd.ce + lambda * bd.adv, 1e-12);
        LossBreakdown vb;
        const Var v = student_loss(Var(p), y, Var(s), lambda, w, &vb);
        EXPECT_NEAR(v.value()[0], bd.total, 1e-12);
        EXPECT_NEAR(vb.adv, bd.adv, 1e-12);
    }
}

TEST(CrossEntropy, UniformPredictionGivesLogFour)
{
    std::mt19937_64 rng(4);
    const Extent e = Extent::make3d(3, 3, 3);
    EXPECT_NEAR(weighted_ce(uniform_probs(e), testutil::random_seg(e, rng), ClassWeights::uniform(4)),
                std::log(4.0), 1e-6);
}

TEST(CrossEntropy, MatchesLoopOracleAndClampsZeros)
{
    std::mt19937_64 rng(5);
    const Extent e = Extent::make2d(5, 3);
    Tensor p = testutil::random_probs(4, e, rng);
    const SegmentationMap y = testutil::random_seg(e, rng);
    const std::vector<double> w{0.5, 1.5, 2.0, 9.0};
    EXPECT_NEAR(weighted_ce(p, y, ClassWeights{w}), ce_oracle(p, y, w), 1e-12);
    // zero probability on the true class saturates at -log(1e-12)
    const std::size_t N = e.voxels();
    for (std::size_t c = 0; c < 4; ++c) p[c * N] = c == y.labels.data[0] ? 0.0 : 1.0 / 3;
    const double v = weighted_ce(p, y, ClassWeights{w});
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, ce_oracle(p, y, w), 1e-12);
}

TEST(CrossEntropy, PerfectPredictionIsZero)
{
    std::mt19937_64 rng(6);
    const Extent e = Extent::make2d(3, 3);
    const SegmentationMap y = testutil::random_seg(e, rng);
    Tensor p({4, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) p[y.labels.data[i] * 9 + i] = 1.0;
    EXPECT_EQ(weighted_ce(p, y, ClassWeights::uniform(4)), 0.0);
}

TEST(ClassWeights, DecayClosedForm)
{
    const ClassWeights w0{{1.0, 5.0, 10.0, 3.0}};
    EXPECT_NEAR(decay_weights(w0, 1).w[1], 4.92, 1e-9);
    EXPECT_EQ(decay_weights(w0, 0).w, w0.w);
    for (int e : {1, 10, 100}) {
        const auto w = decay_weights(w0, e);
        for (std::size_t c = 0; c < 4; ++c)
            EXPECT_NEAR(w.w[c], 1 + (w0.w[c] - 1) * std::pow(0.98, e), 1e-12);
    }
    // monotone approach to 1
    double prev = 10;
    for (int e = 1; e < 400; e += 13) {
        const double v = decay_weights(w0, e).w[2];
        EXPECT_LT(v, prev);
        EXPECT_GE(v, 1.0);
        prev = v;
    }
    EXPECT_NEAR(decay_weights(w0, 2000).w[2], 1.0, 1e-9);
}

TEST(ClassWeights, InverseFrequencyIsClipped)
{
    // frequencies 0.7, 0.2, 0.1, 0.0
    const auto w = inverse_frequency_weights({70, 20, 10, 0});
    EXPECT_NEAR(w.w[0], 1.0 / 0.7, 1e-12);
    EXPECT_NEAR(w.w[1], 5.0, 1e-12);
    EXPECT_NEAR(w.w[2], 10.0, 1e-12);
    EXPECT_EQ(w.w[3], 10.0);
    const auto big = inverse_frequency_weights({999, 1, 0, 0});
    EXPECT_NEAR(big.w[0], 1000.0 / 999, 1e-12);
    EXPECT_EQ(big.w[1], 10.0);
}

TEST(Mse, ClosedForm)
{
    const Tensor s({1, 1, 1, 3}, std::vector<double>{0.0, 1.0, 2.0});
    EXPECT_NEAR(mse_to(s, 1.0), 2.0 / 3, 1e-15);
    EXPECT_NEAR(mse_to(s, 0.0), 5.0 / 3, 1e-15);
}

// Gradients of every loss against central differences on tiny 2^3 inputs.
TEST(LossGradients, MatchFiniteDifferences)
{
    std::mt19937_64 rng(7);
    const Extent e = Extent::make3d(2, 2, 2);
    const SegmentationMap y = testutil::random_seg(e, rng);
    const ClassWeights w{{1.0, 2.5, 4.0, 7.0}};

    Var probs(testutil::random_probs(4, e, rng), true);
    EXPECT_LT(testutil::fd_check(probs, [&] { return weighted_ce(probs, y, w); }).worst_rel, 1e-4);

    Var scores(testutil::random_tensor({1, 2, 2, 2}, rng), true);
    EXPECT_LT(testutil::fd_check(scores, [&] { return mse_to(scores, 1.0); }).worst_rel, 1e-4);

    Var fake(testutil::random_tensor({1, 2, 2, 2}, rng), true), real(testutil::random_tensor({1, 2, 2, 2}, rng), true);
    EXPECT_LT(testutil::fd_check(fake, [&] { return hd_loss(fake, real); }).worst_rel, 1e-4);
    EXPECT_LT(testutil::fd_check(real, [&] { return hd_loss(fake, real); }).worst_rel, 1e-4);

    auto total = [&] { return student_loss(probs, y, scores, 0.3, w); };
    EXPECT_LT(testutil::fd_check(probs, total).worst_rel, 1e-4);
    EXPECT_LT(testutil::fd_check(scores, total).worst_rel, 1e-4);
}

TEST(LossGradients, CrossEntropyThroughSoftmax)
{
    std::mt19937_64 rng(8);
    const Extent e = Extent::make3d(2, 2, 2);
    const SegmentationMap y = testutil::random_seg(e, rng);
    Var logits(testutil::random_tensor({4, 2, 2, 2}, rng, -2, 2), true);
    const auto r = testutil::fd_check(logits, [&] {
        return weighted_ce(ops::softmax_channels(logits), y, ClassWeights::uniform(4));
    });
    EXPECT_LT(r.worst_rel, 1e-4);
    // softmax-CE gradient is (p - onehot) / N
    logits.zero_grad();
    const Var p = ops::softmax_channels(logits);
    backward(weighted_ce(p, y, ClassWeights::uniform(4)));
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t c = 0; c < 4; ++c) {
            const double want = (p.value()[c * 8 + i] - (y.labels.data[i] == c ? 1.0 : 0.0)) / 8;
            EXPECT_NEAR(logits.grad()[c * 8 + i], want, 1e-12);
        }
}
