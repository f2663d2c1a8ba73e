#pragma once

// Minimal reverse-mode differentiation over Tensor values. Every op records
// its inputs and a closure that scatters the output gradient back into them;
// backward() replays the closures in reverse topological order.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "hadnet/tensor.hpp"

namespace hadnet {

using Rng = std::mt19937_64;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-initialized on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }
    const std::vector<std::size_t>& shape() const { return node_->value.shape(); }

    void zero_grad();
    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    friend Var make_op(Tensor, std::vector<Var>, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

/// Builds an op result. The closure is dropped (and the result becomes a
/// constant) when no input requires a gradient or gradients are disabled.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Accumulates d(root)/d(leaf) into every reachable leaf. root must hold one element.
void backward(const Var& root);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

/// Uniform double in [0,1) from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

struct ConvGeometry {
    std::array<std::size_t, 3> kernel{1, 1, 1};  // d, h, w
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::array<std::size_t, 3> pad_lo{0, 0, 0};
    std::array<std::size_t, 3> pad_hi{0, 0, 0};

    /// Cubic kernel of the given size over the trailing `rank` spatial axes.
    static ConvGeometry cube(int rank, std::size_t k, std::size_t stride, std::size_t lo, std::size_t hi);
    std::array<std::size_t, 3> output_extent(const std::array<std::size_t, 3>& in) const;
};

namespace ops {

Var detach(const Var& x);
/// x: [C,D,H,W], weight: [O,C,kd,kh,kw], bias: [O] (may be undefined).
Var conv(const Var& x, const Var& weight, const Var& bias, const ConvGeometry& g);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5);
Var leaky_relu(const Var& x, Real slope);
/// Inverted dropout; identity when rng is null or p == 0.
Var dropout(const Var& x, Real p, Rng* rng);
/// 2x max pooling along the trailing `rank` spatial axes.
Var max_pool2(const Var& x, int rank);
/// 2x nearest-neighbour upsampling along the trailing `rank` spatial axes.
Var upsample2(const Var& x, int rank);
Var concat_channels(const std::vector<Var>& xs);
Var softmax_channels(const Var& x);
/// sum_i x_i * w_i as a scalar.
Var weighted_sum(const Var& x, const Tensor& w);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, Real s);

}  // namespace ops
}  // namespace hadnet
