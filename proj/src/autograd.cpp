#include "hadnet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "hadnet/errors.hpp"

namespace hadnet {

namespace {
thread_local bool g_grad_enabled = true;

std::array<std::size_t, 3> spatial_of(const Tensor& t)
{
    if (t.rank() != 4) throw ShapeError("expected a [C,D,H,W] tensor, got " + shape_str(t.shape()));
    return {t.dim(1), t.dim(2), t.dim(3)};
}
}  // namespace

Tensor& Node::grad_buffer()
{
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>())
{
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

void Var::zero_grad()
{
    if (node_) node_->grad = Tensor();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> bw)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                               [](const Var& v) { return v.requires_grad(); });
    if (needs) {
        node->requires_grad = true;
        for (auto& v : inputs) node->inputs.push_back(v.node());
        node->backward = std::move(bw);
    }
    return Var(std::move(node));
}

void backward(const Var& root)
{
    if (!root.defined() || root.value().size() != 1)
        throw std::invalid_argument("backward() needs a scalar root");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients are scratch; only leaves accumulate across calls.
    for (Node* n : order)
        if (n->backward) n->grad = Tensor(n->value.shape());
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) {
            n->backward(*n);
            n->grad = Tensor();
        }
    }
}

ConvGeometry ConvGeometry::cube(int rank, std::size_t k, std::size_t stride, std::size_t lo, std::size_t hi)
{
    ConvGeometry g;
    for (int a = 0; a < 3; ++a) {
        bool active = a >= 3 - rank;
        g.kernel[a] = active ? k : 1;
        g.stride[a] = active ? stride : 1;
        g.pad_lo[a] = active ? lo : 0;
        g.pad_hi[a] = active ? hi : 0;
    }
    return g;
}

std::array<std::size_t, 3> ConvGeometry::output_extent(const std::array<std::size_t, 3>& in) const
{
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        std::size_t padded = in[a] + pad_lo[a] + pad_hi[a];
        if (padded < kernel[a])
            throw ShapeError("convolution kernel larger than padded input on axis " + std::to_string(a));
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    return out;
}

namespace ops {

Var detach(const Var& x) { return Var(x.value(), false); }

namespace {

struct AxisRange {
    std::size_t lo = 0, hi = 0;  // valid output indices [lo, hi)
    std::ptrdiff_t offset = 0;   // input index = o * stride + offset
};

std::vector<AxisRange> axis_ranges(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t pl)
{
    std::vector<AxisRange> r(k);
    for (std::size_t kk = 0; kk < k; ++kk) {
        std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kk) - static_cast<std::ptrdiff_t>(pl);
        std::ptrdiff_t lo = off >= 0 ? 0 : (-off + static_cast<std::ptrdiff_t>(s) - 1) / static_cast<std::ptrdiff_t>(s);
        std::ptrdiff_t last_in = static_cast<std::ptrdiff_t>(in) - 1 - off;
        std::ptrdiff_t hi = last_in < 0 ? 0 : last_in / static_cast<std::ptrdiff_t>(s) + 1;
        hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
        r[kk] = {static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo, 0)),
                 static_cast<std::size_t>(std::max<std::ptrdiff_t>(hi, lo < 0 ? 0 : lo)), off};
    }
    return r;
}

struct ConvPlan {
    std::array<std::size_t, 3> in{}, out{};
    std::size_t C = 0, O = 0;
    ConvGeometry g;
    std::array<std::vector<AxisRange>, 3> ranges;
};

ConvPlan plan_conv(const Tensor& x, const Tensor& w, const ConvGeometry& g)
{
    ConvPlan p;
    p.in = spatial_of(x);
    p.C = x.dim(0);
    if (w.rank() != 5 || w.dim(1) != p.C || w.dim(2) != g.kernel[0] || w.dim(3) != g.kernel[1] ||
        w.dim(4) != g.kernel[2])
        throw ShapeError("conv weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    p.O = w.dim(0);
    p.g = g;
    p.out = g.output_extent(p.in);
    for (int a = 0; a < 3; ++a) p.ranges[a] = axis_ranges(p.in[a], p.out[a], g.kernel[a], g.stride[a], g.pad_lo[a]);
    return p;
}

// First input index touched along a row by the tap described by rx.
inline std::size_t tap_start(std::size_t irow, const AxisRange& rx, std::size_t sx)
{
    return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(irow + rx.lo * sx) + rx.offset);
}

// Visits every (output row, input row) pair touched by one kernel tap.
template <typename F>
void for_each_tap_row(const ConvPlan& p, std::size_t kz, std::size_t ky, F&& f)
{
    const auto& rz = p.ranges[0][kz];
    const auto& ry = p.ranges[1][ky];
    for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
        std::size_t iz = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oz * p.g.stride[0]) + rz.offset);
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            std::size_t iy = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy * p.g.stride[1]) + ry.offset);
            f((oz * p.out[1] + oy) * p.out[2], (iz * p.in[1] + iy) * p.in[2]);
        }
    }
}

}  // namespace

Var conv(const Var& x, const Var& weight, const Var& bias, const ConvGeometry& g)
{
    const Tensor& X = x.value();
    const Tensor& W = weight.value();
    ConvPlan p = plan_conv(X, W, g);
    if (bias.defined() && bias.value().size() != p.O) throw ShapeError("conv bias size mismatch");

    const std::size_t in_sz = p.in[0] * p.in[1] * p.in[2];
    const std::size_t out_sz = p.out[0] * p.out[1] * p.out[2];
    const std::size_t ktaps = g.kernel[0] * g.kernel[1] * g.kernel[2];
    const std::size_t sx = g.stride[2];

    Tensor Y({p.O, p.out[0], p.out[1], p.out[2]});
    for (std::size_t o = 0; o < p.O; ++o) {
        Real* yo = Y.data() + o * out_sz;
        if (bias.defined()) std::fill(yo, yo + out_sz, bias.value()[o]);
        for (std::size_t c = 0; c < p.C; ++c) {
            const Real* xc = X.data() + c * in_sz;
            const Real* wk = W.data() + (o * p.C + c) * ktaps;
            for (std::size_t kz = 0; kz < g.kernel[0]; ++kz)
                for (std::size_t ky = 0; ky < g.kernel[1]; ++ky)
                    for (std::size_t kx = 0; kx < g.kernel[2]; ++kx) {
                        const Real wv = wk[(kz * g.kernel[1] + ky) * g.kernel[2] + kx];
                        const auto& rx = p.ranges[2][kx];
                        if (rx.lo >= rx.hi) continue;
                        for_each_tap_row(p, kz, ky, [&](std::size_t orow, std::size_t irow) {
                            Real* yr = yo + orow + rx.lo;
                            const Real* xr = xc + tap_start(irow, rx, sx);
                            const std::size_t len = rx.hi - rx.lo;
                            if (sx == 1)
                                for (std::size_t j = 0; j < len; ++j) yr[j] += wv * xr[j];
                            else
                                for (std::size_t j = 0; j < len; ++j) yr[j] += wv * xr[j * sx];
                        });
                    }
        }
    }

    std::vector<Var> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_op(std::move(Y), std::move(inputs), [p, in_sz, out_sz, ktaps, sx](Node& n) {
        const Tensor& X = n.inputs[0]->value;
        const Tensor& W = n.inputs[1]->value;
        const Tensor& GY = n.grad;
        const bool want_x = n.inputs[0]->requires_grad;
        const bool want_w = n.inputs[1]->requires_grad;
        Real* GX = want_x ? n.inputs[0]->grad_buffer().data() : nullptr;
        Real* GW = want_w ? n.inputs[1]->grad_buffer().data() : nullptr;
        if (n.inputs.size() > 2 && n.inputs[2]->requires_grad) {
            Tensor& GB = n.inputs[2]->grad_buffer();
            for (std::size_t o = 0; o < p.O; ++o) {
                Real s = 0;
                const Real* gy = GY.data() + o * out_sz;
                for (std::size_t i = 0; i < out_sz; ++i) s += gy[i];
                GB[o] += s;
            }
        }
        if (!want_x && !want_w) return;
        const auto& g = p.g;
        for (std::size_t o = 0; o < p.O; ++o) {
            const Real* gyo = GY.data() + o * out_sz;
            for (std::size_t c = 0; c < p.C; ++c) {
                const Real* xc = X.data() + c * in_sz;
                Real* gxc = GX ? GX + c * in_sz : nullptr;
                const std::size_t wbase = (o * p.C + c) * ktaps;
                for (std::size_t kz = 0; kz < g.kernel[0]; ++kz)
                    for (std::size_t ky = 0; ky < g.kernel[1]; ++ky)
                        for (std::size_t kx = 0; kx < g.kernel[2]; ++kx) {
                            const std::size_t widx = wbase + (kz * g.kernel[1] + ky) * g.kernel[2] + kx;
                            const Real wv = W[widx];
                            const auto& rx = p.ranges[2][kx];
                            if (rx.lo >= rx.hi) continue;
                            Real acc = 0;
                            for_each_tap_row(p, kz, ky, [&](std::size_t orow, std::size_t irow) {
                                const Real* gyr = gyo + orow + rx.lo;
                                const std::size_t start = tap_start(irow, rx, sx);
                                const std::size_t len = rx.hi - rx.lo;
                                if (GW) {
                                    const Real* xr = xc + start;
                                    for (std::size_t j = 0; j < len; ++j) acc += xr[j * sx] * gyr[j];
                                }
                                if (gxc) {
                                    Real* gxr = gxc + start;
                                    for (std::size_t j = 0; j < len; ++j) gxr[j * sx] += wv * gyr[j];
                                }
                            });
                            if (GW) GW[widx] += acc;
                        }
            }
        }
    });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, Real eps)
{
    const Tensor& X = x.value();
    spatial_of(X);
    const std::size_t C = X.dim(0), N = X.spatial_size();
    if (gamma.value().size() != C || beta.value().size() != C)
        throw ShapeError("instance norm affine parameters must have one entry per channel");

    Tensor Y(X.shape());
    auto xhat = std::make_shared<Tensor>(X.shape());
    auto inv_std = std::make_shared<std::vector<Real>>(C);
    for (std::size_t c = 0; c < C; ++c) {
        const Real* xc = X.data() + c * N;
        Real mean = 0;
        for (std::size_t i = 0; i < N; ++i) mean += xc[i];
        mean /= static_cast<Real>(N);
        Real var = 0;
        for (std::size_t i = 0; i < N; ++i) var += (xc[i] - mean) * (xc[i] - mean);
        var /= static_cast<Real>(N);
        Real is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        Real* hc = xhat->data() + c * N;
        Real* yc = Y.data() + c * N;
        const Real gm = gamma.value()[c], bt = beta.value()[c];
        for (std::size_t i = 0; i < N; ++i) {
            hc[i] = (xc[i] - mean) * is;
            yc[i] = gm * hc[i] + bt;
        }
    }
    return make_op(std::move(Y), {x, gamma, beta}, [xhat, inv_std, C, N](Node& n) {
        const Tensor& GY = n.grad;
        const Tensor& G = n.inputs[1]->value;
        for (std::size_t c = 0; c < C; ++c) {
            const Real* gy = GY.data() + c * N;
            const Real* hc = xhat->data() + c * N;
            Real sum_gy = 0, sum_gy_h = 0;
            for (std::size_t i = 0; i < N; ++i) {
                sum_gy += gy[i];
                sum_gy_h += gy[i] * hc[i];
            }
            if (n.inputs[1]->requires_grad) n.inputs[1]->grad_buffer()[c] += sum_gy_h;
            if (n.inputs[2]->requires_grad) n.inputs[2]->grad_buffer()[c] += sum_gy;
            if (n.inputs[0]->requires_grad) {
                Real* gx = n.inputs[0]->grad_buffer().data() + c * N;
                const Real k = G[c] * (*inv_std)[c] / static_cast<Real>(N);
                for (std::size_t i = 0; i < N; ++i)
                    gx[i] += k * (static_cast<Real>(N) * gy[i] - sum_gy - hc[i] * sum_gy_h);
            }
        }
    });
}

Var leaky_relu(const Var& x, Real slope)
{
    const Tensor& X = x.value();
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] > 0 ? X[i] : slope * X[i];
    return make_op(std::move(Y), {x}, [slope](Node& n) {
        const Tensor& X = n.inputs[0]->value;
        Tensor& GX = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < X.size(); ++i) GX[i] += n.grad[i] * (X[i] > 0 ? 1.0 : slope);
    });
}

Var dropout(const Var& x, Real p, Rng* rng)
{
    if (rng == nullptr || p <= 0) return x;
    const Tensor& X = x.value();
    auto mask = std::make_shared<Tensor>(X.shape());
    const Real keep_scale = 1.0 / (1.0 - p);
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
        (*mask)[i] = uniform01(*rng) >= p ? keep_scale : 0.0;
        Y[i] = X[i] * (*mask)[i];
    }
    return make_op(std::move(Y), {x}, [mask](Node& n) {
        Tensor& GX = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < GX.size(); ++i) GX[i] += n.grad[i] * (*mask)[i];
    });
}

Var max_pool2(const Var& x, int rank)
{
    const Tensor& X = x.value();
    auto in = spatial_of(X);
    std::array<std::size_t, 3> f{rank == 3 ? 2u : 1u, 2, 2};
    std::array<std::size_t, 3> out{};
    for (int a = 0; a < 3; ++a) {
        if (in[a] % f[a] != 0) throw ShapeError("max pooling needs even spatial dims, got " + shape_str(X.shape()));
        out[a] = in[a] / f[a];
    }
    const std::size_t C = X.dim(0);
    Tensor Y({C, out[0], out[1], out[2]});
    auto argmax = std::make_shared<std::vector<std::size_t>>(Y.size());
    std::size_t yi = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < out[0]; ++z)
            for (std::size_t y = 0; y < out[1]; ++y)
                for (std::size_t xx = 0; xx < out[2]; ++xx, ++yi) {
                    Real best = -INFINITY;
                    std::size_t best_i = 0;
                    for (std::size_t dz = 0; dz < f[0]; ++dz)
                        for (std::size_t dy = 0; dy < 2; ++dy)
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                std::size_t i = ((c * in[0] + z * f[0] + dz) * in[1] + y * 2 + dy) * in[2] + xx * 2 + dx;
                                if (X[i] > best) {
                                    best = X[i];
                                    best_i = i;
                                }
                            }
                    Y[yi] = best;
                    (*argmax)[yi] = best_i;
                }
    return make_op(std::move(Y), {x}, [argmax](Node& n) {
        Tensor& GX = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < argmax->size(); ++i) GX[(*argmax)[i]] += n.grad[i];
    });
}

Var upsample2(const Var& x, int rank)
{
    const Tensor& X = x.value();
    auto in = spatial_of(X);
    const std::size_t fz = rank == 3 ? 2 : 1;
    const std::size_t C = X.dim(0);
    std::array<std::size_t, 3> out{in[0] * fz, in[1] * 2, in[2] * 2};
    Tensor Y({C, out[0], out[1], out[2]});
    std::size_t yi = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < out[0]; ++z)
            for (std::size_t y = 0; y < out[1]; ++y)
                for (std::size_t xx = 0; xx < out[2]; ++xx, ++yi)
                    Y[yi] = X[((c * in[0] + z / fz) * in[1] + y / 2) * in[2] + xx / 2];
    return make_op(std::move(Y), {x}, [in, out, fz, C](Node& n) {
        Tensor& GX = n.inputs[0]->grad_buffer();
        std::size_t yi = 0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t z = 0; z < out[0]; ++z)
                for (std::size_t y = 0; y < out[1]; ++y)
                    for (std::size_t xx = 0; xx < out[2]; ++xx, ++yi)
                        GX[((c * in[0] + z / fz) * in[1] + y / 2) * in[2] + xx / 2] += n.grad[yi];
    });
}

Var concat_channels(const std::vector<Var>& xs)
{
    if (xs.empty()) throw std::invalid_argument("concat of nothing");
    auto sp = spatial_of(xs.front().value());
    std::size_t C = 0;
    for (const auto& v : xs) {
        if (spatial_of(v.value()) != sp)
            throw ShapeError("concat spatial mismatch: " + shape_str(xs.front().shape()) + " vs " +
                             shape_str(v.shape()));
        C += v.value().dim(0);
    }
    Tensor Y({C, sp[0], sp[1], sp[2]});
    std::size_t off = 0;
    for (const auto& v : xs) {
        std::copy(v.value().data(), v.value().data() + v.value().size(), Y.data() + off);
        off += v.value().size();
    }
    return make_op(std::move(Y), xs, [](Node& n) {
        std::size_t off = 0;
        for (auto& in : n.inputs) {
            const std::size_t sz = in->value.size();
            if (in->requires_grad) {
                Tensor& G = in->grad_buffer();
                for (std::size_t i = 0; i < sz; ++i) G[i] += n.grad[off + i];
            }
            off += sz;
        }
    });
}

Var softmax_channels(const Var& x)
{
    const Tensor& X = x.value();
    spatial_of(X);
    const std::size_t C = X.dim(0), N = X.spatial_size();
    Tensor Y(X.shape());
    for (std::size_t i = 0; i < N; ++i) {
        Real m = -INFINITY;
        for (std::size_t c = 0; c < C; ++c) m = std::max(m, X[c * N + i]);
        Real s = 0;
        for (std::size_t c = 0; c < C; ++c) s += (Y[c * N + i] = std::exp(X[c * N + i] - m));
        for (std::size_t c = 0; c < C; ++c) Y[c * N + i] /= s;
    }
    return make_op(Y, {x}, [Y, C, N](Node& n) {
        Tensor& GX = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < N; ++i) {
            Real dot = 0;
            for (std::size_t c = 0; c < C; ++c) dot += n.grad[c * N + i] * Y[c * N + i];
            for (std::size_t c = 0; c < C; ++c) GX[c * N + i] += Y[c * N + i] * (n.grad[c * N + i] - dot);
        }
    });
}

Var weighted_sum(const Var& x, const Tensor& w)
{
    if (w.size() != x.value().size()) throw ShapeError("weighted_sum size mismatch");
    Real s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += x.value()[i] * w[i];
    return make_op(Tensor({1}, s), {x}, [w](Node& n) {
        Tensor& GX = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < w.size(); ++i) GX[i] += n.grad[0] * w[i];
    });
}

Var add(const Var& a, const Var& b)
{
    if (!a.value().same_shape(b.value())) throw ShapeError("add shape mismatch");
    Tensor Y(a.value().shape());
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = a.value()[i] + b.value()[i];
    return make_op(std::move(Y), {a, b}, [](Node& n) {
        for (auto& in : n.inputs)
            if (in->requires_grad) {
                Tensor& G = in->grad_buffer();
                for (std::size_t i = 0; i < G.size(); ++i) G[i] += n.grad[i];
            }
    });
}

Var scale(const Var& a, Real s)
{
    Tensor Y(a.value().shape());
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = a.value()[i] * s;
    return make_op(std::move(Y), {a}, [s](Node& n) {
        Tensor& G = n.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < G.size(); ++i) G[i] += n.grad[i] * s;
    });
}

}  // namespace ops
}  // namespace hadnet
