#include "hadnet/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "hadnet/errors.hpp"

namespace hadnet::nets {

void NetworkConfig::validate() const
{
    if (k < 1) throw ConfigError("network k must be >= 1");
    if (scales < 1) throw ConfigError("network scales must be >= 1");
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1)");
    if (in_channels < 1) throw ConfigError("network needs at least one input channel");
    if (num_classes < 2) throw ConfigError("network needs at least two classes");
    if (spatial_rank != 2 && spatial_rank != 3) throw ConfigError("spatial_rank must be 2 or 3");
}

void NetworkConfig::check_input(const std::array<std::size_t, 3>& spatial) const
{
    const std::size_t div = std::size_t{1} << scales;
    for (int a = 3 - spatial_rank; a < 3; ++a)
        if (spatial[static_cast<std::size_t>(a)] % div != 0 || spatial[static_cast<std::size_t>(a)] == 0)
            throw ShapeError("input extent " + std::to_string(spatial[static_cast<std::size_t>(a)]) + " on axis " +
                             std::to_string(a) + " is not divisible by 2^" + std::to_string(scales));
    if (spatial_rank == 2 && spatial[0] != 1) throw ShapeError("2D networks need depth-1 inputs");
}

nlohmann::json NetworkConfig::to_json() const
{
    return {{"k", k},
            {"scales", scales},
            {"p", p},
            {"lrelu_slope", lrelu_slope},
            {"in_channels", in_channels},
            {"num_classes", num_classes},
            {"spatial_rank", spatial_rank}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j)
{
    NetworkConfig c;
    c.k = j.value("k", c.k);
    c.scales = j.value("scales", c.scales);
    c.p = j.value("p", c.p);
    c.lrelu_slope = j.value("lrelu_slope", c.lrelu_slope);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.spatial_rank = j.value("spatial_rank", c.spatial_rank);
    return c;
}

Var& ParamSet::add(std::string name, Tensor init)
{
    if (contains(name)) throw std::logic_error("duplicate parameter " + name);
    items_.emplace_back(std::move(name), Var(std::move(init), true));
    return items_.back().second;
}

Var& ParamSet::get(const std::string& name)
{
    for (auto& [n, v] : items_)
        if (n == name) return v;
    throw CheckpointError("unknown parameter " + name);
}

const Var& ParamSet::get(const std::string& name) const
{
    for (const auto& [n, v] : items_)
        if (n == name) return v;
    throw CheckpointError("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const
{
    for (const auto& item : items_)
        if (item.first == name) return true;
    return false;
}

void ParamSet::zero_grad()
{
    for (auto& item : items_) item.second.zero_grad();
}

void ParamSet::set_requires_grad(bool on)
{
    for (auto& item : items_) item.second.node()->requires_grad = on;
}

ParamSet ParamSet::clone() const
{
    ParamSet out;
    for (const auto& [n, v] : items_) out.items_.emplace_back(n, Var(v.value(), v.requires_grad()));
    return out;
}

std::size_t count_parameters(const ParamSet& params)
{
    std::size_t n = 0;
    for (const auto& item : params.items()) n += item.second.value().size();
    return n;
}

namespace {

std::vector<std::size_t> kernel_shape(int rank, std::size_t out, std::size_t in, std::size_t k)
{
    return {out, in, rank == 3 ? k : 1, k, k};
}

Tensor he_normal(const std::vector<std::size_t>& shape, Rng& rng)
{
    Tensor t(shape);
    const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3] * shape[4]);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

void add_conv(ParamSet& ps, const std::string& prefix, int rank, std::size_t out, std::size_t in, std::size_t k,
              Rng& rng)
{
    ps.add(prefix + ".weight", he_normal(kernel_shape(rank, out, in, k), rng));
    ps.add(prefix + ".bias", Tensor({out}));
}

void add_norm(ParamSet& ps, const std::string& prefix, std::size_t ch)
{
    ps.add(prefix + ".gamma", Tensor({ch}, 1.0));
    ps.add(prefix + ".beta", Tensor({ch}, 0.0));
}

void add_cil_block(ParamSet& ps, const std::string& prefix, int rank, std::size_t in, std::size_t out, Rng& rng)
{
    add_conv(ps, prefix + ".conv1", rank, out, in, 3, rng);
    add_norm(ps, prefix + ".norm1", out);
    add_conv(ps, prefix + ".conv2", rank, out, out, 3, rng);
    add_norm(ps, prefix + ".norm2", out);
}

Var cil_block(const SegNet& net, const std::string& prefix, Var x, bool dropout, bool stochastic, Rng* rng)
{
    const auto& c = net.config;
    const auto& ps = net.params;
    if (dropout && stochastic) x = ops::dropout(x, c.p, rng);
    const ConvGeometry g = ConvGeometry::cube(c.spatial_rank, 3, 1, 1, 1);
    for (const char* i : {"1", "2"}) {
        const std::string conv = prefix + ".conv" + i, norm = prefix + ".norm" + i;
        x = ops::conv(x, ps.get(conv + ".weight"), ps.get(conv + ".bias"), g);
        x = ops::instance_norm(x, ps.get(norm + ".gamma"), ps.get(norm + ".beta"));
        x = ops::leaky_relu(x, c.lrelu_slope);
    }
    return x;
}

std::array<std::size_t, 3> spatial(const Var& v)
{
    const auto& s = v.shape();
    if (s.size() != 4) throw ShapeError("expected a [C,D,H,W] input, got " + shape_str(s));
    return {s[1], s[2], s[3]};
}

}  // namespace

SegNet make_segnet(const NetworkConfig& cfg, Rng& rng)
{
    cfg.validate();
    SegNet net{cfg, {}};
    const int r = cfg.spatial_rank;
    for (int n = 0; n < cfg.scales; ++n)
        add_cil_block(net.params, "encoder." + std::to_string(n), r,
                      n == 0 ? static_cast<std::size_t>(cfg.in_channels) : cfg.filters(n - 1), cfg.filters(n), rng);
    add_cil_block(net.params, "center", r, cfg.filters(cfg.scales - 1), cfg.filters(cfg.scales), rng);
    for (int n = cfg.scales - 1; n >= 0; --n)
        add_cil_block(net.params, "decoder." + std::to_string(n), r, cfg.filters(n + 1) + cfg.filters(n),
                      cfg.filters(n), rng);
    add_conv(net.params, "output", r, static_cast<std::size_t>(cfg.num_classes), cfg.filters(0), 1, rng);
    return net;
}

SegOutput segnet_forward(const SegNet& net, const Var& input, bool stochastic, Rng* rng)
{
    const auto& c = net.config;
    if (input.shape().size() != 4 || input.shape()[0] != static_cast<std::size_t>(c.in_channels))
        throw ShapeError("segmentation input " + shape_str(input.shape()) + " does not have " +
                         std::to_string(c.in_channels) + " channels");
    c.check_input(spatial(input));
    if (stochastic && c.p > 0 && rng == nullptr) throw std::invalid_argument("stochastic forward needs an RNG");

    std::vector<Var> skips;
    Var x = input;
    for (int n = 0; n < c.scales; ++n) {
        x = cil_block(net, "encoder." + std::to_string(n), x, n > 0, stochastic, rng);
        skips.push_back(x);
        x = ops::max_pool2(x, c.spatial_rank);
    }
    x = cil_block(net, "center", x, true, stochastic, rng);

    SegOutput out;
    out.pyramid.resize(static_cast<std::size_t>(c.scales));
    out.pyramid[static_cast<std::size_t>(c.scales - 1)] = x;
    for (int n = c.scales - 1; n >= 0; --n) {
        x = ops::concat_channels({ops::upsample2(x, c.spatial_rank), skips[static_cast<std::size_t>(n)]});
        x = cil_block(net, "decoder." + std::to_string(n), x, true, stochastic, rng);
        if (n >= 1) out.pyramid[static_cast<std::size_t>(n - 1)] = x;
    }
    out.logits = ops::conv(x, net.params.get("output.weight"), net.params.get("output.bias"),
                           ConvGeometry::cube(c.spatial_rank, 1, 1, 0, 0));
    out.probs = ops::softmax_channels(out.logits);
    return out;
}

const char* to_string(DiscKind k) { return k == DiscKind::Hierarchical ? "hierarchical" : "non-hierarchical"; }

DiscKind disc_kind_from_string(const std::string& s)
{
    if (s == "hierarchical" || s == "hadnet") return DiscKind::Hierarchical;
    if (s == "non-hierarchical" || s == "adnet") return DiscKind::NonHierarchical;
    throw ConfigError("unknown discriminator kind '" + s + "'");
}

int Discriminator::level_for_block(int b) const
{
    if (kind != DiscKind::Hierarchical || b < 2) return -1;
    // Block b reads features at input / 2^(b-1), i.e. pyramid level b-2.
    const int level = b - 2;
    return level < seg_config.scales ? level : -1;
}

Discriminator make_discriminator(DiscKind kind, const NetworkConfig& seg_cfg, int x_channels, Rng& rng)
{
    seg_cfg.validate();
    if (x_channels < 1) throw ConfigError("discriminator needs at least one image channel");
    Discriminator d;
    d.kind = kind;
    d.seg_config = seg_cfg;
    d.x_channels = x_channels;
    const int r = seg_cfg.spatial_rank;
    std::size_t in = static_cast<std::size_t>(x_channels + seg_cfg.num_classes);
    for (int b = 1; b <= kDiscBlocks; ++b) {
        const std::string prefix = "disc.block" + std::to_string(b);
        const int level = d.level_for_block(b);
        const std::size_t block_in = in + (level >= 0 ? seg_cfg.filters(level + 1) : 0);
        const std::size_t out = seg_cfg.filters(b);
        add_conv(d.params, prefix + ".conv", r, out, block_in, 4, rng);
        if (b > 1) add_norm(d.params, prefix + ".norm", out);
        in = out;
    }
    add_conv(d.params, "disc.output", r, 1, in, 4, rng);
    return d;
}

namespace {

Var disc_impl(const Discriminator& d, const Var& x_pre, const Var& seg, const std::vector<Var>* pyramid)
{
    const auto& c = d.seg_config;
    if (x_pre.shape().size() != 4 || x_pre.shape()[0] != static_cast<std::size_t>(d.x_channels))
        throw ShapeError("discriminator image input " + shape_str(x_pre.shape()) + " does not have " +
                         std::to_string(d.x_channels) + " channels");
    if (seg.shape().size() != 4 || seg.shape()[0] != static_cast<std::size_t>(c.num_classes))
        throw ShapeError("discriminator segmentation input " + shape_str(seg.shape()) + " does not have " +
                         std::to_string(c.num_classes) + " channels");
    const auto sp = spatial(x_pre);
    const std::size_t div = std::size_t{1} << kDiscBlocks;
    for (int a = 3 - c.spatial_rank; a < 3; ++a)
        if (sp[static_cast<std::size_t>(a)] % div != 0)
            throw ShapeError("discriminator input extent must be divisible by 16");

    const ConvGeometry down = ConvGeometry::cube(c.spatial_rank, 4, 2, 1, 1);
    Var x = ops::concat_channels({x_pre, seg});
    for (int b = 1; b <= kDiscBlocks; ++b) {
        const std::string prefix = "disc.block" + std::to_string(b);
        const int level = d.level_for_block(b);
        if (level >= 0 && pyramid) {
            if (static_cast<std::size_t>(level) >= pyramid->size())
                throw ShapeError("pyramid level " + std::to_string(level) + " missing for discriminator block " +
                                 std::to_string(b));
            const Var& feat = (*pyramid)[static_cast<std::size_t>(level)];
            if (feat.shape().size() != 4 || spatial(feat) != spatial(x) ||
                feat.shape()[0] != c.filters(level + 1))
                throw ShapeError("pyramid level " + std::to_string(level) + " has shape " + shape_str(feat.shape()) +
                                 " but discriminator block " + std::to_string(b) + " expects " +
                                 std::to_string(c.filters(level + 1)) + " channels at " + shape_str(x.shape()));
            x = ops::concat_channels({x, feat});
        }
        x = ops::conv(x, d.params.get(prefix + ".conv.weight"), d.params.get(prefix + ".conv.bias"), down);
        if (b > 1) x = ops::instance_norm(x, d.params.get(prefix + ".norm.gamma"), d.params.get(prefix + ".norm.beta"));
        x = ops::leaky_relu(x, c.lrelu_slope);
    }
    // kernel 4, stride 1: pad 1 before and 2 after keeps the extent.
    return ops::conv(x, d.params.get("disc.output.weight"), d.params.get("disc.output.bias"),
                     ConvGeometry::cube(c.spatial_rank, 4, 1, 1, 2));
}

}  // namespace

Var hd_forward(const Discriminator& d, const Var& x_pre, const Var& seg, const std::vector<Var>& pyramid)
{
    if (d.kind != DiscKind::Hierarchical) throw std::logic_error("hd_forward needs a hierarchical discriminator");
    return disc_impl(d, x_pre, seg, &pyramid);
}

Var ad_forward(const Discriminator& d, const Var& x_pre, const Var& seg)
{
    if (d.kind != DiscKind::NonHierarchical) throw std::logic_error("ad_forward needs a non-hierarchical discriminator");
    return disc_impl(d, x_pre, seg, nullptr);
}

Var disc_forward(const Discriminator& d, const Var& x_pre, const Var& seg, const std::vector<Var>& pyramid)
{
    return d.kind == DiscKind::Hierarchical ? hd_forward(d, x_pre, seg, pyramid) : ad_forward(d, x_pre, seg);
}

// --- archives ---------------------------------------------------------------

const Tensor& Archive::array(const std::string& name) const
{
    for (const auto& [n, t] : arrays)
        if (n == name) return t;
    throw CheckpointError("archive has no array '" + name + "'");
}

namespace {

constexpr char kMagic[8] = {'H', 'A', 'D', 'N', 'E', 'T', 'A', 'R'};

template <typename T>
void put(std::ostream& out, T v)
{
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& p)
{
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw CheckpointError("truncated archive " + p.string());
    return v;
}

}  // namespace

void save_archive(const std::filesystem::path& path, const Archive& a)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kArchiveVersion);
    const std::string meta = a.meta.dump();
    put<std::uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint64_t>(out, a.arrays.size());
    for (const auto& [name, t] : a.arrays) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Real)));
    }
    if (!out) throw IoError("write error in " + path.string());
}

Archive load_archive(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw CheckpointError(path.string() + " is not an archive");
    const auto version = get<std::uint32_t>(in, path);
    if (version > kArchiveVersion)
        throw CheckpointError(path.string() + " has unsupported archive version " + std::to_string(version));
    Archive a;
    std::string meta(get<std::uint64_t>(in, path), '\0');
    in.read(meta.data(), static_cast<std::streamsize>(meta.size()));
    try {
        a.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(path.string() + ": bad metadata: " + e.what());
    }
    const auto n = get<std::uint64_t>(in, path);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name(get<std::uint32_t>(in, path), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rank = get<std::uint32_t>(in, path);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = get<std::uint64_t>(in, path);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Real)));
        if (!in) throw CheckpointError("truncated archive " + path.string());
        a.arrays.emplace_back(std::move(name), std::move(t));
    }
    return a;
}

void append_params(Archive& a, const ParamSet& params, const std::string& prefix)
{
    for (const auto& [n, v] : params.items()) a.arrays.emplace_back(prefix + n, v.value());
}

void load_params_into(ParamSet& params, const Archive& a, const std::string& prefix)
{
    for (auto& [n, v] : params.items()) {
        const Tensor& t = a.array(prefix + n);
        if (!t.same_shape(v.value()))
            throw CheckpointError("parameter " + n + " has shape " + shape_str(t.shape()) + " in checkpoint but " +
                                  shape_str(v.value().shape()) + " in the network");
        v.mutable_value() = t;
    }
}

void save_segnet(const std::filesystem::path& path, const SegNet& net, const nlohmann::json& extra)
{
    Archive a;
    a.meta = {{"format", "hadnet-checkpoint"}, {"version", kArchiveVersion}, {"kind", "segnet"},
              {"network", net.config.to_json()}};
    if (extra.is_object())
        for (const auto& [k, v] : extra.items()) a.meta[k] = v;
    append_params(a, net.params);
    save_archive(path, a);
}

SegNet load_segnet(const std::filesystem::path& path, nlohmann::json* meta)
{
    Archive a = load_archive(path);
    if (a.meta.value("kind", "") != "segnet") throw CheckpointError(path.string() + " is not a segmentation checkpoint");
    NetworkConfig cfg = NetworkConfig::from_json(a.meta.at("network"));
    Rng dummy(0);
    SegNet net = make_segnet(cfg, dummy);
    load_params_into(net.params, a);
    if (meta) *meta = a.meta;
    return net;
}

void save_discriminator(const std::filesystem::path& path, const Discriminator& d)
{
    Archive a;
    a.meta = {{"format", "hadnet-checkpoint"}, {"version", kArchiveVersion}, {"kind", "discriminator"},
              {"discriminator", to_string(d.kind)}, {"x_channels", d.x_channels},
              {"network", d.seg_config.to_json()}};
    append_params(a, d.params);
    save_archive(path, a);
}

Discriminator load_discriminator(const std::filesystem::path& path)
{
    Archive a = load_archive(path);
    if (a.meta.value("kind", "") != "discriminator") throw CheckpointError(path.string() + " is not a discriminator");
    Rng dummy(0);
    Discriminator d = make_discriminator(disc_kind_from_string(a.meta.at("discriminator")),
                                         NetworkConfig::from_json(a.meta.at("network")),
                                         a.meta.at("x_channels").get<int>(), dummy);
    load_params_into(d.params, a);
    return d;
}

Tensor to_tensor(const MultiModalVolume& v)
{
    v.validate();
    const auto& e = v.extent();
    Tensor t({v.num_channels(), e.dims[0], e.dims[1], e.dims[2]});
    const std::size_t n = e.voxels();
    for (std::size_t c = 0; c < v.num_channels(); ++c)
        for (std::size_t i = 0; i < n; ++i) t[c * n + i] = v.channels[c].data[i];
    return t;
}

}  // namespace hadnet::nets
