#include "hadnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hadnet/errors.hpp"
#include "hadnet/synthdata.hpp"

namespace hadnet::train {

namespace fs = std::filesystem;
using nlohmann::json;

// --- Adam ----------------------------------------------------------------------

void AdamConfig::validate() const
{
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("Adam epsilon must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight decay must be nonnegative");
}

void Adam::step(nets::ParamSet& params)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, var] : params.items()) {
        if (!var.requires_grad() || var.grad().empty()) continue;
        Tensor& p = var.mutable_value();
        const Tensor& g = var.grad();
        Tensor& m = m_[name];
        Tensor& v = v_[name];
        if (m.empty()) m = Tensor::zeros_like(p);
        if (v.empty()) v = Tensor::zeros_like(p);
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            p[i] = p[i] * decay - cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        }
    }
}

void Adam::save_into(nets::Archive& a, const std::string& prefix) const
{
    a.meta[prefix + "t"] = t_;
    for (const auto& [n, m] : m_) a.arrays.emplace_back(prefix + "m." + n, m);
    for (const auto& [n, v] : v_) a.arrays.emplace_back(prefix + "v." + n, v);
}

void Adam::load_from(const nets::Archive& a, const std::string& prefix)
{
    t_ = a.meta.at(prefix + "t").get<std::uint64_t>();
    m_.clear();
    v_.clear();
    const std::string pm = prefix + "m.", pv = prefix + "v.";
    for (const auto& [n, t] : a.arrays) {
        if (n.starts_with(pm)) m_[n.substr(pm.size())] = t;
        else if (n.starts_with(pv)) v_[n.substr(pv.size())] = t;
    }
}

// --- configs -------------------------------------------------------------------

namespace {

json adam_json(const AdamConfig& a)
{
    return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

AdamConfig adam_from(const json& j, AdamConfig a)
{
    a.lr = j.value("lr", a.lr);
    a.beta1 = j.value("beta1", a.beta1);
    a.beta2 = j.value("beta2", a.beta2);
    a.eps = j.value("eps", a.eps);
    a.weight_decay = j.value("weight_decay", a.weight_decay);
    return a;
}

}  // namespace

void PretrainConfig::validate() const
{
    if (epochs < 1) throw ConfigError("pretrain epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    adam.validate();
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    if (!(lr_halving_factor > 0 && lr_halving_factor < 1)) throw ConfigError("lr_halving_factor must lie in (0, 1)");
    if (!(ce_weight_gamma > 0 && ce_weight_gamma <= 1)) throw ConfigError("ce_weight_gamma must lie in (0, 1]");
}

json PretrainConfig::to_json() const
{
    json j = adam_json(adam);
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["plateau_patience"] = plateau_patience;
    j["lr_halving_factor"] = lr_halving_factor;
    j["augmentation"] = augmentation;
    j["ce_weight_gamma"] = ce_weight_gamma;
    return j;
}

PretrainConfig PretrainConfig::from_json(const json& j)
{
    PretrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam = adam_from(j, c.adam);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.lr_halving_factor = j.value("lr_halving_factor", c.lr_halving_factor);
    c.augmentation = j.value("augmentation", c.augmentation);
    c.ce_weight_gamma = j.value("ce_weight_gamma", c.ce_weight_gamma);
    return c;
}

void DistillConfig::validate() const
{
    if (epochs < 1) throw ConfigError("distill epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    adam.validate();
    if (!(lambda >= 0)) throw ConfigError("lambda must be nonnegative");
    // 0.5 itself is admitted so the "update only near chance" mode is reachable.
    if (!(hd_accuracy_gate >= 0.5 && hd_accuracy_gate <= 1.0))
        throw ConfigError("hd_accuracy_gate must lie in [0.5, 1]");
}

json DistillConfig::to_json() const
{
    json j = adam_json(adam);
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lambda"] = lambda;
    j["hd_accuracy_gate"] = hd_accuracy_gate;
    j["hierarchical"] = hierarchical;
    j["augmentation"] = augmentation;
    return j;
}

DistillConfig DistillConfig::from_json(const json& j)
{
    DistillConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam = adam_from(j, c.adam);
    c.lambda = j.value("lambda", c.lambda);
    c.hd_accuracy_gate = j.value("hd_accuracy_gate", c.hd_accuracy_gate);
    c.hierarchical = j.value("hierarchical", c.hierarchical);
    c.augmentation = j.value("augmentation", c.augmentation);
    return c;
}

// --- state ---------------------------------------------------------------------

TrainState plateau_schedule(TrainState s, double val_score, int patience, double factor)
{
    if (val_score > s.best_val_score) {
        s.best_val_score = val_score;
        s.stagnation_counter = 0;
        return s;
    }
    if (++s.stagnation_counter >= patience) {
        s.lr_current *= factor;
        s.stagnation_counter = 0;
    }
    return s;
}

void save_state_fields(nets::Archive& a, const TrainState& s)
{
    std::ostringstream rng;
    rng << s.rng;
    a.meta["state"] = {{"epoch", s.epoch},
                       {"step", s.step},
                       {"rng", rng.str()},
                       {"best_val_score", s.best_val_score},
                       {"best_epoch", s.best_epoch},
                       {"lr_current", s.lr_current},
                       {"stagnation_counter", s.stagnation_counter}};
}

TrainState load_state_fields(const nets::Archive& a)
{
    try {
        const json& j = a.meta.at("state");
        TrainState s;
        s.epoch = j.at("epoch").get<int>();
        s.step = j.at("step").get<std::uint64_t>();
        std::istringstream rng(j.at("rng").get<std::string>());
        rng >> s.rng;
        if (!rng) throw CheckpointError("corrupt RNG state");
        s.best_val_score = j.at("best_val_score").get<double>();
        s.best_epoch = j.at("best_epoch").get<int>();
        s.lr_current = j.at("lr_current").get<double>();
        s.stagnation_counter = j.at("stagnation_counter").get<int>();
        return s;
    } catch (const json::exception& ex) {
        throw CheckpointError(std::string("malformed training state: ") + ex.what());
    }
}

// --- augmentation --------------------------------------------------------------

bool AugmentDraw::is_identity() const
{
    return !flip[0] && !flip[1] && !flip[2] && rotation_deg == std::array<double, 3>{0, 0, 0} && scale == 1.0;
}

AugmentDraw draw_augment(Rng& rng, const AugmentRanges& r, int rank)
{
    AugmentDraw d;
    for (int a = 3 - rank; a < 3; ++a) d.flip[static_cast<std::size_t>(a)] = uniform01(rng) < r.flip_probability;
    const int planes = rank == 2 ? 1 : 3;
    for (int p = 0; p < planes; ++p)
        d.rotation_deg[static_cast<std::size_t>(p)] = (2.0 * uniform01(rng) - 1.0) * r.max_rotation_deg;
    d.scale = r.min_scale + (r.max_scale - r.min_scale) * uniform01(rng);
    return d;
}

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 matmul(const Mat3& a, const Mat3& b)
{
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

Mat3 plane_rotation(int i, int j, double deg)
{
    Mat3 r{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    const double t = deg * std::numbers::pi / 180.0;
    r[i][i] = std::cos(t);
    r[i][j] = -std::sin(t);
    r[j][i] = std::sin(t);
    r[j][j] = std::cos(t);
    return r;
}

template <typename T>
Grid<T> flip_grid(const Grid<T>& g, const std::array<bool, 3>& f)
{
    Grid<T> out(g.extent);
    const auto& d = g.extent.dims;
    for (std::size_t z = 0; z < d[0]; ++z)
        for (std::size_t y = 0; y < d[1]; ++y)
            for (std::size_t x = 0; x < d[2]; ++x)
                out(f[0] ? d[0] - 1 - z : z, f[1] ? d[1] - 1 - y : y, f[2] ? d[2] - 1 - x : x) = g(z, y, x);
    return out;
}

// Source coordinate for every output voxel under inverse map `inv` about the centre.
struct Resampler {
    Extent e;
    Mat3 inv;
    std::array<double, 3> c;

    std::array<double, 3> source(std::size_t z, std::size_t y, std::size_t x) const
    {
        const std::array<double, 3> o{static_cast<double>(z) - c[0], static_cast<double>(y) - c[1],
                                      static_cast<double>(x) - c[2]};
        std::array<double, 3> s{};
        for (int i = 0; i < 3; ++i) s[i] = c[i] + inv[i][0] * o[0] + inv[i][1] * o[1] + inv[i][2] * o[2];
        return s;
    }

    template <typename T>
    Grid<T> nearest(const Grid<T>& g) const
    {
        Grid<T> out(e);
        const auto& d = e.dims;
        for (std::size_t z = 0; z < d[0]; ++z)
            for (std::size_t y = 0; y < d[1]; ++y)
                for (std::size_t x = 0; x < d[2]; ++x) {
                    const auto s = source(z, y, x);
                    std::array<long, 3> n{};
                    bool inside = true;
                    for (int i = 0; i < 3; ++i) {
                        n[i] = std::lround(s[i]);
                        inside = inside && n[i] >= 0 && n[i] < static_cast<long>(d[i]);
                    }
                    if (inside) out(z, y, x) = g(n[0], n[1], n[2]);
                }
        return out;
    }

    Image linear(const Image& g) const
    {
        Image out(e);
        const auto& d = e.dims;
        auto at = [&](long z, long y, long x) -> double {
            if (z < 0 || y < 0 || x < 0 || z >= static_cast<long>(d[0]) || y >= static_cast<long>(d[1]) ||
                x >= static_cast<long>(d[2]))
                return 0.0;
            return g(z, y, x);
        };
        for (std::size_t z = 0; z < d[0]; ++z)
            for (std::size_t y = 0; y < d[1]; ++y)
                for (std::size_t x = 0; x < d[2]; ++x) {
                    const auto s = source(z, y, x);
                    std::array<long, 3> b{};
                    std::array<double, 3> f{};
                    for (int i = 0; i < 3; ++i) {
                        b[i] = static_cast<long>(std::floor(s[i]));
                        f[i] = s[i] - static_cast<double>(b[i]);
                    }
                    double v = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) {
                                const double w = (dz ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dx ? f[2] : 1 - f[2]);
                                if (w != 0) v += w * at(b[0] + dz, b[1] + dy, b[2] + dx);
                            }
                    out(z, y, x) = static_cast<float>(v);
                }
        return out;
    }
};

}  // namespace

Case augment(const Case& c, const AugmentDraw& d)
{
    if (d.is_identity()) return c;
    Case out = c;
    if (d.flip[0] || d.flip[1] || d.flip[2]) {
        for (auto& ch : out.volume.channels) ch = flip_grid(ch, d.flip);
        out.volume.brain_mask = flip_grid(out.volume.brain_mask, d.flip);
        if (!out.labels.labels.data.empty()) out.labels.labels = flip_grid(out.labels.labels, d.flip);
    }
    if (d.rotation_deg == std::array<double, 3>{0, 0, 0} && d.scale == 1.0) return out;

    // Forward map is scale * R; the resampler needs its inverse R^T / scale.
    const Extent& e = out.volume.extent();
    Mat3 r = plane_rotation(1, 2, d.rotation_deg[0]);
    if (e.rank == 3) r = matmul(matmul(r, plane_rotation(0, 2, d.rotation_deg[1])), plane_rotation(0, 1, d.rotation_deg[2]));
    Mat3 inv{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) inv[i][j] = r[j][i] / d.scale;
    if (e.rank == 2) inv[0] = {1, 0, 0};
    Resampler rs{e, inv, {}};
    for (int i = 0; i < 3; ++i) rs.c[i] = (static_cast<double>(e.dims[i]) - 1.0) / 2.0;

    for (auto& ch : out.volume.channels) ch = rs.linear(ch);
    out.volume.brain_mask = rs.nearest(out.volume.brain_mask);
    if (!out.labels.labels.data.empty()) out.labels.labels = rs.nearest(out.labels.labels);
    return out;
}

// --- helpers -------------------------------------------------------------------

SegmentationMap predict(const nets::SegNet& net, const Tensor& input, int rank)
{
    NoGradGuard guard;
    auto out = nets::segnet_forward(net, Var(input), false, nullptr);
    return argmax_labels(out.probs.value(), rank);
}

metrics::EvalReport evaluate(const nets::SegNet& net, const std::vector<Case>& cases, const ModalityPlan& plan,
                             Role role)
{
    metrics::EvalReport rep;
    for (const auto& c : cases) {
        auto pred = predict(net, input_tensor(c, plan, role), c.volume.extent().rank);
        rep.per_case.emplace_back(c.id, metrics::evaluate_case(pred, c.labels));
    }
    return rep;
}

losses::ClassWeights initial_class_weights(const std::vector<Case>& train, double gamma)
{
    std::array<std::size_t, kNumLabels> counts{};
    for (const auto& c : train)
        for (auto l : c.labels.labels.data)
            if (l < kNumLabels) ++counts[l];
    auto w = losses::inverse_frequency_weights(counts, 1.0, 10.0);
    w.gamma = gamma;
    return w;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) { return synth::case_seed(seed, tag); }

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch)
{
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x5e11u + static_cast<std::uint64_t>(epoch)));
    // Fisher-Yates with our own uniform draw so the order does not depend on
    // the standard library's distribution implementation.
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    return order;
}

// --- run directory -------------------------------------------------------------

namespace {

nets::SegNet clone(const nets::SegNet& n) { return {n.config, n.params.clone()}; }

double region_mean(const metrics::EvalReport& r, Region g) { return r.aggregate(g).mean; }

json val_fields(const metrics::EvalReport& r)
{
    return {{"val_WT", region_mean(r, Region::WT)},
            {"val_TC", region_mean(r, Region::TC)},
            {"val_ET", region_mean(r, Region::ET)}};
}

void save_atomic(const fs::path& path, const nets::Archive& a)
{
    fs::path tmp = path;
    tmp += ".tmp";
    nets::save_archive(tmp, a);
    fs::rename(tmp, path);
}

class RunDir {
public:
    explicit RunDir(fs::path dir) : dir_(std::move(dir)) {}
    bool active() const { return !dir_.empty(); }
    fs::path state() const { return dir_ / "state"; }
    fs::path best() const { return dir_ / "ckpt_best"; }
    fs::path last() const { return dir_ / "ckpt_last"; }

    void begin(const json& config, bool resume)
    {
        if (!active()) return;
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
        const fs::path cfg_path = dir_ / "config.json";
        if (resume) {
            if (!fs::exists(state())) throw CheckpointError("no training state to resume in " + dir_.string());
            std::ifstream in(cfg_path);
            json saved;
            try {
                in >> saved;
            } catch (const json::exception&) {
                throw CheckpointError("unreadable config.json in " + dir_.string());
            }
            if (saved != config)
                throw ConfigError("configuration differs from the one recorded in " + cfg_path.string());
            return;
        }
        if (fs::exists(state()))
            throw ConfigError("run directory " + dir_.string() + " already holds a run; resume it or pick another");
        std::ofstream out(cfg_path);
        if (!out) throw IoError("cannot write " + cfg_path.string());
        out << config.dump(2) << "\n";
        std::ofstream(dir_ / "log.jsonl", std::ios::trunc);
    }

    void write_log(const std::vector<json>& records)
    {
        if (!active()) return;
        std::ofstream out(dir_ / "log.jsonl", std::ios::trunc);
        for (const auto& r : records) out << r.dump() << "\n";
        if (!out) throw IoError("cannot write log in " + dir_.string());
    }

    void append_log(const json& record)
    {
        if (!active()) return;
        std::ofstream out(dir_ / "log.jsonl", std::ios::app);
        out << record.dump() << "\n";
        if (!out) throw IoError("cannot append log in " + dir_.string());
    }

private:
    fs::path dir_;
};

json merged(json base, const json& extra)
{
    if (extra.is_object())
        for (const auto& [k, v] : extra.items()) base[k] = v;
    return base;
}

void check_cases(const DataSplit& data, const std::vector<std::string>& inputs, const nets::NetworkConfig& net)
{
    if (data.train.empty()) throw ConfigError("training split is empty");
    if (data.val.empty()) throw ConfigError("validation split is empty");
    for (const auto* split : {&data.train, &data.val})
        for (const auto& c : *split) {
            for (const auto& m : inputs)
                if (!c.volume.has(m)) throw DataError("case " + c.id + " lacks modality " + m);
            if (c.volume.extent().rank != net.spatial_rank)
                throw ConfigError("case " + c.id + " has rank " + std::to_string(c.volume.extent().rank) +
                                  " but the network expects " + std::to_string(net.spatial_rank));
            net.check_input(c.volume.extent().dims);
            if (c.labels.labels.data.empty()) throw DataError("case " + c.id + " has no labels");
        }
}

}  // namespace

std::vector<json> read_log(const fs::path& run_dir)
{
    std::ifstream in(run_dir / "log.jsonl");
    if (!in) throw IoError("cannot read " + (run_dir / "log.jsonl").string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

// --- stage 1 -------------------------------------------------------------------

PretrainResult pretrain(nets::NetworkConfig net_cfg, const DataSplit& data, const ModalityPlan& plan, Role role,
                        const PretrainConfig& cfg, std::uint64_t seed, const RunOptions& opt)
{
    cfg.validate();
    const auto inputs = plan.inputs(role);
    net_cfg.in_channels = static_cast<int>(inputs.size());
    net_cfg.validate();
    check_cases(data, inputs, net_cfg);

    Rng init(mix_seed(seed, 1));
    nets::SegNet net = nets::make_segnet(net_cfg, init);
    Adam opt_net(cfg.adam);
    TrainState st;
    st.rng.seed(mix_seed(seed, 2));
    st.lr_current = cfg.adam.lr;
    const auto w0 = initial_class_weights(data.train, cfg.ce_weight_gamma);

    const json config = merged({{"stage", "pretrain"},
                                {"role", to_string(role)},
                                {"seed", seed},
                                {"modalities", inputs},
                                {"network", net_cfg.to_json()},
                                {"pretrain", cfg.to_json()}},
                               opt.extra_config);
    const json ckpt_meta = {{"stage", "pretrain"},
                            {"role", to_string(role)},
                            {"modalities", inputs},
                            {"class_weights", w0.w},
                            {"ce_weight_gamma", w0.gamma},
                            {"ce_epochs", cfg.epochs}};

    RunDir rd(opt.run_dir);
    rd.begin(config, opt.resume);
    PretrainResult res;
    res.initial_weights = w0;
    nets::SegNet best = clone(net);
    if (opt.resume) {
        const auto a = nets::load_archive(rd.state());
        nets::load_params_into(net.params, a, "net.");
        opt_net.load_from(a, "opt.");
        st = load_state_fields(a);
        best = nets::load_segnet(rd.best());
        auto log = read_log(opt.run_dir);
        if (log.size() < static_cast<std::size_t>(st.epoch)) throw CheckpointError("log shorter than training state");
        log.resize(static_cast<std::size_t>(st.epoch));
        rd.write_log(log);
        res.log = std::move(log);
    }

    const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
    int ran = 0;
    while (st.epoch < cfg.epochs && (opt.stop_after < 0 || ran < opt.stop_after)) {
        const int e = st.epoch + 1;
        const auto w = losses::decay_weights(w0, e - 1);
        opt_net.config().lr = st.lr_current;
        const auto order = epoch_order(data.train.size(), seed, e);
        double ce_sum = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
            const std::size_t b1 = std::min(order.size(), b0 + B);
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (std::size_t k = b0; k < b1; ++k) {
                const Case& src = data.train[order[k]];
                Case aug;
                const Case* c = &src;
                if (cfg.augmentation) {
                    aug = augment(src, st.rng);
                    c = &aug;
                }
                auto out = nets::segnet_forward(net, Var(input_tensor(*c, plan, role)), true, &st.rng);
                Var loss = losses::weighted_ce(out.probs, c->labels, w);
                ce_sum += loss.value()[0];
                backward(ops::scale(loss, inv));
            }
            opt_net.step(net.params);
            net.params.zero_grad();
            ++st.step;
        }

        const auto val = evaluate(net, data.val, plan, role);
        const double score = (region_mean(val, Region::WT) + region_mean(val, Region::TC) + region_mean(val, Region::ET)) / 3.0;
        const bool improved = score > st.best_val_score;
        const double lr_used = st.lr_current;
        st = plateau_schedule(st, score, cfg.plateau_patience, cfg.lr_halving_factor);
        st.epoch = e;
        if (improved) {
            st.best_epoch = e;
            best = clone(net);
        }

        json rec = {{"epoch", e}, {"ce", ce_sum / static_cast<double>(data.train.size())}, {"lr", lr_used}};
        rec.update(val_fields(val));
        rec["val_score"] = score;
        rec["best"] = improved;
        res.log.push_back(rec);

        if (rd.active()) {
            rd.append_log(rec);
            json meta = ckpt_meta;
            if (improved) {
                meta["epoch"] = e;
                meta["val_score"] = score;
                nets::save_segnet(rd.best(), best, meta);
            }
            meta["epoch"] = e;
            meta["val_score"] = score;
            nets::save_segnet(rd.last(), net, meta);
            nets::Archive a;
            a.meta["stage"] = "pretrain";
            save_state_fields(a, st);
            nets::append_params(a, net.params, "net.");
            opt_net.save_into(a, "opt.");
            save_atomic(rd.state(), a);
        }
        if (opt.on_epoch) opt.on_epoch(rec);
        ++ran;
    }

    res.best = std::move(best);
    res.last = std::move(net);
    res.state = st;
    res.finished = st.epoch >= cfg.epochs;
    return res;
}

// --- stage 2 -------------------------------------------------------------------

void check_compatible(const nets::NetworkConfig& t, const nets::NetworkConfig& s)
{
    auto mismatch = [](const char* what, int a, int b) {
        throw CheckpointError(std::string("teacher/student ") + what + " mismatch: " + std::to_string(a) + " vs " +
                              std::to_string(b));
    };
    if (t.k != s.k) mismatch("k", t.k, s.k);
    if (t.scales != s.scales) mismatch("scales", t.scales, s.scales);
    if (t.spatial_rank != s.spatial_rank) mismatch("spatial rank", t.spatial_rank, s.spatial_rank);
    if (t.num_classes != s.num_classes) mismatch("class count", t.num_classes, s.num_classes);
    if (t.in_channels != s.in_channels + 1)
        throw CheckpointError("teacher must take exactly one more input channel than the student (" +
                              std::to_string(t.in_channels) + " vs " + std::to_string(s.in_channels) + ")");
}

DistillStats distill_epoch(DistillContext& ctx, const nets::SegNet& teacher, const std::vector<Case>& train,
                           const ModalityPlan& plan, const DistillConfig& cfg, std::uint64_t seed)
{
    const int e = ctx.state.epoch + 1;
    const auto w = losses::decay_weights(ctx.initial_weights, ctx.weight_epoch_offset + e - 1);
    ctx.student_opt.config().lr = ctx.state.lr_current;
    ctx.disc_opt.config().lr = ctx.state.lr_current;
    const auto order = epoch_order(train.size(), seed, e);
    const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
    DistillStats st;

    struct Item {
        Var x_pre;
        nets::SegOutput teacher, student;
    };

    for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
        const std::size_t b1 = std::min(order.size(), b0 + B);
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        std::vector<Item> items;

        // Student step against the current discriminator (held fixed).
        ctx.disc.params.set_requires_grad(false);
        for (std::size_t k = b0; k < b1; ++k) {
            const Case& src = train[order[k]];
            Case aug;
            const Case* c = &src;
            if (cfg.augmentation) {
                aug = augment(src, ctx.state.rng);
                c = &aug;
            }
            Item it;
            it.x_pre = Var(input_tensor(*c, plan, Role::Student));
            {
                NoGradGuard guard;
                it.teacher = nets::segnet_forward(teacher, Var(input_tensor(*c, plan, Role::Teacher)), false, nullptr);
            }
            it.student = nets::segnet_forward(ctx.student, it.x_pre, true, &ctx.state.rng);
            Var scores = nets::disc_forward(ctx.disc, it.x_pre, it.student.probs, it.student.pyramid);
            losses::LossBreakdown bd;
            Var loss = losses::student_loss(it.student.probs, c->labels, scores, cfg.lambda, w, &bd);
            backward(ops::scale(loss, inv));
            st.ce += bd.ce;
            st.adv += bd.adv;
            st.total += bd.total;
            ++st.iterations;
            items.push_back(std::move(it));
        }
        ctx.disc.params.set_requires_grad(true);
        ctx.student_opt.step(ctx.student.params);
        ctx.student.params.zero_grad();

        // Discriminator step on detached student outputs vs teacher outputs.
        std::vector<Var> losses_hd;
        std::size_t correct = 0, total = 0;
        for (auto& it : items) {
            std::vector<Var> pyr;
            for (const auto& p : it.student.pyramid) pyr.push_back(ops::detach(p));
            Var fake = nets::disc_forward(ctx.disc, it.x_pre, ops::detach(it.student.probs), pyr);
            Var real = nets::disc_forward(ctx.disc, it.x_pre, it.teacher.probs, it.teacher.pyramid);
            const double acc = losses::hd_accuracy(fake.value(), real.value());
            const std::size_t n = fake.value().size() + real.value().size();
            correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(n)));
            total += n;
            Var l = losses::hd_loss(fake, real);
            st.hd_loss += l.value()[0];
            st.hd_accuracy += acc;
            losses_hd.push_back(l);
        }
        const double batch_acc = static_cast<double>(correct) / static_cast<double>(total);
        if (batch_acc <= cfg.hd_accuracy_gate) {
            for (const auto& l : losses_hd) backward(ops::scale(l, inv));
            ctx.disc_opt.step(ctx.disc.params);
            ++st.hd_updates;
        }
        ctx.disc.params.zero_grad();
        ++ctx.state.step;
    }
    const double n = static_cast<double>(std::max(st.iterations, 1));
    st.ce /= n;
    st.adv /= n;
    st.total /= n;
    st.hd_loss /= n;
    st.hd_accuracy /= n;
    ctx.state.epoch = e;
    return st;
}

DistillResult run_distillation(const nets::SegNet& teacher_in, const nets::SegNet& student, const DataSplit& data,
                               const ModalityPlan& plan, const DistillConfig& cfg, std::uint64_t seed,
                               const losses::ClassWeights& initial_weights, int weight_epoch_offset,
                               const RunOptions& opt)
{
    cfg.validate();
    check_compatible(teacher_in.config, student.config);
    const auto s_inputs = plan.inputs(Role::Student);
    if (student.config.in_channels != static_cast<int>(s_inputs.size()))
        throw CheckpointError("student checkpoint expects " + std::to_string(student.config.in_channels) +
                              " inputs but the modality plan provides " + std::to_string(s_inputs.size()));
    check_cases(data, plan.inputs(Role::Teacher), teacher_in.config);
    if (initial_weights.w.size() != static_cast<std::size_t>(student.config.num_classes))
        throw CheckpointError("class weight count does not match the network's classes");

    // Private, gradient-free copy: nothing in this function can touch the caller's teacher.
    nets::SegNet teacher = clone(teacher_in);
    teacher.params.set_requires_grad(false);

    const auto kind = cfg.hierarchical ? nets::DiscKind::Hierarchical : nets::DiscKind::NonHierarchical;
    Rng init(mix_seed(seed, 3));
    DistillContext ctx{clone(student),
                       nets::make_discriminator(kind, student.config, student.config.in_channels, init),
                       Adam(cfg.adam),
                       Adam(cfg.adam),
                       {},
                       initial_weights,
                       weight_epoch_offset};
    ctx.state.rng.seed(mix_seed(seed, 4));
    ctx.state.lr_current = cfg.adam.lr;

    const json config = merged({{"stage", "distill"},
                                {"seed", seed},
                                {"discriminator", nets::to_string(kind)},
                                {"modalities", s_inputs},
                                {"teacher_network", teacher.config.to_json()},
                                {"network", student.config.to_json()},
                                {"class_weights", initial_weights.w},
                                {"ce_weight_gamma", initial_weights.gamma},
                                {"weight_epoch_offset", weight_epoch_offset},
                                {"distill", cfg.to_json()}},
                               opt.extra_config);
    const json ckpt_meta = {{"stage", "distill"},
                            {"role", "student"},
                            {"discriminator", nets::to_string(kind)},
                            {"modalities", s_inputs},
                            {"class_weights", initial_weights.w},
                            {"ce_weight_gamma", initial_weights.gamma},
                            {"ce_epochs", weight_epoch_offset + cfg.epochs}};

    RunDir rd(opt.run_dir);
    rd.begin(config, opt.resume);
    DistillResult res;
    nets::SegNet best = clone(ctx.student);
    if (opt.resume) {
        const auto a = nets::load_archive(rd.state());
        nets::load_params_into(ctx.student.params, a, "student.");
        nets::load_params_into(ctx.disc.params, a, "disc.");
        ctx.student_opt.load_from(a, "opt_student.");
        ctx.disc_opt.load_from(a, "opt_disc.");
        ctx.state = load_state_fields(a);
        best = nets::load_segnet(rd.best());
        auto log = read_log(opt.run_dir);
        if (log.size() < static_cast<std::size_t>(ctx.state.epoch)) throw CheckpointError("log shorter than training state");
        log.resize(static_cast<std::size_t>(ctx.state.epoch));
        rd.write_log(log);
        res.log = std::move(log);
    }

    int ran = 0;
    while (ctx.state.epoch < cfg.epochs && (opt.stop_after < 0 || ran < opt.stop_after)) {
        const auto s = distill_epoch(ctx, teacher, data.train, plan, cfg, seed);
        const int e = ctx.state.epoch;
        const auto val = evaluate(ctx.student, data.val, plan, Role::Student);
        const double et = region_mean(val, Region::ET);
        const bool improved = et > ctx.state.best_val_score;
        if (improved) {
            ctx.state.best_val_score = et;
            ctx.state.best_epoch = e;
            best = clone(ctx.student);
        }

        json rec = {{"epoch", e},
                    {"ce", s.ce},
                    {"adv", s.adv},
                    {"lambda", cfg.lambda},
                    {"total", s.total},
                    {"hd_loss", s.hd_loss},
                    {"hd_accuracy", s.hd_accuracy},
                    {"hd_updates", s.hd_updates},
                    {"iterations", s.iterations}};
        rec.update(val_fields(val));
        rec["best"] = improved;
        res.log.push_back(rec);

        if (rd.active()) {
            rd.append_log(rec);
            json meta = ckpt_meta;
            if (improved) {
                meta["epoch"] = e;
                meta["val_score"] = et;
                nets::save_segnet(rd.best(), best, meta);
            }
            meta["epoch"] = e;
            meta["val_score"] = et;
            nets::save_segnet(rd.last(), ctx.student, meta);
            nets::Archive a;
            a.meta["stage"] = "distill";
            save_state_fields(a, ctx.state);
            nets::append_params(a, ctx.student.params, "student.");
            nets::append_params(a, ctx.disc.params, "disc.");
            ctx.student_opt.save_into(a, "opt_student.");
            ctx.disc_opt.save_into(a, "opt_disc.");
            save_atomic(rd.state(), a);
        }
        if (opt.on_epoch) opt.on_epoch(rec);
        ++ran;
    }

    res.best = std::move(best);
    res.last = std::move(ctx.student);
    res.disc = std::move(ctx.disc);
    res.state = ctx.state;
    res.finished = ctx.state.epoch >= cfg.epochs;
    return res;
}

}  // namespace hadnet::train
