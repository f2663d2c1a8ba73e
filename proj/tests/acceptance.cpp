// Acceptance run: one PASS/FAIL line per criterion 2-10.
// `acceptance` runs everything; `acceptance 3 8` runs a subset.
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "hadnet/artifacts.hpp"
#include "hadnet/train.hpp"
#include "hadnet/uncertainty.hpp"
#include "test_util.hpp"
#include "ttest_refs.hpp"

using namespace hadnet;
using namespace hadnet::uncertainty;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::ostringstream detail;
    std::vector<std::string> failed;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            failed.push_back(what);
        }
    }
};

double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nets::NetworkConfig net_cfg(int k, int scales, int rank, int in = 3, double p = 0.0)
{
    nets::NetworkConfig c;
    c.k = k;
    c.scales = scales;
    c.spatial_rank = rank;
    c.in_channels = in;
    c.p = p;
    return c;
}

Case phantom(std::uint64_t master, std::size_t i)
{
    synth::PhantomConfig pc;  // 32^2
    pc.seed = synth::case_seed(master, i);
    const auto ph = synth::generate_phantom(pc);
    return preprocess_case("case_" + std::to_string(i), ph.volume, ph.labels, {});
}

std::vector<double> per_case_et(const nets::SegNet& net, const std::vector<Case>& cases, const ModalityPlan& plan,
                                Role role)
{
    std::vector<double> out;
    for (const auto& c : cases) {
        const auto pred = train::predict(net, input_tensor(c, plan, role), c.volume.extent().rank);
        out.push_back(metrics::evaluate_case(pred, c.labels).et);
    }
    return out;
}

// ---------------------------------------------------------------------------

Outcome criterion2()
{
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 trng(1);
    int checked = 0;
    for (int k : {2, 4})
        for (int scales : {2, 4})
            for (int rank : {2, 3})
                for (std::size_t n : {16u, 32u}) {
                    Rng rng(static_cast<std::uint64_t>(k * 100 + scales * 10 + rank));
                    const auto c = net_cfg(k, scales, rank);
                    const auto net = nets::make_segnet(c, rng);
                    const std::size_t depth = rank == 3 ? n : 1;
                    const Var x(testutil::random_tensor({3, depth, n, n}, trng));
                    const auto out = nets::segnet_forward(net, x, false, nullptr);
                    const std::string tag = "k" + std::to_string(k) + " s" + std::to_string(scales) + " r" +
                                            std::to_string(rank) + " n" + std::to_string(n);
                    o.require(out.probs.shape() == std::vector<std::size_t>{4, depth, n, n}, tag + " output");
                    o.require(out.pyramid.size() == std::size_t(scales), tag + " pyramid size");
                    for (std::size_t i = 0; i < out.pyramid.size(); ++i) {
                        const std::size_t s = n >> (i + 1);
                        o.require(out.pyramid[i].shape() ==
                                      std::vector<std::size_t>{c.filters(int(i) + 1), rank == 3 ? s : 1, s, s},
                                  tag + " level " + std::to_string(i));
                    }
                    for (auto kind : {nets::DiscKind::Hierarchical, nets::DiscKind::NonHierarchical}) {
                        const auto d = nets::make_discriminator(kind, c, 3, rng);
                        const std::size_t s = n / 16;
                        o.require(nets::disc_forward(d, x, out.probs, out.pyramid).shape() ==
                                      std::vector<std::size_t>{1, rank == 3 ? s : 1, s, s},
                                  tag + " " + nets::to_string(kind) + " scores");
                    }
                    ++checked;
                }
    const double secs = seconds_since(t0);
    o.require(secs < 60, "runtime");
    o.detail << checked << " configs, " << secs << " s";
    return o;
}

Outcome criterion3()
{
    Outcome o;
    const Tensor half({1, 1, 2, 2}, 0.5);
    const double hd = losses::hd_loss(half, half);
    o.require(std::abs(hd - 0.5) <= 1e-7, "hd_loss");

    std::mt19937_64 rng(3);
    const Extent e = Extent::make2d(6, 6);
    const Tensor probs = testutil::random_probs(4, e, rng);
    const auto target = testutil::random_seg(e, rng);
    const losses::ClassWeights w{{1.0, 3.0, 2.0, 5.0}, 0.98};
    const Tensor scores = testutil::random_tensor({1, 1, 2, 2}, rng, 0, 1);
    const double ce = losses::weighted_ce(probs, target, w);
    const double l0 = losses::student_loss(probs, target, scores, 0.0, w).total;
    o.require(std::abs(l0 - ce) <= 1e-7, "student_loss lambda=0");

    losses::ClassWeights w0{{5.0, 5.0, 5.0, 5.0}, 0.98};
    const double w1 = losses::decay_weights(w0, 1).w[0];
    o.require(std::abs(w1 - 4.92) <= 1e-9, "decay_weights");

    const Tensor uniform({4, 1, 6, 6}, 0.25);
    const double u = losses::weighted_ce(uniform, target, losses::ClassWeights::uniform(4));
    o.require(std::abs(u - std::log(4.0)) <= 1e-6, "uniform CE");

    o.detail.precision(12);
    o.detail << "hd=" << hd << " |l0-ce|=" << std::abs(l0 - ce) << " w(1)=" << w1 << " ce_uniform=" << u;
    return o;
}

Outcome criterion4()
{
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 trng(4);
    std::map<std::string, double> worst;
    auto note = [&](const std::string& what, double rel) { worst[what] = std::max(worst[what], rel); };

    {
        const Extent e = Extent::make3d(2, 2, 2);
        Var p(testutil::random_probs(4, e, trng), true);
        Var s(testutil::random_tensor({1, 1, 1, 1}, trng, 0, 1), true);
        Var r(testutil::random_tensor({1, 1, 1, 1}, trng, 0, 1), true);
        const auto target = testutil::random_seg(e, trng);
        const losses::ClassWeights w{{1.0, 2.0, 3.0, 4.0}, 0.98};
        note("weighted_ce", testutil::fd_check(p, [&] { return losses::weighted_ce(p, target, w); }).worst_rel);
        auto sl = [&] { return losses::student_loss(p, target, s, 0.2, w); };
        note("student_loss", testutil::fd_check(p, sl).worst_rel);
        note("student_loss", testutil::fd_check(s, sl).worst_rel);
        auto hl = [&] { return losses::hd_loss(s, r); };
        note("hd_loss", testutil::fd_check(s, hl).worst_rel);
        note("hd_loss", testutil::fd_check(r, hl).worst_rel);
    }
    {
        Rng rng(10);
        auto net = nets::make_segnet(net_cfg(2, 2, 2), rng);
        Var x(testutil::random_tensor({3, 1, 8, 8}, trng), true);
        const Tensor w = testutil::random_tensor({4, 1, 8, 8}, trng);
        auto f = [&] { return ops::weighted_sum(nets::segnet_forward(net, x, false, nullptr).probs, w); };
        note("segnet", testutil::fd_check(x, f, 1e-5, 32).worst_rel);
        for (auto& [name, v] : net.params.items()) note("segnet", testutil::fd_check(v, f, 1e-5, 8).worst_rel);
    }
    {
        Rng rng(12);
        const auto c = net_cfg(2, 2, 2);
        auto net = nets::make_segnet(c, rng);
        auto hd = nets::make_discriminator(nets::DiscKind::Hierarchical, c, 3, rng);
        Var x(testutil::random_tensor({3, 1, 32, 32}, trng), true);
        const Tensor w = testutil::random_tensor({1, 1, 2, 2}, trng);
        auto f = [&] {
            const auto out = nets::segnet_forward(net, x, false, nullptr);
            return ops::weighted_sum(nets::hd_forward(hd, x, out.probs, out.pyramid), w);
        };
        note("segnet+HD", testutil::fd_check(x, f, 1e-5, 32).worst_rel);
        for (auto& [name, v] : hd.params.items()) note("segnet+HD", testutil::fd_check(v, f, 1e-5, 8).worst_rel);
    }
    for (const auto& [what, rel] : worst) {
        o.require(rel < 1e-3, what);
        o.detail << what << "=" << rel << " ";
    }
    const double secs = seconds_since(t0);
    o.require(secs < 300, "runtime");
    o.detail << "(" << secs << " s)";
    return o;
}

Outcome criterion5()
{
    Outcome o;
    testutil::TempDir tmp;
    DataSplit d;
    for (std::size_t i = 0; i < 6; ++i) (i < 4 ? d.train : d.val).push_back(phantom(5, i));
    const auto plan = ModalityPlan::from_available(d.train[0].volume.names, "t1ce");
    train::PretrainConfig pc;
    pc.epochs = 3;
    pc.adam.lr = 2e-3;
    const auto nc = net_cfg(2, 2, 2);
    const auto T = train::pretrain(nc, d, plan, Role::Teacher, pc, 1);
    const auto S = train::pretrain(nc, d, plan, Role::Student, pc, 2);
    nets::save_segnet(tmp / "teacher.ckpt", T.best);
    const nets::SegNet teacher = nets::load_segnet(tmp / "teacher.ckpt");
    const std::string file_before = sha256_file(tmp / "teacher.ckpt");
    const std::string mem_before = params_digest(teacher.params);

    train::DistillConfig dc;
    dc.epochs = 10;
    dc.adam.lr = 1e-3;
    for (const char* run : {"a", "b"}) {
        train::RunOptions opt;
        opt.run_dir = tmp / run;
        train::run_distillation(teacher, S.best, d, plan, dc, 3, S.initial_weights, pc.epochs, opt);
    }
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    const std::string la = slurp(tmp / "a" / "log.jsonl"), lb = slurp(tmp / "b" / "log.jsonl");
    o.require(sha256_file(tmp / "teacher.ckpt") == file_before, "teacher checkpoint hash");
    o.require(params_digest(teacher.params) == mem_before, "teacher parameters");
    o.require(!la.empty() && std::count(la.begin(), la.end(), '\n') == 10, "10 log records");
    o.require(la == lb, "log.jsonl bitwise");
    o.detail << "teacher sha " << file_before.substr(0, 12) << ", log sha " << sha256_hex({(const std::uint8_t*)la.data(), la.size()}).substr(0, 12);
    return o;
}

Outcome criterion6()
{
    Outcome o;
    const auto t0 = Clock::now();
    DataSplit d;
    for (std::size_t i = 0; i < 2; ++i) d.train.push_back(phantom(11, i));
    d.val = d.train;
    const auto plan = ModalityPlan::from_available(d.train[0].volume.names, "t1ce");
    train::PretrainConfig pc;
    pc.epochs = 300;
    pc.adam.lr = 1e-2;
    pc.augmentation = false;
    auto nc = net_cfg(4, 4, 2, 3, 0.2);
    const auto res = train::pretrain(nc, d, plan, Role::Student, pc, 3);
    const double et = train::evaluate(res.best, d.train, plan, Role::Student).aggregate(Region::ET).mean;
    const double secs = seconds_since(t0);
    o.require(et > 0.95, "training ET Dice");
    o.require(secs < 900, "runtime");
    o.detail << "training ET Dice " << et << " at best epoch " << res.state.best_epoch << ", " << secs << " s";
    return o;
}

Outcome criterion7()
{
    Outcome o;
    const auto t0 = Clock::now();
    constexpr int kPretrainEpochs = 100, kDistillEpochs = 200;
    std::vector<double> student_med, had_med, ad_med;
    int had_beats_ad = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        DataSplit d;
        for (std::size_t i = 0; i < 62; ++i) (i < 16 ? d.train : i < 32 ? d.val : d.test).push_back(phantom(seed, i));
        const auto plan = ModalityPlan::from_available(d.train[0].volume.names, "t1ce");
        const auto nc = net_cfg(4, 4, 2, 3, 0.2);
        train::PretrainConfig pc;
        pc.epochs = kPretrainEpochs;
        pc.adam.lr = 2e-3;
        const auto T = train::pretrain(nc, d, plan, Role::Teacher, pc, seed);
        const auto S = train::pretrain(nc, d, plan, Role::Student, pc, seed + 100);
        std::map<bool, double> med;
        for (bool h : {true, false}) {
            train::DistillConfig dc;
            dc.epochs = kDistillEpochs;
            dc.adam.lr = 1e-3;
            dc.hierarchical = h;
            const auto D =
                train::run_distillation(T.best, S.best, d, plan, dc, seed + 200, S.initial_weights, kPretrainEpochs);
            med[h] = median(per_case_et(D.best, d.test, plan, Role::Student));
        }
        const double s = median(per_case_et(S.best, d.test, plan, Role::Student));
        student_med.push_back(s);
        had_med.push_back(med[true]);
        ad_med.push_back(med[false]);
        had_beats_ad += med[true] >= med[false];
        o.detail << "seed " << seed << ": student " << s << " HAD " << med[true] << " AD " << med[false] << "; ";
    }
    const double ms = median(student_med), mh = median(had_med);
    o.require(mh >= ms, "median HAD >= median student");
    o.require(had_beats_ad >= 2, "HAD >= AD in 2 of 3 seeds");
    const double secs = seconds_since(t0);
    o.require(secs < 7200, "runtime");
    o.detail << "median over seeds: student " << ms << " HAD " << mh << "; HAD >= AD in " << had_beats_ad
             << "/3; 30 test cases per seed; " << secs << " s";
    return o;
}

Outcome criterion8()
{
    Outcome o;
    const double h50 = normalized_binary_entropy(0.5), h25 = normalized_binary_entropy(0.25);
    o.require(std::abs(h50 - 100) <= 1e-9, "H(0.5)");
    o.require(std::abs(h25 - 81.13) <= 0.01, "H(0.25)");

    std::mt19937_64 rng(8);
    const Extent e = Extent::make3d(4, 5, 6);
    std::uniform_real_distribution<double> d(0, 100);
    auto count = [](const Mask& m) { return std::size_t(std::count(m.data.begin(), m.data.end(), 1)); };
    int identity_ok = 0, monotone_ok = 0;
    for (int i = 0; i < 100; ++i) {
        const Mask pred = testutil::random_mask(e, rng, 0.4), gt = testutil::random_mask(e, rng, 0.4);
        UncertaintyMap u;
        u.values = Grid<double>(e, 0.0);
        for (auto& v : u.values.data) v = d(rng);
        const auto full = filter_at_threshold(pred, u, gt, 100);
        identity_ok += count(full.kept) == e.voxels() && full.dice_filtered == metrics::dice(pred, gt) &&
                       full.ftp_ratio == 0 && full.ftn_ratio == 0;
        std::size_t prev = e.voxels() + 1;
        bool mono = true;
        for (double T : kDefaultThresholds) {
            const std::size_t k = count(filter_at_threshold(pred, u, gt, T).kept);
            mono = mono && k <= prev;
            prev = k;
        }
        monotone_ok += mono;
    }
    o.require(identity_ok == 100, "T=100 identity");
    o.require(monotone_ok == 100, "monotone kept voxels");

    const Mask gt = testutil::random_mask(Extent::make2d(8, 8), rng, 0.4);
    UncertaintyMap zero;
    zero.values = Grid<double>(gt.extent, 0.0);
    std::vector<FilteredResult> r;
    for (double T : kDefaultThresholds) r.push_back(filter_at_threshold(gt, zero, gt, T));
    const double score = uncertainty_score(r);
    o.require(std::abs(score - 1.0) <= 1e-9, "perfect score");
    o.detail << "H(0.5)=" << h50 << " H(0.25)=" << h25 << " identity " << identity_ok << "/100 monotone "
             << monotone_ok << "/100 perfect=" << score;
    return o;
}

Outcome criterion9()
{
    Outcome o;
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> dens(0.0, 1.0);
    const Extent e = Extent::make3d(4, 4, 4);
    int exact = 0;
    for (int i = 0; i < 1000; ++i) {
        const Mask a = testutil::random_mask(e, rng, dens(rng)), b = testutil::random_mask(e, rng, dens(rng));
        std::set<std::size_t> sa, sb, inter;
        for (std::size_t j = 0; j < a.size(); ++j) {
            if (a.data[j]) sa.insert(j);
            if (b.data[j]) sb.insert(j);
        }
        std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(inter, inter.end()));
        const double ref = sa.empty() && sb.empty() ? 1.0 : 2.0 * double(inter.size()) / double(sa.size() + sb.size());
        exact += metrics::dice(a, b) == ref;
    }
    o.require(exact == 1000, "Dice oracle");
    double worst_p = 0;
    for (const auto& ref : testutil::ttest_references())
        worst_p = std::max(worst_p, std::abs(metrics::paired_ttest(ref.a, ref.b).p - ref.p));
    o.require(worst_p <= 1e-6, "t-test p");
    o.detail << "Dice exact " << exact << "/1000, worst |p - ref| " << worst_p << " over "
             << testutil::ttest_references().size() << " vectors";
    return o;
}

Outcome criterion10(const fs::path& scratch)
{
    Outcome o;
    const auto t0 = Clock::now();
    const fs::path dir = scratch / "pipeline";
    auto at = [&](const std::string& s) { return (dir / s).string(); };
    const std::string cfg = std::string(" --config ") + HADNET_TOY_CONFIG;
    const std::vector<std::pair<std::string, std::string>> steps{
        {"synth", "synth" + cfg + " --out " + at("data")},
        {"pretrain teacher", "pretrain" + cfg + " --role teacher --data " + at("data") + " --out " + at("teacher")},
        {"pretrain student", "pretrain" + cfg + " --role student --data " + at("data") + " --out " + at("student")},
        {"distill", "distill" + cfg + " --mode hadnet --teacher " + at("teacher") + " --student " + at("student") +
                        " --data " + at("data") + " --out " + at("hadnet")},
        {"infer student", "infer" + cfg + " --model " + at("student") + " --data " + at("data") + " --out " +
                              at("pred_student")},
        {"infer hadnet", "infer" + cfg + " --model " + at("hadnet") + " --data " + at("data") + " --out " +
                             at("pred_hadnet")},
        {"uncertainty", "uncertainty" + cfg + " --model " + at("hadnet") + " --data " + at("data") + " --out " +
                            at("unc")},
        {"eval student", "eval --pred " + at("pred_student") + " --gt " + at("data")},
        {"eval hadnet", "eval --pred " + at("pred_hadnet") + " --gt " + at("data")},
        {"report", "report --method student=" + at("pred_student") + " --method hadnet=" + at("pred_hadnet") +
                       " --gt " + at("data") + " --out " + at("report")},
    };
    fs::create_directories(dir);
    for (const auto& [name, args] : steps) {
        const std::string cmd = std::string(HADNET_CLI) + " " + args + " >> " + at("pipeline.log") + " 2>&1";
        const int st = std::system(cmd.c_str());
        const int code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
        o.require(code == 0, name + " exit " + std::to_string(code));
        if (code != 0) return o;
    }
    std::ifstream in(dir / "report" / "report.txt");
    const std::string txt{std::istreambuf_iterator<char>(in), {}};
    for (const char* s : {"WT", "TC", "ET", "p-values", "student vs hadnet"})
        o.require(txt.find(s) != std::string::npos, std::string("report has ") + s);
    const double secs = seconds_since(t0);
    o.require(secs < 1800, "runtime");
    o.detail << steps.size() << " steps exit 0, " << secs << " s";
    return o;
}

}  // namespace

int main(int argc, char** argv)
{
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    testutil::TempDir scratch;
    const std::vector<std::pair<int, std::function<Outcome()>>> all{
        {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9},
        {10, [&] { return criterion10(scratch.path()); }},
    };
    int failures = 0;
    for (const auto& [id, run] : all) {
        if (!wanted.empty() && !wanted.count(id)) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.failed.push_back(std::string("exception: ") + e.what());
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail.str();
        for (const auto& f : o.failed) std::cout << " [failed: " << f << "]";
        std::cout << std::endl;
    }
    return failures ? 1 : 0;
}
