// hadnet: synth -> pretrain (teacher, student) -> distill -> infer -> uncertainty -> eval -> report

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "hadnet/artifacts.hpp"
#include "hadnet/config.hpp"
#include "hadnet/dataset.hpp"
#include "hadnet/errors.hpp"
#include "hadnet/metrics.hpp"
#include "hadnet/synthdata.hpp"
#include "hadnet/train.hpp"
#include "hadnet/uncertainty.hpp"
#include "hadnet/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hadnet;

namespace {

struct Common {
    std::optional<fs::path> config;
    std::optional<std::uint64_t> seed;
    fs::path out;
};

RunConfig resolve(const Common& c)
{
    RunConfig cfg = load_run_config(c.config, environment());
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.phantom.seed = *c.seed;
    }
    return cfg;
}

void write_text(const fs::path& p, const std::string& text)
{
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
    if (!out) throw IoError("write error in " + p.string());
}

PreprocessOptions preprocess_options(const RunConfig& cfg) { return {cfg.data.crop}; }

/// A checkpoint path, or a run directory holding ckpt_best.
fs::path checkpoint_path(const fs::path& p)
{
    const fs::path c = fs::is_directory(p) ? p / "ckpt_best" : p;
    if (!fs::exists(c)) throw CheckpointError("checkpoint not found: " + c.string());
    return c;
}

nets::SegNet load_model(const fs::path& p, json* meta)
{
    return nets::load_segnet(checkpoint_path(p), meta);
}

std::vector<std::string> model_modalities(const nets::SegNet& net, const json& meta)
{
    if (meta.contains("modalities")) return meta.at("modalities").get<std::vector<std::string>>();
    return synth::pre_contrast_names(net.config.in_channels);
}

fs::path first_case_dir(const fs::path& data)
{
    const auto m = synth::Manifest::load(data / "manifest.json");
    if (m.case_split.empty()) throw DataError("dataset " + data.string() + " lists no cases");
    return data / m.case_split.begin()->first;
}

/// Case directories selected by --case or --data/--split.
std::vector<fs::path> selected_cases(const std::optional<fs::path>& one, const std::optional<fs::path>& data,
                                     const std::string& split)
{
    if (one) {
        if (!fs::is_directory(*one)) throw DataError("case directory not found: " + one->string());
        return {*one};
    }
    if (!data) throw ConfigError("pass --case or --data");
    const auto m = synth::Manifest::load(*data / "manifest.json");
    std::vector<fs::path> out;
    for (const auto& id : split == "all" ? [&] {
             std::vector<std::string> all;
             for (const auto& [k, _] : m.case_split) all.push_back(k);
             return all;
         }()
                                         : m.cases_in(split))
        out.push_back(*data / id);
    if (out.empty()) throw DataError("no cases in split '" + split + "'");
    return out;
}

void dump_access_log(const std::optional<fs::path>& path, const AccessLog& log)
{
    if (!path) return;
    std::string text;
    for (const auto& p : log.opened) text += p + "\n";
    write_text(*path, text);
}

void check_network_against(const RunConfig& cfg, const nets::NetworkConfig& n, const std::string& what)
{
    if (cfg.network.k != n.k || cfg.network.scales != n.scales || cfg.network.spatial_rank != n.spatial_rank)
        throw CheckpointError(what + " checkpoint (k=" + std::to_string(n.k) + ", scales=" + std::to_string(n.scales) +
                              ", rank=" + std::to_string(n.spatial_rank) + ") does not match the configured network (k=" +
                              std::to_string(cfg.network.k) + ", scales=" + std::to_string(cfg.network.scales) +
                              ", rank=" + std::to_string(cfg.network.spatial_rank) + ")");
}

void print_epoch(const json& rec)
{
    std::cerr << rec.dump() << "\n";
}

// --- commands ------------------------------------------------------------------

int cmd_synth(const Common& c, std::optional<std::size_t> cases)
{
    RunConfig cfg = resolve(c);
    if (cases) cfg.data.cases = *cases;
    cfg.validate();
    auto m = synth::generate_dataset(cfg.phantom, cfg.data.cases, cfg.data.split, c.out);
    write_text(c.out / "config.json", json{{"resolved", cfg.to_json()}}.dump(2) + "\n");
    std::cout << "wrote " << m.case_split.size() << " cases to " << c.out << " (train " << m.cases_in("train").size()
              << ", val " << m.cases_in("val").size() << ", test " << m.cases_in("test").size() << ")\n";
    return 0;
}

int cmd_pretrain(const Common& c, const std::string& role_s, const fs::path& data, bool resume, int stop_after)
{
    RunConfig cfg = resolve(c);
    const Role role = role_from_string(role_s);
    const auto available = case_modalities(first_case_dir(data));
    const auto plan = ModalityPlan::from_available(available, cfg.data.contrast);
    if (role == Role::Teacher && std::find(available.begin(), available.end(), cfg.data.contrast) == available.end())
        throw DataError("teacher needs the contrast modality '" + cfg.data.contrast + "', absent from " + data.string());
    const auto split = load_dataset(data, plan.inputs(role), preprocess_options(cfg));

    train::RunOptions opt;
    opt.run_dir = c.out;
    opt.resume = resume;
    opt.stop_after = stop_after;
    opt.extra_config = {{"resolved", cfg.to_json()}, {"data_dir", fs::absolute(data).lexically_normal().string()}};
    opt.on_epoch = print_epoch;
    auto res = train::pretrain(cfg.network, split, plan, role, cfg.pretrain, cfg.seed, opt);
    std::cout << "pretrain " << role_s << ": " << res.state.epoch << "/" << cfg.pretrain.epochs
              << " epochs, best val score " << res.state.best_val_score << " at epoch " << res.state.best_epoch
              << "\n";
    return 0;
}

int cmd_distill(const Common& c, const std::string& mode, const fs::path& teacher_p, const fs::path& student_p,
                const fs::path& data, bool resume, int stop_after)
{
    RunConfig cfg = resolve(c);
    const auto kind = nets::disc_kind_from_string(mode);
    cfg.distill.hierarchical = kind == nets::DiscKind::Hierarchical;

    json tmeta, smeta;
    const auto teacher = load_model(teacher_p, &tmeta);
    const auto student = load_model(student_p, &smeta);
    train::check_compatible(teacher.config, student.config);
    if (c.config) {
        check_network_against(cfg, teacher.config, "teacher");
        check_network_against(cfg, student.config, "student");
    }
    const auto s_mods = model_modalities(student, smeta);
    ModalityPlan plan{s_mods, cfg.data.contrast};
    const auto t_mods = model_modalities(teacher, tmeta);
    if (t_mods != plan.inputs(Role::Teacher))
        throw CheckpointError("teacher modalities do not equal the student's plus '" + cfg.data.contrast + "'");
    const auto split = load_dataset(data, plan.inputs(Role::Teacher), preprocess_options(cfg));

    losses::ClassWeights w0 = losses::ClassWeights::uniform(student.config.num_classes);
    int offset = 0;
    if (smeta.contains("class_weights")) {
        w0.w = smeta.at("class_weights").get<std::vector<double>>();
        w0.gamma = smeta.value("ce_weight_gamma", w0.gamma);
        offset = smeta.value("ce_epochs", 0);
    }

    train::RunOptions opt;
    opt.run_dir = c.out;
    opt.resume = resume;
    opt.stop_after = stop_after;
    opt.extra_config = {{"resolved", cfg.to_json()},
                        {"data_dir", fs::absolute(data).lexically_normal().string()},
                        {"teacher_checkpoint", fs::absolute(checkpoint_path(teacher_p)).lexically_normal().string()},
                        {"teacher_sha256", sha256_file(checkpoint_path(teacher_p))},
                        {"student_checkpoint", fs::absolute(checkpoint_path(student_p)).lexically_normal().string()}};
    opt.on_epoch = print_epoch;
    auto res = train::run_distillation(teacher, student, split, plan, cfg.distill, cfg.seed, w0, offset, opt);
    std::cout << "distill (" << nets::to_string(kind) << "): " << res.state.epoch << "/" << cfg.distill.epochs
              << " epochs, best val ET " << res.state.best_val_score << " at epoch " << res.state.best_epoch << "\n";
    return 0;
}

struct LoadedCase {
    Case c;
    Extent original;
    std::array<double, 3> spacing;
};

LoadedCase load_for_inference(const fs::path& dir, const std::vector<std::string>& mods, const RunConfig& cfg,
                              bool with_labels, AccessLog* log)
{
    MultiModalVolume raw = load_case_volume(dir, mods, log);
    const Extent original = raw.extent();
    const auto spacing = raw.spacing;
    SegmentationMap seg;
    if (with_labels) seg = read_labels(find_volume_file(dir, "seg"), log);
    return {preprocess_case(dir.filename().string(), std::move(raw), std::move(seg), preprocess_options(cfg)), original,
            spacing};
}

int cmd_infer(const Common& c, const fs::path& model_p, const std::optional<fs::path>& one,
              const std::optional<fs::path>& data, const std::string& split, const std::optional<fs::path>& access)
{
    RunConfig cfg = resolve(c);
    json meta;
    const auto net = load_model(model_p, &meta);
    const auto mods = model_modalities(net, meta);
    const auto cases = selected_cases(one, data, split);
    AccessLog log;
    for (const auto& dir : cases) {
        auto lc = load_for_inference(dir, mods, cfg, false, &log);
        const Tensor x = nets::to_tensor(lc.c.volume);
        auto pred = restore_extent(train::predict(net, x, lc.c.volume.extent().rank), lc.original);
        const fs::path dst = one ? c.out : c.out / dir.filename() / "seg.nii.gz";
        if (dst.has_parent_path()) {
            std::error_code ec;
            fs::create_directories(dst.parent_path(), ec);
            if (ec) throw IoError("cannot create " + dst.parent_path().string() + ": " + ec.message());
        }
        write_labels_brats(dst, pred, lc.spacing);
    }
    dump_access_log(access, log);
    std::cout << "wrote predictions for " << cases.size() << " case(s) to " << c.out << "\n";
    return 0;
}

std::vector<double> parse_thresholds(const std::string& s)
{
    std::vector<double> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ConfigError("bad threshold '" + item + "'");
        }
    }
    return out;
}

int cmd_uncertainty(const Common& c, const fs::path& model_p, const std::optional<fs::path>& one,
                    const std::optional<fs::path>& data, const std::string& split, std::optional<int> samples,
                    const std::optional<std::string>& thresholds, const std::optional<std::string>& region,
                    const std::optional<fs::path>& access)
{
    RunConfig cfg = resolve(c);
    if (samples) cfg.uncertainty.samples = *samples;
    if (thresholds) cfg.uncertainty.thresholds = parse_thresholds(*thresholds);
    if (region) cfg.uncertainty.region = region_from_string(*region);
    cfg.validate();
    json meta;
    const auto net = load_model(model_p, &meta);
    if (!(net.config.p > 0)) throw ConfigError("MC dropout needs a network trained with dropout p > 0");
    const auto mods = model_modalities(net, meta);
    const auto cases = selected_cases(one, data, split);
    const RegionSpec spec = RegionSpec::of(cfg.uncertainty.region);
    const std::string rname(spec.name);

    AccessLog log;
    std::vector<uncertainty::CaseUncertainty> rows;
    for (const auto& dir : cases) {
        const bool has_gt = fs::exists(dir / "seg.nii.gz") || fs::exists(dir / "seg.nii") || fs::exists(dir / "seg.raw");
        auto lc = load_for_inference(dir, mods, cfg, has_gt, &log);
        const Tensor x = nets::to_tensor(lc.c.volume);
        const int rank = lc.c.volume.extent().rank;
        const auto samples_v = uncertainty::mc_sample(net, x, cfg.uncertainty.samples, cfg.seed);
        const auto unc = uncertainty::entropy_uncertainty(samples_v, spec, rank);

        SegmentationMap u8;
        u8.labels = uncertainty::to_u8(unc);
        const fs::path case_out = c.out / lc.c.id;
        std::error_code ec;
        fs::create_directories(case_out, ec);
        if (ec) throw IoError("cannot create " + case_out.string() + ": " + ec.message());
        write_nifti(case_out / ("unc_" + rname + ".nii.gz"), restore_extent(u8, lc.original).labels, lc.spacing);

        if (!has_gt) continue;
        const auto pred = train::predict(net, x, rank);
        const Mask pm = region_mask(pred, spec), gm = region_mask(lc.c.labels, spec);
        uncertainty::CaseUncertainty row{lc.c.id, spec.region, {}, 0};
        for (double T : cfg.uncertainty.thresholds) row.per_threshold.push_back(uncertainty::filter_at_threshold(pm, unc, gm, T));
        row.score = uncertainty::uncertainty_score(row.per_threshold);
        rows.push_back(std::move(row));
    }
    if (!rows.empty()) {
        write_text(c.out / "uncertainty.jsonl", uncertainty::report_jsonl(rows));
        const std::string table = uncertainty::render_report(rows);
        write_text(c.out / "uncertainty.txt", table);
        std::cout << table;
    }
    dump_access_log(access, log);
    return 0;
}

fs::path label_file(const fs::path& case_dir)
{
    for (const char* n : {"seg.nii.gz", "seg.nii", "seg.raw"})
        if (fs::exists(case_dir / n)) return case_dir / n;
    return {};
}

int cmd_eval(const Common& c, const fs::path& pred, const fs::path& gt)
{
    if (!fs::is_directory(pred)) throw DataError("prediction directory not found: " + pred.string());
    if (!fs::is_directory(gt)) throw DataError("ground-truth directory not found: " + gt.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(pred))
        if (e.is_directory() && !label_file(e.path()).empty()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw DataError("no predictions found in " + pred.string());

    metrics::EvalReport rep;
    for (const auto& d : dirs) {
        const std::string id = d.filename().string();
        const fs::path g = label_file(gt / id);
        if (g.empty()) throw DataError("no ground truth for case " + id + " in " + gt.string());
        rep.per_case.emplace_back(id, metrics::evaluate_case(read_labels(label_file(d)), read_labels(g)));
    }
    const fs::path out = c.out.empty() ? pred / "eval.jsonl" : c.out;
    write_text(out, rep.to_jsonl());
    std::cout << metrics::render_table({{pred.filename().string(), rep}});
    return 0;
}

int cmd_report(const Common& c, const std::vector<std::string>& methods, const std::optional<fs::path>& gt,
               int overlays)
{
    if (methods.empty()) throw ConfigError("report needs at least one --method NAME=DIR");
    std::vector<std::pair<std::string, metrics::EvalReport>> reps;
    std::vector<fs::path> pred_dirs;
    for (const auto& m : methods) {
        const auto eq = m.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--method expects NAME=DIR, got '" + m + "'");
        fs::path p = m.substr(eq + 1);
        const fs::path file = fs::is_directory(p) ? p / "eval.jsonl" : p;
        std::ifstream in(file);
        if (!in) throw DataError("cannot read evaluation " + file.string());
        std::stringstream ss;
        ss << in.rdbuf();
        reps.emplace_back(m.substr(0, eq), metrics::EvalReport::from_jsonl(ss.str()));
        pred_dirs.push_back(fs::is_directory(p) ? p : p.parent_path());
    }
    const std::string table = metrics::render_table(reps);
    write_text(c.out / "report.txt", table);

    json comps = json::array();
    for (const auto& cmp : metrics::compare_all(reps)) {
        json j = {{"a", cmp.a}, {"b", cmp.b}, {"n_common", cmp.n_common}};
        for (const auto& [r, t] : cmp.tests)
            j[to_string(r)] = t.degenerate ? json{{"degenerate", true}} : json{{"t", t.t}, {"p", t.p}, {"df", t.df}};
        comps.push_back(j);
    }
    json summary = {{"methods", json::object()}, {"comparisons", comps}};
    for (const auto& [name, rep] : reps)
        for (Region r : kAllRegions) {
            const auto s = rep.aggregate(r);
            summary["methods"][name][to_string(r)] = {{"mean", s.mean}, {"std", s.std}, {"n", rep.per_case.size()}};
        }
    write_text(c.out / "report.json", summary.dump(2) + "\n");

    if (gt && overlays > 0) {
        int written = 0;
        for (const auto& [id, _] : reps.front().second.per_case) {
            if (written >= overlays) break;
            const fs::path gdir = *gt / id;
            const auto mods = case_modalities(gdir);
            const std::string bg = std::find(mods.begin(), mods.end(), "flair") != mods.end() ? "flair" : mods.front();
            const auto vol = load_case_volume(gdir, {bg});
            const fs::path odir = c.out / "overlays";
            write_overlays(odir, id + "_gt", vol.channels.front(), read_labels(label_file(gdir)));
            for (std::size_t i = 0; i < reps.size(); ++i) {
                const fs::path pf = label_file(pred_dirs[i] / id);
                if (!pf.empty()) write_overlays(odir, id + "_" + reps[i].first, vol.channels.front(), read_labels(pf));
            }
            ++written;
        }
    }
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Hierarchical adversarial distillation for segmentation without a contrast modality"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool out_required) {
        sub->add_option("--config", common.config, "JSON config file or run directory");
        sub->add_option("--seed", common.seed, "Override the configured seed");
        auto* o = sub->add_option("--out", common.out, "Output path");
        if (out_required) o->required();
    };

    auto* synth = app.add_subcommand("synth", "Generate a phantom dataset");
    add_common(synth, true);
    std::optional<std::size_t> n_cases;
    synth->add_option("--cases", n_cases, "Number of cases");

    auto* pre = app.add_subcommand("pretrain", "Stage 1: train a teacher or student segmenter");
    add_common(pre, true);
    std::string role;
    fs::path data_dir;
    bool resume = false;
    int stop_after = -1;
    pre->add_option("--role", role, "teacher or student")->required();
    pre->add_option("--data", data_dir, "Dataset directory")->required();
    pre->add_flag("--resume", resume, "Continue the run in --out");
    pre->add_option("--stop-after", stop_after, "Stop after this many epochs (simulated interruption)");

    auto* dis = app.add_subcommand("distill", "Stage 2: adversarial distillation");
    add_common(dis, true);
    std::string mode = "hadnet";
    fs::path teacher_p, student_p;
    dis->add_option("--mode", mode, "hadnet (hierarchical) or adnet (final outputs only)");
    dis->add_option("--teacher", teacher_p, "Teacher checkpoint or run directory")->required();
    dis->add_option("--student", student_p, "Pretrained student checkpoint or run directory")->required();
    dis->add_option("--data", data_dir, "Dataset directory")->required();
    dis->add_flag("--resume", resume, "Continue the run in --out");
    dis->add_option("--stop-after", stop_after, "Stop after this many epochs (simulated interruption)");

    std::optional<fs::path> model_p, case_dir, data_opt, access;
    std::string split = "test";
    auto* inf = app.add_subcommand("infer", "Segment cases without the contrast channel");
    add_common(inf, true);
    inf->add_option("--model", model_p, "Checkpoint or run directory")->required();
    inf->add_option("--case", case_dir, "Single case directory (--out is then a file)");
    inf->add_option("--data", data_opt, "Dataset directory (--out is then a directory)");
    inf->add_option("--split", split, "train, val, test or all");
    inf->add_option("--access-log", access, "Write the list of opened files here");

    std::optional<int> samples;
    std::optional<std::string> thresholds, region;
    auto* unc = app.add_subcommand("uncertainty", "MC-dropout uncertainty maps and scores");
    add_common(unc, true);
    unc->add_option("--model", model_p, "Checkpoint or run directory")->required();
    unc->add_option("--case", case_dir, "Single case directory");
    unc->add_option("--data", data_opt, "Dataset directory");
    unc->add_option("--split", split, "train, val, test or all");
    unc->add_option("--samples", samples, "Number of MC samples");
    unc->add_option("--thresholds", thresholds, "Comma-separated thresholds");
    unc->add_option("--region", region, "WT, TC or ET");
    unc->add_option("--access-log", access, "Write the list of opened files here");

    fs::path pred_dir, gt_dir;
    auto* ev = app.add_subcommand("eval", "Dice per case and region");
    add_common(ev, false);
    ev->add_option("--pred", pred_dir, "Prediction directory (<case>/seg.nii.gz)")->required();
    ev->add_option("--gt", gt_dir, "Ground-truth dataset directory")->required();

    std::vector<std::string> methods;
    std::optional<fs::path> gt_opt;
    int n_overlays = 3;
    auto* rep = app.add_subcommand("report", "Comparison table, p-values and overlays");
    add_common(rep, true);
    rep->add_option("--method", methods, "NAME=DIR with DIR/eval.jsonl (repeatable)")->required();
    rep->add_option("--gt", gt_opt, "Dataset directory for overlay backgrounds and ground truth");
    rep->add_option("--overlays", n_overlays, "Number of cases to render");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorCategory::Config);
    }

    try {
        if (*synth) return cmd_synth(common, n_cases);
        if (*pre) return cmd_pretrain(common, role, data_dir, resume, stop_after);
        if (*dis) return cmd_distill(common, mode, teacher_p, student_p, data_dir, resume, stop_after);
        if (*inf) return cmd_infer(common, *model_p, case_dir, data_opt, split, access);
        if (*unc) return cmd_uncertainty(common, *model_p, case_dir, data_opt, split, samples, thresholds, region, access);
        if (*ev) return cmd_eval(common, pred_dir, gt_dir);
        if (*rep) return cmd_report(common, methods, gt_opt, n_overlays);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorCategory::Config);
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return static_cast<int>(ErrorCategory::Io);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
