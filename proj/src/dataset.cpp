#include "hadnet/dataset.hpp"

#include <algorithm>

#include "hadnet/errors.hpp"
#include "hadnet/nets.hpp"
#include "hadnet/synthdata.hpp"

namespace hadnet {

const char* to_string(Role r) { return r == Role::Teacher ? "teacher" : "student"; }

Role role_from_string(const std::string& s)
{
    if (s == "teacher") return Role::Teacher;
    if (s == "student") return Role::Student;
    throw ConfigError("role must be 'teacher' or 'student', got '" + s + "'");
}

std::vector<std::string> ModalityPlan::inputs(Role r) const
{
    std::vector<std::string> out = pre;
    if (r == Role::Teacher) out.push_back(contrast);
    return out;
}

ModalityPlan ModalityPlan::from_available(const std::vector<std::string>& available, const std::string& contrast)
{
    ModalityPlan p;
    p.contrast = contrast;
    for (const auto& m : available)
        if (m != contrast) p.pre.push_back(m);
    if (p.pre.empty()) throw DataError("no pre-contrast modalities available");
    return p;
}

Case preprocess_case(std::string id, MultiModalVolume raw, SegmentationMap labels, const PreprocessOptions& opt)
{
    if (raw.brain_mask.data.empty()) raw.brain_mask = infer_brain_mask(raw);
    if (opt.crop) {
        raw = center_crop(raw, *opt.crop, CropMode::PadThenCrop);
        if (!labels.labels.data.empty()) labels = center_crop(labels, *opt.crop, CropMode::PadThenCrop);
    }
    raw.brain_mask = infer_brain_mask(raw);
    if (!labels.labels.data.empty() && !(labels.extent() == raw.extent()))
        throw DataError("case " + id + ": labels extent " + labels.extent().str() + " differs from image extent " +
                        raw.extent().str());
    return {std::move(id), zscore_normalize(raw), std::move(labels)};
}

Case load_case(const std::filesystem::path& case_dir, const std::vector<std::string>& modalities,
               const PreprocessOptions& opt, bool with_labels, AccessLog* log)
{
    MultiModalVolume raw = load_case_volume(case_dir, modalities, log);
    SegmentationMap seg;
    if (with_labels) seg = read_labels(find_volume_file(case_dir, "seg"), log);
    return preprocess_case(case_dir.filename().string(), std::move(raw), std::move(seg), opt);
}

DataSplit load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& mods,
                       const PreprocessOptions& opt)
{
    const auto manifest = synth::Manifest::load(dir / "manifest.json");
    DataSplit split;
    for (const auto& [id, s] : manifest.case_split) {
        const auto case_dir = dir / id;
        Case c = load_case(case_dir, mods, opt, true);
        if (s == "train") split.train.push_back(std::move(c));
        else if (s == "val") split.val.push_back(std::move(c));
        else if (s == "test") split.test.push_back(std::move(c));
        else throw DataError("unknown split '" + s + "' for case " + id);
    }
    return split;
}

SegmentationMap restore_extent(const SegmentationMap& s, const Extent& original)
{
    const Extent& c = s.extent();
    if (c == original) return s;
    const auto off = center_offsets(original, c);
    SegmentationMap out;
    out.labels = Grid<std::uint8_t>(original, 0);
    for (std::size_t z = 0; z < c.dims[0]; ++z)
        for (std::size_t y = 0; y < c.dims[1]; ++y)
            for (std::size_t x = 0; x < c.dims[2]; ++x) {
                const std::ptrdiff_t oz = static_cast<std::ptrdiff_t>(z) + off[0];
                const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(y) + off[1];
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(x) + off[2];
                if (oz < 0 || oy < 0 || ox < 0 || oz >= static_cast<std::ptrdiff_t>(original.dims[0]) ||
                    oy >= static_cast<std::ptrdiff_t>(original.dims[1]) || ox >= static_cast<std::ptrdiff_t>(original.dims[2]))
                    continue;
                out.labels(static_cast<std::size_t>(oz), static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) =
                    s.labels(z, y, x);
            }
    return out;
}

Tensor input_tensor(const Case& c, const ModalityPlan& plan, Role r)
{
    return nets::to_tensor(c.volume.select(plan.inputs(r)));
}

SegmentationMap argmax_labels(const Tensor& probs, int rank)
{
    if (probs.rank() != 4) throw ShapeError("argmax needs [C,D,H,W] probabilities");
    const std::size_t C = probs.dim(0), N = probs.spatial_size();
    if (rank == 0) rank = probs.dim(1) == 1 ? 2 : 3;
    Extent e{rank, {probs.dim(1), probs.dim(2), probs.dim(3)}};
    SegmentationMap seg;
    seg.labels = Grid<std::uint8_t>(e, 0);
    for (std::size_t i = 0; i < N; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
            if (probs[c * N + i] > probs[best * N + i]) best = c;
        seg.labels.data[i] = static_cast<std::uint8_t>(best);
    }
    return seg;
}

}  // namespace hadnet
