#include "hadnet/volume_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hadnet/errors.hpp"

namespace hadnet {

namespace {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

struct Nifti1Header {
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348);

enum NiftiType : std::int16_t {
    DT_UINT8 = 2, DT_INT16 = 4, DT_INT32 = 8, DT_FLOAT32 = 16, DT_FLOAT64 = 64, DT_INT8 = 256, DT_UINT16 = 512
};

bool is_gz(const fs::path& p) { return p.extension() == ".gz"; }

// gzopen reads plain files transparently, so one reader serves both.
std::vector<char> read_all(const fs::path& p)
{
    gzFile f = gzopen(p.c_str(), "rb");
    if (!f) throw IoError("cannot open " + p.string());
    std::vector<char> buf;
    char chunk[1 << 16];
    int n;
    while ((n = gzread(f, chunk, sizeof chunk)) > 0) buf.insert(buf.end(), chunk, chunk + n);
    int err = 0;
    const char* msg = gzerror(f, &err);
    gzclose(f);
    if (n < 0 || err < 0) throw IoError("read error in " + p.string() + ": " + msg);
    return buf;
}

void write_all(const fs::path& p, const std::vector<char>& bytes)
{
    if (is_gz(p)) {
        gzFile f = gzopen(p.c_str(), "wb6");
        if (!f) throw IoError("cannot write " + p.string());
        int n = bytes.empty() ? 0 : gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
        if (gzclose(f) != Z_OK || n != static_cast<int>(bytes.size())) throw IoError("write error in " + p.string());
        return;
    }
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write error in " + p.string());
}

template <typename T>
std::vector<char> nifti_bytes(const Grid<T>& img, const std::array<double, 3>& spacing, std::int16_t dtype)
{
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    const auto& e = img.extent;
    h.dim[0] = static_cast<std::int16_t>(e.rank);
    h.dim[1] = static_cast<std::int16_t>(e.dims[2]);
    h.dim[2] = static_cast<std::int16_t>(e.dims[1]);
    h.dim[3] = static_cast<std::int16_t>(e.rank == 3 ? e.dims[0] : 1);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = dtype;
    h.bitpix = static_cast<std::int16_t>(8 * sizeof(T));
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(spacing[2]);
    h.pixdim[2] = static_cast<float>(spacing[1]);
    h.pixdim[3] = static_cast<float>(spacing[0]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.xyzt_units = 2;  // mm
    h.sform_code = 1;
    h.srow_x[0] = h.pixdim[1];
    h.srow_y[1] = h.pixdim[2];
    h.srow_z[2] = h.pixdim[3];
    std::memcpy(h.magic, "n+1\0", 4);

    std::vector<char> bytes(352 + img.data.size() * sizeof(T), 0);
    std::memcpy(bytes.data(), &h, sizeof h);
    if (!img.data.empty()) std::memcpy(bytes.data() + 352, img.data.data(), img.data.size() * sizeof(T));
    return bytes;
}

template <typename S>
void convert_payload(const char* src, std::size_t n, float slope, float inter, std::vector<float>& dst)
{
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        S v;
        std::memcpy(&v, src + i * sizeof(S), sizeof(S));
        dst[i] = static_cast<float>(static_cast<double>(v) * slope + inter);
    }
}

Extent extent_from_dims(std::size_t rank, std::size_t nx, std::size_t ny, std::size_t nz, const std::string& where)
{
    if (rank == 2) return Extent::make2d(ny, nx);
    if (rank == 3) return Extent::make3d(nz, ny, nx);
    throw IoError(where + ": unsupported rank " + std::to_string(rank));
}

}  // namespace

ImageFile read_nifti(const fs::path& path)
{
    std::vector<char> buf = read_all(path);
    if (buf.size() < sizeof(Nifti1Header)) throw IoError(path.string() + ": truncated NIfTI header");
    Nifti1Header h;
    std::memcpy(&h, buf.data(), sizeof h);
    if (h.sizeof_hdr != 348) throw IoError(path.string() + ": not a little-endian NIfTI-1 file");
    if (std::memcmp(h.magic, "n+1", 3) != 0) throw IoError(path.string() + ": missing n+1 magic");

    std::size_t rank = static_cast<std::size_t>(h.dim[0]);
    for (std::size_t i = 4; i <= rank && i < 8; ++i)
        if (h.dim[i] > 1) throw IoError(path.string() + ": time series volumes are not supported");
    rank = std::min<std::size_t>(rank, 3);
    ImageFile out;
    out.image.extent = extent_from_dims(rank, static_cast<std::size_t>(h.dim[1]), static_cast<std::size_t>(h.dim[2]),
                                        static_cast<std::size_t>(h.dim[3] > 0 ? h.dim[3] : 1), path.string());
    out.spacing = {rank == 3 ? h.pixdim[3] : 1.0, h.pixdim[2], h.pixdim[1]};

    const std::size_t n = out.image.extent.voxels();
    const auto offset = static_cast<std::size_t>(h.vox_offset < 352.0f ? 352.0f : h.vox_offset);
    const std::size_t bytes_per = static_cast<std::size_t>(h.bitpix) / 8;
    if (buf.size() < offset + n * bytes_per) throw IoError(path.string() + ": truncated voxel payload");
    const float slope = h.scl_slope == 0.0f ? 1.0f : h.scl_slope;
    const float inter = h.scl_slope == 0.0f ? 0.0f : h.scl_inter;
    const char* src = buf.data() + offset;
    auto& dst = out.image.data;
    switch (h.datatype) {
    case DT_UINT8: convert_payload<std::uint8_t>(src, n, slope, inter, dst); break;
    case DT_INT8: convert_payload<std::int8_t>(src, n, slope, inter, dst); break;
    case DT_INT16: convert_payload<std::int16_t>(src, n, slope, inter, dst); break;
    case DT_UINT16: convert_payload<std::uint16_t>(src, n, slope, inter, dst); break;
    case DT_INT32: convert_payload<std::int32_t>(src, n, slope, inter, dst); break;
    case DT_FLOAT32: convert_payload<float>(src, n, slope, inter, dst); break;
    case DT_FLOAT64: convert_payload<double>(src, n, slope, inter, dst); break;
    default: throw IoError(path.string() + ": unsupported NIfTI datatype " + std::to_string(h.datatype));
    }
    return out;
}

void write_nifti(const fs::path& path, const Image& img, const std::array<double, 3>& spacing)
{
    write_all(path, nifti_bytes(img, spacing, DT_FLOAT32));
}

void write_nifti(const fs::path& path, const Grid<std::uint8_t>& img, const std::array<double, 3>& spacing)
{
    write_all(path, nifti_bytes(img, spacing, DT_UINT8));
}

namespace {

fs::path sidecar_of(const fs::path& raw_path)
{
    fs::path p = raw_path;
    return p.replace_extension(".hdr");
}

template <typename T>
void write_raw_impl(const fs::path& raw_path, const Grid<T>& img, const std::array<double, 3>& spacing,
                    const std::string& modality, const char* dtype)
{
    std::ofstream hdr(sidecar_of(raw_path));
    if (!hdr) throw IoError("cannot write " + sidecar_of(raw_path).string());
    hdr << "rank " << img.extent.rank << "\n"
        << "dims " << img.extent.dims[0] << " " << img.extent.dims[1] << " " << img.extent.dims[2] << "\n"
        << "dtype " << dtype << "\n"
        << "modality " << modality << "\n"
        << "spacing " << spacing[0] << " " << spacing[1] << " " << spacing[2] << "\n";
    std::vector<char> bytes(img.data.size() * sizeof(T));
    if (!bytes.empty()) std::memcpy(bytes.data(), img.data.data(), bytes.size());
    write_all(raw_path, bytes);
}

}  // namespace

void write_raw(const fs::path& raw_path, const Image& img, const std::array<double, 3>& spacing,
               const std::string& modality)
{
    write_raw_impl(raw_path, img, spacing, modality, "float32");
}

void write_raw(const fs::path& raw_path, const Grid<std::uint8_t>& img, const std::array<double, 3>& spacing,
               const std::string& modality)
{
    write_raw_impl(raw_path, img, spacing, modality, "uint8");
}

ImageFile read_raw(const fs::path& raw_path)
{
    std::ifstream hdr(sidecar_of(raw_path));
    if (!hdr) throw IoError("missing raw sidecar " + sidecar_of(raw_path).string());
    ImageFile out;
    std::string line, dtype;
    int rank = 0;
    std::array<std::size_t, 3> dims{};
    while (std::getline(hdr, line)) {
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "rank") ss >> rank;
        else if (key == "dims") ss >> dims[0] >> dims[1] >> dims[2];
        else if (key == "dtype") ss >> dtype;
        else if (key == "spacing") ss >> out.spacing[0] >> out.spacing[1] >> out.spacing[2];
    }
    if (rank != 2 && rank != 3) throw IoError(raw_path.string() + ": bad rank in sidecar");
    out.image.extent = {rank, dims};
    const std::size_t n = out.image.extent.voxels();
    std::vector<char> buf = read_all(raw_path);
    if (dtype == "float32") {
        if (buf.size() != n * 4) throw IoError(raw_path.string() + ": payload size mismatch");
        convert_payload<float>(buf.data(), n, 1.0f, 0.0f, out.image.data);
    } else if (dtype == "uint8") {
        if (buf.size() != n) throw IoError(raw_path.string() + ": payload size mismatch");
        convert_payload<std::uint8_t>(buf.data(), n, 1.0f, 0.0f, out.image.data);
    } else {
        throw IoError(raw_path.string() + ": unsupported dtype '" + dtype + "'");
    }
    return out;
}

fs::path find_volume_file(const fs::path& case_dir, const std::string& stem)
{
    for (const char* ext : {".nii.gz", ".nii", ".raw"}) {
        fs::path p = case_dir / (stem + ext);
        if (fs::exists(p)) return p;
    }
    throw DataError("no volume '" + stem + "' in " + case_dir.string());
}

namespace {
ImageFile read_any(const fs::path& p, AccessLog* log)
{
    if (log) log->opened.push_back(p.string());
    return p.extension() == ".raw" ? read_raw(p) : read_nifti(p);
}

std::string stem_of(const fs::path& p)
{
    std::string name = p.filename().string();
    for (const char* ext : {".nii.gz", ".nii", ".raw"}) {
        std::string e = ext;
        if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0)
            return name.substr(0, name.size() - e.size());
    }
    return {};
}
}  // namespace

void save_case(const fs::path& case_dir, const MultiModalVolume& vol, const SegmentationMap* seg, VolumeFormat fmt)
{
    std::error_code ec;
    fs::create_directories(case_dir, ec);
    if (ec) throw IoError("cannot create " + case_dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < vol.channels.size(); ++i) {
        if (fmt == VolumeFormat::Nifti) write_nifti(case_dir / (vol.names[i] + ".nii.gz"), vol.channels[i], vol.spacing);
        else write_raw(case_dir / (vol.names[i] + ".raw"), vol.channels[i], vol.spacing, vol.names[i]);
    }
    if (seg) {
        if (fmt == VolumeFormat::Nifti) {
            write_labels_brats(case_dir / "seg.nii.gz", *seg, vol.spacing);
        } else {
            Grid<std::uint8_t> out = seg->labels;
            for (auto& v : out.data)
                if (v == Enhancing) v = kBratsEnhancing;
            write_raw(case_dir / "seg.raw", out, vol.spacing, "seg");
        }
    }
}

std::vector<std::string> case_modalities(const fs::path& case_dir)
{
    if (!fs::is_directory(case_dir)) throw DataError("case directory " + case_dir.string() + " does not exist");
    std::vector<std::string> mods;
    for (const auto& entry : fs::directory_iterator(case_dir)) {
        std::string s = stem_of(entry.path());
        if (!s.empty() && s != "seg") mods.push_back(s);
    }
    std::sort(mods.begin(), mods.end());
    mods.erase(std::unique(mods.begin(), mods.end()), mods.end());
    return mods;
}

MultiModalVolume load_case_volume(const fs::path& case_dir, const std::vector<std::string>& modalities,
                                  AccessLog* log)
{
    if (modalities.empty()) throw DataError("no modalities requested from " + case_dir.string());
    MultiModalVolume vol;
    for (const auto& m : modalities) {
        ImageFile f = read_any(find_volume_file(case_dir, m), log);
        if (!vol.channels.empty() && !(f.image.extent == vol.channels.front().extent))
            throw DataError("modality '" + m + "' in " + case_dir.string() + " has a different extent");
        vol.spacing = f.spacing;
        vol.add(m, std::move(f.image));
    }
    vol.brain_mask = infer_brain_mask(vol);
    return vol;
}

SegmentationMap read_labels(const fs::path& path, AccessLog* log)
{
    ImageFile f = read_any(path, log);
    SegmentationMap seg;
    seg.labels = Grid<std::uint8_t>(f.image.extent);
    for (std::size_t i = 0; i < f.image.data.size(); ++i) {
        float v = f.image.data[i];
        std::uint8_t l;
        if (v == 0.0f) l = Background;
        else if (v == 1.0f) l = NecroticCore;
        else if (v == 2.0f) l = Edema;
        else if (v == 3.0f || v == 4.0f) l = Enhancing;
        else throw DataError(path.string() + ": invalid label value " + std::to_string(v));
        seg.labels.data[i] = l;
    }
    return seg;
}

void write_labels_brats(const fs::path& path, const SegmentationMap& seg, const std::array<double, 3>& spacing)
{
    Grid<std::uint8_t> out = seg.labels;
    for (auto& v : out.data)
        if (v == Enhancing) v = kBratsEnhancing;
    write_nifti(path, out, spacing);
}

}  // namespace hadnet
