#include "hadnet/artifacts.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>

#include "hadnet/errors.hpp"

namespace hadnet {

namespace fs = std::filesystem;

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free)
    {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
            throw std::runtime_error("SHA-256 initialisation failed");
    }
    void update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx_.get(), p, n); }
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex()
    {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md, &len);
        std::string out;
        char buf[3];
        for (unsigned i = 0; i < len; ++i) {
            std::snprintf(buf, sizeof buf, "%02x", md[i]);
            out += buf;
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void hash_file_into(Sha256& h, const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes)
{
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const fs::path& path)
{
    Sha256 h;
    hash_file_into(h, path);
    return h.hex();
}

std::string params_digest(const nets::ParamSet& params)
{
    Sha256 h;
    for (const auto& [name, v] : params.items()) {
        h.update(name);
        h.update(shape_str(v.value().shape()));
        h.update(v.value().data(), v.value().size() * sizeof(Real));
    }
    return h.hex();
}

std::string directory_digest(const fs::path& dir)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& f : files) {
        h.update(fs::relative(f, dir).generic_string());
        h.update("\0", 1);
        hash_file_into(h, f);
    }
    return h.hex();
}

Rgb label_color(std::uint8_t label)
{
    switch (label) {
    case NecroticCore: return {255, 0, 0};
    case Edema: return {0, 255, 0};
    case Enhancing: return {255, 255, 0};
    default: return {0, 0, 0};
    }
}

void write_overlay_png(const fs::path& path, const Image& background, const SegmentationMap& labels, std::size_t z,
                       double alpha)
{
    if (!(background.extent == labels.extent())) throw ShapeError("overlay background and labels differ in extent");
    const auto& d = background.extent.dims;
    if (z >= d[0]) throw ShapeError("overlay slice out of range");
    const std::size_t H = d[1], W = d[2];

    float lo = 0, hi = 0;
    bool first = true;
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const float v = background(z, y, x);
            lo = first ? v : std::min(lo, v);
            hi = first ? v : std::max(hi, v);
            first = false;
        }
    const double span = hi > lo ? hi - lo : 1.0;

    std::vector<png_byte> rgb(H * W * 3);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double g = 255.0 * (background(z, y, x) - lo) / span;
            const auto l = labels.labels(z, y, x);
            const Rgb c = label_color(l);
            for (int k = 0; k < 3; ++k) {
                const double v = l == Background ? g : (1 - alpha) * g + alpha * c[k];
                rgb[(y * W + x) * 3 + k] = static_cast<png_byte>(std::clamp(v, 0.0, 255.0) + 0.5);
            }
        }

    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < H; ++y) png_write_row(png, &rgb[y * W * 3]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

std::vector<fs::path> write_overlays(const fs::path& dir, const std::string& stem, const Image& background,
                                     const SegmentationMap& labels)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    std::vector<fs::path> out;
    const std::size_t D = background.extent.dims[0];
    for (std::size_t z = 0; z < D; ++z) {
        char name[32];
        std::snprintf(name, sizeof name, "_z%03zu.png", z);
        fs::path p = dir / (stem + (D == 1 ? std::string(".png") : std::string(name)));
        write_overlay_png(p, background, labels, z);
        out.push_back(p);
    }
    return out;
}

}  // namespace hadnet
