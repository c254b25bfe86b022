#include "widecorrect/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <vector>

#include "widecorrect/errors.hpp"

namespace widecorrect::io {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawPng {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

void png_error_fn(png_structp png, png_const_charp msg) {
    auto* what = static_cast<std::string*>(png_get_error_ptr(png));
    if (what) *what = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

void write_raw_png(const fs::path& path, const RawPng& raw) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError(path.string(), "cannot open for writing");
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError(path.string(), "png write failed: " + err);
    }
    png_init_io(png, fp.get());
    const int color = raw.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, raw.width, raw.height, 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < raw.height; ++y) {
        png_write_row(png, raw.pixels.data() + static_cast<std::size_t>(y) * raw.width * raw.channels);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

RawPng read_raw_png(const fs::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError(path.string(), "cannot open for reading");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw DataError(path.string(), "not a PNG file");
    }
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_error_fn, png_warning_fn);
    png_infop info = png_create_info_struct(png);
    RawPng raw;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(path.string(), "corrupt PNG: " + err);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    raw.channels = png_get_channels(png, info);
    raw.pixels.resize(static_cast<std::size_t>(raw.width) * raw.height * raw.channels);
    std::vector<png_bytep> rows(raw.height);
    for (int y = 0; y < raw.height; ++y) {
        rows[y] = raw.pixels.data() + static_cast<std::size_t>(y) * raw.width * raw.channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return raw;
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::ifstream& in, T& v) {
    return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace

void write_flo(const fs::path& path, const FlowMap& flow) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string(), "cannot open for writing");
    write_pod(out, kFloMagic);
    write_pod(out, static_cast<std::int32_t>(flow.width));
    write_pod(out, static_cast<std::int32_t>(flow.height));
    std::vector<float> row(static_cast<std::size_t>(flow.width) * 2);
    for (int y = 0; y < flow.height; ++y) {
        for (int x = 0; x < flow.width; ++x) {
            row[2 * x] = static_cast<float>(flow.dx(y, x));
            row[2 * x + 1] = static_cast<float>(flow.dy(y, x));
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) throw DataError(path.string(), "write failed");
}

FlowMap read_flo(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string(), "cannot open for reading");
    float magic = 0.f;
    std::int32_t w = 0, h = 0;
    if (!read_pod(in, magic) || !read_pod(in, w) || !read_pod(in, h)) {
        throw DataError(path.string(), "truncated flow header");
    }
    if (magic != kFloMagic) throw DataError(path.string(), "bad flow magic");
    if (w <= 0 || h <= 0 || w > (1 << 15) || h > (1 << 15)) {
        throw DataError(path.string(), "implausible flow dimensions");
    }
    FlowMap flow(h, w);
    std::vector<float> row(static_cast<std::size_t>(w) * 2);
    for (int y = 0; y < h; ++y) {
        if (!in.read(reinterpret_cast<char*>(row.data()),
                     static_cast<std::streamsize>(row.size() * sizeof(float)))) {
            throw DataError(path.string(), "truncated flow payload");
        }
        for (int x = 0; x < w; ++x) {
            if (!std::isfinite(row[2 * x]) || !std::isfinite(row[2 * x + 1])) {
                throw DataError(path.string(), "non-finite flow value");
            }
            flow.dx(y, x) = row[2 * x];
            flow.dy(y, x) = row[2 * x + 1];
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw DataError(path.string(), "trailing bytes after flow payload");
    }
    return flow;
}

void write_png(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw InvalidArgument("write_png: only 1 or 3 channels are supported");
    }
    RawPng raw{image.width, image.height, image.channels, {}};
    raw.pixels.resize(image.data.size());
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            for (int c = 0; c < image.channels; ++c) {
                const double v = std::clamp(image.at(c, y, x), 0.0, 1.0);
                raw.pixels[(static_cast<std::size_t>(y) * image.width + x) * image.channels + c] =
                    static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    write_raw_png(path, raw);
}

Image read_png(const fs::path& path) {
    const RawPng raw = read_raw_png(path);
    if (raw.channels != 1 && raw.channels != 3) {
        throw DataError(path.string(), "unsupported channel count");
    }
    Image image(raw.channels, raw.height, raw.width);
    for (int y = 0; y < raw.height; ++y) {
        for (int x = 0; x < raw.width; ++x) {
            for (int c = 0; c < raw.channels; ++c) {
                image.at(c, y, x) =
                    raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c] / 255.0;
            }
        }
    }
    return image;
}

void write_label_png(const fs::path& path, const Planes<std::uint8_t>& labels, int scale) {
    if (labels.channels != 1) throw InvalidArgument("write_label_png: expected one channel");
    RawPng raw{labels.width, labels.height, 1, labels.data};
    if (scale != 1) {
        for (auto& v : raw.pixels) v = static_cast<std::uint8_t>(std::min(255, v * scale));
    }
    write_raw_png(path, raw);
}

Planes<std::uint8_t> read_label_png(const fs::path& path) {
    RawPng raw = read_raw_png(path);
    if (raw.channels != 1) throw DataError(path.string(), "label PNG must be single-channel");
    Planes<std::uint8_t> labels(1, raw.height, raw.width);
    labels.data = std::move(raw.pixels);
    return labels;
}

void write_seg_mask(const fs::path& path, const SegMask& mask) {
    Planes<std::uint8_t> stacked(1, 2 * mask.height, mask.width);
    stacked.data = mask.data;
    write_label_png(path, stacked);
}

SegMask read_seg_mask(const fs::path& path) {
    const auto stacked = read_label_png(path);
    if (stacked.height % 2 != 0) throw DataError(path.string(), "seg mask height must be even");
    SegMask mask(stacked.height / 2, stacked.width);
    mask.data = stacked.data;
    for (auto v : mask.data) {
        if (v > 2) throw DataError(path.string(), "seg mask value outside {0,1,2}");
    }
    return mask;
}

}  // namespace widecorrect::io
