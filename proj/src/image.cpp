#include "splatflow/image.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>

namespace splatflow::img {

namespace {

struct FileCloser {
    void operator()(FILE *f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

Grid read_png(const std::string &path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open '" + path + "' for reading");

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw IoError("'" + path + "' is not a PNG file");

    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int w = int(png_get_image_width(png, info));
    const int h = int(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int ch = int(png_get_channels(png, info));
    pixels.resize(size_t(w) * h * ch);
    rows.resize(h);
    for (int y = 0; y < h; ++y) rows[y] = pixels.data() + size_t(y) * w * ch;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Grid g(w, h, ch == 1 ? 1 : 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < g.channels; ++c)
                g.at(c, y, x) = pixels[(size_t(y) * w + x) * ch + c] / 255.0;
    return g;
}

void write_png(const std::string &path, const Grid &g) {
    if (g.channels != 1 && g.channels != 3)
        throw ArgumentError("write_png wants 1 or 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");

    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, g.width, g.height, 8,
                 g.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(size_t(g.width) * g.channels);
    for (int y = 0; y < g.height; ++y) {
        for (int x = 0; x < g.width; ++x)
            for (int c = 0; c < g.channels; ++c) {
                double v = g.at(c, y, x);
                v = v < 0 ? 0 : (v > 1 ? 1 : v);
                row[size_t(x) * g.channels + c] = png_byte(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Grid read_f32grid(const std::string &path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open '" + path + "' for reading");
    uint32_t dims[3];
    if (std::fread(dims, sizeof(uint32_t), 3, fp.get()) != 3)
        throw IoError("'" + path + "': truncated f32 grid header");
    if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 ||
        dims[0] > 1u << 16 || dims[1] > 1u << 16 || dims[2] > 64)
        throw IoError("'" + path + "': implausible f32 grid dims");
    Grid g{int(dims[0]), int(dims[1]), int(dims[2])};
    std::vector<float> buf(g.data.size());
    if (std::fread(buf.data(), sizeof(float), buf.size(), fp.get()) != buf.size())
        throw IoError("'" + path + "': truncated f32 grid payload");
    for (size_t i = 0; i < buf.size(); ++i) g.data[i] = buf[i];
    return g;
}

void write_f32grid(const std::string &path, const Grid &g) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open '" + path + "' for writing");
    const uint32_t dims[3] = {uint32_t(g.width), uint32_t(g.height),
                              uint32_t(g.channels)};
    std::vector<float> buf(g.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(g.data[i]);
    if (std::fwrite(dims, sizeof(uint32_t), 3, fp.get()) != 3 ||
        std::fwrite(buf.data(), sizeof(float), buf.size(), fp.get()) != buf.size())
        throw IoError("failed writing '" + path + "'");
}

double mean_abs_diff(const Grid &a, const Grid &b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw ShapeError("mean_abs_diff: grid shapes differ");
    double s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
    return s / double(a.data.size());
}

}  // namespace splatflow::img
