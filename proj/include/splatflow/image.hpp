#pragma once

// Planar f64 image grids plus the two on-disk raster formats: 8-bit PNG for
// color/mask images and a raw little-endian f32 grid (u32 width, u32 height,
// u32 channels header, then planar row-major samples) for depth and other
// float fields.

#include <string>
#include <vector>

#include "splatflow/core.hpp"

namespace splatflow::img {

struct Grid {
    int width = 0, height = 0, channels = 1;
    std::vector<double> data;  // [channel][row][col]

    Grid() = default;
    Grid(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(size_t(w) * h * c, fill) {
        if (w <= 0 || h <= 0 || c <= 0)
            throw ShapeError("grid dims must be positive");
    }

    size_t plane() const { return size_t(width) * height; }
    double &at(int c, int y, int x) {
        return data[c * plane() + size_t(y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[c * plane() + size_t(y) * width + x];
    }
    bool inside(int x, int y) const {
        return x >= 0 && x < width && y >= 0 && y < height;
    }

    // Nearest-pixel lookup with continuous coordinates (pixel centers at
    // integer positions); out-of-range coordinates clamp to the border.
    double nearest(int c, double x, double y) const {
        int xi = int(std::lround(x)), yi = int(std::lround(y));
        xi = std::max(0, std::min(width - 1, xi));
        yi = std::max(0, std::min(height - 1, yi));
        return at(c, yi, xi);
    }
};

// 8-bit PNG. Grids are written with values clamped to [0,1] and scaled to
// 0..255; 1-channel grids become grayscale files, 3-channel RGB.
Grid read_png(const std::string &path);
void write_png(const std::string &path, const Grid &g);

Grid read_f32grid(const std::string &path);
void write_f32grid(const std::string &path, const Grid &g);

// Average absolute difference helper used by a few tests and reports.
double mean_abs_diff(const Grid &a, const Grid &b);

}  // namespace splatflow::img
