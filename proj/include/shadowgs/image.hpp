#pragma once

#include "shadowgs/common.hpp"

#include <vector>

namespace sgs {

/// Dense row-major image with C interleaved double channels. Pixel (x, y)
/// has x growing rightward and y downward; the sample point of pixel (x, y)
/// is the half-integer center (x + 0.5, y + 0.5) in image coordinates.
template <int C>
struct Image
{
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, double fill = 0.0) { resize(w, h, fill); }

    void resize(int w, int h, double fill = 0.0)
    {
        width = w;
        height = h;
        data.assign(static_cast<size_t>(w) * h * C, fill);
    }

    bool empty() const { return data.empty(); }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }

    double* at(int x, int y) { return data.data() + (static_cast<size_t>(y) * width + x) * C; }
    const double* at(int x, int y) const
    {
        return data.data() + (static_cast<size_t>(y) * width + x) * C;
    }

    double& operator()(int x, int y, int c = 0) { return at(x, y)[c]; }
    double operator()(int x, int y, int c = 0) const { return at(x, y)[c]; }

    Eigen::Map<Eigen::Matrix<double, C, 1>> pix(int x, int y)
    {
        return Eigen::Map<Eigen::Matrix<double, C, 1>>(at(x, y));
    }
    Eigen::Map<const Eigen::Matrix<double, C, 1>> pix(int x, int y) const
    {
        return Eigen::Map<const Eigen::Matrix<double, C, 1>>(at(x, y));
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool same_size(int w, int h) const { return width == w && height == h; }
};

using Image1 = Image<1>;
using Image3 = Image<3>;

template <int C>
bool same_size(const Image<C>& a, const Image<C>& b)
{
    return a.width == b.width && a.height == b.height;
}

inline void require_same_size(int wa, int ha, int wb, int hb, const char* what)
{
    if (wa != wb || ha != hb)
        throw Error(err::kDimensionMismatch,
                    std::string(what) + ": " + std::to_string(wa) + "x" + std::to_string(ha) +
                        " vs " + std::to_string(wb) + "x" + std::to_string(hb));
}

// ---------------------------------------------------------------------------
// Digital surface model: a height grid over a ground-aligned window.
// Cell (i, j) covers [x0 + i*cell, x0 + (i+1)*cell) x [y0 + j*cell, ...),
// sampled at the cell center; row j = 0 is the southern edge (smallest y).
// ---------------------------------------------------------------------------

struct Dsm
{
    static constexpr double kNoData = -9999.0;

    Image1 height;
    double x0 = 0.0;
    double y0 = 0.0;
    double cell = 1.0;

    int cols() const { return height.width; }
    int rows() const { return height.height; }

    double cell_x(int i) const { return x0 + (i + 0.5) * cell; }
    double cell_y(int j) const { return y0 + (j + 0.5) * cell; }

    static bool valid(double h) { return h != kNoData; }
};

}  // namespace sgs
