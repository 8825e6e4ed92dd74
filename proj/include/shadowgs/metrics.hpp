#pragma once

// Evaluation metrics: image PSNR, DSM extraction from a trained scene plus
// height MAE against a reference grid, and shadow-mask BER/ACC.

#include "shadowgs/image.hpp"
#include "shadowgs/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace sgs {

/// -10*log10(MSE) over all channels, capped at a 99 dB sentinel.
inline double psnr(const Image3& a, const Image3& b)
{
    require_same_size(a.width, a.height, b.width, b.height, "psnr images");
    if (a.data.empty()) throw Error(err::kInvalidParameter, "psnr of empty images");
    double sq = 0.0;
    for (size_t p = 0; p < a.data.size(); ++p) {
        const double d = a.data[p] - b.data[p];
        sq += d * d;
    }
    const double mse = sq / static_cast<double>(a.data.size());
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

/// Rasterizes a nadir orthographic depth map over a square ground window of
/// the given extent centered on the origin and converts it to heights.
/// Cells with coverage below 0.5 are set to Dsm::kNoData.
inline Dsm extract_dsm(const GaussianScene& scene, double extent, double cell,
                       RasterConfig cfg = {})
{
    if (!(extent > 0.0) || !(cell > 0.0))
        throw Error(err::kInvalidParameter, "dsm extent and cell size must be positive");
    const int n = static_cast<int>(std::ceil(extent / cell));

    double top = 0.0;
    for (const Gaussian3D& g : scene.gaussians)
        top = std::max(top, g.position.z() + 3.0 * g.scales().maxCoeff());

    // Down-looking camera: +x east, image rows run north to south.
    OrthoCamera cam;
    cam.pixel_size = cell;
    cam.width = cam.height = n;
    cam.cx = cam.cy = 0.0;
    cam.rot << 1, 0, 0, 0, -1, 0, 0, 0, -1;
    const double x0 = -extent / 2.0, y0 = -extent / 2.0;
    cam.t = Vec3(-x0, y0 + n * cell, top + 10.0);

    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);

    Dsm dsm;
    dsm.x0 = x0;
    dsm.y0 = y0;
    dsm.cell = cell;
    dsm.height = Image1(n, n, Dsm::kNoData);
    for (int j = 0; j < n; ++j) {
        const int jr = n - 1 - j;  // flip rows so row 0 is the southern edge
        for (int i = 0; i < n; ++i)
            if (out.alpha(i, jr) >= 0.5) dsm.height(i, j) = cam.t.z() - out.depth(i, jr);
    }
    return dsm;
}

enum class DsmAlign { kNone, kMedianShift };

/// Mean |dh| over cells valid in both grids, optionally after removing the
/// median vertical offset.
inline double height_mae(const Dsm& dsm, const Dsm& ref, DsmAlign align = DsmAlign::kNone)
{
    require_same_size(dsm.cols(), dsm.rows(), ref.cols(), ref.rows(), "dsm grids");
    if (dsm.x0 != ref.x0 || dsm.y0 != ref.y0 || dsm.cell != ref.cell)
        throw Error(err::kInvalidParameter, "dsm grids have different geo placement");

    std::vector<double> dh;
    dh.reserve(dsm.height.data.size());
    for (size_t p = 0; p < dsm.height.data.size(); ++p)
        if (dsm.valid(dsm.height.data[p]) && ref.valid(ref.height.data[p]))
            dh.push_back(dsm.height.data[p] - ref.height.data[p]);
    if (dh.empty()) throw Error(err::kInvalidParameter, "dsm grids share no valid cells");

    double shift = 0.0;
    if (align == DsmAlign::kMedianShift) {
        const size_t m = dh.size() / 2;
        std::nth_element(dh.begin(), dh.begin() + m, dh.end());
        shift = dh[m];
        if (dh.size() % 2 == 0) {
            const double lo = *std::max_element(dh.begin(), dh.begin() + m);
            shift = 0.5 * (lo + shift);
        }
    }
    double sum = 0.0;
    for (double d : dh) sum += std::abs(d - shift);
    return sum / static_cast<double>(dh.size());
}

struct ShadowScore {
    double ber = 0.0;  // percent
    double acc = 0.0;  // percent
    long tp = 0, tn = 0, fp = 0, fn = 0;
};

/// Binarizes the predicted solar visibility at `threshold` (shadow = value
/// below it, and shadow is the positive class) against a binary mask where
/// 1 means lit. BER = 50*(FN/(TP+FN) + FP/(TN+FP)), ACC = 100*(TP+TN)/all.
/// A class absent from the reference contributes a zero rate with a warning.
inline ShadowScore shadow_ber_acc(const Image1& pred, const Image1& gt, double threshold = 0.5)
{
    require_same_size(pred.width, pred.height, gt.width, gt.height, "shadow maps");
    if (pred.data.empty()) throw Error(err::kInvalidParameter, "shadow maps are empty");

    ShadowScore s;
    for (size_t p = 0; p < pred.data.size(); ++p) {
        const bool pred_shadow = pred.data[p] < threshold;
        const bool gt_shadow = gt.data[p] < 0.5;
        if (gt_shadow)
            (pred_shadow ? s.tp : s.fn) += 1;
        else
            (pred_shadow ? s.fp : s.tn) += 1;
    }
    const long pos = s.tp + s.fn, neg = s.tn + s.fp;
    double miss = 0.0, fall = 0.0;
    if (pos > 0)
        miss = static_cast<double>(s.fn) / static_cast<double>(pos);
    else
        warn("reference shadow mask has no shadow pixels; miss rate taken as 0");
    if (neg > 0)
        fall = static_cast<double>(s.fp) / static_cast<double>(neg);
    else
        warn("reference shadow mask has no lit pixels; false-alarm rate taken as 0");
    s.ber = 50.0 * (miss + fall);
    s.acc = 100.0 * static_cast<double>(s.tp + s.tn) / static_cast<double>(pos + neg);
    return s;
}

}  // namespace sgs
