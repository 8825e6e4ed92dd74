#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/image.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

// Training objectives: photometric L1 + D-SSIM, depth-derived normal
// consistency, the three shadow-map terms, NDVI vegetation masking, and the
// weighted total. Backward variants overwrite their gradient outputs and
// return the loss value so forward and backward cannot drift apart.

namespace sgs {

// ---------------------------------------------------------------------------
// SSIM. 11x11 Gaussian window, sigma 1.5, stabilization constants for unit
// dynamic range. Border windows are clipped and renormalized per axis, which
// keeps local statistics unbiased; blurring a constant image returns it
// unchanged, so SSIM of two constant images needs no interior crop.
// ---------------------------------------------------------------------------

namespace detail {

constexpr int kSsimRadius = 5;
constexpr int kSsimTaps = 2 * kSsimRadius + 1;
constexpr double kSsimC1 = 1e-4;  // (0.01 L)^2, L = 1
constexpr double kSsimC2 = 9e-4;  // (0.03 L)^2

inline const std::array<double, kSsimTaps>& ssim_window()
{
    static const std::array<double, kSsimTaps> win = [] {
        std::array<double, kSsimTaps> w{};
        double sum = 0.0;
        for (int k = 0; k < kSsimTaps; ++k) {
            const double d = k - kSsimRadius;
            w[k] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += w[k];
        }
        for (double& v : w) v /= sum;
        return w;
    }();
    return win;
}

/// Window mass falling inside [0, n) for each coordinate along one axis.
inline std::vector<double> ssim_partition(int n)
{
    const auto& w = ssim_window();
    std::vector<double> z(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int k = 0; k < kSsimTaps; ++k) {
            const int q = i + k - kSsimRadius;
            if (q >= 0 && q < n) s += w[k];
        }
        z[i] = s;
    }
    return z;
}

/// Separable blur of a W*H plane with clipped, per-axis renormalized windows.
inline void ssim_blur(const std::vector<double>& src, int W, int H,
                      const std::vector<double>& zx, const std::vector<double>& zy,
                      std::vector<double>& tmp, std::vector<double>& dst)
{
    const auto& w = ssim_window();
    tmp.resize(src.size());
    dst.resize(src.size());
    for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) {
            double s = 0.0;
            for (int k = 0; k < kSsimTaps; ++k) {
                const int q = i + k - kSsimRadius;
                if (q >= 0 && q < W) s += w[k] * src[static_cast<size_t>(j) * W + q];
            }
            tmp[static_cast<size_t>(j) * W + i] = s / zx[i];
        }
    for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) {
            double s = 0.0;
            for (int k = 0; k < kSsimTaps; ++k) {
                const int q = j + k - kSsimRadius;
                if (q >= 0 && q < H) s += w[k] * tmp[static_cast<size_t>(q) * W + i];
            }
            dst[static_cast<size_t>(j) * W + i] = s / zy[j];
        }
}

/// Adjoint of ssim_blur: scale by 1/Z at the source side of each pass, then
/// plain correlation. Valid because the window is symmetric.
inline void ssim_blur_adjoint(const std::vector<double>& g, int W, int H,
                              const std::vector<double>& zx, const std::vector<double>& zy,
                              std::vector<double>& tmp, std::vector<double>& dst)
{
    const auto& w = ssim_window();
    tmp.resize(g.size());
    dst.resize(g.size());
    for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) {
            double s = 0.0;
            for (int k = 0; k < kSsimTaps; ++k) {
                const int q = j + k - kSsimRadius;
                if (q >= 0 && q < H) s += w[k] * g[static_cast<size_t>(q) * W + i] / zy[q];
            }
            tmp[static_cast<size_t>(j) * W + i] = s;
        }
    for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) {
            double s = 0.0;
            for (int k = 0; k < kSsimTaps; ++k) {
                const int q = i + k - kSsimRadius;
                if (q >= 0 && q < W) s += w[k] * tmp[static_cast<size_t>(j) * W + q] / zx[q];
            }
            dst[static_cast<size_t>(j) * W + i] = s;
        }
}

/// Mean SSIM over channels and pixels. When g_a is given, accumulates
/// g_scale * d(mean SSIM)/d(a) into it (a is the first argument only).
inline double ssim_impl(const Image3& a, const Image3& b, double g_scale, Image3* g_a)
{
    require_same_size(a.width, a.height, b.width, b.height, "ssim");
    const int W = a.width, H = a.height;
    const size_t n = a.pixel_count();
    const std::vector<double> zx = ssim_partition(W);
    const std::vector<double> zy = ssim_partition(H);

    std::vector<double> x(n), y(n), prod(n), tmp;
    std::vector<double> mu_x, mu_y, mu_xx, mu_yy, mu_xy;
    std::vector<double> gm_x, gm_xx, gm_xy, adj;
    double total = 0.0;
    const double inv_count = 1.0 / (3.0 * static_cast<double>(n));

    for (int c = 0; c < 3; ++c) {
        for (size_t p = 0; p < n; ++p) {
            x[p] = a.data[p * 3 + c];
            y[p] = b.data[p * 3 + c];
        }
        ssim_blur(x, W, H, zx, zy, tmp, mu_x);
        ssim_blur(y, W, H, zx, zy, tmp, mu_y);
        for (size_t p = 0; p < n; ++p) prod[p] = x[p] * x[p];
        ssim_blur(prod, W, H, zx, zy, tmp, mu_xx);
        for (size_t p = 0; p < n; ++p) prod[p] = y[p] * y[p];
        ssim_blur(prod, W, H, zx, zy, tmp, mu_yy);
        for (size_t p = 0; p < n; ++p) prod[p] = x[p] * y[p];
        ssim_blur(prod, W, H, zx, zy, tmp, mu_xy);

        if (g_a) {
            gm_x.assign(n, 0.0);
            gm_xx.assign(n, 0.0);
            gm_xy.assign(n, 0.0);
        }
        double sum = 0.0;
        for (size_t p = 0; p < n; ++p) {
            const double mx = mu_x[p], my = mu_y[p];
            const double sxx = mu_xx[p] - mx * mx;
            const double syy = mu_yy[p] - my * my;
            const double sxy = mu_xy[p] - mx * my;
            const double A = 2.0 * mx * my + kSsimC1;
            const double B = 2.0 * sxy + kSsimC2;
            const double C = mx * mx + my * my + kSsimC1;
            const double D = sxx + syy + kSsimC2;
            const double S = (A * B) / (C * D);
            sum += S;
            if (g_a) {
                const double gm = g_scale * inv_count;
                const double dA = B / (C * D);
                const double dB = A / (C * D);
                const double dC = -S / C;
                const double dD = -S / D;
                gm_x[p] = gm * (2.0 * my * (dA - dB) + 2.0 * mx * (dC - dD));
                gm_xx[p] = gm * dD;
                gm_xy[p] = gm * 2.0 * dB;
            }
        }
        total += sum;
        if (g_a) {
            ssim_blur_adjoint(gm_x, W, H, zx, zy, tmp, adj);
            for (size_t p = 0; p < n; ++p) g_a->data[p * 3 + c] += adj[p];
            ssim_blur_adjoint(gm_xx, W, H, zx, zy, tmp, adj);
            for (size_t p = 0; p < n; ++p) g_a->data[p * 3 + c] += adj[p] * 2.0 * x[p];
            ssim_blur_adjoint(gm_xy, W, H, zx, zy, tmp, adj);
            for (size_t p = 0; p < n; ++p) g_a->data[p * 3 + c] += adj[p] * y[p];
        }
    }
    return total * inv_count;
}

}  // namespace detail

/// Mean SSIM over all pixels and channels; symmetric in its arguments.
inline double ssim(const Image3& a, const Image3& b)
{
    return detail::ssim_impl(a, b, 0.0, nullptr);
}

// ---------------------------------------------------------------------------
// Photometric loss: (1 - l_ssim) * mean|r - t|  +  l_ssim * (1 - SSIM)/2.
// ---------------------------------------------------------------------------

namespace detail {

inline double photometric_impl(const Image3& render, const Image3& target, double lambda_ssim,
                               Image3* g_render)
{
    require_same_size(render.width, render.height, target.width, target.height, "photometric loss");
    const size_t n = render.data.size();
    if (g_render) g_render->resize(render.width, render.height, 0.0);

    double abs_sum = 0.0;
    for (size_t p = 0; p < n; ++p) abs_sum += std::abs(render.data[p] - target.data[p]);
    const double l1 = abs_sum / static_cast<double>(n);
    if (g_render) {
        const double gw = (1.0 - lambda_ssim) / static_cast<double>(n);
        for (size_t p = 0; p < n; ++p) {
            const double d = render.data[p] - target.data[p];
            g_render->data[p] = d > 0.0 ? gw : (d < 0.0 ? -gw : 0.0);
        }
    }
    if (lambda_ssim == 0.0) return l1;

    const double s = ssim_impl(render, target, -0.5 * lambda_ssim, g_render);
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s) / 2.0;
}

}  // namespace detail

inline double photometric_loss(const Image3& render, const Image3& target, double lambda_ssim)
{
    return detail::photometric_impl(render, target, lambda_ssim, nullptr);
}

inline double photometric_loss_backward(const Image3& render, const Image3& target,
                                        double lambda_ssim, Image3& g_render)
{
    return detail::photometric_impl(render, target, lambda_ssim, &g_render);
}

// ---------------------------------------------------------------------------
// Depth-normal consistency. The depth buffer stores camera-frame z, so the
// finite-difference normal is built from unprojected neighbor differences in
// camera space and compared against the rendered normal rotated into camera
// space. Coverage weights are treated as constants.
// ---------------------------------------------------------------------------

namespace detail {

inline void pixel_point_cam(const PinholeCamera& cam, double u, double v, double z, Vec3& p,
                            Vec3& dp_dz)
{
    dp_dz = Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
    p = z * dp_dz;
}

inline void pixel_point_cam(const OrthoCamera& cam, double u, double v, double z, Vec3& p,
                            Vec3& dp_dz)
{
    p = Vec3((u - cam.cx) * cam.pixel_size, (v - cam.cy) * cam.pixel_size, z);
    dp_dz = Vec3(0.0, 0.0, 1.0);
}

template <class Cam>
double depth_normal_impl(const Image3& N, const Image1& D, const Cam& cam, const Image1& A,
                         Image3* g_N, Image1* g_D)
{
    require_same_size(N.width, N.height, D.width, D.height, "depth-normal loss");
    require_same_size(N.width, N.height, A.width, A.height, "depth-normal loss");
    const int W = D.width, H = D.height;
    if (g_N) g_N->resize(W, H, 0.0);
    if (g_D) g_D->resize(W, H, 0.0);

    double num = 0.0, den = 0.0;
    for (int j = 1; j + 1 < H; ++j) {
        for (int i = 1; i + 1 < W; ++i) {
            const double a = A(i, j);
            if (!(a > 0.5)) continue;
            const double zxm = D(i - 1, j), zxp = D(i + 1, j);
            const double zym = D(i, j - 1), zyp = D(i, j + 1);
            if (!(zxm > 0.0) || !(zxp > 0.0) || !(zym > 0.0) || !(zyp > 0.0)) continue;

            Vec3 pxm, pxp, pym, pyp, dxm, dxp, dym, dyp;
            pixel_point_cam(cam, i - 0.5, j + 0.5, zxm, pxm, dxm);
            pixel_point_cam(cam, i + 1.5, j + 0.5, zxp, pxp, dxp);
            pixel_point_cam(cam, i + 0.5, j - 0.5, zym, pym, dym);
            pixel_point_cam(cam, i + 0.5, j + 1.5, zyp, pyp, dyp);
            const Vec3 hx = pxp - pxm;
            const Vec3 hy = pyp - pym;
            const Vec3 c = hx.cross(hy);
            const double cn = c.norm();
            if (!(cn > 1e-12)) continue;

            const double sign = c.z() > 0.0 ? -1.0 : 1.0;  // face the camera (-z)
            const Vec3 nt = sign / cn * c;
            const Vec3 ncam = cam.rot * N.pix(i, j);
            num += a * (1.0 - ncam.dot(nt));
            den += a;

            if (g_N) g_N->pix(i, j) = cam.rot.transpose() * (-a * nt);
            if (g_D) {
                const Vec3 g_nt = -a * ncam;
                const Vec3 nhat = c / cn;
                const Vec3 g_c = sign / cn * (g_nt - nhat * nhat.dot(g_nt));
                const Vec3 g_hx = hy.cross(g_c);
                const Vec3 g_hy = g_c.cross(hx);
                (*g_D)(i + 1, j) += g_hx.dot(dxp);
                (*g_D)(i - 1, j) -= g_hx.dot(dxm);
                (*g_D)(i, j + 1) += g_hy.dot(dyp);
                (*g_D)(i, j - 1) -= g_hy.dot(dym);
            }
        }
    }
    if (!(den > 0.0)) return 0.0;
    if (g_N)
        for (double& v : g_N->data) v /= den;
    if (g_D)
        for (double& v : g_D->data) v /= den;
    return num / den;
}

}  // namespace detail

template <class Cam>
double depth_normal_loss(const Image3& N, const Image1& D, const Cam& cam, const Image1& A)
{
    return detail::depth_normal_impl(N, D, cam, A, nullptr, nullptr);
}

template <class Cam>
double depth_normal_loss_backward(const Image3& N, const Image1& D, const Cam& cam,
                                  const Image1& A, Image3& g_N, Image1& g_D)
{
    return detail::depth_normal_impl(N, D, cam, A, &g_N, &g_D);
}

// ---------------------------------------------------------------------------
// Shadow-map terms. All reductions over pixels with coverage A > 0.5.
// ---------------------------------------------------------------------------

namespace detail {

inline double shadow_consistency_impl(const Image1& S, const Image1& A, Image1* g_S)
{
    require_same_size(S.width, S.height, A.width, A.height, "shadow consistency loss");
    if (g_S) g_S->resize(S.width, S.height, 0.0);
    double num = 0.0, den = 0.0;
    const size_t n = S.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        const double a = A.data[p];
        if (!(a > 0.5)) continue;
        const double d = S.data[p] - 1.0;
        num += a * std::abs(d);
        den += a;
        if (g_S) g_S->data[p] = d > 0.0 ? a : (d < 0.0 ? -a : 0.0);
    }
    if (!(den > 0.0)) {
        warn("shadow consistency loss: view has no covered pixels");
        return 0.0;
    }
    if (g_S)
        for (double& v : g_S->data) v /= den;
    return num / den;
}

inline double shadow_binarization_impl(const Image1& S, const Image1& A, Image1* g_S)
{
    require_same_size(S.width, S.height, A.width, A.height, "shadow binarization loss");
    if (g_S) g_S->resize(S.width, S.height, 0.0);
    constexpr double lo = 1e-6, hi = 1.0 - 1e-6;
    double num = 0.0, den = 0.0;
    const size_t n = S.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        const double a = A.data[p];
        if (!(a > 0.5)) continue;
        const double s = std::clamp(S.data[p], lo, hi);
        num += a * -(s * std::log2(s) + (1.0 - s) * std::log2(1.0 - s));
        den += a;
        if (g_S && S.data[p] > lo && S.data[p] < hi)
            g_S->data[p] = a * std::log2((1.0 - s) / s);
    }
    if (!(den > 0.0)) return 0.0;
    if (g_S)
        for (double& v : g_S->data) v /= den;
    return num / den;
}

inline double shadow_prior_impl(const Image1& S, const Image1& prior, const Image1& veg,
                                const Image1& A, Image1* g_S)
{
    require_same_size(S.width, S.height, prior.width, prior.height, "shadow prior loss");
    require_same_size(S.width, S.height, veg.width, veg.height, "shadow prior loss");
    require_same_size(S.width, S.height, A.width, A.height, "shadow prior loss");
    if (g_S) g_S->resize(S.width, S.height, 0.0);
    constexpr double lo = 1e-6, hi = 1.0 - 1e-6;
    double sum = 0.0;
    size_t count = 0;
    const size_t n = S.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        if (veg.data[p] > 0.5 || !(A.data[p] > 0.5)) continue;
        const double q = std::clamp(prior.data[p], lo, hi);
        const double s = S.data[p];
        sum += -(s * std::log2(q) + (1.0 - s) * std::log2(1.0 - q));
        ++count;
        if (g_S) g_S->data[p] = -(std::log2(q) - std::log2(1.0 - q));
    }
    if (count == 0) {
        warn("shadow prior loss: every pixel is vegetation-masked or uncovered");
        return 0.0;
    }
    if (g_S)
        for (double& v : g_S->data) v /= static_cast<double>(count);
    return sum / static_cast<double>(count);
}

}  // namespace detail

/// Mean |S - 1| over covered pixels: drives a sun-aligned view to full light.
inline double shadow_consistency_loss(const Image1& S, const Image1& A)
{
    return detail::shadow_consistency_impl(S, A, nullptr);
}

inline double shadow_consistency_loss_backward(const Image1& S, const Image1& A, Image1& g_S)
{
    return detail::shadow_consistency_impl(S, A, &g_S);
}

/// Per-pixel binary entropy of S in bits (S clamped to [1e-6, 1-1e-6]).
inline double shadow_binarization_loss(const Image1& S, const Image1& A)
{
    return detail::shadow_binarization_impl(S, A, nullptr);
}

inline double shadow_binarization_loss_backward(const Image1& S, const Image1& A, Image1& g_S)
{
    return detail::shadow_binarization_impl(S, A, &g_S);
}

/// Cross-entropy of the rendered S against a prior lit-probability mask,
/// written with the prior inside the logs, so the S-gradient per pixel is the
/// constant -(log2 q - log2(1-q)). Vegetation and uncovered pixels excluded;
/// plain mean over the rest.
inline double shadow_prior_loss(const Image1& S, const Image1& prior, const Image1& veg,
                                const Image1& A)
{
    return detail::shadow_prior_impl(S, prior, veg, A, nullptr);
}

inline double shadow_prior_loss_backward(const Image1& S, const Image1& prior, const Image1& veg,
                                         const Image1& A, Image1& g_S)
{
    return detail::shadow_prior_impl(S, prior, veg, A, &g_S);
}

/// Vegetation mask from NDVI = (nir - red)/(nir + red + 1e-8) > threshold.
inline Image1 ndvi_vegetation_mask(const Image1& nir, const Image1& red, double threshold = 0.2)
{
    require_same_size(nir.width, nir.height, red.width, red.height, "ndvi");
    Image1 mask(nir.width, nir.height, 0.0);
    const size_t n = nir.pixel_count();
    for (size_t p = 0; p < n; ++p) {
        const double ndvi =
            (nir.data[p] - red.data[p]) / (nir.data[p] + red.data[p] + 1e-8);
        mask.data[p] = ndvi > threshold ? 1.0 : 0.0;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Weighted total.
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda_c = 10.0;
    double lambda_n = 0.5;
    double lambda_s1 = 0.2;   // shadow consistency
    double lambda_s2 = 0.3;   // shadow binarization
    double lambda_s3 = 1.0;   // shadow prior
    double lambda_ssim = 0.2;
};

struct LossTerms {
    double photometric = 0.0;
    double depth_normal = 0.0;
    double shadow_consistency = 0.0;
    double shadow_binarization = 0.0;
    double shadow_prior = 0.0;
};

struct LossReport {
    LossTerms terms;
    LossTerms grad_norms;  // parameter-gradient norms per term, diagnostics
    bool prior_active = false;
    double total = 0.0;
};

inline LossReport total_loss(const LossTerms& t, const LossWeights& w, bool shadow_prior_active)
{
    const auto check = [](double v, const char* name) {
        if (!std::isfinite(v))
            throw Error(err::kNonFinite, std::string("loss term ") + name + " is non-finite");
    };
    check(t.photometric, "photometric");
    check(t.depth_normal, "depth-normal");
    check(t.shadow_consistency, "shadow-consistency");
    check(t.shadow_binarization, "shadow-binarization");
    if (shadow_prior_active) check(t.shadow_prior, "shadow-prior");

    LossReport r;
    r.terms = t;
    r.prior_active = shadow_prior_active;
    r.total = w.lambda_c * t.photometric + w.lambda_n * t.depth_normal +
              w.lambda_s1 * t.shadow_consistency + w.lambda_s2 * t.shadow_binarization +
              (shadow_prior_active ? w.lambda_s3 * t.shadow_prior : 0.0);
    return r;
}

}  // namespace sgs
