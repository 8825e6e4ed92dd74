#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/gaussians.hpp"
#include "shadowgs/image.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

namespace sgs {

struct RasterConfig {
    double dilation = 0.3;          // px^2 added to the 2x2 screen block
    double alpha_max = 0.999;
    double min_footprint_px = 0.25; // cull below this pre-dilation extent
    double near_plane = 1e-3;
    int tile = 16;
    double q_cutoff = 20.0;         // skip contributions with exponent above
    double stop_transmittance = 1e-4;
    double eps_alpha = 1e-4;        // coverage guard for depth/normal
    double depth_background = -1.0; // sentinel for uncovered pixels
    int threads = 0;                // 0 = library default
};

/// Projected Gaussian with every intermediate the backward pass reuses.
/// sigma_p already carries the anti-alias dilation; all screen-space math
/// (alpha, depth slope, normal) runs against this dilated covariance.
struct Splat2D {
    int gauss = -1;  // source Gaussian index
    Vec3 xc = Vec3::Zero();
    double u_c = 0.0, v_c = 0.0;
    double z_c = 0.0, t_c = 0.0;
    double o = 0.0;
    Mat3 J = Mat3::Zero();
    Mat3 sigma_p = Mat3::Zero();
    Mat3 P = Mat3::Zero();  // sigma_p^-1 (valid when !singular)
    Mat2 lam = Mat2::Zero();  // inverse of the dilated 2x2 block
    Vec2 m = Vec2::Zero();    // depth slope from the ray-peak solve
    Vec3 s = Vec3::Zero();    // sigma_p^-1 e3
    Vec3 n_raw = Vec3::Zero();
    double n_raw_norm = 0.0;
    double flip = 1.0;
    Vec3 n_world = Vec3::Zero();
    bool normal_ok = false;
    bool singular = false;
    double rx = 0.0, ry = 0.0;  // conservative screen AABB half extents
};

inline double pixel_alpha(const Splat2D& s, double u, double v, double alpha_max = 0.999)
{
    const double dx = u - s.u_c, dy = v - s.v_c;
    const double q =
        s.lam(0, 0) * dx * dx + 2.0 * s.lam(0, 1) * dx * dy + s.lam(1, 1) * dy * dy;
    return std::min(s.o * std::exp(-q), alpha_max);
}

inline double ray_gaussian_depth(const Splat2D& s, double u, double v)
{
    const double zt = s.z_c / s.t_c;
    return s.z_c + zt * (s.m[0] * (s.u_c - u) + s.m[1] * (s.v_c - v));
}

/// Surface normal of a splat: back-projected depth-slope direction,
/// unit-normalized, flipped toward the camera, expressed in world axes.
inline Vec3 gaussian_normal(const Vec2& m, const Mat3& J, const Mat3& world_rot, bool* ok,
                            double* flip_out = nullptr, Vec3* raw_out = nullptr)
{
    const Vec3 h(-m[0], -m[1], -1.0);
    const Vec3 raw = J.transpose() * h;
    const double n = raw.norm();
    if (raw_out) *raw_out = raw;
    if (!(n > 1e-12) || !std::isfinite(n)) {
        if (ok) *ok = false;
        if (flip_out) *flip_out = 1.0;
        return Vec3::Zero();
    }
    Vec3 nc = raw / n;
    double flip = 1.0;
    if (nc.z() > 0.0) {
        flip = -1.0;
        nc = -nc;
    }
    if (ok) *ok = true;
    if (flip_out) *flip_out = flip;
    return world_rot.transpose() * nc;
}

template <class Cam>
std::optional<Splat2D> project_gaussian(const Gaussian3D& g, const Cam& cam,
                                         const RasterConfig& cfg, int gauss_index = -1)
{
    Splat2D s;
    s.gauss = gauss_index;
    s.xc = cam.to_camera(g.position);
    if (!(s.xc.z() > cfg.near_plane)) return std::nullopt;

    const CamPoint cp = cam_point(cam, s.xc);
    s.u_c = cp.u;
    s.v_c = cp.v;
    s.z_c = s.xc.z();
    s.t_c = cp.t;
    s.o = g.opacity();
    s.J = cam_jacobian(cam, s.xc);

    const Mat3 V = cam.rot * g.covariance() * cam.rot.transpose();
    Mat3 raw = s.J * V * s.J.transpose();

    // footprint cull on the pre-dilation screen block
    {
        const double a = raw(0, 0), b = raw(0, 1), c = raw(1, 1);
        const double mid = 0.5 * (a + c);
        const double rad = std::sqrt(std::max(0.25 * (a - c) * (a - c) + b * b, 0.0));
        if (std::sqrt(std::max(mid + rad, 0.0)) < cfg.min_footprint_px) return std::nullopt;
    }

    s.sigma_p = raw;
    s.sigma_p(0, 0) += cfg.dilation;
    s.sigma_p(1, 1) += cfg.dilation;

    Mat2 M = s.sigma_p.topLeftCorner<2, 2>();
    const double det = M(0, 0) * M(1, 1) - M(0, 1) * M(1, 0);
    if (!(det > 1e-300) || !(M(0, 0) > 0.0)) return std::nullopt;
    s.lam << M(1, 1) / det, -M(0, 1) / det, -M(1, 0) / det, M(0, 0) / det;

    Eigen::LLT<Mat3> llt(s.sigma_p);
    if (llt.info() == Eigen::Success) {
        s.P = llt.solve(Mat3::Identity());
        s.s = s.P.col(2);
        if (std::abs(s.s[2]) > 1e-300 && s.s.allFinite()) {
            s.m = Vec2(s.s[0] / s.s[2], s.s[1] / s.s[2]);
            s.singular = false;
        } else {
            s.singular = true;
        }
    } else {
        s.singular = true;
    }
    if (s.singular) {
        s.m.setZero();
        s.s = Vec3(0.0, 0.0, 1.0);
    }

    s.n_world = gaussian_normal(s.m, s.J, cam.rot, &s.normal_ok, &s.flip, &s.n_raw);
    s.n_raw_norm = s.n_raw.norm();

    s.rx = std::sqrt(cfg.q_cutoff * s.sigma_p(0, 0));
    s.ry = std::sqrt(cfg.q_cutoff * s.sigma_p(1, 1));
    return s;
}

struct RenderOutputs {
    int width = 0, height = 0, channels = 0;
    std::vector<double> ch;  // width*height*channels, pixel-interleaved
    Image1 depth, alpha;
    Image3 normal;
    long singular_fallbacks = 0;

    double& at(int i, int j, int k) { return ch[(static_cast<size_t>(j) * width + i) * channels + k]; }
    double at(int i, int j, int k) const
    {
        return ch[(static_cast<size_t>(j) * width + i) * channels + k];
    }
};

struct OutputGrads {
    std::vector<double> ch;  // empty = zero
    Image1 depth, alpha;     // zero-sized = zero
    Image3 normal;
};

struct RasterGrads {
    std::vector<Vec3> position;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    std::vector<double> opacity_logit;
    std::vector<double> payload;      // N*K
    std::vector<double> screen_grad;  // N, |d loss / d projected center|
};

namespace detail {

// Flat per-splat state for the compositing inner loop.
struct HotSplat {
    double u, v;
    double l00, l01, l11;
    double o;
    double zc, zt;
    double m0, m1;
    double n0, n1, n2;
};

struct Prepared {
    std::vector<Splat2D> splats;    // front-to-back
    std::vector<HotSplat> hot;      // same order
    std::vector<double> pay;        // active-count * K, same order
    std::vector<std::vector<int>> tiles;
    int tiles_x = 0, tiles_y = 0;
    long singular = 0;
};

template <class Cam>
Prepared prepare_splats(const GaussianScene& scene, const Cam& cam,
                        const std::vector<double>& payload, int K, const RasterConfig& cfg)
{
    if (K > 0 && payload.size() != scene.gaussians.size() * static_cast<size_t>(K))
        throw Error(err::kDimensionMismatch, "payload size does not match gaussians*channels");

    Prepared prep;
    prep.splats.reserve(scene.gaussians.size());
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        auto s = project_gaussian(scene.gaussians[i], cam, cfg, static_cast<int>(i));
        if (s) prep.splats.push_back(*s);
    }
    // sort by index: stable_sort's temporary buffer ignores the alignment the
    // Eigen members of Splat2D need
    std::vector<int> order(prep.splats.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return prep.splats[a].z_c < prep.splats[b].z_c;
    });
    {
        std::vector<Splat2D> sorted;
        sorted.reserve(prep.splats.size());
        for (int a : order) sorted.push_back(prep.splats[a]);
        prep.splats.swap(sorted);
    }

    const int n = static_cast<int>(prep.splats.size());
    prep.hot.resize(n);
    prep.pay.resize(static_cast<size_t>(n) * K);
    for (int a = 0; a < n; ++a) {
        const Splat2D& s = prep.splats[a];
        HotSplat& h = prep.hot[a];
        h.u = s.u_c;
        h.v = s.v_c;
        h.l00 = s.lam(0, 0);
        h.l01 = s.lam(0, 1);
        h.l11 = s.lam(1, 1);
        h.o = s.o;
        h.zc = s.z_c;
        h.zt = s.z_c / s.t_c;
        h.m0 = s.m[0];
        h.m1 = s.m[1];
        h.n0 = s.n_world.x();
        h.n1 = s.n_world.y();
        h.n2 = s.n_world.z();
        if (s.singular) ++prep.singular;
        for (int k = 0; k < K; ++k)
            prep.pay[static_cast<size_t>(a) * K + k] =
                payload[static_cast<size_t>(s.gauss) * K + k];
    }

    prep.tiles_x = (cam.width + cfg.tile - 1) / cfg.tile;
    prep.tiles_y = (cam.height + cfg.tile - 1) / cfg.tile;
    prep.tiles.assign(static_cast<size_t>(prep.tiles_x) * prep.tiles_y, {});
    for (int a = 0; a < n; ++a) {
        const Splat2D& s = prep.splats[a];
        const int tx0 = std::max(0, static_cast<int>(std::floor((s.u_c - s.rx) / cfg.tile)));
        const int tx1 =
            std::min(prep.tiles_x - 1, static_cast<int>(std::floor((s.u_c + s.rx) / cfg.tile)));
        const int ty0 = std::max(0, static_cast<int>(std::floor((s.v_c - s.ry) / cfg.tile)));
        const int ty1 =
            std::min(prep.tiles_y - 1, static_cast<int>(std::floor((s.v_c + s.ry) / cfg.tile)));
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                prep.tiles[static_cast<size_t>(ty) * prep.tiles_x + tx].push_back(a);
    }
    return prep;
}

// One pixel, front to back over a candidate list. Shared by the tile and
// reference paths so their arithmetic is identical term for term.
inline void composite_span(const HotSplat* hs, const double* pay, int K, const int* list,
                           int count, double px, double py, const RasterConfig& cfg,
                           double* ch, double& A, double& Draw, double* Nraw)
{
    double T = 1.0;
    for (int li = 0; li < count; ++li) {
        const int a = list[li];
        const HotSplat& h = hs[a];
        const double dx = px - h.u, dy = py - h.v;
        const double q = h.l00 * dx * dx + 2.0 * h.l01 * dx * dy + h.l11 * dy * dy;
        if (!(q <= cfg.q_cutoff)) continue;
        double alpha = h.o * std::exp(-q);
        if (alpha > cfg.alpha_max) alpha = cfg.alpha_max;
        const double w = T * alpha;
        const double* p = pay + static_cast<size_t>(a) * K;
        for (int k = 0; k < K; ++k) ch[k] += w * p[k];
        const double d = h.zc + h.zt * (h.m0 * -dx + h.m1 * -dy);
        Draw += w * d;
        Nraw[0] += w * h.n0;
        Nraw[1] += w * h.n1;
        Nraw[2] += w * h.n2;
        A += w;
        T *= 1.0 - alpha;
        if (T < cfg.stop_transmittance) break;
    }
}

struct Contrib {
    int a;
    double alpha, T, w, d;
    bool clamped;
};

inline void replay_span(const HotSplat* hs, const int* list, int count, double px,
                        double py, const RasterConfig& cfg, std::vector<Contrib>& out,
                        double& A, double& Draw, double* Nraw)
{
    double T = 1.0;
    for (int li = 0; li < count; ++li) {
        const int a = list[li];
        const HotSplat& h = hs[a];
        const double dx = px - h.u, dy = py - h.v;
        const double q = h.l00 * dx * dx + 2.0 * h.l01 * dx * dy + h.l11 * dy * dy;
        if (!(q <= cfg.q_cutoff)) continue;
        double alpha = h.o * std::exp(-q);
        const bool clamped = alpha > cfg.alpha_max;
        if (clamped) alpha = cfg.alpha_max;
        const double w = T * alpha;
        const double d = h.zc + h.zt * (h.m0 * -dx + h.m1 * -dy);
        out.push_back({a, alpha, T, w, d, clamped});
        Draw += w * d;
        Nraw[0] += w * h.n0;
        Nraw[1] += w * h.n1;
        Nraw[2] += w * h.n2;
        A += w;
        T *= 1.0 - alpha;
        if (T < cfg.stop_transmittance) break;
    }
}

inline void finalize_pixel(RenderOutputs& out, int i, int j, const RasterConfig& cfg,
                           const double* ch, double A, double Draw, const double* Nraw)
{
    const size_t p = static_cast<size_t>(j) * out.width + i;
    for (int k = 0; k < out.channels; ++k) out.ch[p * out.channels + k] = ch[k];
    out.alpha.data[p] = A;
    if (A > cfg.eps_alpha) {
        out.depth.data[p] = Draw / A;
        const double nn =
            std::sqrt(Nraw[0] * Nraw[0] + Nraw[1] * Nraw[1] + Nraw[2] * Nraw[2]);
        if (nn > 1e-12) {
            out.normal.data[p * 3 + 0] = Nraw[0] / nn;
            out.normal.data[p * 3 + 1] = Nraw[1] / nn;
            out.normal.data[p * 3 + 2] = Nraw[2] / nn;
        }
    } else {
        out.depth.data[p] = cfg.depth_background;
    }
}

constexpr int kMaxChannels = 32;

}  // namespace detail

/// Tile-binned alpha compositing of per-Gaussian payload channels plus
/// ray-peak depth, blended surface normal, and accumulated opacity.
template <class Cam>
RenderOutputs rasterize(const GaussianScene& scene, const Cam& cam,
                        const std::vector<double>& payload, int K,
                        const RasterConfig& cfg = {})
{
    if (K < 0 || K > detail::kMaxChannels)
        throw Error(err::kInvalidParameter, "channel count out of range");
    detail::Prepared prep = detail::prepare_splats(scene, cam, payload, K, cfg);

    RenderOutputs out;
    out.width = cam.width;
    out.height = cam.height;
    out.channels = K;
    out.ch.assign(static_cast<size_t>(cam.width) * cam.height * K, 0.0);
    out.depth = Image1(cam.width, cam.height, cfg.depth_background);
    out.alpha = Image1(cam.width, cam.height, 0.0);
    out.normal = Image3(cam.width, cam.height, 0.0);
    out.singular_fallbacks = prep.singular;

    const size_t n_tiles = prep.tiles.size();
    parallel_blocks(n_tiles, cfg.threads, [&](size_t lo, size_t hi, int) {
        double ch[detail::kMaxChannels];
        for (size_t ti = lo; ti < hi; ++ti) {
            const auto& list = prep.tiles[ti];
            const int tx = static_cast<int>(ti) % prep.tiles_x;
            const int ty = static_cast<int>(ti) / prep.tiles_x;
            const int i1 = std::min((tx + 1) * cfg.tile, cam.width);
            const int j1 = std::min((ty + 1) * cfg.tile, cam.height);
            for (int j = ty * cfg.tile; j < j1; ++j)
                for (int i = tx * cfg.tile; i < i1; ++i) {
                    for (int k = 0; k < K; ++k) ch[k] = 0.0;
                    double A = 0.0, Draw = 0.0, Nraw[3] = {0.0, 0.0, 0.0};
                    detail::composite_span(prep.hot.data(), prep.pay.data(), K, list.data(),
                                           static_cast<int>(list.size()), i + 0.5, j + 0.5,
                                           cfg, ch, A, Draw, Nraw);
                    detail::finalize_pixel(out, i, j, cfg, ch, A, Draw, Nraw);
                }
        }
    });
    return out;
}

/// Reference renderer: every pixel walks the full front-to-back splat list.
/// Same per-contribution arithmetic as the tile path; used for validation.
template <class Cam>
RenderOutputs rasterize_reference(const GaussianScene& scene, const Cam& cam,
                                  const std::vector<double>& payload, int K,
                                  const RasterConfig& cfg = {})
{
    if (K < 0 || K > detail::kMaxChannels)
        throw Error(err::kInvalidParameter, "channel count out of range");
    detail::Prepared prep = detail::prepare_splats(scene, cam, payload, K, cfg);

    RenderOutputs out;
    out.width = cam.width;
    out.height = cam.height;
    out.channels = K;
    out.ch.assign(static_cast<size_t>(cam.width) * cam.height * K, 0.0);
    out.depth = Image1(cam.width, cam.height, cfg.depth_background);
    out.alpha = Image1(cam.width, cam.height, 0.0);
    out.normal = Image3(cam.width, cam.height, 0.0);
    out.singular_fallbacks = prep.singular;

    std::vector<int> all(prep.splats.size());
    std::iota(all.begin(), all.end(), 0);
    parallel_blocks(static_cast<size_t>(cam.height), cfg.threads, [&](size_t lo, size_t hi, int) {
        double ch[detail::kMaxChannels];
        for (size_t j = lo; j < hi; ++j)
            for (int i = 0; i < cam.width; ++i) {
                for (int k = 0; k < K; ++k) ch[k] = 0.0;
                double A = 0.0, Draw = 0.0, Nraw[3] = {0.0, 0.0, 0.0};
                detail::composite_span(prep.hot.data(), prep.pay.data(), K, all.data(),
                                       static_cast<int>(all.size()), i + 0.5, j + 0.5, cfg,
                                       ch, A, Draw, Nraw);
                detail::finalize_pixel(out, i, static_cast<int>(j), cfg, ch, A, Draw, Nraw);
            }
    });
    return out;
}

namespace detail {

// Per-splat gradient accumulator slots, reduced across workers in order.
constexpr int kAccStride = 13;
enum AccSlot {
    kGu = 0, kGv, kGzc, kGtc, kGo,
    kGl00, kGl01, kGl11,
    kGm0, kGm1,
    kGn0, kGn1, kGn2
};

}  // namespace detail

/// Gradients of every rasterize output w.r.t. Gaussian parameters and payload
/// values. Recomputes the forward walk per pixel, then reverses it with a
/// suffix accumulator over the blending weights.
template <class Cam>
RasterGrads rasterize_backward(const GaussianScene& scene, const Cam& cam,
                               const std::vector<double>& payload, int K,
                               const OutputGrads& g, const RasterConfig& cfg = {})
{
    if (K < 0 || K > detail::kMaxChannels)
        throw Error(err::kInvalidParameter, "channel count out of range");
    const size_t N = scene.gaussians.size();
    if (!g.ch.empty() && g.ch.size() != static_cast<size_t>(cam.width) * cam.height * K)
        throw Error(err::kDimensionMismatch, "channel gradient buffer size mismatch");

    detail::Prepared prep = detail::prepare_splats(scene, cam, payload, K, cfg);
    const int nact = static_cast<int>(prep.splats.size());

    const int workers = cfg.threads > 0 ? cfg.threads : default_thread_count();
    const size_t stride = static_cast<size_t>(detail::kAccStride + K);
    std::vector<double> acc(static_cast<size_t>(workers) * nact * stride, 0.0);

    const bool has_ch = !g.ch.empty();
    const bool has_d = g.depth.width == cam.width && g.depth.height == cam.height;
    const bool has_n = g.normal.width == cam.width && g.normal.height == cam.height;
    const bool has_a = g.alpha.width == cam.width && g.alpha.height == cam.height;

    const size_t n_tiles = prep.tiles.size();
    parallel_blocks(n_tiles, cfg.threads, [&](size_t lo, size_t hi, int worker) {
        double* wacc = acc.data() + static_cast<size_t>(worker) * nact * stride;
        std::vector<detail::Contrib> contribs;
        contribs.reserve(256);
        for (size_t ti = lo; ti < hi; ++ti) {
            const auto& list = prep.tiles[ti];
            if (list.empty()) continue;
            const int tx = static_cast<int>(ti) % prep.tiles_x;
            const int ty = static_cast<int>(ti) / prep.tiles_x;
            const int i1 = std::min((tx + 1) * cfg.tile, cam.width);
            const int j1 = std::min((ty + 1) * cfg.tile, cam.height);
            for (int j = ty * cfg.tile; j < j1; ++j)
                for (int i = tx * cfg.tile; i < i1; ++i) {
                    const double px = i + 0.5, py = j + 0.5;
                    contribs.clear();
                    double A = 0.0, Draw = 0.0, Nraw[3] = {0.0, 0.0, 0.0};
                    detail::replay_span(prep.hot.data(), list.data(),
                                        static_cast<int>(list.size()), px, py, cfg, contribs,
                                        A, Draw, Nraw);
                    if (contribs.empty()) continue;
                    const size_t p = static_cast<size_t>(j) * cam.width + i;

                    const double* gch =
                        has_ch ? g.ch.data() + p * K : nullptr;
                    const bool covered = A > cfg.eps_alpha;
                    const double gD = (has_d && covered) ? g.depth.data[p] : 0.0;
                    const double gDraw = covered ? gD / A : 0.0;
                    double gA = has_a ? g.alpha.data[p] : 0.0;
                    if (covered) gA -= gD * Draw / (A * A);

                    double gNraw[3] = {0.0, 0.0, 0.0};
                    if (has_n && covered) {
                        const double nn = std::sqrt(Nraw[0] * Nraw[0] + Nraw[1] * Nraw[1] +
                                                    Nraw[2] * Nraw[2]);
                        if (nn > 1e-12) {
                            const double n0 = Nraw[0] / nn, n1 = Nraw[1] / nn,
                                         n2 = Nraw[2] / nn;
                            const double* gn = g.normal.data.data() + p * 3;
                            const double dot = n0 * gn[0] + n1 * gn[1] + n2 * gn[2];
                            gNraw[0] = (gn[0] - n0 * dot) / nn;
                            gNraw[1] = (gn[1] - n1 * dot) / nn;
                            gNraw[2] = (gn[2] - n2 * dot) / nn;
                        }
                    }

                    double suffix = 0.0;
                    for (size_t ci = contribs.size(); ci-- > 0;) {
                        const detail::Contrib& c = contribs[ci];
                        const detail::HotSplat& h = prep.hot[c.a];
                        double* slot = wacc + static_cast<size_t>(c.a) * stride;

                        double gw = gA + gDraw * c.d;
                        gw += gNraw[0] * h.n0 + gNraw[1] * h.n1 + gNraw[2] * h.n2;
                        if (gch) {
                            const double* pay = prep.pay.data() + static_cast<size_t>(c.a) * K;
                            for (int k = 0; k < K; ++k) {
                                gw += gch[k] * pay[k];
                                slot[detail::kAccStride + k] += c.w * gch[k];
                            }
                        }
                        const double galpha = gw * c.T - suffix / (1.0 - c.alpha);
                        suffix += gw * c.w;

                        const double dx = px - h.u, dy = py - h.v;

                        // depth term d = zc + zt*(m . (uc-u, vc-v))
                        const double gd = gDraw * c.w;
                        const double mdot = h.m0 * -dx + h.m1 * -dy;
                        slot[detail::kGzc] += gd * (1.0 + mdot / prep.splats[c.a].t_c);
                        slot[detail::kGtc] += gd * (-h.zc * mdot /
                                                    (prep.splats[c.a].t_c * prep.splats[c.a].t_c));
                        slot[detail::kGm0] += gd * h.zt * -dx;
                        slot[detail::kGm1] += gd * h.zt * -dy;
                        slot[detail::kGu] += gd * h.zt * h.m0;
                        slot[detail::kGv] += gd * h.zt * h.m1;

                        // normal blend
                        slot[detail::kGn0] += c.w * gNraw[0];
                        slot[detail::kGn1] += c.w * gNraw[1];
                        slot[detail::kGn2] += c.w * gNraw[2];

                        if (!c.clamped) {
                            // alpha = o*exp(-q), q = delta' lam delta
                            slot[detail::kGo] += galpha * c.alpha / h.o;
                            const double gq = -galpha * c.alpha;
                            const double lx = h.l00 * dx + h.l01 * dy;
                            const double ly = h.l01 * dx + h.l11 * dy;
                            slot[detail::kGu] += -2.0 * gq * lx;
                            slot[detail::kGv] += -2.0 * gq * ly;
                            slot[detail::kGl00] += gq * dx * dx;
                            slot[detail::kGl01] += gq * 2.0 * dx * dy;
                            slot[detail::kGl11] += gq * dy * dy;
                        }
                    }
                }
        }
    });

    // ordered cross-worker reduction into worker 0's buffer
    for (int w = 1; w < workers; ++w) {
        const double* src = acc.data() + static_cast<size_t>(w) * nact * stride;
        for (size_t k = 0; k < static_cast<size_t>(nact) * stride; ++k) acc[k] += src[k];
    }

    RasterGrads out;
    out.position.assign(N, Vec3::Zero());
    out.log_scale.assign(N, Vec3::Zero());
    out.rotation.assign(N, Vec4::Zero());
    out.opacity_logit.assign(N, 0.0);
    out.payload.assign(N * K, 0.0);
    out.screen_grad.assign(N, 0.0);

    parallel_blocks(static_cast<size_t>(nact), cfg.threads, [&](size_t lo, size_t hi, int) {
        for (size_t a = lo; a < hi; ++a) {
            const Splat2D& s = prep.splats[a];
            const Gaussian3D& gs = scene.gaussians[s.gauss];
            const double* slot = acc.data() + a * stride;

            for (int k = 0; k < K; ++k)
                out.payload[static_cast<size_t>(s.gauss) * K + k] =
                    slot[detail::kAccStride + k];

            const double gu = slot[detail::kGu], gv = slot[detail::kGv];
            out.screen_grad[s.gauss] = std::sqrt(gu * gu + gv * gv);

            Vec2 gm(slot[detail::kGm0], slot[detail::kGm1]);
            Vec3 gnw(slot[detail::kGn0], slot[detail::kGn1], slot[detail::kGn2]);
            Mat3 gJ = Mat3::Zero();
            Mat3 gSig = Mat3::Zero();

            if (s.normal_ok) {
                const Vec3 nhat = s.flip * (cam.rot * s.n_world);  // camera-frame unit normal
                const Vec3 g_nc = s.flip * (cam.rot * gnw);
                const Vec3 g_raw = (g_nc - nhat * nhat.dot(g_nc)) / s.n_raw_norm;
                const Vec3 hvec(-s.m[0], -s.m[1], -1.0);
                gJ += hvec * g_raw.transpose();
                const Vec3 gh = s.J * g_raw;
                gm[0] += -gh[0];
                gm[1] += -gh[1];
            }

            if (!s.singular) {
                const Vec3& sv = s.s;
                Vec3 gsv(gm[0] / sv[2], gm[1] / sv[2],
                         -(gm[0] * sv[0] + gm[1] * sv[1]) / (sv[2] * sv[2]));
                Mat3 gP = Mat3::Zero();
                gP.col(2) = gsv;
                gSig += -s.P * gP * s.P;
            }

            Mat2 gLam;
            gLam << slot[detail::kGl00], 0.5 * slot[detail::kGl01],
                0.5 * slot[detail::kGl01], slot[detail::kGl11];
            const Mat2 gM = -(s.lam * gLam * s.lam);
            gSig.topLeftCorner<2, 2>() += gM;

            const Mat3 V = cam.rot * gs.covariance() * cam.rot.transpose();
            gJ += (gSig + gSig.transpose()) * s.J * V;
            const Mat3 gV = s.J.transpose() * gSig * s.J;
            const Mat3 gSigmaW = cam.rot.transpose() * gV * cam.rot;

            Vec3 g_ls = Vec3::Zero();
            Vec4 g_q = Vec4::Zero();
            covariance_backward(gs.log_scale, gs.rotation, gSigmaW, g_ls, g_q);

            Vec3 g_xc = s.J.row(0).transpose() * gu + s.J.row(1).transpose() * gv;
            g_xc.z() += slot[detail::kGzc];
            g_xc += slot[detail::kGtc] * cam_tgrad(cam, s.xc);
            g_xc += cam_jacobian_backward(cam, s.xc, gJ);

            out.position[s.gauss] = cam.rot.transpose() * g_xc;
            out.log_scale[s.gauss] = g_ls;
            out.rotation[s.gauss] = g_q;
            out.opacity_logit[s.gauss] = slot[detail::kGo] * s.o * (1.0 - s.o);
        }
    });
    return out;
}

}  // namespace sgs
