#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/gaussians.hpp"
#include "shadowgs/image.hpp"
#include "shadowgs/rasterizer.hpp"
#include "shadowgs/shadow.hpp"

#include <array>
#include <vector>

namespace sgs {

// Appearance payload per Gaussian, blended by the rasterizer and composed per
// pixel afterwards: [ S_sun, l_sky rgb, l_n rgb, f rgb ].
inline constexpr int kShadingChannels = 10;

inline Vec3 activate_light(const Vec3& raw)
{
    return (raw.array() + 0.5).max(0.0).matrix();
}

inline Vec3 activate_albedo(const Vec3& raw)
{
    return (raw.array() + 0.5).max(0.0).min(1.0).matrix();
}

namespace detail {

inline Vec3 light_mask(const Vec3& raw)
{
    return (raw.array() + 0.5 > 0.0).cast<double>().matrix();
}

inline Vec3 albedo_mask(const Vec3& raw)
{
    return ((raw.array() + 0.5 > 0.0) && (raw.array() + 0.5 < 1.0))
        .cast<double>()
        .matrix();
}

}  // namespace detail

/// Appearance of one Gaussian under the given sun: albedo and near reflection
/// follow the viewing direction, the shared skylight follows the sun.
inline std::array<double, kShadingChannels> shade_gaussian(const Gaussian3D& g,
                                                           const GaussianScene& scene,
                                                           const Vec3& view,
                                                           const Vec3& sun_dir,
                                                           double s_sun)
{
    const int deg = scene.sh_degree_active;
    const Vec3 f = activate_albedo(g.albedo_sh.eval(view, deg));
    const Vec3 l_n = activate_light(g.nearlight_sh.eval(view, deg));
    const Vec3 l_sky = activate_light(scene.skylight_sh.eval(sun_dir, deg));
    return {s_sun, l_sky[0], l_sky[1], l_sky[2], l_n[0], l_n[1], l_n[2], f[0], f[1], f[2]};
}

/// Payload for the whole scene (N * kShadingChannels, gaussian-major).
template <typename Cam>
std::vector<double> scene_payload(const GaussianScene& scene, const Cam& cam,
                                  const Vec3& sun_dir, const std::vector<double>& s_sun,
                                  int threads = 0)
{
    const size_t N = scene.gaussians.size();
    if (s_sun.size() != N)
        throw Error(err::kDimensionMismatch, "visibility vector size mismatch");
    std::vector<double> payload(N * kShadingChannels);
    const int deg = scene.sh_degree_active;
    const Vec3 l_sky = activate_light(scene.skylight_sh.eval(sun_dir, deg));
    parallel_blocks(static_cast<std::int64_t>(N), threads,
                    [&](std::int64_t lo, std::int64_t hi, int) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const Gaussian3D& g = scene.gaussians[i];
            const Vec3 view = view_dir(cam, g.position);
            const Vec3 f = activate_albedo(g.albedo_sh.eval(view, deg));
            const Vec3 l_n = activate_light(g.nearlight_sh.eval(view, deg));
            double* p = payload.data() + i * kShadingChannels;
            p[0] = s_sun[i];
            for (int c = 0; c < 3; ++c) p[1 + c] = l_sky[c];
            for (int c = 0; c < 3; ++c) p[4 + c] = l_n[c];
            for (int c = 0; c < 3; ++c) p[7 + c] = f[c];
        }
    });
    return payload;
}

struct ShadeGrads {
    std::vector<double> albedo_sh;     // per-gaussian coefficient blocks
    std::vector<double> nearlight_sh;  // same layout as albedo
    std::vector<double> skylight_sh;   // one shared block
    std::vector<Vec3> position;        // through the viewing direction
    std::vector<double> s_sun;
};

/// Backward of scene_payload: splits payload gradients into SH coefficient
/// gradients, the viewing-direction position term, and per-Gaussian dL/dS_sun.
template <typename Cam>
ShadeGrads scene_payload_backward(const GaussianScene& scene, const Cam& cam,
                                  const Vec3& sun_dir,
                                  const std::vector<double>& g_payload, int threads = 0)
{
    const size_t N = scene.gaussians.size();
    if (g_payload.size() != N * kShadingChannels)
        throw Error(err::kDimensionMismatch, "payload gradient size mismatch");
    const int deg = scene.sh_degree_active;
    const int stride = scene.gaussians.empty()
                           ? 0
                           : 3 * scene.gaussians.front().albedo_sh.count();

    ShadeGrads out;
    out.albedo_sh.assign(N * stride, 0.0);
    out.nearlight_sh.assign(N * stride, 0.0);
    out.skylight_sh.assign(3 * scene.skylight_sh.count(), 0.0);
    out.position.assign(N, Vec3::Zero());
    out.s_sun.assign(N, 0.0);

    parallel_blocks(static_cast<std::int64_t>(N), threads,
                    [&](std::int64_t lo, std::int64_t hi, int) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const Gaussian3D& g = scene.gaussians[i];
            const Vec3 view = view_dir(cam, g.position);
            const double* gp = g_payload.data() + i * kShadingChannels;
            out.s_sun[i] = gp[0];

            const Vec3 g_ln = detail::light_mask(g.nearlight_sh.eval(view, deg))
                                  .cwiseProduct(Vec3(gp[4], gp[5], gp[6]));
            const Vec3 g_f = detail::albedo_mask(g.albedo_sh.eval(view, deg))
                                 .cwiseProduct(Vec3(gp[7], gp[8], gp[9]));

            Vec3 g_dir = g.albedo_sh.eval_backward(view, deg, g_f,
                                                   out.albedo_sh.data() + i * stride);
            g_dir += g.nearlight_sh.eval_backward(view, deg, g_ln,
                                                  out.nearlight_sh.data() + i * stride);
            out.position[i] = view_dir_backward(cam, g.position, g_dir);
        }
    });

    // the skylight block is shared: one masked sum over gaussians, in index
    // order so the result is independent of the worker count
    Vec3 g_sky_sum = Vec3::Zero();
    for (size_t i = 0; i < N; ++i) {
        const double* gp = g_payload.data() + i * kShadingChannels;
        g_sky_sum += Vec3(gp[1], gp[2], gp[3]);
    }
    const Vec3 g_sky =
        detail::light_mask(scene.skylight_sh.eval(sun_dir, deg)).cwiseProduct(g_sky_sum);
    scene.skylight_sh.eval_backward(sun_dir, deg, g_sky, out.skylight_sh.data());
    return out;
}

/// L_total = S + (1-S)(L_sky + L_n), C = F * L_total, from the blended
/// channels of a kShadingChannels render. Unclamped; clamp on export only.
inline Image3 compose_radiance(const RenderOutputs& outs)
{
    if (outs.channels != kShadingChannels)
        throw Error(err::kDimensionMismatch, "compose expects a shading render");
    Image3 C(outs.width, outs.height);
    for (int y = 0; y < outs.height; ++y)
        for (int x = 0; x < outs.width; ++x) {
            const double S = outs.at(x, y, 0);
            for (int c = 0; c < 3; ++c) {
                const double l_total =
                    S + (1.0 - S) * (outs.at(x, y, 1 + c) + outs.at(x, y, 4 + c));
                C(x, y, c) = outs.at(x, y, 7 + c) * l_total;
            }
        }
    return C;
}

/// Albedo-only composition C = F: the illumination channels are ignored.
/// Baseline color model for runs without the full radiance composition.
inline Image3 compose_albedo(const RenderOutputs& outs)
{
    if (outs.channels != kShadingChannels)
        throw Error(err::kDimensionMismatch, "compose expects a shading render");
    Image3 C(outs.width, outs.height);
    for (int y = 0; y < outs.height; ++y)
        for (int x = 0; x < outs.width; ++x)
            for (int c = 0; c < 3; ++c) C(x, y, c) = outs.at(x, y, 7 + c);
    return C;
}

inline void compose_albedo_backward(const RenderOutputs& outs, const Image3& g_color,
                                    OutputGrads& grads)
{
    if (outs.channels != kShadingChannels)
        throw Error(err::kDimensionMismatch, "compose expects a shading render");
    require_same_size(outs.width, outs.height, g_color.width, g_color.height,
                      "color gradient");
    if (grads.ch.size() != outs.ch.size()) grads.ch.assign(outs.ch.size(), 0.0);
    for (int y = 0; y < outs.height; ++y)
        for (int x = 0; x < outs.width; ++x) {
            double* g = grads.ch.data() +
                        (static_cast<size_t>(y) * outs.width + x) * kShadingChannels;
            for (int c = 0; c < 3; ++c) g[7 + c] += g_color(x, y, c);
        }
}

/// Backward of compose_radiance into the blended-channel gradients. Fills
/// grads.ch (allocating if needed); other buffers are left untouched.
inline void compose_radiance_backward(const RenderOutputs& outs, const Image3& g_color,
                                      OutputGrads& grads)
{
    if (outs.channels != kShadingChannels)
        throw Error(err::kDimensionMismatch, "compose expects a shading render");
    require_same_size(outs.width, outs.height, g_color.width, g_color.height,
                      "color gradient");
    if (grads.ch.size() != outs.ch.size()) grads.ch.assign(outs.ch.size(), 0.0);
    for (int y = 0; y < outs.height; ++y)
        for (int x = 0; x < outs.width; ++x) {
            const double S = outs.at(x, y, 0);
            double* g = grads.ch.data() +
                        (static_cast<size_t>(y) * outs.width + x) * kShadingChannels;
            for (int c = 0; c < 3; ++c) {
                const double l_env = outs.at(x, y, 1 + c) + outs.at(x, y, 4 + c);
                const double l_total = S + (1.0 - S) * l_env;
                const double F = outs.at(x, y, 7 + c);
                const double gc = g_color(x, y, c);
                g[7 + c] += gc * l_total;
                g[0] += gc * F * (1.0 - l_env);
                g[1 + c] += gc * F * (1.0 - S);
                g[4 + c] += gc * F * (1.0 - S);
            }
        }
}

/// One full forward render: visibility, shading, blending, composition.
struct ShadedRender {
    RenderOutputs raster;
    Image3 color;
};

template <typename Cam>
ShadedRender render_color(const GaussianScene& scene, const ShadowBvh& bvh,
                          const Cam& cam, const SunLight& sun,
                          const ShadowConfig& shadow_cfg = {},
                          const RasterConfig& raster_cfg = {})
{
    const std::vector<double> S =
        scene_visibility(scene, bvh, sun.direction, shadow_cfg);
    const std::vector<double> payload =
        scene_payload(scene, cam, sun.direction, S, raster_cfg.threads);
    ShadedRender out;
    out.raster = rasterize(scene, cam, payload, kShadingChannels, raster_cfg);
    out.color = compose_radiance(out.raster);
    return out;
}

}  // namespace sgs
