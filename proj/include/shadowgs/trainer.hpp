#pragma once

// Optimization loop: adaptive-moment parameter updates with per-group
// learning rates, gradient-driven densification without opacity resets,
// progressive SH activation, and one virtual shadow-consistency view per
// step. The whole loop is deterministic for a fixed seed.

#include "shadowgs/losses.hpp"
#include "shadowgs/shading.hpp"
#include "shadowgs/shadow.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace sgs {

enum class ConsistencyMode { kCameraAligned, kNadir, kBoth };

struct TrainConfig {
    int total_iters = 5000;
    int densify_until = 3000;
    int densify_interval = 300;
    int sh_upgrade_interval = 1000;

    // Positions decay exponentially from init to final, both scaled by the
    // scene extent; the rest are flat. Standard splatting recipe values.
    double lr_position_init = 1.6e-4;
    double lr_position_final = 1.6e-6;
    double lr_log_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_opacity = 5e-2;
    double lr_sh = 2.5e-3;
    double lr_sh_rest_scale = 0.05;  // bands above DC
    double lr_skylight = 2.5e-3;

    double densify_grad_threshold = 2e-4;  // mean screen-space gradient
    double prune_opacity_threshold = 5e-3;
    double split_size_frac = 0.01;  // of scene_extent: clone below, split above
    double scene_extent = 100.0;

    LossWeights weights;
    // Off: plain albedo color, no solar visibility, no shadow losses.
    // The baseline configuration for component ablations.
    bool use_render_equation = true;
    bool shadow_prior_active = false;
    ConsistencyMode consistency_mode = ConsistencyMode::kBoth;
    std::uint64_t seed = 0;
    int threads = 0;  // overrides raster/shadow thread counts when > 0

    RasterConfig raster;
    ShadowConfig shadow;

    int log_interval = 10;
    int checkpoint_interval = 0;  // 0 = final checkpoint only

    void check() const
    {
        if (total_iters < 1)
            throw Error(err::kInvalidParameter, "total_iters must be positive");
        if (densify_until > total_iters)
            throw Error(err::kInvalidParameter, "densify_until exceeds total_iters");
        if (densify_interval < 1 || sh_upgrade_interval < 1 || log_interval < 1)
            throw Error(err::kInvalidParameter, "schedule intervals must be >= 1");
        if (!(scene_extent > 0.0))
            throw Error(err::kInvalidParameter, "scene_extent must be positive");
    }
};

struct TrainView {
    PinholeCamera cam;
    SunLight sun;
    Image3 image;
    Image1 shadow_mask;  // 1 = lit; prior supervision in sparse mode
    Image1 vegetation;   // 1 = vegetation, excluded from the prior; may be empty
};

struct StepFlags {
    bool densify_now = false;
    int sh_degree = 0;
    bool shadow_prior_on = false;
};

inline StepFlags schedule(int iter, const TrainConfig& cfg, int max_degree = kShMaxDegree)
{
    if (iter < 0 || iter >= cfg.total_iters)
        throw Error(err::kInvalidParameter, "iteration outside the training range");
    StepFlags f;
    f.sh_degree = std::min(max_degree, iter / cfg.sh_upgrade_interval);
    f.densify_now = iter > 0 && iter % cfg.densify_interval == 0 && iter <= cfg.densify_until;
    f.shadow_prior_on = cfg.shadow_prior_active && iter <= cfg.densify_until;
    return f;
}

/// Virtual supervision view: either sun moved onto the camera axis, or both
/// camera and sun snapped to the vertical through the scene center. The view
/// axis and -sun direction are exactly collinear in both modes.
inline std::pair<PinholeCamera, SunLight> make_consistency_view(
    ConsistencyMode mode, const PinholeCamera& cam, const Vec3& scene_center = Vec3::Zero())
{
    PinholeCamera out = cam;
    Vec3 dir;
    if (mode == ConsistencyMode::kCameraAligned) {
        dir = -cam.rot.row(2).transpose();
    } else if (mode == ConsistencyMode::kNadir) {
        const double dist = std::max(1.0, (cam.center() - scene_center).norm());
        out = look_at_camera(scene_center + Vec3(0.0, 0.0, dist), scene_center,
                             Vec3(0.0, 1.0, 0.0), cam.fx, cam.fy, cam.width, cam.height);
        dir = Vec3(0.0, 0.0, 1.0);
    } else {
        throw Error(err::kInvalidParameter, "consistency view needs a single mode");
    }
    SunLight sun;
    sun.direction = dir.normalized();
    sun.elevation_deg = rad2deg(std::asin(std::clamp(sun.direction.z(), -1.0, 1.0)));
    sun.azimuth_deg = rad2deg(std::atan2(sun.direction.x(), sun.direction.y()));
    return {out, sun};
}

namespace detail {

struct AdamGroup {
    std::vector<double> m, v;
    long t = 0;

    void ensure(size_t n)
    {
        if (m.size() != n) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
        }
    }
    // Bias-corrected update step; returns the parameter delta.
    double step(size_t k, double g, double lr, double c1, double c2)
    {
        m[k] = 0.9 * m[k] + 0.1 * g;
        v[k] = 0.999 * v[k] + 0.001 * g * g;
        return lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + 1e-15);
    }
};

}  // namespace detail

struct OptimState {
    explicit OptimState(std::uint64_t seed = 0) : rng(seed) {}

    int iter = 0;
    detail::AdamGroup position, log_scale, rotation, opacity;
    detail::AdamGroup albedo_sh, nearlight_sh, skylight_sh;
    std::vector<double> screen_grad_accum;  // densification statistics
    std::vector<int> screen_grad_count;
    std::vector<Vec3> world_grad_accum;  // descent direction for clone shifts
    Rng rng;

    void ensure_sized(const GaussianScene& scene)
    {
        const size_t n = scene.gaussians.size();
        const size_t stride =
            scene.gaussians.empty() ? 0 : 3 * scene.gaussians.front().albedo_sh.count();
        position.ensure(3 * n);
        log_scale.ensure(3 * n);
        rotation.ensure(4 * n);
        opacity.ensure(n);
        albedo_sh.ensure(n * stride);
        nearlight_sh.ensure(n * stride);
        skylight_sh.ensure(3 * static_cast<size_t>(scene.skylight_sh.count()));
        if (screen_grad_accum.size() != n) {
            screen_grad_accum.assign(n, 0.0);
            screen_grad_count.assign(n, 0);
            world_grad_accum.assign(n, Vec3::Zero());
        }
    }
};

struct DensifyStats {
    size_t before = 0, after = 0;
    int cloned = 0, split = 0, pruned = 0;
};

/// Clone/split Gaussians whose mean screen-space positional gradient exceeds
/// the threshold, prune nearly transparent ones, and remap the optimizer
/// state. Opacities are never reset.
inline DensifyStats densify_and_prune(GaussianScene& scene, OptimState& st,
                                      const TrainConfig& cfg)
{
    st.ensure_sized(scene);
    const size_t N = scene.gaussians.size();
    const double split_bound = cfg.split_size_frac * cfg.scene_extent;
    DensifyStats stats;
    stats.before = N;

    std::vector<Gaussian3D> out;
    std::vector<long> parent;  // source index, or -1 for a fresh child
    out.reserve(N + N / 4);
    parent.reserve(N + N / 4);

    for (size_t i = 0; i < N; ++i) {
        const Gaussian3D& g = scene.gaussians[i];
        if (g.opacity() < cfg.prune_opacity_threshold) {
            ++stats.pruned;
            continue;
        }
        const double mean_grad =
            st.screen_grad_count[i] > 0
                ? st.screen_grad_accum[i] / static_cast<double>(st.screen_grad_count[i])
                : 0.0;
        if (mean_grad <= cfg.densify_grad_threshold) {
            out.push_back(g);
            parent.push_back(static_cast<long>(i));
            continue;
        }
        const Vec3 s = g.scales();
        if (s.maxCoeff() > split_bound) {
            // Split: the parent is replaced by two shrunken children sampled
            // from its own distribution.
            Gaussian3D child = g;
            child.log_scale = g.log_scale.array() - std::log(1.6);
            const Mat3 R = quat_to_rotation(g.rotation);
            for (int c = 0; c < 2; ++c) {
                Gaussian3D spawn = child;
                const Vec3 xi(normal(st.rng), normal(st.rng), normal(st.rng));
                spawn.position = g.position + R * s.cwiseProduct(xi);
                out.push_back(spawn);
                parent.push_back(-1);
            }
            ++stats.split;
        } else {
            // Clone: keep the original and nudge the copy down the
            // accumulated descent direction by half its mean radius.
            out.push_back(g);
            parent.push_back(static_cast<long>(i));
            Gaussian3D copy = g;
            const Vec3 dir = st.world_grad_accum[i];
            const double dn = dir.norm();
            if (dn > 0.0) copy.position -= dir / dn * (0.5 * s.mean());
            out.push_back(copy);
            parent.push_back(-1);
            ++stats.cloned;
        }
    }

    const size_t M = out.size();
    const auto remap = [&](detail::AdamGroup& gr, size_t stride) {
        std::vector<double> m(M * stride, 0.0), v(M * stride, 0.0);
        for (size_t k = 0; k < M; ++k) {
            if (parent[k] < 0) continue;
            const size_t src = static_cast<size_t>(parent[k]);
            for (size_t c = 0; c < stride; ++c) {
                m[k * stride + c] = gr.m[src * stride + c];
                v[k * stride + c] = gr.v[src * stride + c];
            }
        }
        gr.m = std::move(m);
        gr.v = std::move(v);
    };
    const size_t sh_stride = out.empty() ? 0 : 3 * out.front().albedo_sh.count();
    remap(st.position, 3);
    remap(st.log_scale, 3);
    remap(st.rotation, 4);
    remap(st.opacity, 1);
    remap(st.albedo_sh, sh_stride);
    remap(st.nearlight_sh, sh_stride);

    scene.gaussians = std::move(out);
    st.screen_grad_accum.assign(M, 0.0);
    st.screen_grad_count.assign(M, 0);
    st.world_grad_accum.assign(M, Vec3::Zero());
    stats.after = M;
    return stats;
}

/// One optimization step: render the round-robin view, evaluate every active
/// loss plus one virtual consistency view, backpropagate through blending,
/// shading, and solar visibility, and apply the optimizer update.
inline LossReport train_step(GaussianScene& scene, const std::vector<TrainView>& views,
                             const TrainConfig& cfg, OptimState& st)
{
    cfg.check();
    if (views.empty())
        throw Error(err::kInvalidParameter, "training needs at least one view");
    if (scene.gaussians.empty())
        throw Error(err::kInvalidParameter, "training needs a non-empty scene");
    st.ensure_sized(scene);

    const size_t N = scene.gaussians.size();
    const size_t sh_stride = 3 * scene.gaussians.front().albedo_sh.count();
    const StepFlags flags = schedule(st.iter, cfg, scene.max_sh_degree());
    scene.sh_degree_active = flags.sh_degree;

    RasterConfig rc = cfg.raster;
    ShadowConfig sc = cfg.shadow;
    if (cfg.threads > 0) {
        rc.threads = cfg.threads;
        sc.threads = cfg.threads;
    }

    const TrainView& view = views[static_cast<size_t>(st.iter) % views.size()];
    const ShadowBvh bvh = scene_bvh(scene, sc.o_min);

    // Parameter-gradient totals over both passes.
    std::vector<Vec3> g_pos(N, Vec3::Zero()), g_ls(N, Vec3::Zero());
    std::vector<Vec4> g_rot(N, Vec4::Zero());
    std::vector<double> g_op(N, 0.0);
    std::vector<double> g_alb(N * sh_stride, 0.0), g_nl(N * sh_stride, 0.0);
    std::vector<double> g_sky(3 * static_cast<size_t>(scene.skylight_sh.count()), 0.0);

    const auto accumulate = [&](const RasterGrads& rg, const ShadeGrads* sg,
                                const ShadowGrads& vg) {
        for (size_t i = 0; i < N; ++i) {
            g_pos[i] += rg.position[i] + vg.position[i];
            g_ls[i] += rg.log_scale[i] + vg.log_scale[i];
            g_rot[i] += rg.rotation[i] + vg.rotation[i];
            g_op[i] += rg.opacity_logit[i] + vg.opacity_logit[i];
            st.screen_grad_accum[i] += rg.screen_grad[i];
            if (rg.screen_grad[i] > 0.0) st.screen_grad_count[i] += 1;
        }
        if (sg) {
            for (size_t i = 0; i < N; ++i) g_pos[i] += sg->position[i];
            for (size_t k = 0; k < g_alb.size(); ++k) g_alb[k] += sg->albedo_sh[k];
            for (size_t k = 0; k < g_nl.size(); ++k) g_nl[k] += sg->nearlight_sh[k];
            for (size_t k = 0; k < g_sky.size(); ++k) g_sky[k] += sg->skylight_sh[k];
        }
    };
    const auto norm_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    };

    LossTerms terms;
    LossTerms gnorms;

    // --- training view -----------------------------------------------------
    {
        const std::vector<double> S = cfg.use_render_equation
                                          ? scene_visibility(scene, bvh, view.sun.direction, sc)
                                          : std::vector<double>(N, 1.0);
        const std::vector<double> payload =
            scene_payload(scene, view.cam, view.sun.direction, S, rc.threads);
        const RenderOutputs outs = rasterize(scene, view.cam, payload, kShadingChannels, rc);
        const Image3 color =
            cfg.use_render_equation ? compose_radiance(outs) : compose_albedo(outs);

        Image3 g_color;
        terms.photometric =
            photometric_loss_backward(color, view.image, cfg.weights.lambda_ssim, g_color);
        gnorms.photometric = norm_of(g_color.data);
        for (double& v : g_color.data) v *= cfg.weights.lambda_c;

        OutputGrads og;
        if (cfg.use_render_equation)
            compose_radiance_backward(outs, g_color, og);
        else
            compose_albedo_backward(outs, g_color, og);

        Image3 g_norm;
        Image1 g_depth;
        terms.depth_normal = depth_normal_loss_backward(outs.normal, outs.depth, view.cam,
                                                        outs.alpha, g_norm, g_depth);
        gnorms.depth_normal =
            std::sqrt(norm_of(g_norm.data) * norm_of(g_norm.data) +
                      norm_of(g_depth.data) * norm_of(g_depth.data));
        for (double& v : g_norm.data) v *= cfg.weights.lambda_n;
        for (double& v : g_depth.data) v *= cfg.weights.lambda_n;
        og.normal = std::move(g_norm);
        og.depth = std::move(g_depth);

        if (cfg.use_render_equation) {
            Image1 s_img(outs.width, outs.height);
            for (int j = 0; j < outs.height; ++j)
                for (int i = 0; i < outs.width; ++i) s_img(i, j) = outs.at(i, j, 0);

            Image1 g_s;
            terms.shadow_binarization = shadow_binarization_loss_backward(s_img, outs.alpha, g_s);
            gnorms.shadow_binarization = norm_of(g_s.data);
            for (size_t p = 0; p < g_s.data.size(); ++p)
                og.ch[p * kShadingChannels] += cfg.weights.lambda_s2 * g_s.data[p];

            if (flags.shadow_prior_on) {
                const Image1 veg = view.vegetation.data.empty()
                                       ? Image1(outs.width, outs.height, 0.0)
                                       : view.vegetation;
                Image1 g_p;
                terms.shadow_prior =
                    shadow_prior_loss_backward(s_img, view.shadow_mask, veg, outs.alpha, g_p);
                gnorms.shadow_prior = norm_of(g_p.data);
                for (size_t p = 0; p < g_p.data.size(); ++p)
                    og.ch[p * kShadingChannels] += cfg.weights.lambda_s3 * g_p.data[p];
            }
        }

        const RasterGrads rg = rasterize_backward(scene, view.cam, payload, kShadingChannels, og, rc);
        const ShadeGrads sg =
            scene_payload_backward(scene, view.cam, view.sun.direction, rg.payload, rc.threads);
        ShadowGrads vg;
        if (cfg.use_render_equation) {
            vg = scene_visibility_backward(scene, bvh, view.sun.direction, sg.s_sun, sc);
        } else {
            vg.position.assign(N, Vec3::Zero());
            vg.log_scale.assign(N, Vec3::Zero());
            vg.rotation.assign(N, Vec4::Zero());
            vg.opacity_logit.assign(N, 0.0);
        }
        accumulate(rg, &sg, vg);
    }

    // --- virtual consistency view ------------------------------------------
    if (cfg.use_render_equation) {
        ConsistencyMode mode = cfg.consistency_mode;
        if (mode == ConsistencyMode::kBoth)
            mode = st.iter % 2 == 0 ? ConsistencyMode::kCameraAligned : ConsistencyMode::kNadir;
        Vec3 center = Vec3::Zero();
        for (const Gaussian3D& g : scene.gaussians) center += g.position;
        center /= static_cast<double>(N);
        const auto [vcam, vsun] = make_consistency_view(mode, view.cam, center);

        const std::vector<double> S = scene_visibility(scene, bvh, vsun.direction, sc);
        const std::vector<double> payload =
            scene_payload(scene, vcam, vsun.direction, S, rc.threads);
        const RenderOutputs outs = rasterize(scene, vcam, payload, kShadingChannels, rc);

        Image1 s_img(outs.width, outs.height);
        for (int j = 0; j < outs.height; ++j)
            for (int i = 0; i < outs.width; ++i) s_img(i, j) = outs.at(i, j, 0);

        Image1 g_s;
        terms.shadow_consistency = shadow_consistency_loss_backward(s_img, outs.alpha, g_s);
        gnorms.shadow_consistency = norm_of(g_s.data);

        OutputGrads og;
        og.ch.assign(static_cast<size_t>(outs.width) * outs.height * kShadingChannels, 0.0);
        for (size_t p = 0; p < g_s.data.size(); ++p)
            og.ch[p * kShadingChannels] = cfg.weights.lambda_s1 * g_s.data[p];

        const RasterGrads rg = rasterize_backward(scene, vcam, payload, kShadingChannels, og, rc);
        const ShadeGrads sg =
            scene_payload_backward(scene, vcam, vsun.direction, rg.payload, rc.threads);
        const ShadowGrads vg = scene_visibility_backward(scene, bvh, vsun.direction, sg.s_sun, sc);
        accumulate(rg, &sg, vg);
    }

    LossReport report = total_loss(terms, cfg.weights, flags.shadow_prior_on);
    report.grad_norms = gnorms;

    // --- optimizer update ----------------------------------------------------
    for (size_t i = 0; i < N; ++i) st.world_grad_accum[i] += g_pos[i];

    double lr_pos = cfg.scene_extent * cfg.lr_position_init;
    if (cfg.lr_position_init > 0.0 && cfg.lr_position_final > 0.0) {
        const double frac = static_cast<double>(st.iter) / static_cast<double>(cfg.total_iters);
        lr_pos *= std::pow(cfg.lr_position_final / cfg.lr_position_init, frac);
    } else if (cfg.lr_position_init <= 0.0) {
        lr_pos = 0.0;
    }

    const auto correction = [](detail::AdamGroup& gr) {
        gr.t += 1;
        return std::pair<double, double>(1.0 - std::pow(0.9, static_cast<double>(gr.t)),
                                         1.0 - std::pow(0.999, static_cast<double>(gr.t)));
    };
    const auto [p1, p2] = correction(st.position);
    const auto [l1, l2] = correction(st.log_scale);
    const auto [r1, r2] = correction(st.rotation);
    const auto [o1, o2] = correction(st.opacity);
    const auto [a1, a2] = correction(st.albedo_sh);
    const auto [n1, n2] = correction(st.nearlight_sh);
    const auto [k1, k2] = correction(st.skylight_sh);

    const size_t sh_count = sh_stride / 3;
    for (size_t i = 0; i < N; ++i) {
        Gaussian3D& g = scene.gaussians[i];
        for (int c = 0; c < 3; ++c) {
            g.position[c] -= st.position.step(3 * i + c, g_pos[i][c], lr_pos, p1, p2);
            g.log_scale[c] -= st.log_scale.step(3 * i + c, g_ls[i][c], cfg.lr_log_scale, l1, l2);
        }
        for (int c = 0; c < 4; ++c)
            g.rotation[c] -= st.rotation.step(4 * i + c, g_rot[i][c], cfg.lr_rotation, r1, r2);
        g.opacity_logit -= st.opacity.step(i, g_op[i], cfg.lr_opacity, o1, o2);
        for (size_t k = 0; k < sh_stride; ++k) {
            const double lr = k % sh_count == 0 ? cfg.lr_sh : cfg.lr_sh * cfg.lr_sh_rest_scale;
            g.albedo_sh.coeffs[k] -=
                st.albedo_sh.step(i * sh_stride + k, g_alb[i * sh_stride + k], lr, a1, a2);
            g.nearlight_sh.coeffs[k] -=
                st.nearlight_sh.step(i * sh_stride + k, g_nl[i * sh_stride + k], lr, n1, n2);
        }
    }
    for (size_t k = 0; k < g_sky.size(); ++k)
        scene.skylight_sh.coeffs[k] -= st.skylight_sh.step(k, g_sky[k], cfg.lr_skylight, k1, k2);

    st.iter += 1;
    return report;
}

// ---------------------------------------------------------------------------
// Initialization

/// Mean distance from each point to its nearest neighbor; queries are strided
/// down to ~2000 samples on large clouds.
inline double mean_nn_distance(const std::vector<Vec3>& pts)
{
    if (pts.size() < 2) return 1.0;
    const size_t step = std::max<size_t>(1, pts.size() / 2000);
    double sum = 0.0;
    long n = 0;
    for (size_t i = 0; i < pts.size(); i += step) {
        double best = std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < pts.size(); ++j)
            if (j != i) best = std::min(best, (pts[i] - pts[j]).squaredNorm());
        sum += std::sqrt(best);
        ++n;
    }
    return sum / static_cast<double>(n);
}

namespace detail {

inline GaussianScene scene_from_positions(const std::vector<Vec3>& pts, int sh_degree)
{
    if (pts.empty()) throw Error(err::kInvalidParameter, "scene init needs at least one point");
    const double d = std::max(mean_nn_distance(pts), 1e-4);
    GaussianScene scene;
    scene.gaussians.reserve(pts.size());
    for (const Vec3& p : pts) {
        Gaussian3D g(sh_degree);
        g.position = p;
        g.log_scale = Vec3::Constant(std::log(d));
        g.opacity_logit = 0.0;  // o = 0.5
        scene.gaussians.push_back(g);
    }
    return scene;
}

}  // namespace detail

inline GaussianScene init_scene_from_points(const std::vector<Vec3>& pts, int sh_degree = 3)
{
    return detail::scene_from_positions(pts, sh_degree);
}

inline GaussianScene init_scene_random(int count, const Vec3& lo, const Vec3& hi,
                                       std::uint64_t seed, int sh_degree = 3)
{
    if (count < 1) throw Error(err::kInvalidParameter, "scene init needs a positive count");
    if (!((hi - lo).minCoeff() >= 0.0))
        throw Error(err::kInvalidParameter, "scene init box is inverted");
    Rng rng(seed);
    std::vector<Vec3> pts(static_cast<size_t>(count));
    for (Vec3& p : pts)
        p = Vec3(uniform(rng, lo.x(), hi.x()), uniform(rng, lo.y(), hi.y()),
                 uniform(rng, lo.z(), hi.z()));
    return detail::scene_from_positions(pts, sh_degree);
}

// ---------------------------------------------------------------------------
// Run driver and run-directory artifacts

struct TrainLogRow {
    int iter = 0;
    LossReport report;
    size_t gaussians = 0;
};

struct TrainResult {
    std::vector<TrainLogRow> losses;
    std::vector<DensifyStats> densify;
    std::vector<int> densify_iters;
};

inline void save_train_config(const std::string& path, const TrainConfig& cfg)
{
    const auto mode = static_cast<double>(static_cast<int>(cfg.consistency_mode));
    std::vector<std::pair<std::string, std::vector<double>>> kv = {
        {"total_iters", {static_cast<double>(cfg.total_iters)}},
        {"densify_until", {static_cast<double>(cfg.densify_until)}},
        {"densify_interval", {static_cast<double>(cfg.densify_interval)}},
        {"sh_upgrade_interval", {static_cast<double>(cfg.sh_upgrade_interval)}},
        {"lr_position_init", {cfg.lr_position_init}},
        {"lr_position_final", {cfg.lr_position_final}},
        {"lr_log_scale", {cfg.lr_log_scale}},
        {"lr_rotation", {cfg.lr_rotation}},
        {"lr_opacity", {cfg.lr_opacity}},
        {"lr_sh", {cfg.lr_sh}},
        {"lr_sh_rest_scale", {cfg.lr_sh_rest_scale}},
        {"lr_skylight", {cfg.lr_skylight}},
        {"densify_grad_threshold", {cfg.densify_grad_threshold}},
        {"prune_opacity_threshold", {cfg.prune_opacity_threshold}},
        {"split_size_frac", {cfg.split_size_frac}},
        {"scene_extent", {cfg.scene_extent}},
        {"lambda_c", {cfg.weights.lambda_c}},
        {"lambda_n", {cfg.weights.lambda_n}},
        {"lambda_s1", {cfg.weights.lambda_s1}},
        {"lambda_s2", {cfg.weights.lambda_s2}},
        {"lambda_s3", {cfg.weights.lambda_s3}},
        {"lambda_ssim", {cfg.weights.lambda_ssim}},
        {"use_render_equation", {cfg.use_render_equation ? 1.0 : 0.0}},
        {"shadow_prior_active", {cfg.shadow_prior_active ? 1.0 : 0.0}},
        {"consistency_mode", {mode}},
        {"seed_hi", {static_cast<double>(cfg.seed >> 32)}},
        {"seed_lo", {static_cast<double>(cfg.seed & 0xffffffffu)}},
        {"threads", {static_cast<double>(cfg.threads)}},
        {"log_interval", {static_cast<double>(cfg.log_interval)}},
        {"checkpoint_interval", {static_cast<double>(cfg.checkpoint_interval)}},
        {"raster_dilation", {cfg.raster.dilation}},
        {"raster_alpha_max", {cfg.raster.alpha_max}},
        {"raster_min_footprint_px", {cfg.raster.min_footprint_px}},
        {"raster_near_plane", {cfg.raster.near_plane}},
        {"raster_tile", {static_cast<double>(cfg.raster.tile)}},
        {"raster_q_cutoff", {cfg.raster.q_cutoff}},
        {"raster_stop_transmittance", {cfg.raster.stop_transmittance}},
        {"raster_eps_alpha", {cfg.raster.eps_alpha}},
        {"raster_depth_background", {cfg.raster.depth_background}},
        {"shadow_o_min", {cfg.shadow.o_min}},
        {"shadow_tau_sigma", {cfg.shadow.tau_sigma}},
        {"shadow_early_exit", {cfg.shadow.early_exit}},
        {"shadow_fixed_step", {cfg.shadow.fixed_step}},
        {"shadow_march_span", {cfg.shadow.march_span}},
    };
    write_kv(path, kv);
}

inline TrainConfig load_train_config(const std::string& path)
{
    const KvMap kv = read_kv(path);
    const auto get = [&](const char* key) { return kv_require(kv, key, 1, path)[0]; };
    TrainConfig cfg;
    cfg.total_iters = static_cast<int>(get("total_iters"));
    cfg.densify_until = static_cast<int>(get("densify_until"));
    cfg.densify_interval = static_cast<int>(get("densify_interval"));
    cfg.sh_upgrade_interval = static_cast<int>(get("sh_upgrade_interval"));
    cfg.lr_position_init = get("lr_position_init");
    cfg.lr_position_final = get("lr_position_final");
    cfg.lr_log_scale = get("lr_log_scale");
    cfg.lr_rotation = get("lr_rotation");
    cfg.lr_opacity = get("lr_opacity");
    cfg.lr_sh = get("lr_sh");
    cfg.lr_sh_rest_scale = get("lr_sh_rest_scale");
    cfg.lr_skylight = get("lr_skylight");
    cfg.densify_grad_threshold = get("densify_grad_threshold");
    cfg.prune_opacity_threshold = get("prune_opacity_threshold");
    cfg.split_size_frac = get("split_size_frac");
    cfg.scene_extent = get("scene_extent");
    cfg.weights.lambda_c = get("lambda_c");
    cfg.weights.lambda_n = get("lambda_n");
    cfg.weights.lambda_s1 = get("lambda_s1");
    cfg.weights.lambda_s2 = get("lambda_s2");
    cfg.weights.lambda_s3 = get("lambda_s3");
    cfg.weights.lambda_ssim = get("lambda_ssim");
    cfg.use_render_equation = get("use_render_equation") != 0.0;
    cfg.shadow_prior_active = get("shadow_prior_active") != 0.0;
    const int mode = static_cast<int>(get("consistency_mode"));
    if (mode < 0 || mode > 2)
        throw Error(err::kParse, path + ": consistency_mode out of range");
    cfg.consistency_mode = static_cast<ConsistencyMode>(mode);
    cfg.seed = (static_cast<std::uint64_t>(get("seed_hi")) << 32) |
               static_cast<std::uint64_t>(get("seed_lo"));
    cfg.threads = static_cast<int>(get("threads"));
    cfg.log_interval = static_cast<int>(get("log_interval"));
    cfg.checkpoint_interval = static_cast<int>(get("checkpoint_interval"));
    cfg.raster.dilation = get("raster_dilation");
    cfg.raster.alpha_max = get("raster_alpha_max");
    cfg.raster.min_footprint_px = get("raster_min_footprint_px");
    cfg.raster.near_plane = get("raster_near_plane");
    cfg.raster.tile = static_cast<int>(get("raster_tile"));
    cfg.raster.q_cutoff = get("raster_q_cutoff");
    cfg.raster.stop_transmittance = get("raster_stop_transmittance");
    cfg.raster.eps_alpha = get("raster_eps_alpha");
    cfg.raster.depth_background = get("raster_depth_background");
    cfg.shadow.o_min = get("shadow_o_min");
    cfg.shadow.tau_sigma = get("shadow_tau_sigma");
    cfg.shadow.early_exit = get("shadow_early_exit");
    cfg.shadow.fixed_step = get("shadow_fixed_step");
    cfg.shadow.march_span = get("shadow_march_span");
    cfg.check();
    return cfg;
}

inline void write_loss_csv(const std::string& path, const std::vector<TrainLogRow>& rows)
{
    std::ofstream out(path);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out.precision(17);
    out << "iter,total,photometric,depth_normal,shadow_consistency,shadow_binarization,"
           "shadow_prior,prior_active,gaussians\n";
    for (const TrainLogRow& r : rows)
        out << r.iter << ',' << r.report.total << ',' << r.report.terms.photometric << ','
            << r.report.terms.depth_normal << ',' << r.report.terms.shadow_consistency << ','
            << r.report.terms.shadow_binarization << ',' << r.report.terms.shadow_prior << ','
            << (r.report.prior_active ? 1 : 0) << ',' << r.gaussians << "\n";
}

inline void write_densify_csv(const std::string& path, const TrainResult& result)
{
    std::ofstream out(path);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out << "iter,before,after,cloned,split,pruned\n";
    for (size_t k = 0; k < result.densify.size(); ++k) {
        const DensifyStats& d = result.densify[k];
        out << result.densify_iters[k] << ',' << d.before << ',' << d.after << ',' << d.cloned
            << ',' << d.split << ',' << d.pruned << "\n";
    }
}

/// Full training run. When out_dir is non-empty it receives the config
/// snapshot, loss and densification CSVs, checkpoints, and on a non-finite
/// loss a diagnostics snapshot of the offending scene.
inline TrainResult run_training(GaussianScene& scene, const std::vector<TrainView>& views,
                                const TrainConfig& cfg, const std::string& out_dir = "")
{
    cfg.check();
    namespace fs = std::filesystem;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        save_train_config(out_dir + "/config.txt", cfg);
    }

    OptimState st(cfg.seed);
    TrainResult result;
    for (int it = 0; it < cfg.total_iters; ++it) {
        LossReport rep;
        try {
            rep = train_step(scene, views, cfg, st);
        } catch (const Error& e) {
            if (!out_dir.empty()) {
                std::ofstream diag(out_dir + "/diagnostics.txt");
                diag << "aborted at iteration " << it << ": " << e.what() << "\n";
                save_scene(scene, out_dir + "/scene_aborted.sgs");
                write_loss_csv(out_dir + "/losses.csv", result.losses);
            }
            throw;
        }
        if (it % cfg.log_interval == 0 || it == cfg.total_iters - 1)
            result.losses.push_back({it, rep, scene.gaussians.size()});

        const StepFlags flags = schedule(it, cfg, scene.max_sh_degree());
        if (flags.densify_now) {
            result.densify.push_back(densify_and_prune(scene, st, cfg));
            result.densify_iters.push_back(it);
        }
        if (!out_dir.empty() && cfg.checkpoint_interval > 0 &&
            (it + 1) % cfg.checkpoint_interval == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "/checkpoint_%06d.sgs", it + 1);
            save_scene(scene, out_dir + name);
        }
    }
    if (!out_dir.empty()) {
        write_loss_csv(out_dir + "/losses.csv", result.losses);
        write_densify_csv(out_dir + "/densify.csv", result);
        save_scene(scene, out_dir + "/scene_final.sgs");
    }
    return result;
}

}  // namespace sgs
