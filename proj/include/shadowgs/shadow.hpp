#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/gaussians.hpp"
#include "shadowgs/rasterizer.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

namespace sgs {

struct ShadowConfig {
    double o_min = 0.001;       // transparency threshold for proxies and hits
    double tau_sigma = 3.0;     // self-shadow cutoff, in origin stddevs along the ray
    double early_exit = 1e-4;   // stop accumulating once visibility drops below
    double fixed_step = 0.0;    // > 0: detect candidates by marching at this step
    double march_span = 0.0;    // > 0: cap on marched distance (0 = scene extent)
    int threads = 0;
};

/// Icosahedron hull around the region where a Gaussian's response can exceed
/// o_min. Vertices are the unit icosahedron scaled by sqrt(2 ln(o/o_min)),
/// mapped through the Gaussian's rotation and scale. The inscribed sphere of
/// that hull sits at 0.7947 of the circumradius, above the sqrt(ln(o/o_min))
/// whitened radius of the iso-surface, so the hull genuinely contains it.
struct BoundingProxy {
    int gauss = -1;
    std::array<Vec3, 12> verts;
    Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();
};

namespace detail {

inline const std::array<Vec3, 12>& icosahedron_vertices()
{
    // circumradius normalized to 1
    static const std::array<Vec3, 12> v = [] {
        const double phi = 0.5 * (1.0 + std::sqrt(5.0));
        const double n = std::sqrt(1.0 + phi * phi);
        const double a = 1.0 / n, b = phi / n;
        return std::array<Vec3, 12>{
            Vec3(-a, b, 0), Vec3(a, b, 0),   Vec3(-a, -b, 0), Vec3(a, -b, 0),
            Vec3(0, -a, b), Vec3(0, a, b),   Vec3(0, -a, -b), Vec3(0, a, -b),
            Vec3(b, 0, -a), Vec3(b, 0, a),   Vec3(-b, 0, -a), Vec3(-b, 0, a)};
    }();
    return v;
}

}  // namespace detail

inline std::optional<BoundingProxy> build_proxy(const Gaussian3D& g, int gauss_index,
                                                double o_min = 0.001)
{
    const double o = g.opacity();
    if (!(o > o_min)) return std::nullopt;

    BoundingProxy p;
    p.gauss = gauss_index;
    const double k = std::sqrt(2.0 * std::log(o / o_min));
    const Mat3 R = quat_to_rotation(g.rotation);
    const Vec3 s = g.scales();
    p.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    p.hi = -p.lo;
    for (int i = 0; i < 12; ++i) {
        const Vec3& a = detail::icosahedron_vertices()[i];
        p.verts[i] = R * (s.cwiseProduct(a * k)) + g.position;
        p.lo = p.lo.cwiseMin(p.verts[i]);
        p.hi = p.hi.cwiseMax(p.verts[i]);
    }
    return p;
}

struct BvhNode {
    Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();
    int left = -1, right = -1;  // internal children
    int start = 0, count = 0;   // leaf item range (count > 0 means leaf)
};

struct ShadowBvh {
    std::vector<BvhNode> nodes;   // nodes[0] is the root
    std::vector<int> item_gauss;  // leaf order -> gaussian index
    std::vector<Vec3> item_lo, item_hi;

    bool empty() const { return nodes.empty(); }
    size_t proxy_count() const { return item_gauss.size(); }
};

namespace detail {

inline int bvh_build_node(ShadowBvh& bvh, std::vector<int>& order,
                          const std::vector<Vec3>& lo, const std::vector<Vec3>& hi,
                          const std::vector<Vec3>& centroid, int begin, int end)
{
    const int node_id = static_cast<int>(bvh.nodes.size());
    bvh.nodes.emplace_back();

    Vec3 nlo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 nhi = -nlo;
    Vec3 clo = nlo, chi = nhi;
    for (int i = begin; i < end; ++i) {
        nlo = nlo.cwiseMin(lo[order[i]]);
        nhi = nhi.cwiseMax(hi[order[i]]);
        clo = clo.cwiseMin(centroid[order[i]]);
        chi = chi.cwiseMax(centroid[order[i]]);
    }
    bvh.nodes[node_id].lo = nlo;
    bvh.nodes[node_id].hi = nhi;

    const int count = end - begin;
    if (count <= 4) {
        bvh.nodes[node_id].start = begin;
        bvh.nodes[node_id].count = count;
        return node_id;
    }

    int axis = 0;
    const Vec3 ext = chi - clo;
    if (ext.y() > ext.x()) axis = 1;
    if (ext.z() > ext[axis]) axis = 2;
    const int mid = begin + count / 2;
    std::nth_element(order.begin() + begin, order.begin() + mid, order.begin() + end,
                     [&](int a, int b) { return centroid[a][axis] < centroid[b][axis]; });

    const int l = bvh_build_node(bvh, order, lo, hi, centroid, begin, mid);
    const int r = bvh_build_node(bvh, order, lo, hi, centroid, mid, end);
    bvh.nodes[node_id].left = l;
    bvh.nodes[node_id].right = r;
    return node_id;
}

/// Slab test over t >= 0. Zero direction components are handled by a direct
/// containment check so no NaN can leak out of the arithmetic.
inline bool ray_hits_aabb(const Vec3& o, const Vec3& r, const Vec3& lo, const Vec3& hi)
{
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (r[a] == 0.0) {
            if (o[a] < lo[a] || o[a] > hi[a]) return false;
            continue;
        }
        const double inv = 1.0 / r[a];
        double ta = (lo[a] - o[a]) * inv;
        double tb = (hi[a] - o[a]) * inv;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    return true;
}

}  // namespace detail

inline ShadowBvh build_bvh(const std::vector<BoundingProxy>& proxies)
{
    if (proxies.empty()) throw Error(err::kEmptyBvh, "no proxies to build a BVH from");

    const int n = static_cast<int>(proxies.size());
    std::vector<Vec3> lo(n), hi(n), centroid(n);
    for (int i = 0; i < n; ++i) {
        lo[i] = proxies[i].lo;
        hi[i] = proxies[i].hi;
        centroid[i] = 0.5 * (proxies[i].lo + proxies[i].hi);
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    ShadowBvh bvh;
    bvh.nodes.reserve(static_cast<size_t>(2 * n));
    detail::bvh_build_node(bvh, order, lo, hi, centroid, 0, n);

    bvh.item_gauss.resize(n);
    bvh.item_lo.resize(n);
    bvh.item_hi.resize(n);
    for (int i = 0; i < n; ++i) {
        bvh.item_gauss[i] = proxies[order[i]].gauss;
        bvh.item_lo[i] = proxies[order[i]].lo;
        bvh.item_hi[i] = proxies[order[i]].hi;
    }
    return bvh;
}

/// Proxies plus BVH for a whole scene. Gaussians at or below o_min carry no
/// proxy; they can never produce a response above the hit threshold. A scene
/// with no usable proxies yields an empty BVH, meaning no occluders at all.
inline ShadowBvh scene_bvh(const GaussianScene& scene, double o_min = 0.001)
{
    std::vector<BoundingProxy> proxies;
    proxies.reserve(scene.gaussians.size());
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        auto p = build_proxy(scene.gaussians[i], static_cast<int>(i), o_min);
        if (p) proxies.push_back(*p);
    }
    if (proxies.empty()) return ShadowBvh{};
    return build_bvh(proxies);
}

/// Gaussian indices whose proxy AABB the ray from `origin` along `r` touches,
/// in ascending index order.
inline void bvh_candidates(const ShadowBvh& bvh, const Vec3& origin, const Vec3& r,
                           std::vector<int>& out)
{
    out.clear();
    if (bvh.empty()) return;
    int stack[64];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const BvhNode& node = bvh.nodes[stack[--top]];
        if (!detail::ray_hits_aabb(origin, r, node.lo, node.hi)) continue;
        if (node.count > 0) {
            for (int i = node.start; i < node.start + node.count; ++i)
                if (detail::ray_hits_aabb(origin, r, bvh.item_lo[i], bvh.item_hi[i]))
                    out.push_back(bvh.item_gauss[i]);
        } else {
            stack[top++] = node.left;
            stack[top++] = node.right;
        }
    }
    std::sort(out.begin(), out.end());
}

inline std::vector<int> bvh_candidates(const ShadowBvh& bvh, const Vec3& origin,
                                       const Vec3& r)
{
    std::vector<int> out;
    bvh_candidates(bvh, origin, r, out);
    return out;
}

namespace detail {

struct ShadowHit {
    int gauss;
    double t;       // along-ray peak parameter
    double alpha;   // response at the peak
};

/// Peak response of Gaussian i along origin + t*r. Returns the hit when it
/// clears the self-shadow distance and the o_min response threshold.
inline bool eval_shadow_hit(const GaussianScene& scene, int i, const Vec3& origin,
                            const Vec3& r, double tau_min, double o_min, ShadowHit& hit)
{
    const Gaussian3D& g = scene.gaussians[i];
    const double o = g.opacity();
    if (!(o > o_min)) return false;

    Eigen::LLT<Mat3> llt(g.covariance());
    const Vec3 pr = llt.solve(r);
    const double denom = r.dot(pr);
    if (!(denom > 0.0)) return false;
    const double t = (g.position - origin).dot(pr) / denom;
    if (!(t > tau_min)) return false;

    const Vec3 delta = origin + t * r - g.position;
    const double q = delta.dot(llt.solve(delta));
    const double alpha = o * std::exp(-q);
    if (!(alpha >= o_min)) return false;

    hit = {i, t, alpha};
    return true;
}

inline double origin_tau_min(const GaussianScene& scene, int origin_idx, const Vec3& r,
                             double tau_sigma)
{
    const Mat3 cov = scene.gaussians[origin_idx].covariance();
    return tau_sigma * std::sqrt(r.dot(cov * r));
}

/// March the ray at a fixed step; a candidate counts as detected when some
/// sample point lands inside its proxy AABB. Reproduces the paper's sampling
/// strategy, including its ability to step over thin occluders.
inline void marched_candidates(const ShadowBvh& bvh, const Vec3& origin, const Vec3& r,
                               double step, double span, std::vector<int>& out)
{
    out.clear();
    if (bvh.empty() || !(step > 0.0)) return;
    double t_max = span;
    if (!(t_max > 0.0)) {
        // walk until the ray leaves the root box
        const BvhNode& root = bvh.nodes[0];
        double t1 = 0.0;
        for (int a = 0; a < 3; ++a) {
            if (r[a] == 0.0) continue;
            const double inv = 1.0 / r[a];
            const double ta = (root.lo[a] - origin[a]) * inv;
            const double tb = (root.hi[a] - origin[a]) * inv;
            t1 = std::max(t1, std::max(ta, tb));
        }
        t_max = t1;
    }
    std::vector<char> seen(bvh.item_gauss.size(), 0);
    for (double t = step; t <= t_max; t += step) {
        const Vec3 x = origin + t * r;
        for (size_t i = 0; i < bvh.item_gauss.size(); ++i) {
            if (seen[i]) continue;
            if ((x.array() >= bvh.item_lo[i].array()).all() &&
                (x.array() <= bvh.item_hi[i].array()).all()) {
                seen[i] = 1;
                out.push_back(bvh.item_gauss[i]);
            }
        }
    }
    std::sort(out.begin(), out.end());
}

inline double visibility_over(const GaussianScene& scene, const std::vector<int>& cand,
                              int origin_idx, const Vec3& origin, const Vec3& r,
                              double tau_min, const ShadowConfig& cfg,
                              std::vector<ShadowHit>* hits)
{
    double S = 1.0;
    ShadowHit hit;
    for (int i : cand) {
        if (i == origin_idx) continue;
        if (!eval_shadow_hit(scene, i, origin, r, tau_min, cfg.o_min, hit)) continue;
        S *= 1.0 - hit.alpha;
        if (hits) hits->push_back(hit);
        if (S < cfg.early_exit) break;
    }
    return S;
}

}  // namespace detail

/// Fraction of direct sunlight reaching the center of Gaussian origin_idx
/// along the unit direction r, per the transmittance product over the peak
/// responses of every occluding Gaussian.
inline double solar_visibility(const GaussianScene& scene, const ShadowBvh& bvh,
                               int origin_idx, const Vec3& r,
                               const ShadowConfig& cfg = {},
                               std::vector<detail::ShadowHit>* hits = nullptr)
{
    const Vec3 origin = scene.gaussians[origin_idx].position;
    const double tau_min = detail::origin_tau_min(scene, origin_idx, r, cfg.tau_sigma);
    std::vector<int> cand;
    if (cfg.fixed_step > 0.0)
        detail::marched_candidates(bvh, origin, r, cfg.fixed_step, cfg.march_span, cand);
    else
        bvh_candidates(bvh, origin, r, cand);
    return detail::visibility_over(scene, cand, origin_idx, origin, r, tau_min, cfg, hits);
}

/// Same result as solar_visibility but testing every Gaussian in index order,
/// with no acceleration structure. The BVH path must match this exactly.
inline double solar_visibility_brute(const GaussianScene& scene, int origin_idx,
                                     const Vec3& r, const ShadowConfig& cfg = {},
                                     std::vector<detail::ShadowHit>* hits = nullptr)
{
    const Vec3 origin = scene.gaussians[origin_idx].position;
    const double tau_min = detail::origin_tau_min(scene, origin_idx, r, cfg.tau_sigma);
    std::vector<int> cand(scene.gaussians.size());
    std::iota(cand.begin(), cand.end(), 0);
    return detail::visibility_over(scene, cand, origin_idx, origin, r, tau_min, cfg, hits);
}

/// Per-Gaussian solar visibility for one sun direction.
inline std::vector<double> scene_visibility(const GaussianScene& scene,
                                            const ShadowBvh& bvh, const Vec3& r,
                                            const ShadowConfig& cfg = {})
{
    std::vector<double> S(scene.gaussians.size(), 1.0);
    parallel_blocks(static_cast<std::int64_t>(scene.gaussians.size()), cfg.threads,
                    [&](std::int64_t lo, std::int64_t hi, int) {
        std::vector<int> cand;
        for (std::int64_t i = lo; i < hi; ++i) {
            const Vec3 origin = scene.gaussians[i].position;
            const double tau_min =
                detail::origin_tau_min(scene, static_cast<int>(i), r, cfg.tau_sigma);
            if (cfg.fixed_step > 0.0)
                detail::marched_candidates(bvh, origin, r, cfg.fixed_step, cfg.march_span,
                                           cand);
            else
                bvh_candidates(bvh, origin, r, cand);
            S[i] = detail::visibility_over(scene, cand, static_cast<int>(i), origin, r,
                                           tau_min, cfg, nullptr);
        }
    });
    return S;
}

struct ShadowGrads {
    std::vector<Vec3> position;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> rotation;
    std::vector<double> opacity_logit;
};

/// Backpropagates dL/dS_sun (one value per origin Gaussian) into the
/// parameters of the occluders and the origin centers. The peak parameter t*
/// extremizes the response along the ray, so its own sensitivity drops out
/// and only the direct dependence on the parameters remains.
inline ShadowGrads scene_visibility_backward(const GaussianScene& scene,
                                             const ShadowBvh& bvh, const Vec3& r,
                                             const std::vector<double>& gS,
                                             const ShadowConfig& cfg = {})
{
    const size_t N = scene.gaussians.size();
    if (gS.size() != N)
        throw Error(err::kDimensionMismatch, "visibility gradient size mismatch");

    // Each origin's hit contributions are recorded independently, then applied
    // serially in origin order, so the result does not depend on the worker
    // count. Slots: 3 position + 3 log_scale + 4 rotation + 1 opacity.
    struct Contribution {
        int gauss;
        double vals[11];
    };
    std::vector<std::vector<Contribution>> per_origin(N);

    parallel_blocks(static_cast<std::int64_t>(N), cfg.threads,
                    [&](std::int64_t lo_i, std::int64_t hi_i, int) {
        std::vector<int> cand;
        std::vector<detail::ShadowHit> hits;
        for (std::int64_t oi = lo_i; oi < hi_i; ++oi) {
            if (gS[oi] == 0.0) continue;
            const Vec3 origin = scene.gaussians[oi].position;
            const double tau_min =
                detail::origin_tau_min(scene, static_cast<int>(oi), r, cfg.tau_sigma);
            if (cfg.fixed_step > 0.0)
                detail::marched_candidates(bvh, origin, r, cfg.fixed_step, cfg.march_span,
                                           cand);
            else
                bvh_candidates(bvh, origin, r, cand);
            hits.clear();
            const double S = detail::visibility_over(scene, cand, static_cast<int>(oi),
                                                     origin, r, tau_min, cfg, &hits);
            if (hits.empty()) continue;

            Vec3 g_mu_origin = Vec3::Zero();
            for (const detail::ShadowHit& h : hits) {
                const Gaussian3D& g = scene.gaussians[h.gauss];
                // d log S / d alpha_i = -1/(1 - alpha_i)
                const double g_alpha = -gS[oi] * S / (1.0 - h.alpha);

                Eigen::LLT<Mat3> llt(g.covariance());
                const Vec3 delta = origin + h.t * r - g.position;
                const Vec3 v = llt.solve(delta);  // Sigma^-1 delta

                const Vec3 g_mu_occ = g_alpha * h.alpha * 2.0 * v;
                const Mat3 g_sigma = g_alpha * h.alpha * (v * v.transpose());
                const double g_logit = g_alpha * h.alpha * (1.0 - g.opacity());

                Vec3 g_ls = Vec3::Zero();
                Vec4 g_q = Vec4::Zero();
                covariance_backward(g.log_scale, g.rotation, g_sigma, g_ls, g_q);

                Contribution c;
                c.gauss = h.gauss;
                for (int a = 0; a < 3; ++a) c.vals[a] = g_mu_occ[a];
                for (int a = 0; a < 3; ++a) c.vals[3 + a] = g_ls[a];
                for (int a = 0; a < 4; ++a) c.vals[6 + a] = g_q[a];
                c.vals[10] = g_logit;
                per_origin[oi].push_back(c);
                g_mu_origin -= g_mu_occ;
            }
            Contribution self;
            self.gauss = static_cast<int>(oi);
            for (int a = 0; a < 3; ++a) self.vals[a] = g_mu_origin[a];
            for (int a = 3; a < 11; ++a) self.vals[a] = 0.0;
            per_origin[oi].push_back(self);
        }
    });

    ShadowGrads out;
    out.position.assign(N, Vec3::Zero());
    out.log_scale.assign(N, Vec3::Zero());
    out.rotation.assign(N, Vec4::Zero());
    out.opacity_logit.assign(N, 0.0);
    for (size_t oi = 0; oi < N; ++oi) {
        for (const Contribution& c : per_origin[oi]) {
            for (int a = 0; a < 3; ++a) out.position[c.gauss][a] += c.vals[a];
            for (int a = 0; a < 3; ++a) out.log_scale[c.gauss][a] += c.vals[3 + a];
            for (int a = 0; a < 4; ++a) out.rotation[c.gauss][a] += c.vals[6 + a];
            out.opacity_logit[c.gauss] += c.vals[10];
        }
    }
    return out;
}

/// Shadow map from a virtual viewpoint: per-Gaussian visibility for the given
/// sun blended as a single payload channel. Channel 0 holds S_v; alpha holds
/// the coverage used to mask the consistency loss.
template <typename Cam>
RenderOutputs render_shadow_view(const GaussianScene& scene, const ShadowBvh& bvh,
                                 const Cam& cam, const SunLight& sun,
                                 const ShadowConfig& shadow_cfg = {},
                                 const RasterConfig& raster_cfg = {})
{
    const std::vector<double> S = scene_visibility(scene, bvh, sun.direction, shadow_cfg);
    return rasterize(scene, cam, S, 1, raster_cfg);
}

}  // namespace sgs
