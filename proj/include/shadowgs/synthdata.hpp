#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/image.hpp"
#include "shadowgs/io.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

// Synthetic satellite scenes with analytic ground truth: a ground plane plus
// axis-aligned boxes, ray-cast exactly, with binary point-sun shadows. These
// renders are the supervision targets and evaluation references for the
// desk-scale experiments.

namespace sgs {

// ---------------------------------------------------------------------------
// Scene description. Boxes sit on the ground plane; faces are Lambertian and
// texture-free with one albedo each so illumination, not texture, carries the
// appearance. Face order: +x, -x, +y, -y, top, bottom.
// ---------------------------------------------------------------------------

struct SynthBox {
    Vec2 lo = Vec2::Zero();  // footprint corners, meters
    Vec2 hi = Vec2::Zero();
    double height = 1.0;     // above the ground plane
    std::array<Vec3, 6> face_albedo{};
};

struct SynthScene {
    double ground_height = 0.0;
    Vec3 ground_albedo = Vec3(0.4, 0.4, 0.4);
    std::vector<SynthBox> boxes;
    double skylight = 0.25;   // shadowed pixels keep skylight + nearlight
    double nearlight = 0.05;
    double extent = 100.0;    // scene spans [-extent/2, extent/2]^2
};

/// The renderer's compose step: full direct light when lit, the ambient
/// environment share when shadowed.
inline Vec3 synth_compose(const Vec3& albedo, double s_sun, double env)
{
    return albedo * (s_sun + (1.0 - s_sun) * env);
}

namespace detail {

struct BoxHit {
    double t = 0.0;
    int face = -1;  // +x, -x, +y, -y, top, bottom
};

/// Slab test against an axis-aligned box; nearest entry with t > 1e-9.
inline std::optional<BoxHit> ray_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi)
{
    double tnear = 1e-9;
    double tfar = std::numeric_limits<double>::infinity();
    int face = -1;
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0.0) {
            if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
            continue;
        }
        double t1 = (lo[a] - o[a]) / d[a];
        double t2 = (hi[a] - o[a]) / d[a];
        int f1 = a * 2 + 1;  // entering through the low face
        int f2 = a * 2;
        if (t1 > t2) {
            std::swap(t1, t2);
            std::swap(f1, f2);
        }
        if (t1 > tnear) {
            tnear = t1;
            face = f1;
        }
        tfar = std::min(tfar, t2);
        if (tnear > tfar) return std::nullopt;
    }
    if (face < 0) return std::nullopt;  // origin inside
    return BoxHit{tnear, face};
}

inline Vec3 face_normal(int face)
{
    Vec3 n = Vec3::Zero();
    n[face / 2] = face % 2 == 0 ? 1.0 : -1.0;
    return n;
}

inline Vec3 box_lo3(const SynthScene& s, const SynthBox& b)
{
    return Vec3(b.lo.x(), b.lo.y(), s.ground_height);
}

inline Vec3 box_hi3(const SynthScene& s, const SynthBox& b)
{
    return Vec3(b.hi.x(), b.hi.y(), s.ground_height + b.height);
}

struct SurfaceHit {
    bool valid = false;
    double t = std::numeric_limits<double>::infinity();
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::Zero();
    Vec3 albedo = Vec3::Zero();
    int box = -1;  // -1 = ground plane
};

inline SurfaceHit trace_scene(const SynthScene& s, const Vec3& o, const Vec3& d)
{
    SurfaceHit hit;
    if (d.z() < 0.0) {
        const double t = (s.ground_height - o.z()) / d.z();
        if (t > 1e-9) {
            hit.valid = true;
            hit.t = t;
            hit.normal = Vec3(0.0, 0.0, 1.0);
            hit.albedo = s.ground_albedo;
            hit.box = -1;
        }
    }
    for (size_t i = 0; i < s.boxes.size(); ++i) {
        const auto bh = ray_box(o, d, box_lo3(s, s.boxes[i]), box_hi3(s, s.boxes[i]));
        if (bh && bh->t < hit.t) {
            hit.valid = true;
            hit.t = bh->t;
            hit.normal = face_normal(bh->face);
            hit.albedo = s.boxes[i].face_albedo[bh->face];
            hit.box = static_cast<int>(i);
        }
    }
    if (hit.valid) hit.point = o + hit.t * d;
    return hit;
}

/// Occlusion test #1: march a ray from the surface point toward the sun and
/// slab-test every box. The hit point's own box is skipped; boxes are convex,
/// so a sun-facing surface can never be shadowed by its own box.
inline bool sun_occluded_ray(const SynthScene& s, const Vec3& p, const Vec3& sun_dir, int skip_box)
{
    for (size_t i = 0; i < s.boxes.size(); ++i) {
        if (static_cast<int>(i) == skip_box) continue;
        if (ray_box(p, sun_dir, box_lo3(s, s.boxes[i]), box_hi3(s, s.boxes[i]))) return true;
    }
    return false;
}

inline bool point_in_rect(const Vec2& p, const Vec2& lo, const Vec2& hi)
{
    return p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y();
}

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline bool segments_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2)
{
    const Vec2 r = p2 - p1, v = q2 - q1, qp = q1 - p1;
    const double denom = cross2(r, v);
    if (denom != 0.0) {
        const double t = cross2(qp, v) / denom;
        const double u = cross2(qp, r) / denom;
        return t >= 0.0 && t <= 1.0 && u >= 0.0 && u <= 1.0;
    }
    if (cross2(qp, r) != 0.0) return false;  // parallel, offset lines
    const double rr = r.dot(r);
    if (rr == 0.0) return qp.squaredNorm() == 0.0;
    double t0 = qp.dot(r) / rr;
    double t1 = (q2 - p1).dot(r) / rr;
    if (t0 > t1) std::swap(t0, t1);
    return t1 >= 0.0 && t0 <= 1.0;
}

/// Occlusion test #2, written independently of the slab path: clip the sun
/// ray to each box's height slab, project that piece onto the ground as a 2D
/// segment, and test it against the footprint rectangle (endpoint inside, or
/// crossing one of the four edges).
inline bool sun_occluded_footprint(const SynthScene& s, const Vec3& p, const Vec3& sun_dir,
                                   int skip_box)
{
    const double sz = sun_dir.z();
    if (!(sz > 0.0)) return true;
    for (size_t i = 0; i < s.boxes.size(); ++i) {
        if (static_cast<int>(i) == skip_box) continue;
        const SynthBox& b = s.boxes[i];
        const double thi = (s.ground_height + b.height - p.z()) / sz;
        const double tlo = std::max((s.ground_height - p.z()) / sz, 1e-9);
        if (thi <= tlo) continue;
        const Vec2 a(p.x() + tlo * sun_dir.x(), p.y() + tlo * sun_dir.y());
        const Vec2 c(p.x() + thi * sun_dir.x(), p.y() + thi * sun_dir.y());
        if (point_in_rect(a, b.lo, b.hi) || point_in_rect(c, b.lo, b.hi)) return true;
        const Vec2 r00(b.lo.x(), b.lo.y()), r10(b.hi.x(), b.lo.y());
        const Vec2 r01(b.lo.x(), b.hi.y()), r11(b.hi.x(), b.hi.y());
        if (segments_intersect(a, c, r00, r10) || segments_intersect(a, c, r10, r11) ||
            segments_intersect(a, c, r11, r01) || segments_intersect(a, c, r01, r00))
            return true;
    }
    return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Exact rendering.
// ---------------------------------------------------------------------------

struct SynthRender {
    Image3 color;
    Image3 albedo;
    Image1 shadow;  // binary solar visibility, 1 = lit
    Image1 depth;   // camera-frame z of the hit, -1 where the ray escapes
};

inline SynthRender render_synthetic(const SynthScene& s, const PinholeCamera& cam,
                                    const SunLight& sun)
{
    cam.check();
    const Vec3 o = cam.center();
    if (!(o.z() > s.ground_height))
        throw Error(err::kInvalidParameter, "camera must sit above the ground plane");

    SynthRender r;
    r.color.resize(cam.width, cam.height, 0.0);
    r.albedo.resize(cam.width, cam.height, 0.0);
    r.shadow.resize(cam.width, cam.height, 1.0);
    r.depth.resize(cam.width, cam.height, -1.0);
    const double env = s.skylight + s.nearlight;

    for (int j = 0; j < cam.height; ++j) {
        for (int i = 0; i < cam.width; ++i) {
            const Vec3 dir_cam =
                Vec3((i + 0.5 - cam.cx) / cam.fx, (j + 0.5 - cam.cy) / cam.fy, 1.0).normalized();
            const Vec3 d = cam.rot.transpose() * dir_cam;
            const detail::SurfaceHit hit = detail::trace_scene(s, o, d);
            if (!hit.valid) continue;
            double sv = 1.0;
            if (hit.normal.dot(sun.direction) <= 0.0 ||
                detail::sun_occluded_ray(s, hit.point, sun.direction, hit.box))
                sv = 0.0;
            r.shadow(i, j) = sv;
            r.albedo.pix(i, j) = hit.albedo;
            r.color.pix(i, j) = synth_compose(hit.albedo, sv, env);
            r.depth(i, j) = cam.to_camera(hit.point).z();
        }
    }
    return r;
}

/// Reference surface model: per-cell max height by the cell-center rule.
inline Dsm ground_truth_dsm(const SynthScene& s, double cell)
{
    if (!(cell > 0.0)) throw Error(err::kInvalidParameter, "dsm cell size must be positive");
    const int n = static_cast<int>(std::ceil(s.extent / cell));
    Dsm dsm;
    dsm.cell = cell;
    dsm.x0 = -s.extent / 2.0;
    dsm.y0 = -s.extent / 2.0;
    dsm.height.resize(n, n, s.ground_height);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const Vec2 c(dsm.cell_x(i), dsm.cell_y(j));
            double h = s.ground_height;
            for (const SynthBox& b : s.boxes)
                if (detail::point_in_rect(c, b.lo, b.hi))
                    h = std::max(h, s.ground_height + b.height);
            dsm.height(i, j) = h;
        }
    return dsm;
}

// ---------------------------------------------------------------------------
// The standard acceptance configuration: one seeded scene, a ring of oblique
// training views each under its own sun, and held-out test views.
// ---------------------------------------------------------------------------

struct SynthView {
    std::string id;
    PinholeCamera cam;
    SunLight sun;
    Image3 image;
    Image1 shadow_mask;  // 1 = lit
    Image1 depth;        // camera-frame z
};

struct SynthDataset {
    SynthScene scene;
    std::vector<SynthView> train;
    std::vector<SynthView> test;
    Dsm dsm;
};

namespace detail {

inline PinholeCamera ring_camera(double azimuth_deg, double off_nadir_deg, double dist, double fx,
                                 int size)
{
    const double az = deg2rad(azimuth_deg), th = deg2rad(off_nadir_deg);
    const Vec3 eye = dist * Vec3(std::sin(th) * std::sin(az), std::sin(th) * std::cos(az),
                                 std::cos(th));
    return look_at_camera(eye, Vec3::Zero(), Vec3(0.0, 0.0, 1.0), fx, fx, size, size);
}

inline std::string view_id(const char* prefix, int i)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03d", prefix, i);
    return buf;
}

}  // namespace detail

/// Deterministic scene + views for the end-to-end experiments. 12 training
/// views around the azimuth ring (3 in sparse mode), suns spread so sorted
/// azimuths stay >= 20 degrees apart, elevations in [30, 70].
inline SynthDataset make_acceptance_scene(unsigned seed, int image_size = 256, bool sparse = false)
{
    Rng rng(seed);
    SynthDataset ds;
    SynthScene& s = ds.scene;
    s.extent = 100.0;
    s.ground_height = 0.0;
    s.skylight = 0.25;
    s.nearlight = 0.05;
    s.ground_albedo = Vec3(uniform(rng, 0.3, 0.45), uniform(rng, 0.3, 0.45),
                           uniform(rng, 0.25, 0.4));

    const int n_boxes = uniform_int(rng, 3, 5);
    for (int k = 0; k < n_boxes; ++k) {
        SynthBox b;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double w = uniform(rng, 10.0, 22.0);
            const double l = uniform(rng, 10.0, 22.0);
            const double cx = uniform(rng, -31.0, 31.0);
            const double cy = uniform(rng, -31.0, 31.0);
            b.lo = Vec2(cx - w / 2.0, cy - l / 2.0);
            b.hi = Vec2(cx + w / 2.0, cy + l / 2.0);
            placed = true;
            for (const SynthBox& other : s.boxes)
                if (b.lo.x() - 3.0 < other.hi.x() && b.hi.x() + 3.0 > other.lo.x() &&
                    b.lo.y() - 3.0 < other.hi.y() && b.hi.y() + 3.0 > other.lo.y())
                    placed = false;
        }
        if (!placed) continue;  // crowded draw; keep the boxes we have
        b.height = uniform(rng, 5.0, 20.0);
        for (auto& face : b.face_albedo) {
            const double base = uniform(rng, 0.2, 0.8);
            for (int c = 0; c < 3; ++c)
                face[c] = std::clamp(base + uniform(rng, -0.08, 0.08), 0.05, 0.95);
        }
        s.boxes.push_back(b);
    }

    const double dist = 160.0;
    const double fx = 1.25 * image_size;
    const int n_train = sparse ? 3 : 12;
    const int n_test = sparse ? 1 : 3;
    const double spacing = 360.0 / n_train;
    const int sun_stride = sparse ? 2 : 5;  // coprime with the view count

    std::vector<SunLight> suns;
    for (int i = 0; i < n_train; ++i)
        suns.push_back(
            sun_direction(i * spacing + uniform(rng, -5.0, 5.0), uniform(rng, 30.0, 70.0)));

    for (int i = 0; i < n_train; ++i) {
        SynthView v;
        v.id = detail::view_id("train", i);
        v.cam = detail::ring_camera(i * spacing + spacing / 2.0 + uniform(rng, -8.0, 8.0),
                                    uniform(rng, 5.0, 25.0), dist, fx, image_size);
        v.sun = suns[static_cast<size_t>((i * sun_stride) % n_train)];
        ds.train.push_back(std::move(v));
    }
    for (int i = 0; i < n_test; ++i) {
        SynthView v;
        v.id = detail::view_id("test", i);
        v.cam = detail::ring_camera(i * (360.0 / n_test) + uniform(rng, 0.0, 360.0 / n_test),
                                    uniform(rng, 5.0, 20.0), dist, fx, image_size);
        v.sun = sun_direction(uniform(rng, 0.0, 360.0), uniform(rng, 35.0, 65.0));
        ds.test.push_back(std::move(v));
    }

    for (auto* group : {&ds.train, &ds.test})
        for (SynthView& v : *group) {
            SynthRender r = render_synthetic(s, v.cam, v.sun);
            v.image = std::move(r.color);
            v.shadow_mask = std::move(r.shadow);
            v.depth = std::move(r.depth);
        }
    ds.dsm = ground_truth_dsm(s, 0.5);
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/*.png masks/*.png depth/*.pfm cameras/*.txt
// suns.csv dsm.pfm dsm.json. Color goes through the 8-bit sRGB transfer;
// masks are linear 8-bit with 255 = lit; depth and DSM are float PFM.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_dsm_json(const std::string& path, const Dsm& dsm)
{
    std::ofstream out(path);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out.precision(17);
    out << "{\n  \"x0\": " << dsm.x0 << ",\n  \"y0\": " << dsm.y0
        << ",\n  \"cell\": " << dsm.cell << ",\n  \"no_data\": " << Dsm::kNoData << "\n}\n";
}

inline double json_number(const std::string& text, const std::string& key, const std::string& path)
{
    const std::string needle = "\"" + key + "\"";
    size_t pos = text.find(needle);
    if (pos == std::string::npos) throw Error(err::kParse, path + ": missing key " + key);
    pos = text.find(':', pos);
    if (pos == std::string::npos) throw Error(err::kParse, path + ": malformed entry " + key);
    try {
        return std::stod(text.substr(pos + 1));
    } catch (const std::exception&) {
        throw Error(err::kParse, path + ": non-numeric value for " + key);
    }
}

}  // namespace detail

inline void write_dataset(const std::string& dir, const SynthDataset& ds)
{
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    fs::create_directories(fs::path(dir) / "depth");
    fs::create_directories(fs::path(dir) / "cameras");

    std::ofstream csv(fs::path(dir) / "suns.csv");
    if (!csv) throw Error(err::kIo, "cannot open for writing: " + dir + "/suns.csv");
    csv.precision(17);
    csv << "view,azimuth_deg,elevation_deg\n";
    for (const auto* group : {&ds.train, &ds.test})
        for (const SynthView& v : *group) {
            write_png_color((fs::path(dir) / "images" / (v.id + ".png")).string(), v.image);
            write_png_gray((fs::path(dir) / "masks" / (v.id + ".png")).string(), v.shadow_mask);
            write_pfm((fs::path(dir) / "depth" / (v.id + ".pfm")).string(), v.depth);
            save_camera(v.cam, (fs::path(dir) / "cameras" / (v.id + ".txt")).string());
            csv << v.id << "," << v.sun.azimuth_deg << "," << v.sun.elevation_deg << "\n";
        }
    write_pfm((fs::path(dir) / "dsm.pfm").string(), ds.dsm.height);
    detail::write_dsm_json((fs::path(dir) / "dsm.json").string(), ds.dsm);
}

/// Loads a dataset directory. The analytic scene itself is not serialized;
/// the returned SynthScene keeps its defaults.
inline SynthDataset read_dataset(const std::string& dir)
{
    namespace fs = std::filesystem;
    std::ifstream csv(fs::path(dir) / "suns.csv");
    if (!csv) throw Error(err::kIo, "cannot open: " + dir + "/suns.csv");

    SynthDataset ds;
    std::string line;
    std::getline(csv, line);  // header
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        const size_t c1 = line.find(',');
        const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c2 == std::string::npos)
            throw Error(err::kParse, dir + "/suns.csv: expected 'view,azimuth,elevation': " + line);
        SynthView v;
        v.id = line.substr(0, c1);
        double az = 0.0, el = 0.0;
        try {
            az = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
            el = std::stod(line.substr(c2 + 1));
        } catch (const std::exception&) {
            throw Error(err::kParse, dir + "/suns.csv: non-numeric sun angles: " + line);
        }
        v.sun = sun_direction(az, el);
        v.cam = load_camera((fs::path(dir) / "cameras" / (v.id + ".txt")).string());
        v.image = read_png_color((fs::path(dir) / "images" / (v.id + ".png")).string());
        v.shadow_mask = read_png_gray((fs::path(dir) / "masks" / (v.id + ".png")).string());
        v.depth = read_pfm1((fs::path(dir) / "depth" / (v.id + ".pfm")).string());
        if (v.id.rfind("test", 0) == 0)
            ds.test.push_back(std::move(v));
        else
            ds.train.push_back(std::move(v));
    }

    ds.dsm.height = read_pfm1((fs::path(dir) / "dsm.pfm").string());
    std::ifstream jf(fs::path(dir) / "dsm.json");
    if (!jf) throw Error(err::kIo, "cannot open: " + dir + "/dsm.json");
    std::string text((std::istreambuf_iterator<char>(jf)), std::istreambuf_iterator<char>());
    ds.dsm.x0 = detail::json_number(text, "x0", dir + "/dsm.json");
    ds.dsm.y0 = detail::json_number(text, "y0", dir + "/dsm.json");
    ds.dsm.cell = detail::json_number(text, "cell", dir + "/dsm.json");
    return ds;
}

}  // namespace sgs
