#pragma once

#include "shadowgs/common.hpp"
#include "shadowgs/sh.hpp"

#include <Eigen/Geometry>

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace sgs {

// Exponent convention used throughout: G(x) = exp(-(x-mu)^T Sigma^-1 (x-mu)),
// without the customary 1/2. The same convention drives the 2D splat alpha
// and the shadow-ray response, so learned scales are simply sqrt(2) times
// smaller than they would be under the conventional form.

/// Rotation matrix of a quaternion, normalized internally. q = (w, x, y, z).
inline Mat3 quat_to_rotation(const Vec4& q)
{
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n))
        throw Error(err::kInvalidParameter, "quaternion has zero or non-finite norm");
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    Mat3 R;
    R << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
         2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
         2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
    return R;
}

/// Sigma = R * diag(exp(2*log_scale)) * R^T.
inline Mat3 covariance_from_params(const Vec3& log_scale, const Vec4& q)
{
    const Mat3 R = quat_to_rotation(q);
    const Vec3 s2 = (2.0 * log_scale).array().exp();
    return R * s2.asDiagonal() * R.transpose();
}

struct Gaussian3D {
    Vec3 position = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    Vec4 rotation = Vec4(1.0, 0.0, 0.0, 0.0);  // (w, x, y, z)
    double opacity_logit = 0.0;
    ShBlock albedo_sh;
    ShBlock nearlight_sh;

    Gaussian3D() = default;
    explicit Gaussian3D(int sh_degree) : albedo_sh(sh_degree), nearlight_sh(sh_degree) {}

    double opacity() const { return sigmoid(opacity_logit); }
    Vec3 scales() const { return log_scale.array().exp(); }
    Mat3 covariance() const { return covariance_from_params(log_scale, rotation); }
};

/// G(x) per the no-half exponent convention; 1 at the center.
inline double gaussian_eval(const Gaussian3D& g, const Vec3& x)
{
    const Vec3 d = x - g.position;
    const Mat3 cov = g.covariance();
    return std::exp(-d.dot(cov.llt().solve(d)));
}

/// Gradient of a scalar through R(q/|q|) onto the raw quaternion: entrywise
/// rotation-matrix partials at the normalized quaternion, then the
/// normalization projection.
inline Vec4 quat_rotation_backward(const Vec4& q, const Mat3& g_R)
{
    const double n = q.norm();
    const Vec4 qh = q / n;
    const double w = qh[0], x = qh[1], y = qh[2], z = qh[3];
    Mat3 dRw, dRx, dRy, dRz;
    dRw << 0, -z, y, z, 0, -x, -y, x, 0;
    dRx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dRy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dRz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    Vec4 g_qh(2.0 * g_R.cwiseProduct(dRw).sum(), 2.0 * g_R.cwiseProduct(dRx).sum(),
              2.0 * g_R.cwiseProduct(dRy).sum(), 2.0 * g_R.cwiseProduct(dRz).sum());
    return (g_qh - qh * qh.dot(g_qh)) / n;
}

/// Chains a free-entry gradient on Sigma back to log_scale and quaternion,
/// accumulating into the outputs.
inline void covariance_backward(const Vec3& log_scale, const Vec4& q, const Mat3& g_sigma,
                                Vec3& g_log_scale, Vec4& g_q)
{
    const Mat3 R = quat_to_rotation(q);
    const Vec3 s2 = (2.0 * log_scale).array().exp();
    const Mat3 g_R = (g_sigma + g_sigma.transpose()) * R * s2.asDiagonal();
    const Mat3 RtGR = R.transpose() * g_sigma * R;
    for (int k = 0; k < 3; ++k) g_log_scale[k] += 2.0 * s2[k] * RtGR(k, k);
    g_q += quat_rotation_backward(q, g_R);
}

/// Local tangent-plane metadata carried with a scene. Axes are East-North-Up
/// meters about the given geodetic origin.
struct SceneFrame {
    double origin_lat = 0.0;
    double origin_lon = 0.0;
    double origin_alt = 0.0;
};

struct GaussianScene {
    std::vector<Gaussian3D> gaussians;
    ShBlock skylight_sh{1};
    int sh_degree_active = 0;
    SceneFrame frame;

    int max_sh_degree() const
    {
        return gaussians.empty() ? kShMaxDegree : gaussians.front().albedo_sh.degree;
    }

    void check() const
    {
        if (skylight_sh.degree > 1)
            throw Error(err::kInvalidParameter, "skylight SH degree must be <= 1");
        skylight_sh.check();
        for (const auto& g : gaussians) {
            g.albedo_sh.check();
            g.nearlight_sh.check();
        }
    }
};

// ---------------------------------------------------------------------------
// Scene file: ASCII header + little-endian f32 records.
//
//   SHADOWGS-SCENE v1
//   count <N>
//   sh_degree <D>
//   sh_degree_active <A>
//   frame <lat> <lon> <alt>
//   fields position:3 log_scale:3 rotation:4 opacity_logit:1 albedo_sh:<3K> nearlight_sh:<3K>
//   end_header
//   <skylight record: 12 f32> <N gaussian records>
// ---------------------------------------------------------------------------

inline constexpr const char* kSceneMagic = "SHADOWGS-SCENE";
inline constexpr const char* kSceneVersion = "v1";

namespace detail {

inline void put_f32(std::vector<float>& buf, double v) { buf.push_back(static_cast<float>(v)); }

inline void put_block(std::vector<float>& buf, const ShBlock& b)
{
    for (double c : b.coeffs) put_f32(buf, c);
}

}  // namespace detail

inline void save_scene(const GaussianScene& scene, const std::string& path)
{
    scene.check();
    const int deg = scene.max_sh_degree();
    const int coeffs = 3 * sh_coeff_count(deg);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out << kSceneMagic << " " << kSceneVersion << "\n"
        << "count " << scene.gaussians.size() << "\n"
        << "sh_degree " << deg << "\n"
        << "sh_degree_active " << scene.sh_degree_active << "\n";
    out.precision(17);
    out << "frame " << scene.frame.origin_lat << " " << scene.frame.origin_lon << " "
        << scene.frame.origin_alt << "\n"
        << "fields position:3 log_scale:3 rotation:4 opacity_logit:1 albedo_sh:" << coeffs
        << " nearlight_sh:" << coeffs << "\n"
        << "end_header\n";

    std::vector<float> buf;
    buf.reserve(12 + scene.gaussians.size() * (11 + 2 * coeffs));
    detail::put_block(buf, scene.skylight_sh);
    for (const auto& g : scene.gaussians) {
        if (g.albedo_sh.degree != deg || g.nearlight_sh.degree != deg)
            throw Error(err::kInvalidParameter, "mixed SH degrees in one scene");
        for (int i = 0; i < 3; ++i) detail::put_f32(buf, g.position[i]);
        for (int i = 0; i < 3; ++i) detail::put_f32(buf, g.log_scale[i]);
        for (int i = 0; i < 4; ++i) detail::put_f32(buf, g.rotation[i]);
        detail::put_f32(buf, g.opacity_logit);
        detail::put_block(buf, g.albedo_sh);
        detail::put_block(buf, g.nearlight_sh);
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!out) throw Error(err::kIo, "write failed: " + path);
}

inline GaussianScene load_scene(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(err::kIo, "cannot open: " + path);

    std::string magic, version;
    in >> magic >> version;
    if (magic != kSceneMagic) throw Error(err::kParse, path + ": not a scene file");
    if (version != kSceneVersion)
        throw Error(err::kVersion, path + ": unsupported scene version '" + version + "'");

    size_t count = 0;
    int deg = -1;
    GaussianScene scene;
    std::string key;
    bool saw_fields = false;
    while (in >> key) {
        if (key == "end_header") break;
        if (key == "count") {
            in >> count;
        } else if (key == "sh_degree") {
            in >> deg;
        } else if (key == "sh_degree_active") {
            in >> scene.sh_degree_active;
        } else if (key == "frame") {
            in >> scene.frame.origin_lat >> scene.frame.origin_lon >> scene.frame.origin_alt;
        } else if (key == "fields") {
            std::string rest;
            std::getline(in, rest);
            saw_fields = true;
        } else {
            throw Error(err::kParse, path + ": unknown header key '" + key + "'");
        }
        if (!in) throw Error(err::kParse, path + ": malformed header value for '" + key + "'");
    }
    if (key != "end_header" || !saw_fields || deg < 0 || deg > kShMaxDegree)
        throw Error(err::kParse, path + ": incomplete header");
    in.get();  // newline after end_header

    const int coeffs = 3 * sh_coeff_count(deg);
    const size_t record = 11 + 2 * static_cast<size_t>(coeffs);
    std::vector<float> buf(12 + count * record);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<size_t>(in.gcount()) != buf.size() * sizeof(float)) {
        const size_t got = static_cast<size_t>(in.gcount()) / sizeof(float);
        const size_t bad = got < 12 ? 0 : (got - 12) / record;
        throw Error(err::kParse, path + ": truncated at record " + std::to_string(bad) + " of " +
                                     std::to_string(count));
    }

    scene.skylight_sh = ShBlock(1);
    for (int i = 0; i < 12; ++i) scene.skylight_sh.coeffs[i] = buf[i];
    scene.gaussians.reserve(count);
    const float* p = buf.data() + 12;
    for (size_t n = 0; n < count; ++n) {
        Gaussian3D g(deg);
        for (int i = 0; i < 3; ++i) g.position[i] = *p++;
        for (int i = 0; i < 3; ++i) g.log_scale[i] = *p++;
        for (int i = 0; i < 4; ++i) g.rotation[i] = *p++;
        g.opacity_logit = *p++;
        for (int i = 0; i < coeffs; ++i) g.albedo_sh.coeffs[i] = *p++;
        for (int i = 0; i < coeffs; ++i) g.nearlight_sh.coeffs[i] = *p++;
        scene.gaussians.push_back(std::move(g));
    }
    return scene;
}

}  // namespace sgs
