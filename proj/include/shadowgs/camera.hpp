#pragma once

#include "shadowgs/common.hpp"
#include "shadowgs/io.hpp"

#include <string>

namespace sgs {

/// Pinhole camera. World frame is a local East-North-Up tangent plane in
/// meters; camera frame is x-right, y-down, z-forward. Pixel centers sit at
/// half-integer coordinates: pixel (i,j) covers [i,i+1)x[j,j+1).
struct PinholeCamera {
    double fx = 1.0, fy = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    Mat3 rot = Mat3::Identity();  // world -> camera
    Vec3 t = Vec3::Zero();

    Vec3 to_camera(const Vec3& x_world) const { return rot * x_world + t; }
    Vec3 center() const { return -rot.transpose() * t; }

    void check() const
    {
        if (!(fx > 0.0) || !(fy > 0.0))
            throw Error(err::kInvalidParameter, "focal lengths must be positive");
        if (width <= 0 || height <= 0)
            throw Error(err::kInvalidParameter, "image size must be positive");
        if ((rot * rot.transpose() - Mat3::Identity()).norm() > 1e-6 ||
            rot.determinant() < 0.0)
            throw Error(err::kInvalidParameter, "rotation must be orthonormal, det +1");
    }
};

struct Projection {
    double u, v;   // pixels
    double z;      // camera depth (z-forward)
};

inline Projection project(const PinholeCamera& cam, const Vec3& x_world)
{
    const Vec3 xc = cam.to_camera(x_world);
    if (!(xc.z() > 0.0)) throw Error(err::kBehindCamera, "point at or behind the camera plane");
    return {cam.fx * xc.x() / xc.z() + cam.cx, cam.fy * xc.y() / xc.z() + cam.cy, xc.z()};
}

/// Affine approximation of the projective transform at a camera-space point.
/// Rows 1-2 differentiate (u, v); row 3 differentiates the distance to the
/// camera center, so the third output axis carries metric depth.
inline Mat3 projection_jacobian(const PinholeCamera& cam, const Vec3& x_cam)
{
    const double x = x_cam.x(), y = x_cam.y(), z = x_cam.z();
    if (!(z > 0.0)) throw Error(err::kBehindCamera, "point at or behind the camera plane");
    const double t = x_cam.norm();
    Mat3 J;
    J << cam.fx / z, 0.0, -cam.fx * x / (z * z),
         0.0, cam.fy / z, -cam.fy * y / (z * z),
         x / t, y / t, z / t;
    return J;
}

/// Directional sun light. Azimuth is degrees clockwise from north, elevation
/// degrees above the horizon; the direction points from the scene toward the
/// sun in East-North-Up coordinates.
struct SunLight {
    Vec3 direction = Vec3(0.0, 0.0, 1.0);
    double azimuth_deg = 0.0;
    double elevation_deg = 90.0;
};

inline SunLight sun_direction(double azimuth_deg, double elevation_deg)
{
    if (!(elevation_deg > 0.0) || elevation_deg > 90.0)
        throw Error(err::kSunBelowHorizon,
                    "sun elevation must lie in (0, 90] degrees, got " +
                        std::to_string(elevation_deg));
    const double az = deg2rad(azimuth_deg), el = deg2rad(elevation_deg);
    SunLight sun;
    sun.direction = Vec3(std::sin(az) * std::cos(el), std::cos(az) * std::cos(el), std::sin(el));
    sun.azimuth_deg = azimuth_deg;
    sun.elevation_deg = elevation_deg;
    return sun;
}

/// Camera placed at `eye`, optical axis toward `target`. `up_hint` picks the
/// image vertical; image y points downward (negative world-up component).
inline PinholeCamera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up_hint,
                                    double fx, double fy, int width, int height)
{
    Vec3 fwd = (target - eye).normalized();
    Vec3 right = fwd.cross(up_hint).normalized();
    if (!right.allFinite() || right.norm() < 0.5)
        throw Error(err::kInvalidParameter, "look-at direction parallel to up hint");
    Vec3 down = fwd.cross(right);
    PinholeCamera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.width = width;
    cam.height = height;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.rot.row(0) = right.transpose();
    cam.rot.row(1) = down.transpose();
    cam.rot.row(2) = fwd.transpose();
    cam.t = -cam.rot * eye;
    return cam;
}

/// Orthographic camera used by the synthetic test harness and nadir height
/// map extraction. Rays are parallel to camera +z; pixels map linearly to
/// camera-space x/y at pixel_size meters per pixel.
struct OrthoCamera {
    double pixel_size = 1.0;
    double cx = 0.0, cy = 0.0;
    int width = 0, height = 0;
    Mat3 rot = Mat3::Identity();  // world -> camera
    Vec3 t = Vec3::Zero();

    Vec3 to_camera(const Vec3& x_world) const { return rot * x_world + t; }
};

// Shared projection hooks for the splatting pipeline. `t` is the distance
// along the viewing ray used by the depth correction; for parallel rays it
// coincides with camera depth so the z/t factor collapses to one.

struct CamPoint {
    double u, v, t;
};

inline CamPoint cam_point(const PinholeCamera& cam, const Vec3& xc)
{
    return {cam.fx * xc.x() / xc.z() + cam.cx, cam.fy * xc.y() / xc.z() + cam.cy, xc.norm()};
}

inline CamPoint cam_point(const OrthoCamera& cam, const Vec3& xc)
{
    return {xc.x() / cam.pixel_size + cam.cx, xc.y() / cam.pixel_size + cam.cy, xc.z()};
}

inline Mat3 cam_jacobian(const PinholeCamera& cam, const Vec3& xc)
{
    return projection_jacobian(cam, xc);
}

inline Mat3 cam_jacobian(const OrthoCamera& cam, const Vec3&)
{
    Mat3 J = Mat3::Zero();
    J(0, 0) = 1.0 / cam.pixel_size;
    J(1, 1) = 1.0 / cam.pixel_size;
    J(2, 2) = 1.0;
    return J;
}

/// d(ray distance)/d(camera point).
inline Vec3 cam_tgrad(const PinholeCamera&, const Vec3& xc) { return xc / xc.norm(); }
inline Vec3 cam_tgrad(const OrthoCamera&, const Vec3&) { return Vec3(0.0, 0.0, 1.0); }

/// Chains gradients on the jacobian entries back to the camera point.
inline Vec3 cam_jacobian_backward(const PinholeCamera& cam, const Vec3& xc, const Mat3& gJ)
{
    const double x = xc.x(), y = xc.y(), z = xc.z();
    const double z2 = z * z, z3 = z2 * z;
    const double t = xc.norm(), t3 = t * t * t;
    Vec3 g = Vec3::Zero();
    g.x() += gJ(0, 2) * (-cam.fx / z2);
    g.y() += gJ(1, 2) * (-cam.fy / z2);
    g.z() += gJ(0, 0) * (-cam.fx / z2) + gJ(0, 2) * (2.0 * cam.fx * x / z3) +
             gJ(1, 1) * (-cam.fy / z2) + gJ(1, 2) * (2.0 * cam.fy * y / z3);
    const Vec3 r2 = gJ.row(2).transpose();
    g += r2 / t - (r2.dot(xc)) * xc / t3;
    return g;
}

inline Vec3 cam_jacobian_backward(const OrthoCamera&, const Vec3&, const Mat3&)
{
    return Vec3::Zero();
}

/// Unit direction from the camera toward a world point (the direction the
/// surface is seen along, used to evaluate view-dependent appearance).
inline Vec3 view_dir(const PinholeCamera& cam, const Vec3& x_world)
{
    return (x_world - cam.center()).normalized();
}

inline Vec3 view_dir(const OrthoCamera& cam, const Vec3&)
{
    return cam.rot.row(2).transpose();
}

/// Backward of view_dir w.r.t. the world point.
inline Vec3 view_dir_backward(const PinholeCamera& cam, const Vec3& x_world, const Vec3& g_dir)
{
    const Vec3 dvec = x_world - cam.center();
    const double n = dvec.norm();
    const Vec3 dir = dvec / n;
    return (g_dir - dir * dir.dot(g_dir)) / n;
}

inline Vec3 view_dir_backward(const OrthoCamera&, const Vec3&, const Vec3&)
{
    return Vec3::Zero();
}

inline void save_camera(const PinholeCamera& cam, const std::string& path)
{
    std::vector<std::pair<std::string, std::vector<double>>> kv;
    kv.push_back({"fx", {cam.fx}});
    kv.push_back({"fy", {cam.fy}});
    kv.push_back({"cx", {cam.cx}});
    kv.push_back({"cy", {cam.cy}});
    kv.push_back({"width", {static_cast<double>(cam.width)}});
    kv.push_back({"height", {static_cast<double>(cam.height)}});
    std::vector<double> r(9);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i * 3 + j] = cam.rot(i, j);
    kv.push_back({"rotation", r});
    kv.push_back({"translation", {cam.t.x(), cam.t.y(), cam.t.z()}});
    write_kv(path, kv);
}

inline PinholeCamera load_camera(const std::string& path)
{
    const KvMap kv = read_kv(path);
    PinholeCamera cam;
    cam.fx = kv_require(kv, "fx", 1, path)[0];
    cam.fy = kv_require(kv, "fy", 1, path)[0];
    cam.cx = kv_require(kv, "cx", 1, path)[0];
    cam.cy = kv_require(kv, "cy", 1, path)[0];
    cam.width = static_cast<int>(kv_require(kv, "width", 1, path)[0]);
    cam.height = static_cast<int>(kv_require(kv, "height", 1, path)[0]);
    const auto& r = kv_require(kv, "rotation", 9, path);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cam.rot(i, j) = r[i * 3 + j];
    const auto& t = kv_require(kv, "translation", 3, path);
    cam.t = Vec3(t[0], t[1], t[2]);
    cam.check();
    return cam;
}

}  // namespace sgs
