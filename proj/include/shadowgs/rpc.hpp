#pragma once

#include "shadowgs/camera.hpp"
#include "shadowgs/gaussians.hpp"

#include <Eigen/Dense>

#include <array>
#include <fstream>
#include <string>
#include <vector>

namespace sgs {

// ---------------------------------------------------------------------------
// Rational polynomial camera: ratio of cubics in normalized (lat, lon, height)
// producing normalized (line, sample). Term order is the 20-term satellite
// metadata convention with P = normalized latitude, L = normalized longitude,
// H = normalized height:
//   1, L, P, H, LP, LH, PH, L2, P2, H2,
//   PLH, L3, LP2, LH2, L2P, P3, PH2, L2H, P2H, H3
// ---------------------------------------------------------------------------

inline constexpr double kMetersPerDegree = 111320.0;

inline Vec3 geodetic_to_enu(const SceneFrame& f, double lat, double lon, double h)
{
    const double k = kMetersPerDegree;
    return Vec3((lon - f.origin_lon) * k * std::cos(deg2rad(f.origin_lat)),
                (lat - f.origin_lat) * k, h - f.origin_alt);
}

inline void enu_to_geodetic(const SceneFrame& f, const Vec3& enu, double& lat, double& lon,
                            double& h)
{
    const double k = kMetersPerDegree;
    lon = f.origin_lon + enu.x() / (k * std::cos(deg2rad(f.origin_lat)));
    lat = f.origin_lat + enu.y() / k;
    h = f.origin_alt + enu.z();
}

inline void rpc_terms(double P, double L, double H, double* t)
{
    t[0] = 1.0;
    t[1] = L;
    t[2] = P;
    t[3] = H;
    t[4] = L * P;
    t[5] = L * H;
    t[6] = P * H;
    t[7] = L * L;
    t[8] = P * P;
    t[9] = H * H;
    t[10] = P * L * H;
    t[11] = L * L * L;
    t[12] = L * P * P;
    t[13] = L * H * H;
    t[14] = L * L * P;
    t[15] = P * P * P;
    t[16] = P * H * H;
    t[17] = L * L * H;
    t[18] = P * P * H;
    t[19] = H * H * H;
}

struct RpcModel {
    double line_off = 0.0, samp_off = 0.0;
    double lat_off = 0.0, lon_off = 0.0, height_off = 0.0;
    double line_scale = 1.0, samp_scale = 1.0;
    double lat_scale = 1.0, lon_scale = 1.0, height_scale = 1.0;
    std::array<double, 20> line_num{}, line_den{}, samp_num{}, samp_den{};
};

struct RpcDiagnostics {
    long out_of_box = 0;  // inputs beyond the normalized validity box
};

struct RpcPixel {
    double line;    // image row (grows downward)
    double sample;  // image column
};

inline RpcPixel rpc_project(const RpcModel& rpc, double lat, double lon, double h,
                            RpcDiagnostics* diag = nullptr)
{
    const double P = (lat - rpc.lat_off) / rpc.lat_scale;
    const double L = (lon - rpc.lon_off) / rpc.lon_scale;
    const double H = (h - rpc.height_off) / rpc.height_scale;
    if (diag && (std::abs(P) > 1.05 || std::abs(L) > 1.05 || std::abs(H) > 1.05))
        ++diag->out_of_box;
    double t[20];
    rpc_terms(P, L, H, t);
    double ln = 0.0, ld = 0.0, sn = 0.0, sd = 0.0;
    for (int i = 0; i < 20; ++i) {
        ln += rpc.line_num[i] * t[i];
        ld += rpc.line_den[i] * t[i];
        sn += rpc.samp_num[i] * t[i];
        sd += rpc.samp_den[i] * t[i];
    }
    if (std::abs(ld) < 1e-10 || std::abs(sd) < 1e-10)
        throw Error(err::kSingularDenominator, "rational camera denominator vanished");
    return {ln / ld * rpc.line_scale + rpc.line_off, sn / sd * rpc.samp_scale + rpc.samp_off};
}

// ---------------------------------------------------------------------------
// RPC text file: 90 whitespace-separated numbers, '#' comments allowed.
//   line_off samp_off lat_off lon_off height_off
//   line_scale samp_scale lat_scale lon_scale height_scale
//   line_num[20] line_den[20] samp_num[20] samp_den[20]
// ---------------------------------------------------------------------------

inline void save_rpc(const RpcModel& rpc, const std::string& path)
{
    std::ofstream out(path);
    if (!out) throw Error(err::kIo, "cannot open for writing: " + path);
    out.precision(17);
    out << "# rational polynomial camera, 90 values\n"
        << rpc.line_off << " " << rpc.samp_off << " " << rpc.lat_off << " " << rpc.lon_off
        << " " << rpc.height_off << "\n"
        << rpc.line_scale << " " << rpc.samp_scale << " " << rpc.lat_scale << " "
        << rpc.lon_scale << " " << rpc.height_scale << "\n";
    auto dump = [&out](const std::array<double, 20>& a) {
        for (int i = 0; i < 20; ++i) out << a[i] << (i == 19 ? "\n" : " ");
    };
    dump(rpc.line_num);
    dump(rpc.line_den);
    dump(rpc.samp_num);
    dump(rpc.samp_den);
}

inline RpcModel load_rpc(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(err::kIo, "cannot open: " + path);
    std::vector<double> vals;
    vals.reserve(90);
    std::string tok;
    while (in >> tok) {
        if (tok[0] == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        try {
            size_t used = 0;
            double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            vals.push_back(v);
        } catch (const std::exception&) {
            throw Error(err::kParse, path + ": non-numeric token '" + tok + "'");
        }
    }
    if (vals.size() != 90)
        throw Error(err::kParse,
                    path + ": expected 90 values, got " + std::to_string(vals.size()));
    RpcModel rpc;
    rpc.line_off = vals[0];
    rpc.samp_off = vals[1];
    rpc.lat_off = vals[2];
    rpc.lon_off = vals[3];
    rpc.height_off = vals[4];
    rpc.line_scale = vals[5];
    rpc.samp_scale = vals[6];
    rpc.lat_scale = vals[7];
    rpc.lon_scale = vals[8];
    rpc.height_scale = vals[9];
    for (int i = 0; i < 20; ++i) rpc.line_num[i] = vals[10 + i];
    for (int i = 0; i < 20; ++i) rpc.line_den[i] = vals[30 + i];
    for (int i = 0; i < 20; ++i) rpc.samp_num[i] = vals[50 + i];
    for (int i = 0; i < 20; ++i) rpc.samp_den[i] = vals[70 + i];
    return rpc;
}

// ---------------------------------------------------------------------------
// Pinhole <-> RPC bridges. A pinhole projection is a ratio of affine forms in
// world coordinates, so it is exactly representable as a degree-1 RPC; that
// exact construction seeds tests and round-trip checks.
// ---------------------------------------------------------------------------

inline RpcModel make_rpc_from_pinhole(const PinholeCamera& cam, const SceneFrame& frame,
                                      const Vec3& bbox_lo, const Vec3& bbox_hi)
{
    RpcModel rpc;
    const Vec3 mid = 0.5 * (bbox_lo + bbox_hi);
    const Vec3 half = 0.5 * (bbox_hi - bbox_lo);
    enu_to_geodetic(frame, mid, rpc.lat_off, rpc.lon_off, rpc.height_off);
    const double k = kMetersPerDegree;
    const double cosphi = std::cos(deg2rad(frame.origin_lat));
    rpc.lat_scale = std::max(half.y() / k, 1e-12);
    rpc.lon_scale = std::max(half.x() / (k * cosphi), 1e-12);
    rpc.height_scale = std::max(half.z(), 1e-12);
    rpc.samp_off = cam.width * 0.5;
    rpc.samp_scale = cam.width * 0.5;
    rpc.line_off = cam.height * 0.5;
    rpc.line_scale = cam.height * 0.5;

    // ENU position is affine in normalized (P, L, H); compose with the camera
    // transform to get camera coordinates M*(P,L,H) + m0.
    Mat3 D = Mat3::Zero();
    D(0, 1) = rpc.lon_scale * k * cosphi;
    D(1, 0) = rpc.lat_scale * k;
    D(2, 2) = rpc.height_scale;
    const Mat3 M = cam.rot * D;
    const Vec3 m0 = cam.rot * mid + cam.t;
    if (std::abs(m0.z()) < 1e-9)
        throw Error(err::kInvalidParameter, "normalization center lies on the camera plane");

    // normalized coord = [f*xc + (c-off)*zc] / (scale*zc): affine over affine in
    // (P,L,H), so only the constant and linear terms are populated. Column
    // order of M is (P,L,H); term slots 1..3 are (L,P,H).
    {
        const Vec3 num_plh = cam.fx * M.row(0).transpose() + (cam.cx - rpc.samp_off) * M.row(2).transpose();
        const double num_c = cam.fx * m0.x() + (cam.cx - rpc.samp_off) * m0.z();
        const double den_c = rpc.samp_scale * m0.z();
        const Vec3 den_plh = rpc.samp_scale * M.row(2).transpose();
        rpc.samp_num.fill(0.0);
        rpc.samp_den.fill(0.0);
        rpc.samp_num[0] = num_c / den_c;
        rpc.samp_num[1] = num_plh.y() / den_c;
        rpc.samp_num[2] = num_plh.x() / den_c;
        rpc.samp_num[3] = num_plh.z() / den_c;
        rpc.samp_den[0] = 1.0;
        rpc.samp_den[1] = den_plh.y() / den_c;
        rpc.samp_den[2] = den_plh.x() / den_c;
        rpc.samp_den[3] = den_plh.z() / den_c;
    }
    {
        const Vec3 num_plh = cam.fy * M.row(1).transpose() + (cam.cy - rpc.line_off) * M.row(2).transpose();
        const double num_c = cam.fy * m0.y() + (cam.cy - rpc.line_off) * m0.z();
        const double den_c = rpc.line_scale * m0.z();
        const Vec3 den_plh = rpc.line_scale * M.row(2).transpose();
        rpc.line_num.fill(0.0);
        rpc.line_den.fill(0.0);
        rpc.line_num[0] = num_c / den_c;
        rpc.line_num[1] = num_plh.y() / den_c;
        rpc.line_num[2] = num_plh.x() / den_c;
        rpc.line_num[3] = num_plh.z() / den_c;
        rpc.line_den[0] = 1.0;
        rpc.line_den[1] = den_plh.y() / den_c;
        rpc.line_den[2] = den_plh.x() / den_c;
        rpc.line_den[3] = den_plh.z() / den_c;
    }
    return rpc;
}

struct RpcFit {
    PinholeCamera camera;
    double rms_px = 0.0;
};

namespace detail {

inline PinholeCamera camera_from_fit_params(const Eigen::Matrix<double, 10, 1>& p,
                                            const Mat3& rot0, int width, int height)
{
    PinholeCamera cam;
    cam.fx = p[0];
    cam.fy = p[1];
    cam.cx = p[2];
    cam.cy = p[3];
    cam.width = width;
    cam.height = height;
    const Vec3 w = p.segment<3>(4);
    const double ang = w.norm();
    Mat3 dR = Mat3::Identity();
    if (ang > 0.0) dR = Eigen::AngleAxisd(ang, w / ang).toRotationMatrix();
    cam.rot = dR * rot0;
    cam.t = p.segment<3>(7);
    return cam;
}

inline Eigen::VectorXd fit_residuals(const Eigen::Matrix<double, 10, 1>& p, const Mat3& rot0,
                                     int width, int height,
                                     const std::vector<Vec3>& pts,
                                     const std::vector<Vec2>& obs)
{
    const PinholeCamera cam = camera_from_fit_params(p, rot0, width, height);
    Eigen::VectorXd r(2 * pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
        const Vec3 xc = cam.to_camera(pts[i]);
        if (xc.z() <= 1e-9) {
            r[2 * i] = 1e6;
            r[2 * i + 1] = 1e6;
            continue;
        }
        r[2 * i] = cam.fx * xc.x() / xc.z() + cam.cx - obs[i].x();
        r[2 * i + 1] = cam.fy * xc.y() / xc.z() + cam.cy - obs[i].y();
    }
    return r;
}

}  // namespace detail

/// Fits a pinhole camera to RPC projections sampled on a grid over an ENU
/// bounding box: normalized direct linear transform for the initial projection
/// matrix, then damped least-squares refinement of the ten camera parameters.
inline RpcFit fit_pinhole_to_rpc(const RpcModel& rpc, const SceneFrame& frame,
                                 const Vec3& bbox_lo, const Vec3& bbox_hi, int grid_n,
                                 int width, int height)
{
    if (grid_n < 3) throw Error(err::kInvalidParameter, "grid_n must be at least 3");

    std::vector<Vec3> pts;
    std::vector<Vec2> obs;
    pts.reserve(static_cast<size_t>(grid_n) * grid_n * grid_n);
    for (int a = 0; a < grid_n; ++a)
        for (int b = 0; b < grid_n; ++b)
            for (int c = 0; c < grid_n; ++c) {
                Vec3 f(static_cast<double>(a) / (grid_n - 1),
                       static_cast<double>(b) / (grid_n - 1),
                       static_cast<double>(c) / (grid_n - 1));
                Vec3 x = bbox_lo + f.cwiseProduct(bbox_hi - bbox_lo);
                double lat, lon, h;
                enu_to_geodetic(frame, x, lat, lon, h);
                const RpcPixel px = rpc_project(rpc, lat, lon, h);
                pts.push_back(x);
                obs.push_back(Vec2(px.sample, px.line));
            }
    const size_t n = pts.size();

    // Hartley-style normalization for DLT conditioning.
    Vec3 mean3 = Vec3::Zero();
    Vec2 mean2 = Vec2::Zero();
    for (size_t i = 0; i < n; ++i) {
        mean3 += pts[i];
        mean2 += obs[i];
    }
    mean3 /= static_cast<double>(n);
    mean2 /= static_cast<double>(n);
    double d3 = 0.0, d2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
        d3 += (pts[i] - mean3).norm();
        d2 += (obs[i] - mean2).norm();
    }
    const double s3 = std::sqrt(3.0) * n / std::max(d3, 1e-12);
    const double s2 = std::sqrt(2.0) * n / std::max(d2, 1e-12);

    Eigen::MatrixXd A(2 * n, 12);
    for (size_t i = 0; i < n; ++i) {
        const Vec3 X = s3 * (pts[i] - mean3);
        const Vec2 x = s2 * (obs[i] - mean2);
        Eigen::Matrix<double, 1, 4> Xh;
        Xh << X.x(), X.y(), X.z(), 1.0;
        A.row(2 * i).setZero();
        A.row(2 * i).segment<4>(0) = Xh;
        A.row(2 * i).segment<4>(8) = -x.x() * Xh;
        A.row(2 * i + 1).setZero();
        A.row(2 * i + 1).segment<4>(4) = Xh;
        A.row(2 * i + 1).segment<4>(8) = -x.y() * Xh;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    if (sv[10] < 1e-10 * sv[0])
        throw Error(err::kFitFailure,
                    "degenerate fit geometry: singular value ratio " +
                        std::to_string(sv[10] / sv[0]));
    Eigen::Matrix<double, 3, 4> Pn;
    const Eigen::VectorXd v = svd.matrixV().col(11);
    Pn << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11];

    // Undo normalization: x = T^-1 * Pn * U.
    Mat3 Tinv = Mat3::Identity();
    Tinv(0, 0) = Tinv(1, 1) = 1.0 / s2;
    Tinv(0, 2) = mean2.x();
    Tinv(1, 2) = mean2.y();
    Eigen::Matrix4d U = Eigen::Matrix4d::Identity();
    U.topLeftCorner<3, 3>() *= s3;
    U.topRightCorner<3, 1>() = -s3 * mean3;
    Eigen::Matrix<double, 3, 4> Pmat = Tinv * Pn * U;

    Mat3 Mm = Pmat.leftCols<3>();
    if (Mm.determinant() < 0.0) {
        Pmat = -Pmat;
        Mm = -Mm;
    }
    if (std::abs(Mm.determinant()) < 1e-14)
        throw Error(err::kFitFailure, "projection matrix is rank-deficient");

    // RQ decomposition via the antidiagonal flip trick.
    Mat3 F;
    F << 0, 0, 1, 0, 1, 0, 1, 0, 0;
    Eigen::HouseholderQR<Mat3> qr((F * Mm).transpose());
    Mat3 Q = qr.householderQ();
    Mat3 Rhat = qr.matrixQR().triangularView<Eigen::Upper>();
    Mat3 K = F * Rhat.transpose() * F;
    Mat3 R = F * Q.transpose();
    Mat3 S = Mat3::Identity();
    for (int i = 0; i < 3; ++i) S(i, i) = K(i, i) < 0.0 ? -1.0 : 1.0;
    K = K * S;
    R = S * R;
    const double lambda = K(2, 2);
    if (!(lambda > 0.0)) throw Error(err::kFitFailure, "invalid intrinsic normalization");
    K /= lambda;
    const Vec3 t0 = K.inverse() * Pmat.col(3) / lambda;

    Eigen::Matrix<double, 10, 1> p;
    p << K(0, 0), K(1, 1), K(0, 2), K(1, 2), 0.0, 0.0, 0.0, t0.x(), t0.y(), t0.z();
    const Mat3 rot0 = R;

    // Damped least squares on the ten parameters, numeric Jacobian.
    Eigen::VectorXd r = detail::fit_residuals(p, rot0, width, height, pts, obs);
    double cost = r.squaredNorm();
    double mu = 1e-3;
    for (int iter = 0; iter < 100; ++iter) {
        Eigen::MatrixXd J(r.size(), 10);
        for (int k = 0; k < 10; ++k) {
            const double h = std::max(1e-7, 1e-7 * std::abs(p[k]));
            auto pp = p, pm = p;
            pp[k] += h;
            pm[k] -= h;
            J.col(k) = (detail::fit_residuals(pp, rot0, width, height, pts, obs) -
                        detail::fit_residuals(pm, rot0, width, height, pts, obs)) /
                       (2.0 * h);
        }
        const Eigen::Matrix<double, 10, 10> JtJ = J.transpose() * J;
        const Eigen::Matrix<double, 10, 1> g = J.transpose() * r;
        bool stepped = false;
        for (int tries = 0; tries < 12 && !stepped; ++tries) {
            Eigen::Matrix<double, 10, 10> H = JtJ;
            H.diagonal() += mu * JtJ.diagonal().cwiseMax(1e-12);
            const Eigen::Matrix<double, 10, 1> delta = H.ldlt().solve(-g);
            const auto p_try = (p + delta).eval();
            const Eigen::VectorXd r_try =
                detail::fit_residuals(p_try, rot0, width, height, pts, obs);
            if (r_try.squaredNorm() < cost) {
                p = p_try;
                r = r_try;
                cost = r_try.squaredNorm();
                mu = std::max(mu * 0.3, 1e-12);
                stepped = true;
            } else {
                mu *= 4.0;
            }
        }
        if (!stepped || g.cwiseAbs().maxCoeff() < 1e-14) break;
    }

    RpcFit fit;
    fit.camera = detail::camera_from_fit_params(p, rot0, width, height);
    // Re-orthonormalize before handing the camera out.
    Eigen::JacobiSVD<Mat3> rsvd(fit.camera.rot, Eigen::ComputeFullU | Eigen::ComputeFullV);
    fit.camera.rot = rsvd.matrixU() * rsvd.matrixV().transpose();
    if (fit.camera.rot.determinant() < 0.0)
        throw Error(err::kFitFailure, "fitted rotation is improper");
    fit.rms_px = std::sqrt(cost / static_cast<double>(n));
    return fit;
}

}  // namespace sgs
