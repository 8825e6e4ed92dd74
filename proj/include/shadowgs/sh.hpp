#pragma once

#include "shadowgs/common.hpp"

#include <array>
#include <vector>

namespace sgs {

// Real spherical harmonics in the splatting convention: band signs are folded
// into the constants/formulas so that eval is a plain dot product with the
// coefficient block.

inline constexpr int kShMaxDegree = 3;
inline constexpr int kShMaxCoeffs = (kShMaxDegree + 1) * (kShMaxDegree + 1);

inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;
inline constexpr std::array<double, 5> kShC2 = {
    1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
    -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> kShC3 = {
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658,
    0.3731763325901154,  -0.4570457994644658, 1.4453057213202769,
    -0.5900435899266435};

inline constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Basis values for a unit direction, bands 0..degree. out must hold
/// sh_coeff_count(degree) doubles.
inline void sh_basis(const Vec3& d, int degree, double* out)
{
    const double x = d.x(), y = d.y(), z = d.z();
    out[0] = kShC0;
    if (degree < 1) return;
    out[1] = -kShC1 * y;
    out[2] = kShC1 * z;
    out[3] = -kShC1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[4] = kShC2[0] * x * y;
    out[5] = kShC2[1] * y * z;
    out[6] = kShC2[2] * (2.0 * zz - xx - yy);
    out[7] = kShC2[3] * x * z;
    out[8] = kShC2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = kShC3[0] * y * (3.0 * xx - yy);
    out[10] = kShC3[1] * x * y * z;
    out[11] = kShC3[2] * y * (4.0 * zz - xx - yy);
    out[12] = kShC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kShC3[4] * x * (4.0 * zz - xx - yy);
    out[14] = kShC3[5] * z * (xx - yy);
    out[15] = kShC3[6] * x * (xx - 3.0 * yy);
}

/// Basis values plus per-basis gradients w.r.t. the direction components
/// (treated as free coordinates; unit-norm projection is the caller's job).
inline void sh_basis_grad(const Vec3& d, int degree, double* out, Vec3* grad)
{
    sh_basis(d, degree, out);
    const double x = d.x(), y = d.y(), z = d.z();
    grad[0] = Vec3::Zero();
    if (degree < 1) return;
    grad[1] = Vec3(0.0, -kShC1, 0.0);
    grad[2] = Vec3(0.0, 0.0, kShC1);
    grad[3] = Vec3(-kShC1, 0.0, 0.0);
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    grad[4] = kShC2[0] * Vec3(y, x, 0.0);
    grad[5] = kShC2[1] * Vec3(0.0, z, y);
    grad[6] = kShC2[2] * Vec3(-2.0 * x, -2.0 * y, 4.0 * z);
    grad[7] = kShC2[3] * Vec3(z, 0.0, x);
    grad[8] = kShC2[4] * Vec3(2.0 * x, -2.0 * y, 0.0);
    if (degree < 3) return;
    grad[9] = kShC3[0] * Vec3(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
    grad[10] = kShC3[1] * Vec3(y * z, x * z, x * y);
    grad[11] = kShC3[2] * Vec3(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
    grad[12] = kShC3[3] * Vec3(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
    grad[13] = kShC3[4] * Vec3(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
    grad[14] = kShC3[5] * Vec3(2.0 * x * z, -2.0 * y * z, xx - yy);
    grad[15] = kShC3[6] * Vec3(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
}

/// RGB spherical-harmonic coefficient block, channel-major:
/// coeffs[ch * count + i] is coefficient i of channel ch.
struct ShBlock {
    int degree = 0;
    std::vector<double> coeffs;

    ShBlock() = default;
    explicit ShBlock(int deg) : degree(deg), coeffs(3 * sh_coeff_count(deg), 0.0) {}

    int count() const { return sh_coeff_count(degree); }
    double& at(int ch, int i) { return coeffs[static_cast<size_t>(ch) * count() + i]; }
    double at(int ch, int i) const { return coeffs[static_cast<size_t>(ch) * count() + i]; }

    void check() const
    {
        if (degree < 0 || degree > kShMaxDegree)
            throw Error(err::kInvalidParameter, "SH degree out of range");
        if (coeffs.size() != static_cast<size_t>(3 * count()))
            throw Error(err::kDimensionMismatch, "SH coefficient count mismatch");
    }

    /// Raw banded dot product, no activation; active_degree gates the bands.
    Vec3 eval(const Vec3& dir, int active_degree) const
    {
        const int deg = std::min(active_degree, degree);
        double basis[kShMaxCoeffs];
        sh_basis(dir, deg, basis);
        const int n = sh_coeff_count(deg);
        Vec3 out = Vec3::Zero();
        for (int ch = 0; ch < 3; ++ch) {
            const double* c = coeffs.data() + static_cast<size_t>(ch) * count();
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += c[i] * basis[i];
            out[ch] = acc;
        }
        return out;
    }

    /// Backward of eval: g is d(loss)/d(output). Accumulates coefficient
    /// gradients into g_coeffs (same layout as coeffs) and returns the
    /// direction gradient (free-coordinate convention, see sh_basis_grad).
    Vec3 eval_backward(const Vec3& dir, int active_degree, const Vec3& g,
                       double* g_coeffs) const
    {
        const int deg = std::min(active_degree, degree);
        double basis[kShMaxCoeffs];
        Vec3 basis_g[kShMaxCoeffs];
        sh_basis_grad(dir, deg, basis, basis_g);
        const int n = sh_coeff_count(deg);
        Vec3 g_dir = Vec3::Zero();
        for (int ch = 0; ch < 3; ++ch) {
            const double* c = coeffs.data() + static_cast<size_t>(ch) * count();
            double* gc = g_coeffs + static_cast<size_t>(ch) * count();
            for (int i = 0; i < n; ++i) {
                gc[i] += g[ch] * basis[i];
                g_dir += g[ch] * c[i] * basis_g[i];
            }
        }
        return g_dir;
    }
};

/// Rotates a degree<=1 block: band 0 is invariant, band 1 transforms as a
/// vector. Used by tests and by synthetic-data tooling.
inline ShBlock sh_rotate_band1(const ShBlock& block, const Mat3& R)
{
    if (block.degree > 1)
        throw Error(err::kInvalidParameter, "band-1 rotation supports degree <= 1");
    ShBlock out = block;
    if (block.degree < 1) return out;
    for (int ch = 0; ch < 3; ++ch) {
        // Band 1 evaluates to w.dot(dir) with w = C1 * (-c3, -c1, c2); rotating
        // the function by R maps w to R*w.
        Vec3 w(-block.at(ch, 3), -block.at(ch, 1), block.at(ch, 2));
        Vec3 wr = R * w;
        out.at(ch, 3) = -wr.x();
        out.at(ch, 1) = -wr.y();
        out.at(ch, 2) = wr.z();
    }
    return out;
}

}  // namespace sgs
