#pragma once

#include "shadowgs/common.hpp"

#include <functional>
#include <string>

namespace tst {

/// Runs f, returns the error kind it threw ("" if it returned normally).
template <class F>
std::string thrown_kind(F&& f)
{
    try {
        f();
    } catch (const sgs::Error& e) {
        return e.kind();
    }
    return "";
}

inline sgs::Vec4 random_quat(sgs::Rng& rng)
{
    sgs::Vec4 q(sgs::normal(rng), sgs::normal(rng), sgs::normal(rng), sgs::normal(rng));
    while (q.norm() < 1e-3)
        q = sgs::Vec4(sgs::normal(rng), sgs::normal(rng), sgs::normal(rng), sgs::normal(rng));
    return q / q.norm();
}

/// Hamilton product, (w,x,y,z) convention.
inline sgs::Vec4 quat_mul(const sgs::Vec4& a, const sgs::Vec4& b)
{
    return sgs::Vec4(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                     a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                     a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                     a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

/// Central finite difference of a scalar function of one coordinate.
inline double fdiff(const std::function<double(double)>& f, double x, double h = 1e-5)
{
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Relative-or-absolute gradient agreement check.
inline bool grad_close(double analytic, double numeric, double rel = 1e-3, double abs = 1e-6)
{
    const double diff = std::abs(analytic - numeric);
    return diff <= abs || diff <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace tst
