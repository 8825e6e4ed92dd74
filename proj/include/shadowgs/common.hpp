#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

constexpr double kPi = 3.141592653589793238462643383279502884;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Inverse of sigmoid; clamps away from {0,1} so the logit stays finite.
inline double logit(double p)
{
    const double eps = 1e-12;
    p = std::clamp(p, eps, 1.0 - eps);
    return std::log(p / (1.0 - p));
}

// ---------------------------------------------------------------------------
// Errors. Each error carries a short machine-checkable kind string next to
// the human-readable message; the CLI prints "error[<kind>]: <message>".
// ---------------------------------------------------------------------------

class Error : public std::runtime_error
{
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

/// Non-fatal diagnostics go to stderr so stdout stays machine-parsable.
inline void warn(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

namespace err {
inline constexpr const char* kInvalidParameter = "invalid-parameter";
inline constexpr const char* kBehindCamera = "behind-camera";
inline constexpr const char* kSunBelowHorizon = "sun-below-horizon";
inline constexpr const char* kSingularDenominator = "singular-denominator";
inline constexpr const char* kFitFailure = "fit-failure";
inline constexpr const char* kParse = "parse";
inline constexpr const char* kVersion = "version";
inline constexpr const char* kEmptyBvh = "empty-bvh";
inline constexpr const char* kIo = "io";
inline constexpr const char* kDimensionMismatch = "dimension-mismatch";
inline constexpr const char* kNonFinite = "non-finite";
inline constexpr const char* kUsage = "usage";
}  // namespace err

// ---------------------------------------------------------------------------
// Threading. A static partition keeps results bitwise reproducible for a
// fixed thread count: worker k handles the k-th contiguous index block, and
// any reductions must combine worker buffers in worker order.
// ---------------------------------------------------------------------------

/// Process-wide default worker count. 0 = use hardware concurrency.
int& thread_count_ref();

inline int default_thread_count()
{
    int n = thread_count_ref();
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

inline void set_default_thread_count(int n) { thread_count_ref() = n; }

inline int& thread_count_ref()
{
    static int count = 0;
    return count;
}

/// Runs fn(begin, end, worker) over [0, n) split into `threads` contiguous
/// blocks. Serial when threads <= 1 or the range is tiny.
inline void parallel_blocks(std::int64_t n, int threads,
                            const std::function<void(std::int64_t, std::int64_t, int)>& fn)
{
    if (threads <= 0) threads = default_thread_count();
    if (n <= 0) return;
    if (threads == 1 || n < 2 * threads) {
        fn(0, n, 0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::int64_t chunk = (n + threads - 1) / threads;
    for (int k = 0; k < threads; ++k) {
        std::int64_t lo = k * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi, k] { fn(lo, hi, k); });
    }
    for (auto& t : pool) t.join();
}

/// Simple indexed parallel map: fn(i) for i in [0, n).
inline void parallel_for(std::int64_t n, int threads, const std::function<void(std::int64_t)>& fn)
{
    parallel_blocks(n, threads, [&fn](std::int64_t lo, std::int64_t hi, int) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
}

// ---------------------------------------------------------------------------
// RNG helpers. All stochastic code takes an explicit engine so runs are
// reproducible from a single seed.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0)
{
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi)
{
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline Vec3 uniform_vec3(Rng& rng, double lo, double hi)
{
    return Vec3(uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi));
}

inline Vec3 random_unit_vec3(Rng& rng)
{
    while (true) {
        Vec3 v(normal(rng), normal(rng), normal(rng));
        double n = v.norm();
        if (n > 1e-8) return v / n;
    }
}

}  // namespace sgs
