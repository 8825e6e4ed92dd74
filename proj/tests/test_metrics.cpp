#include "shadowgs/metrics.hpp"

#include "support/util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace sgs;

namespace {

// Opaque flat disks on a 1 m grid at height z: an analytic DSM target.
GaussianScene carpet(double z, double half_extent)
{
    GaussianScene scene;
    for (double y = -half_extent; y <= half_extent; y += 1.0)
        for (double x = -half_extent; x <= half_extent; x += 1.0) {
            Gaussian3D g(0);
            g.position = Vec3(x, y, z);
            g.log_scale = Vec3(std::log(0.7), std::log(0.7), std::log(0.01));
            g.opacity_logit = 4.0;
            scene.gaussians.push_back(g);
        }
    return scene;
}

Image1 class_layout(int shadow_px, int lit_px, int flipped_shadow, int flipped_lit)
{
    Image1 img(shadow_px + lit_px, 1, 0.0);
    for (int p = 0; p < shadow_px; ++p) img.data[p] = p < flipped_shadow ? 1.0 : 0.0;
    for (int p = 0; p < lit_px; ++p) img.data[shadow_px + p] = p < flipped_lit ? 0.0 : 1.0;
    return img;
}

}  // namespace

TEST_CASE("psnr closed-form values")
{
    Image3 a(8, 6, 0.5), b(8, 6, 0.5);
    CHECK(psnr(a, a) == 99.0);

    for (double& v : b.data) v = 0.6;  // MSE = 0.01
    CHECK(psnr(a, b) == Catch::Approx(20.0).margin(1e-9));

    Image3 zero(4, 4, 0.0), one(4, 4, 1.0);
    CHECK(psnr(zero, one) == Catch::Approx(0.0).margin(1e-12));

    Image3 near(4, 4, 0.5);
    near.data[0] += 1e-7;  // tiny MSE lands above the cap
    CHECK(psnr(zero, zero) == 99.0);
    CHECK(psnr(near, Image3(4, 4, 0.5)) == 99.0);

    CHECK(tst::thrown_kind([&] { (void)psnr(a, zero); }) == err::kDimensionMismatch);
    Image3 e1, e2;
    CHECK(tst::thrown_kind([&] { (void)psnr(e1, e2); }) == err::kInvalidParameter);
}

TEST_CASE("psnr decreases monotonically with mse")
{
    Rng rng(5);
    Image3 base(10, 10);
    for (double& v : base.data) v = uniform(rng, 0.2, 0.8);
    double prev = psnr(base, base);
    for (int k = 1; k <= 20; ++k) {
        Image3 off = base;
        for (double& v : off.data) v += 0.008 * k;
        const double cur = psnr(base, off);
        CHECK(cur < prev);
        prev = cur;
    }
}

TEST_CASE("extract_dsm recovers a flat carpet height")
{
    const double h = 7.5;
    const Dsm dsm = extract_dsm(carpet(h, 10.0), 20.0, 0.5);
    REQUIRE(dsm.cols() == 40);
    REQUIRE(dsm.rows() == 40);
    CHECK(dsm.x0 == -10.0);
    CHECK(dsm.cell == 0.5);
    int interior = 0;
    for (int j = 8; j < 32; ++j)
        for (int i = 8; i < 32; ++i) {
            REQUIRE(dsm.valid(dsm.height(i, j)));
            CHECK(std::abs(dsm.height(i, j) - h) < 0.05);
            ++interior;
        }
    CHECK(interior == 24 * 24);
}

TEST_CASE("extract_dsm places structures at their world position")
{
    GaussianScene scene = carpet(2.0, 10.0);
    Gaussian3D blob(0);
    blob.position = Vec3(5.0, 5.0, 6.0);
    blob.log_scale = Vec3(0.0, 0.0, std::log(0.05));
    blob.opacity_logit = 4.0;
    scene.gaussians.push_back(blob);

    const Dsm dsm = extract_dsm(scene, 20.0, 0.5);
    // cell (30,30) covers (5.25, 5.25); row flip or axis swap would miss it.
    // The carpet underneath keeps a little blend weight, so the bound is loose.
    CHECK(dsm.height(30, 30) == Catch::Approx(6.0).margin(1.2));
    CHECK(dsm.height(30, 30) > 4.5);
    CHECK(dsm.height(30, 9) < 3.0);
    CHECK(dsm.height(9, 30) < 3.0);
    CHECK(dsm.height(9, 9) == Catch::Approx(2.0).margin(0.1));
}

TEST_CASE("extract_dsm edge cases")
{
    GaussianScene empty;
    const Dsm dsm = extract_dsm(empty, 10.1, 0.5);
    CHECK(dsm.cols() == 21);
    for (double v : dsm.height.data) CHECK(v == Dsm::kNoData);

    CHECK(tst::thrown_kind([&] { (void)extract_dsm(empty, 10.0, 0.0); }) ==
          err::kInvalidParameter);
    CHECK(tst::thrown_kind([&] { (void)extract_dsm(empty, -1.0, 0.5); }) ==
          err::kInvalidParameter);
}

TEST_CASE("height_mae with and without median alignment")
{
    Dsm a, b;
    a.x0 = b.x0 = -5.0;
    a.y0 = b.y0 = -5.0;
    a.cell = b.cell = 1.0;
    a.height = Image1(10, 10, 3.0);
    b.height = Image1(10, 10, 3.0);

    CHECK(height_mae(a, b) == 0.0);

    SECTION("constant offset")
    {
        for (double& v : a.height.data) v += 2.0;
        CHECK(height_mae(a, b, DsmAlign::kNone) == Catch::Approx(2.0));
        CHECK(height_mae(a, b, DsmAlign::kMedianShift) == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("half the cells off by one meter")
    {
        for (size_t p = 0; p < a.height.data.size(); p += 2) a.height.data[p] += 1.0;
        CHECK(height_mae(a, b) == 0.5);
    }
    SECTION("even-count median averages the middle pair")
    {
        a.height = Image1(2, 2, 3.0);
        b.height = Image1(2, 2, 3.0);
        a.height.data[2] += 1.0;
        a.height.data[3] += 3.0;  // deltas 0,0,1,3 -> median 0.5
        CHECK(height_mae(a, b, DsmAlign::kMedianShift) == Catch::Approx(1.0));
    }
    SECTION("no-data cells are excluded")
    {
        a.height(0, 0) = Dsm::kNoData;
        b.height(5, 5) = Dsm::kNoData;
        a.height(5, 5) = 1000.0;  // ignored: invalid in ref
        CHECK(height_mae(a, b) == 0.0);
    }
    SECTION("errors")
    {
        Dsm c = b;
        c.cell = 2.0;
        CHECK(tst::thrown_kind([&] { (void)height_mae(a, c); }) == err::kInvalidParameter);
        Dsm d = b;
        d.height = Image1(9, 10, 3.0);
        CHECK(tst::thrown_kind([&] { (void)height_mae(a, d); }) == err::kDimensionMismatch);
        for (double& v : a.height.data) v = Dsm::kNoData;
        CHECK(tst::thrown_kind([&] { (void)height_mae(a, b); }) == err::kInvalidParameter);
    }
}

TEST_CASE("shadow ber and acc closed-form cases")
{
    SECTION("perfect prediction")
    {
        const Image1 gt = class_layout(40, 60, 0, 0);
        const ShadowScore s = shadow_ber_acc(gt, gt);
        CHECK(s.ber == 0.0);
        CHECK(s.acc == 100.0);
        CHECK(s.tp == 40);
        CHECK(s.tn == 60);
    }
    SECTION("all-lit prediction on half-shadow reference")
    {
        const Image1 gt = class_layout(50, 50, 0, 0);
        const Image1 pred(100, 1, 1.0);
        const ShadowScore s = shadow_ber_acc(pred, gt);
        CHECK(s.ber == 50.0);
        CHECK(s.acc == 50.0);
        CHECK(s.fn == 50);
    }
    SECTION("inverted prediction")
    {
        const Image1 gt = class_layout(30, 70, 0, 0);
        const Image1 pred = class_layout(30, 70, 30, 70);
        const ShadowScore s = shadow_ber_acc(pred, gt);
        CHECK(s.ber == 100.0);
        CHECK(s.acc == 0.0);
    }
    SECTION("threshold binarization: exactly 0.5 counts as lit")
    {
        Image1 gt(2, 1, 1.0);
        gt.data[0] = 0.0;
        Image1 pred(2, 1, 0.5);
        pred.data[0] = 0.49;
        const ShadowScore s = shadow_ber_acc(pred, gt);
        CHECK(s.tp == 1);
        CHECK(s.tn == 1);
        CHECK(s.ber == 0.0);
    }
    SECTION("reference missing a class warns and zeroes that term")
    {
        const Image1 gt(20, 1, 1.0);  // all lit
        CHECK(shadow_ber_acc(gt, gt).ber == 0.0);
        const Image1 pred(20, 1, 0.0);  // everything called shadow
        const ShadowScore s = shadow_ber_acc(pred, gt);
        CHECK(s.ber == 50.0);
        CHECK(s.acc == 0.0);
    }
    SECTION("size mismatch")
    {
        const Image1 a(4, 4, 1.0), b(4, 5, 1.0);
        CHECK(tst::thrown_kind([&] { (void)shadow_ber_acc(a, b); }) == err::kDimensionMismatch);
    }
}

TEST_CASE("ber is invariant to class prevalence at fixed per-class error rates")
{
    // Counts chosen so quarter-step rates are exact in both populations.
    for (int mi = 0; mi <= 3; ++mi)
        for (int fi = 0; fi <= 3; ++fi) {
            const double miss = mi / 4.0, fall = fi / 4.0;
            const Image1 gt_a = class_layout(400, 800, 0, 0);
            const Image1 pr_a = class_layout(400, 800, static_cast<int>(miss * 400),
                                             static_cast<int>(fall * 800));
            const Image1 gt_b = class_layout(800, 400, 0, 0);
            const Image1 pr_b = class_layout(800, 400, static_cast<int>(miss * 800),
                                             static_cast<int>(fall * 400));
            const double ber_a = shadow_ber_acc(pr_a, gt_a).ber;
            const double ber_b = shadow_ber_acc(pr_b, gt_b).ber;
            INFO("miss " << miss << " fall " << fall);
            CHECK(ber_a == Catch::Approx(50.0 * (miss + fall)).margin(1e-12));
            CHECK(ber_b == Catch::Approx(ber_a).margin(1e-12));
        }
}
