#include "shadowgs/rasterizer.hpp"

#include "support/util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace sgs;

namespace {

OrthoCamera down_ortho(int w, int h, double ps = 1.0)
{
    OrthoCamera cam;
    cam.pixel_size = ps;
    cam.cx = w * 0.5;
    cam.cy = h * 0.5;
    cam.width = w;
    cam.height = h;
    cam.rot = Mat3::Identity();
    cam.t = Vec3::Zero();
    return cam;
}

Gaussian3D iso_gaussian(const Vec3& pos, double sigma, double opacity)
{
    Gaussian3D g(0);
    g.position = pos;
    g.log_scale = Vec3::Constant(std::log(sigma));
    g.opacity_logit = logit(opacity);
    return g;
}

GaussianScene random_scene(Rng& rng, int n, double spread, double zlo, double zhi)
{
    GaussianScene scene;
    for (int i = 0; i < n; ++i) {
        Gaussian3D g(0);
        g.position = Vec3(uniform(rng, -spread, spread), uniform(rng, -spread, spread),
                          uniform(rng, zlo, zhi));
        g.log_scale = uniform_vec3(rng, -0.5, 1.5);
        g.rotation = tst::random_quat(rng);
        g.opacity_logit = uniform(rng, -2.0, 2.0);
        scene.gaussians.push_back(g);
    }
    return scene;
}

bool outputs_identical(const RenderOutputs& a, const RenderOutputs& b)
{
    return a.ch == b.ch && a.depth.data == b.depth.data && a.alpha.data == b.alpha.data &&
           a.normal.data == b.normal.data;
}

// Straightforward per-pixel compositor over projected splats, written
// independently of the library inner loop.
void naive_pixel(const std::vector<Splat2D>& sorted, const std::vector<double>& payload,
                 int K, double px, double py, const RasterConfig& cfg, double* ch,
                 double& A, double& Draw, Vec3& Nraw)
{
    double T = 1.0;
    for (const Splat2D& s : sorted) {
        const double dx = px - s.u_c, dy = py - s.v_c;
        const double q = s.lam(0, 0) * dx * dx + 2.0 * s.lam(0, 1) * dx * dy +
                         s.lam(1, 1) * dy * dy;
        if (!(q <= cfg.q_cutoff)) continue;
        const double alpha = std::min(s.o * std::exp(-q), cfg.alpha_max);
        const double w = T * alpha;
        for (int k = 0; k < K; ++k) ch[k] += w * payload[static_cast<size_t>(s.gauss) * K + k];
        Draw += w * ray_gaussian_depth(s, px, py);
        Nraw += w * s.n_world;
        A += w;
        T *= 1.0 - alpha;
        if (T < cfg.stop_transmittance) break;
    }
}

}  // namespace

TEST_CASE("isotropic gaussian under an orthographic camera matches the closed form")
{
    const int W = 33;
    OrthoCamera cam = down_ortho(W, W);
    const double sigma = 2.0, o = 0.7, z0 = 10.0;

    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0.0, 0.0, z0), sigma, o));
    // put the projected center exactly on the pixel grid center
    cam.cx = 16.5;
    cam.cy = 16.5;

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);

    for (int j = 0; j < W; ++j)
        for (int i = 0; i < W; ++i) {
            const double dx = i + 0.5 - 16.5, dy = j + 0.5 - 16.5;
            const double q = (dx * dx + dy * dy) / (sigma * sigma);
            const double want = q <= cfg.q_cutoff ? o * std::exp(-q) : 0.0;
            CHECK(out.alpha(i, j) == Catch::Approx(want).margin(1e-14));
            if (want > cfg.eps_alpha) {
                // isotropic: zero depth slope, so depth is the center depth
                CHECK(out.depth(i, j) == Catch::Approx(z0).margin(1e-12));
                CHECK(out.normal(i, j, 2) == Catch::Approx(-1.0).margin(1e-12));
            } else {
                CHECK(out.depth(i, j) == cfg.depth_background);
            }
        }
    CHECK(out.alpha(16, 16) == Catch::Approx(o).margin(1e-15));
    CHECK(out.singular_fallbacks == 0);
}

TEST_CASE("on-axis pinhole splat matches the closed form")
{
    PinholeCamera cam;
    cam.fx = cam.fy = 200.0;
    cam.width = cam.height = 33;
    cam.cx = cam.cy = 16.5;
    cam.rot = Mat3::Identity();
    cam.t = Vec3::Zero();

    const double sigma = 0.5, o = 0.6, z0 = 20.0;
    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0.0, 0.0, z0), sigma, o));

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);

    // screen covariance diag((f sigma / z)^2); exponent has no 1/2 factor
    const double s_px = cam.fx * sigma / z0;
    for (int i = 10; i < 24; ++i) {
        const double dx = i + 0.5 - 16.5;
        const double q = dx * dx / (s_px * s_px);
        CHECK(out.alpha(i, 16) == Catch::Approx(o * std::exp(-q)).margin(1e-13));
    }
    CHECK(out.depth(16, 16) == Catch::Approx(z0).margin(1e-10));
    CHECK(out.normal(16, 16, 2) == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("thin tilted gaussian reproduces the slanted plane depth and normal")
{
    const int W = 33;
    OrthoCamera cam = down_ortho(W, W);
    cam.cx = cam.cy = 16.5;

    // disk of radius ~2 squashed to 1e-4 along local z, tilted about x
    const double tilt = deg2rad(25.0);
    Gaussian3D g(0);
    g.position = Vec3(0.0, 0.0, 12.0);
    g.log_scale = Vec3(std::log(2.0), std::log(2.0), std::log(1e-4));
    g.rotation = Vec4(std::cos(tilt / 2), std::sin(tilt / 2), 0.0, 0.0);
    g.opacity_logit = logit(0.8);
    GaussianScene scene;
    scene.gaussians.push_back(g);

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);

    // plane normal in camera frame (camera looks along +z, so it is flipped)
    const Vec3 n = quat_to_rotation(g.rotation).col(2);
    REQUIRE(n.z() > 0.0);
    for (int j = 12; j <= 20; ++j)
        for (int i = 12; i <= 20; ++i) {
            if (out.alpha(i, j) < 0.5) continue;
            const double du = i + 0.5 - 16.5, dv = j + 0.5 - 16.5;
            const double plane_z = 12.0 - (n.x() * du + n.y() * dv) / n.z();
            CHECK(out.depth(i, j) == Catch::Approx(plane_z).margin(1e-4));
            CHECK(out.normal(i, j, 0) == Catch::Approx(-n.x()).margin(1e-4));
            CHECK(out.normal(i, j, 1) == Catch::Approx(-n.y()).margin(1e-4));
            CHECK(out.normal(i, j, 2) == Catch::Approx(-n.z()).margin(1e-4));
            const double nn = Vec3(out.normal(i, j, 0), out.normal(i, j, 1),
                                   out.normal(i, j, 2)).norm();
            CHECK(nn == Catch::Approx(1.0).epsilon(1e-10));
        }
}

TEST_CASE("payload channels composite front to back")
{
    OrthoCamera cam = down_ortho(17, 17);
    cam.cx = cam.cy = 8.5;

    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 20.0), 3.0, 0.6));  // far
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 5.0), 3.0, 0.5));   // near
    const std::vector<double> payload = {10.0, 1.0, 20.0, 2.0};           // K=2

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, payload, 2, cfg);

    // at the shared center: near first (alpha .5), then far (alpha .6)
    const double a_near = 0.5, a_far = 0.6;
    const double w1 = a_near, w2 = (1.0 - a_near) * a_far;
    CHECK(out.at(8, 8, 0) == Catch::Approx(w1 * 20.0 + w2 * 10.0).epsilon(1e-12));
    CHECK(out.at(8, 8, 1) == Catch::Approx(w1 * 2.0 + w2 * 1.0).epsilon(1e-12));
    CHECK(out.alpha(8, 8) == Catch::Approx(w1 + w2).epsilon(1e-12));
    CHECK(out.depth(8, 8) ==
          Catch::Approx((w1 * 5.0 + w2 * 20.0) / (w1 + w2)).epsilon(1e-12));
}

TEST_CASE("early stop drops occluded layers")
{
    OrthoCamera cam = down_ortho(9, 9);
    cam.cx = cam.cy = 4.5;

    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 2.0), 4.0, 0.995));
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 4.0), 4.0, 0.995));
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 6.0), 4.0, 0.995));
    const std::vector<double> payload = {1.0, 1.0, 1.0};

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, payload, 1, cfg);

    // transmittance after two layers is 2.5e-5 < 1e-4, so the third never blends
    const double a = 0.995;
    const double A2 = a + (1.0 - a) * a;
    CHECK(out.alpha(4, 4) == Catch::Approx(A2).epsilon(1e-12));
    CHECK(out.depth(4, 4) ==
          Catch::Approx((a * 2.0 + (1.0 - a) * a * 4.0) / A2).epsilon(1e-12));
}

TEST_CASE("alpha clamps below one")
{
    OrthoCamera cam = down_ortho(9, 9);
    cam.cx = cam.cy = 4.5;
    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 5.0), 4.0, 0.5));
    scene.gaussians[0].opacity_logit = 14.0;  // opacity within 1e-6 of 1

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);
    CHECK(out.alpha(4, 4) == cfg.alpha_max);
}

TEST_CASE("culling: behind camera, tiny footprint, distant tail")
{
    OrthoCamera cam = down_ortho(17, 17);
    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, -5.0), 2.0, 0.9));  // behind
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 5.0), 1e-4, 0.9));  // subpixel

    RasterConfig cfg;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);
    for (double a : out.alpha.data) CHECK(a == 0.0);

    // beyond the q cutoff the response is exactly zero
    GaussianScene s2;
    s2.gaussians.push_back(iso_gaussian(Vec3(-8.0, 0.0, 5.0), 1.0, 0.9));
    RasterConfig cfg2;
    cfg2.dilation = 0.0;
    cfg2.threads = 1;
    const RenderOutputs o2 = rasterize(s2, cam, {}, 0, cfg2);
    // center at u = 0.5: pixel (16, 8) sits 16 px away, q = 256 > 20
    CHECK(o2.alpha(16, 8) == 0.0);
}

TEST_CASE("flat gaussian aligned to the view falls back to center depth")
{
    OrthoCamera cam = down_ortho(17, 17);
    cam.cx = cam.cy = 8.5;
    Gaussian3D g(0);
    g.position = Vec3(0, 0, 7.0);
    g.log_scale = Vec3(std::log(3.0), std::log(3.0), -400.0);  // exp -> 0 in double
    g.opacity_logit = logit(0.9);
    GaussianScene scene;
    scene.gaussians.push_back(g);

    RasterConfig cfg;
    cfg.dilation = 0.0;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, {}, 0, cfg);
    CHECK(out.singular_fallbacks == 1);
    CHECK(out.alpha(8, 8) == Catch::Approx(0.9).epsilon(1e-12));
    CHECK(out.depth(8, 8) == Catch::Approx(7.0).margin(1e-12));
}

TEST_CASE("tile path equals the reference path bit for bit")
{
    Rng rng(61);
    GaussianScene scene = random_scene(rng, 120, 20.0, 4.0, 40.0);
    std::vector<double> payload(scene.gaussians.size() * 3);
    for (auto& p : payload) p = uniform(rng, 0.0, 1.0);

    PinholeCamera cam;
    cam.fx = cam.fy = 60.0;
    cam.cx = 40.0;
    cam.cy = 30.0;
    cam.width = 80;
    cam.height = 60;
    cam.rot = quat_to_rotation(tst::random_quat(rng));
    cam.t = Vec3(0.5, -0.25, 30.0);

    RasterConfig cfg;
    cfg.threads = 1;
    const RenderOutputs tile = rasterize(scene, cam, payload, 3, cfg);
    const RenderOutputs ref = rasterize_reference(scene, cam, payload, 3, cfg);
    CHECK(outputs_identical(tile, ref));

    // opaque stack exercising early stop in both paths
    GaussianScene dense = random_scene(rng, 60, 6.0, 2.0, 30.0);
    for (auto& g : dense.gaussians) g.opacity_logit = uniform(rng, 2.0, 6.0);
    const RenderOutputs t2 = rasterize(dense, cam, payload, 0, cfg);
    const RenderOutputs r2 = rasterize_reference(dense, cam, payload, 0, cfg);
    CHECK(outputs_identical(t2, r2));
}

TEST_CASE("thread count does not change any output bit")
{
    Rng rng(67);
    GaussianScene scene = random_scene(rng, 80, 15.0, 3.0, 30.0);
    std::vector<double> payload(scene.gaussians.size() * 2);
    for (auto& p : payload) p = uniform(rng, 0.0, 1.0);

    OrthoCamera cam = down_ortho(64, 48, 0.6);
    RasterConfig one;
    one.threads = 1;
    RasterConfig four;
    four.threads = 4;
    const RenderOutputs a = rasterize(scene, cam, payload, 2, one);
    const RenderOutputs b = rasterize(scene, cam, payload, 2, four);
    CHECK(outputs_identical(a, b));
}

TEST_CASE("library compositor agrees with a naive per-pixel walk")
{
    Rng rng(71);
    GaussianScene scene = random_scene(rng, 40, 10.0, 4.0, 25.0);
    std::vector<double> payload(scene.gaussians.size() * 2);
    for (auto& p : payload) p = uniform(rng, -1.0, 1.0);

    OrthoCamera cam = down_ortho(32, 32, 0.8);
    RasterConfig cfg;
    cfg.threads = 1;
    const RenderOutputs out = rasterize(scene, cam, payload, 2, cfg);

    std::vector<Splat2D> splats;
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        auto s = project_gaussian(scene.gaussians[i], cam, cfg, static_cast<int>(i));
        if (s) splats.push_back(*s);
    }
    std::stable_sort(splats.begin(), splats.end(),
                     [](const Splat2D& a, const Splat2D& b) { return a.z_c < b.z_c; });

    for (int j = 0; j < 32; j += 3)
        for (int i = 0; i < 32; i += 3) {
            double ch[2] = {0, 0}, A = 0, Draw = 0;
            Vec3 Nraw = Vec3::Zero();
            naive_pixel(splats, payload, 2, i + 0.5, j + 0.5, cfg, ch, A, Draw, Nraw);
            CHECK(out.alpha(i, j) == Catch::Approx(A).margin(1e-13));
            CHECK(out.at(i, j, 0) == Catch::Approx(ch[0]).margin(1e-12));
            CHECK(out.at(i, j, 1) == Catch::Approx(ch[1]).margin(1e-12));
            if (A > cfg.eps_alpha)
                CHECK(out.depth(i, j) == Catch::Approx(Draw / A).margin(1e-11));
        }
}

TEST_CASE("bad channel counts and payload sizes are rejected")
{
    OrthoCamera cam = down_ortho(8, 8);
    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 5.0), 1.0, 0.5));

    CHECK(tst::thrown_kind([&] {
              rasterize(scene, cam, std::vector<double>(33), 33, RasterConfig{});
          }) == err::kInvalidParameter);
    CHECK(tst::thrown_kind([&] {
              rasterize(scene, cam, std::vector<double>(5), 2, RasterConfig{});
          }) == err::kDimensionMismatch);
}

TEST_CASE("dilation widens the splat and caps the peak response")
{
    OrthoCamera cam = down_ortho(17, 17);
    cam.cx = cam.cy = 8.5;
    GaussianScene scene;
    scene.gaussians.push_back(iso_gaussian(Vec3(0, 0, 5.0), 1.0, 0.9));

    RasterConfig plain;
    plain.dilation = 0.0;
    plain.threads = 1;
    RasterConfig dilated;
    dilated.dilation = 0.3;
    dilated.threads = 1;
    const RenderOutputs a = rasterize(scene, cam, {}, 0, plain);
    const RenderOutputs b = rasterize(scene, cam, {}, 0, dilated);

    // peak is unchanged at the exact center, tails get heavier
    CHECK(b.alpha(8, 8) == Catch::Approx(0.9).margin(1e-12));
    CHECK(b.alpha(11, 8) > a.alpha(11, 8));

    // off-center the dilated response follows the widened covariance
    const double dx = 2.0;
    const double want = 0.9 * std::exp(-dx * dx / 1.3);
    CHECK(b.alpha(10, 8) == Catch::Approx(want).epsilon(1e-12));
}
