#include "shadowgs/rasterizer.hpp"

#include "support/util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace sgs;

namespace {

// Scalar objective: dot products of fixed gradient images with every output.
// Finite differences of this against rasterize_backward validate the chain.
double scalar_loss(const GaussianScene& scene, const OrthoCamera& cam,
                   const std::vector<double>& payload, int K, const RasterConfig& cfg,
                   const OutputGrads& g)
{
    const RenderOutputs out = rasterize(scene, cam, payload, K, cfg);
    double L = 0.0;
    for (size_t i = 0; i < out.ch.size(); ++i) L += g.ch[i] * out.ch[i];
    for (size_t p = 0; p < out.alpha.data.size(); ++p) {
        L += g.alpha.data[p] * out.alpha.data[p];
        L += g.depth.data[p] * out.depth.data[p];
        for (int k = 0; k < 3; ++k)
            L += g.normal.data[p * 3 + k] * out.normal.data[p * 3 + k];
    }
    return L;
}

OutputGrads random_outgrads(Rng& rng, int w, int h, int K)
{
    OutputGrads g;
    g.ch.resize(static_cast<size_t>(w) * h * K);
    for (auto& v : g.ch) v = normal(rng, 0.0, 1.0);
    g.depth = Image1(w, h);
    g.alpha = Image1(w, h);
    g.normal = Image3(w, h);
    for (auto& v : g.depth.data) v = normal(rng, 0.0, 0.2);
    for (auto& v : g.alpha.data) v = normal(rng, 0.0, 1.0);
    for (auto& v : g.normal.data) v = normal(rng, 0.0, 0.5);
    return g;
}

OrthoCamera grad_cam(int w, int h)
{
    OrthoCamera cam;
    cam.pixel_size = 0.7;
    cam.cx = w * 0.5;
    cam.cy = h * 0.5;
    cam.width = w;
    cam.height = h;
    cam.rot = Mat3::Identity();
    cam.t = Vec3(0.0, 0.0, 12.0);
    return cam;
}

GaussianScene grad_scene(Rng& rng, int n)
{
    GaussianScene scene;
    for (int i = 0; i < n; ++i) {
        Gaussian3D g(0);
        g.position = Vec3(uniform(rng, -5.0, 5.0), uniform(rng, -5.0, 5.0),
                          uniform(rng, -2.0, 6.0));
        g.log_scale = uniform_vec3(rng, 0.2, 1.0);
        g.rotation = tst::random_quat(rng);
        g.opacity_logit = uniform(rng, -1.0, 1.2);
        scene.gaussians.push_back(g);
    }
    return scene;
}

RasterConfig smooth_cfg()
{
    RasterConfig cfg;
    cfg.threads = 1;
    // keep every finite-difference probe away from the piecewise boundaries
    cfg.q_cutoff = 1e6;
    cfg.stop_transmittance = 1e-30;
    cfg.min_footprint_px = 1e-6;
    return cfg;
}

}  // namespace

TEST_CASE("backward matches finite differences over every parameter")
{
    Rng rng(101);
    const int W = 24, H = 20, K = 2;
    const OrthoCamera cam = grad_cam(W, H);
    GaussianScene scene = grad_scene(rng, 5);
    std::vector<double> payload(scene.gaussians.size() * K);
    for (auto& p : payload) p = uniform(rng, -1.0, 1.0);
    const OutputGrads g = random_outgrads(rng, W, H, K);
    const RasterConfig cfg = smooth_cfg();

    const RasterGrads grads = rasterize_backward(scene, cam, payload, K, g, cfg);

    const double h = 1e-5;
    for (size_t gi = 0; gi < scene.gaussians.size(); ++gi) {
        for (int a = 0; a < 3; ++a) {
            const double num = tst::fdiff(
                [&](double x) {
                    GaussianScene s = scene;
                    s.gaussians[gi].position[a] = x;
                    return scalar_loss(s, cam, payload, K, cfg, g);
                },
                scene.gaussians[gi].position[a], h);
            CHECK(tst::grad_close(grads.position[gi][a], num, 2e-4, 2e-6));

            const double nls = tst::fdiff(
                [&](double x) {
                    GaussianScene s = scene;
                    s.gaussians[gi].log_scale[a] = x;
                    return scalar_loss(s, cam, payload, K, cfg, g);
                },
                scene.gaussians[gi].log_scale[a], h);
            CHECK(tst::grad_close(grads.log_scale[gi][a], nls, 2e-4, 2e-6));
        }
        for (int a = 0; a < 4; ++a) {
            const double num = tst::fdiff(
                [&](double x) {
                    GaussianScene s = scene;
                    s.gaussians[gi].rotation[a] = x;
                    return scalar_loss(s, cam, payload, K, cfg, g);
                },
                scene.gaussians[gi].rotation[a], h);
            CHECK(tst::grad_close(grads.rotation[gi][a], num, 2e-4, 2e-6));
        }
        const double nop = tst::fdiff(
            [&](double x) {
                GaussianScene s = scene;
                s.gaussians[gi].opacity_logit = x;
                return scalar_loss(s, cam, payload, K, cfg, g);
            },
            scene.gaussians[gi].opacity_logit, h);
        CHECK(tst::grad_close(grads.opacity_logit[gi], nop, 2e-4, 2e-6));

        for (int k = 0; k < K; ++k) {
            const double num = tst::fdiff(
                [&](double x) {
                    std::vector<double> p = payload;
                    p[gi * K + k] = x;
                    return scalar_loss(scene, cam, p, K, cfg, g);
                },
                payload[gi * K + k], h);
            CHECK(tst::grad_close(grads.payload[gi * K + k], num, 2e-4, 2e-6));
        }
    }
}

TEST_CASE("backward handles clamped alpha consistently")
{
    Rng rng(103);
    const int W = 16, H = 16;
    const OrthoCamera cam = grad_cam(W, H);

    GaussianScene scene;
    Gaussian3D big(0);
    // center lands exactly on the pixel (8, 8) sample point, which then sits
    // inside the clamp plateau; every other pixel stays on the smooth branch
    big.position = Vec3(0.35, 0.35, 2.0);
    big.log_scale = Vec3::Constant(std::log(4.0));
    big.opacity_logit = 12.0;
    scene.gaussians.push_back(big);
    Gaussian3D back(0);
    back.position = Vec3(1.0, 0.5, 6.0);
    back.log_scale = Vec3::Constant(std::log(3.0));
    back.opacity_logit = 0.5;
    scene.gaussians.push_back(back);

    std::vector<double> payload = {0.8, -0.3};
    const OutputGrads g = random_outgrads(rng, W, H, 1);
    const RasterConfig cfg = smooth_cfg();

    // the clamp must actually engage for this test to mean anything
    const RenderOutputs fwd = rasterize(scene, cam, payload, 1, cfg);
    REQUIRE(fwd.alpha(8, 8) >= cfg.alpha_max);

    const RasterGrads grads = rasterize_backward(scene, cam, payload, 1, g, cfg);

    for (size_t gi = 0; gi < 2; ++gi)
        for (int a = 0; a < 3; ++a) {
            const double num = tst::fdiff(
                [&](double x) {
                    GaussianScene s = scene;
                    s.gaussians[gi].position[a] = x;
                    return scalar_loss(s, cam, payload, 1, cfg, g);
                },
                scene.gaussians[gi].position[a], 1e-5);
            CHECK(tst::grad_close(grads.position[gi][a], num, 1e-3, 1e-5));
        }

    // at the clamped pixel opacity has no effect; the surviving logit signal
    // comes from the unclamped surroundings, in both analytic and numeric form
    const double num = tst::fdiff(
        [&](double x) {
            GaussianScene s = scene;
            s.gaussians[0].opacity_logit = x;
            return scalar_loss(s, cam, payload, 1, cfg, g);
        },
        scene.gaussians[0].opacity_logit, 1e-4);
    CHECK(tst::grad_close(grads.opacity_logit[0], num, 1e-3, 1e-6));
}

TEST_CASE("empty gradient buffers mean zero and do not contribute")
{
    Rng rng(107);
    const int W = 20, H = 20, K = 1;
    const OrthoCamera cam = grad_cam(W, H);
    GaussianScene scene = grad_scene(rng, 4);
    std::vector<double> payload(scene.gaussians.size(), 0.5);
    const RasterConfig cfg = smooth_cfg();

    OutputGrads only_ch;
    only_ch.ch.assign(static_cast<size_t>(W) * H * K, 1.0);

    OutputGrads padded = only_ch;
    padded.depth = Image1(W, H, 0.0);
    padded.alpha = Image1(W, H, 0.0);
    padded.normal = Image3(W, H, 0.0);

    const RasterGrads a = rasterize_backward(scene, cam, payload, K, only_ch, cfg);
    const RasterGrads b = rasterize_backward(scene, cam, payload, K, padded, cfg);
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        CHECK(a.position[i] == b.position[i]);
        CHECK(a.log_scale[i] == b.log_scale[i]);
        CHECK(a.rotation[i] == b.rotation[i]);
        CHECK(a.opacity_logit[i] == b.opacity_logit[i]);
        CHECK(a.payload[i] == b.payload[i]);
    }
}

TEST_CASE("gradients are deterministic across runs and thread counts")
{
    Rng rng(109);
    const int W = 40, H = 32, K = 3;
    const OrthoCamera cam = grad_cam(W, H);
    GaussianScene scene = grad_scene(rng, 30);
    std::vector<double> payload(scene.gaussians.size() * K);
    for (auto& p : payload) p = uniform(rng, -1.0, 1.0);
    const OutputGrads g = random_outgrads(rng, W, H, K);

    RasterConfig one = smooth_cfg();
    RasterConfig four = smooth_cfg();
    four.threads = 4;

    const RasterGrads a = rasterize_backward(scene, cam, payload, K, g, one);
    const RasterGrads b = rasterize_backward(scene, cam, payload, K, g, one);
    const RasterGrads c = rasterize_backward(scene, cam, payload, K, g, four);
    for (size_t i = 0; i < scene.gaussians.size(); ++i) {
        CHECK(a.position[i] == b.position[i]);
        CHECK(a.position[i] == c.position[i]);
        CHECK(a.rotation[i] == c.rotation[i]);
        CHECK(a.log_scale[i] == c.log_scale[i]);
        CHECK(a.opacity_logit[i] == c.opacity_logit[i]);
        CHECK(a.screen_grad[i] == c.screen_grad[i]);
    }
    CHECK(a.payload == c.payload);
}

TEST_CASE("screen gradient reports image-plane pull on covered gaussians")
{
    Rng rng(113);
    const int W = 24, H = 24;
    const OrthoCamera cam = grad_cam(W, H);
    GaussianScene scene = grad_scene(rng, 3);
    std::vector<double> payload(scene.gaussians.size(), 1.0);
    const OutputGrads g = random_outgrads(rng, W, H, 1);
    const RasterGrads grads =
        rasterize_backward(scene, cam, payload, 1, g, smooth_cfg());

    for (size_t i = 0; i < scene.gaussians.size(); ++i) CHECK(grads.screen_grad[i] > 0.0);

    // a gaussian far outside the frame receives nothing
    GaussianScene s2 = scene;
    Gaussian3D off(0);
    off.position = Vec3(500.0, 0.0, 3.0);
    off.log_scale = Vec3::Constant(0.3);
    s2.gaussians.push_back(off);
    std::vector<double> p2(s2.gaussians.size(), 1.0);
    const RasterGrads g2 = rasterize_backward(s2, cam, p2, 1, g, smooth_cfg());
    CHECK(g2.screen_grad[3] == 0.0);
    CHECK(g2.position[3] == Vec3::Zero());
}
