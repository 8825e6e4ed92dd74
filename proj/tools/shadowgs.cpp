// Command-line front end: dataset synthesis, training, rendering and
// decomposition, evaluation, and RPC-to-pinhole camera fitting.

#include "shadowgs/metrics.hpp"
#include "shadowgs/rpc.hpp"
#include "shadowgs/synthdata.hpp"
#include "shadowgs/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace sgs;

namespace {

int resolve_threads(int flag)
{
    if (flag > 0) return flag;
    if (const char* env = std::getenv("SHADOWGS_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
        warn("ignoring malformed SHADOWGS_THREADS value");
    }
    return 0;  // library default: hardware parallelism
}

/// Guard for commands that own a whole output directory: the directory must
/// be fresh (or --force), and everything created is removed if the command
/// fails partway. With --force into a pre-existing directory the cleanup is
/// skipped, since its contents are not ours to delete.
class OutDir {
public:
    OutDir(const std::string& dir, bool force) : path_(dir)
    {
        if (fs::exists(path_)) {
            if (!fs::is_directory(path_))
                throw Error(err::kIo, "output path is not a directory: " + dir);
            if (!fs::is_empty(path_) && !force)
                throw Error(err::kIo, "output directory is not empty (use --force): " + dir);
            preexisting_ = true;
        } else {
            fs::create_directories(path_);
        }
    }
    ~OutDir()
    {
        if (committed_ || preexisting_) return;
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    void commit() { committed_ = true; }
    const std::string& str() const { return path_; }

private:
    std::string path_;
    bool preexisting_ = false;
    bool committed_ = false;
};

/// Guard for commands that write individual files, possibly into shared
/// directories: failed runs remove exactly the files they wrote.
class FileGuard {
public:
    ~FileGuard()
    {
        if (committed_) return;
        std::error_code ec;
        for (auto it = files_.rbegin(); it != files_.rend(); ++it) fs::remove(*it, ec);
    }
    std::string note(const fs::path& p)
    {
        fs::create_directories(p.parent_path().empty() ? "." : p.parent_path());
        files_.push_back(p);
        return p.string();
    }
    void commit() { committed_ = true; }

private:
    std::vector<fs::path> files_;
    bool committed_ = false;
};

Image1 channel_image(const RenderOutputs& outs, int k)
{
    Image1 img(outs.width, outs.height);
    for (int j = 0; j < outs.height; ++j)
        for (int i = 0; i < outs.width; ++i) img(i, j) = outs.at(i, j, k);
    return img;
}

Image3 channel_image3(const RenderOutputs& outs, int k0)
{
    Image3 img(outs.width, outs.height);
    for (int j = 0; j < outs.height; ++j)
        for (int i = 0; i < outs.width; ++i)
            for (int c = 0; c < 3; ++c) img(i, j, c) = outs.at(i, j, k0 + c);
    return img;
}

/// Writes the full decomposition panel set for one render.
void write_panels(FileGuard& guard, const fs::path& dir, const std::string& prefix,
                  const ShadedRender& r)
{
    write_png_color(guard.note(dir / (prefix + "color.png")), r.color);
    write_png_color(guard.note(dir / (prefix + "albedo.png")), channel_image3(r.raster, 7));
    write_png_color(guard.note(dir / (prefix + "lsky.png")), channel_image3(r.raster, 1));
    write_png_color(guard.note(dir / (prefix + "lnear.png")), channel_image3(r.raster, 4));
    const Image1 shadow = channel_image(r.raster, 0);
    write_png_gray(guard.note(dir / (prefix + "shadow.png")), shadow);
    write_pfm(guard.note(dir / (prefix + "shadow.pfm")), shadow);
    write_pfm(guard.note(dir / (prefix + "depth.pfm")), r.raster.depth);
}

struct SynthArgs {
    std::string out;
    int seed = 7;
    int size = 256;
    bool sparse = false;
    bool force = false;
};

int cmd_synth(const SynthArgs& a)
{
    OutDir guard(a.out, a.force);
    const SynthDataset ds =
        make_acceptance_scene(static_cast<std::uint64_t>(a.seed), a.size, a.sparse);
    write_dataset(guard.str(), ds);
    guard.commit();
    std::cout << "dataset " << a.out << " views_train " << ds.train.size() << " views_test "
              << ds.test.size() << " boxes " << ds.scene.boxes.size() << "\n";
    return 0;
}

struct TrainArgs {
    std::string data, out, config, scene_init;
    int seed = -1;
    int iters = -1;
    int init_count = 2000;
    int threads = 0;
    bool sparse = false;
    bool force = false;
    std::string consistency;
};

int cmd_train(const TrainArgs& a)
{
    const SynthDataset ds = read_dataset(a.data);
    if (ds.train.empty()) throw Error(err::kInvalidParameter, "dataset has no training views");

    TrainConfig cfg;
    if (!a.config.empty()) {
        cfg = load_train_config(a.config);
    } else if (ds.dsm.cols() > 0) {
        cfg.scene_extent = ds.dsm.cols() * ds.dsm.cell;
    }
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    if (a.iters > 0) {
        cfg.total_iters = a.iters;
        cfg.densify_until = std::min(cfg.densify_until, a.iters);
    }
    if (a.sparse) cfg.shadow_prior_active = true;
    if (!a.consistency.empty()) {
        if (a.consistency == "camera-aligned")
            cfg.consistency_mode = ConsistencyMode::kCameraAligned;
        else if (a.consistency == "nadir")
            cfg.consistency_mode = ConsistencyMode::kNadir;
        else if (a.consistency == "both")
            cfg.consistency_mode = ConsistencyMode::kBoth;
        else
            throw Error(err::kInvalidParameter,
                        "consistency mode must be camera-aligned, nadir, or both");
    }
    cfg.threads = resolve_threads(a.threads);
    cfg.check();

    std::vector<TrainView> views;
    for (const SynthView& sv : ds.train) {
        TrainView v;
        v.cam = sv.cam;
        v.sun = sv.sun;
        v.image = sv.image;
        v.shadow_mask = sv.shadow_mask;
        views.push_back(std::move(v));
    }

    GaussianScene scene;
    if (!a.scene_init.empty()) {
        scene = load_scene(a.scene_init);
    } else {
        const double half = cfg.scene_extent / 2.0;
        scene = init_scene_random(a.init_count, Vec3(-half, -half, 0.0),
                                  Vec3(half, half, 0.3 * cfg.scene_extent), cfg.seed);
    }

    OutDir guard(a.out, a.force);
    const TrainResult result = run_training(scene, views, cfg, guard.str());
    guard.commit();
    const TrainLogRow& last = result.losses.back();
    std::cout << "run " << a.out << " iters " << cfg.total_iters << " final_loss "
              << last.report.total << " gaussians " << scene.gaussians.size() << "\n";
    return 0;
}

struct RenderArgs {
    std::string scene, camera, out, prefix;
    double sun_az = 180.0;
    double sun_el = 45.0;
    int threads = 0;
};

int cmd_render(const RenderArgs& a)
{
    const GaussianScene scene = load_scene(a.scene);
    const PinholeCamera cam = load_camera(a.camera);
    const SunLight sun = sun_direction(a.sun_az, a.sun_el);

    RasterConfig rc;
    ShadowConfig sc;
    rc.threads = sc.threads = resolve_threads(a.threads);
    const ShadowBvh bvh = scene_bvh(scene, sc.o_min);
    const ShadedRender r = render_color(scene, bvh, cam, sun, sc, rc);

    fs::create_directories(a.out);
    FileGuard guard;
    write_panels(guard, a.out, a.prefix, r);
    guard.commit();
    std::cout << "rendered " << a.out << "/" << a.prefix << "*.png sun_az " << a.sun_az
              << " sun_el " << a.sun_el << "\n";
    return 0;
}

struct DecomposeArgs {
    std::string run, data, out;
    int threads = 0;
};

int cmd_decompose(const DecomposeArgs& a)
{
    const GaussianScene scene = load_scene(a.run + "/scene_final.sgs");
    const SynthDataset ds = read_dataset(a.data);

    RasterConfig rc;
    ShadowConfig sc;
    rc.threads = sc.threads = resolve_threads(a.threads);
    const ShadowBvh bvh = scene_bvh(scene, sc.o_min);

    fs::create_directories(a.out);
    FileGuard guard;
    for (const SynthView& v : ds.train) {
        const ShadedRender r = render_color(scene, bvh, v.cam, v.sun, sc, rc);
        write_panels(guard, a.out, v.id + "_", r);
    }
    guard.commit();
    std::cout << "decomposed " << ds.train.size() << " views into " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string run, data, out;
    int threads = 0;
};

int cmd_eval(const EvalArgs& a)
{
    const GaussianScene scene = load_scene(a.run + "/scene_final.sgs");
    const SynthDataset ds = read_dataset(a.data);
    const std::vector<SynthView>& views = ds.test.empty() ? ds.train : ds.test;
    if (views.empty()) throw Error(err::kInvalidParameter, "dataset has no views to evaluate");

    RasterConfig rc;
    ShadowConfig sc;
    rc.threads = sc.threads = resolve_threads(a.threads);
    const ShadowBvh bvh = scene_bvh(scene, sc.o_min);

    const std::string out_dir = a.out.empty() ? a.run + "/eval" : a.out;
    fs::create_directories(out_dir);
    FileGuard guard;

    std::ostringstream report;
    report.precision(17);
    double psnr_sum = 0.0, ber_sum = 0.0, acc_sum = 0.0;
    for (const SynthView& v : views) {
        const ShadedRender r = render_color(scene, bvh, v.cam, v.sun, sc, rc);
        const double view_psnr = psnr(r.color, v.image);
        const ShadowScore score = shadow_ber_acc(channel_image(r.raster, 0), v.shadow_mask);
        psnr_sum += view_psnr;
        ber_sum += score.ber;
        acc_sum += score.acc;
        report << "view " << v.id << " psnr " << view_psnr << " ber " << score.ber << " acc "
               << score.acc << "\n";

        Image3 diff(r.color.width, r.color.height);
        for (size_t p = 0; p < diff.data.size(); ++p)
            diff.data[p] = std::abs(r.color.data[p] - v.image.data[p]);
        write_png_color(guard.note(fs::path(out_dir) / (v.id + "_error.png")), diff);
    }
    const double n = static_cast<double>(views.size());
    report << "psnr_mean " << psnr_sum / n << "\n";
    report << "ber_mean " << ber_sum / n << "\n";
    report << "acc_mean " << acc_sum / n << "\n";

    if (ds.dsm.cols() > 0) {
        const double extent = ds.dsm.cols() * ds.dsm.cell;
        const Dsm pred = extract_dsm(scene, extent, ds.dsm.cell, rc);
        const double mae = height_mae(pred, ds.dsm, DsmAlign::kNone);
        report << "dsm_mae " << mae << "\n";

        Image1 err_map(pred.cols(), pred.rows(), 0.0);
        double peak = 0.0;
        for (size_t p = 0; p < err_map.data.size(); ++p)
            if (pred.valid(pred.height.data[p]) && ds.dsm.valid(ds.dsm.height.data[p])) {
                err_map.data[p] = std::abs(pred.height.data[p] - ds.dsm.height.data[p]);
                peak = std::max(peak, err_map.data[p]);
            }
        write_pfm(guard.note(fs::path(out_dir) / "dsm_error.pfm"), err_map);
        if (peak > 0.0)
            for (double& v : err_map.data) v /= peak;
        write_png_gray(guard.note(fs::path(out_dir) / "dsm_error.png"), err_map);
        write_pfm(guard.note(fs::path(out_dir) / "dsm_pred.pfm"), pred.height);
    }
    report << "gaussians " << scene.gaussians.size() << "\n";

    const std::string text = report.str();
    std::ofstream file(guard.note(fs::path(out_dir) / "report.txt"));
    if (!file) throw Error(err::kIo, "cannot open for writing: " + out_dir + "/report.txt");
    file << text;
    file.close();
    guard.commit();
    std::cout << text;
    return 0;
}

struct FitCameraArgs {
    std::string rpc, out;
    int width = 0, height = 0;
    int grid = 8;
};

int cmd_fit_camera(const FitCameraArgs& a)
{
    const RpcModel rpc = load_rpc(a.rpc);
    SceneFrame frame;
    frame.origin_lat = rpc.lat_off;
    frame.origin_lon = rpc.lon_off;
    frame.origin_alt = rpc.height_off;
    const Vec3 lo = geodetic_to_enu(frame, rpc.lat_off - rpc.lat_scale,
                                    rpc.lon_off - rpc.lon_scale,
                                    rpc.height_off - rpc.height_scale);
    const Vec3 hi = geodetic_to_enu(frame, rpc.lat_off + rpc.lat_scale,
                                    rpc.lon_off + rpc.lon_scale,
                                    rpc.height_off + rpc.height_scale);
    const RpcFit fit = fit_pinhole_to_rpc(rpc, frame, lo, hi, a.grid, a.width, a.height);

    FileGuard guard;
    save_camera(fit.camera, guard.note(a.out));
    guard.commit();
    std::cout << "camera " << a.out << " rms_px " << fit.rms_px << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Gaussian-splatting reconstruction with explicit sun-shadow modeling"};
    app.require_subcommand(1);

    SynthArgs sa;
    CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic multi-sun dataset");
    synth->add_option("--out", sa.out, "Output dataset directory")->required();
    synth->add_option("--seed", sa.seed, "Scene seed");
    synth->add_option("--size", sa.size, "Image size in pixels");
    synth->add_flag("--sparse", sa.sparse, "Three-view sparse variant");
    synth->add_flag("--force", sa.force, "Allow writing into a non-empty directory");

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "Optimize a scene against a dataset");
    train->add_option("--data", ta.data, "Dataset directory")->required();
    train->add_option("--out", ta.out, "Run output directory")->required();
    train->add_option("--config", ta.config, "Config snapshot to start from");
    train->add_option("--scene-init", ta.scene_init, "Initial scene file (.sgs)");
    train->add_option("--seed", ta.seed, "Override the config seed");
    train->add_option("--iters", ta.iters, "Override total iterations");
    train->add_option("--init-count", ta.init_count, "Random-init gaussian count");
    train->add_option("--threads", ta.threads, "Worker threads (default: hardware)");
    train->add_option("--consistency-mode", ta.consistency,
                      "camera-aligned, nadir, or both");
    train->add_flag("--sparse", ta.sparse, "Activate the shadow prior");
    train->add_flag("--force", ta.force, "Allow writing into a non-empty directory");

    RenderArgs ra;
    CLI::App* render = app.add_subcommand("render", "Render a scene from a camera and sun");
    render->add_option("--scene", ra.scene, "Scene file (.sgs)")->required();
    render->add_option("--camera", ra.camera, "Camera file")->required();
    render->add_option("--out", ra.out, "Output directory")->required();
    render->add_option("--prefix", ra.prefix, "Output filename prefix");
    render->add_option("--sun-az", ra.sun_az, "Sun azimuth, degrees east of north");
    render->add_option("--sun-el", ra.sun_el, "Sun elevation, degrees");
    render->add_option("--threads", ra.threads, "Worker threads");

    DecomposeArgs da;
    CLI::App* decompose =
        app.add_subcommand("decompose", "Export decomposition panels per training view");
    decompose->add_option("--run", da.run, "Training run directory")->required();
    decompose->add_option("--data", da.data, "Dataset directory")->required();
    decompose->add_option("--out", da.out, "Output directory")->required();
    decompose->add_option("--threads", da.threads, "Worker threads");

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a run against a dataset");
    eval->add_option("--run", ea.run, "Training run directory")->required();
    eval->add_option("--data", ea.data, "Dataset directory")->required();
    eval->add_option("--out", ea.out, "Report directory (default <run>/eval)");
    eval->add_option("--threads", ea.threads, "Worker threads");

    FitCameraArgs fa;
    CLI::App* fit = app.add_subcommand("fit-camera", "Fit a pinhole camera to an RPC model");
    fit->add_option("--rpc", fa.rpc, "RPC model file")->required();
    fit->add_option("--out", fa.out, "Output camera file")->required();
    fit->add_option("--width", fa.width, "Image width in pixels")->required();
    fit->add_option("--height", fa.height, "Image height in pixels")->required();
    fit->add_option("--grid", fa.grid, "Fitting grid resolution per axis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error[usage]: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth(sa);
        if (train->parsed()) return cmd_train(ta);
        if (render->parsed()) return cmd_render(ra);
        if (decompose->parsed()) return cmd_decompose(da);
        if (eval->parsed()) return cmd_eval(ea);
        if (fit->parsed()) return cmd_fit_camera(fa);
    } catch (const Error& e) {
        std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error[usage]: no subcommand given\n";
    return 2;
}
