// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0
//
// dgtr: command line front end for the reconstruction pipeline.
//
// Exit codes: 0 success, 2 usage error, 3 contract violation, 4 transport failure.
//

#include "run_config.hpp"

#include <dgtr/aggregate.hpp>
#include <dgtr/data.hpp>
#include <dgtr/dist.hpp>
#include <dgtr/errors.hpp>
#include <dgtr/eval_bench.hpp>
#include <dgtr/init.hpp>
#include <dgtr/raster.hpp>
#include <dgtr/train.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <memory>
#include <sstream>

namespace fs = std::filesystem;
using namespace dgtr;

namespace {

constexpr int kExitOk        = 0;
constexpr int kExitUsage     = 2;
constexpr int kExitContract  = 3;
constexpr int kExitTransport = 4;

// Everything a subcommand may be asked for. Each subcommand binds the fields it uses.
struct Options {
    std::string manifest;
    // synth
    std::uint64_t seed = 1;
    int gaussians      = 4096;
    int cameras        = 16;
    int width          = 64;
    int height         = 48;
    double tilt        = 15.0;
    std::string out;
    // scene layout
    std::string scene;
    int devices = 1;
    int device  = 0;
    // init
    int stride      = 2;
    int align_steps = 500;
    std::string predictions;
    std::string scale_mode = "global+local";
    // train
    std::string init;
    int steps         = 10000;
    int densify_every = 300;
    bool no_depth     = false;
    bool no_freeze    = false;
    std::uint64_t train_seed = 0;
    // distributed
    std::string listen;
    std::string connect;
    int distill_epochs    = 5;
    int straggler_ms      = 0;
    int retries           = 3;
    bool wait_done        = false;
    // aggregate
    std::vector<std::string> models;
    std::vector<int> model_devices;
    // render / eval / ablate
    std::string model;
    int camera_id = 0;
    std::string depth;
    std::string camera_file;
    std::string views = "held-out";
    std::string suite;
    std::vector<int> ablate_devices;
    int ablate_steps       = 2000;
    int ablate_align_steps = 100;
    std::uint64_t ablate_seed = 1;
};

struct Context {
    Options o;
    cli::Manifest manifest;
};

ScaleMode
parseScaleMode(const std::string &s) {
    if (s == "none") return ScaleMode::None;
    if (s == "global") return ScaleMode::Global;
    if (s == "global+local") return ScaleMode::GlobalLocal;
    throw ContractError("unknown scale mode '" + s + "'");
}

std::shared_ptr<Predictor>
makePredictor(const fs::path &scene, const DeviceDataset &ds, const std::string &predictions) {
    if (!predictions.empty()) return std::make_shared<FilePredictor>(predictions);
    // Synthetic scenes carry their ground truth, so the oracle predictor can stand in.
    const SyntheticScene sc = loadScene(scene);
    return std::make_shared<SyntheticPredictor>(sc.gt, ds.cameras, ds.images, benchmarkPredictorParams(sc));
}

InitConfig
initConfig(const Options &o) {
    InitConfig cfg;
    cfg.stride      = o.stride;
    cfg.align.steps = o.align_steps;
    cfg.mode        = parseScaleMode(o.scale_mode);
    return cfg;
}

TrainConfig
trainConfig(const Options &o) {
    TrainConfig cfg;
    cfg.steps            = o.steps;
    cfg.densify_interval = o.densify_every;
    cfg.shape_freeze     = !o.no_freeze;
    cfg.seed             = o.train_seed;
    if (o.no_depth) cfg.weights.lambda3 = 0.0;
    cfg.validate();
    return cfg;
}

fs::path
deviceOutput(const Options &o, const char *name) {
    return o.out.empty() ? deviceDir(o.scene, o.device) / name : fs::path(o.out);
}

// --- subcommands --------------------------------------------------------------

int
cmdSynth(Context &cx) {
    const Options &o = cx.o;
    SynthParams p;
    p.n_gaussians = o.gaussians;
    p.n_cameras   = o.cameras;
    p.width       = o.width;
    p.height      = o.height;
    p.tilt_deg    = o.tilt;
    writeScene(o.out, synthScene(o.seed, p));
    cx.manifest.seed = o.seed;
    cx.manifest.outputs.push_back(o.out);
    std::cout << "wrote scene " << o.out << " (" << o.gaussians << " gaussians, " << o.cameras << " cameras)\n";
    return kExitOk;
}

int
cmdPartition(Context &cx) {
    const Options &o = cx.o;
    const auto cams    = readCamerasTxt(fs::path(o.scene) / "cameras.txt");
    const auto regions = partitionScene(cams, o.devices);
    writePartition(o.scene, cams, regions);
    cx.manifest.outputs.push_back((fs::path(o.scene) / "regions.txt").string());
    for (const auto &r : regions) {
        int n = 0;
        for (const auto &c : cams) n += pointInRegion(c.translation, r);
        std::cout << "device " << r.device << '\t' << n << " cameras\n";
    }
    return kExitOk;
}

int
cmdInit(Context &cx) {
    const Options &o   = cx.o;
    const auto ds      = loadDeviceDataset(o.scene, o.device);
    auto pred          = makePredictor(o.scene, ds, o.predictions);
    const auto rep     = initializeDevice(ds.cameras, *pred, initConfig(o));
    const fs::path out = deviceOutput(o, "init.dgs");
    saveModel(out, rep.model);
    cx.manifest.outputs.push_back(out.string());
    std::cout << "primitives\t" << rep.model.size() << "\ns_global\t" << rep.s_global << '\n';
    return kExitOk;
}

int
cmdTrain(Context &cx) {
    const Options &o = cx.o;
    const auto ds    = loadDeviceDataset(o.scene, o.device);
    const fs::path initPath = o.init.empty() ? deviceDir(o.scene, o.device) / "init.dgs" : fs::path(o.init);
    const auto res          = trainDevice(loadModel(initPath), ds, trainConfig(o));
    const fs::path out      = deviceOutput(o, "model.dgs");
    const fs::path trace    = out.parent_path() / (out.stem().string() + "_trace.tsv");
    saveModel(out, res.model);
    writeTrace(trace, res.trace);
    cx.manifest.seed = o.train_seed;
    cx.manifest.outputs = {out.string(), trace.string()};
    std::cout << "primitives\t" << res.model.size() << '\n';
    if (!res.trace.empty()) std::cout << "final_loss\t" << res.trace.back().loss << '\n';
    return kExitOk;
}

int
cmdServe(Context &cx) {
    const Options &o = cx.o;
    ServerConfig cfg;
    cfg.regions = readRegionsTxt(fs::path(o.scene) / "regions.txt");
    if (static_cast<int>(cfg.regions.size()) != o.devices) {
        throw ContractError("regions.txt holds " + std::to_string(cfg.regions.size()) + " regions, expected " +
                            std::to_string(o.devices));
    }
    cfg.distill.epochs      = o.distill_epochs;
    cfg.output              = o.out.empty() ? fs::path(o.scene) / "global.dgs" : fs::path(o.out);
    cfg.straggler_timeout   = Millis(o.straggler_ms);
    TcpListener listener(o.listen);
    std::cout << "listening\t" << listener.port() << std::endl;
    const auto rep = runServer(cfg, listener);
    if (rep.aborted) {
        cx.manifest.error = rep.report;
        return kExitTransport;
    }
    cx.manifest.outputs.push_back(cfg.output.string());
    std::cout << "primitives\t" << rep.model.size() << '\n';
    for (std::size_t e = 0; e < rep.aggregate.epoch_loss.size(); ++e) {
        std::cout << "distill_epoch_" << e + 1 << '\t' << rep.aggregate.epoch_loss[e] << '\n';
    }
    return kExitOk;
}

int
cmdDevice(Context &cx) {
    const Options &o = cx.o;
    DeviceConfig cfg;
    cfg.device     = o.device;
    cfg.dataset    = loadDeviceDataset(o.scene, o.device);
    cfg.predictor  = makePredictor(o.scene, cfg.dataset, o.predictions);
    cfg.init       = initConfig(o);
    cfg.train      = trainConfig(o);
    cfg.retries    = o.retries;
    cfg.await_done = o.wait_done;
    const std::string address = o.connect;
    const auto rep = runDevice(cfg, [address] { return tcpConnect(address); });
    if (rep.exit_code != 0) {
        cx.manifest.error = rep.error;
        return rep.exit_code;
    }
    const fs::path out = deviceOutput(o, "model.dgs");
    saveModel(out, rep.model);
    cx.manifest.outputs.push_back(out.string());
    std::cout << "attempts\t" << rep.attempts << "\nprimitives\t" << rep.model.size() << '\n';
    return kExitOk;
}

int
cmdAggregate(Context &cx) {
    const Options &o = cx.o;
    if (!o.model_devices.empty() && o.model_devices.size() != o.models.size()) {
        throw ContractError("--model-devices must name one device per model");
    }
    const auto regions = readRegionsTxt(fs::path(o.scene) / "regions.txt");
    std::vector<DeviceUpload> uploads;
    for (std::size_t i = 0; i < o.models.size(); ++i) {
        DeviceUpload u;
        u.device  = o.model_devices.empty() ? static_cast<int>(i) : o.model_devices[i];
        u.model   = loadModel(o.models[i]);
        u.cameras = readCamerasTxt(deviceDir(o.scene, u.device) / "cameras.txt");
        uploads.push_back(std::move(u));
    }
    DistillConfig cfg;
    cfg.epochs         = o.distill_epochs;
    const auto res     = aggregate(std::move(uploads), regions, cfg);
    const fs::path out = o.out.empty() ? fs::path(o.scene) / "global.dgs" : fs::path(o.out);
    saveModel(out, res.model);
    cx.manifest.outputs.push_back(out.string());
    std::cout << "primitives\t" << res.model.size() << '\n';
    for (std::size_t e = 0; e < res.epoch_loss.size(); ++e) {
        std::cout << "distill_epoch_" << e + 1 << '\t' << res.epoch_loss[e] << '\n';
    }
    return kExitOk;
}

// Training and held-out cameras of the scene the model belongs to.
std::vector<Camera>
cameraCandidates(const Options &o) {
    std::vector<fs::path> files;
    if (!o.camera_file.empty()) {
        files.push_back(o.camera_file);
    } else {
        fs::path dir = o.scene.empty() ? fs::absolute(o.model).parent_path() : fs::path(o.scene);
        // A model under device_<m>/ belongs to the scene one level up.
        for (int up = 0; up < 2 && files.empty(); ++up, dir = dir.parent_path()) {
            if (fs::exists(dir / "cameras.txt")) files = {dir / "cameras.txt", dir / "test_cameras.txt"};
        }
        if (files.empty()) throw ContractError("no cameras.txt next to the model; pass --scene or --cameras");
    }
    std::vector<Camera> cams;
    for (const auto &f : files) {
        if (!fs::exists(f)) continue;
        for (auto &c : readCamerasTxt(f)) cams.push_back(std::move(c));
    }
    return cams;
}

int
cmdRender(Context &cx) {
    const Options &o  = cx.o;
    const auto model  = loadModel(o.model);
    const auto cams   = cameraCandidates(o);
    const Camera *cam = nullptr;
    for (const auto &c : cams)
        if (c.id == o.camera_id) cam = &c;
    if (!cam) throw ContractError("no camera with id " + std::to_string(o.camera_id));
    const auto r = render(model, *cam);
    saveImagePpm(o.out, r.color);
    cx.manifest.outputs.push_back(o.out);
    if (!o.depth.empty()) {
        saveDepthPfm(o.depth, r.depth);
        cx.manifest.outputs.push_back(o.depth);
    }
    return kExitOk;
}

int
cmdEval(Context &cx) {
    const Options &o = cx.o;
    const auto model = loadModel(o.model);
    const auto sc    = loadScene(o.scene);
    std::vector<EvalRow> rows;
    if (o.views == "held-out") {
        rows = evaluateViews(model, sc.test_cameras, sc.test_images);
    } else if (o.views == "train") {
        rows = evaluateViews(model, sc.cameras, sc.images);
    } else {
        throw ContractError("--views must be held-out or train");
    }
    cx.manifest.seed = sc.seed;
    std::cout << formatEvalTable(rows);
    return kExitOk;
}

int
cmdAblate(Context &cx) {
    const Options &o = cx.o;
    const Benchmark bench = loadBenchmark(o.scene);
    AblationOptions opts;
    opts.steps       = o.ablate_steps;
    opts.align_steps = o.ablate_align_steps;
    opts.seed        = o.ablate_seed;
    opts.devices     = o.ablate_devices;
    if (opts.devices.empty()) {
        // Every device that has something to train on and to evaluate.
        for (const auto &r : bench.regions) {
            const auto d = bench.device(r.device);
            if (d.data.cameras.size() >= 2 && !d.test_cameras.empty()) opts.devices.push_back(r.device);
        }
    }
    cx.manifest.seed = opts.seed;
    if (o.suite == "depth") {
        std::cout << formatAblationTable(runAblationDepth(bench, opts), "depth_loss", "shape_freeze");
    } else if (o.suite == "scale") {
        std::cout << formatAblationTable(runAblationScale(bench, opts), "global_scale", "local_scale");
    } else {
        throw ContractError("--suite must be depth or scale");
    }
    return kExitOk;
}

fs::path
defaultManifest(const std::string &cmd, const Options &o) {
    const std::string name = cmd + ".manifest.json";
    if (cmd == "synth") return fs::path(o.out) / name;
    if (cmd == "init" || cmd == "train" || cmd == "device") {
        return deviceDir(o.scene, o.device) / (cmd + ".manifest.json");
    }
    if (cmd == "render") return fs::absolute(o.out).parent_path() / name;
    if (cmd == "eval") return fs::absolute(o.model).parent_path() / name;
    return fs::path(o.scene) / name;
}

std::map<std::string, std::string>
resolvedConfig(const CLI::App &sub) {
    std::map<std::string, std::string> out;
    std::istringstream in(sub.config_to_str(true, false));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || line[0] == '[' || line[0] == '#') continue;
        std::string value = line.substr(eq + 1);
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        out[line.substr(0, eq)] = value;
    }
    return out;
}

} // namespace

int
main(int argc, char **argv) {
    Context cx;
    Options &o = cx.o;
    CLI::App app{"Distributed sparse-view Gaussian reconstruction"};
    app.set_version_flag("--version", std::string(DGTR_VERSION));
    app.require_subcommand(1);

    auto common = [&](CLI::App *s) {
        s->add_option("--manifest", o.manifest, "Manifest path (default: next to the outputs)");
        // Expanded before parsing; declared so it shows up in --help.
        s->add_option("--config", "key=value file; command-line flags win");
        return s;
    };
    auto sceneOpt = [&](CLI::App *s) { s->add_option("--scene", o.scene, "Scene directory")->required(); };
    auto initOpts = [&](CLI::App *s) {
        s->add_option("--stride", o.stride, "Pairing stride")->capture_default_str();
        s->add_option("--align-steps", o.align_steps, "Global alignment steps")->capture_default_str();
        s->add_option("--predictions", o.predictions, "Directory of pair_<p>_<q>.dgp files (default: synthetic oracle)");
        s->add_option("--scale-mode", o.scale_mode, "none, global or global+local")->capture_default_str();
    };
    auto trainOpts = [&](CLI::App *s) {
        s->add_option("--steps", o.steps, "Training steps")->capture_default_str();
        s->add_option("--densify-every", o.densify_every, "Densification interval")->capture_default_str();
        s->add_flag("--no-depth-loss", o.no_depth, "Disable the depth correlation loss");
        s->add_flag("--no-shape-freeze", o.no_freeze, "Optimize rotation and scale too");
        s->add_option("--seed", o.train_seed, "Training seed")->capture_default_str();
    };

    auto *synth = common(app.add_subcommand("synth", "Generate a synthetic aerial scene"));
    synth->add_option("--seed", o.seed)->capture_default_str();
    synth->add_option("--gaussians", o.gaussians)->capture_default_str();
    synth->add_option("--cameras", o.cameras)->capture_default_str();
    synth->add_option("--width", o.width)->capture_default_str();
    synth->add_option("--height", o.height)->capture_default_str();
    synth->add_option("--tilt", o.tilt, "Camera tilt in degrees")->capture_default_str();
    synth->add_option("--out", o.out, "Output directory")->required();

    auto *partition = common(app.add_subcommand("partition", "Split the scene into device regions"));
    sceneOpt(partition);
    partition->add_option("--devices", o.devices)->required();

    auto *init = common(app.add_subcommand("init", "Feed-forward initialization of one device"));
    sceneOpt(init);
    init->add_option("--device", o.device)->required();
    initOpts(init);
    init->add_option("--out", o.out, "Output model (default: device_<m>/init.dgs)");

    auto *train = common(app.add_subcommand("train", "Train one device model"));
    sceneOpt(train);
    train->add_option("--device", o.device)->required();
    trainOpts(train);
    train->add_option("--init", o.init, "Initial model (default: device_<m>/init.dgs)");
    train->add_option("--out", o.out, "Output model (default: device_<m>/model.dgs)");

    auto *serve = common(app.add_subcommand("serve", "Aggregation server"));
    sceneOpt(serve);
    serve->add_option("--devices", o.devices)->required();
    serve->add_option("--listen", o.listen, "host:port (port 0 picks a free port)")->required();
    serve->add_option("--distill-epochs", o.distill_epochs)->capture_default_str();
    serve->add_option("--straggler-timeout-ms", o.straggler_ms, "Abort when uploads stall (0 = wait)")
        ->capture_default_str();
    serve->add_option("--out", o.out, "Global model (default: <scene>/global.dgs)");

    auto *device = common(app.add_subcommand("device", "Initialize, train and upload one device"));
    sceneOpt(device);
    device->add_option("--device", o.device)->required();
    device->add_option("--connect", o.connect, "Server host:port")->required();
    initOpts(device);
    trainOpts(device);
    device->add_option("--retries", o.retries)->capture_default_str();
    device->add_flag("--wait", o.wait_done, "Wait for AGGREGATE_DONE");
    device->add_option("--out", o.out, "Trained model copy (default: device_<m>/model.dgs)");

    auto *aggregateCmd = common(app.add_subcommand("aggregate", "Offline filter, merge and distill"));
    sceneOpt(aggregateCmd);
    aggregateCmd->add_option("--models", o.models, "Device models")->required();
    aggregateCmd->add_option("--model-devices", o.model_devices, "Device id of each model (default 0..n-1)");
    aggregateCmd->add_option("--distill-epochs", o.distill_epochs)->capture_default_str();
    aggregateCmd->add_option("--out", o.out, "Global model (default: <scene>/global.dgs)");

    auto *renderCmd = common(app.add_subcommand("render", "Render one camera"));
    renderCmd->add_option("--model", o.model)->required();
    renderCmd->add_option("--camera-id", o.camera_id)->required();
    renderCmd->add_option("--out", o.out, "PPM image")->required();
    renderCmd->add_option("--depth", o.depth, "PFM depth map");
    renderCmd->add_option("--scene", o.scene, "Scene whose cameras to use");
    renderCmd->add_option("--cameras", o.camera_file, "cameras.txt to use");

    auto *evalCmd = common(app.add_subcommand("eval", "PSNR/SSIM table"));
    evalCmd->add_option("--model", o.model)->required();
    sceneOpt(evalCmd);
    evalCmd->add_option("--views", o.views, "held-out or train")->capture_default_str();

    auto *ablate = common(app.add_subcommand("ablate", "Depth or scale ablation on a scene"));
    sceneOpt(ablate);
    ablate->add_option("--suite", o.suite, "depth or scale")->required();
    ablate->add_option("--steps", o.ablate_steps, "Training steps per run")->capture_default_str();
    ablate->add_option("--align-steps", o.ablate_align_steps)->capture_default_str();
    ablate->add_option("--devices", o.ablate_devices, "Devices to average over (default: all usable)");
    ablate->add_option("--seed", o.ablate_seed)->capture_default_str();

    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    try {
        args = cli::expandConfigArgs(args);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "dgtr: " << e.what() << '\n';
        return kExitUsage;
    }

    const std::vector<std::pair<CLI::App *, int (*)(Context &)>> table{
        {synth, cmdSynth},     {partition, cmdPartition},      {init, cmdInit},        {train, cmdTrain},
        {serve, cmdServe},     {device, cmdDevice},            {aggregateCmd, cmdAggregate},
        {renderCmd, cmdRender}, {evalCmd, cmdEval},            {ablate, cmdAblate}};
    CLI::App *sub = app.get_subcommands().front();
    int (*fn)(Context &) = nullptr;
    for (const auto &[s, f] : table)
        if (s == sub) fn = f;

    const std::string cmd = sub->get_name();
    cx.manifest.command   = cmd;
    cx.manifest.config    = resolvedConfig(*sub);
    const auto t0         = std::chrono::steady_clock::now();
    int code              = kExitOk;
    try {
        code = fn(cx);
    } catch (const TransportError &e) {
        cx.manifest.error = e.what();
        code              = kExitTransport;
    } catch (const std::exception &e) {
        // Contract, format and numeric failures all mean the inputs were unusable.
        cx.manifest.error = e.what();
        code              = kExitContract;
    }
    if (code != kExitOk && !cx.manifest.error.empty()) std::cerr << "dgtr " << cmd << ": " << cx.manifest.error << '\n';
    cx.manifest.exit_code = code;
    cx.manifest.seconds   = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
        const fs::path path = o.manifest.empty() ? defaultManifest(cmd, o) : fs::path(o.manifest);
        // A failed run may not have created its output directory; the manifest is then skipped.
        if (o.manifest.empty() && !fs::is_directory(path.parent_path())) return code;
        cli::writeManifest(path, cx.manifest);
    } catch (const std::exception &e) {
        std::cerr << "dgtr " << cmd << ": cannot write manifest: " << e.what() << '\n';
        if (code == kExitOk) code = kExitContract;
    }
    return code;
}
