// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

// cogs: command line front end for every pipeline stage and the render service.

#include "cogs/errors.hpp"
#include "cogs/model.hpp"
#include "cogs/server.hpp"
#include "cogs/service.hpp"
#include "cogs/toy.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace cogs {
namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("cogs");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* level = std::getenv("COGS_LOG")) {
        const auto parsed = spdlog::level::from_str(level);
        // from_str maps unknown strings to off; keep info unless the user really asked for off.
        if (parsed != spdlog::level::off || std::string(level) == "off") spdlog::set_level(parsed);
    }
}

std::ofstream open_log(const std::string& path, const char* header) {
    std::ofstream out;
    if (path.empty()) return out;
    out.open(path);
    if (!out) throw std::runtime_error("cannot write log file " + path);
    out << header << '\n';
    return out;
}

void write_values(const std::string& path, const std::vector<double>& losses) {
    std::ofstream out = open_log(path, "iter,loss");
    if (!out.is_open()) return;
    char buf[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
        out << buf;
    }
}

std::vector<double> parse_controls(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw InputError("bad control value '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw InputError("--controls needs at least one value");
    return out;
}

// ---------------------------------------------------------------------------

struct ToyArgs {
    std::string kind = "dynamic";
    std::string out;
    int width = 64;
    int height = 64;
    std::uint64_t seed = 7;
};

void run_make_toy(const ToyArgs& a) {
    const ToyScene s = make_toy(a.kind, ToyOptions{a.width, a.height, a.seed});
    write_dataset(a.out, s.train);
    write_dataset(a.out, s.test);
    if (s.masks.attribute_count() > 0) write_masks(a.out, s.train, s.masks);
    spdlog::info("wrote {} toy scene to {} ({} train / {} test frames)", a.kind, a.out, s.train.frames.size(),
                 s.test.frames.size());
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string split = "train";
    std::string resume;
    std::string log;
    long checkpoint_every = 0;
    long stop_at = -1;
    bool print_config = false;
    std::uint64_t seed = 0;
    TrainConfig config;
    std::vector<std::pair<std::string, CLI::Option*>> config_options;
};

void save_trainer(const fs::path& path, const DynamicTrainer& t, const TrainArgs& a, const Dataset& data) {
    Model m;
    m.stage = Stage::dynamic;
    m.config = t.config();
    m.seed = a.seed;
    m.times = data.times();
    m.state = t.state();
    save_model(path, m);
}

void run_train(TrainArgs& a) {
    TrainConfig config = a.config;
    std::optional<Model> resumed;
    if (!a.resume.empty()) {
        resumed = load_model(a.resume);
        if (resumed->stage != Stage::dynamic) throw StateError("can only resume a dynamic checkpoint");
        // Flags given explicitly override the saved configuration (e.g. a longer schedule).
        json saved = config_to_json(resumed->config);
        const json given = config_to_json(a.config);
        for (const auto& [name, opt] : a.config_options) {
            if (opt->count() > 0) saved[name] = given[name];
        }
        config = config_from_json(saved);
        a.seed = resumed->seed;
    }
    config.validate();
    if (a.print_config) {
        std::printf("%s\n", config_to_json(config).dump(2).c_str());
        return;
    }
    const Dataset data = load_dataset(a.data, a.split, config.background());
    std::ofstream log = open_log(a.log, kLossLogHeader);
    std::optional<DynamicTrainer> trainer;
    if (resumed) {
        trainer.emplace(data, config, std::move(resumed->state));
        spdlog::info("resuming at iteration {} of {}", trainer->iteration(), config.total());
    } else {
        trainer.emplace(data, config, a.seed);
        spdlog::info("training {} frames for {} iterations (seed {})", data.frames.size(), config.total(), a.seed);
    }
    const long stop = a.stop_at >= 0 ? std::min(a.stop_at, config.total()) : config.total();
    while (trainer->iteration() < stop) {
        const LossRow row = trainer->step();
        if (log.is_open()) write_loss_row(log, row);
        if (row.iter % 500 == 0 || trainer->iteration() == stop) {
            spdlog::info("iter {:6d}  loss {:.6f}  photometric {:.6f}  gaussians {}", row.iter, row.total,
                         row.photometric, trainer->state().cloud.count());
        }
        if (a.checkpoint_every > 0 && row.iter % a.checkpoint_every == 0 && !trainer->finished()) {
            save_trainer(a.out, *trainer, a, data);
        }
    }
    save_trainer(a.out, *trainer, a, data);
    spdlog::info("saved dynamic model at iteration {} to {}", trainer->iteration(), a.out);
}

struct MaskArgs {
    std::string model;
    std::string data;
    std::string out;
    std::string split = "train";
    std::string log;
    std::uint64_t seed = 0;
    MaskLearnConfig config;
};

void run_learn_mask(const MaskArgs& a) {
    Model m = load_model(a.model);
    const Dataset data = load_dataset(a.data, a.split, m.config.background());
    const MaskSupervision sup = load_masks(a.data, data);
    if (sup.attribute_count() == 0) throw IngestionError("no mask attributes under " + a.data + "/masks");
    std::vector<double> losses;
    m.state.cloud = learn_masks(m.cloud(), m.deformation(), data, sup, a.config, &losses);
    m.attribute_names = sup.attribute_names;
    m.rig.reset();
    m.stage = Stage::masked;
    write_values(a.log, losses);
    save_model(a.out, m);
    spdlog::info("learned masks for {} attributes, final loss {:.6g}; saved to {}", sup.attribute_count(),
                 losses.empty() ? 0.0 : losses.back(), a.out);
}

struct SignalArgs {
    std::string model;
    std::string out;
    std::uint64_t seed = 3;
    RigOptions options;
};

void run_extract_signal(const SignalArgs& a) {
    Model m = load_model(a.model);
    if (m.attribute_names.empty()) throw StateError("model has no masks; run learn-mask first");
    Rng rng(a.seed);
    m.rig = build_control_rig(m.cloud(), m.deformation(), m.times, m.attribute_names, m.config.scene_box(), a.options,
                              rng);
    m.stage = Stage::controlled;
    save_model(a.out, m);
    for (const ControlAttribute& attr : m.rig->attributes) {
        const Vec3& d = attr.signal.direction;
        std::printf("%s: %zu control points, direction (%.4f, %.4f, %.4f), range %.4f\n", attr.name.c_str(),
                    attr.control_set.size(), d.x(), d.y(), d.z(), attr.signal.end_proj - attr.signal.start_proj);
        for (std::size_t k = 0; k < attr.times.size(); ++k) {
            std::printf("  t=%.4f sigma=%.4f\n", attr.times[k], attr.signal.sigma[k]);
        }
    }
}

struct ControlArgs {
    std::string model;
    std::string data;
    std::string out;
    std::string split = "train";
    std::string log;
    std::uint64_t seed = 1;
    ControlTrainConfig config;
};

void run_train_control(const ControlArgs& a) {
    Model m = load_model(a.model);
    if (!m.rig) throw StateError("model has no control rig; run extract-signal first");
    const Dataset data = load_dataset(a.data, a.split, m.config.background());
    ControlTrainConfig cfg = a.config;
    cfg.background = m.config.background();
    cfg.seed = a.seed;
    std::vector<double> losses;
    train_control(m.cloud(), m.deformation(), *m.rig, data, cfg, &losses);
    write_values(a.log, losses);
    save_model(a.out, m);
    spdlog::info("trained control networks, final loss {:.6g}; saved to {}", losses.empty() ? 0.0 : losses.back(),
                 a.out);
}

struct FinetuneArgs {
    std::string model;
    std::string data;
    std::string out;
    std::string split = "train";
    std::string log;
    std::uint64_t seed = 2;
    FinetuneConfig config;
};

void run_finetune(const FinetuneArgs& a) {
    Model m = load_model(a.model);
    if (!m.rig) throw StateError("model has no control rig; run extract-signal first");
    const Dataset data = load_dataset(a.data, a.split, m.config.background());
    FinetuneConfig cfg = a.config;
    cfg.background = m.config.background();
    cfg.seed = a.seed;
    std::vector<double> losses;
    finetune_all(m.state.cloud, *m.rig, data, cfg, &losses);
    m.stage = Stage::finetuned;
    write_values(a.log, losses);
    save_model(a.out, m);
    spdlog::info("finetuned model, final loss {:.6g}; saved to {}", losses.empty() ? 0.0 : losses.back(), a.out);
}

struct CameraArgs {
    std::string data;
    std::string split = "test";
    int frame = -1;
    OrbitCamera orbit;
    std::vector<double> target;
    int width = 256;
    int height = 256;
};

void add_camera_options(CLI::App* cmd, CameraArgs& c) {
    cmd->add_option("--data", c.data, "dataset root (with --frame)");
    cmd->add_option("--split", c.split, "dataset split (with --frame)");
    cmd->add_option("--frame", c.frame, "use the camera of this frame index; size follows the frame");
    cmd->add_option("--azimuth", c.orbit.azimuth, "orbit azimuth in radians");
    cmd->add_option("--elevation", c.orbit.elevation, "orbit elevation in radians");
    cmd->add_option("--radius", c.orbit.radius, "orbit radius");
    cmd->add_option("--fov", c.orbit.fov_x, "horizontal field of view in radians");
    cmd->add_option("--target", c.target, "orbit target x y z")->expected(3);
    cmd->add_option("--width", c.width, "image width (orbit camera)");
    cmd->add_option("--height", c.height, "image height (orbit camera)");
}

Camera resolve_camera(const CameraArgs& c, const Model& m) {
    if (c.frame >= 0) {
        if (c.data.empty()) throw InputError("--frame needs --data");
        const Dataset data = load_dataset(c.data, c.split, m.config.background());
        if (static_cast<std::size_t>(c.frame) >= data.frames.size()) {
            throw InputError("frame " + std::to_string(c.frame) + " out of range (" +
                             std::to_string(data.frames.size()) + " frames)");
        }
        return data.frames[static_cast<std::size_t>(c.frame)].camera;
    }
    OrbitCamera o = c.orbit;
    if (!c.target.empty()) o.target = Vec3(c.target[0], c.target[1], c.target[2]);
    return orbit_camera(o, c.width, c.height);
}

struct RenderArgs {
    std::string model;
    std::string out;
    std::optional<double> time;
    std::string controls;
    std::uint64_t seed = 0;
    int max_dim = 4096;
    CameraArgs camera;
};

void run_render(const RenderArgs& a) {
    const RenderService service(load_model(a.model), a.max_dim);
    RenderRequest r;
    r.camera = resolve_camera(a.camera, service.model());
    r.width = r.camera.width;
    r.height = r.camera.height;
    if (r.width > a.max_dim || r.height > a.max_dim) throw InputError("image size exceeds --max-dim");
    if (a.time) {
        if (*a.time < 0.0 || *a.time > 1.0) throw InputError("--time must lie in [0, 1]");
        r.time = a.time;
    } else {
        r.controls = parse_controls(a.controls);
        for (double s : *r.controls) {
            if (!(s >= 0.0 && s <= 1.0)) throw InputError("control values must lie in [0, 1]");
        }
    }
    std::vector<std::uint8_t> png;
    try {
        png = service.render_png(r);
    } catch (const RequestError& e) {
        throw InputError(e.what());
    }
    std::ofstream out(a.out, std::ios::binary);
    out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    if (!out) throw std::runtime_error("cannot write " + a.out);
    spdlog::info("wrote {}x{} render to {}", r.width, r.height, a.out);
}

struct MetricsArgs {
    std::string model;
    std::string data;
    std::string split = "test";
    std::string mode = "time";
    std::uint64_t seed = 0;
};

void run_metrics(const MetricsArgs& a) {
    const Model m = load_model(a.model);
    const Dataset data = load_dataset(a.data, a.split, m.config.background());
    const bool controlled = a.mode == "controls";
    if (controlled && !m.rig) throw StateError("model has no control rig");
    std::printf("%-16s %8s %9s %8s\n", "frame", "time", "psnr", "ssim");
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (const Frame& f : data.frames) {
        Image img;
        if (controlled) {
            img = render_with_controls(m.cloud(), *m.rig, m.rig->sigmas_at(f.time), f.camera, m.config.background());
        } else {
            img = render(deform(m.cloud(), m.deformation(), f.time), f.camera, RenderMode::color(),
                         m.config.background())
                      .image;
        }
        const double p = psnr(img, f.image);
        const double s = ssim(img, f.image);
        psnr_sum += p;
        ssim_sum += s;
        std::printf("%-16s %8.4f %9.4f %8.5f\n", f.id.c_str(), f.time, p, s);
    }
    const double n = static_cast<double>(data.frames.size());
    std::printf("%-16s %8s %9.4f %8.5f\n", "mean", "", psnr_sum / n, ssim_sum / n);
}

struct ServeArgs {
    std::string model;
    std::string bind = "127.0.0.1";
    unsigned short port = 8080;
    int max_dim = 1024;
    std::uint64_t seed = 0;
};

void run_serve(const ServeArgs& a) {
    // Block the stop signals before any thread starts so only the waiter sees them.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    const RenderService service(load_model(a.model), a.max_dim);
    HttpServer server(service, a.bind, a.port);
    spdlog::info("serving {} ({} Gaussians, stage {}) on http://{}:{}", a.model, service.model().cloud().count(),
                 to_string(service.model().stage), a.bind, server.port());
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&signals, &sig);
        spdlog::info("signal {} received, stopping", sig);
        server.stop();
    });
    server.run();
    // run() also returns when the server stops for another reason; wake the waiter.
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
}

// ---------------------------------------------------------------------------

int dispatch(int argc, char** argv) {
    CLI::App app{"cogs: dynamic and controllable Gaussian splatting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "cogs 0.1.0");

    ToyArgs toy;
    auto* make_toy_cmd = app.add_subcommand("make-toy", "write a generated toy scene as a dataset");
    make_toy_cmd->add_option("--kind", toy.kind, "static, dynamic or control")
        ->check(CLI::IsMember({"static", "dynamic", "control"}));
    make_toy_cmd->add_option("--out", toy.out, "output dataset root")->required();
    make_toy_cmd->add_option("--width", toy.width, "image width")->check(CLI::PositiveNumber);
    make_toy_cmd->add_option("--height", toy.height, "image height")->check(CLI::PositiveNumber);
    make_toy_cmd->add_option("--seed", toy.seed, "generator seed");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "fit a dynamic model to a dataset");
    train_cmd->add_option("--data", train.data, "dataset root")->required();
    train_cmd->add_option("--out", train.out, "output checkpoint")->required();
    train_cmd->add_option("--split", train.split, "dataset split");
    train_cmd->add_option("--seed", train.seed, "random seed");
    train_cmd->add_option("--resume", train.resume, "continue from this dynamic checkpoint");
    train_cmd->add_option("--log", train.log, "per-iteration loss CSV");
    train_cmd->add_option("--checkpoint-every", train.checkpoint_every, "also save every N iterations");
    train_cmd->add_option("--stop-at", train.stop_at, "save and exit after this many iterations (resume later)");
    train_cmd->add_flag("--print-config", train.print_config, "print the resolved configuration and exit");
    train.config.visit([&](const char* name, auto& field) {
        std::string flags = std::string("--") + name;
        std::string dashed = name;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        if (dashed != name) flags += ",--" + dashed;
        if (std::string(name) == "total_iters") flags += ",--iters";
        train.config_options.emplace_back(name, train_cmd->add_option(flags, field)->group("Training configuration"));
    });

    MaskArgs mask;
    auto* mask_cmd = app.add_subcommand("learn-mask", "learn per-Gaussian attribute masks from 2D labels");
    mask_cmd->add_option("--model", mask.model, "input checkpoint")->required();
    mask_cmd->add_option("--data", mask.data, "dataset root with masks/<attribute>/<frame>.png")->required();
    mask_cmd->add_option("--out", mask.out, "output checkpoint")->required();
    mask_cmd->add_option("--split", mask.split, "dataset split");
    mask_cmd->add_option("--log", mask.log, "per-iteration loss CSV");
    mask_cmd->add_option("--seed", mask.seed, "random seed (mask learning is deterministic)");
    mask_cmd->add_option("--iters", mask.config.iters, "iterations");
    mask_cmd->add_option("--lr", mask.config.lr, "learning rate before the switch");
    mask_cmd->add_option("--lr-after", mask.config.lr_after, "learning rate after the switch");
    mask_cmd->add_option("--lr-switch", mask.config.lr_switch, "iteration of the learning rate switch");

    SignalArgs signal;
    auto* signal_cmd = app.add_subcommand("extract-signal", "pick control points and extract control signals");
    signal_cmd->add_option("--model", signal.model, "masked checkpoint")->required();
    signal_cmd->add_option("--out", signal.out, "output checkpoint")->required();
    signal_cmd->add_option("--seed", signal.seed, "seed for the control network initialization");
    signal_cmd->add_option("--top-fraction", signal.options.control_set.top_fraction,
                           "fraction of an attribute's Gaussians kept as control points");
    signal_cmd->add_option("--hidden-width", signal.options.hidden_width, "control network width");
    signal_cmd->add_option("--hidden-layers", signal.options.hidden_layers, "control network hidden layers");
    signal_cmd->add_option("--sigma-freqs", signal.options.sigma_freqs, "encoding frequencies of sigma");
    signal_cmd->add_option("--position-freqs", signal.options.position_freqs, "encoding frequencies of positions");

    ControlArgs control;
    auto* control_cmd = app.add_subcommand("train-control", "re-align the control networks to the dynamic model");
    control_cmd->add_option("--model", control.model, "controlled checkpoint")->required();
    control_cmd->add_option("--data", control.data, "dataset root")->required();
    control_cmd->add_option("--out", control.out, "output checkpoint")->required();
    control_cmd->add_option("--split", control.split, "dataset split");
    control_cmd->add_option("--log", control.log, "per-iteration loss CSV");
    control_cmd->add_option("--seed", control.seed, "frame order seed");
    control_cmd->add_option("--iters", control.config.iters, "iterations");
    control_cmd->add_option("--lr-start", control.config.lr_start, "initial learning rate");
    control_cmd->add_option("--lr-end", control.config.lr_end, "final learning rate");
    control_cmd->add_option("--lambda-dssim", control.config.lambda_dssim, "D-SSIM weight");
    control_cmd->add_option("--lambda-offset", control.config.lambda_offset, "offset regression weight");

    FinetuneArgs finetune;
    auto* finetune_cmd = app.add_subcommand("finetune", "jointly refine the cloud and the control networks");
    finetune_cmd->add_option("--model", finetune.model, "controlled checkpoint")->required();
    finetune_cmd->add_option("--data", finetune.data, "dataset root")->required();
    finetune_cmd->add_option("--out", finetune.out, "output checkpoint")->required();
    finetune_cmd->add_option("--split", finetune.split, "dataset split");
    finetune_cmd->add_option("--log", finetune.log, "per-iteration loss CSV");
    finetune_cmd->add_option("--seed", finetune.seed, "frame order seed");
    finetune_cmd->add_option("--iters", finetune.config.iters, "iterations");
    finetune_cmd->add_option("--lr", finetune.config.lr, "learning rate");
    finetune_cmd->add_option("--lambda-dssim", finetune.config.lambda_dssim, "D-SSIM weight");

    RenderArgs rend;
    auto* render_cmd = app.add_subcommand("render", "render a checkpoint at a time or under control values");
    render_cmd->add_option("--model", rend.model, "checkpoint")->required();
    render_cmd->add_option("--out", rend.out, "output PNG")->required();
    auto* time_opt = render_cmd->add_option("--time", rend.time, "render the dynamic model at this time");
    auto* controls_opt = render_cmd->add_option("--controls", rend.controls, "comma-separated control values");
    time_opt->excludes(controls_opt);
    render_cmd->add_option("--seed", rend.seed, "random seed (rendering is deterministic)");
    render_cmd->add_option("--max-dim", rend.max_dim, "largest accepted image side");
    add_camera_options(render_cmd, rend.camera);
    render_cmd->callback([&] {
        if (time_opt->count() == 0 && controls_opt->count() == 0) {
            throw CLI::RequiredError("one of --time and --controls");
        }
    });

    MetricsArgs metrics;
    auto* metrics_cmd = app.add_subcommand("metrics", "PSNR and SSIM of a checkpoint over a dataset split");
    metrics_cmd->add_option("--model", metrics.model, "checkpoint")->required();
    metrics_cmd->add_option("--data", metrics.data, "dataset root")->required();
    metrics_cmd->add_option("--split", metrics.split, "dataset split");
    metrics_cmd->add_option("--mode", metrics.mode, "time: dynamic renders; controls: extracted signals")
        ->check(CLI::IsMember({"time", "controls"}));
    metrics_cmd->add_option("--seed", metrics.seed, "random seed (evaluation is deterministic)");

    ServeArgs serve;
    auto* serve_cmd = app.add_subcommand("serve", "serve a checkpoint over HTTP and WebSocket");
    serve_cmd->add_option("--model", serve.model, "checkpoint")->required();
    serve_cmd->add_option("--bind", serve.bind, "bind address");
    serve_cmd->add_option("--port", serve.port, "port (0 picks a free one)");
    serve_cmd->add_option("--max-dim", serve.max_dim, "largest accepted image side")->check(CLI::PositiveNumber);
    serve_cmd->add_option("--seed", serve.seed, "random seed (rendering is deterministic)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        if (*make_toy_cmd) run_make_toy(toy);
        if (*train_cmd) run_train(train);
        if (*mask_cmd) run_learn_mask(mask);
        if (*signal_cmd) run_extract_signal(signal);
        if (*control_cmd) run_train_control(control);
        if (*finetune_cmd) run_finetune(finetune);
        if (*render_cmd) run_render(rend);
        if (*metrics_cmd) run_metrics(metrics);
        if (*serve_cmd) run_serve(serve);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kRuntimeError;
    }
    return 0;
}

}  // namespace
}  // namespace cogs

int main(int argc, char** argv) {
    cogs::setup_logging();
    return cogs::dispatch(argc, argv);
}
