// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/toy.hpp"

#include "cogs/errors.hpp"
#include "cogs/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace cogs {

Vec3 ToyMotion::offset(double t) const {
    if (t_end <= t_start) return t >= t_start ? displacement : Vec3::Zero();
    return displacement * std::clamp((t - t_start) / (t_end - t_start), 0.0, 1.0);
}

GaussianCloud ToyScene::gt_at(double t) const {
    GaussianCloud c = gt;
    for (std::size_t i = 0; i < c.count(); ++i) c.positions[i] += motions[static_cast<std::size_t>(group[i])].offset(t);
    return c;
}

std::vector<std::size_t> ToyScene::members(int g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < group.size(); ++i) {
        if (group[i] == g) out.push_back(i);
    }
    return out;
}

Image ToyScene::coverage(int g, const Camera& camera, double t) const {
    if (g < 0 || g >= static_cast<int>(motions.size())) throw ConfigError("coverage: unknown group");
    GaussianCloud c = gt_at(t);
    c.init_masks(static_cast<int>(motions.size()));
    for (std::size_t i = 0; i < c.count(); ++i) c.mask(i)[static_cast<std::size_t>(group[i])] = 40.0;
    Image m = render(c, camera, RenderMode::mask(g), Vec3::Zero()).image;
    for (double& v : m.data) v = v > 0.5 ? 1.0 : 0.0;
    return m;
}

namespace {

constexpr double kFov = 0.8;
constexpr double kRadius = 3.5;

Vec4 random_rotation(Rng& rng) {
    Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
    return q / q.norm();
}

void add_cluster(ToyScene& s, int g, const Vec3& center, double spread, std::size_t n, double min_scale,
                 double max_scale, Rng& rng) {
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = s.gt.count();
        s.gt.resize(i + 1);
        for (int d = 0; d < 3; ++d) s.gt.positions[i][d] = center[d] + uniform(rng, -spread, spread);
        s.gt.rotations[i] = random_rotation(rng);
        for (int d = 0; d < 3; ++d) s.gt.log_scales[i][d] = std::log(uniform(rng, min_scale, max_scale));
        s.gt.opacity_logits[i] = logit(uniform(rng, 0.6, 0.95));
        auto sh = s.gt.sh(i);
        for (int c = 0; c < 3; ++c) sh[static_cast<std::size_t>(c)] = sh_dc_from_color(uniform(rng, 0.05, 0.85));
        s.group.push_back(g);
    }
}

Camera orbit_camera(double azimuth, double elevation, const ToyOptions& o) {
    const Vec3 eye(kRadius * std::cos(elevation) * std::sin(azimuth), kRadius * std::sin(elevation),
                   kRadius * std::cos(elevation) * std::cos(azimuth));
    return Camera::look_at(eye, Vec3::Zero(), Vec3::UnitY(), o.width, o.height, kFov);
}

std::string frame_id(const char* prefix, std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03zu", prefix, k);
    return buf;
}

void add_frame(const ToyScene& s, Dataset& ds, const std::string& id, const Camera& cam, double t) {
    Frame f;
    f.id = id;
    f.camera = cam;
    f.time = f.raw_time = t;
    f.image = render(s.gt_at(t), cam, RenderMode::color(), s.background).image;
    ds.frames.push_back(std::move(f));
}

void init_datasets(ToyScene& s, const ToyOptions& o) {
    for (Dataset* ds : {&s.train, &s.test}) {
        ds->width = o.width;
        ds->height = o.height;
    }
    s.train.split = "train";
    s.test.split = "test";
}

/// Monocular capture: one camera per training time sweeping an arc; held-out
/// frames at the midpoints between every other pair of training times.
void monocular_capture(ToyScene& s, const ToyOptions& o, std::size_t steps) {
    init_datasets(s, o);
    const double arc = 50.0 * std::numbers::pi / 180.0;
    auto azimuth = [&](double t) { return -arc + 2.0 * arc * t; };
    auto elevation = [&](double t) { return 0.15 + 0.1 * std::sin(2.0 * std::numbers::pi * t); };
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
        add_frame(s, s.train, frame_id("r", k), orbit_camera(azimuth(t), elevation(t), o), t);
    }
    for (std::size_t k = 0; k + 1 < steps; k += 2) {
        const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(steps - 1);
        add_frame(s, s.test, frame_id("t", k / 2), orbit_camera(azimuth(t), elevation(t), o), t);
    }
}

}  // namespace

ToyScene make_static_toy(const ToyOptions& o) {
    ToyScene s;
    s.kind = "static";
    s.gt.sh_degree = 1;
    s.motions = {ToyMotion{}};
    Rng rng(o.seed);
    add_cluster(s, 0, Vec3::Zero(), 0.6, 20, 0.06, 0.18, rng);
    init_datasets(s, o);
    for (std::size_t k = 0; k < 8; ++k) {
        const double az = 2.0 * std::numbers::pi * static_cast<double>(k) / 8.0;
        const double el = (k % 2 == 0) ? 0.35 : -0.2;
        add_frame(s, s.train, frame_id("r", k), orbit_camera(az, el, o), 0.0);
    }
    for (std::size_t k = 0; k < 4; ++k) {
        const double az = 2.0 * std::numbers::pi * (static_cast<double>(k) + 0.5) / 4.0;
        add_frame(s, s.test, frame_id("t", k), orbit_camera(az, 0.1, o), 0.0);
    }
    return s;
}

ToyScene make_dynamic_toy(const ToyOptions& o) {
    ToyScene s;
    s.kind = "dynamic";
    s.gt.sh_degree = 1;
    s.motions = {ToyMotion{}, ToyMotion{Vec3(0.0, 0.6, 0.0), 0.0, 1.0}};
    Rng rng(o.seed);
    add_cluster(s, 0, Vec3(-0.45, 0.0, 0.0), 0.25, 10, 0.06, 0.15, rng);
    add_cluster(s, 1, Vec3(0.4, -0.3, 0.0), 0.2, 10, 0.06, 0.15, rng);
    monocular_capture(s, o, 20);
    return s;
}

ToyScene make_control_toy(const ToyOptions& o) {
    ToyScene s;
    s.kind = "control";
    s.gt.sh_degree = 1;
    s.motions = {ToyMotion{}, ToyMotion{Vec3(0.0, 0.45, 0.0), 0.0, 0.5}, ToyMotion{Vec3(0.25, 0.35, 0.0), 0.5, 1.0}};
    s.part_names = {"part_a", "part_b"};
    Rng rng(o.seed);
    add_cluster(s, 0, Vec3(0.0, -0.45, 0.0), 0.3, 8, 0.07, 0.15, rng);
    add_cluster(s, 1, Vec3(-0.55, 0.1, 0.0), 0.15, 6, 0.05, 0.11, rng);
    add_cluster(s, 2, Vec3(0.5, 0.05, 0.0), 0.15, 6, 0.05, 0.11, rng);
    monocular_capture(s, o, 20);

    // One labeled frame per part, in the middle of its motion window.
    s.masks.attribute_names = s.part_names;
    s.masks.masks.resize(2);
    for (int part = 1; part <= 2; ++part) {
        const ToyMotion& m = s.motions[static_cast<std::size_t>(part)];
        const double t_mid = 0.5 * (m.t_start + m.t_end);
        std::size_t best = 0;
        for (std::size_t k = 0; k < s.train.frames.size(); ++k) {
            if (std::abs(s.train.frames[k].time - t_mid) < std::abs(s.train.frames[best].time - t_mid)) best = k;
        }
        const Frame& f = s.train.frames[best];
        s.masks.masks[static_cast<std::size_t>(part - 1)].emplace_back(best, s.coverage(part, f.camera, f.time));
    }
    return s;
}

ToyScene make_toy(const std::string& kind, const ToyOptions& o) {
    if (kind == "static") return make_static_toy(o);
    if (kind == "dynamic") return make_dynamic_toy(o);
    if (kind == "control") return make_control_toy(o);
    throw ConfigError("unknown toy scene '" + kind + "' (expected static, dynamic or control)");
}

}  // namespace cogs
