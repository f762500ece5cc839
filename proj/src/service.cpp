// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/service.hpp"

#include "cogs/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cogs {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& message) { throw RequestError(400, message); }

double number(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!v.is_number()) bad(std::string("'") + key + "' must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) bad(std::string("'") + key + "' must be finite");
    return x;
}

double number_or(const json& j, const char* key, double fallback) { return j.contains(key) ? number(j, key) : fallback; }

int dimension(const json& body, const char* key, int fallback, int max_dimension) {
    if (!body.contains(key)) return fallback;
    const json& v = body.at(key);
    if (!v.is_number_integer()) bad(std::string("'") + key + "' must be an integer");
    const auto n = v.get<long long>();
    if (n < 1 || n > max_dimension) {
        bad(std::string("'") + key + "' must lie in [1, " + std::to_string(max_dimension) + "]");
    }
    return static_cast<int>(n);
}

Vec3 vec3(const json& j, const char* key) {
    const json& v = j.at(key);
    if (!v.is_array() || v.size() != 3) bad(std::string("'") + key + "' must be an array of three numbers");
    Vec3 out;
    for (int d = 0; d < 3; ++d) {
        if (!v[static_cast<std::size_t>(d)].is_number()) bad(std::string("'") + key + "' must hold numbers");
        out[d] = v[static_cast<std::size_t>(d)].get<double>();
    }
    return out;
}

Camera parse_camera(const json& cam, int width, int height) {
    if (!cam.is_object()) bad("'camera' must be an object");
    if (cam.contains("cam_to_world")) {
        const json& m = cam.at("cam_to_world");
        if (!m.is_array() || m.size() != 16) bad("'cam_to_world' must hold 16 numbers (row-major 4x4)");
        Camera c;
        c.width = width;
        c.height = height;
        for (int r = 0; r < 4; ++r) {
            for (int k = 0; k < 4; ++k) {
                const json& v = m[static_cast<std::size_t>(4 * r + k)];
                if (!v.is_number()) bad("'cam_to_world' must hold numbers");
                c.cam_to_world(r, k) = v.get<double>();
            }
        }
        c.fx = number(cam, "fx");
        c.fy = number(cam, "fy");
        c.cx = number_or(cam, "cx", 0.5 * width);
        c.cy = number_or(cam, "cy", 0.5 * height);
        try {
            c.validate();
        } catch (const ConfigError& e) {
            bad(std::string("invalid camera: ") + e.what());
        }
        return c;
    }
    OrbitCamera o;
    o.azimuth = number_or(cam, "azimuth", o.azimuth);
    o.elevation = number_or(cam, "elevation", o.elevation);
    o.radius = number_or(cam, "radius", o.radius);
    if (cam.contains("target")) o.target = vec3(cam, "target");
    o.fov_x = number_or(cam, "fov_x", o.fov_x);
    if (!(o.radius > 0.0)) bad("orbit radius must be positive");
    if (!(o.fov_x > 0.0 && o.fov_x < 3.1)) bad("orbit fov_x must lie in (0, 3.1) radians");
    if (std::abs(o.elevation) >= 0.5 * 3.141592653589793) bad("orbit elevation must lie strictly between -pi/2 and pi/2");
    return orbit_camera(o, width, height);
}

}  // namespace

Camera orbit_camera(const OrbitCamera& o, int width, int height) {
    const Vec3 eye = o.target + o.radius * Vec3(std::cos(o.elevation) * std::sin(o.azimuth), std::sin(o.elevation),
                                                std::cos(o.elevation) * std::cos(o.azimuth));
    return Camera::look_at(eye, o.target, Vec3::UnitY(), width, height, o.fov_x);
}

RenderRequest parse_render_request(const json& body, int max_dimension) {
    if (!body.is_object()) bad("request must be a JSON object");
    static const char* const known[] = {"id", "camera", "time", "controls", "width", "height"};
    for (const auto& [key, value] : body.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) bad("unknown field '" + key + "'");
    }
    RenderRequest r;
    if (body.contains("id")) {
        const json& id = body.at("id");
        if (id.is_string()) {
            r.id = id.get<std::string>();
        } else if (id.is_number_integer()) {
            r.id = std::to_string(id.get<long long>());
        } else {
            bad("'id' must be a string or an integer");
        }
    }
    r.width = dimension(body, "width", r.width, max_dimension);
    r.height = dimension(body, "height", r.height, max_dimension);

    const bool has_time = body.contains("time") && !body.at("time").is_null();
    const bool has_controls = body.contains("controls") && !body.at("controls").is_null();
    if (has_time == has_controls) bad("exactly one of 'time' and 'controls' must be given");
    if (has_time) {
        const double t = number(body, "time");
        if (t < 0.0 || t > 1.0) bad("'time' must lie in [0, 1]");
        r.time = t;
    } else {
        const json& c = body.at("controls");
        if (!c.is_array()) bad("'controls' must be an array of numbers");
        std::vector<double> sigma;
        for (const json& v : c) {
            if (!v.is_number()) bad("'controls' must be an array of numbers");
            const double s = v.get<double>();
            if (!(s >= 0.0 && s <= 1.0)) bad("every control value must lie in [0, 1]");
            sigma.push_back(s);
        }
        r.controls = std::move(sigma);
    }
    if (!body.contains("camera")) bad("'camera' is required");
    try {
        r.camera = parse_camera(body.at("camera"), r.width, r.height);
    } catch (const json::exception& e) {
        bad(std::string("malformed camera: ") + e.what());
    }
    return r;
}

json model_info(const Model& model) {
    json j;
    j["gaussian_count"] = model.cloud().count();
    j["attribute_names"] = model.attribute_names;
    j["attribute_count"] = model.attribute_names.size();
    j["controllable"] = model.rig.has_value();
    j["stage"] = to_string(model.stage);
    if (model.times.empty()) {
        j["time_range"] = json::array({0.0, 1.0});
    } else {
        j["time_range"] = json::array({model.times.front(), model.times.back()});
    }
    json sigma = json::array();
    if (model.rig) {
        for (const ControlAttribute& a : model.rig->attributes) {
            sigma.push_back({{"name", a.name}, {"times", a.times}, {"sigma", a.signal.sigma}});
        }
    }
    j["signals"] = std::move(sigma);
    return j;
}

RenderService::RenderService(Model model, int max_dimension) : model_(std::move(model)), max_dimension_(max_dimension) {
    model_.validate();
    if (max_dimension_ < 1) throw ConfigError("maximum render dimension must be positive");
}

Image RenderService::render(const RenderRequest& request) const {
    const Vec3 background = model_.config.background();
    if (request.controls) {
        if (!model_.rig) {
            throw RequestError(409, "model stage '" + to_string(model_.stage) + "' has no control rig");
        }
        if (request.controls->size() != model_.rig->attribute_count()) {
            throw RequestError(400, "expected " + std::to_string(model_.rig->attribute_count()) + " control values, got " +
                                        std::to_string(request.controls->size()));
        }
        std::lock_guard<std::mutex> lock(executor_);
        return render_with_controls(model_.cloud(), *model_.rig, *request.controls, request.camera, background);
    }
    const double t = request.time.value_or(0.0);
    std::lock_guard<std::mutex> lock(executor_);
    return cogs::render(deform(model_.cloud(), model_.deformation(), t), request.camera, RenderMode::color(), background)
        .image;
}

std::vector<std::uint8_t> RenderService::render_png(const RenderRequest& request) const {
    return encode_png(render(request));
}

}  // namespace cogs
