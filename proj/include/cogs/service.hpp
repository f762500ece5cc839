// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cogs {

/// A rejected request; status is the HTTP code to answer with (400 or 409).
struct RequestError : std::runtime_error {
    int status;
    RequestError(int status, const std::string& message) : std::runtime_error(message), status(status) {}
};

/// Camera on a sphere around target, looking at it with +y up. Angles in radians.
struct OrbitCamera {
    double azimuth = 0.0;    // about +y, zero looks from +z
    double elevation = 0.0;  // above the xz plane
    double radius = 3.5;
    Vec3 target = Vec3::Zero();
    double fov_x = 0.8;
};

/// eye = target + radius * (cos(el) sin(az), sin(el), cos(el) cos(az)).
Camera orbit_camera(const OrbitCamera& orbit, int width, int height);

struct RenderRequest {
    std::string id;  // echoed on the stream endpoint
    Camera camera;
    std::optional<double> time;
    std::optional<std::vector<double>> controls;
    int width = 256;
    int height = 256;
};

/// Throws RequestError(400) for malformed JSON values, a missing camera, both
/// or neither of time/controls, values outside [0, 1] and sizes outside [1, max_dimension].
RenderRequest parse_render_request(const nlohmann::json& body, int max_dimension = 1024);

/// gaussian_count, attribute names and count, time range and stage.
nlohmann::json model_info(const Model& model);

/// Read-only model plus a single render executor: renders are serialized
/// through one mutex, connections may call in from any thread.
class RenderService {
public:
    explicit RenderService(Model model, int max_dimension = 1024);

    const Model& model() const { return model_; }
    int max_dimension() const { return max_dimension_; }
    nlohmann::json info() const { return model_info(model_); }

    /// Throws RequestError(409) for controls on a model without a rig and
    /// RequestError(400) for a control vector of the wrong length.
    Image render(const RenderRequest& request) const;
    std::vector<std::uint8_t> render_png(const RenderRequest& request) const;

private:
    Model model_;
    int max_dimension_;
    mutable std::mutex executor_;
};

}  // namespace cogs
