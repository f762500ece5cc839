// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/gaussian.hpp"
#include "cogs/image.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace cogs {

struct RenderSettings {
    double near_plane = 0.01;          // camera-space depth below which Gaussians are culled
    double alpha_clamp = 0.999;
    double transmittance_floor = 1e-4;  // compositing stops once T drops below this
    double cov2d_dilation = 0.3;       // px^2 added to the projected covariance diagonal
    double cutoff_sigma = 3.0;         // splat box half-width in standard deviations
    int workers = 0;                   // 0: default_worker_count()
};

/// Color mode composites SH colors; mask mode composites a constant 1 with
/// per-Gaussian alpha softmax(mask_logits)[attribute] * opacity.
struct RenderMode {
    enum class Kind { color, mask } kind = Kind::color;
    int attribute = 0;

    static RenderMode color() { return {}; }
    static RenderMode mask(int attribute) { return {Kind::mask, attribute}; }
    bool is_mask() const { return kind == Kind::mask; }
};

struct Projection {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();  // includes the dilation
    double view_depth = 0.0;
};

/// Projects a world-space Gaussian. Returns nullopt when its camera-space depth
/// is below settings.near_plane.
std::optional<Projection> project_gaussian(const Vec3& mean, const Mat3& sigma,
                                           const Camera& camera,
                                           const RenderSettings& settings = {});

struct Projected2DGaussian {
    Vec2 mean2d;
    Mat2 cov2d;
    double view_depth;
    Vec3 color;  // mask mode: (1, 1, 1)
    double alpha_scale;
};

/// Projection plus color and alpha for every surviving Gaussian, indexed like the cloud.
std::vector<std::optional<Projected2DGaussian>> project_cloud(const GaussianCloud& cloud,
                                                              const Camera& camera,
                                                              RenderMode mode,
                                                              const RenderSettings& settings = {});

struct RenderOutput {
    Image image;  // 3 channels in color mode, 1 in mask mode
    std::vector<double> final_transmittance;
    std::vector<int> per_pixel_contrib_count;
};

/// Front-to-back compositing of the depth-sorted splats. In mask mode the
/// background is 0 and the image has one channel.
RenderOutput render(const GaussianCloud& cloud, const Camera& camera, RenderMode mode,
                    const Vec3& background, const RenderSettings& settings = {});

/// Per-parameter gradients, laid out like GaussianCloud.
struct CloudGradients {
    std::vector<Vec3> positions;
    std::vector<Vec4> rotations;
    std::vector<Vec3> log_scales;
    std::vector<double> opacity_logits;
    std::vector<double> sh_coeffs;
    std::vector<double> mask_logits;
    // Diagnostics for density control: dL/dmean2d and whether the Gaussian was drawn.
    std::vector<Vec2> mean2d;
    std::vector<std::uint8_t> visible;

    static CloudGradients zeros_like(const GaussianCloud& cloud);
    void add(const CloudGradients& other);
    void scale(double factor);
};

/// Gradient of sum(grad_image * render(...).image) with respect to every
/// parameter of the cloud. Forward quantities are recomputed.
CloudGradients render_backward(const GaussianCloud& cloud, const Camera& camera, RenderMode mode,
                               const Vec3& background, const Image& grad_image,
                               const RenderSettings& settings = {});

/// Discrete structure of a render: each drawn Gaussian's pixel box, in
/// compositing order. Finite-difference checks are only meaningful between
/// parameter values that produce the same footprint.
struct SplatFootprint {
    int index;
    int x_min, x_max, y_min, y_max;
    bool operator==(const SplatFootprint&) const = default;
};
std::vector<SplatFootprint> splat_footprints(const GaussianCloud& cloud, const Camera& camera,
                                             RenderMode mode, const RenderSettings& settings = {});

}  // namespace cogs
