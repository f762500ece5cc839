// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace cogs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
/// Quaternion, scalar first: (w, x, y, z).
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

constexpr int kMaxShDegree = 3;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Structure-of-arrays Gaussian scene state.
///
/// Parameters live in their unconstrained domains:
///   - log_scales:      exp() gives the ellipsoid axis lengths
///   - opacity_logits:  sigmoid() gives opacity in (0, 1)
///   - rotations:       scalar-first quaternions, kept unit-norm by the optimizers
///   - mask_logits:     softmax() over mask_count slots; empty before mask learning
///
/// sh_coeffs holds sh_coeff_count(sh_degree) rgb triples per Gaussian, band-major.
struct GaussianCloud {
    int sh_degree = 1;
    int mask_count = 0;
    std::vector<Vec3> positions;
    std::vector<Vec4> rotations;
    std::vector<Vec3> log_scales;
    std::vector<double> opacity_logits;
    std::vector<double> sh_coeffs;
    std::vector<double> mask_logits;

    std::size_t count() const { return positions.size(); }
    bool has_masks() const { return mask_count > 0; }
    int sh_stride() const { return sh_coeff_count(sh_degree) * 3; }

    std::span<double> sh(std::size_t i) {
        return {sh_coeffs.data() + i * sh_stride(), static_cast<std::size_t>(sh_stride())};
    }
    std::span<const double> sh(std::size_t i) const {
        return {sh_coeffs.data() + i * sh_stride(), static_cast<std::size_t>(sh_stride())};
    }
    std::span<double> mask(std::size_t i) {
        return {mask_logits.data() + i * mask_count, static_cast<std::size_t>(mask_count)};
    }
    std::span<const double> mask(std::size_t i) const {
        return {mask_logits.data() + i * mask_count, static_cast<std::size_t>(mask_count)};
    }

    /// Resizes every array to n Gaussians; new entries are zero (identity rotation).
    void resize(std::size_t n);
    /// Appends a copy of Gaussian i of src (same layout required).
    void push_back_from(const GaussianCloud& src, std::size_t i);
    /// Keeps the Gaussians with keep[i] set, in order.
    void compact(const std::vector<bool>& keep);
    /// Allocates mask logits for `slots` attributes, all zero (uniform softmax).
    void init_masks(int slots);
    /// Throws ConfigError when array lengths disagree.
    void validate() const;
};

/// Pinhole camera. cam_to_world maps camera space to world space; the camera
/// looks along its local -z axis with +y up, image rows grow downward.
struct Camera {
    int width = 0;
    int height = 0;
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.5;
    double cy = 0.5;
    Mat4 cam_to_world = Mat4::Identity();

    Mat3 rotation() const { return cam_to_world.block<3, 3>(0, 0); }
    Vec3 center() const { return cam_to_world.block<3, 1>(0, 3); }
    Mat3 world_to_camera_rotation() const { return rotation().transpose(); }

    /// Throws ConfigError when intrinsics or the rotation block are invalid.
    void validate() const;

    /// Camera at eye looking at target; fov_x in radians, principal point at the image center.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                          int height, double fov_x);
};

struct SceneBox {
    Vec3 min_corner = Vec3::Constant(-1.0);
    Vec3 max_corner = Vec3::Constant(1.0);

    void validate() const;
    Vec3 center() const { return 0.5 * (min_corner + max_corner); }
    Vec3 half_extent() const { return 0.5 * (max_corner - min_corner); }
};

// ---------------------------------------------------------------------------
// Scalar helpers

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }
/// Nearest float32 value, as double. Persistent training state is kept on this grid.
/// The volatile store keeps g++ 11 (-O3 -march=native) from folding the
/// double -> float -> double pair away inside vectorized loops.
inline double round_to_f32(double x) {
    volatile float f = static_cast<float>(x);
    return static_cast<double>(f);
}
void round_to_f32(std::span<double> values);
void round_to_f32(GaussianCloud& cloud);

/// Softmax of logits into out (same length).
void softmax(std::span<const double> logits, std::span<double> out);

// ---------------------------------------------------------------------------
// Quaternions

Vec4 normalize_quaternion(const Vec4& q);
/// Gradient with respect to q of a loss whose gradient with respect to q/|q| is grad.
Vec4 normalize_quaternion_backward(const Vec4& q, const Vec4& grad);
/// Hamilton product a * b.
Vec4 quat_multiply(const Vec4& a, const Vec4& b);
inline Vec4 quat_conjugate(const Vec4& q) { return {q[0], -q[1], -q[2], -q[3]}; }
/// Rotation matrix of a unit quaternion.
Mat3 rotation_matrix(const Vec4& unit_q);
/// Gradient with respect to the unit quaternion entries given dL/dR.
Vec4 rotation_matrix_backward(const Vec4& unit_q, const Mat3& grad_r);
/// Unit quaternion for a rotation of `angle` radians about `axis`.
Vec4 quaternion_from_axis_angle(const Vec3& axis, double angle);

// ---------------------------------------------------------------------------
// Covariance

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)). The quaternion is
/// normalized internally, so the result depends only on its direction.
Mat3 covariance_from_rs(const Vec4& rotation, const Vec3& log_scale);

struct CovarianceGrad {
    Vec4 rotation = Vec4::Zero();
    Vec3 log_scale = Vec3::Zero();
};

CovarianceGrad covariance_from_rs_backward(const Vec4& rotation, const Vec3& log_scale,
                                           const Mat3& grad_sigma);

// ---------------------------------------------------------------------------
// Spherical harmonics

/// Real SH basis values up to `degree` (length sh_coeff_count(degree)).
void sh_basis(const Vec3& dir, int degree, std::span<double> out);

/// Color of the coefficients (band-major rgb triples) seen from unit direction
/// dir: basis-weighted sum + 0.5, clamped below at 0 per channel.
Vec3 sh_eval(std::span<const double> coeffs, const Vec3& dir, int degree);

/// Accumulates dL/dcoeffs into grad_coeffs and returns dL/ddir.
Vec3 sh_eval_backward(std::span<const double> coeffs, const Vec3& dir, int degree,
                      const Vec3& grad_rgb, std::span<double> grad_coeffs);

/// SH degree-0 coefficient that evaluates to the given channel value.
inline double sh_dc_from_color(double value) { return (value - 0.5) / 0.28209479177387814; }

}  // namespace cogs
