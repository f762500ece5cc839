// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/gaussian.hpp"

#include "cogs/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

namespace cogs {

namespace {

constexpr double kShC0 = 0.28209479177387814;
constexpr double kShC1 = 0.4886025119029199;
constexpr double kShC2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                            -1.0925484305920792, 0.5462742152960396};
constexpr double kShC3[] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                            0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                            -0.5900435899266435};

// d(basis_k)/d(dir) for every basis function, row k.
void sh_basis_jacobian(const Vec3& d, int degree, std::span<Vec3> out) {
    const double x = d.x(), y = d.y(), z = d.z();
    out[0] = Vec3::Zero();
    if (degree < 1) return;
    out[1] = {0.0, -kShC1, 0.0};
    out[2] = {0.0, 0.0, kShC1};
    out[3] = {-kShC1, 0.0, 0.0};
    if (degree < 2) return;
    out[4] = kShC2[0] * Vec3(y, x, 0.0);
    out[5] = kShC2[1] * Vec3(0.0, z, y);
    out[6] = kShC2[2] * Vec3(-2.0 * x, -2.0 * y, 4.0 * z);
    out[7] = kShC2[3] * Vec3(z, 0.0, x);
    out[8] = kShC2[4] * Vec3(2.0 * x, -2.0 * y, 0.0);
    if (degree < 3) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[9] = kShC3[0] * Vec3(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
    out[10] = kShC3[1] * Vec3(y * z, x * z, x * y);
    out[11] = kShC3[2] * Vec3(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
    out[12] = kShC3[3] * Vec3(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kShC3[4] * Vec3(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
    out[14] = kShC3[5] * Vec3(2.0 * x * z, -2.0 * y * z, xx - yy);
    out[15] = kShC3[6] * Vec3(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
}

void check_sh_size(std::span<const double> coeffs, int degree) {
    if (degree < 0 || degree > kMaxShDegree) {
        throw ConfigError("SH degree must be in [0, 3], got " + std::to_string(degree));
    }
    const std::size_t expected = static_cast<std::size_t>(sh_coeff_count(degree)) * 3;
    if (coeffs.size() != expected) {
        throw ConfigError("SH coefficient count mismatch: expected " + std::to_string(expected) +
                          ", got " + std::to_string(coeffs.size()));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// GaussianCloud

void GaussianCloud::resize(std::size_t n) {
    positions.resize(n, Vec3::Zero());
    rotations.resize(n, Vec4(1.0, 0.0, 0.0, 0.0));
    log_scales.resize(n, Vec3::Zero());
    opacity_logits.resize(n, 0.0);
    sh_coeffs.resize(n * static_cast<std::size_t>(sh_stride()), 0.0);
    mask_logits.resize(n * static_cast<std::size_t>(mask_count), 0.0);
}

void GaussianCloud::push_back_from(const GaussianCloud& src, std::size_t i) {
    positions.push_back(src.positions[i]);
    rotations.push_back(src.rotations[i]);
    log_scales.push_back(src.log_scales[i]);
    opacity_logits.push_back(src.opacity_logits[i]);
    auto coeffs = src.sh(i);
    sh_coeffs.insert(sh_coeffs.end(), coeffs.begin(), coeffs.end());
    if (mask_count > 0) {
        auto m = src.mask(i);
        mask_logits.insert(mask_logits.end(), m.begin(), m.end());
    }
}

void GaussianCloud::compact(const std::vector<bool>& keep) {
    GaussianCloud out;
    out.sh_degree = sh_degree;
    out.mask_count = mask_count;
    for (std::size_t i = 0; i < count(); ++i) {
        if (keep[i]) out.push_back_from(*this, i);
    }
    *this = std::move(out);
}

void GaussianCloud::init_masks(int slots) {
    if (slots < 1) throw ConfigError("mask slot count must be positive");
    mask_count = slots;
    mask_logits.assign(count() * static_cast<std::size_t>(slots), 0.0);
}

void GaussianCloud::validate() const {
    const std::size_t n = count();
    if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ConfigError("SH degree out of range");
    if (rotations.size() != n || log_scales.size() != n || opacity_logits.size() != n ||
        sh_coeffs.size() != n * static_cast<std::size_t>(sh_stride()) ||
        mask_logits.size() != n * static_cast<std::size_t>(mask_count)) {
        throw ConfigError("GaussianCloud arrays disagree in length");
    }
}

// ---------------------------------------------------------------------------
// Camera / SceneBox

void Camera::validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("camera dimensions must be positive");
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
    if (!(cx > 0.0 && cx < width && cy > 0.0 && cy < height)) {
        throw ConfigError("camera principal point outside the image");
    }
    const Mat3 r = rotation();
    if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6) {
        throw ConfigError("camera rotation is not orthonormal");
    }
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, int width,
                       int height, double fov_x) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-12) right = forward.cross(Vec3::UnitX());
    right.normalize();
    const Vec3 z_axis = -forward;
    const Vec3 y_axis = z_axis.cross(right);

    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = 0.5 * width / std::tan(0.5 * fov_x);
    cam.fy = cam.fx;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.cam_to_world.setIdentity();
    cam.cam_to_world.block<3, 1>(0, 0) = right;
    cam.cam_to_world.block<3, 1>(0, 1) = y_axis;
    cam.cam_to_world.block<3, 1>(0, 2) = z_axis;
    cam.cam_to_world.block<3, 1>(0, 3) = eye;
    return cam;
}

void SceneBox::validate() const {
    if (!(min_corner.array() < max_corner.array()).all()) {
        throw ConfigError("scene box min corner must be below max corner");
    }
}

// ---------------------------------------------------------------------------
// Scalars

void round_to_f32(std::span<double> values) {
    for (double& v : values) v = round_to_f32(v);
}

void round_to_f32(GaussianCloud& cloud) {
    for (auto& p : cloud.positions) p = p.unaryExpr([](double v) { return round_to_f32(v); });
    for (auto& q : cloud.rotations) q = q.unaryExpr([](double v) { return round_to_f32(v); });
    for (auto& s : cloud.log_scales) s = s.unaryExpr([](double v) { return round_to_f32(v); });
    round_to_f32(cloud.opacity_logits);
    round_to_f32(cloud.sh_coeffs);
    round_to_f32(cloud.mask_logits);
}

void softmax(std::span<const double> logits, std::span<double> out) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        out[k] = std::exp(logits[k] - peak);
        total += out[k];
    }
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= total;
}

// ---------------------------------------------------------------------------
// Quaternions

Vec4 normalize_quaternion(const Vec4& q) { return q / q.norm(); }

Vec4 normalize_quaternion_backward(const Vec4& q, const Vec4& grad) {
    const double norm = q.norm();
    const Vec4 n = q / norm;
    return (grad - n * n.dot(grad)) / norm;
}

Vec4 quat_multiply(const Vec4& a, const Vec4& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

Mat3 rotation_matrix(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
    return r;
}

Vec4 rotation_matrix_backward(const Vec4& q, const Mat3& g) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 out;
    out[0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) +
                    x * g(2, 1));
    out[1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) +
                    z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
    out[2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                    w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
    out[3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) -
                    2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    return out;
}

Vec4 quaternion_from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized() * std::sin(0.5 * angle);
    return {std::cos(0.5 * angle), a.x(), a.y(), a.z()};
}

// ---------------------------------------------------------------------------
// Covariance

Mat3 covariance_from_rs(const Vec4& rotation, const Vec3& log_scale) {
    const Mat3 r = rotation_matrix(normalize_quaternion(rotation));
    const Mat3 m = r * log_scale.array().exp().matrix().asDiagonal();
    return m * m.transpose();
}

CovarianceGrad covariance_from_rs_backward(const Vec4& rotation, const Vec3& log_scale,
                                           const Mat3& grad_sigma) {
    const Vec4 n = normalize_quaternion(rotation);
    const Mat3 r = rotation_matrix(n);
    const Vec3 s = log_scale.array().exp();
    const Mat3 m = r * s.asDiagonal();
    // Sigma = M M^T, so dL/dM = (G + G^T) M.
    const Mat3 grad_m = (grad_sigma + grad_sigma.transpose()) * m;

    CovarianceGrad out;
    for (int k = 0; k < 3; ++k) out.log_scale[k] = grad_m.col(k).dot(r.col(k)) * s[k];
    const Mat3 grad_r = grad_m * s.asDiagonal();
    out.rotation = normalize_quaternion_backward(rotation, rotation_matrix_backward(n, grad_r));
    return out;
}

// ---------------------------------------------------------------------------
// Spherical harmonics

void sh_basis(const Vec3& d, int degree, std::span<double> out) {
    const double x = d.x(), y = d.y(), z = d.z();
    out[0] = kShC0;
    if (degree < 1) return;
    out[1] = -kShC1 * y;
    out[2] = kShC1 * z;
    out[3] = -kShC1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    out[4] = kShC2[0] * x * y;
    out[5] = kShC2[1] * y * z;
    out[6] = kShC2[2] * (2.0 * zz - xx - yy);
    out[7] = kShC2[3] * x * z;
    out[8] = kShC2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = kShC3[0] * y * (3.0 * xx - yy);
    out[10] = kShC3[1] * x * y * z;
    out[11] = kShC3[2] * y * (4.0 * zz - xx - yy);
    out[12] = kShC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kShC3[4] * x * (4.0 * zz - xx - yy);
    out[14] = kShC3[5] * z * (xx - yy);
    out[15] = kShC3[6] * x * (xx - 3.0 * yy);
}

Vec3 sh_eval(std::span<const double> coeffs, const Vec3& dir, int degree) {
    check_sh_size(coeffs, degree);
    const int k_count = sh_coeff_count(degree);
    double basis[16];
    sh_basis(dir, degree, basis);
    Vec3 rgb = Vec3::Constant(0.5);
    for (int k = 0; k < k_count; ++k) {
        rgb += basis[k] * Vec3(coeffs[3 * k], coeffs[3 * k + 1], coeffs[3 * k + 2]);
    }
    return rgb.cwiseMax(0.0);
}

Vec3 sh_eval_backward(std::span<const double> coeffs, const Vec3& dir, int degree,
                      const Vec3& grad_rgb, std::span<double> grad_coeffs) {
    check_sh_size(coeffs, degree);
    const int k_count = sh_coeff_count(degree);
    double basis[16];
    sh_basis(dir, degree, basis);
    Vec3 raw = Vec3::Constant(0.5);
    for (int k = 0; k < k_count; ++k) {
        raw += basis[k] * Vec3(coeffs[3 * k], coeffs[3 * k + 1], coeffs[3 * k + 2]);
    }
    Vec3 g = grad_rgb;
    for (int c = 0; c < 3; ++c) {
        if (raw[c] < 0.0) g[c] = 0.0;
    }
    Vec3 jac[16];
    sh_basis_jacobian(dir, degree, jac);
    Vec3 grad_dir = Vec3::Zero();
    for (int k = 0; k < k_count; ++k) {
        const Vec3 c(coeffs[3 * k], coeffs[3 * k + 1], coeffs[3 * k + 2]);
        for (int ch = 0; ch < 3; ++ch) grad_coeffs[3 * k + ch] += basis[k] * g[ch];
        grad_dir += jac[k] * c.dot(g);
    }
    return grad_dir;
}

}  // namespace cogs
