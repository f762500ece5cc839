// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/regularizers.hpp"

#include "cogs/errors.hpp"
#include "cogs/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cogs {

namespace {

// Left and right multiplication matrices: a * b = left(a) b = right(b) a.
Mat4 left_matrix(const Vec4& a) {
    Mat4 m;
    m << a[0], -a[1], -a[2], -a[3],
         a[1],  a[0], -a[3],  a[2],
         a[2],  a[3],  a[0], -a[1],
         a[3], -a[2],  a[1],  a[0];
    return m;
}

Mat4 right_matrix(const Vec4& b) {
    Mat4 m;
    m << b[0], -b[1], -b[2], -b[3],
         b[1],  b[0],  b[3], -b[2],
         b[2], -b[3],  b[0],  b[1],
         b[3],  b[2], -b[1],  b[0];
    return m;
}

template <int N>
Eigen::Matrix<double, N, 1> unit_or_zero(const Eigen::Matrix<double, N, 1>& v, double norm) {
    return norm > 0.0 ? Eigen::Matrix<double, N, 1>(v / norm) : Eigen::Matrix<double, N, 1>::Zero();
}

double sign(double x) { return (x > 0.0) - (x < 0.0); }

void check_table(const NeighborTable& table, std::size_t n, const char* who) {
    if (table.count() != n) {
        throw ConfigError(std::string(who) + ": neighbor table covers " + std::to_string(table.count()) +
                          " Gaussians, inputs have " + std::to_string(n));
    }
}

}  // namespace

QuatProductGrad quat_multiply_backward(const Vec4& a, const Vec4& b, const Vec4& g) {
    return {right_matrix(b).transpose() * g, left_matrix(a).transpose() * g};
}

// ---------------------------------------------------------------------------

NeighborTable build_neighbors(std::span<const Vec3> positions, int k, double lambda_w, int workers) {
    if (k < 1) throw ConfigError("neighbor count must be at least 1");
    const std::size_t n = positions.size();
    if (n < static_cast<std::size_t>(k) + 1) {
        throw ConfigError("need at least " + std::to_string(k + 1) + " Gaussians for " + std::to_string(k) +
                          " neighbors, got " + std::to_string(n));
    }
    NeighborTable table;
    table.k = k;
    table.lambda_w = lambda_w;
    table.indices.resize(n * static_cast<std::size_t>(k));
    table.weights.resize(n * static_cast<std::size_t>(k));

    constexpr std::size_t kBatch = 64;
    parallel_for((n + kBatch - 1) / kBatch, [&](std::size_t b) {
        std::vector<std::pair<double, int>> cand(n - 1);
        const std::size_t end = std::min(n, (b + 1) * kBatch);
        for (std::size_t i = b * kBatch; i < end; ++i) {
            std::size_t c = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                cand[c++] = {(positions[j] - positions[i]).squaredNorm(), static_cast<int>(j)};
            }
            std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
            for (int s = 0; s < k; ++s) {
                table.indices[i * k + s] = cand[static_cast<std::size_t>(s)].second;
                table.weights[i * k + s] = std::exp(-lambda_w * cand[static_cast<std::size_t>(s)].first);
            }
        }
    }, workers);
    return table;
}

// ---------------------------------------------------------------------------

PositionLoss loss_norm(std::span<const Vec3> offsets) {
    PositionLoss out;
    out.grad.assign(offsets.size(), Vec3::Zero());
    if (offsets.empty()) return out;
    const double inv_n = 1.0 / static_cast<double>(offsets.size());
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        const double len = offsets[i].norm();
        out.value += len;
        out.grad[i] = inv_n * unit_or_zero<3>(offsets[i], len);
    }
    out.value *= inv_n;
    return out;
}

PairLoss loss_diff(std::span<const Vec3> pos_t, std::span<const Vec3> pos_prev, const NeighborTable& table) {
    const std::size_t n = pos_t.size();
    if (pos_prev.size() != n) throw ConfigError("loss_diff: time slices have different Gaussian counts");
    check_table(table, n, "loss_diff");
    PairLoss out;
    out.grad_positions_t.assign(n, Vec3::Zero());
    out.grad_positions_prev.assign(n, Vec3::Zero());
    if (n == 0) return out;
    const double inv = 1.0 / (static_cast<double>(n) * table.k);
    for (std::size_t i = 0; i < n; ++i) {
        for (int s = 0; s < table.k; ++s) {
            const auto j = static_cast<std::size_t>(table.neighbor(i, s));
            const Vec3 dt = pos_t[j] - pos_t[i], dp = pos_prev[j] - pos_prev[i];
            const double lt = dt.norm(), lp = dp.norm();
            out.value += std::abs(lt - lp);
            const double sg = inv * sign(lt - lp);
            if (sg == 0.0) continue;
            const Vec3 gt = sg * unit_or_zero<3>(dt, lt);
            const Vec3 gp = -sg * unit_or_zero<3>(dp, lp);
            out.grad_positions_t[j] += gt;
            out.grad_positions_t[i] -= gt;
            out.grad_positions_prev[j] += gp;
            out.grad_positions_prev[i] -= gp;
        }
    }
    out.value *= inv;
    return out;
}

PairLoss loss_rigid(std::span<const Vec3> pos_t, std::span<const Vec3> pos_prev, std::span<const Vec4> rot_t,
                    std::span<const Vec4> rot_prev, const NeighborTable& table) {
    const std::size_t n = pos_t.size();
    if (pos_prev.size() != n || rot_t.size() != n || rot_prev.size() != n) {
        throw ConfigError("loss_rigid: inputs have different Gaussian counts");
    }
    check_table(table, n, "loss_rigid");
    PairLoss out;
    out.grad_positions_t.assign(n, Vec3::Zero());
    out.grad_positions_prev.assign(n, Vec3::Zero());
    out.grad_rotations_t.assign(n, Vec4::Zero());
    out.grad_rotations_prev.assign(n, Vec4::Zero());
    if (n == 0) return out;
    const double inv = 1.0 / (static_cast<double>(n) * table.k);

    for (std::size_t i = 0; i < n; ++i) {
        const Vec4 qt = normalize_quaternion(rot_t[i]), qp = normalize_quaternion(rot_prev[i]);
        const Mat3 r_t = rotation_matrix(qt), r_p = rotation_matrix(qp);
        const Mat3 m = r_p * r_t.transpose();
        Mat3 g_m = Mat3::Zero();
        for (int s = 0; s < table.k; ++s) {
            const auto j = static_cast<std::size_t>(table.neighbor(i, s));
            const double w = table.weight(i, s);
            const Vec3 a = pos_prev[j] - pos_prev[i];
            const Vec3 b = pos_t[j] - pos_t[i];
            const Vec3 e = a - m * b;
            const double len = e.norm();
            out.value += w * len;
            const Vec3 g = inv * w * unit_or_zero<3>(e, len);
            out.grad_positions_prev[j] += g;
            out.grad_positions_prev[i] -= g;
            const Vec3 gb = -m.transpose() * g;
            out.grad_positions_t[j] += gb;
            out.grad_positions_t[i] -= gb;
            g_m -= g * b.transpose();
        }
        const Mat3 g_rp = g_m * r_t;
        const Mat3 g_rt = g_m.transpose() * r_p;
        out.grad_rotations_prev[i] = normalize_quaternion_backward(rot_prev[i], rotation_matrix_backward(qp, g_rp));
        out.grad_rotations_t[i] = normalize_quaternion_backward(rot_t[i], rotation_matrix_backward(qt, g_rt));
    }
    out.value *= inv;
    return out;
}

PairLoss loss_rot(std::span<const Vec4> rot_t, std::span<const Vec4> rot_prev, const NeighborTable& table) {
    const std::size_t n = rot_t.size();
    if (rot_prev.size() != n) throw ConfigError("loss_rot: time slices have different Gaussian counts");
    check_table(table, n, "loss_rot");
    PairLoss out;
    out.grad_positions_t.assign(n, Vec3::Zero());
    out.grad_positions_prev.assign(n, Vec3::Zero());
    out.grad_rotations_t.assign(n, Vec4::Zero());
    out.grad_rotations_prev.assign(n, Vec4::Zero());
    if (n == 0) return out;
    const double inv = 1.0 / (static_cast<double>(n) * table.k);

    std::vector<Vec4> qt(n), qp_conj(n), delta(n);
    for (std::size_t i = 0; i < n; ++i) {
        qt[i] = normalize_quaternion(rot_t[i]);
        qp_conj[i] = quat_conjugate(normalize_quaternion(rot_prev[i]));
        delta[i] = quat_multiply(qt[i], qp_conj[i]);
    }
    std::vector<Vec4> g_delta(n, Vec4::Zero());
    for (std::size_t i = 0; i < n; ++i) {
        for (int s = 0; s < table.k; ++s) {
            const auto j = static_cast<std::size_t>(table.neighbor(i, s));
            const double w = table.weight(i, s);
            const Vec4 e = delta[j] - delta[i];
            const double len = e.norm();
            out.value += w * len;
            const Vec4 g = inv * w * unit_or_zero<4>(e, len);
            g_delta[j] += g;
            g_delta[i] -= g;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto pg = quat_multiply_backward(qt[i], qp_conj[i], g_delta[i]);
        out.grad_rotations_t[i] = normalize_quaternion_backward(rot_t[i], pg.a);
        out.grad_rotations_prev[i] = normalize_quaternion_backward(rot_prev[i], quat_conjugate(pg.b));
    }
    out.value *= inv;
    return out;
}

// ---------------------------------------------------------------------------

MaskLoss loss_mask(std::span<const Image> rendered, std::span<const Image> gt) {
    if (rendered.size() != gt.size() || rendered.empty()) {
        throw ConfigError("loss_mask: rendered and ground-truth mask counts differ or are zero");
    }
    const Image& ref = rendered.front();
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        if (!rendered[i].same_shape(ref) || !gt[i].same_shape(ref) || ref.channels != 1) {
            throw ConfigError("loss_mask: masks must be single-channel images of one size");
        }
    }
    const std::size_t pixels = ref.pixel_count();
    MaskLoss out;
    out.grad.assign(rendered.size(), Image(ref.width, ref.height, 1));
    if (pixels == 0) return out;
    const double inv = 1.0 / static_cast<double>(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        for (std::size_t i = 0; i < rendered.size(); ++i) {
            double others = 0.0;
            for (std::size_t j = 0; j < gt.size(); ++j) {
                if (j != i) others += gt[j].data[p];
            }
            if (others == 0.0) continue;
            const double r = (1.0 - rendered[i].data[p]) - others;
            out.value += std::abs(r) * others;
            out.grad[i].data[p] = -inv * sign(r) * others;
        }
    }
    out.value *= inv;
    return out;
}

}  // namespace cogs
