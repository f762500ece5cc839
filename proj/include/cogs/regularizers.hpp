// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/gaussian.hpp"
#include "cogs/image.hpp"

#include <span>
#include <vector>

namespace cogs {

/// k nearest neighbors of every Gaussian at the first time step, with
/// Gaussian weights exp(-lambda_w * d^2). Frozen until rebuilt.
struct NeighborTable {
    int k = 0;
    double lambda_w = 0.0;
    std::vector<int> indices;     // count() * k, row i lists i's neighbors
    std::vector<double> weights;  // same layout

    std::size_t count() const { return k > 0 ? indices.size() / static_cast<std::size_t>(k) : 0; }
    int neighbor(std::size_t i, int slot) const { return indices[i * static_cast<std::size_t>(k) + slot]; }
    double weight(std::size_t i, int slot) const { return weights[i * static_cast<std::size_t>(k) + slot]; }
};

/// Exact Euclidean kNN, ties broken by lower index. Throws ConfigError when
/// there are fewer than k + 1 points or k < 1.
NeighborTable build_neighbors(std::span<const Vec3> positions_t0, int k, double lambda_w, int workers = 0);

struct PositionLoss {
    double value = 0.0;
    std::vector<Vec3> grad;  // d value / d input
};

/// Mean offset length. The gradient of |x| at 0 is taken as 0.
PositionLoss loss_norm(std::span<const Vec3> offsets);

struct PairLoss {
    double value = 0.0;
    std::vector<Vec3> grad_positions_t;
    std::vector<Vec3> grad_positions_prev;
    std::vector<Vec4> grad_rotations_t;     // empty for position-only losses
    std::vector<Vec4> grad_rotations_prev;  // empty for position-only losses
};

/// Mean over table pairs of | |mu_j,t - mu_i,t| - |mu_j,prev - mu_i,prev| |.
PairLoss loss_diff(std::span<const Vec3> positions_t, std::span<const Vec3> positions_prev,
                   const NeighborTable& table);

/// Weighted local rigidity:
/// 1/(kN) sum w_ij |(mu_j,prev - mu_i,prev) - R_i,prev R_i,t^-1 (mu_j,t - mu_i,t)|.
/// Quaternions are normalized before use and gradients flow through the normalization.
PairLoss loss_rigid(std::span<const Vec3> positions_t, std::span<const Vec3> positions_prev,
                    std::span<const Vec4> rotations_t, std::span<const Vec4> rotations_prev,
                    const NeighborTable& table);

/// Weighted rotation consistency:
/// 1/(kN) sum w_ij |q_j,t q_j,prev^-1 - q_i,t q_i,prev^-1| on normalized quaternions.
PairLoss loss_rot(std::span<const Vec4> rotations_t, std::span<const Vec4> rotations_prev,
                  const NeighborTable& table);

struct MaskLoss {
    double value = 0.0;
    std::vector<Image> grad;  // d value / d rendered mask, one per attribute
};

/// Per pixel sum_i |(1 - M_i) - S_i| * S_i with S_i = sum_{j != i} gt_j,
/// averaged over pixels. Single-channel images of equal size; ConfigError otherwise.
MaskLoss loss_mask(std::span<const Image> rendered, std::span<const Image> gt);

// ---------------------------------------------------------------------------
// Quaternion product adjoint, shared with the deformation code.

struct QuatProductGrad {
    Vec4 a = Vec4::Zero();
    Vec4 b = Vec4::Zero();
};
/// Gradients of a loss with respect to a and b given its gradient g with respect to a * b.
QuatProductGrad quat_multiply_backward(const Vec4& a, const Vec4& b, const Vec4& g);

}  // namespace cogs
