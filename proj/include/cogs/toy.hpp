// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/dataset.hpp"
#include "cogs/gaussian.hpp"
#include "cogs/random.hpp"

#include <string>
#include <vector>

namespace cogs {

/// Piecewise-linear translation: offset = displacement * clamp((t - t_start) / (t_end - t_start), 0, 1).
struct ToyMotion {
    Vec3 displacement = Vec3::Zero();
    double t_start = 0.0;
    double t_end = 1.0;

    Vec3 offset(double t) const;
};

/// Generated scene with known ground truth.
struct ToyScene {
    std::string kind;  // "static", "dynamic" or "control"
    GaussianCloud gt;  // canonical (t = 0) ground truth
    std::vector<int> group;          // per Gaussian: index into motions
    std::vector<ToyMotion> motions;  // group 0 never moves
    std::vector<std::string> part_names;  // control scenes: name of group g + 1
    Dataset train;
    Dataset test;
    MaskSupervision masks;  // control scenes only
    Vec3 background = Vec3::Ones();

    GaussianCloud gt_at(double t) const;
    /// Indices of the Gaussians of one group.
    std::vector<std::size_t> members(int group) const;
    /// Binary coverage (1 where the group's Gaussians deposit alpha > 0.5) in frame camera at time t.
    Image coverage(int group, const Camera& camera, double t) const;
};

struct ToyOptions {
    int width = 64;
    int height = 64;
    std::uint64_t seed = 7;
};

/// 20 Gaussians near the origin seen by 8 cameras on a ring at one time.
ToyScene make_static_toy(const ToyOptions& options = {});

/// A static cluster and a translating cluster, one camera per time on an
/// arc over 20 training times; held-out frames sit between training times.
ToyScene make_dynamic_toy(const ToyOptions& options = {});

/// Static base plus part A (moves for t in [0, 0.5]) and part B (moves for
/// t in [0.5, 1]); one labeled mask frame per part.
ToyScene make_control_toy(const ToyOptions& options = {});

ToyScene make_toy(const std::string& kind, const ToyOptions& options = {});

}  // namespace cogs
