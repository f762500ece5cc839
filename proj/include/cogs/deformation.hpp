// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/gaussian.hpp"
#include "cogs/nn.hpp"
#include "cogs/render.hpp"

#include <array>
#include <vector>

namespace cogs {

/// Per-Gaussian parameter offsets at one time (or one control value).
struct Offsets {
    std::vector<Vec3> position;
    std::vector<Vec3> color;  // added to the degree-0 SH coefficients
    std::vector<Vec4> rotation;
    std::vector<Vec3> log_scale;

    static Offsets zeros(std::size_t n);
    std::size_t count() const { return position.size(); }
    void add(const Offsets& other);
};

/// Deformed copy of the cloud. Rotations become normalize(q + dq) for every
/// Gaussian with a nonzero rotation offset and are left untouched otherwise, so
/// zero offsets reproduce the input exactly.
GaussianCloud apply_offsets(const GaussianCloud& cloud, const Offsets& offsets);

/// Pulls gradients with respect to the deformed cloud back to the base cloud
/// (accumulated into grad_base) and to the offsets (accumulated into grad_offsets).
void apply_offsets_backward(const GaussianCloud& cloud, const Offsets& offsets,
                            const CloudGradients& grad_deformed, CloudGradients* grad_base,
                            Offsets* grad_offsets);

/// Four networks mapping encode(normalized mu) + encode(t) to offsets.
struct DeformationModel {
    static constexpr int kPosition = 0, kColor = 1, kRotation = 2, kScale = 3;
    static constexpr std::array<int, 4> kOutputWidths{3, 3, 4, 3};

    int position_freqs = 10;
    int time_freqs = 6;
    SceneBox box;  // positions are mapped to [-1, 1] through this box before encoding
    std::array<Mlp, 4> nets;

    /// Final layers start at zero, so a fresh model outputs zero offsets.
    static DeformationModel create(int hidden_width, int hidden_layers, int position_freqs, int time_freqs,
                                   const SceneBox& box, Rng& rng);

    int input_width() const { return encoded_width(3, position_freqs) + encoded_width(1, time_freqs); }
    std::size_t param_count() const;
    void validate() const;
};

/// Forward activations of the four networks for one evaluation.
struct DeformTape {
    std::array<MlpTape, 4> tapes;
};

/// Network input matrix (input_width x N). mu enters as a constant: the
/// deformation does not backpropagate into the canonical positions through
/// its input.
MatrixX deformation_inputs(const DeformationModel& model, std::span<const Vec3> positions, double t);

Offsets evaluate_offsets(const DeformationModel& model, const GaussianCloud& cloud, double t,
                         DeformTape* tape = nullptr);

/// Accumulates parameter gradients into grads[k] (one buffer per network).
void offsets_backward(const DeformationModel& model, const DeformTape& tape, const Offsets& grad_offsets,
                      std::array<std::vector<double>, 4>& grads);

/// apply_offsets(cloud, evaluate_offsets(model, cloud, t)).
GaussianCloud deform(const GaussianCloud& cloud, const DeformationModel& model, double t);

// Conversions between Offsets and network output matrices.
std::array<MatrixX, 4> offsets_to_matrices(const Offsets& offsets);
Offsets offsets_from_matrices(const std::array<MatrixX, 4>& outputs);

}  // namespace cogs
