// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/dataset.hpp"
#include "cogs/deformation.hpp"
#include "cogs/nn.hpp"
#include "cogs/render.hpp"

#include <span>
#include <string>
#include <vector>

namespace cogs {

// ---------------------------------------------------------------------------
// Mask learning. Mask slot 0 is the implicit background attribute; user
// attribute a (0-based, as listed in MaskSupervision) occupies slot a + 1.

struct MaskLearnConfig {
    long iters = 1500;
    double lr = 1.0;         // for the first lr_switch iterations
    double lr_after = 0.1;   // afterwards
    long lr_switch = 1000;
};

/// Copy of cloud with mask_count = attributes + 1 and optimized mask logits.
/// Positions, colors and every other parameter are left bitwise unchanged.
/// losses (optional) receives the loss of every iteration.
GaussianCloud learn_masks(const GaussianCloud& cloud, const DeformationModel& deformation, const Dataset& dataset,
                          const MaskSupervision& supervision, const MaskLearnConfig& config,
                          std::vector<double>* losses = nullptr, const RenderSettings& settings = {});

/// Softmax mass of Gaussian i on mask slot `slot`.
double mask_mass(const GaussianCloud& cloud, std::size_t i, int slot);

// ---------------------------------------------------------------------------
// Control points and signals

struct ControlSetOptions {
    double top_fraction = 0.1;
    std::vector<std::size_t> manual;  // when non-empty, used as given after validation
};

/// Among Gaussians with mass > 0.5 on `slot`, the top fraction (at least one)
/// by path length of the deformed center over `times`. Throws
/// DegenerateControlError when no Gaussian qualifies.
std::vector<std::size_t> select_control_set(const GaussianCloud& cloud, const DeformationModel& deformation,
                                            std::span<const double> times, int slot,
                                            const ControlSetOptions& options = {});

/// Total path length of every Gaussian center over the given times.
std::vector<double> path_lengths(const GaussianCloud& cloud, const DeformationModel& deformation,
                                 std::span<const double> times);

struct ControlSignal {
    Vec3 center = Vec3::Zero();
    Vec3 direction = Vec3::UnitX();  // unit, final sample projects at least as far as the first
    double start_proj = 0.0;  // minimum projection (sigma = 0)
    double end_proj = 1.0;    // maximum projection (sigma = 1)
    std::size_t start_index = 0;
    std::size_t end_index = 0;
    std::vector<double> sigma;  // one per trajectory sample
};

/// Principal motion direction of the trajectory and the normalized projection
/// of every sample onto it. Throws DegenerateControlError for fewer than two
/// samples, zero variance or a projection range below 1e-9.
ControlSignal extract_signal(std::span<const Vec3> trajectory);

// ---------------------------------------------------------------------------
// Control rig

struct ControlAttribute {
    std::string name;
    int slot = 1;
    std::vector<std::size_t> control_set;
    std::vector<double> times;       // sample times of the trajectory, ascending
    std::vector<Vec3> trajectory;    // control-set centroid at each time
    ControlSignal signal;
    Mlp net;  // encode(sigma) + encode(normalized mu) -> 13 offsets

    /// Extracted signal at time t, linearly interpolated and clamped to the sampled range.
    double sigma_at(double t) const;
};

struct ControlRig {
    int sigma_freqs = 4;
    int position_freqs = 10;
    double gate = 0.5;  // offsets apply to Gaussians with mask mass above this
    SceneBox box;
    std::vector<ControlAttribute> attributes;

    std::size_t attribute_count() const { return attributes.size(); }
    int input_width() const { return encoded_width(1, sigma_freqs) + encoded_width(3, position_freqs); }
    /// Extracted signal values of every attribute at time t.
    std::vector<double> sigmas_at(double t) const;
    void validate(const GaussianCloud& cloud) const;
};

struct RigOptions {
    int hidden_width = 64;
    int hidden_layers = 2;
    int sigma_freqs = 4;
    int position_freqs = 10;
    ControlSetOptions control_set;
};

/// Control sets, trajectories, signals and zero-initialized networks for every
/// mask attribute. times are the training times.
ControlRig build_control_rig(const GaussianCloud& cloud, const DeformationModel& deformation,
                             std::span<const double> times, const std::vector<std::string>& attribute_names,
                             const SceneBox& box, const RigOptions& options, Rng& rng);

/// Forward activations of the control networks.
struct ControlTape {
    std::vector<std::vector<std::size_t>> gated;  // per attribute
    std::vector<MlpTape> tapes;
};

/// Sum over attributes of the network offsets, applied only to the gated Gaussians.
/// Throws InputError unless sigma has one entry per attribute, each in [0, 1].
Offsets control_offsets(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma,
                        ControlTape* tape = nullptr);

/// Accumulates network parameter gradients (grads[a] for attribute a).
void control_offsets_backward(const ControlRig& rig, const ControlTape& tape, const Offsets& grad_offsets,
                              std::vector<std::vector<double>>& grads);

GaussianCloud apply_controls(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma);

Image render_with_controls(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma,
                           const Camera& camera, const Vec3& background, const RenderSettings& settings = {});

// ---------------------------------------------------------------------------
// Re-alignment and fine-tuning

struct ControlTrainConfig {
    long iters = 800;
    double lr_start = 1e-2;
    double lr_end = 1e-4;
    double lambda_dssim = 0.2;
    double lambda_offset = 1.0;  // weight of the offset regression against the deformation field
    Vec3 background = Vec3::Ones();
    std::uint64_t seed = 1;
};

/// Trains the control networks so that controlled renders at the extracted
/// signals reproduce the dynamic model's renders of the training frames.
/// cloud and deformation are not modified. losses (optional) receives one value per iteration.
void train_control(const GaussianCloud& cloud, const DeformationModel& deformation, ControlRig& rig,
                   const Dataset& dataset, const ControlTrainConfig& config, std::vector<double>* losses = nullptr);

struct FinetuneConfig {
    long iters = 800;
    double lr = 1e-6;
    double lambda_dssim = 0.2;
    Vec3 background = Vec3::Ones();
    std::uint64_t seed = 2;
};

/// Joint photometric optimization of the cloud and the control networks
/// against the training images, sigma at the extracted per-time values.
void finetune_all(GaussianCloud& cloud, ControlRig& rig, const Dataset& dataset, const FinetuneConfig& config,
                  std::vector<double>* losses = nullptr);

}  // namespace cogs
