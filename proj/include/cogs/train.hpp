// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/dataset.hpp"
#include "cogs/deformation.hpp"
#include "cogs/nn.hpp"
#include "cogs/regularizers.hpp"
#include "cogs/render.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace cogs {

struct TrainConfig {
    // Schedule. iteration_scale multiplies the three counts below.
    long n_init = 10000;
    long warmup_iters = 3000;
    long reg_start_iters = 15000;
    long total_iters = 50000;
    double iteration_scale = 1.0;

    // Gaussian learning rates. The position rate is multiplied by the scene
    // extent and decays exponentially over the whole run.
    double position_lr_init = 1.6e-4;
    double position_lr_final = 1.6e-6;
    double sh_dc_lr = 2.5e-3;
    double sh_rest_lr = 2.5e-3 / 20.0;
    double opacity_lr = 0.05;
    double scale_lr = 5e-3;
    double rotation_lr = 1e-3;

    // Deformation networks.
    double deform_lr_start = 1e-3;
    double deform_lr_end = 1e-6;
    int deform_hidden_width = 128;
    int deform_hidden_layers = 4;
    int position_freqs = 10;
    int time_freqs = 6;

    // Loss weights.
    double lambda_dssim = 0.2;
    double lambda_norm = 0.01;
    double lambda_diff = 0.1;
    double lambda_rigid = 0.1;
    double lambda_rot = 0.1;
    int knn_k = 20;
    double lambda_w = 2000.0;

    // Density control.
    long densify_interval = 300;
    double densify_grad_threshold = 0.0002;
    double prune_opacity = 0.005;
    double densify_scale_fraction = 0.01;  // clone below this fraction of the extent, split above
    long max_gaussians = 200000;

    // Scene.
    int sh_degree = 1;
    double box_min_x = -1.5, box_min_y = -1.5, box_min_z = -1.5;
    double box_max_x = 1.5, box_max_y = 1.5, box_max_z = 1.5;
    double background_r = 1.0, background_g = 1.0, background_b = 1.0;

    long warmup() const;
    long reg_start() const;
    long total() const;
    SceneBox scene_box() const;
    Vec3 background() const;

    /// Throws ConfigError unless 0 <= warmup <= reg_start <= total, rates are
    /// positive and sizes are sane.
    void validate() const;

    /// Calls f(name, field) for every numeric field, in declaration order.
    template <typename F>
    void visit(F&& f);
    template <typename F>
    void visit(F&& f) const {
        const_cast<TrainConfig*>(this)->visit([&](const char* name, auto& v) { f(name, std::as_const(v)); });
    }
};

template <typename F>
void TrainConfig::visit(F&& f) {
    f("n_init", n_init);
    f("warmup_iters", warmup_iters);
    f("reg_start_iters", reg_start_iters);
    f("total_iters", total_iters);
    f("iteration_scale", iteration_scale);
    f("position_lr_init", position_lr_init);
    f("position_lr_final", position_lr_final);
    f("sh_dc_lr", sh_dc_lr);
    f("sh_rest_lr", sh_rest_lr);
    f("opacity_lr", opacity_lr);
    f("scale_lr", scale_lr);
    f("rotation_lr", rotation_lr);
    f("deform_lr_start", deform_lr_start);
    f("deform_lr_end", deform_lr_end);
    f("deform_hidden_width", deform_hidden_width);
    f("deform_hidden_layers", deform_hidden_layers);
    f("position_freqs", position_freqs);
    f("time_freqs", time_freqs);
    f("lambda_dssim", lambda_dssim);
    f("lambda_norm", lambda_norm);
    f("lambda_diff", lambda_diff);
    f("lambda_rigid", lambda_rigid);
    f("lambda_rot", lambda_rot);
    f("knn_k", knn_k);
    f("lambda_w", lambda_w);
    f("densify_interval", densify_interval);
    f("densify_grad_threshold", densify_grad_threshold);
    f("prune_opacity", prune_opacity);
    f("densify_scale_fraction", densify_scale_fraction);
    f("max_gaussians", max_gaussians);
    f("sh_degree", sh_degree);
    f("box_min_x", box_min_x);
    f("box_min_y", box_min_y);
    f("box_min_z", box_min_z);
    f("box_max_x", box_max_x);
    f("box_max_y", box_max_y);
    f("box_max_z", box_max_z);
    f("background_r", background_r);
    f("background_g", background_g);
    f("background_b", background_b);
}

// ---------------------------------------------------------------------------

/// n Gaussians uniform in the box with identity rotation, opacity 0.1, grey
/// color and isotropic scale equal to the mean distance to the 3 nearest
/// other points. Values are rounded to float32.
GaussianCloud init_cloud(const SceneBox& box, std::size_t n, int sh_degree, Rng& rng);

struct PhotometricLoss {
    double value = 0.0;
    Image grad;
};

/// (1 - lambda_dssim) * mean |a - b| + lambda_dssim * (1 - ssim(a, b)) / 2.
PhotometricLoss photometric_loss(const Image& rendered, const Image& target, double lambda_dssim);

/// 1.1 times the largest camera distance from the mean camera center.
double scene_extent(const Dataset& dataset);

/// Running screen-space gradient statistics used for densification.
struct DensifyStats {
    std::vector<double> grad_sum;  // sum of |d loss / d mean2d| in normalized device units
    std::vector<int> count;

    void reset(std::size_t n);
    void accumulate(const CloudGradients& grads, int width, int height);
};

struct DensifyResult {
    std::size_t cloned = 0;
    std::size_t split = 0;
    std::size_t pruned = 0;
    // For every Gaussian of the output, the index of its source in the input
    // and whether it was created here (new optimizer moments).
    std::vector<std::size_t> source;
    std::vector<bool> fresh;
};

/// Clones (small) or splits into two children with scale / 1.6 (large) every
/// Gaussian whose mean screen gradient reaches the threshold, then removes
/// those with opacity below the prune floor.
DensifyResult densify_and_prune(GaussianCloud& cloud, const DensifyStats& stats, const TrainConfig& config,
                                double extent, Rng& rng);

// ---------------------------------------------------------------------------

struct LossRow {
    long iter = 0;
    double photometric = 0.0;
    double norm = 0.0;
    double diff = 0.0;
    double rigid = 0.0;
    double rot = 0.0;
    double mask = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

/// Column header of the loss log.
constexpr const char* kLossLogHeader = "iter,photometric,norm,diff,rigid,rot,mask,total,lr";
void write_loss_row(std::ostream& out, const LossRow& row);

/// Adam state for every Gaussian parameter array.
struct CloudOptimizer {
    AdamState positions, rotations, log_scales, opacity_logits, sh_coeffs;

    static CloudOptimizer create(const GaussianCloud& cloud);
    /// Keeps the moments aligned after densification (new Gaussians start at zero).
    void remap(const GaussianCloud& before, const DensifyResult& result);
};

/// Full resumable training state.
struct TrainerState {
    long iteration = 0;
    GaussianCloud cloud;
    DeformationModel model;
    CloudOptimizer cloud_opt;
    std::array<AdamState, 4> net_opt;
    DensifyStats densify;
    std::vector<std::size_t> epoch_order;  // frame indices of the current epoch
    std::size_t epoch_pos = 0;
    Rng rng;
    std::vector<Vec3> neighbor_positions;  // first-time snapshot; empty until regularization starts
};

/// Warmup (static fit), then deformation, then regularized deformation.
class DynamicTrainer {
public:
    DynamicTrainer(const Dataset& dataset, const TrainConfig& config, std::uint64_t seed);
    /// Resumes from a saved state; the dataset and config must match the original run.
    DynamicTrainer(const Dataset& dataset, const TrainConfig& config, TrainerState state);

    /// One iteration; returns its losses.
    LossRow step();
    /// Runs until iteration() == config.total(); on_row is called after every step.
    void run(const std::function<void(const LossRow&)>& on_row = {});

    long iteration() const { return state_.iteration; }
    bool finished() const { return state_.iteration >= config_.total(); }
    const TrainerState& state() const { return state_; }
    const TrainConfig& config() const { return config_; }
    const NeighborTable* neighbors() const { return neighbors_ ? &*neighbors_ : nullptr; }
    double extent() const { return extent_; }

    /// Canonical cloud deformed to time t.
    GaussianCloud cloud_at(double t) const;

private:
    std::size_t next_frame();
    double previous_time(double t) const;
    void build_neighbor_table();

    const Dataset& dataset_;
    TrainConfig config_;
    TrainerState state_;
    double extent_ = 1.0;
    std::vector<double> times_;
    std::optional<NeighborTable> neighbors_;
};

}  // namespace cogs
