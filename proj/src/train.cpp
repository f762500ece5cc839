// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/train.hpp"

#include "cogs/errors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

namespace cogs {

namespace {

long scaled(long count, double factor) { return std::lround(static_cast<double>(count) * factor); }

void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
}

}  // namespace

long TrainConfig::warmup() const { return scaled(warmup_iters, iteration_scale); }
long TrainConfig::reg_start() const { return scaled(reg_start_iters, iteration_scale); }
long TrainConfig::total() const { return scaled(total_iters, iteration_scale); }

SceneBox TrainConfig::scene_box() const {
    return {Vec3(box_min_x, box_min_y, box_min_z), Vec3(box_max_x, box_max_y, box_max_z)};
}

Vec3 TrainConfig::background() const { return {background_r, background_g, background_b}; }

void TrainConfig::validate() const {
    if (!(iteration_scale > 0.0)) throw ConfigError("iteration_scale must be positive");
    if (warmup() < 0 || warmup() > reg_start() || reg_start() > total()) {
        throw ConfigError("schedule must satisfy 0 <= warmup <= reg_start <= total");
    }
    if (n_init < 1) throw ConfigError("n_init must be at least 1");
    require_positive(position_lr_init, "position_lr_init");
    require_positive(position_lr_final, "position_lr_final");
    require_positive(sh_dc_lr, "sh_dc_lr");
    require_positive(sh_rest_lr, "sh_rest_lr");
    require_positive(opacity_lr, "opacity_lr");
    require_positive(scale_lr, "scale_lr");
    require_positive(rotation_lr, "rotation_lr");
    require_positive(deform_lr_start, "deform_lr_start");
    require_positive(deform_lr_end, "deform_lr_end");
    if (deform_hidden_width < 1 || deform_hidden_layers < 0) throw ConfigError("deformation network size must be positive");
    if (position_freqs < 0 || time_freqs < 0) throw ConfigError("encoding frequencies must be non-negative");
    if (lambda_dssim < 0.0 || lambda_dssim > 1.0) throw ConfigError("lambda_dssim must lie in [0, 1]");
    if (lambda_norm < 0.0 || lambda_diff < 0.0 || lambda_rigid < 0.0 || lambda_rot < 0.0) {
        throw ConfigError("loss weights must be non-negative");
    }
    if (knn_k < 1) throw ConfigError("knn_k must be at least 1");
    if (lambda_w < 0.0) throw ConfigError("lambda_w must be non-negative");
    if (densify_interval < 1) throw ConfigError("densify_interval must be at least 1");
    if (max_gaussians < n_init) throw ConfigError("max_gaussians must be at least n_init");
    if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ConfigError("sh_degree must lie in [0, 3]");
    scene_box().validate();
}

// ---------------------------------------------------------------------------

GaussianCloud init_cloud(const SceneBox& box, std::size_t n, int sh_degree, Rng& rng) {
    box.validate();
    GaussianCloud cloud;
    cloud.sh_degree = sh_degree;
    cloud.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int d = 0; d < 3; ++d) cloud.positions[i][d] = uniform(rng, box.min_corner[d], box.max_corner[d]);
        cloud.opacity_logits[i] = logit(0.1);
    }
    round_to_f32(cloud);

    std::vector<double> scale(n, 0.01 * box.half_extent().norm());
    if (n >= 4) {
        const NeighborTable nn = build_neighbors(cloud.positions, 3, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (int s = 0; s < 3; ++s) {
                sum += (cloud.positions[static_cast<std::size_t>(nn.neighbor(i, s))] - cloud.positions[i]).norm();
            }
            if (sum > 0.0) scale[i] = sum / 3.0;
        }
    }
    for (std::size_t i = 0; i < n; ++i) cloud.log_scales[i] = Vec3::Constant(std::log(scale[i]));
    round_to_f32(cloud);
    return cloud;
}

PhotometricLoss photometric_loss(const Image& rendered, const Image& target, double lambda_dssim) {
    if (!rendered.same_shape(target)) throw ConfigError("photometric_loss: image shapes differ");
    PhotometricLoss out;
    out.grad = rendered;
    const double n = static_cast<double>(rendered.data.size());
    double l1 = 0.0;
    for (std::size_t k = 0; k < rendered.data.size(); ++k) {
        const double d = rendered.data[k] - target.data[k];
        l1 += std::abs(d);
        out.grad.data[k] = (1.0 - lambda_dssim) * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
    out.value = (1.0 - lambda_dssim) * l1 / n;
    if (lambda_dssim > 0.0) {
        Image g_ssim;
        const double s = ssim_with_grad(rendered, target, g_ssim);
        out.value += lambda_dssim * 0.5 * (1.0 - s);
        for (std::size_t k = 0; k < out.grad.data.size(); ++k) out.grad.data[k] -= 0.5 * lambda_dssim * g_ssim.data[k];
    }
    return out;
}

double scene_extent(const Dataset& dataset) {
    Vec3 mean = Vec3::Zero();
    for (const Frame& f : dataset.frames) mean += f.camera.center();
    mean /= static_cast<double>(std::max<std::size_t>(dataset.frames.size(), 1));
    double radius = 0.0;
    for (const Frame& f : dataset.frames) radius = std::max(radius, (f.camera.center() - mean).norm());
    return radius > 0.0 ? 1.1 * radius : 1.0;
}

// ---------------------------------------------------------------------------

void DensifyStats::reset(std::size_t n) {
    grad_sum.assign(n, 0.0);
    count.assign(n, 0);
}

void DensifyStats::accumulate(const CloudGradients& g, int width, int height) {
    if (grad_sum.size() != g.mean2d.size()) reset(g.mean2d.size());
    for (std::size_t i = 0; i < g.mean2d.size(); ++i) {
        if (!g.visible[i]) continue;
        const Vec2 ndc(g.mean2d[i][0] * 0.5 * width, g.mean2d[i][1] * 0.5 * height);
        grad_sum[i] = round_to_f32(grad_sum[i] + ndc.norm());
        ++count[i];
    }
}

DensifyResult densify_and_prune(GaussianCloud& cloud, const DensifyStats& stats, const TrainConfig& config,
                                double extent, Rng& rng) {
    const std::size_t n = cloud.count();
    if (stats.grad_sum.size() != n || stats.count.size() != n) throw StateError("densify statistics are stale");
    GaussianCloud out;
    out.sh_degree = cloud.sh_degree;
    out.mask_count = cloud.mask_count;
    DensifyResult result;
    const auto budget = static_cast<std::size_t>(config.max_gaussians);
    std::size_t growth_left = budget > n ? budget - n : 0;

    std::vector<std::size_t> children;  // sources of new Gaussians, appended after the originals
    std::vector<Vec3> child_positions;
    std::vector<bool> drop(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        if (stats.count[i] == 0) continue;
        const double mean = stats.grad_sum[i] / stats.count[i];
        if (mean < config.densify_grad_threshold || growth_left == 0) continue;
        const Vec3 scale = cloud.log_scales[i].array().exp();
        if (scale.maxCoeff() <= config.densify_scale_fraction * extent) {
            children.push_back(i);
            child_positions.push_back(cloud.positions[i]);
            ++result.cloned;
            --growth_left;
        } else {
            const Mat3 r = rotation_matrix(normalize_quaternion(cloud.rotations[i]));
            for (int c = 0; c < 2; ++c) {
                const Vec3 z(normal(rng), normal(rng), normal(rng));
                children.push_back(i);
                child_positions.push_back(cloud.positions[i] + r * scale.cwiseProduct(z));
            }
            drop[i] = true;
            ++result.split;
            --growth_left;  // two children replace one parent
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (drop[i]) continue;
        out.push_back_from(cloud, i);
        result.source.push_back(i);
        result.fresh.push_back(false);
    }
    for (std::size_t c = 0; c < children.size(); ++c) {
        const std::size_t i = children[c];
        out.push_back_from(cloud, i);
        const std::size_t j = out.count() - 1;
        out.positions[j] = child_positions[c];
        if (drop[i]) out.log_scales[j] = cloud.log_scales[i].array() - std::log(1.6);
        result.source.push_back(i);
        result.fresh.push_back(true);
    }

    std::vector<bool> keep(out.count());
    for (std::size_t j = 0; j < out.count(); ++j) {
        keep[j] = sigmoid(out.opacity_logits[j]) >= config.prune_opacity;
        if (!keep[j]) ++result.pruned;
    }
    if (result.pruned == out.count()) {
        throw StateError("densify_and_prune would remove every Gaussian");
    }
    out.compact(keep);
    std::size_t w = 0;
    for (std::size_t j = 0; j < keep.size(); ++j) {
        if (!keep[j]) continue;
        result.source[w] = result.source[j];
        result.fresh[w] = result.fresh[j];
        ++w;
    }
    result.source.resize(w);
    result.fresh.resize(w);
    round_to_f32(out);
    cloud = std::move(out);
    return result;
}

// ---------------------------------------------------------------------------

void write_loss_row(std::ostream& out, const LossRow& r) {
    const auto flags = out.flags();
    const auto prec = out.precision();
    out << std::setprecision(9) << r.iter << ',' << r.photometric << ',' << r.norm << ',' << r.diff << ','
        << r.rigid << ',' << r.rot << ',' << r.mask << ',' << r.total << ',' << r.lr << '\n';
    out.flags(flags);
    out.precision(prec);
}

namespace {

AdamState f32_adam(std::size_t n) {
    AdamState s(n);
    s.round_f32 = true;
    return s;
}

void remap_state(AdamState& s, std::size_t width, const DensifyResult& r) {
    std::vector<double> m(r.source.size() * width, 0.0), v(r.source.size() * width, 0.0);
    for (std::size_t j = 0; j < r.source.size(); ++j) {
        if (r.fresh[j]) continue;
        const std::size_t i = r.source[j];
        std::copy_n(s.m.begin() + static_cast<std::ptrdiff_t>(i * width), width, m.begin() + static_cast<std::ptrdiff_t>(j * width));
        std::copy_n(s.v.begin() + static_cast<std::ptrdiff_t>(i * width), width, v.begin() + static_cast<std::ptrdiff_t>(j * width));
    }
    s.m = std::move(m);
    s.v = std::move(v);
}

std::span<double> flat(std::vector<Vec3>& v) { return {v.data()->data(), v.size() * 3}; }
std::span<double> flat(std::vector<Vec4>& v) { return {v.data()->data(), v.size() * 4}; }

}  // namespace

CloudOptimizer CloudOptimizer::create(const GaussianCloud& cloud) {
    CloudOptimizer o;
    o.positions = f32_adam(cloud.count() * 3);
    o.rotations = f32_adam(cloud.count() * 4);
    o.log_scales = f32_adam(cloud.count() * 3);
    o.opacity_logits = f32_adam(cloud.count());
    o.sh_coeffs = f32_adam(cloud.sh_coeffs.size());
    return o;
}

void CloudOptimizer::remap(const GaussianCloud& before, const DensifyResult& r) {
    remap_state(positions, 3, r);
    remap_state(rotations, 4, r);
    remap_state(log_scales, 3, r);
    remap_state(opacity_logits, 1, r);
    remap_state(sh_coeffs, static_cast<std::size_t>(before.sh_stride()), r);
}

// ---------------------------------------------------------------------------

DynamicTrainer::DynamicTrainer(const Dataset& dataset, const TrainConfig& config, std::uint64_t seed)
    : dataset_(dataset), config_(config) {
    config_.validate();
    dataset_.validate();
    state_.rng.seed(seed);
    state_.cloud = init_cloud(config_.scene_box(), static_cast<std::size_t>(config_.n_init), config_.sh_degree,
                              state_.rng);
    state_.model = DeformationModel::create(config_.deform_hidden_width, config_.deform_hidden_layers,
                                            config_.position_freqs, config_.time_freqs, config_.scene_box(),
                                            state_.rng);
    round_to_f32(state_.cloud);
    state_.cloud_opt = CloudOptimizer::create(state_.cloud);
    for (std::size_t k = 0; k < 4; ++k) state_.net_opt[k] = f32_adam(state_.model.nets[k].params.size());
    state_.densify.reset(state_.cloud.count());
    extent_ = scene_extent(dataset_);
    times_ = dataset_.times();
}

DynamicTrainer::DynamicTrainer(const Dataset& dataset, const TrainConfig& config, TrainerState state)
    : dataset_(dataset), config_(config), state_(std::move(state)) {
    config_.validate();
    dataset_.validate();
    state_.cloud.validate();
    state_.model.validate();
    if (state_.cloud_opt.positions.size() != state_.cloud.count() * 3 ||
        state_.cloud_opt.sh_coeffs.size() != state_.cloud.sh_coeffs.size()) {
        throw StateError("optimizer state does not match the Gaussian count");
    }
    for (std::size_t k = 0; k < 4; ++k) {
        if (state_.net_opt[k].size() != state_.model.nets[k].params.size()) {
            throw StateError("network optimizer state does not match the network");
        }
    }
    for (std::size_t f : state_.epoch_order) {
        if (f >= dataset_.frames.size()) throw StateError("epoch order references a missing frame");
    }
    extent_ = scene_extent(dataset_);
    times_ = dataset_.times();
    if (!state_.neighbor_positions.empty()) {
        if (state_.neighbor_positions.size() != state_.cloud.count()) {
            throw StateError("neighbor snapshot does not match the Gaussian count");
        }
        neighbors_ = build_neighbors(state_.neighbor_positions, config_.knn_k, config_.lambda_w);
    }
}

GaussianCloud DynamicTrainer::cloud_at(double t) const { return deform(state_.cloud, state_.model, t); }

std::size_t DynamicTrainer::next_frame() {
    if (state_.epoch_pos >= state_.epoch_order.size()) {
        state_.epoch_order.resize(dataset_.frames.size());
        std::iota(state_.epoch_order.begin(), state_.epoch_order.end(), std::size_t{0});
        shuffle(state_.epoch_order.begin(), state_.epoch_order.end(), state_.rng);
        state_.epoch_pos = 0;
    }
    return state_.epoch_order[state_.epoch_pos++];
}

double DynamicTrainer::previous_time(double t) const {
    const auto it = std::lower_bound(times_.begin(), times_.end(), t);
    const auto idx = static_cast<std::size_t>(it - times_.begin());
    if (idx > 0) return times_[idx - 1];
    return times_.size() > 1 ? times_[1] : t;
}

void DynamicTrainer::build_neighbor_table() {
    if (state_.cloud.count() < static_cast<std::size_t>(config_.knn_k) + 1) {
        throw StateError("too few Gaussians for the neighbor table");
    }
    GaussianCloud first = cloud_at(times_.front());
    state_.neighbor_positions = first.positions;
    for (Vec3& p : state_.neighbor_positions) {
        for (int d = 0; d < 3; ++d) p[d] = round_to_f32(p[d]);
    }
    neighbors_ = build_neighbors(state_.neighbor_positions, config_.knn_k, config_.lambda_w);
}

LossRow DynamicTrainer::step() {
    if (finished()) throw StateError("training already finished");
    const long it = state_.iteration;
    const bool dynamic = it >= config_.warmup();
    const bool regularize = it >= config_.reg_start() && times_.size() > 1;
    if (regularize && !neighbors_) build_neighbor_table();

    const Frame& frame = dataset_.frames[next_frame()];
    const GaussianCloud& base = state_.cloud;
    const std::size_t n = base.count();

    LossRow row;
    row.iter = it;

    DeformTape tape;
    Offsets offsets = Offsets::zeros(n);
    if (dynamic) offsets = evaluate_offsets(state_.model, base, frame.time, &tape);
    const GaussianCloud deformed = dynamic ? apply_offsets(base, offsets) : base;

    const RenderOutput rendered = render(deformed, frame.camera, RenderMode::color(), config_.background());
    const PhotometricLoss photo = photometric_loss(rendered.image, frame.image, config_.lambda_dssim);
    row.photometric = photo.value;
    CloudGradients g_def = render_backward(deformed, frame.camera, RenderMode::color(), config_.background(), photo.grad);
    if (it < config_.reg_start()) state_.densify.accumulate(g_def, dataset_.width, dataset_.height);

    CloudGradients g_base = CloudGradients::zeros_like(base);
    Offsets g_off = Offsets::zeros(n);
    std::array<std::vector<double>, 4> g_nets;
    for (std::size_t k = 0; k < 4; ++k) g_nets[k].assign(state_.model.nets[k].params.size(), 0.0);

    if (dynamic) {
        const PositionLoss norm = loss_norm(offsets.position);
        row.norm = norm.value;
        for (std::size_t i = 0; i < n; ++i) g_off.position[i] += config_.lambda_norm * norm.grad[i];
    }
    if (regularize) {
        const double t_prev = previous_time(frame.time);
        DeformTape tape_prev;
        const Offsets off_prev = evaluate_offsets(state_.model, base, t_prev, &tape_prev);
        const GaussianCloud prev = apply_offsets(base, off_prev);
        const PairLoss diff = loss_diff(deformed.positions, prev.positions, *neighbors_);
        const PairLoss rigid = loss_rigid(deformed.positions, prev.positions, deformed.rotations, prev.rotations,
                                          *neighbors_);
        const PairLoss rot = loss_rot(deformed.rotations, prev.rotations, *neighbors_);
        row.diff = diff.value;
        row.rigid = rigid.value;
        row.rot = rot.value;

        CloudGradients g_prev = CloudGradients::zeros_like(base);
        for (std::size_t i = 0; i < n; ++i) {
            g_def.positions[i] += config_.lambda_diff * diff.grad_positions_t[i] +
                                  config_.lambda_rigid * rigid.grad_positions_t[i];
            g_def.rotations[i] += config_.lambda_rigid * rigid.grad_rotations_t[i] +
                                  config_.lambda_rot * rot.grad_rotations_t[i];
            g_prev.positions[i] += config_.lambda_diff * diff.grad_positions_prev[i] +
                                   config_.lambda_rigid * rigid.grad_positions_prev[i];
            g_prev.rotations[i] += config_.lambda_rigid * rigid.grad_rotations_prev[i] +
                                   config_.lambda_rot * rot.grad_rotations_prev[i];
        }
        Offsets g_off_prev = Offsets::zeros(n);
        apply_offsets_backward(base, off_prev, g_prev, &g_base, &g_off_prev);
        offsets_backward(state_.model, tape_prev, g_off_prev, g_nets);
    }
    apply_offsets_backward(base, offsets, g_def, &g_base, &g_off);
    if (dynamic) offsets_backward(state_.model, tape, g_off, g_nets);

    row.total = row.photometric + config_.lambda_norm * row.norm + config_.lambda_diff * row.diff +
                config_.lambda_rigid * row.rigid + config_.lambda_rot * row.rot;

    // Parameter updates.
    GaussianCloud& cloud = state_.cloud;
    CloudOptimizer& opt = state_.cloud_opt;
    const double pos_lr = lr_exponential(it, config_.total(), config_.position_lr_init * extent_,
                                         config_.position_lr_final * extent_);
    row.lr = pos_lr;
    adam_step(flat(cloud.positions), flat(g_base.positions), opt.positions, pos_lr);
    adam_step(flat(cloud.rotations), flat(g_base.rotations), opt.rotations, config_.rotation_lr);
    adam_step(flat(cloud.log_scales), flat(g_base.log_scales), opt.log_scales, config_.scale_lr);
    adam_step(cloud.opacity_logits, g_base.opacity_logits, opt.opacity_logits, config_.opacity_lr);
    {
        const auto stride = static_cast<std::size_t>(cloud.sh_stride());
        std::vector<double> scale(cloud.sh_coeffs.size(), config_.sh_rest_lr / config_.sh_dc_lr);
        for (std::size_t i = 0; i < n; ++i) std::fill_n(scale.begin() + static_cast<std::ptrdiff_t>(i * stride), 3, 1.0);
        adam_step(cloud.sh_coeffs, g_base.sh_coeffs, opt.sh_coeffs, config_.sh_dc_lr, scale);
    }
    for (Vec4& q : cloud.rotations) {
        q = normalize_quaternion(q);
        for (int d = 0; d < 4; ++d) q[d] = round_to_f32(q[d]);
    }
    if (dynamic) {
        const double net_lr = lr_exponential(it - config_.warmup(), config_.total() - config_.warmup(),
                                             config_.deform_lr_start, config_.deform_lr_end);
        for (std::size_t k = 0; k < 4; ++k) {
            adam_step(state_.model.nets[k].params, g_nets[k], state_.net_opt[k], net_lr);
        }
    }

    state_.iteration = it + 1;
    if (state_.iteration < config_.reg_start() && state_.iteration % config_.densify_interval == 0) {
        const GaussianCloud before = cloud;
        const DensifyResult r = densify_and_prune(cloud, state_.densify, config_, extent_, state_.rng);
        opt.remap(before, r);
        state_.densify.reset(cloud.count());
    }
    return row;
}

void DynamicTrainer::run(const std::function<void(const LossRow&)>& on_row) {
    while (!finished()) {
        const LossRow row = step();
        if (on_row) on_row(row);
    }
}

}  // namespace cogs
