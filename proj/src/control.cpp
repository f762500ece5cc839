// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/control.hpp"

#include "cogs/errors.hpp"
#include "cogs/regularizers.hpp"
#include "cogs/train.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace cogs {

namespace {

std::span<double> flat(std::vector<Vec3>& v) { return {v.data()->data(), v.size() * 3}; }
std::span<double> flat(std::vector<Vec4>& v) { return {v.data()->data(), v.size() * 4}; }

AdamState f32_adam(std::size_t n) {
    AdamState s(n);
    s.round_f32 = true;
    return s;
}

std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order.begin(), order.end(), rng);
    return order;
}

}  // namespace

double mask_mass(const GaussianCloud& cloud, std::size_t i, int slot) {
    if (!cloud.has_masks()) throw StateError("cloud has no mask logits");
    if (slot < 0 || slot >= cloud.mask_count) throw ConfigError("mask slot out of range");
    std::vector<double> p(static_cast<std::size_t>(cloud.mask_count));
    softmax(cloud.mask(i), p);
    return p[static_cast<std::size_t>(slot)];
}

GaussianCloud learn_masks(const GaussianCloud& cloud, const DeformationModel& deformation, const Dataset& dataset,
                          const MaskSupervision& sup, const MaskLearnConfig& config, std::vector<double>* losses,
                          const RenderSettings& settings) {
    if (sup.attribute_count() == 0) throw ConfigError("mask learning needs at least one attribute");
    sup.validate(dataset);
    if (config.iters < 0) throw ConfigError("mask learning iteration count must be non-negative");
    const int slots = static_cast<int>(sup.attribute_count()) + 1;

    GaussianCloud out = cloud;
    out.init_masks(slots);

    // Ground truth per supervised frame and slot; slot 0 and unlabeled attributes are zero.
    std::map<std::size_t, std::vector<Image>> gt;
    for (std::size_t a = 0; a < sup.attribute_count(); ++a) {
        for (const auto& [frame, img] : sup.masks[a]) {
            auto& v = gt[frame];
            if (v.empty()) v.assign(static_cast<std::size_t>(slots), Image(dataset.width, dataset.height, 1));
            v[a + 1] = img;
        }
    }
    struct Supervised {
        const Frame* frame;
        GaussianCloud deformed;
        const std::vector<Image>* gt;
    };
    std::vector<Supervised> frames;
    GaussianCloud plain = cloud;
    plain.mask_count = 0;
    plain.mask_logits.clear();
    for (const auto& [k, images] : gt) {
        const Frame& f = dataset.frames[k];
        frames.push_back({&f, deform(plain, deformation, f.time), &images});
    }

    AdamState opt = f32_adam(out.mask_logits.size());
    std::vector<Image> rendered(static_cast<std::size_t>(slots));
    for (long it = 0; it < config.iters; ++it) {
        Supervised& s = frames[static_cast<std::size_t>(it) % frames.size()];
        s.deformed.mask_count = slots;
        s.deformed.mask_logits = out.mask_logits;
        for (int k = 0; k < slots; ++k) {
            rendered[static_cast<std::size_t>(k)] =
                render(s.deformed, s.frame->camera, RenderMode::mask(k), Vec3::Zero(), settings).image;
        }
        const MaskLoss loss = loss_mask(rendered, *s.gt);
        if (losses) losses->push_back(loss.value);
        std::vector<double> grad(out.mask_logits.size(), 0.0);
        for (int k = 0; k < slots; ++k) {
            const CloudGradients g = render_backward(s.deformed, s.frame->camera, RenderMode::mask(k), Vec3::Zero(),
                                                     loss.grad[static_cast<std::size_t>(k)], settings);
            for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += g.mask_logits[j];
        }
        adam_step(out.mask_logits, grad, opt, it < config.lr_switch ? config.lr : config.lr_after);
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<double> path_lengths(const GaussianCloud& cloud, const DeformationModel& deformation,
                                 std::span<const double> times) {
    std::vector<double> len(cloud.count(), 0.0);
    if (times.empty()) return len;
    std::vector<Vec3> prev = evaluate_offsets(deformation, cloud, times[0]).position;
    for (std::size_t k = 1; k < times.size(); ++k) {
        std::vector<Vec3> cur = evaluate_offsets(deformation, cloud, times[k]).position;
        for (std::size_t i = 0; i < cloud.count(); ++i) len[i] += (cur[i] - prev[i]).norm();
        prev = std::move(cur);
    }
    return len;
}

std::vector<std::size_t> select_control_set(const GaussianCloud& cloud, const DeformationModel& deformation,
                                            std::span<const double> times, int slot,
                                            const ControlSetOptions& options) {
    if (!cloud.has_masks()) throw StateError("control set selection needs mask logits");
    if (slot < 1 || slot >= cloud.mask_count) throw ConfigError("attribute slot out of range");
    if (!options.manual.empty()) {
        std::vector<std::size_t> g = options.manual;
        std::sort(g.begin(), g.end());
        if (std::adjacent_find(g.begin(), g.end()) != g.end()) throw ConfigError("manual control set has duplicates");
        if (g.back() >= cloud.count()) throw ConfigError("manual control set references a missing Gaussian");
        return options.manual;
    }
    if (!(options.top_fraction > 0.0 && options.top_fraction <= 1.0)) {
        throw ConfigError("top_fraction must lie in (0, 1]");
    }
    std::vector<std::size_t> qualifying;
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        if (mask_mass(cloud, i, slot) > 0.5) qualifying.push_back(i);
    }
    if (qualifying.empty()) {
        throw DegenerateControlError("no Gaussian has more than half its mask mass on attribute slot " +
                                     std::to_string(slot));
    }
    const std::vector<double> len = path_lengths(cloud, deformation, times);
    std::stable_sort(qualifying.begin(), qualifying.end(),
                     [&](std::size_t a, std::size_t b) { return len[a] > len[b]; });
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(options.top_fraction * static_cast<double>(qualifying.size()) + 1e-9)));
    qualifying.resize(std::min(keep, qualifying.size()));
    std::sort(qualifying.begin(), qualifying.end());
    return qualifying;
}

ControlSignal extract_signal(std::span<const Vec3> traj) {
    if (traj.size() < 2) throw DegenerateControlError("signal extraction needs at least two samples");
    ControlSignal s;
    for (const Vec3& p : traj) s.center += p;
    s.center /= static_cast<double>(traj.size());
    Mat3 cov = Mat3::Zero();
    for (const Vec3& p : traj) cov += (p - s.center) * (p - s.center).transpose();
    cov /= static_cast<double>(traj.size());
    if (!(cov.trace() > 0.0)) throw DegenerateControlError("trajectory has zero variance");

    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    Vec3 d = eig.eigenvectors().col(2).normalized();
    auto proj = [&](const Vec3& p) { return (p - s.center).dot(d); };
    if (proj(traj.back()) < proj(traj.front())) d = -d;
    s.direction = d;

    std::vector<double> p(traj.size());
    for (std::size_t k = 0; k < traj.size(); ++k) p[k] = proj(traj[k]);
    s.start_index = static_cast<std::size_t>(std::min_element(p.begin(), p.end()) - p.begin());
    s.end_index = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    s.start_proj = p[s.start_index];
    s.end_proj = p[s.end_index];
    const double range = s.end_proj - s.start_proj;
    if (!(range >= 1e-9)) throw DegenerateControlError("trajectory projection range is below 1e-9");
    s.sigma.resize(traj.size());
    for (std::size_t k = 0; k < traj.size(); ++k) s.sigma[k] = (p[k] - s.start_proj) / range;
    return s;
}

// ---------------------------------------------------------------------------

double ControlAttribute::sigma_at(double t) const {
    if (times.empty() || signal.sigma.size() != times.size()) throw StateError("control attribute has no signal");
    if (t <= times.front()) return signal.sigma.front();
    if (t >= times.back()) return signal.sigma.back();
    const auto hi = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
    const std::size_t lo = hi - 1;
    const double w = (t - times[lo]) / (times[hi] - times[lo]);
    return (1.0 - w) * signal.sigma[lo] + w * signal.sigma[hi];
}

std::vector<double> ControlRig::sigmas_at(double t) const {
    std::vector<double> s;
    for (const ControlAttribute& a : attributes) s.push_back(a.sigma_at(t));
    return s;
}

void ControlRig::validate(const GaussianCloud& cloud) const {
    box.validate();
    if (!(gate >= 0.0 && gate < 1.0)) throw ConfigError("control gate must lie in [0, 1)");
    for (const ControlAttribute& a : attributes) {
        if (a.slot < 1 || a.slot >= cloud.mask_count) throw StateError("control attribute '" + a.name + "' has no mask slot");
        a.net.validate();
        if (a.net.input_width() != input_width() || a.net.output_width() != 13) {
            throw StateError("control network of '" + a.name + "' has the wrong shape");
        }
        for (std::size_t i : a.control_set) {
            if (i >= cloud.count()) throw StateError("control set of '" + a.name + "' references a missing Gaussian");
        }
        if (a.signal.sigma.size() != a.times.size() || a.trajectory.size() != a.times.size()) {
            throw StateError("control attribute '" + a.name + "' has inconsistent signal samples");
        }
        if (std::abs(a.signal.direction.norm() - 1.0) > 1e-6) throw StateError("control direction is not unit length");
        if (!(a.signal.end_proj > a.signal.start_proj)) throw StateError("control signal range is empty");
    }
}

ControlRig build_control_rig(const GaussianCloud& cloud, const DeformationModel& deformation,
                             std::span<const double> times, const std::vector<std::string>& names,
                             const SceneBox& box, const RigOptions& options, Rng& rng) {
    if (!cloud.has_masks()) throw StateError("control rig needs learned masks");
    if (static_cast<int>(names.size()) + 1 != cloud.mask_count) {
        throw ConfigError("attribute names do not match the mask slots");
    }
    if (times.size() < 2) throw DegenerateControlError("control signals need at least two times");
    ControlRig rig;
    rig.sigma_freqs = options.sigma_freqs;
    rig.position_freqs = options.position_freqs;
    rig.box = box;
    std::vector<std::vector<Vec3>> positions;
    for (double t : times) positions.push_back(deform(cloud, deformation, t).positions);
    for (std::size_t a = 0; a < names.size(); ++a) {
        ControlAttribute attr;
        attr.name = names[a];
        attr.slot = static_cast<int>(a) + 1;
        attr.control_set = select_control_set(cloud, deformation, times, attr.slot, options.control_set);
        attr.times.assign(times.begin(), times.end());
        for (const auto& pos : positions) {
            Vec3 c = Vec3::Zero();
            for (std::size_t i : attr.control_set) c += pos[i];
            attr.trajectory.push_back(c / static_cast<double>(attr.control_set.size()));
        }
        attr.signal = extract_signal(attr.trajectory);
        std::vector<int> widths{rig.input_width()};
        for (int l = 0; l < options.hidden_layers; ++l) widths.push_back(options.hidden_width);
        widths.push_back(13);
        attr.net = Mlp::create(widths, rng, true);
        rig.attributes.push_back(std::move(attr));
    }
    return rig;
}

// ---------------------------------------------------------------------------

Offsets control_offsets(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma,
                        ControlTape* tape) {
    if (sigma.size() != rig.attribute_count()) {
        throw InputError("expected " + std::to_string(rig.attribute_count()) + " control values, got " +
                         std::to_string(sigma.size()));
    }
    for (double s : sigma) {
        if (!(s >= 0.0 && s <= 1.0)) throw InputError("control values must lie in [0, 1]");
    }
    Offsets off = Offsets::zeros(cloud.count());
    if (tape) {
        tape->gated.assign(rig.attribute_count(), {});
        tape->tapes.assign(rig.attribute_count(), {});
    }
    if (rig.attribute_count() == 0) return off;
    if (!cloud.has_masks()) throw StateError("controlled rendering needs mask logits");

    const int sw = encoded_width(1, rig.sigma_freqs);
    const int pw = encoded_width(3, rig.position_freqs);
    const Vec3 center = rig.box.center();
    const Vec3 half = rig.box.half_extent();
    std::vector<double> pcode(static_cast<std::size_t>(pw));
    for (std::size_t a = 0; a < rig.attribute_count(); ++a) {
        const ControlAttribute& attr = rig.attributes[a];
        std::vector<std::size_t> gated;
        for (std::size_t i = 0; i < cloud.count(); ++i) {
            if (mask_mass(cloud, i, attr.slot) > rig.gate) gated.push_back(i);
        }
        if (gated.empty()) continue;
        const std::vector<double> scode = positional_encode(std::span<const double>(&sigma[a], 1), rig.sigma_freqs);
        MatrixX in(sw + pw, static_cast<Eigen::Index>(gated.size()));
        for (std::size_t c = 0; c < gated.size(); ++c) {
            const Vec3 x = (cloud.positions[gated[c]] - center).cwiseQuotient(half);
            positional_encode(std::span<const double>(x.data(), 3), rig.position_freqs, pcode);
            double* col = in.col(static_cast<Eigen::Index>(c)).data();
            std::copy(scode.begin(), scode.end(), col);
            std::copy(pcode.begin(), pcode.end(), col + sw);
        }
        const MatrixX out = mlp_forward(attr.net, in, tape ? &tape->tapes[a] : nullptr);
        for (std::size_t c = 0; c < gated.size(); ++c) {
            const std::size_t i = gated[c];
            const auto col = out.col(static_cast<Eigen::Index>(c));
            off.position[i] += col.segment<3>(0);
            off.color[i] += col.segment<3>(3);
            off.rotation[i] += col.segment<4>(6);
            off.log_scale[i] += col.segment<3>(10);
        }
        if (tape) tape->gated[a] = std::move(gated);
    }
    return off;
}

void control_offsets_backward(const ControlRig& rig, const ControlTape& tape, const Offsets& g,
                              std::vector<std::vector<double>>& grads) {
    grads.resize(rig.attribute_count());
    for (std::size_t a = 0; a < rig.attribute_count(); ++a) {
        const Mlp& net = rig.attributes[a].net;
        if (grads[a].size() != net.params.size()) grads[a].assign(net.params.size(), 0.0);
        const auto& gated = tape.gated[a];
        if (gated.empty()) continue;
        MatrixX go(13, static_cast<Eigen::Index>(gated.size()));
        for (std::size_t c = 0; c < gated.size(); ++c) {
            const std::size_t i = gated[c];
            auto col = go.col(static_cast<Eigen::Index>(c));
            col.segment<3>(0) = g.position[i];
            col.segment<3>(3) = g.color[i];
            col.segment<4>(6) = g.rotation[i];
            col.segment<3>(10) = g.log_scale[i];
        }
        mlp_backward(net, tape.tapes[a], go, grads[a]);
    }
}

GaussianCloud apply_controls(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma) {
    return apply_offsets(cloud, control_offsets(cloud, rig, sigma));
}

Image render_with_controls(const GaussianCloud& cloud, const ControlRig& rig, std::span<const double> sigma,
                           const Camera& camera, const Vec3& background, const RenderSettings& settings) {
    return render(apply_controls(cloud, rig, sigma), camera, RenderMode::color(), background, settings).image;
}

// ---------------------------------------------------------------------------

void train_control(const GaussianCloud& cloud, const DeformationModel& deformation, ControlRig& rig,
                   const Dataset& dataset, const ControlTrainConfig& config, std::vector<double>* losses) {
    rig.validate(cloud);
    dataset.validate();
    for (const ControlAttribute& a : rig.attributes) {
        if (a.times.empty()) throw StateError("control rig has no extracted signals");
    }
    if (config.iters < 0) throw ConfigError("control training iteration count must be non-negative");

    // Supervision from the frozen dynamic model, one entry per training frame.
    struct Target {
        Image image;
        Offsets offsets;
        std::vector<double> sigma;
    };
    std::vector<Target> targets;
    for (const Frame& f : dataset.frames) {
        Target t;
        t.offsets = evaluate_offsets(deformation, cloud, f.time);
        t.image = render(apply_offsets(cloud, t.offsets), f.camera, RenderMode::color(), config.background).image;
        t.sigma = rig.sigmas_at(f.time);
        targets.push_back(std::move(t));
    }

    std::vector<AdamState> opt;
    for (const ControlAttribute& a : rig.attributes) opt.push_back(f32_adam(a.net.params.size()));
    Rng rng(config.seed);
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    for (long it = 0; it < config.iters; ++it) {
        if (pos >= order.size()) {
            order = epoch_order(dataset.frames.size(), rng);
            pos = 0;
        }
        const std::size_t k = order[pos++];
        const Frame& f = dataset.frames[k];
        const Target& target = targets[k];

        ControlTape tape;
        const Offsets off = control_offsets(cloud, rig, target.sigma, &tape);
        const GaussianCloud controlled = apply_offsets(cloud, off);
        const Image img = render(controlled, f.camera, RenderMode::color(), config.background).image;
        const PhotometricLoss photo = photometric_loss(img, target.image, config.lambda_dssim);
        const CloudGradients g = render_backward(controlled, f.camera, RenderMode::color(), config.background, photo.grad);
        Offsets g_off = Offsets::zeros(cloud.count());
        apply_offsets_backward(cloud, off, g, nullptr, &g_off);

        double loss = photo.value;
        if (config.lambda_offset > 0.0) {
            std::size_t n = 0;
            for (const auto& gated : tape.gated) n += gated.size();
            const double w = n > 0 ? config.lambda_offset / static_cast<double>(n) : 0.0;
            for (const auto& gated : tape.gated) {
                for (std::size_t i : gated) {
                    const Vec3 rp = off.position[i] - target.offsets.position[i];
                    const Vec3 rc = off.color[i] - target.offsets.color[i];
                    const Vec4 rq = off.rotation[i] - target.offsets.rotation[i];
                    const Vec3 rs = off.log_scale[i] - target.offsets.log_scale[i];
                    loss += w * (rp.squaredNorm() + rc.squaredNorm() + rq.squaredNorm() + rs.squaredNorm());
                    g_off.position[i] += 2.0 * w * rp;
                    g_off.color[i] += 2.0 * w * rc;
                    g_off.rotation[i] += 2.0 * w * rq;
                    g_off.log_scale[i] += 2.0 * w * rs;
                }
            }
        }
        if (losses) losses->push_back(loss);

        std::vector<std::vector<double>> grads;
        control_offsets_backward(rig, tape, g_off, grads);
        const double lr = lr_exponential(it, config.iters, config.lr_start, config.lr_end);
        for (std::size_t a = 0; a < rig.attribute_count(); ++a) adam_step(rig.attributes[a].net.params, grads[a], opt[a], lr);
    }
}

void finetune_all(GaussianCloud& cloud, ControlRig& rig, const Dataset& dataset, const FinetuneConfig& config,
                  std::vector<double>* losses) {
    rig.validate(cloud);
    dataset.validate();
    if (config.iters < 0) throw ConfigError("fine-tuning iteration count must be non-negative");
    if (config.iters == 0) return;

    CloudOptimizer opt = CloudOptimizer::create(cloud);
    std::vector<AdamState> net_opt;
    for (const ControlAttribute& a : rig.attributes) net_opt.push_back(f32_adam(a.net.params.size()));
    Rng rng(config.seed);
    std::vector<std::size_t> order;
    std::size_t pos = 0;
    for (long it = 0; it < config.iters; ++it) {
        if (pos >= order.size()) {
            order = epoch_order(dataset.frames.size(), rng);
            pos = 0;
        }
        const Frame& f = dataset.frames[order[pos++]];
        const std::vector<double> sigma = rig.sigmas_at(f.time);
        ControlTape tape;
        const Offsets off = control_offsets(cloud, rig, sigma, &tape);
        const GaussianCloud controlled = apply_offsets(cloud, off);
        const Image img = render(controlled, f.camera, RenderMode::color(), config.background).image;
        const PhotometricLoss photo = photometric_loss(img, f.image, config.lambda_dssim);
        if (losses) losses->push_back(photo.value);
        const CloudGradients g = render_backward(controlled, f.camera, RenderMode::color(), config.background, photo.grad);
        CloudGradients g_base = CloudGradients::zeros_like(cloud);
        Offsets g_off = Offsets::zeros(cloud.count());
        apply_offsets_backward(cloud, off, g, &g_base, &g_off);
        std::vector<std::vector<double>> grads;
        control_offsets_backward(rig, tape, g_off, grads);

        adam_step(flat(cloud.positions), flat(g_base.positions), opt.positions, config.lr);
        adam_step(flat(cloud.rotations), flat(g_base.rotations), opt.rotations, config.lr);
        adam_step(flat(cloud.log_scales), flat(g_base.log_scales), opt.log_scales, config.lr);
        adam_step(cloud.opacity_logits, g_base.opacity_logits, opt.opacity_logits, config.lr);
        adam_step(cloud.sh_coeffs, g_base.sh_coeffs, opt.sh_coeffs, config.lr);
        for (Vec4& q : cloud.rotations) {
            q = normalize_quaternion(q);
            for (int d = 0; d < 4; ++d) q[d] = round_to_f32(q[d]);
        }
        for (std::size_t a = 0; a < rig.attribute_count(); ++a) {
            adam_step(rig.attributes[a].net.params, grads[a], net_opt[a], config.lr);
        }
    }
}

}  // namespace cogs
