// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/deformation.hpp"

#include "cogs/errors.hpp"

#include <string>

namespace cogs {

Offsets Offsets::zeros(std::size_t n) {
    Offsets o;
    o.position.assign(n, Vec3::Zero());
    o.color.assign(n, Vec3::Zero());
    o.rotation.assign(n, Vec4::Zero());
    o.log_scale.assign(n, Vec3::Zero());
    return o;
}

void Offsets::add(const Offsets& other) {
    if (other.count() != count()) throw ConfigError("Offsets::add: Gaussian counts differ");
    for (std::size_t i = 0; i < count(); ++i) {
        position[i] += other.position[i];
        color[i] += other.color[i];
        rotation[i] += other.rotation[i];
        log_scale[i] += other.log_scale[i];
    }
}

GaussianCloud apply_offsets(const GaussianCloud& cloud, const Offsets& off) {
    if (off.count() != cloud.count()) {
        throw ConfigError("apply_offsets: " + std::to_string(off.count()) + " offsets for " +
                          std::to_string(cloud.count()) + " Gaussians");
    }
    GaussianCloud out = cloud;
    const int stride = cloud.sh_stride();
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        out.positions[i] += off.position[i];
        out.log_scales[i] += off.log_scale[i];
        for (int c = 0; c < 3; ++c) out.sh_coeffs[i * stride + c] += off.color[i][c];
        if (!off.rotation[i].isZero(0.0)) out.rotations[i] = normalize_quaternion(cloud.rotations[i] + off.rotation[i]);
    }
    return out;
}

void apply_offsets_backward(const GaussianCloud& cloud, const Offsets& off, const CloudGradients& g,
                            CloudGradients* grad_base, Offsets* grad_off) {
    const int stride = cloud.sh_stride();
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        Vec4 g_q_base, g_q_off;
        if (off.rotation[i].isZero(0.0)) {
            g_q_base = g.rotations[i];
            g_q_off = normalize_quaternion_backward(cloud.rotations[i], g.rotations[i]);
        } else {
            g_q_base = g_q_off = normalize_quaternion_backward(cloud.rotations[i] + off.rotation[i], g.rotations[i]);
        }
        if (grad_base) {
            grad_base->positions[i] += g.positions[i];
            grad_base->rotations[i] += g_q_base;
            grad_base->log_scales[i] += g.log_scales[i];
            grad_base->opacity_logits[i] += g.opacity_logits[i];
            grad_base->mean2d[i] += g.mean2d[i];
            grad_base->visible[i] |= g.visible[i];
        }
        if (grad_off) {
            grad_off->position[i] += g.positions[i];
            grad_off->rotation[i] += g_q_off;
            grad_off->log_scale[i] += g.log_scales[i];
            for (int c = 0; c < 3; ++c) grad_off->color[i][c] += g.sh_coeffs[i * stride + c];
        }
    }
    if (grad_base) {
        for (std::size_t k = 0; k < g.sh_coeffs.size(); ++k) grad_base->sh_coeffs[k] += g.sh_coeffs[k];
        for (std::size_t k = 0; k < g.mask_logits.size(); ++k) grad_base->mask_logits[k] += g.mask_logits[k];
    }
}

// ---------------------------------------------------------------------------

DeformationModel DeformationModel::create(int hidden_width, int hidden_layers, int position_freqs,
                                          int time_freqs, const SceneBox& box, Rng& rng) {
    if (hidden_width < 1 || hidden_layers < 0) throw ConfigError("deformation network size must be positive");
    if (position_freqs < 0 || time_freqs < 0) throw ConfigError("encoding frequency counts must be non-negative");
    box.validate();
    DeformationModel m;
    m.position_freqs = position_freqs;
    m.time_freqs = time_freqs;
    m.box = box;
    for (int k = 0; k < 4; ++k) {
        std::vector<int> widths{m.input_width()};
        for (int l = 0; l < hidden_layers; ++l) widths.push_back(hidden_width);
        widths.push_back(kOutputWidths[static_cast<std::size_t>(k)]);
        m.nets[static_cast<std::size_t>(k)] = Mlp::create(widths, rng, true);
    }
    return m;
}

std::size_t DeformationModel::param_count() const {
    std::size_t n = 0;
    for (const auto& net : nets) n += net.params.size();
    return n;
}

void DeformationModel::validate() const {
    box.validate();
    for (std::size_t k = 0; k < 4; ++k) {
        nets[k].validate();
        if (nets[k].input_width() != input_width() || nets[k].output_width() != kOutputWidths[k]) {
            throw ConfigError("deformation network " + std::to_string(k) + " has the wrong input or output width");
        }
    }
}

MatrixX deformation_inputs(const DeformationModel& model, std::span<const Vec3> positions, double t) {
    const int pw = encoded_width(3, model.position_freqs);
    const int tw = encoded_width(1, model.time_freqs);
    MatrixX in(pw + tw, static_cast<Eigen::Index>(positions.size()));
    std::vector<double> time_code = positional_encode(std::span<const double>(&t, 1), model.time_freqs);
    const Vec3 center = model.box.center();
    const Vec3 half = model.box.half_extent();
    std::vector<double> code(static_cast<std::size_t>(pw));
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const Vec3 x = (positions[i] - center).cwiseQuotient(half);
        positional_encode(std::span<const double>(x.data(), 3), model.position_freqs, code);
        double* col = in.col(static_cast<Eigen::Index>(i)).data();
        std::copy(code.begin(), code.end(), col);
        std::copy(time_code.begin(), time_code.end(), col + pw);
    }
    return in;
}

std::array<MatrixX, 4> offsets_to_matrices(const Offsets& o) {
    const auto n = static_cast<Eigen::Index>(o.count());
    std::array<MatrixX, 4> m{MatrixX(3, n), MatrixX(3, n), MatrixX(4, n), MatrixX(3, n)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        m[0].col(i) = o.position[k];
        m[1].col(i) = o.color[k];
        m[2].col(i) = o.rotation[k];
        m[3].col(i) = o.log_scale[k];
    }
    return m;
}

Offsets offsets_from_matrices(const std::array<MatrixX, 4>& m) {
    const auto n = static_cast<std::size_t>(m[0].cols());
    Offsets o = Offsets::zeros(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        o.position[k] = m[0].col(i);
        o.color[k] = m[1].col(i);
        o.rotation[k] = m[2].col(i);
        o.log_scale[k] = m[3].col(i);
    }
    return o;
}

Offsets evaluate_offsets(const DeformationModel& model, const GaussianCloud& cloud, double t, DeformTape* tape) {
    const MatrixX in = deformation_inputs(model, cloud.positions, t);
    std::array<MatrixX, 4> out;
    for (std::size_t k = 0; k < 4; ++k) {
        out[k] = mlp_forward(model.nets[k], in, tape ? &tape->tapes[k] : nullptr);
    }
    return offsets_from_matrices(out);
}

void offsets_backward(const DeformationModel& model, const DeformTape& tape, const Offsets& grad_offsets,
                      std::array<std::vector<double>, 4>& grads) {
    const auto g = offsets_to_matrices(grad_offsets);
    for (std::size_t k = 0; k < 4; ++k) {
        if (grads[k].size() != model.nets[k].params.size()) grads[k].assign(model.nets[k].params.size(), 0.0);
        mlp_backward(model.nets[k], tape.tapes[k], g[k], grads[k]);
    }
}

GaussianCloud deform(const GaussianCloud& cloud, const DeformationModel& model, double t) {
    return apply_offsets(cloud, evaluate_offsets(model, cloud, t));
}

}  // namespace cogs
