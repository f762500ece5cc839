// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/render.hpp"

#include "cogs/errors.hpp"
#include "cogs/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cogs {

namespace {

constexpr int kTile = 16;

struct Splat {
    int index = 0;
    Vec2 mean = Vec2::Zero();
    double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;  // inverse 2D covariance
    Vec3 color = Vec3::Zero();
    double alpha = 0.0;
    double depth = 0.0;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;
};

struct Prepared {
    std::vector<Splat> splats;                 // compositing order
    std::vector<std::vector<int>> tile_lists;  // splat positions per tile, in order
    int tiles_x = 0, tiles_y = 0;
};

void check_mode(const GaussianCloud& cloud, RenderMode mode) {
    if (!mode.is_mask()) return;
    if (!cloud.has_masks()) throw StateError("mask render requested but the cloud has no mask logits");
    if (mode.attribute < 0 || mode.attribute >= cloud.mask_count) {
        throw ConfigError("mask attribute " + std::to_string(mode.attribute) + " out of range");
    }
}

double mask_weight(const GaussianCloud& cloud, std::size_t i, int attribute) {
    double probs[64];
    std::vector<double> heap;
    std::span<double> out(probs, static_cast<std::size_t>(cloud.mask_count));
    if (cloud.mask_count > 64) {
        heap.resize(static_cast<std::size_t>(cloud.mask_count));
        out = heap;
    }
    softmax(cloud.mask(i), out);
    return out[static_cast<std::size_t>(attribute)];
}

// Jacobian of the pinhole projection at camera-space point p (rows: u, v).
Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& p, const Camera& cam) {
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j;
    j << -cam.fx * iz, 0.0, cam.fx * p.x() * iz * iz,
        0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
    return j;
}

std::optional<Splat> make_splat(const GaussianCloud& cloud, std::size_t i, const Camera& cam,
                                RenderMode mode, const RenderSettings& s) {
    const Mat3 sigma = covariance_from_rs(cloud.rotations[i], cloud.log_scales[i]);
    const auto proj = project_gaussian(cloud.positions[i], sigma, cam, s);
    if (!proj) return std::nullopt;

    const Mat2& cov = proj->cov2d;
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
    if (!(det > 0.0)) return std::nullopt;

    Splat sp;
    sp.index = static_cast<int>(i);
    sp.mean = proj->mean2d;
    sp.depth = proj->view_depth;
    sp.conic_a = cov(1, 1) / det;
    sp.conic_b = -cov(0, 1) / det;
    sp.conic_c = cov(0, 0) / det;

    const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    const double radius = s.cutoff_sigma * std::sqrt(lambda_max);
    // Pixel x is covered when |x + 0.5 - u| <= radius.
    sp.x0 = std::max(0, static_cast<int>(std::ceil(sp.mean.x() - radius - 0.5)));
    sp.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(sp.mean.x() + radius - 0.5)));
    sp.y0 = std::max(0, static_cast<int>(std::ceil(sp.mean.y() - radius - 0.5)));
    sp.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(sp.mean.y() + radius - 0.5)));
    if (sp.x0 > sp.x1 || sp.y0 > sp.y1) return std::nullopt;

    const double opacity = sigmoid(cloud.opacity_logits[i]);
    if (mode.is_mask()) {
        sp.color = Vec3::Ones();
        sp.alpha = mask_weight(cloud, i, mode.attribute) * opacity;
    } else {
        const Vec3 dir = (cloud.positions[i] - cam.center()).normalized();
        sp.color = sh_eval(cloud.sh(i), dir, cloud.sh_degree);
        sp.alpha = opacity;
    }
    return sp;
}

Prepared prepare(const GaussianCloud& cloud, const Camera& cam, RenderMode mode,
                 const RenderSettings& s) {
    cloud.validate();
    check_mode(cloud, mode);
    const std::size_t n = cloud.count();
    std::vector<std::optional<Splat>> all(n);
    constexpr std::size_t kBatch = 256;
    parallel_for((n + kBatch - 1) / kBatch, [&](std::size_t b) {
        const std::size_t end = std::min(n, (b + 1) * kBatch);
        for (std::size_t i = b * kBatch; i < end; ++i) all[i] = make_splat(cloud, i, cam, mode, s);
    }, s.workers);

    Prepared out;
    for (auto& sp : all) {
        if (sp) out.splats.push_back(*sp);
    }
    std::stable_sort(out.splats.begin(), out.splats.end(),
                     [](const Splat& a, const Splat& b) { return a.depth < b.depth; });

    out.tiles_x = (cam.width + kTile - 1) / kTile;
    out.tiles_y = (cam.height + kTile - 1) / kTile;
    out.tile_lists.resize(static_cast<std::size_t>(out.tiles_x) * out.tiles_y);
    for (std::size_t k = 0; k < out.splats.size(); ++k) {
        const Splat& sp = out.splats[k];
        for (int ty = sp.y0 / kTile; ty <= sp.y1 / kTile; ++ty) {
            for (int tx = sp.x0 / kTile; tx <= sp.x1 / kTile; ++tx) {
                out.tile_lists[static_cast<std::size_t>(ty) * out.tiles_x + tx].push_back(
                    static_cast<int>(k));
            }
        }
    }
    return out;
}

struct Contribution {
    int splat;  // position in Prepared::splats
    double alpha;
    double gauss;          // exp(-power)
    double transmittance;  // T before this splat
    double dx, dy;
    bool clamped;
};

// Replays compositing for one pixel; returns contributors and the final T.
template <typename Visitor>
double composite_pixel(const Prepared& prep, int x, int y, const RenderSettings& s, Visitor&& visit) {
    const auto& list =
        prep.tile_lists[static_cast<std::size_t>(y / kTile) * prep.tiles_x + x / kTile];
    const double px = x + 0.5, py = y + 0.5;
    double t = 1.0;
    for (int k : list) {
        const Splat& sp = prep.splats[static_cast<std::size_t>(k)];
        if (x < sp.x0 || x > sp.x1 || y < sp.y0 || y > sp.y1) continue;
        const double dx = px - sp.mean.x();
        const double dy = py - sp.mean.y();
        const double power = 0.5 * (sp.conic_a * dx * dx + sp.conic_c * dy * dy) + sp.conic_b * dx * dy;
        const double gauss = std::exp(-power);
        double alpha = sp.alpha * gauss;
        bool clamped = false;
        if (alpha > s.alpha_clamp) {
            alpha = s.alpha_clamp;
            clamped = true;
        }
        visit(Contribution{k, alpha, gauss, t, dx, dy, clamped});
        t *= 1.0 - alpha;
        if (t < s.transmittance_floor) break;
    }
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------

std::optional<Projection> project_gaussian(const Vec3& mean, const Mat3& sigma, const Camera& cam,
                                           const RenderSettings& s) {
    const Mat3 w = cam.world_to_camera_rotation();
    const Vec3 p = w * (mean - cam.center());
    const double depth = -p.z();
    if (depth < s.near_plane) return std::nullopt;

    Projection out;
    out.view_depth = depth;
    out.mean2d = {cam.cx - cam.fx * p.x() / p.z(), cam.cy + cam.fy * p.y() / p.z()};
    const auto j = projection_jacobian(p, cam);
    const Mat3 view_sigma = w * sigma * w.transpose();
    out.cov2d = j * view_sigma * j.transpose();
    out.cov2d(0, 0) += s.cov2d_dilation;
    out.cov2d(1, 1) += s.cov2d_dilation;
    return out;
}

std::vector<std::optional<Projected2DGaussian>> project_cloud(const GaussianCloud& cloud,
                                                              const Camera& camera,
                                                              RenderMode mode,
                                                              const RenderSettings& settings) {
    check_mode(cloud, mode);
    std::vector<std::optional<Projected2DGaussian>> out(cloud.count());
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        const Mat3 sigma = covariance_from_rs(cloud.rotations[i], cloud.log_scales[i]);
        const auto proj = project_gaussian(cloud.positions[i], sigma, camera, settings);
        if (!proj) continue;
        const double opacity = sigmoid(cloud.opacity_logits[i]);
        Projected2DGaussian g{proj->mean2d, proj->cov2d, proj->view_depth, Vec3::Ones(), opacity};
        if (mode.is_mask()) {
            g.alpha_scale = mask_weight(cloud, i, mode.attribute) * opacity;
        } else {
            const Vec3 dir = (cloud.positions[i] - camera.center()).normalized();
            g.color = sh_eval(cloud.sh(i), dir, cloud.sh_degree);
        }
        out[i] = g;
    }
    return out;
}

RenderOutput render(const GaussianCloud& cloud, const Camera& cam, RenderMode mode,
                    const Vec3& background, const RenderSettings& s) {
    const Prepared prep = prepare(cloud, cam, mode, s);
    const int channels = mode.is_mask() ? 1 : 3;
    const Vec3 bg = mode.is_mask() ? Vec3::Zero() : background;

    RenderOutput out;
    out.image = Image(cam.width, cam.height, channels);
    out.final_transmittance.assign(out.image.pixel_count(), 1.0);
    out.per_pixel_contrib_count.assign(out.image.pixel_count(), 0);

    parallel_for(static_cast<std::size_t>(prep.tiles_y), [&](std::size_t band) {
        const int y_end = std::min(cam.height, static_cast<int>(band + 1) * kTile);
        for (int y = static_cast<int>(band) * kTile; y < y_end; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                Vec3 c = Vec3::Zero();
                int count = 0;
                const double t = composite_pixel(prep, x, y, s, [&](const Contribution& k) {
                    c += prep.splats[static_cast<std::size_t>(k.splat)].color * (k.alpha * k.transmittance);
                    ++count;
                });
                c += bg * t;
                const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
                for (int ch = 0; ch < channels; ++ch) out.image.data[p * channels + ch] = c[ch];
                out.final_transmittance[p] = t;
                out.per_pixel_contrib_count[p] = count;
            }
        }
    }, s.workers);
    return out;
}

// ---------------------------------------------------------------------------

CloudGradients CloudGradients::zeros_like(const GaussianCloud& cloud) {
    CloudGradients g;
    const std::size_t n = cloud.count();
    g.positions.assign(n, Vec3::Zero());
    g.rotations.assign(n, Vec4::Zero());
    g.log_scales.assign(n, Vec3::Zero());
    g.opacity_logits.assign(n, 0.0);
    g.sh_coeffs.assign(cloud.sh_coeffs.size(), 0.0);
    g.mask_logits.assign(cloud.mask_logits.size(), 0.0);
    g.mean2d.assign(n, Vec2::Zero());
    g.visible.assign(n, 0);
    return g;
}

void CloudGradients::add(const CloudGradients& o) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] += o.positions[i];
        rotations[i] += o.rotations[i];
        log_scales[i] += o.log_scales[i];
        opacity_logits[i] += o.opacity_logits[i];
        mean2d[i] += o.mean2d[i];
        visible[i] = visible[i] | o.visible[i];
    }
    for (std::size_t i = 0; i < sh_coeffs.size(); ++i) sh_coeffs[i] += o.sh_coeffs[i];
    for (std::size_t i = 0; i < mask_logits.size(); ++i) mask_logits[i] += o.mask_logits[i];
}

void CloudGradients::scale(double f) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        positions[i] *= f;
        rotations[i] *= f;
        log_scales[i] *= f;
        opacity_logits[i] *= f;
        mean2d[i] *= f;
    }
    for (double& v : sh_coeffs) v *= f;
    for (double& v : mask_logits) v *= f;
}

CloudGradients render_backward(const GaussianCloud& cloud, const Camera& cam, RenderMode mode,
                               const Vec3& background, const Image& grad_image,
                               const RenderSettings& s) {
    const Prepared prep = prepare(cloud, cam, mode, s);
    const int channels = mode.is_mask() ? 1 : 3;
    const Vec3 bg = mode.is_mask() ? Vec3::Zero() : background;
    if (grad_image.width != cam.width || grad_image.height != cam.height ||
        grad_image.channels != channels) {
        throw ConfigError("render_backward: gradient image shape does not match the render");
    }

    // Per-splat 2D gradients: mean (2), conic (3), color (3), alpha (1).
    constexpr int kStride = 9;
    const std::size_t n_splats = prep.splats.size();
    std::vector<std::vector<double>> band_grads(static_cast<std::size_t>(prep.tiles_y));

    parallel_for(static_cast<std::size_t>(prep.tiles_y), [&](std::size_t band) {
        auto& acc = band_grads[band];
        acc.assign(n_splats * kStride, 0.0);
        std::vector<Contribution> contribs;
        const int y_end = std::min(cam.height, static_cast<int>(band + 1) * kTile);
        for (int y = static_cast<int>(band) * kTile; y < y_end; ++y) {
            for (int x = 0; x < cam.width; ++x) {
                const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
                Vec3 g = Vec3::Zero();
                for (int ch = 0; ch < channels; ++ch) g[ch] = grad_image.data[p * channels + ch];
                if (g.isZero(0.0)) continue;

                contribs.clear();
                composite_pixel(prep, x, y, s, [&](const Contribution& k) { contribs.push_back(k); });

                // behind = color seen through splat k from everything composited after it.
                Vec3 behind = bg;
                for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
                    const Splat& sp = prep.splats[static_cast<std::size_t>(it->splat)];
                    double* a = &acc[static_cast<std::size_t>(it->splat) * kStride];
                    const double w = it->alpha * it->transmittance;
                    for (int ch = 0; ch < channels; ++ch) a[5 + ch] += w * g[ch];
                    const double d_alpha = it->transmittance * (sp.color - behind).dot(g);
                    behind = it->alpha * sp.color + (1.0 - it->alpha) * behind;
                    if (it->clamped) continue;
                    // alpha = a_s * exp(-power)
                    a[8] += d_alpha * it->gauss;
                    const double d_power = -d_alpha * it->alpha;
                    const double dx = it->dx, dy = it->dy;
                    // power = 0.5 (a dx^2 + c dy^2) + b dx dy, d = pixel - mean
                    a[0] += -d_power * (sp.conic_a * dx + sp.conic_b * dy);
                    a[1] += -d_power * (sp.conic_b * dx + sp.conic_c * dy);
                    a[2] += d_power * 0.5 * dx * dx;
                    a[3] += d_power * dx * dy;
                    a[4] += d_power * 0.5 * dy * dy;
                }
            }
        }
    }, s.workers);

    std::vector<double> splat_grads(n_splats * kStride, 0.0);
    for (const auto& acc : band_grads) {
        for (std::size_t i = 0; i < acc.size(); ++i) splat_grads[i] += acc[i];
    }

    CloudGradients out = CloudGradients::zeros_like(cloud);
    const Mat3 w = cam.world_to_camera_rotation();
    const Vec3 cam_center = cam.center();

    parallel_for(n_splats, [&](std::size_t k) {
        const Splat& sp = prep.splats[k];
        const std::size_t i = static_cast<std::size_t>(sp.index);
        const double* a = &splat_grads[k * kStride];
        out.visible[i] = 1;
        out.mean2d[i] = {a[0], a[1]};

        // Opacity / mask weights.
        const double opacity = sigmoid(cloud.opacity_logits[i]);
        const double d_alpha_scale = a[8];
        if (mode.is_mask()) {
            std::vector<double> m(static_cast<std::size_t>(cloud.mask_count));
            softmax(cloud.mask(i), m);
            const double ma = m[static_cast<std::size_t>(mode.attribute)];
            out.opacity_logits[i] = d_alpha_scale * ma * opacity * (1.0 - opacity);
            for (int l = 0; l < cloud.mask_count; ++l) {
                const double delta = l == mode.attribute ? 1.0 : 0.0;
                out.mask_logits[i * cloud.mask_count + l] =
                    d_alpha_scale * opacity * ma * (delta - m[static_cast<std::size_t>(l)]);
            }
        } else {
            out.opacity_logits[i] = d_alpha_scale * opacity * (1.0 - opacity);
        }

        const Vec3 rel = cloud.positions[i] - cam_center;
        Vec3 d_mean = Vec3::Zero();

        // Color through SH, including the view direction's dependence on the mean.
        if (!mode.is_mask()) {
            const Vec3 d_color(a[5], a[6], a[7]);
            const double len = rel.norm();
            const Vec3 dir = rel / len;
            std::span<double> d_sh(out.sh_coeffs.data() + i * cloud.sh_stride(),
                                   static_cast<std::size_t>(cloud.sh_stride()));
            const Vec3 d_dir = sh_eval_backward(cloud.sh(i), dir, cloud.sh_degree, d_color, d_sh);
            d_mean += (d_dir - dir * dir.dot(d_dir)) / len;
        }

        // Geometry.
        const Vec3 p = w * rel;
        const auto j = projection_jacobian(p, cam);
        const Mat3 sigma = covariance_from_rs(cloud.rotations[i], cloud.log_scales[i]);
        const Mat3 view_sigma = w * sigma * w.transpose();
        Mat2 cov = j * view_sigma * j.transpose();
        cov(0, 0) += s.cov2d_dilation;
        cov(1, 1) += s.cov2d_dilation;
        Mat2 conic;
        conic << sp.conic_a, sp.conic_b, sp.conic_b, sp.conic_c;
        Mat2 g_conic;
        g_conic << a[2], 0.5 * a[3], 0.5 * a[3], a[4];
        const Mat2 g_cov = -conic * g_conic * conic;

        const Mat3 g_view_sigma = j.transpose() * g_cov * j;
        const Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_cov * j * view_sigma;
        const Mat3 g_sigma = w.transpose() * g_view_sigma * w;
        const auto cg = covariance_from_rs_backward(cloud.rotations[i], cloud.log_scales[i], g_sigma);
        out.rotations[i] = cg.rotation;
        out.log_scales[i] = cg.log_scale;

        // Camera-space point: from the mean projection (its Jacobian is j) and from J itself.
        Vec3 d_p = j.transpose() * Vec2(a[0], a[1]);
        const double iz = 1.0 / p.z();
        const double iz2 = iz * iz, iz3 = iz2 * iz;
        d_p.x() += g_j(0, 2) * cam.fx * iz2;
        d_p.y() += g_j(1, 2) * (-cam.fy * iz2);
        d_p.z() += g_j(0, 0) * cam.fx * iz2 + g_j(0, 2) * (-2.0 * cam.fx * p.x() * iz3) +
                   g_j(1, 1) * (-cam.fy * iz2) + g_j(1, 2) * (2.0 * cam.fy * p.y() * iz3);
        d_mean += w.transpose() * d_p;
        out.positions[i] = d_mean;
    }, s.workers);

    return out;
}

std::vector<SplatFootprint> splat_footprints(const GaussianCloud& cloud, const Camera& camera,
                                             RenderMode mode, const RenderSettings& settings) {
    const Prepared prep = prepare(cloud, camera, mode, settings);
    std::vector<SplatFootprint> out;
    out.reserve(prep.splats.size());
    for (const Splat& sp : prep.splats) out.push_back({sp.index, sp.x0, sp.x1, sp.y0, sp.y1});
    return out;
}

}  // namespace cogs
