// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/errors.hpp"
#include "cogs/render.hpp"
#include "test_util.hpp"

#include <Eigen/LU>
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace cogs;

namespace {

Camera axis_camera(int w, int h, double f) {
    Camera cam;
    cam.width = w;
    cam.height = h;
    cam.fx = cam.fy = f;
    cam.cx = 0.5 * w;
    cam.cy = 0.5 * h;
    return cam;
}

// Gaussian whose mean projects exactly onto the center of pixel (px, py) of axis_camera.
Vec3 point_on_pixel(const Camera& cam, int px, int py, double depth) {
    const double u = px + 0.5, v = py + 0.5;
    return {(u - cam.cx) * depth / cam.fx, -(v - cam.cy) * depth / cam.fy, -depth};
}

GaussianCloud single(const Vec3& pos, double log_scale, double opacity, const Vec3& rgb) {
    GaussianCloud c;
    c.sh_degree = 0;
    c.resize(1);
    c.positions[0] = pos;
    c.log_scales[0] = Vec3::Constant(log_scale);
    c.opacity_logits[0] = logit(opacity);
    for (int ch = 0; ch < 3; ++ch) c.sh_coeffs[ch] = sh_dc_from_color(rgb[ch]);
    return c;
}

GaussianCloud random_scene(std::mt19937_64& rng, std::size_t n, int sh_degree, int mask_slots) {
    GaussianCloud c;
    c.sh_degree = sh_degree;
    c.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        c.positions[i] = Vec3(test::uniform(rng, -0.6, 0.6), test::uniform(rng, -0.6, 0.6),
                              test::uniform(rng, -3.5, -2.5));
        c.rotations[i] = test::random_unit_quaternion(rng);
        c.log_scales[i] = test::random_vec3(rng, std::log(0.08), std::log(0.25));
        c.opacity_logits[i] = logit(test::uniform(rng, 0.2, 0.6));
        auto sh = c.sh(i);
        for (std::size_t k = 0; k < sh.size(); ++k) sh[k] = test::uniform(rng, -0.15, 0.15);
        for (int ch = 0; ch < 3; ++ch) sh[ch] = sh_dc_from_color(test::uniform(rng, 0.3, 0.8));
    }
    if (mask_slots > 0) {
        c.init_masks(mask_slots);
        for (double& m : c.mask_logits) m = test::uniform(rng, -1.5, 1.5);
    }
    return c;
}

double weighted_sum(const Image& a, const Image& w) {
    return std::inner_product(a.data.begin(), a.data.end(), w.data.begin(), 0.0);
}

struct FdReport {
    double worst = 0.0;
    int checked = 0;
    int skipped = 0;
};

// Compares every parameter of `cloud` against central differences. Perturbations
// that alter the splat footprints (discrete structure) are skipped.
FdReport gradient_check(GaussianCloud cloud, const Camera& cam, RenderMode mode, const Vec3& bg,
                        const Image& weights, double step = 1e-4) {
    const CloudGradients g = render_backward(cloud, cam, mode, bg, weights);
    const auto base = splat_footprints(cloud, cam, mode);
    FdReport report;
    auto probe = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + step;
        const bool same_plus = splat_footprints(cloud, cam, mode) == base;
        const double plus = weighted_sum(render(cloud, cam, mode, bg).image, weights);
        param = saved - step;
        const bool same_minus = splat_footprints(cloud, cam, mode) == base;
        const double minus = weighted_sum(render(cloud, cam, mode, bg).image, weights);
        param = saved;
        if (!same_plus || !same_minus) {
            ++report.skipped;
            return;
        }
        if (std::abs(analytic) <= 1e-6) return;
        const double fd = (plus - minus) / (2.0 * step);
        report.worst = std::max(report.worst, test::relative_error(analytic, fd));
        ++report.checked;
    };
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        for (int k = 0; k < 3; ++k) probe(cloud.positions[i][k], g.positions[i][k]);
        for (int k = 0; k < 4; ++k) probe(cloud.rotations[i][k], g.rotations[i][k]);
        for (int k = 0; k < 3; ++k) probe(cloud.log_scales[i][k], g.log_scales[i][k]);
        probe(cloud.opacity_logits[i], g.opacity_logits[i]);
    }
    if (mode.is_mask()) {
        for (std::size_t k = 0; k < cloud.mask_logits.size(); ++k) probe(cloud.mask_logits[k], g.mask_logits[k]);
    } else {
        for (std::size_t k = 0; k < cloud.sh_coeffs.size(); ++k) probe(cloud.sh_coeffs[k], g.sh_coeffs[k]);
    }
    return report;
}

Image random_weights(std::mt19937_64& rng, int w, int h, int c) {
    Image img(w, h, c);
    for (double& v : img.data) v = test::uniform(rng, -1.0, 1.0);
    return img;
}

}  // namespace

// ---------------------------------------------------------------------------
// Projection

TEST(Projection, OnAxisIdentityPose) {
    const Camera cam = axis_camera(100, 100, 100.0);
    const auto proj = project_gaussian(Vec3(0, 0, -2), Mat3::Identity() * 0.01, cam);
    ASSERT_TRUE(proj.has_value());
    EXPECT_DOUBLE_EQ(proj->mean2d.x(), 50.0);
    EXPECT_DOUBLE_EQ(proj->mean2d.y(), 50.0);
    EXPECT_DOUBLE_EQ(proj->view_depth, 2.0);
}

TEST(Projection, BehindCameraIsCulled) {
    const Camera cam = axis_camera(100, 100, 100.0);
    EXPECT_FALSE(project_gaussian(Vec3(0, 0, 1), Mat3::Identity(), cam).has_value());
    EXPECT_FALSE(project_gaussian(Vec3(0, 0, -0.005), Mat3::Identity(), cam).has_value());
}

TEST(Projection, IsotropicCovarianceMatchesFiniteDifferenceJacobian) {
    const double f = 80.0, s = 0.05;
    const Camera cam = axis_camera(64, 64, f);
    const Vec3 mean(0.0, 0.0, -2.0);
    const auto proj = project_gaussian(mean, Mat3::Identity() * s * s, cam);
    ASSERT_TRUE(proj.has_value());

    // Oracle: numerical Jacobian of the exact pinhole map, step 1e-5.
    auto project = [&](const Vec3& p) {
        return Vec2(cam.cx - cam.fx * p.x() / p.z(), cam.cy + cam.fy * p.y() / p.z());
    };
    Eigen::Matrix<double, 2, 3> j;
    for (int k = 0; k < 3; ++k) {
        Vec3 hi = mean, lo = mean;
        hi[k] += 1e-5;
        lo[k] -= 1e-5;
        j.col(k) = (project(hi) - project(lo)) / 2e-5;
    }
    const Mat2 oracle = j * (Mat3::Identity() * s * s) * j.transpose();
    const Mat2 undilated = proj->cov2d - Mat2::Identity() * 0.3;
    EXPECT_LT((undilated - oracle).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_NEAR(undilated(0, 0), (f / 2) * (f / 2) * s * s, 1e-6);
    EXPECT_NEAR(proj->mean2d.x(), cam.cx, 1e-12);
    EXPECT_NEAR(proj->mean2d.y(), cam.cy, 1e-12);
    EXPECT_GT(proj->cov2d.determinant(), 0.0);
}

TEST(Projection, OffAxisJacobianMatchesFiniteDifferences) {
    std::mt19937_64 rng(21);
    const Camera cam = Camera::look_at(Vec3(1, 2, 4), Vec3::Zero(), Vec3::UnitY(), 40, 30, 0.9);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 mean = test::random_vec3(rng, -0.5, 0.5);
        const Mat3 sigma = covariance_from_rs(test::random_unit_quaternion(rng), test::random_vec3(rng, -3, -1));
        const auto proj = project_gaussian(mean, sigma, cam);
        ASSERT_TRUE(proj.has_value());
        auto mean2d = [&](const Vec3& m) { return project_gaussian(m, sigma, cam)->mean2d; };
        Eigen::Matrix<double, 2, 3> j;
        for (int k = 0; k < 3; ++k) {
            Vec3 hi = mean, lo = mean;
            hi[k] += 1e-5;
            lo[k] -= 1e-5;
            j.col(k) = (mean2d(hi) - mean2d(lo)) / 2e-5;
        }
        const Mat2 oracle = j * sigma * j.transpose() + Mat2::Identity() * 0.3;
        EXPECT_LT((proj->cov2d - oracle).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, oracle.norm()));
    }
}

// ---------------------------------------------------------------------------
// Forward

TEST(Render, EmptyCloudIsBackground) {
    GaussianCloud cloud;
    cloud.sh_degree = 0;
    const Camera cam = axis_camera(8, 6, 10.0);
    const auto out = render(cloud, cam, RenderMode::color(), Vec3(0.1, 0.2, 0.3));
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 8; ++x) {
            EXPECT_EQ(out.image.at(x, y, 0), 0.1);
            EXPECT_EQ(out.image.at(x, y, 1), 0.2);
            EXPECT_EQ(out.image.at(x, y, 2), 0.3);
        }
    }
    for (double t : out.final_transmittance) EXPECT_EQ(t, 1.0);
}

TEST(Render, SingleSplatClampsAlpha) {
    const Camera cam = axis_camera(16, 16, 20.0);
    const GaussianCloud cloud = single(point_on_pixel(cam, 7, 7, 2.0), std::log(0.2), 0.99999, Vec3::Ones());
    const auto out = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.image.at(7, 7, ch), 0.999, 1e-9);
    EXPECT_EQ(out.per_pixel_contrib_count[7 * 16 + 7], 1);
}

TEST(Render, TwoSplatsCompositeFrontToBack) {
    const Camera cam = axis_camera(16, 16, 20.0);
    GaussianCloud cloud = single(point_on_pixel(cam, 5, 9, 3.0), std::log(0.1), 0.5, Vec3(0, 0, 1));
    cloud.push_back_from(single(point_on_pixel(cam, 5, 9, 2.0), std::log(0.1), 0.5, Vec3(1, 0, 0)), 0);
    const auto out = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    // Hand expansion: c_front a + c_back a (1 - a) with a = 0.5.
    EXPECT_NEAR(out.image.at(5, 9, 0), 0.5, 1e-9);
    EXPECT_NEAR(out.image.at(5, 9, 1), 0.0, 1e-9);
    EXPECT_NEAR(out.image.at(5, 9, 2), 0.25, 1e-9);
    EXPECT_NEAR(out.final_transmittance[9 * 16 + 5], 0.25, 1e-9);
}

TEST(Render, CompositingConservation) {
    std::mt19937_64 rng(22);
    GaussianCloud cloud = random_scene(rng, 30, 0, 0);
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        for (int ch = 0; ch < 3; ++ch) cloud.sh(i)[ch] = sh_dc_from_color(1.0);
    }
    const Camera cam = axis_camera(24, 20, 22.0);
    const auto out = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    for (std::size_t p = 0; p < out.image.pixel_count(); ++p) {
        EXPECT_NEAR(out.image.data[p * 3] + out.final_transmittance[p], 1.0, 1e-6);
        EXPECT_GE(out.final_transmittance[p], 0.0);
        EXPECT_LE(out.final_transmittance[p], 1.0);
    }
}

TEST(Render, StorageOrderDoesNotMatter) {
    std::mt19937_64 rng(23);
    const GaussianCloud cloud = random_scene(rng, 12, 1, 0);
    std::vector<std::size_t> perm(cloud.count());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    GaussianCloud shuffled;
    shuffled.sh_degree = cloud.sh_degree;
    for (std::size_t i : perm) shuffled.push_back_from(cloud, i);
    const Camera cam = axis_camera(20, 20, 18.0);
    const auto a = render(cloud, cam, RenderMode::color(), Vec3(0.2, 0.2, 0.2));
    const auto b = render(shuffled, cam, RenderMode::color(), Vec3(0.2, 0.2, 0.2));
    for (std::size_t k = 0; k < a.image.data.size(); ++k) EXPECT_NEAR(a.image.data[k], b.image.data[k], 1e-12);
}

TEST(Render, TranslationEquivariantBitwise) {
    std::mt19937_64 rng(24);
    GaussianCloud cloud = random_scene(rng, 10, 1, 0);
    // Dyadic coordinates keep the shared offset exact in floating point.
    for (auto& p : cloud.positions) {
        for (int k = 0; k < 3; ++k) p[k] = std::round(p[k] * 64.0) / 64.0;
    }
    Camera cam = axis_camera(20, 16, 18.0);
    const auto before = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    const Vec3 offset(0.75, -1.25, 2.5);
    for (auto& p : cloud.positions) p += offset;
    cam.cam_to_world.block<3, 1>(0, 3) += offset;
    const auto after = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    EXPECT_EQ(before.image.data, after.image.data);
}

TEST(Render, WorkerCountDoesNotChangeResults) {
    std::mt19937_64 rng(25);
    const GaussianCloud cloud = random_scene(rng, 20, 1, 0);
    const Camera cam = axis_camera(40, 40, 36.0);
    RenderSettings one, four;
    one.workers = 1;
    four.workers = 4;
    const Image w = random_weights(rng, 40, 40, 3);
    EXPECT_EQ(render(cloud, cam, RenderMode::color(), Vec3::Zero(), one).image.data,
              render(cloud, cam, RenderMode::color(), Vec3::Zero(), four).image.data);
    const auto g1 = render_backward(cloud, cam, RenderMode::color(), Vec3::Zero(), w, one);
    const auto g4 = render_backward(cloud, cam, RenderMode::color(), Vec3::Zero(), w, four);
    EXPECT_EQ(g1.positions, g4.positions);
    EXPECT_EQ(g1.sh_coeffs, g4.sh_coeffs);
}

TEST(Render, MaskModeBounds) {
    std::mt19937_64 rng(26);
    const int slots = 3;
    const GaussianCloud cloud = random_scene(rng, 25, 0, slots);
    const Camera cam = axis_camera(24, 24, 22.0);
    const auto color = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    for (int a = 0; a < slots; ++a) {
        const auto out = render(cloud, cam, RenderMode::mask(a), Vec3(1, 1, 1));
        ASSERT_EQ(out.image.channels, 1);
        for (std::size_t p = 0; p < out.image.data.size(); ++p) {
            EXPECT_GE(out.image.data[p], 0.0);
            EXPECT_LE(out.image.data[p], 1.0);
            EXPECT_LE(out.image.data[p] + color.final_transmittance[p], 1.0 + 1e-6);
        }
    }
}

TEST(Render, MaskModeSumsToCoverageForSingleLayer) {
    // Disjoint splats: at most one contributor per pixel, so the attribute
    // images partition the covered fraction exactly.
    std::mt19937_64 rng(32);
    const Camera cam = axis_camera(32, 32, 30.0);
    GaussianCloud cloud;
    cloud.sh_degree = 0;
    for (int k = 0; k < 4; ++k) {
        const Vec3 pos = point_on_pixel(cam, 6 + 18 * (k % 2), 6 + 18 * (k / 2), 3.0);
        cloud.push_back_from(single(pos, std::log(0.04), test::uniform(rng, 0.3, 0.9), Vec3::Ones()), 0);
    }
    const int slots = 4;
    cloud.init_masks(slots);
    for (double& m : cloud.mask_logits) m = test::uniform(rng, -2.0, 2.0);
    const auto color = render(cloud, cam, RenderMode::color(), Vec3::Zero());
    ASSERT_LE(*std::max_element(color.per_pixel_contrib_count.begin(), color.per_pixel_contrib_count.end()), 1);
    std::vector<double> total(color.final_transmittance);
    for (int a = 0; a < slots; ++a) {
        const auto out = render(cloud, cam, RenderMode::mask(a), Vec3::Zero());
        for (std::size_t p = 0; p < total.size(); ++p) total[p] += out.image.data[p];
    }
    for (double v : total) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Render, MaskModeWithoutLogitsIsStateError) {
    std::mt19937_64 rng(27);
    const GaussianCloud cloud = random_scene(rng, 3, 0, 0);
    EXPECT_THROW(render(cloud, axis_camera(8, 8, 8.0), RenderMode::mask(0), Vec3::Zero()), StateError);
}

// ---------------------------------------------------------------------------
// Backward

TEST(RenderBackward, ZeroCotangentGivesZeroGradients) {
    std::mt19937_64 rng(28);
    const GaussianCloud cloud = random_scene(rng, 8, 1, 0);
    const Camera cam = axis_camera(16, 16, 15.0);
    const auto g = render_backward(cloud, cam, RenderMode::color(), Vec3::Zero(), Image(16, 16, 3));
    for (std::size_t i = 0; i < cloud.count(); ++i) {
        EXPECT_TRUE(g.positions[i].isZero(0.0));
        EXPECT_TRUE(g.rotations[i].isZero(0.0));
        EXPECT_TRUE(g.log_scales[i].isZero(0.0));
        EXPECT_EQ(g.opacity_logits[i], 0.0);
    }
    for (double v : g.sh_coeffs) EXPECT_EQ(v, 0.0);
}

TEST(RenderBackward, OpacityGradientPositiveAtCenterPixel) {
    const Camera cam = axis_camera(16, 16, 20.0);
    const GaussianCloud cloud = single(point_on_pixel(cam, 8, 8, 2.0), std::log(0.1), 0.4, Vec3(0.7, 0.7, 0.7));
    Image w(16, 16, 3);
    w.at(8, 8, 0) = 1.0;
    const auto g = render_backward(cloud, cam, RenderMode::color(), Vec3::Zero(), w);
    EXPECT_GT(g.opacity_logits[0], 0.0);
}

TEST(RenderBackward, ColorModeMatchesFiniteDifferences) {
    std::mt19937_64 rng(29);
    const Camera cam = axis_camera(16, 16, 15.0);
    for (int scene = 0; scene < 3; ++scene) {
        const GaussianCloud cloud = random_scene(rng, 8, 1, 0);
        const Image w = random_weights(rng, 16, 16, 3);
        const FdReport r = gradient_check(cloud, cam, RenderMode::color(), Vec3(0.1, 0.3, 0.2), w);
        EXPECT_GT(r.checked, 100);
        EXPECT_LT(r.worst, 1e-3) << "checked " << r.checked << " skipped " << r.skipped;
    }
}

TEST(RenderBackward, OffAxisCameraHigherShMatchesFiniteDifferences) {
    std::mt19937_64 rng(30);
    const Camera cam = Camera::look_at(Vec3(0.7, 0.4, 0.5), Vec3(0, 0, -3), Vec3::UnitY(), 16, 16, 1.0);
    const GaussianCloud cloud = random_scene(rng, 8, 3, 0);
    const Image w = random_weights(rng, 16, 16, 3);
    const FdReport r = gradient_check(cloud, cam, RenderMode::color(), Vec3::Zero(), w);
    EXPECT_GT(r.checked, 100);
    EXPECT_LT(r.worst, 1e-3) << "checked " << r.checked << " skipped " << r.skipped;
}

TEST(RenderBackward, MaskModeMatchesFiniteDifferences) {
    std::mt19937_64 rng(31);
    const Camera cam = axis_camera(16, 16, 15.0);
    const GaussianCloud cloud = random_scene(rng, 8, 0, 3);
    const Image w = random_weights(rng, 16, 16, 1);
    for (int a = 0; a < 3; ++a) {
        const FdReport r = gradient_check(cloud, cam, RenderMode::mask(a), Vec3::Zero(), w);
        EXPECT_GT(r.checked, 40);
        EXPECT_LT(r.worst, 1e-3) << "checked " << r.checked << " skipped " << r.skipped;
    }
}
