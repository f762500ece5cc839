// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/train.hpp"

#include "cogs/errors.hpp"
#include "cogs/toy.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

namespace cogs {
namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.n_init = 40;
    c.warmup_iters = 20;
    c.reg_start_iters = 40;
    c.total_iters = 60;
    c.deform_hidden_width = 16;
    c.deform_hidden_layers = 1;
    c.position_freqs = 4;
    c.time_freqs = 2;
    c.knn_k = 5;
    c.densify_interval = 15;
    c.max_gaussians = 200;
    c.box_min_x = c.box_min_y = c.box_min_z = -1.0;
    c.box_max_x = c.box_max_y = c.box_max_z = 1.0;
    return c;
}

const ToyScene& small_dynamic() {
    static const ToyScene scene = make_dynamic_toy(ToyOptions{24, 24, 3});
    return scene;
}

TEST(TrainConfig, ScheduleScaling) {
    TrainConfig c;
    EXPECT_EQ(c.warmup(), 3000);
    EXPECT_EQ(c.reg_start(), 15000);
    EXPECT_EQ(c.total(), 50000);
    c.iteration_scale = 0.16;
    EXPECT_EQ(c.warmup(), 480);
    EXPECT_EQ(c.reg_start(), 2400);
    EXPECT_EQ(c.total(), 8000);
    EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, ValidateRejectsBadValues) {
    TrainConfig c;
    c.warmup_iters = 20000;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.sh_dc_lr = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.box_min_x = 2.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.sh_degree = 4;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.warmup_iters = c.reg_start_iters = c.total_iters = 100;  // total == warmup is a static fit
    EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, VisitorSeesEveryFieldOnce) {
    TrainConfig c;
    std::set<std::string> names;
    int calls = 0;
    c.visit([&](const char* name, auto&) {
        names.insert(name);
        ++calls;
    });
    EXPECT_EQ(static_cast<std::size_t>(calls), names.size());
    EXPECT_TRUE(names.count("lambda_norm"));
    EXPECT_TRUE(names.count("iteration_scale"));
    c.visit([](const char* name, auto& v) {
        if (std::string(name) == "knn_k") v = 7;
    });
    EXPECT_EQ(c.knn_k, 7);
}

TEST(InitCloud, UniformInBoxWithNeighborScale) {
    Rng rng(1);
    const SceneBox box{Vec3(-1, -2, 0), Vec3(1, 2, 1)};
    const GaussianCloud c = init_cloud(box, 64, 1, rng);
    ASSERT_EQ(c.count(), 64u);
    EXPECT_NO_THROW(c.validate());
    for (std::size_t i = 0; i < c.count(); ++i) {
        for (int d = 0; d < 3; ++d) {
            EXPECT_GE(c.positions[i][d], box.min_corner[d]);
            EXPECT_LE(c.positions[i][d], box.max_corner[d]);
            EXPECT_EQ(c.positions[i][d], round_to_f32(c.positions[i][d]));
        }
        // Oracle: brute-force three nearest distances.
        std::vector<double> d;
        for (std::size_t j = 0; j < c.count(); ++j) {
            if (j != i) d.push_back((c.positions[j] - c.positions[i]).norm());
        }
        std::sort(d.begin(), d.end());
        const double expected = (d[0] + d[1] + d[2]) / 3.0;
        EXPECT_NEAR(std::exp(c.log_scales[i][0]), expected, 1e-6 * expected);
        EXPECT_EQ(c.log_scales[i][0], c.log_scales[i][2]);
        EXPECT_NEAR(sigmoid(c.opacity_logits[i]), 0.1, 1e-7);
        EXPECT_EQ(c.rotations[i], Vec4(1, 0, 0, 0));
    }
}

TEST(PhotometricLoss, ZeroForIdenticalAndMatchesFiniteDifferences) {
    std::mt19937_64 rng(2);
    Image a(13, 12, 3), b(13, 12, 3);
    for (std::size_t k = 0; k < a.data.size(); ++k) {
        a.data[k] = test::uniform(rng, 0.1, 0.9);
        b.data[k] = test::uniform(rng, 0.1, 0.9);
    }
    EXPECT_NEAR(photometric_loss(a, a, 0.2).value, 0.0, 1e-12);
    const PhotometricLoss l = photometric_loss(a, b, 0.2);
    // Oracle for the L1 part.
    double l1 = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) l1 += std::abs(a.data[k] - b.data[k]);
    EXPECT_NEAR(photometric_loss(a, b, 0.0).value, l1 / a.data.size(), 1e-12);
    EXPECT_NEAR(l.value, 0.8 * l1 / a.data.size() + 0.1 * (1.0 - ssim(a, b)), 1e-12);
    for (std::size_t k = 0; k < a.data.size(); k += 17) {
        const double fd = test::central_difference([&] { return photometric_loss(a, b, 0.2).value; }, a.data[k], 1e-7);
        EXPECT_NEAR(l.grad.data[k], fd, 1e-7);
    }
    EXPECT_THROW(photometric_loss(a, Image(3, 3, 3), 0.2), ConfigError);
}

TEST(SceneExtent, MaxDistanceFromCentroid) {
    Dataset ds;
    for (double x : {-1.0, 1.0, 0.0}) {
        Frame f;
        f.camera.cam_to_world(0, 3) = x;
        ds.frames.push_back(f);
    }
    EXPECT_DOUBLE_EQ(scene_extent(ds), 1.1);
}

GaussianCloud densify_cloud() {
    GaussianCloud c;
    c.sh_degree = 0;
    c.resize(4);
    for (std::size_t i = 0; i < 4; ++i) {
        c.positions[i] = Vec3(static_cast<double>(i), 0, 0);
        c.log_scales[i] = Vec3::Constant(std::log(0.001));
        c.opacity_logits[i] = logit(0.5);
        c.sh_coeffs[i * 3] = 0.125 * static_cast<double>(i);  // float32-exact: densify keeps state on that grid
    }
    return c;
}

DensifyStats stats_with(std::vector<double> mean_grad) {
    DensifyStats s;
    s.reset(mean_grad.size());
    for (std::size_t i = 0; i < mean_grad.size(); ++i) {
        s.grad_sum[i] = 2.0 * mean_grad[i];
        s.count[i] = 2;
    }
    return s;
}

TEST(Densify, NothingHappensBelowThresholds) {
    GaussianCloud c = densify_cloud();
    const GaussianCloud before = c;
    Rng rng(3);
    const DensifyResult r = densify_and_prune(c, stats_with({0, 1e-5, 1e-4, 0}), TrainConfig{}, 1.0, rng);
    EXPECT_EQ(r.cloned + r.split + r.pruned, 0u);
    EXPECT_EQ(c.positions, before.positions);
    EXPECT_EQ(c.sh_coeffs, before.sh_coeffs);
    EXPECT_EQ(r.source, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Densify, PrunesTransparentGaussian) {
    GaussianCloud c = densify_cloud();
    c.opacity_logits[2] = logit(0.001);
    Rng rng(4);
    const DensifyResult r = densify_and_prune(c, stats_with({0, 0, 0, 0}), TrainConfig{}, 1.0, rng);
    EXPECT_EQ(r.pruned, 1u);
    EXPECT_EQ(c.count(), 3u);
    EXPECT_EQ(r.source, (std::vector<std::size_t>{0, 1, 3}));
    EXPECT_EQ(c.positions[2], Vec3(3, 0, 0));
}

TEST(Densify, CloneSmallSplitLarge) {
    GaussianCloud c = densify_cloud();
    c.log_scales[3] = Vec3(std::log(0.5), std::log(0.2), std::log(0.1));
    Rng rng(5);
    const DensifyResult r = densify_and_prune(c, stats_with({0.001, 0, 0, 0.001}), TrainConfig{}, 1.0, rng);
    EXPECT_EQ(r.cloned, 1u);
    EXPECT_EQ(r.split, 1u);
    // 4 originals, clone +1, split replaces 1 with 2.
    ASSERT_EQ(c.count(), 6u);
    EXPECT_EQ(r.source, (std::vector<std::size_t>{0, 1, 2, 0, 3, 3}));
    EXPECT_EQ(r.fresh, (std::vector<bool>{false, false, false, true, true, true}));
    EXPECT_EQ(c.positions[3], c.positions[0]);
    const Vec3 child_scale = Vec3(0.5, 0.2, 0.1) / 1.6;
    for (std::size_t j : {4u, 5u}) {
        for (int d = 0; d < 3; ++d) EXPECT_NEAR(std::exp(c.log_scales[j][d]), child_scale[d], 1e-6);
        EXPECT_NE(c.positions[j], Vec3(3, 0, 0));
        EXPECT_LT((c.positions[j] - Vec3(3, 0, 0)).norm(), 3.0);
    }
    EXPECT_NO_THROW(c.validate());
}

TEST(Densify, RespectsBudget) {
    GaussianCloud c = densify_cloud();
    TrainConfig cfg;
    cfg.n_init = 1;
    cfg.max_gaussians = 5;
    Rng rng(6);
    const DensifyResult r = densify_and_prune(c, stats_with({1, 1, 1, 1}), cfg, 1.0, rng);
    EXPECT_EQ(r.cloned, 1u);
    EXPECT_EQ(c.count(), 5u);
}

TEST(Densify, OptimizerMomentsFollowSources) {
    GaussianCloud c = densify_cloud();
    CloudOptimizer opt = CloudOptimizer::create(c);
    for (std::size_t i = 0; i < 4; ++i) opt.opacity_logits.m[i] = static_cast<double>(i + 1);
    const GaussianCloud before = c;
    c.opacity_logits[1] = logit(0.001);
    Rng rng(7);
    const DensifyResult r = densify_and_prune(c, stats_with({0.001, 0, 0, 0}), TrainConfig{}, 1.0, rng);
    opt.remap(before, r);
    EXPECT_EQ(opt.opacity_logits.m, (std::vector<double>{1, 3, 4, 0}));
    EXPECT_EQ(opt.positions.size(), c.count() * 3);
    EXPECT_EQ(opt.sh_coeffs.size(), c.sh_coeffs.size());
}

TEST(LossLog, RowFormat) {
    std::ostringstream out;
    LossRow row;
    row.iter = 12;
    row.photometric = 0.5;
    row.total = 0.25;
    row.lr = 1e-4;
    write_loss_row(out, row);
    EXPECT_EQ(out.str(), "12,0.5,0,0,0,0,0,0.25,0.0001\n");
    EXPECT_EQ(std::string(kLossLogHeader), "iter,photometric,norm,diff,rigid,rot,mask,total,lr");
}

TEST(DynamicTrainer, WarmupIsDeterministic) {
    const TrainConfig cfg = tiny_config();
    DynamicTrainer a(small_dynamic().train, cfg, 11);
    DynamicTrainer b(small_dynamic().train, cfg, 11);
    while (a.iteration() < cfg.warmup()) a.step();
    while (b.iteration() < cfg.warmup()) b.step();
    EXPECT_EQ(a.state().cloud.positions, b.state().cloud.positions);
    EXPECT_EQ(a.state().cloud.sh_coeffs, b.state().cloud.sh_coeffs);
    EXPECT_EQ(a.state().cloud.opacity_logits, b.state().cloud.opacity_logits);
}

TEST(DynamicTrainer, StaticFitLeavesDeformationUntouched) {
    TrainConfig cfg = tiny_config();
    cfg.warmup_iters = cfg.reg_start_iters = cfg.total_iters = 30;
    DynamicTrainer t(small_dynamic().train, cfg, 12);
    const DeformationModel fresh = t.state().model;
    t.run();
    EXPECT_TRUE(t.finished());
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(t.state().model.nets[k].params, fresh.nets[k].params);
    EXPECT_EQ(t.neighbors(), nullptr);
    EXPECT_THROW(t.step(), StateError);
}

TEST(DynamicTrainer, ZeroDeformationContinuity) {
    const TrainConfig cfg = tiny_config();
    DynamicTrainer live(small_dynamic().train, cfg, 13);
    while (live.iteration() < cfg.warmup()) live.step();
    TrainConfig frozen_cfg = cfg;
    frozen_cfg.warmup_iters = frozen_cfg.reg_start_iters;  // deformation still frozen at this iteration
    DynamicTrainer frozen(small_dynamic().train, frozen_cfg, live.state());
    const LossRow a = live.step();
    const LossRow b = frozen.step();
    EXPECT_EQ(a.iter, cfg.warmup());
    EXPECT_EQ(a.photometric, b.photometric);
    EXPECT_EQ(a.norm, 0.0);
    EXPECT_EQ(a.total, b.total);
}

TEST(DynamicTrainer, RegularizersStartAtRegStart) {
    const TrainConfig cfg = tiny_config();
    DynamicTrainer t(small_dynamic().train, cfg, 14);
    std::vector<LossRow> rows;
    t.run([&](const LossRow& r) { rows.push_back(r); });
    ASSERT_EQ(rows.size(), static_cast<std::size_t>(cfg.total()));
    for (const LossRow& r : rows) {
        if (r.iter < cfg.reg_start()) {
            EXPECT_EQ(r.diff, 0.0);
            EXPECT_EQ(r.rigid, 0.0);
        }
        if (r.iter < cfg.warmup()) {
            EXPECT_EQ(r.norm, 0.0);
        }
        EXPECT_TRUE(std::isfinite(r.total));
    }
    ASSERT_NE(t.neighbors(), nullptr);
    EXPECT_EQ(t.neighbors()->count(), t.state().cloud.count());
    EXPECT_GT(rows.back().norm, 0.0);
    for (const Vec4& q : t.state().cloud.rotations) EXPECT_NEAR(q.norm(), 1.0, 1e-6);
}

TEST(DynamicTrainer, ResumeRejectsMismatchedState) {
    const TrainConfig cfg = tiny_config();
    DynamicTrainer t(small_dynamic().train, cfg, 15);
    TrainerState s = t.state();
    s.cloud_opt.positions = AdamState(3);
    EXPECT_THROW(DynamicTrainer(small_dynamic().train, cfg, s), StateError);
}

}  // namespace
}  // namespace cogs
