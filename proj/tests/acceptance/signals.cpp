// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

// Control signal extraction against projection oracles built from the known
// generating direction.

#include "acceptance.hpp"

#include "cogs/control.hpp"
#include "cogs/errors.hpp"

#include <cmath>
#include <random>

namespace cogs::acceptance {
namespace {

using Engine = std::mt19937_64;

Vec3 random_direction(Engine& rng) {
    std::normal_distribution<double> n;
    return Vec3(n(rng), n(rng), n(rng)).normalized();
}

// Normalized projection onto d, oriented so the last sample projects at least as far as the first.
std::pair<Vec3, std::vector<double>> projection_oracle(const std::vector<Vec3>& traj, Vec3 d) {
    if (traj.back().dot(d) < traj.front().dot(d)) d = -d;
    double lo = INFINITY, hi = -INFINITY;
    for (const Vec3& p : traj) {
        lo = std::min(lo, p.dot(d));
        hi = std::max(hi, p.dot(d));
    }
    std::vector<double> sigma;
    for (const Vec3& p : traj) sigma.push_back((p.dot(d) - lo) / (hi - lo));
    return {d, sigma};
}

std::vector<Check> signal_extraction() {
    Engine rng(5150);
    std::normal_distribution<double> gauss;
    std::vector<Check> checks;

    double ramp_error = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 start(gauss(rng), gauss(rng), gauss(rng));
        const Vec3 span = random_direction(rng) * std::uniform_real_distribution<double>(0.1, 3.0)(rng);
        const int n = 8 + trial;
        std::vector<Vec3> traj;
        for (int k = 0; k < n; ++k) traj.push_back(start + span * (static_cast<double>(k) / (n - 1)));
        const ControlSignal s = extract_signal(traj);
        for (int k = 0; k < n; ++k) {
            ramp_error = std::max(ramp_error, std::abs(s.sigma[static_cast<std::size_t>(k)] - static_cast<double>(k) / (n - 1)));
        }
    }
    checks.push_back(below("linear ramp max |error|", ramp_error, 1e-9));

    double worst_angle = 0.0, worst_sigma = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 center(gauss(rng), gauss(rng), gauss(rng));
        const Vec3 d = random_direction(rng);
        const double amplitude = std::uniform_real_distribution<double>(0.2, 2.0)(rng);
        const double noise = amplitude / 100.0;
        std::vector<Vec3> traj;
        for (int k = 0; k < 60; ++k) {
            const double t = k / 59.0;
            traj.push_back(center + amplitude * std::sin(1.5 * M_PI * t) * d +
                           noise * Vec3(gauss(rng), gauss(rng), gauss(rng)));
        }
        const ControlSignal s = extract_signal(traj);
        const auto [oriented, oracle] = projection_oracle(traj, d);
        const double cosine = std::clamp(s.direction.dot(oriented), -1.0, 1.0);
        worst_angle = std::max(worst_angle, std::acos(cosine) * 180.0 / M_PI);
        for (std::size_t k = 0; k < oracle.size(); ++k) worst_sigma = std::max(worst_sigma, std::abs(s.sigma[k] - oracle[k]));
    }
    checks.push_back(below("noisy sinusoid direction error", worst_angle, 1.0, " deg"));
    checks.push_back(below("noisy sinusoid sigma error", worst_sigma, 0.02));

    bool degenerate = false;
    try {
        extract_signal(std::vector<Vec3>(12, Vec3(0.3, -0.2, 0.9)));
    } catch (const DegenerateControlError&) {
        degenerate = true;
    }
    checks.push_back({"static trajectory", degenerate, degenerate ? "raises DegenerateControlError" : "did not raise"});
    return checks;
}

}  // namespace

std::vector<Criterion> signal_criteria() {
    return {{"5", "control signal extraction", 10.0, signal_extraction}};
}

}  // namespace cogs::acceptance
