// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cogs/random.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace cogs {

using MatrixX = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Positional encoding

constexpr int encoded_width(int dims, int num_freq) { return dims * (2 * num_freq + 1); }

/// out = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(F-1) pi x), cos(2^(F-1) pi x)],
/// each block holding all components of x. out must have encoded_width() entries.
void positional_encode(std::span<const double> x, int num_freq, std::span<double> out);
std::vector<double> positional_encode(std::span<const double> x, int num_freq);

// ---------------------------------------------------------------------------
// Fully connected network

/// ReLU hidden layers, identity output. Parameters are one flat array holding,
/// per layer, the row-major weight matrix (out x in) followed by the bias.
struct Mlp {
    std::vector<int> layer_widths;
    std::vector<double> params;

    /// He-normal hidden weights and zero biases. With zero_output_layer the last
    /// layer starts at exactly zero, so the network initially outputs zero.
    static Mlp create(const std::vector<int>& layer_widths, Rng& rng, bool zero_output_layer = true);

    int input_width() const { return layer_widths.front(); }
    int output_width() const { return layer_widths.back(); }
    int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }
    std::size_t weight_offset(int layer) const;
    std::size_t bias_offset(int layer) const;
    static std::size_t param_count(const std::vector<int>& layer_widths);

    /// Throws ConfigError on inconsistent widths or parameter length.
    void validate() const;
};

/// Activations kept by the forward pass for mlp_backward.
struct MlpTape {
    std::vector<MatrixX> inputs;  // input of every layer, one column per sample
};

/// Batched forward: inputs is input_width x batch. Throws ConfigError on width mismatch.
MatrixX mlp_forward(const Mlp& net, const MatrixX& inputs, MlpTape* tape = nullptr);
std::vector<double> mlp_forward(const Mlp& net, std::span<const double> input);

/// Accumulates dL/dparams into grad_params (length params.size()) and returns
/// dL/dinputs. ReLU has subgradient 0 at 0.
MatrixX mlp_backward(const Mlp& net, const MlpTape& tape, const MatrixX& grad_outputs,
                     std::span<double> grad_params);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Round parameters and moments to float32 after each step (training state lives on that grid).
    bool round_f32 = false;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
    std::size_t size() const { return m.size(); }
};

/// Bias-corrected Adam update of params in place. Throws ConfigError on size mismatch.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr);
/// Same with a per-element learning rate lr * lr_scale[i].
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               std::span<const double> lr_scale);

/// lr_start * (lr_end / lr_start)^(step / total_steps); step is clamped to [0, total_steps].
double lr_exponential(long step, long total_steps, double lr_start, double lr_end);

}  // namespace cogs
