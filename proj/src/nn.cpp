// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/nn.hpp"

#include "cogs/errors.hpp"
#include "cogs/gaussian.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cogs {

namespace {

using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

void positional_encode(std::span<const double> x, int num_freq, std::span<double> out) {
    const std::size_t d = x.size();
    if (num_freq < 0) throw ConfigError("positional_encode: negative frequency count");
    if (out.size() != static_cast<std::size_t>(encoded_width(static_cast<int>(d), num_freq))) {
        throw ConfigError("positional_encode: output has the wrong width");
    }
    for (std::size_t i = 0; i < d; ++i) out[i] = x[i];
    double freq = std::numbers::pi;
    for (int k = 0; k < num_freq; ++k) {
        double* s = out.data() + d * (1 + 2 * k);
        double* c = s + d;
        for (std::size_t i = 0; i < d; ++i) {
            s[i] = std::sin(freq * x[i]);
            c[i] = std::cos(freq * x[i]);
        }
        freq *= 2.0;
    }
}

std::vector<double> positional_encode(std::span<const double> x, int num_freq) {
    if (num_freq < 0) throw ConfigError("positional_encode: negative frequency count");
    std::vector<double> out(static_cast<std::size_t>(encoded_width(static_cast<int>(x.size()), num_freq)));
    positional_encode(x, num_freq, out);
    return out;
}

// ---------------------------------------------------------------------------

std::size_t Mlp::param_count(const std::vector<int>& w) {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        n += static_cast<std::size_t>(w[l + 1]) * (static_cast<std::size_t>(w[l]) + 1);
    }
    return n;
}

std::size_t Mlp::weight_offset(int layer) const {
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l) {
        off += static_cast<std::size_t>(layer_widths[l + 1]) * (static_cast<std::size_t>(layer_widths[l]) + 1);
    }
    return off;
}

std::size_t Mlp::bias_offset(int layer) const {
    return weight_offset(layer) +
           static_cast<std::size_t>(layer_widths[layer + 1]) * static_cast<std::size_t>(layer_widths[layer]);
}

void Mlp::validate() const {
    if (layer_widths.size() < 2) throw ConfigError("Mlp needs at least an input and an output width");
    for (int w : layer_widths) {
        if (w <= 0) throw ConfigError("Mlp layer widths must be positive");
    }
    if (params.size() != param_count(layer_widths)) {
        throw ConfigError("Mlp parameter count " + std::to_string(params.size()) + " does not match widths (" +
                          std::to_string(param_count(layer_widths)) + ")");
    }
}

Mlp Mlp::create(const std::vector<int>& widths, Rng& rng, bool zero_output_layer) {
    Mlp net;
    net.layer_widths = widths;
    net.params.assign(param_count(widths), 0.0);
    net.validate();
    for (int l = 0; l < net.layer_count(); ++l) {
        if (zero_output_layer && l == net.layer_count() - 1) break;
        const double stddev = std::sqrt(2.0 / widths[l]);
        const std::size_t off = net.weight_offset(l);
        const std::size_t n = static_cast<std::size_t>(widths[l + 1]) * widths[l];
        for (std::size_t k = 0; k < n; ++k) net.params[off + k] = round_to_f32(stddev * normal(rng));
    }
    return net;
}

MatrixX mlp_forward(const Mlp& net, const MatrixX& inputs, MlpTape* tape) {
    if (inputs.rows() != net.input_width()) {
        throw ConfigError("mlp_forward: input width " + std::to_string(inputs.rows()) + ", network expects " +
                          std::to_string(net.input_width()));
    }
    if (tape) tape->inputs.clear();
    MatrixX a = inputs;
    for (int l = 0; l < net.layer_count(); ++l) {
        const int in = net.layer_widths[l], out = net.layer_widths[l + 1];
        RowMajorMap w(net.params.data() + net.weight_offset(l), out, in);
        Eigen::Map<const Eigen::VectorXd> b(net.params.data() + net.bias_offset(l), out);
        MatrixX z = w * a;
        z.colwise() += b;
        if (l + 1 < net.layer_count()) z = z.cwiseMax(0.0);
        if (tape) tape->inputs.push_back(std::move(a));
        a = std::move(z);
    }
    return a;
}

std::vector<double> mlp_forward(const Mlp& net, std::span<const double> input) {
    const MatrixX in = Eigen::Map<const Eigen::VectorXd>(input.data(), static_cast<Eigen::Index>(input.size()));
    const MatrixX out = mlp_forward(net, in);
    return {out.data(), out.data() + out.size()};
}

MatrixX mlp_backward(const Mlp& net, const MlpTape& tape, const MatrixX& grad_outputs,
                     std::span<double> grad_params) {
    if (grad_params.size() != net.params.size()) throw ConfigError("mlp_backward: gradient buffer size mismatch");
    if (static_cast<int>(tape.inputs.size()) != net.layer_count()) {
        throw ConfigError("mlp_backward: tape does not match the network");
    }
    MatrixX g = grad_outputs;
    for (int l = net.layer_count() - 1; l >= 0; --l) {
        const int in = net.layer_widths[l], out = net.layer_widths[l + 1];
        const MatrixX& a = tape.inputs[static_cast<std::size_t>(l)];
        RowMajorMap w(net.params.data() + net.weight_offset(l), out, in);
        RowMajorMutMap gw(grad_params.data() + net.weight_offset(l), out, in);
        Eigen::Map<Eigen::VectorXd> gb(grad_params.data() + net.bias_offset(l), out);
        gw.noalias() += g * a.transpose();
        gb += g.rowwise().sum();
        MatrixX next = w.transpose() * g;
        // The input of layer l > 0 is a ReLU output; zero entries pass no gradient.
        if (l > 0) next = (a.array() > 0.0).select(next, 0.0);
        g = std::move(next);
    }
    return g;
}

// ---------------------------------------------------------------------------

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr) {
    adam_step(params, grads, s, lr, {});
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr,
               std::span<const double> lr_scale) {
    if (params.size() != grads.size() || params.size() != s.m.size() || s.v.size() != s.m.size()) {
        throw ConfigError("adam_step: parameter, gradient and state sizes differ");
    }
    if (!lr_scale.empty() && lr_scale.size() != params.size()) {
        throw ConfigError("adam_step: learning rate scale has the wrong length");
    }
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        double m = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        double v = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        // A zero bias correction only occurs with beta = 1; treat it as no correction.
        const double m_hat = bc1 > 0.0 ? m / bc1 : m;
        const double v_hat = bc2 > 0.0 ? v / bc2 : v;
        const double rate = lr_scale.empty() ? lr : lr * lr_scale[i];
        double p = params[i] - rate * m_hat / (std::sqrt(v_hat) + s.eps);
        if (s.round_f32) {
            p = round_to_f32(p);
            m = round_to_f32(m);
            v = round_to_f32(v);
        }
        params[i] = p;
        s.m[i] = m;
        s.v[i] = v;
    }
}

double lr_exponential(long step, long total_steps, double lr_start, double lr_end) {
    if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw ConfigError("lr_exponential: learning rates must be positive");
    if (total_steps <= 0) return lr_end;
    const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
    if (frac == 0.0) return lr_start;
    if (frac == 1.0) return lr_end;
    return lr_start * std::pow(lr_end / lr_start, frac);
}

}  // namespace cogs
