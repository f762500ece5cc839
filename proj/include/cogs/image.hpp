// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cogs {

/// Row-major, channel-interleaved image of doubles. Color images are linear [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t index(int x, int y, int c = 0) const {
        return (static_cast<std::size_t>(y) * width + x) * channels + c;
    }
    double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

/// Extracts channel c as a single-channel image.
Image extract_channel(const Image& img, int c);

// ---------------------------------------------------------------------------
// Metrics

constexpr double kPsnrCap = 99.0;

/// 10 log10(max^2 / MSE) over all channels; kPsnrCap for identical images.
double psnr(const Image& a, const Image& b, double max_value = 1.0);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

/// Mean SSIM over the valid (fully covered) window positions, averaged over channels.
double ssim(const Image& a, const Image& b, const SsimOptions& options = {});

/// ssim(a, b) together with its gradient with respect to a.
double ssim_with_grad(const Image& a, const Image& b, Image& grad_a,
                      const SsimOptions& options = {});

// ---------------------------------------------------------------------------
// PNG codec (8 bit)

/// Encodes 1 (gray), 3 (rgb) or 4 (rgba) channel images; values are clamped to [0, 1].
std::vector<std::uint8_t> encode_png(const Image& img);
void encode_png(const Image& img, const std::filesystem::path& path);

/// Decodes to [0, 1]; gray files give 1 channel, rgb 3, anything with alpha 4.
Image decode_png(std::span<const std::uint8_t> bytes);
Image decode_png(const std::filesystem::path& path);

/// rgba -> rgb composited over background; rgb passes through.
Image composite_over(const Image& rgba, double background_r, double background_g,
                     double background_b);

}  // namespace cogs
