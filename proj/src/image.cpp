// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#include "cogs/image.hpp"

#include "cogs/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace cogs {

Image extract_channel(const Image& img, int c) {
    Image out(img.width, img.height, 1);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        out.data[p] = img.data[p * img.channels + c];
    }
    return out;
}

// ---------------------------------------------------------------------------
// PSNR

double psnr(const Image& a, const Image& b, double max_value) {
    if (!a.same_shape(b)) throw ConfigError("psnr: image shapes differ");
    if (a.data.empty()) throw ConfigError("psnr: empty image");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(a.data.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(max_value * max_value / mse));
}

// ---------------------------------------------------------------------------
// SSIM

namespace {

std::vector<double> gaussian_window(const SsimOptions& o) {
    std::vector<double> g(static_cast<std::size_t>(o.window));
    const double mid = 0.5 * (o.window - 1);
    double total = 0.0;
    for (int k = 0; k < o.window; ++k) {
        const double d = k - mid;
        g[k] = std::exp(-d * d / (2.0 * o.sigma * o.sigma));
        total += g[k];
    }
    for (double& v : g) v /= total;
    return g;
}

// Plane of doubles, row-major.
struct Plane {
    int w = 0, h = 0;
    std::vector<double> v;
    Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
    double& operator()(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double operator()(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

// 'valid' separable correlation: output (w - n + 1) x (h - n + 1).
Plane filter_valid(const Plane& in, const std::vector<double>& g) {
    const int n = static_cast<int>(g.size());
    Plane tmp(in.w - n + 1, in.h);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < tmp.w; ++x) {
            double s = 0.0;
            for (int k = 0; k < n; ++k) s += g[k] * in(x + k, y);
            tmp(x, y) = s;
        }
    }
    Plane out(tmp.w, in.h - n + 1);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            double s = 0.0;
            for (int k = 0; k < n; ++k) s += g[k] * tmp(x, y + k);
            out(x, y) = s;
        }
    }
    return out;
}

// Adjoint of filter_valid: scatters a valid-sized plane back to full size.
Plane filter_valid_adjoint(const Plane& in, const std::vector<double>& g, int full_w, int full_h) {
    const int n = static_cast<int>(g.size());
    Plane tmp(in.w, full_h);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            const double v = in(x, y);
            for (int k = 0; k < n; ++k) tmp(x, y + k) += g[k] * v;
        }
    }
    Plane out(full_w, full_h);
    for (int y = 0; y < full_h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            const double v = tmp(x, y);
            for (int k = 0; k < n; ++k) out(x + k, y) += g[k] * v;
        }
    }
    return out;
}

double ssim_impl(const Image& a, const Image& b, Image* grad_a, const SsimOptions& o) {
    if (!a.same_shape(b)) throw ConfigError("ssim: image shapes differ");
    if (a.width < o.window || a.height < o.window) {
        throw ConfigError("ssim: image smaller than the " + std::to_string(o.window) +
                          "x" + std::to_string(o.window) + " window");
    }
    const auto g = gaussian_window(o);
    const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
    const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
    const int w = a.width, h = a.height;
    if (grad_a) *grad_a = Image(w, h, a.channels);

    double total = 0.0;
    for (int ch = 0; ch < a.channels; ++ch) {
        Plane x(w, h), y(w, h), xx(w, h), yy(w, h), xy(w, h);
        for (int j = 0; j < h; ++j) {
            for (int i = 0; i < w; ++i) {
                const double va = a.at(i, j, ch), vb = b.at(i, j, ch);
                x(i, j) = va;
                y(i, j) = vb;
                xx(i, j) = va * va;
                yy(i, j) = vb * vb;
                xy(i, j) = va * vb;
            }
        }
        const Plane mx = filter_valid(x, g), my = filter_valid(y, g);
        const Plane ex2 = filter_valid(xx, g), ey2 = filter_valid(yy, g), exy = filter_valid(xy, g);
        const double n_valid = static_cast<double>(mx.v.size());

        Plane d_mx(mx.w, mx.h), d_ex2(mx.w, mx.h), d_exy(mx.w, mx.h);
        double sum = 0.0;
        for (std::size_t p = 0; p < mx.v.size(); ++p) {
            const double mux = mx.v[p], muy = my.v[p];
            const double sx = ex2.v[p] - mux * mux;
            const double sy = ey2.v[p] - muy * muy;
            const double sxy = exy.v[p] - mux * muy;
            const double a1 = 2.0 * mux * muy + c1, a2 = 2.0 * sxy + c2;
            const double b1 = mux * mux + muy * muy + c1, b2 = sx + sy + c2;
            const double s = (a1 * a2) / (b1 * b2);
            sum += s;
            if (grad_a) {
                const double ds_dmux = 2.0 * muy * a2 / (b1 * b2) - s * 2.0 * mux / b1;
                const double ds_dsx = -s / b2;
                const double ds_dsxy = 2.0 * a1 / (b1 * b2);
                d_mx.v[p] = ds_dmux - 2.0 * mux * ds_dsx - muy * ds_dsxy;
                d_ex2.v[p] = ds_dsx;
                d_exy.v[p] = ds_dsxy;
            }
        }
        total += sum / n_valid;

        if (grad_a) {
            const double scale = 1.0 / (n_valid * a.channels);
            const Plane g_mx = filter_valid_adjoint(d_mx, g, w, h);
            const Plane g_ex2 = filter_valid_adjoint(d_ex2, g, w, h);
            const Plane g_exy = filter_valid_adjoint(d_exy, g, w, h);
            for (int j = 0; j < h; ++j) {
                for (int i = 0; i < w; ++i) {
                    grad_a->at(i, j, ch) =
                        scale * (g_mx(i, j) + 2.0 * x(i, j) * g_ex2(i, j) + y(i, j) * g_exy(i, j));
                }
            }
        }
    }
    return total / a.channels;
}

}  // namespace

double ssim(const Image& a, const Image& b, const SsimOptions& options) {
    return ssim_impl(a, b, nullptr, options);
}

double ssim_with_grad(const Image& a, const Image& b, Image& grad_a, const SsimOptions& options) {
    return ssim_impl(a, b, &grad_a, options);
}

// ---------------------------------------------------------------------------
// PNG

namespace {

png_uint_32 png_format_for(int channels) {
    switch (channels) {
        case 1: return PNG_FORMAT_GRAY;
        case 3: return PNG_FORMAT_RGB;
        case 4: return PNG_FORMAT_RGBA;
        default: throw CodecError("PNG encode: unsupported channel count " + std::to_string(channels));
    }
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.width <= 0 || img.height <= 0) throw CodecError("PNG encode: empty image");
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    desc.width = static_cast<png_uint_32>(img.width);
    desc.height = static_cast<png_uint_32>(img.height);
    desc.format = png_format_for(img.channels);

    std::vector<std::uint8_t> pixels(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::clamp(img.data[i], 0.0, 1.0);
        pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }

    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&desc, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
        throw CodecError(std::string("PNG encode failed: ") + desc.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&desc, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
        throw CodecError(std::string("PNG encode failed: ") + desc.message);
    }
    out.resize(size);
    return out;
}

void encode_png(const Image& img, const std::filesystem::path& path) {
    const auto bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CodecError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CodecError("failed writing " + path.string());
}

Image decode_png(std::span<const std::uint8_t> bytes) {
    png_image desc{};
    desc.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&desc, bytes.data(), bytes.size())) {
        throw CodecError(std::string("PNG decode failed: ") + desc.message);
    }
    int channels = 1;
    if (desc.format & PNG_FORMAT_FLAG_ALPHA) {
        desc.format = PNG_FORMAT_RGBA;
        channels = 4;
    } else if (desc.format & PNG_FORMAT_FLAG_COLOR) {
        desc.format = PNG_FORMAT_RGB;
        channels = 3;
    } else {
        desc.format = PNG_FORMAT_GRAY;
    }
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(desc));
    if (!png_image_finish_read(&desc, nullptr, pixels.data(), 0, nullptr)) {
        png_image_free(&desc);
        throw CodecError(std::string("PNG decode failed: ") + desc.message);
    }
    Image img(static_cast<int>(desc.width), static_cast<int>(desc.height), channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = pixels[i] / 255.0;
    return img;
}

Image decode_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CodecError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_png(bytes);
    } catch (const CodecError& e) {
        throw CodecError(path.string() + ": " + e.what());
    }
}

Image composite_over(const Image& rgba, double r, double g, double b) {
    if (rgba.channels == 3) return rgba;
    if (rgba.channels == 1) {
        Image out(rgba.width, rgba.height, 3);
        for (std::size_t p = 0; p < rgba.pixel_count(); ++p) {
            for (int c = 0; c < 3; ++c) out.data[p * 3 + c] = rgba.data[p];
        }
        return out;
    }
    if (rgba.channels != 4) throw CodecError("composite_over: unsupported channel count");
    const double bg[3] = {r, g, b};
    Image out(rgba.width, rgba.height, 3);
    for (std::size_t p = 0; p < rgba.pixel_count(); ++p) {
        const double alpha = rgba.data[p * 4 + 3];
        for (int c = 0; c < 3; ++c) {
            out.data[p * 3 + c] = rgba.data[p * 4 + c] * alpha + bg[c] * (1.0 - alpha);
        }
    }
    return out;
}

}  // namespace cogs
