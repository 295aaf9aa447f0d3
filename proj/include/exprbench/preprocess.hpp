#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "exprbench/image.hpp"
#include "exprbench/tensor.hpp"

namespace exprbench {

// ---------------------------------------------------------------------------
// method selection

enum class PrepKind { raw, histeq, isotropic, dct, dog };

struct PrepParams {
    double is_lambda = 0.25; // diffusion step weight, stability bound for 2-D
    int is_iterations = 15;
    int dct_discard = 50;    // zigzag coefficients touched, DC included
    double dog_sigma1 = 1.0;
    double dog_sigma2 = 2.0;
};

struct PrepMethod {
    PrepKind kind = PrepKind::raw;
    PrepParams params;
};

inline const char* prep_kind_name(PrepKind k) {
    switch (k) {
    case PrepKind::raw: return "raw";
    case PrepKind::histeq: return "histeq";
    case PrepKind::isotropic: return "is";
    case PrepKind::dct: return "dct";
    case PrepKind::dog: return "dog";
    }
    return "?";
}

inline PrepKind parse_prep_kind(const std::string& name) {
    if (name == "raw") return PrepKind::raw;
    if (name == "histeq") return PrepKind::histeq;
    if (name == "is") return PrepKind::isotropic;
    if (name == "dct") return PrepKind::dct;
    if (name == "dog") return PrepKind::dog;
    throw std::invalid_argument("unknown preprocessing method: " + name);
}

// ---------------------------------------------------------------------------
// raw

inline GrayImage prep_raw(const GrayImage& img) { return img; }

// ---------------------------------------------------------------------------
// histogram equalization
//
// v -> round(255 * (cdf(v) - cdf_min) / (N - cdf_min)), cdf_min being the
// first nonzero cdf value. Constant images pass through unchanged.

inline GrayImage hist_eq(const GrayImage& img) {
    const std::size_t n = img.pixels.size();
    std::array<std::size_t, 256> hist{};
    for (std::uint8_t p : img.pixels)
        ++hist[p];
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0;
    std::size_t cdf_min = 0;
    for (int v = 0; v < 256; ++v) {
        run += hist[v];
        cdf[v] = run;
        if (cdf_min == 0 && run > 0)
            cdf_min = run;
    }
    if (cdf_min == n)
        return img; // constant image
    std::array<std::uint8_t, 256> lut{};
    const double denom = static_cast<double>(n - cdf_min);
    for (int v = 0; v < 256; ++v) {
        double scaled =
            255.0 * (static_cast<double>(cdf[v]) - static_cast<double>(cdf_min)) /
            denom;
        lut[v] = static_cast<std::uint8_t>(
            std::clamp(std::lround(scaled), 0L, 255L));
    }
    GrayImage out(img.width, img.height);
    for (std::size_t k = 0; k < n; ++k)
        out.pixels[k] = lut[img.pixels[k]];
    return out;
}

// ---------------------------------------------------------------------------
// isotropic smoothing (diffusion-based illumination normalization)

// One explicit heat-equation step: L += lambda * laplacian(L), 5-point
// stencil with replicated borders. Conserves the field sum exactly.
inline void diffuse_step(std::vector<double>& field, int width, int height,
                         double lambda) {
    std::vector<double> next(field.size());
    auto idx = [width](int y, int x) {
        return static_cast<std::size_t>(y) * width + x;
    };
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double c = field[idx(y, x)];
            double up = field[idx(std::max(y - 1, 0), x)];
            double dn = field[idx(std::min(y + 1, height - 1), x)];
            double lf = field[idx(y, std::max(x - 1, 0))];
            double rt = field[idx(y, std::min(x + 1, width - 1))];
            next[idx(y, x)] = c + lambda * (up + dn + lf + rt - 4.0 * c);
        }
    }
    field = std::move(next);
}

inline std::vector<double> diffuse(const GrayImage& img, double lambda,
                                   int iterations) {
    if (lambda <= 0.0)
        throw std::invalid_argument("isotropic smoothing: lambda must be > 0");
    if (iterations < 1)
        throw std::invalid_argument("isotropic smoothing: iterations must be >= 1");
    std::vector<double> field(img.pixels.begin(), img.pixels.end());
    for (int it = 0; it < iterations; ++it)
        diffuse_step(field, img.width, img.height, lambda);
    return field;
}

namespace detail {
// Clip values at mean +/- 3*std, then map [min,max] of the clipped field
// linearly to [0,255]. Degenerate range maps to 128.
inline GrayImage robust_rescale(const std::vector<double>& field, int width,
                                int height) {
    const std::size_t n = field.size();
    double mean = 0.0;
    for (double v : field)
        mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : field)
        var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / static_cast<double>(n));
    double lo = mean - 3.0 * sd, hi = mean + 3.0 * sd;
    double cmin = hi, cmax = lo;
    std::vector<double> clipped(n);
    for (std::size_t k = 0; k < n; ++k) {
        double v = std::clamp(field[k], lo, hi);
        clipped[k] = v;
        cmin = std::min(cmin, v);
        cmax = std::max(cmax, v);
    }
    GrayImage out(width, height);
    if (cmax - cmin < 1e-12) {
        std::fill(out.pixels.begin(), out.pixels.end(),
                  static_cast<std::uint8_t>(128));
        return out;
    }
    double scale = 255.0 / (cmax - cmin);
    for (std::size_t k = 0; k < n; ++k)
        out.pixels[k] = static_cast<std::uint8_t>(
            std::clamp(std::lround((clipped[k] - cmin) * scale), 0L, 255L));
    return out;
}
} // namespace detail

inline GrayImage isotropic_smoothing(const GrayImage& img, double lambda,
                                     int iterations) {
    std::vector<double> lum = diffuse(img, lambda, iterations);
    std::vector<double> refl(lum.size());
    for (std::size_t k = 0; k < lum.size(); ++k)
        refl[k] = static_cast<double>(img.pixels[k]) / std::max(lum[k], 1e-6);
    return detail::robust_rescale(refl, img.width, img.height);
}

// ---------------------------------------------------------------------------
// DCT-based normalization

// Orthonormal 2-D DCT-II of a square field (row-major), and its inverse.
inline std::vector<double> dct_basis(int n) {
    std::vector<double> d(static_cast<std::size_t>(n) * n);
    const double pi = 3.14159265358979323846;
    for (int u = 0; u < n; ++u) {
        double a = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int x = 0; x < n; ++x)
            d[static_cast<std::size_t>(u) * n + x] =
                a * std::cos(pi * (2 * x + 1) * u / (2.0 * n));
    }
    return d;
}

namespace detail {
// rows of out = basis-transform of rows of f (out[u] = sum_x f[x] * d[u][x])
inline std::vector<double> dct_apply(const std::vector<double>& d,
                                     const std::vector<double>& f, int n,
                                     bool inverse) {
    // forward: F = D f D^T computed as two passes of the 1-D transform;
    // inverse uses D^T on both sides.
    std::vector<double> tmp(f.size(), 0.0), out(f.size(), 0.0);
    auto dd = [&](int u, int x) {
        return inverse ? d[static_cast<std::size_t>(x) * n + u]
                       : d[static_cast<std::size_t>(u) * n + x];
    };
    for (int r = 0; r < n; ++r) // transform columns
        for (int u = 0; u < n; ++u) {
            double acc = 0.0;
            for (int x = 0; x < n; ++x)
                acc += dd(u, x) * f[static_cast<std::size_t>(x) * n + r];
            tmp[static_cast<std::size_t>(u) * n + r] = acc;
        }
    for (int r = 0; r < n; ++r) // transform rows
        for (int u = 0; u < n; ++u) {
            double acc = 0.0;
            for (int x = 0; x < n; ++x)
                acc += dd(u, x) * tmp[static_cast<std::size_t>(r) * n + x];
            out[static_cast<std::size_t>(r) * n + u] = acc;
        }
    return out;
}
} // namespace detail

inline std::vector<double> dct2(const std::vector<double>& f, int n) {
    return detail::dct_apply(dct_basis(n), f, n, false);
}

inline std::vector<double> idct2(const std::vector<double>& f, int n) {
    return detail::dct_apply(dct_basis(n), f, n, true);
}

// JPEG-style zigzag scan order for an n x n coefficient grid.
inline std::vector<std::pair<int, int>> zigzag_order(int n) {
    std::vector<std::pair<int, int>> order;
    order.reserve(static_cast<std::size_t>(n) * n);
    for (int s = 0; s <= 2 * (n - 1); ++s) {
        int rlo = std::max(0, s - n + 1), rhi = std::min(s, n - 1);
        if (s % 2 == 1) {
            for (int r = rlo; r <= rhi; ++r)
                order.emplace_back(r, s - r);
        } else {
            for (int r = rhi; r >= rlo; --r)
                order.emplace_back(r, s - r);
        }
    }
    return order;
}

inline GrayImage dct_norm(const GrayImage& img, int discard) {
    if (img.width != img.height)
        throw std::invalid_argument("dct_norm: image must be square");
    const int n = img.width;
    if (discard < 1)
        throw std::invalid_argument("dct_norm: discard must be >= 1");
    if (discard > n * n)
        throw std::invalid_argument("dct_norm: discard exceeds coefficient count");
    std::vector<double> f(img.pixels.size());
    for (std::size_t k = 0; k < f.size(); ++k)
        f[k] = std::log(1.0 + static_cast<double>(img.pixels[k]));
    std::vector<double> coef = dct2(f, n);
    // re-encode the DC term to the target log-mean, zero the next discard-1
    // low-frequency coefficients
    coef[0] = std::log(1.0 + 128.0) * static_cast<double>(n);
    auto order = zigzag_order(n);
    for (int i = 1; i < discard; ++i) {
        auto [r, c] = order[static_cast<std::size_t>(i)];
        coef[static_cast<std::size_t>(r) * n + c] = 0.0;
    }
    std::vector<double> g = idct2(coef, n);
    GrayImage out(img.width, img.height);
    for (std::size_t k = 0; k < g.size(); ++k)
        out.pixels[k] = static_cast<std::uint8_t>(
            std::clamp(std::lround(std::exp(g[k]) - 1.0), 0L, 255L));
    return out;
}

// ---------------------------------------------------------------------------
// difference of Gaussians

// Separable truncated Gaussian blur (radius ceil(3*sigma), kernel normalized
// to sum 1), replicated borders.
inline std::vector<double> gaussian_blur(const GrayImage& img, double sigma) {
    if (sigma <= 0.0)
        throw std::invalid_argument("gaussian_blur: sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : kernel)
        v /= sum;

    const int w = img.width, h = img.height;
    std::vector<double> tmp(img.pixels.size()), out(img.pixels.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int xx = std::clamp(x + i, 0, w - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       static_cast<double>(img.at(y, xx));
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                int yy = std::clamp(y + i, 0, h - 1);
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = acc;
        }
    return out;
}

inline GrayImage dog(const GrayImage& img, double sigma1, double sigma2) {
    if (sigma1 <= 0.0 || sigma2 <= 0.0)
        throw std::invalid_argument("dog: sigmas must be > 0");
    if (sigma1 > sigma2)
        throw std::invalid_argument("dog: sigma1 must be <= sigma2");
    std::vector<double> a = gaussian_blur(img, sigma1);
    std::vector<double> b = gaussian_blur(img, sigma2);
    double dmin = 0.0, dmax = 0.0;
    std::vector<double> diff(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
        diff[k] = a[k] - b[k];
        if (k == 0) {
            dmin = dmax = diff[0];
        } else {
            dmin = std::min(dmin, diff[k]);
            dmax = std::max(dmax, diff[k]);
        }
    }
    GrayImage out(img.width, img.height);
    if (dmax - dmin < 1e-12) {
        std::fill(out.pixels.begin(), out.pixels.end(),
                  static_cast<std::uint8_t>(128));
        return out;
    }
    double scale = 255.0 / (dmax - dmin);
    for (std::size_t k = 0; k < diff.size(); ++k)
        out.pixels[k] = static_cast<std::uint8_t>(
            std::clamp(std::lround((diff[k] - dmin) * scale), 0L, 255L));
    return out;
}

// ---------------------------------------------------------------------------
// dispatch

inline GrayImage apply(const PrepMethod& m, const GrayImage& img) {
    switch (m.kind) {
    case PrepKind::raw:
        return prep_raw(img);
    case PrepKind::histeq:
        return hist_eq(img);
    case PrepKind::isotropic:
        return isotropic_smoothing(img, m.params.is_lambda,
                                   m.params.is_iterations);
    case PrepKind::dct:
        return dct_norm(img, m.params.dct_discard);
    case PrepKind::dog:
        return dog(img, m.params.dog_sigma1, m.params.dog_sigma2);
    }
    throw std::invalid_argument("apply: unknown method");
}

// ---------------------------------------------------------------------------
// network input transform: per-image standardization

template <class T>
void standardize_into(const GrayImage& img, T* dst) {
    const std::size_t n = img.pixels.size();
    double mean = 0.0;
    for (std::uint8_t p : img.pixels)
        mean += p;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::uint8_t p : img.pixels)
        var += (p - mean) * (p - mean);
    double sd = std::sqrt(var / static_cast<double>(n));
    double inv = 1.0 / std::max(sd, 1e-6);
    for (std::size_t k = 0; k < n; ++k)
        dst[k] = static_cast<T>((img.pixels[k] - mean) * inv);
}

template <class T>
Tensor<T> standardize(const GrayImage& img) {
    Tensor<T> out(1, 1, img.height, img.width);
    standardize_into(img, out.data());
    return out;
}

} // namespace exprbench
