#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "exprbench/gemm.hpp"
#include "exprbench/rng.hpp"
#include "exprbench/tensor.hpp"

namespace exprbench {

enum class Mode { train, eval };

// Zero padding per edge. The asterisk notation of the architecture grammar
// ("p1*") pads top and left only.
struct PadSpec {
    int top = 0, bottom = 0, left = 0, right = 0;

    static PadSpec symmetric(int p) { return {p, p, p, p}; }
    static PadSpec top_left(int p) { return {p, 0, p, 0}; }

    bool operator==(const PadSpec&) const = default;
};

// floor((in + pad_lo + pad_hi - k) / stride) + 1
inline int out_extent(int in, int k, int pad_lo, int pad_hi, int stride,
                      const char* what) {
    if (stride < 1)
        throw std::invalid_argument(std::string(what) + ": stride must be >= 1");
    if (pad_lo < 0 || pad_hi < 0)
        throw std::invalid_argument(std::string(what) + ": negative padding");
    int padded = in + pad_lo + pad_hi;
    if (k < 1 || k > padded)
        throw std::invalid_argument(std::string(what) +
                                    ": window larger than padded input");
    return (padded - k) / stride + 1;
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation; kernels are not flipped)

template <class T>
struct ConvParams {
    int in_channels = 0, out_channels = 0;
    int kh = 0, kw = 0, stride = 1;
    PadSpec pad;
    Tensor<T> weights;   // (out_c, in_c, kh, kw)
    std::vector<T> bias; // out_c
};

template <class T>
struct ConvGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_w;
    std::vector<T> grad_b;
};

namespace detail {

template <class T>
void check_conv(const Tensor<T>& x, const ConvParams<T>& p) {
    if (x.c() != p.in_channels)
        throw std::invalid_argument("conv2d: input channel mismatch");
    if (p.weights.shape() !=
        std::array<int, 4>{p.out_channels, p.in_channels, p.kh, p.kw})
        throw std::invalid_argument("conv2d: weight shape mismatch");
    if (static_cast<int>(p.bias.size()) != p.out_channels)
        throw std::invalid_argument("conv2d: bias size mismatch");
}

// col (K x P) with K = in_c*kh*kw, P = out_h*out_w, for one batch item.
template <class T>
void im2col(const Tensor<T>& x, int item, int kh, int kw, int stride,
            const PadSpec& pad, int out_h, int out_w, T* col) {
    const int c = x.c(), h = x.h(), w = x.w();
    const std::size_t p_total = static_cast<std::size_t>(out_h) * out_w;
    for (int ic = 0; ic < c; ++ic)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* row = col +
                         (static_cast<std::size_t>(ic) * kh + ky) * kw * p_total +
                         static_cast<std::size_t>(kx) * p_total;
                for (int oy = 0; oy < out_h; ++oy) {
                    int iy = oy * stride + ky - pad.top;
                    T* seg = row + static_cast<std::size_t>(oy) * out_w;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < out_w; ++ox)
                            seg[ox] = T(0);
                        continue;
                    }
                    const T* src = x.data() + x.offset(item, ic, iy, 0);
                    for (int ox = 0; ox < out_w; ++ox) {
                        int ix = ox * stride + kx - pad.left;
                        seg[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

// colT (P x K): same values laid out with one row per output position.
template <class T>
void im2col_t(const Tensor<T>& x, int item, int kh, int kw, int stride,
              const PadSpec& pad, int out_h, int out_w, T* colt) {
    const int c = x.c(), h = x.h(), w = x.w();
    const std::size_t k_total = static_cast<std::size_t>(c) * kh * kw;
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
            T* row = colt + (static_cast<std::size_t>(oy) * out_w + ox) * k_total;
            std::size_t kk = 0;
            for (int ic = 0; ic < c; ++ic)
                for (int ky = 0; ky < kh; ++ky) {
                    int iy = oy * stride + ky - pad.top;
                    for (int kx = 0; kx < kw; ++kx, ++kk) {
                        int ix = ox * stride + kx - pad.left;
                        row[kk] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                      ? x.at(item, ic, iy, ix)
                                      : T(0);
                    }
                }
        }
}

template <class T>
void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int stride,
                const PadSpec& pad, int out_h, int out_w, Tensor<T>& gx,
                int item) {
    const std::size_t p_total = static_cast<std::size_t>(out_h) * out_w;
    for (int ic = 0; ic < c; ++ic)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* row =
                    col +
                    (static_cast<std::size_t>(ic) * kh + ky) * kw * p_total +
                    static_cast<std::size_t>(kx) * p_total;
                for (int oy = 0; oy < out_h; ++oy) {
                    int iy = oy * stride + ky - pad.top;
                    if (iy < 0 || iy >= h)
                        continue;
                    T* dst = gx.data() + gx.offset(item, ic, iy, 0);
                    const T* seg = row + static_cast<std::size_t>(oy) * out_w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        int ix = ox * stride + kx - pad.left;
                        if (ix >= 0 && ix < w)
                            dst[ix] += seg[ox];
                    }
                }
            }
}

} // namespace detail

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
    detail::check_conv(x, p);
    const int out_h = out_extent(x.h(), p.kh, p.pad.top, p.pad.bottom, p.stride,
                                 "conv2d");
    const int out_w = out_extent(x.w(), p.kw, p.pad.left, p.pad.right, p.stride,
                                 "conv2d");
    const int kdim = p.in_channels * p.kh * p.kw;
    const int pdim = out_h * out_w;
    Tensor<T> out(x.n(), p.out_channels, out_h, out_w);
    std::vector<T> col(static_cast<std::size_t>(kdim) * pdim);
    for (int i = 0; i < x.n(); ++i) {
        detail::im2col(x, i, p.kh, p.kw, p.stride, p.pad, out_h, out_w,
                       col.data());
        T* dst = out.data() + out.offset(i, 0, 0, 0);
        gemm_nn(p.out_channels, pdim, kdim, p.weights.data(), col.data(), dst);
        for (int oc = 0; oc < p.out_channels; ++oc) {
            T* row = dst + static_cast<std::size_t>(oc) * pdim;
            for (int k = 0; k < pdim; ++k)
                row[k] += p.bias[static_cast<std::size_t>(oc)];
        }
    }
    return out;
}

template <class T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                             const ConvParams<T>& p) {
    detail::check_conv(x, p);
    const int out_h = out_extent(x.h(), p.kh, p.pad.top, p.pad.bottom, p.stride,
                                 "conv2d");
    const int out_w = out_extent(x.w(), p.kw, p.pad.left, p.pad.right, p.stride,
                                 "conv2d");
    if (grad_out.shape() !=
        std::array<int, 4>{x.n(), p.out_channels, out_h, out_w})
        throw std::invalid_argument("conv2d_backward: grad shape mismatch");
    const int kdim = p.in_channels * p.kh * p.kw;
    const int pdim = out_h * out_w;

    ConvGrads<T> g;
    g.grad_x = Tensor<T>(x.shape());
    g.grad_w = Tensor<T>(p.weights.shape());
    g.grad_b.assign(p.bias.size(), T(0));

    std::vector<T> colt(static_cast<std::size_t>(pdim) * kdim);
    std::vector<T> gcol(static_cast<std::size_t>(kdim) * pdim);
    for (int i = 0; i < x.n(); ++i) {
        const T* gout = grad_out.data() + grad_out.offset(i, 0, 0, 0);
        for (int oc = 0; oc < p.out_channels; ++oc) {
            const T* row = gout + static_cast<std::size_t>(oc) * pdim;
            double acc = 0.0;
            for (int k = 0; k < pdim; ++k)
                acc += static_cast<double>(row[k]);
            g.grad_b[static_cast<std::size_t>(oc)] += static_cast<T>(acc);
        }
        detail::im2col_t(x, i, p.kh, p.kw, p.stride, p.pad, out_h, out_w,
                         colt.data());
        gemm_nn(p.out_channels, kdim, pdim, gout, colt.data(), g.grad_w.data());
        std::fill(gcol.begin(), gcol.end(), T(0));
        gemm_tn(p.out_channels, pdim, kdim, p.weights.data(), gout, gcol.data());
        detail::col2im_add(gcol.data(), p.in_channels, x.h(), x.w(), p.kh, p.kw,
                           p.stride, p.pad, out_h, out_w, g.grad_x, i);
    }
    return g;
}

// ---------------------------------------------------------------------------
// fully connected

template <class T>
struct FcParams {
    int in_units = 0, out_units = 0;
    Tensor<T> weights;   // (out, in, 1, 1)
    std::vector<T> bias; // out
};

template <class T>
struct FcGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_w;
    std::vector<T> grad_b;
};

namespace detail {
template <class T>
void check_fc(const Tensor<T>& x, const FcParams<T>& p) {
    const std::int64_t flat =
        static_cast<std::int64_t>(x.c()) * x.h() * x.w();
    if (flat != p.in_units)
        throw std::invalid_argument("fc: flattened input length mismatch");
    if (p.weights.shape() != std::array<int, 4>{p.out_units, p.in_units, 1, 1})
        throw std::invalid_argument("fc: weight shape mismatch");
    if (static_cast<int>(p.bias.size()) != p.out_units)
        throw std::invalid_argument("fc: bias size mismatch");
}
} // namespace detail

template <class T>
Tensor<T> fc_forward(const Tensor<T>& x, const FcParams<T>& p) {
    detail::check_fc(x, p);
    const int b = x.n();
    Tensor<T> out(b, p.out_units, 1, 1);
    std::vector<T> wt(static_cast<std::size_t>(p.in_units) * p.out_units);
    transpose(p.out_units, p.in_units, p.weights.data(), wt.data());
    gemm_nn(b, p.out_units, p.in_units, x.data(), wt.data(), out.data());
    for (int i = 0; i < b; ++i) {
        T* row = out.data() + static_cast<std::size_t>(i) * p.out_units;
        for (int o = 0; o < p.out_units; ++o)
            row[o] += p.bias[static_cast<std::size_t>(o)];
    }
    return out;
}

template <class T>
FcGrads<T> fc_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                       const FcParams<T>& p) {
    detail::check_fc(x, p);
    if (grad_out.shape() != std::array<int, 4>{x.n(), p.out_units, 1, 1})
        throw std::invalid_argument("fc_backward: grad shape mismatch");
    const int b = x.n();
    FcGrads<T> g;
    g.grad_x = Tensor<T>(x.shape());
    g.grad_w = Tensor<T>(p.weights.shape());
    g.grad_b.assign(p.bias.size(), T(0));
    gemm_nn(b, p.in_units, p.out_units, grad_out.data(), p.weights.data(),
            g.grad_x.data());
    gemm_tn(b, p.in_units, p.out_units, grad_out.data(), x.data(),
            g.grad_w.data());
    for (int i = 0; i < b; ++i) {
        const T* row = grad_out.data() + static_cast<std::size_t>(i) * p.out_units;
        for (int o = 0; o < p.out_units; ++o)
            g.grad_b[static_cast<std::size_t>(o)] += row[o];
    }
    return g;
}

// ---------------------------------------------------------------------------
// relu

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    return x.map([](T v) { return v > T(0) ? v : T(0); });
}

// subgradient 0 at x == 0
template <class T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& x) {
    return grad_out.zip(x, [](T g, T v) { return v > T(0) ? g : T(0); });
}

// ---------------------------------------------------------------------------
// dropout (inverted scaling at train time; eval mode is the identity)

template <class T>
Tensor<T> dropout_mask(const std::array<int, 4>& shape, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout: rate must be in [0,1)");
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> mask(shape);
    T* m = mask.data();
    for (std::size_t k = 0; k < mask.size(); ++k)
        m[k] = rng.next_double() < rate ? T(0) : keep;
    return mask;
}

template <class T>
Tensor<T> dropout_forward(const Tensor<T>& x, const Tensor<T>& mask) {
    return x.zip(mask, [](T a, T b) { return a * b; });
}

template <class T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const Tensor<T>& mask) {
    return grad_out.zip(mask, [](T a, T b) { return a * b; });
}

// ---------------------------------------------------------------------------
// pooling

struct PoolGeom {
    int kh = 0, kw = 0, stride = 1;
    PadSpec pad;
};

template <class T>
struct PoolResult {
    Tensor<T> out;
    std::vector<std::int64_t> picked; // flat input offset per output cell, -1 if none
};

namespace detail {
inline std::array<int, 2> pool_out_dims(const std::array<int, 4>& xs,
                                        const PoolGeom& g, const char* what) {
    return {out_extent(xs[2], g.kh, g.pad.top, g.pad.bottom, g.stride, what),
            out_extent(xs[3], g.kw, g.pad.left, g.pad.right, g.stride, what)};
}
} // namespace detail

template <class T>
PoolResult<T> maxpool_forward(const Tensor<T>& x, const PoolGeom& g) {
    auto [oh, ow] = detail::pool_out_dims(x.shape(), g, "maxpool");
    PoolResult<T> r;
    r.out = Tensor<T>(x.n(), x.c(), oh, ow);
    r.picked.assign(r.out.size(), -1);
    std::size_t k = 0;
    for (int i = 0; i < x.n(); ++i)
        for (int ch = 0; ch < x.c(); ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++k) {
                    T best{};
                    std::int64_t best_at = -1;
                    for (int ky = 0; ky < g.kh; ++ky) {
                        int iy = oy * g.stride + ky - g.pad.top;
                        if (iy < 0 || iy >= x.h())
                            continue;
                        for (int kx = 0; kx < g.kw; ++kx) {
                            int ix = ox * g.stride + kx - g.pad.left;
                            if (ix < 0 || ix >= x.w())
                                continue;
                            T v = x.at(i, ch, iy, ix);
                            if (best_at < 0 || v > best) {
                                best = v;
                                best_at = static_cast<std::int64_t>(
                                    x.offset(i, ch, iy, ix));
                            }
                        }
                    }
                    r.out[k] = best_at < 0 ? T(0) : best;
                    r.picked[k] = best_at;
                }
    return r;
}

template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out,
                           const std::array<int, 4>& x_shape, const PoolGeom& g,
                           const std::vector<std::int64_t>& picked) {
    auto [oh, ow] = detail::pool_out_dims(x_shape, g, "maxpool");
    if (grad_out.shape() != std::array<int, 4>{x_shape[0], x_shape[1], oh, ow} ||
        picked.size() != grad_out.size())
        throw std::invalid_argument("maxpool_backward: shape mismatch");
    Tensor<T> gx(x_shape);
    for (std::size_t k = 0; k < picked.size(); ++k)
        if (picked[k] >= 0)
            gx[static_cast<std::size_t>(picked[k])] += grad_out[k];
    return gx;
}

// Average pooling divides by the full window area kh*kw; padded cells count
// as zeros.
template <class T>
Tensor<T> avgpool_forward(const Tensor<T>& x, const PoolGeom& g) {
    auto [oh, ow] = detail::pool_out_dims(x.shape(), g, "avgpool");
    Tensor<T> out(x.n(), x.c(), oh, ow);
    const T inv_area = static_cast<T>(1.0 / (static_cast<double>(g.kh) * g.kw));
    std::size_t k = 0;
    for (int i = 0; i < x.n(); ++i)
        for (int ch = 0; ch < x.c(); ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++k) {
                    T acc = T(0);
                    for (int ky = 0; ky < g.kh; ++ky) {
                        int iy = oy * g.stride + ky - g.pad.top;
                        if (iy < 0 || iy >= x.h())
                            continue;
                        for (int kx = 0; kx < g.kw; ++kx) {
                            int ix = ox * g.stride + kx - g.pad.left;
                            if (ix < 0 || ix >= x.w())
                                continue;
                            acc += x.at(i, ch, iy, ix);
                        }
                    }
                    out[k] = acc * inv_area;
                }
    return out;
}

template <class T>
Tensor<T> avgpool_backward(const Tensor<T>& grad_out,
                           const std::array<int, 4>& x_shape,
                           const PoolGeom& g) {
    auto [oh, ow] = detail::pool_out_dims(x_shape, g, "avgpool");
    if (grad_out.shape() != std::array<int, 4>{x_shape[0], x_shape[1], oh, ow})
        throw std::invalid_argument("avgpool_backward: shape mismatch");
    Tensor<T> gx(x_shape);
    const T inv_area = static_cast<T>(1.0 / (static_cast<double>(g.kh) * g.kw));
    std::size_t k = 0;
    for (int i = 0; i < x_shape[0]; ++i)
        for (int ch = 0; ch < x_shape[1]; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++k) {
                    T share = grad_out[k] * inv_area;
                    for (int ky = 0; ky < g.kh; ++ky) {
                        int iy = oy * g.stride + ky - g.pad.top;
                        if (iy < 0 || iy >= x_shape[2])
                            continue;
                        for (int kx = 0; kx < g.kw; ++kx) {
                            int ix = ox * g.stride + kx - g.pad.left;
                            if (ix < 0 || ix >= x_shape[3])
                                continue;
                            gx.at(i, ch, iy, ix) += share;
                        }
                    }
                }
    return gx;
}

// Stochastic pooling: at train time one cell per window is sampled with
// probability a_i / sum(a), uniformly if the window is all zero; at eval
// time the output is the probability-weighted average sum(a_i^2) / sum(a).
// Activations must be non-negative in sampling mode.
namespace detail {
template <class T>
void stochpool_window(const Tensor<T>& x, int i, int ch, int oy, int ox,
                      const PoolGeom& g, Mode mode, Rng* rng, T& out_v,
                      std::int64_t& out_at) {
    double sum = 0.0, sumsq = 0.0;
    int valid = 0;
    for (int ky = 0; ky < g.kh; ++ky) {
        int iy = oy * g.stride + ky - g.pad.top;
        if (iy < 0 || iy >= x.h())
            continue;
        for (int kx = 0; kx < g.kw; ++kx) {
            int ix = ox * g.stride + kx - g.pad.left;
            if (ix < 0 || ix >= x.w())
                continue;
            T v = x.at(i, ch, iy, ix);
            if (mode == Mode::train && v < T(0))
                throw std::invalid_argument(
                    "stochpool: negative activation in sampling mode");
            sum += static_cast<double>(v);
            sumsq += static_cast<double>(v) * static_cast<double>(v);
            ++valid;
        }
    }
    if (mode == Mode::eval) {
        out_v = sum > 0.0 ? static_cast<T>(sumsq / sum) : T(0);
        out_at = -1;
        return;
    }
    if (valid == 0) {
        out_v = T(0);
        out_at = -1;
        return;
    }
    std::int64_t chosen = -1;
    if (sum > 0.0) {
        double u = rng->next_double() * sum;
        double acc = 0.0;
        for (int ky = 0; ky < g.kh && chosen < 0; ++ky) {
            int iy = oy * g.stride + ky - g.pad.top;
            if (iy < 0 || iy >= x.h())
                continue;
            for (int kx = 0; kx < g.kw; ++kx) {
                int ix = ox * g.stride + kx - g.pad.left;
                if (ix < 0 || ix >= x.w())
                    continue;
                acc += static_cast<double>(x.at(i, ch, iy, ix));
                chosen = static_cast<std::int64_t>(x.offset(i, ch, iy, ix));
                if (u < acc)
                    break;
                chosen = -1;
            }
        }
        if (chosen < 0) { // guard against accumulated rounding
            for (int ky = g.kh - 1; ky >= 0 && chosen < 0; --ky) {
                int iy = oy * g.stride + ky - g.pad.top;
                if (iy < 0 || iy >= x.h())
                    continue;
                for (int kx = g.kw - 1; kx >= 0; --kx) {
                    int ix = ox * g.stride + kx - g.pad.left;
                    if (ix < 0 || ix >= x.w())
                        continue;
                    chosen = static_cast<std::int64_t>(x.offset(i, ch, iy, ix));
                    break;
                }
            }
        }
    } else {
        std::uint64_t pick = rng->next_below(static_cast<std::uint64_t>(valid));
        std::uint64_t seen = 0;
        for (int ky = 0; ky < g.kh && chosen < 0; ++ky) {
            int iy = oy * g.stride + ky - g.pad.top;
            if (iy < 0 || iy >= x.h())
                continue;
            for (int kx = 0; kx < g.kw; ++kx) {
                int ix = ox * g.stride + kx - g.pad.left;
                if (ix < 0 || ix >= x.w())
                    continue;
                if (seen++ == pick) {
                    chosen = static_cast<std::int64_t>(x.offset(i, ch, iy, ix));
                    break;
                }
            }
        }
    }
    out_v = x[static_cast<std::size_t>(chosen)];
    out_at = chosen;
}
} // namespace detail

// Per-item seeds make the sampled cells independent of batch chunking.
template <class T>
PoolResult<T> stochpool_forward_seeded(const Tensor<T>& x, const PoolGeom& g,
                                       Mode mode,
                                       std::span<const std::uint64_t> seeds) {
    auto [oh, ow] = detail::pool_out_dims(x.shape(), g, "stochpool");
    if (mode == Mode::train && static_cast<int>(seeds.size()) != x.n())
        throw std::invalid_argument("stochpool: one seed per batch item required");
    PoolResult<T> r;
    r.out = Tensor<T>(x.n(), x.c(), oh, ow);
    r.picked.assign(r.out.size(), -1);
    std::size_t k = 0;
    for (int i = 0; i < x.n(); ++i) {
        Rng item_rng(mode == Mode::train ? seeds[static_cast<std::size_t>(i)]
                                         : 0);
        for (int ch = 0; ch < x.c(); ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox, ++k)
                    detail::stochpool_window(x, i, ch, oy, ox, g, mode,
                                             &item_rng, r.out[k], r.picked[k]);
    }
    return r;
}

template <class T>
PoolResult<T> stochpool_forward(const Tensor<T>& x, const PoolGeom& g,
                                Mode mode, Rng* rng) {
    if (mode == Mode::train) {
        if (rng == nullptr)
            throw std::invalid_argument("stochpool: rng required in train mode");
        std::vector<std::uint64_t> seeds(static_cast<std::size_t>(x.n()));
        for (auto& s : seeds)
            s = rng->next_u64();
        return stochpool_forward_seeded(x, g, mode,
                                        std::span<const std::uint64_t>(seeds));
    }
    return stochpool_forward_seeded(x, g, mode, {});
}

template <class T>
Tensor<T> stochpool_backward(const Tensor<T>& grad_out,
                             const std::array<int, 4>& x_shape,
                             const PoolGeom& g,
                             const std::vector<std::int64_t>& picked) {
    auto [oh, ow] = detail::pool_out_dims(x_shape, g, "stochpool");
    if (grad_out.shape() != std::array<int, 4>{x_shape[0], x_shape[1], oh, ow} ||
        picked.size() != grad_out.size())
        throw std::invalid_argument("stochpool_backward: shape mismatch");
    Tensor<T> gx(x_shape);
    for (std::size_t k = 0; k < picked.size(); ++k)
        if (picked[k] >= 0)
            gx[static_cast<std::size_t>(picked[k])] += grad_out[k];
    return gx;
}

// ---------------------------------------------------------------------------
// local response normalization (across channels)
//
// out(c) = x(c) / (k + (alpha/n) * sum_{j in window(c)} x(j)^2)^beta

struct LrnParams {
    int n = 5;
    double alpha = 1e-4;
    double beta = 0.75;
    double k = 1.0;
};

namespace detail {
inline void check_lrn(const LrnParams& p) {
    if (p.n < 1 || p.n % 2 == 0)
        throw std::invalid_argument("lrn: n must be odd and >= 1");
    if (p.beta <= 0.0 || p.k <= 0.0)
        throw std::invalid_argument("lrn: beta and k must be > 0");
}
} // namespace detail

template <class T>
Tensor<T> lrn_forward(const Tensor<T>& x, const LrnParams& p) {
    detail::check_lrn(p);
    const int half = (p.n - 1) / 2;
    const double a_over_n = p.alpha / static_cast<double>(p.n);
    Tensor<T> out(x.shape());
    const int c = x.c();
    for (int i = 0; i < x.n(); ++i)
        for (int y = 0; y < x.h(); ++y)
            for (int xx = 0; xx < x.w(); ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (int j = std::max(0, ch - half);
                         j <= std::min(c - 1, ch + half); ++j) {
                        double v = static_cast<double>(x.at(i, j, y, xx));
                        s += v * v;
                    }
                    double denom = std::pow(p.k + a_over_n * s, p.beta);
                    out.at(i, ch, y, xx) =
                        static_cast<T>(static_cast<double>(x.at(i, ch, y, xx)) /
                                       denom);
                }
    return out;
}

template <class T>
Tensor<T> lrn_backward(const Tensor<T>& grad_out, const Tensor<T>& x,
                       const LrnParams& p) {
    detail::check_lrn(p);
    if (!grad_out.same_shape(x))
        throw std::invalid_argument("lrn_backward: shape mismatch");
    const int half = (p.n - 1) / 2;
    const double a_over_n = p.alpha / static_cast<double>(p.n);
    const int c = x.c();
    Tensor<T> gx(x.shape());
    std::vector<double> scale(static_cast<std::size_t>(c)); // S_c
    std::vector<double> q(static_cast<std::size_t>(c)); // g_c x_c S_c^(-b-1)
    for (int i = 0; i < x.n(); ++i)
        for (int y = 0; y < x.h(); ++y)
            for (int xx = 0; xx < x.w(); ++xx) {
                for (int ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (int j = std::max(0, ch - half);
                         j <= std::min(c - 1, ch + half); ++j) {
                        double v = static_cast<double>(x.at(i, j, y, xx));
                        s += v * v;
                    }
                    scale[static_cast<std::size_t>(ch)] = p.k + a_over_n * s;
                }
                for (int ch = 0; ch < c; ++ch)
                    q[static_cast<std::size_t>(ch)] =
                        static_cast<double>(grad_out.at(i, ch, y, xx)) *
                        static_cast<double>(x.at(i, ch, y, xx)) *
                        std::pow(scale[static_cast<std::size_t>(ch)],
                                 -p.beta - 1.0);
                for (int m = 0; m < c; ++m) {
                    double qsum = 0.0;
                    for (int j = std::max(0, m - half);
                         j <= std::min(c - 1, m + half); ++j)
                        qsum += q[static_cast<std::size_t>(j)];
                    double g =
                        static_cast<double>(grad_out.at(i, m, y, xx)) *
                            std::pow(scale[static_cast<std::size_t>(m)],
                                     -p.beta) -
                        2.0 * a_over_n * p.beta *
                            static_cast<double>(x.at(i, m, y, xx)) * qsum;
                    gx.at(i, m, y, xx) = static_cast<T>(g);
                }
            }
    return gx;
}

// ---------------------------------------------------------------------------
// softmax + cross-entropy loss

template <class T>
struct SoftmaxXent {
    double loss = 0.0;
    Tensor<T> grad;  // d(loss)/d(logits)
    Tensor<T> probs; // softmax rows
};

// Row-wise stable softmax of (n,c,1,1) logits.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    if (logits.h() != 1 || logits.w() != 1)
        throw std::invalid_argument("softmax_rows: logits must be (n,c,1,1)");
    const int n = logits.n(), c = logits.c();
    Tensor<T> probs(logits.shape());
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data() + static_cast<std::size_t>(i) * c;
        T* prow = probs.data() + static_cast<std::size_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            mx = std::max(mx, static_cast<double>(row[j]));
        double expsum = 0.0;
        for (int j = 0; j < c; ++j)
            expsum += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < c; ++j)
            prow[j] = static_cast<T>(
                std::exp(static_cast<double>(row[j]) - mx) / expsum);
    }
    return probs;
}

// loss = sum_i -log softmax(logits_i)[label_i] / divisor; divisor defaults to
// the batch size (so the loss is the batch mean). A caller evaluating a batch
// in chunks passes the full batch size to keep gradients exact.
template <class T>
SoftmaxXent<T> softmax_xent(const Tensor<T>& logits,
                            std::span<const int> labels, int divisor = -1) {
    if (logits.h() != 1 || logits.w() != 1)
        throw std::invalid_argument("softmax_xent: logits must be (n,c,1,1)");
    const int n = logits.n(), c = logits.c();
    if (n < 1)
        throw std::invalid_argument("softmax_xent: empty batch");
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("softmax_xent: labels size mismatch");
    const double div = divisor > 0 ? divisor : n;
    SoftmaxXent<T> r;
    r.grad = Tensor<T>(logits.shape());
    r.probs = Tensor<T>(logits.shape());
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data() + static_cast<std::size_t>(i) * c;
        int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= c)
            throw std::invalid_argument("softmax_xent: label out of range");
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) {
            if (!std::isfinite(static_cast<double>(row[j])))
                throw std::invalid_argument("softmax_xent: non-finite logit");
            mx = std::max(mx, static_cast<double>(row[j]));
        }
        double expsum = 0.0;
        for (int j = 0; j < c; ++j)
            expsum += std::exp(static_cast<double>(row[j]) - mx);
        double lse = mx + std::log(expsum);
        total += lse - static_cast<double>(row[label]);
        T* prow = r.probs.data() + static_cast<std::size_t>(i) * c;
        T* grow = r.grad.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            double pj = std::exp(static_cast<double>(row[j]) - lse);
            prow[j] = static_cast<T>(pj);
            grow[j] = static_cast<T>((pj - (j == label ? 1.0 : 0.0)) / div);
        }
    }
    r.loss = total / div;
    return r;
}

} // namespace exprbench
