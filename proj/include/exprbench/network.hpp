#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "exprbench/architectures.hpp"
#include "exprbench/layers.hpp"
#include "exprbench/rng.hpp"
#include "exprbench/tensor.hpp"

namespace exprbench {

template <class T>
struct ParamBlock {
    Tensor<T> w;
    std::vector<T> b;

    bool empty() const { return w.size() == 0 && b.empty(); }
};

// Glorot-uniform initialization: weights ~ U(+-sqrt(6/(fan_in+fan_out))),
// biases zero. Draw order is layer order, elements flat, so a given seed
// always produces the same parameters.
template <class T>
std::vector<ParamBlock<T>> init_params(const ArchitectureSpec& spec, Rng& rng) {
    auto shapes = infer_shapes(spec);
    std::vector<ParamBlock<T>> blocks(spec.layers.size());
    int c = spec.in_channels, h = spec.in_h, w = spec.in_w;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::conv) {
            double fan_in = static_cast<double>(c) * l.kh * l.kw;
            double fan_out = static_cast<double>(l.units) * l.kh * l.kw;
            double bound = std::sqrt(6.0 / (fan_in + fan_out));
            blocks[i].w = random_uniform<T>({l.units, c, l.kh, l.kw}, -bound,
                                            bound, rng);
            blocks[i].b.assign(static_cast<std::size_t>(l.units), T(0));
        } else if (l.kind == LayerKind::fc || l.kind == LayerKind::out) {
            int in_units = c * h * w;
            double bound =
                std::sqrt(6.0 / (static_cast<double>(in_units) + l.units));
            blocks[i].w = random_uniform<T>({l.units, in_units, 1, 1}, -bound,
                                            bound, rng);
            blocks[i].b.assign(static_cast<std::size_t>(l.units), T(0));
        }
        c = shapes[i][0];
        h = shapes[i][1];
        w = shapes[i][2];
    }
    return blocks;
}

// Runtime network: the architecture plus its parameters. Forward/backward
// are pure given (input, params, rng seeds); per-item rng streams keyed by
// (global item index, layer index) make results independent of how a batch
// is chunked across workers.
template <class T>
class Network {
public:
    struct Cache {
        Tensor<T> input;
        Tensor<T> mask;
        std::array<int, 4> in_shape{};
        std::vector<std::int64_t> picked;
    };
    struct Trace {
        std::vector<Cache> layers;
    };

    // Mutable view of one layer's parameters; null for parameterless layers.
    struct ParamRef {
        Tensor<T>* w = nullptr;
        std::vector<T>* b = nullptr;
    };

    Network() = default;

    Network(const ArchitectureSpec& spec, Rng& rng) : Network(spec) {
        set_params(init_params<T>(spec, rng));
    }

    explicit Network(const ArchitectureSpec& spec)
        : spec_(spec), shapes_(infer_shapes(spec)), slots_(spec.layers.size()) {
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const LayerSpec& l = spec_.layers[i];
            auto in = in_shape(i);
            if (l.kind == LayerKind::conv) {
                ConvParams<T>& p = slots_[i].conv;
                p.in_channels = in[0];
                p.out_channels = l.units;
                p.kh = l.kh;
                p.kw = l.kw;
                p.stride = l.stride;
                p.pad = l.pad_spec();
                p.weights = Tensor<T>(l.units, in[0], l.kh, l.kw);
                p.bias.assign(static_cast<std::size_t>(l.units), T(0));
            } else if (l.kind == LayerKind::fc || l.kind == LayerKind::out) {
                FcParams<T>& p = slots_[i].fc;
                p.in_units = in[0] * in[1] * in[2];
                p.out_units = l.units;
                p.weights = Tensor<T>(l.units, p.in_units, 1, 1);
                p.bias.assign(static_cast<std::size_t>(l.units), T(0));
            }
        }
    }

    const ArchitectureSpec& spec() const { return spec_; }
    const std::vector<std::array<int, 3>>& layer_shapes() const {
        return shapes_;
    }

    ParamRef param_ref(std::size_t i) {
        const LayerKind k = spec_.layers[i].kind;
        if (k == LayerKind::conv)
            return {&slots_[i].conv.weights, &slots_[i].conv.bias};
        if (k == LayerKind::fc || k == LayerKind::out)
            return {&slots_[i].fc.weights, &slots_[i].fc.bias};
        return {};
    }

    std::size_t layer_count() const { return spec_.layers.size(); }

    std::vector<ParamBlock<T>> snapshot_params() const {
        std::vector<ParamBlock<T>> out(slots_.size());
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            auto ref = const_cast<Network*>(this)->param_ref(i);
            if (ref.w) {
                out[i].w = *ref.w;
                out[i].b = *ref.b;
            }
        }
        return out;
    }

    void set_params(std::vector<ParamBlock<T>> blocks) {
        if (blocks.size() != slots_.size())
            throw std::invalid_argument("network: parameter block count mismatch");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            ParamRef ref = param_ref(i);
            if (!ref.w) {
                if (!blocks[i].empty())
                    throw std::invalid_argument(
                        "network: parameters for a parameterless layer");
                continue;
            }
            if (blocks[i].w.shape() != ref.w->shape() ||
                blocks[i].b.size() != ref.b->size())
                throw std::invalid_argument("network: parameter shape mismatch");
            *ref.w = std::move(blocks[i].w);
            *ref.b = std::move(blocks[i].b);
        }
    }

    std::int64_t num_parameters() const {
        std::int64_t total = 0;
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            auto ref = const_cast<Network*>(this)->param_ref(i);
            if (ref.w)
                total += static_cast<std::int64_t>(ref.w->size()) +
                         static_cast<std::int64_t>(ref.b->size());
        }
        return total;
    }

    std::vector<ParamBlock<T>> zero_grads() const {
        std::vector<ParamBlock<T>> g(slots_.size());
        for (std::size_t i = 0; i < slots_.size(); ++i) {
            auto ref = const_cast<Network*>(this)->param_ref(i);
            if (ref.w) {
                g[i].w = Tensor<T>(ref.w->shape());
                g[i].b.assign(ref.b->size(), T(0));
            }
        }
        return g;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode,
                      std::uint64_t rng_base = 0, std::int64_t item_offset = 0,
                      Trace* trace = nullptr) const {
        if (x.c() != spec_.in_channels || x.h() != spec_.in_h ||
            x.w() != spec_.in_w)
            throw std::invalid_argument("network: input shape mismatch");
        if (trace)
            trace->layers.assign(spec_.layers.size(), Cache{});
        Tensor<T> cur = x;
        for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
            const LayerSpec& l = spec_.layers[i];
            Cache* cache = trace ? &trace->layers[i] : nullptr;
            switch (l.kind) {
            case LayerKind::conv:
                if (cache)
                    cache->input = cur;
                cur = conv2d_forward(cur, slots_[i].conv);
                break;
            case LayerKind::fc:
            case LayerKind::out:
                if (cache)
                    cache->input = cur;
                cur = fc_forward(cur, slots_[i].fc);
                break;
            case LayerKind::relu:
                if (cache)
                    cache->input = cur;
                cur = relu_forward(cur);
                break;
            case LayerKind::dropout: {
                if (mode == Mode::eval)
                    break; // identity
                Tensor<T> mask = item_masks(cur.shape(), l.rate, rng_base,
                                            item_offset, i);
                cur = dropout_forward(cur, mask);
                if (cache)
                    cache->mask = std::move(mask);
                break;
            }
            case LayerKind::maxp: {
                if (cache)
                    cache->in_shape = cur.shape();
                auto r = maxpool_forward(cur, pool_geom(l));
                if (cache)
                    cache->picked = std::move(r.picked);
                cur = std::move(r.out);
                break;
            }
            case LayerKind::avgp:
                if (cache)
                    cache->in_shape = cur.shape();
                cur = avgpool_forward(cur, pool_geom(l));
                break;
            case LayerKind::stochp: {
                if (cache)
                    cache->in_shape = cur.shape();
                PoolResult<T> r;
                if (mode == Mode::train) {
                    std::vector<std::uint64_t> seeds(
                        static_cast<std::size_t>(cur.n()));
                    for (int it = 0; it < cur.n(); ++it)
                        seeds[static_cast<std::size_t>(it)] = derive_seed(
                            rng_base,
                            static_cast<std::uint64_t>(item_offset + it), i);
                    r = stochpool_forward_seeded(
                        cur, pool_geom(l), mode,
                        std::span<const std::uint64_t>(seeds));
                } else {
                    r = stochpool_forward_seeded(
                        cur, pool_geom(l), mode,
                        std::span<const std::uint64_t>());
                }
                if (cache)
                    cache->picked = std::move(r.picked);
                cur = std::move(r.out);
                break;
            }
            case LayerKind::lrn:
                if (cache)
                    cache->input = cur;
                cur = lrn_forward(cur, l.lrn);
                break;
            }
        }
        return cur;
    }

    // Accumulates parameter gradients into `grads` (shaped via zero_grads).
    void backward(const Tensor<T>& grad_logits, const Trace& trace,
                  std::vector<ParamBlock<T>>& grads) const {
        if (trace.layers.size() != spec_.layers.size() ||
            grads.size() != spec_.layers.size())
            throw std::invalid_argument("network: trace/grads size mismatch");
        Tensor<T> g = grad_logits;
        for (std::size_t ii = spec_.layers.size(); ii-- > 0;) {
            const LayerSpec& l = spec_.layers[ii];
            const Cache& cache = trace.layers[ii];
            switch (l.kind) {
            case LayerKind::conv: {
                ConvGrads<T> cg = conv2d_backward(g, cache.input,
                                                  slots_[ii].conv);
                accumulate(grads[ii], cg.grad_w, cg.grad_b);
                g = std::move(cg.grad_x);
                break;
            }
            case LayerKind::fc:
            case LayerKind::out: {
                FcGrads<T> fg = fc_backward(g, cache.input, slots_[ii].fc);
                accumulate(grads[ii], fg.grad_w, fg.grad_b);
                g = std::move(fg.grad_x);
                break;
            }
            case LayerKind::relu:
                g = relu_backward(g, cache.input);
                break;
            case LayerKind::dropout:
                if (cache.mask.size() > 0)
                    g = dropout_backward(g, cache.mask);
                break;
            case LayerKind::maxp:
                g = maxpool_backward(g, cache.in_shape, pool_geom(l),
                                     cache.picked);
                break;
            case LayerKind::avgp:
                g = avgpool_backward(g, cache.in_shape, pool_geom(l));
                break;
            case LayerKind::stochp:
                g = stochpool_backward(g, cache.in_shape, pool_geom(l),
                                       cache.picked);
                break;
            case LayerKind::lrn:
                g = lrn_backward(g, cache.input, l.lrn);
                break;
            }
        }
    }

private:
    struct Slot {
        ConvParams<T> conv;
        FcParams<T> fc;
    };

    static PoolGeom pool_geom(const LayerSpec& l) {
        return PoolGeom{l.kh, l.kw, l.stride, l.pad_spec()};
    }

    std::array<int, 3> in_shape(std::size_t i) const {
        return i == 0 ? std::array<int, 3>{spec_.in_channels, spec_.in_h,
                                           spec_.in_w}
                      : shapes_[i - 1];
    }

    static void accumulate(ParamBlock<T>& dst, const Tensor<T>& w,
                           const std::vector<T>& b) {
        T* d = dst.w.data();
        const T* s = w.data();
        for (std::size_t k = 0; k < dst.w.size(); ++k)
            d[k] += s[k];
        for (std::size_t k = 0; k < dst.b.size(); ++k)
            dst.b[k] += b[k];
    }

    static Tensor<T> item_masks(const std::array<int, 4>& shape, double rate,
                                std::uint64_t rng_base,
                                std::int64_t item_offset,
                                std::size_t layer_index) {
        if (rate < 0.0 || rate >= 1.0)
            throw std::invalid_argument("dropout: rate must be in [0,1)");
        Tensor<T> mask(shape);
        const T keep = static_cast<T>(1.0 / (1.0 - rate));
        const std::size_t per_item =
            static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
        for (int i = 0; i < shape[0]; ++i) {
            Rng r(derive_seed(rng_base,
                              static_cast<std::uint64_t>(item_offset + i),
                              layer_index));
            T* row = mask.data() + static_cast<std::size_t>(i) * per_item;
            for (std::size_t k = 0; k < per_item; ++k)
                row[k] = r.next_double() < rate ? T(0) : keep;
        }
        return mask;
    }

    ArchitectureSpec spec_;
    std::vector<std::array<int, 3>> shapes_;
    std::vector<Slot> slots_;
};

} // namespace exprbench
