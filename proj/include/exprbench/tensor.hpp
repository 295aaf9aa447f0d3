#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "exprbench/rng.hpp"

namespace exprbench {

// Dense row-major NCHW tensor. Element (i,j,y,x) lives at flat offset
// ((i*c + j)*h + y)*w + x. T is float on production paths and double in
// gradient-check builds; both instantiate the same code.
template <class T>
class Tensor {
public:
    Tensor() : shape_{0, 0, 0, 0} {}

    Tensor(int n, int c, int h, int w, T fill = T(0))
        : shape_{n, c, h, w}, data_(checked_length(shape_), fill) {}

    explicit Tensor(const std::array<int, 4>& shape, T fill = T(0))
        : shape_(shape), data_(checked_length(shape_), fill) {}

    int n() const { return shape_[0]; }
    int c() const { return shape_[1]; }
    int h() const { return shape_[2]; }
    int w() const { return shape_[3]; }
    const std::array<int, 4>& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::size_t offset(int i, int j, int y, int x) const {
        return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + y) *
                   shape_[3] +
               x;
    }

    T& at(int i, int j, int y, int x) { return data_[offset(i, j, y, x)]; }
    T at(int i, int j, int y, int x) const { return data_[offset(i, j, y, x)]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](std::size_t k) { return data_[k]; }
    T operator[](std::size_t k) const { return data_[k]; }

    void fill(T v) { data_.assign(data_.size(), v); }

    template <class F>
    Tensor map(F f) const {
        Tensor out(shape_);
        for (std::size_t k = 0; k < data_.size(); ++k)
            out.data_[k] = f(data_[k]);
        return out;
    }

    template <class F>
    Tensor zip(const Tensor& o, F f) const {
        if (!same_shape(o))
            throw std::invalid_argument("Tensor::zip: shape mismatch");
        Tensor out(shape_);
        for (std::size_t k = 0; k < data_.size(); ++k)
            out.data_[k] = f(data_[k], o.data_[k]);
        return out;
    }

    // Total sum, accumulated in double in flat order.
    T reduce_sum() const {
        double acc = 0.0;
        for (T v : data_)
            acc += static_cast<double>(v);
        return static_cast<T>(acc);
    }

    T reduce_max() const {
        if (data_.empty())
            throw std::invalid_argument("Tensor::reduce_max: empty tensor");
        T best = data_[0];
        for (T v : data_)
            if (v > best)
                best = v;
        return best;
    }

    // Sum over the axes marked true; reduced dimensions collapse to 1.
    Tensor reduce_sum_axes(const std::array<bool, 4>& reduce) const {
        std::array<int, 4> out_shape = shape_;
        for (int d = 0; d < 4; ++d)
            if (reduce[d])
                out_shape[d] = shape_[d] > 0 ? 1 : shape_[d];
        Tensor out(out_shape);
        for (int i = 0; i < shape_[0]; ++i)
            for (int j = 0; j < shape_[1]; ++j)
                for (int y = 0; y < shape_[2]; ++y)
                    for (int x = 0; x < shape_[3]; ++x)
                        out.at(reduce[0] ? 0 : i, reduce[1] ? 0 : j,
                               reduce[2] ? 0 : y, reduce[3] ? 0 : x) +=
                            at(i, j, y, x);
        return out;
    }

    bool operator==(const Tensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

private:
    static std::size_t checked_length(const std::array<int, 4>& shape) {
        std::size_t len = 1;
        const std::size_t cap = std::numeric_limits<std::size_t>::max() / sizeof(T);
        for (int d : shape) {
            if (d < 0)
                throw std::invalid_argument("Tensor: negative dimension");
            if (d != 0 && len > cap / static_cast<std::size_t>(d))
                throw std::overflow_error("Tensor: flat length overflow");
            len *= static_cast<std::size_t>(d);
        }
        return len;
    }

    std::array<int, 4> shape_;
    std::vector<T> data_;
};

// I.i.d. uniform samples in [lo,hi), drawn in flat order from rng.
template <class T>
Tensor<T> random_uniform(const std::array<int, 4>& shape, double lo, double hi,
                         Rng& rng) {
    if (lo > hi)
        throw std::invalid_argument("random_uniform: lo > hi");
    Tensor<T> out(shape);
    T* p = out.data();
    for (std::size_t k = 0; k < out.size(); ++k)
        p[k] = static_cast<T>(lo + rng.next_double() * (hi - lo));
    return out;
}

} // namespace exprbench
