#pragma once

#include <cstdint>
#include <stdexcept>

namespace exprbench {

// Deterministic 64-bit PRNG (splitmix64). The exact update rule is part of
// the reproducibility contract and is documented in the README so sequences
// can be replayed from any language:
//
//   state += 0x9e3779b97f4a7c15
//   z = state
//   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//   output = z ^ (z >> 31)
//
// Every seed (including 0) is valid. An Rng is single-owner; derived child
// streams (see derive_seed) are used where work fans out across items.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // Uniform in [0,1) using the top 53 bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo,hi); lo == hi yields lo.
    double uniform(double lo, double hi) {
        if (lo > hi)
            throw std::invalid_argument("Rng::uniform: lo > hi");
        return lo + next_double() * (hi - lo);
    }

    // Uniform integer in [0,n).
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0)
            throw std::invalid_argument("Rng::next_below: n == 0");
        return next_u64() % n;
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    // Finalizer of splitmix64; also used standalone to key child streams.
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

// Seed for a decorrelated child stream keyed by (a,b), e.g. (item, layer).
// Same inputs always give the same child seed, independent of threading.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0) {
    std::uint64_t z = base;
    z = Rng::mix(z ^ (a + 1) * 0x9e3779b97f4a7c15ULL);
    z = Rng::mix(z ^ (b + 1) * 0xbf58476d1ce4e5b9ULL);
    return z;
}

} // namespace exprbench
