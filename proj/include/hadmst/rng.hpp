#pragma once

#include <cstdint>
#include <random>

#include "hadmst/array.hpp"

namespace hadmst {

// Deterministic RNG handle. Every stochastic operation takes one of these
// explicitly; there is no hidden global stream.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double normal() { return normal_(eng_); }
    double uniform() { return uniform_(eng_); }  // [0,1)
    // integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
    }

    Array normal_array(std::vector<int> shape, double mean = 0.0, double stddev = 1.0) {
        Array a(std::move(shape));
        for (auto& x : a.v) x = mean + stddev * normal();
        return a;
    }

    Array uniform_array(std::vector<int> shape, double lo, double hi) {
        Array a(std::move(shape));
        for (auto& x : a.v) x = lo + (hi - lo) * uniform();
        return a;
    }

    // Independent child stream; uses splitmix64 so children of distinct tags
    // never collide in practice.
    Rng child(uint64_t tag) const {
        uint64_t z = seed_mix_ + tag * 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return Rng(z ^ (z >> 31));
    }

    // Construct remembering the seed so child() is derivable.
    static Rng seeded(uint64_t seed) {
        Rng r(seed);
        r.seed_mix_ = seed;
        return r;
    }

    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
    uint64_t seed_mix_ = 0;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace hadmst
