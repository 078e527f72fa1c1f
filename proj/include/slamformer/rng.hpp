#pragma once

#include <cstdint>
#include <random>

namespace slamformer {

// Deterministic RNG for weight init and test fixtures. All randomized
// call sites take an explicit seed so runs are reproducible bit-for-bit
// on one platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(gen_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(gen_);
    }

    // Inclusive bounds.
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(gen_);
    }

    uint64_t next_u64() { return gen_(); }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace slamformer
