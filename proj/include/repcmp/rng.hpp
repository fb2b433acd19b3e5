#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace repcmp {

// std::uniform_*_distribution output is implementation-defined; every draw here
// is derived from raw mt19937_64 words so that bundles are bit-identical across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Unbiased integer in [0, n). Lemire's multiply-shift with rejection.
    std::uint64_t uniform_index(std::uint64_t n);

    /// k distinct indices from [0, n) in sampled order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[uniform_index(i)]);
        }
    }

    double normal();

private:
    std::mt19937_64 engine_;
};

/// SplitMix64 finaliser; used to derive independent child seeds.
std::uint64_t mix64(std::uint64_t x);

/// Child seed from a parent seed and a tag (e.g. unit key, trial index).
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag);

}  // namespace repcmp
