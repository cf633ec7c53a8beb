#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tkgqa {

// Deterministic random source. All sampling is hand-rolled on top of
// mt19937_64 so that identical seeds give identical streams regardless of
// the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(gen_() % span);
    }

    // Box-Muller, no cached spare so the stream stays position-independent.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        return mean + stddev * z;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent child stream; used to decouple the consumption
    // order of one phase from another under a single master seed.
    Rng fork(std::uint64_t salt) {
        return Rng(gen_() ^ (salt * 0x9E3779B97F4A7C15ull));
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace tkgqa
