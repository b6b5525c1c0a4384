#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "fhcure/stats.hpp"

namespace fhcure {

/// splitmix64 mixing step, used to derive independent engine seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Deterministic random stream addressed by (master seed, stream id).
///
/// Stream s of master seed m is a pure function of (m, s), so replication r
/// of a study can draw from stream r independently of all other replications
/// and independently of execution order. All variates are produced by
/// inverse-transform from 53-bit uniforms, so results are bit-stable across
/// standard library implementations.
class RngStream {
public:
    RngStream(std::uint64_t master_seed, std::uint64_t stream_id) {
        std::uint64_t s = master_seed ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
        const std::uint64_t s0 = splitmix64(s);
        const std::uint64_t s1 = splitmix64(s);
        std::seed_seq seq{static_cast<std::uint32_t>(s0), static_cast<std::uint32_t>(s0 >> 32),
                          static_cast<std::uint32_t>(s1), static_cast<std::uint32_t>(s1 >> 32)};
        engine_.seed(seq);
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform draw in (0, 1], for inverse-transform sampling of survival draws.
    double uniform_open0() { return 1.0 - uniform(); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Exponential(rate) via inverse transform.
    double exponential(double rate) {
        return -std::log1p(-uniform()) / rate;
    }

    /// Standard normal via the inverse CDF.
    double normal() {
        double u = uniform();
        if (u <= 0.0) u = std::numeric_limits<double>::min();
        return normal_quantile(u);
    }

    /// Uniform category in {0, ..., k-1}.
    int categorical(int k) {
        int v = static_cast<int>(uniform() * k);
        return v >= k ? k - 1 : v;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace fhcure
