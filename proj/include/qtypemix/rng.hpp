#pragma once

#include <cstdint>

#include "qtypemix/common.hpp"

namespace qtm {

// splitmix64 step; also used to hash seed components together.
inline std::uint64_t splitmix64_next(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic, platform-independent random stream. Every consumer of
// randomness owns its own stream, derived from the master seed plus stable
// integer tags, so runs are bit-reproducible for a fixed configuration.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed = 0) : base_(seed), state_(seed) {
        // decorrelate trivially related seeds
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return splitmix64_next(state_); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased draw in [0, n)
    std::uint64_t below(std::uint64_t n) {
        require(n > 0, "RngStream::below: n must be positive");
        // Lemire's multiply-shift with rejection
        std::uint64_t x = next_u64();
        unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            std::uint64_t t = (0 - n) % n;
            while (lo < t) {
                x = next_u64();
                m = static_cast<unsigned __int128>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        require(hi >= lo, "RngStream::uniform_int: empty range");
        return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Child stream keyed off the base seed and tags, independent of how many
    // draws this stream has made.
    RngStream derive(std::uint64_t tag_a, std::uint64_t tag_b = 0) const {
        std::uint64_t s = base_;
        std::uint64_t h = splitmix64_next(s);
        s ^= tag_a * 0xD6E8FEB86659FD93ULL;
        h ^= splitmix64_next(s);
        s ^= tag_b * 0xCA5A826395121157ULL;
        h ^= splitmix64_next(s);
        return RngStream(h);
    }

    std::uint64_t base_seed() const { return base_; }

  private:
    std::uint64_t base_;
    std::uint64_t state_;
};

}  // namespace qtm
