#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lowprob {

// All randomness in the tool is derived from one root seed through
// derive_seed(root, stream, unit, worker). Streams identify the consuming
// stage, `unit` is the per-task counter (target token, batch, chain, shard)
// and `worker` a further sub-counter where needed. This keeps every stage
// independently re-runnable and makes results invariant to the thread count.
namespace stream {
inline constexpr uint64_t model_init = 1;
inline constexpr uint64_t dist_gen = 2;
inline constexpr uint64_t ground_truth = 3;
inline constexpr uint64_t target_select = 4;
inline constexpr uint64_t tuning = 5;
inline constexpr uint64_t itgis = 6;
inline constexpr uint64_t mhis = 7;
inline constexpr uint64_t qld = 8;
inline constexpr uint64_t gld = 9;
inline constexpr uint64_t rcp = 10;
inline constexpr uint64_t synthetic = 11;
}  // namespace stream

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t root, uint64_t stream_id, uint64_t unit = 0,
                            uint64_t worker = 0) {
    return hash_mix(hash_mix(hash_mix(root, stream_id), unit), worker);
}

// Deterministic generator. Floating-point draws are built from explicit bit
// manipulation rather than std::*_distribution, whose output sequences are
// implementation-defined.
class Rng {
   public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the spare is cached.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer on [0, n), rejection sampled.
    int64_t below(int64_t n) {
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

   private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace lowprob
