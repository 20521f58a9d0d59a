#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lowprob/dist.hpp"
#include "lowprob/model.hpp"

namespace lowprob {

struct TokenCounts {
    std::vector<int64_t> counts;  // [vocab_size]
    int64_t n_samples = 0;
};

struct Target {
    int32_t token = 0;
    double probability = 0.0;
};
using TargetSet = std::vector<Target>;

inline constexpr int64_t kDefaultExhaustiveCap = 1 << 20;

// Exact argmax-output distribution over the whole (bounded) input space.
// Refuses when the product of support sizes exceeds `cap`.
std::vector<double> exhaustive_distribution(const ModelWeights& w, const TokenDistribution& dist,
                                            int64_t cap = kDefaultExhaustiveCap, int threads = 1);

double exhaustive_probability(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                              int64_t cap = kDefaultExhaustiveCap, int threads = 1);

// Argmax counts over n independent samples. Sharded with counter-based RNG
// streams; results are identical for any thread count.
TokenCounts monte_carlo_counts(const ModelWeights& w, const TokenDistribution& dist, int64_t n,
                               uint64_t seed, int threads = 1);

// Uniformly random subset (size <= m) of tokens whose estimated probability
// lies in [lo, hi]. When fewer than m qualify, all of them are returned.
TargetSet select_targets(const TokenCounts& counts, double lo, double hi, int64_t m,
                         uint64_t seed);
TargetSet select_targets_from_probs(const std::vector<double>& probs, double lo, double hi,
                                    int64_t m, uint64_t seed);

// CSV persistence: "token,count,probability" rows plus a JSON sidecar with
// seed, sample count and input hashes.
void save_counts_csv(const TokenCounts& counts, const std::string& csv_path,
                     const std::string& sidecar_json);
TokenCounts load_counts_csv(const std::string& csv_path);
void save_targets_csv(const TargetSet& targets, const std::string& path);
TargetSet load_targets_csv(const std::string& path);

}  // namespace lowprob
