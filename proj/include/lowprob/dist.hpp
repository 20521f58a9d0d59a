#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "lowprob/common.hpp"
#include "lowprob/model.hpp"
#include "lowprob/rng.hpp"

namespace lowprob {

// Product of per-position categorical distributions D_1 x ... x D_k. Zero
// probability tokens are kept off the support lists so importance weights
// never divide by zero.
struct PositionDist {
    std::vector<double> probs;     // dense, length vocab_size
    std::vector<int32_t> support;  // token ids with positive probability
    std::vector<double> cdf;       // cumulative over support, last entry == total

    // Normalizes, rebuilds support/cdf, validates. Throws input_error.
    void finalize(int vocab_size);
};

struct TokenDistribution {
    int vocab_size = 0;
    std::vector<PositionDist> positions;

    int k() const { return static_cast<int>(positions.size()); }
    double prob(int pos, int32_t token) const { return positions[pos].probs[token]; }
    void validate() const;

    // Product of per-position support sizes, saturating at `cap_hint`.
    int64_t support_space(int64_t cap_hint = INT64_MAX) const;
};

TokenSeq sample(const TokenDistribution& dist, Rng& rng);
void sample_into(const TokenDistribution& dist, Rng& rng, int32_t* out);

// Sum of per-position log probabilities; -inf if any position is off support.
double log_pmf(const TokenDistribution& dist, const TokenSeq& x);

// Per-position Boltzmann tilt q_i(x) proportional to p_i(x) * exp(s_i(x) / T),
// computed with max-subtraction over each support. Preserves support exactly.
TokenDistribution tilt_independent(const TokenDistribution& dist, const Eigen::MatrixXd& scores,
                                   double temperature);

// Single-position version of the tilt, shared with the MHIS proposal.
PositionDist tilt_position(const PositionDist& p, const double* scores_row, double temperature);

int32_t sample_position(const PositionDist& p, Rng& rng);

// ---- construction helpers ----

TokenDistribution uniform_dist(int vocab_size, int k, const std::vector<int32_t>& support = {});
TokenDistribution explicit_dist(int vocab_size, const std::vector<std::vector<double>>& probs);

// Frequency-weighted synthetic family: probability of the r-th listed token
// decays as 1/(r + shift)^exponent.
TokenDistribution zipf_dist(int vocab_size, int k, const std::vector<int32_t>& support,
                            double exponent, double shift = 2.0);

// ---- manifest (JSON) ----
//
// { "schema_version": 1, "vocab_size": V, "k": K,
//   "positions": [ ... K per-position specs ... ] }    or
//   "cycle":     [ ... C specs, position i uses spec i mod C ... ]
// where each spec is one of
//   {"type": "explicit", "probs": [ ... V values ... ]}
//   {"type": "uniform", "support": [ids]}                (empty = full vocab)
//   {"type": "weighted", "tokens": [ids], "weights": [w]}
//   {"type": "zipf", "support": [ids], "exponent": s, "shift": c}

TokenDistribution dist_from_json(const std::string& json_text);
std::string dist_to_json(const TokenDistribution& dist);
TokenDistribution load_dist(const std::string& path);
void save_dist(const TokenDistribution& dist, const std::string& path);

}  // namespace lowprob
