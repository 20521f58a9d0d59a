#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "lowprob/dist.hpp"
#include "lowprob/model.hpp"
#include "lowprob/rng.hpp"

namespace lowprob {

enum class Method { itgis, mhis, qld, gld };
std::string method_name(Method m);
Method method_from_name(const std::string& name);

// Per-token computational budget. `total_model_calls` counts the samples a
// method is allowed to consume: importance-sampling samples (each costs one
// forward plus one backward, reported separately in diagnostics), kept MCMC
// samples (burn-in is the same extra fraction the reference protocol allows),
// or plain forward samples for the activation methods.
struct EstimatorBudget {
    int64_t total_model_calls = 4096;
    int itgis_batches = 64;
    int itgis_batch_size = 64;
    int mhis_chains = 32;
    int mhis_burn = 32;   // per chain
    int mhis_kept = 128;  // per chain
    int64_t qld_samples = 4096;
    int64_t gld_samples = 4096;

    // Desk-scale shape preserving the reference ratios: ITGIS splits the
    // budget into sqrt-by-sqrt batches, MHIS runs 32 walks with a burn-in of
    // half the kept length, QLD/GLD spend everything on samples.
    static EstimatorBudget from_total(int64_t total);
};

struct EstimateRecord {
    Method method = Method::itgis;
    int32_t target = 0;
    double raw_estimate = 0.0;
    int64_t model_calls_used = 0;
    nlohmann::json diagnostics;
};

// ---- whitening ----

struct WhiteningTransform {
    Eigen::VectorXd mu;
    Eigen::MatrixXd a;  // lower-triangular, a a^T = sigma + eps I
    double eps = 0.0;
};

struct WhitenResult {
    WhiteningTransform transform;
    Eigen::MatrixXd whitened;  // [n x d], row per sample
};

// Empirical mean/covariance (population convention) plus Cholesky factor of
// sigma + eps I with eps = eps_rel * trace(sigma)/d (absolute floor when the
// covariance is exactly zero).
WhitenResult whiten(const Eigen::MatrixXd& samples, double eps_rel = 1e-6);

// ---- acceptance region geometry (whitened space) ----

struct AcceptanceInterval {
    double lo = 0.0;
    double hi = 0.0;
    bool empty = true;
};

// All margins logit_t - logit_c of (A u + mu) W_U, c != t.
Eigen::VectorXd accepting_margins(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                  int32_t t, const Eigen::VectorXd& u);
bool accepting_member(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u, int32_t t,
                      const Eigen::VectorXd& u, double tol);

// The set {alpha : alpha * dir + b in S} for the convex acceptance region S;
// a single (possibly empty or unbounded) interval.
AcceptanceInterval acceptance_interval(const Eigen::VectorXd& b, const Eigen::VectorXd& dir,
                                       const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                       int32_t t);

struct RcpOptions {
    int n_reps = 200;
    double tol = 1e-6;  // membership when all margins >= -tol
};

struct RcpResult {
    Eigen::VectorXd point;      // final iterate
    Eigen::VectorXd direction;  // unit vector (fallback basis vector if degenerate)
    int steps = 0;
    bool found = false;
    bool degenerate = false;  // converged to (near) the origin
};

// Random Constraint Projection: start at 0, project onto a uniformly random
// violated half-space, shrink by 0.99 on membership while step < n_reps, hard
// cap of 100 * n_reps steps.
RcpResult try_shortest_accepting_vector(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                        int32_t t, const RcpOptions& opt, uint64_t seed);
// Same, but throws numeric_error when the cap is exhausted.
RcpResult shortest_accepting_vector(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                    int32_t t, const RcpOptions& opt, uint64_t seed);

// Exact count of pairs (i, j) with a_i * dir + b_j in S, computed by sorting
// the parallel components and binary-searching each per-j interval.
int64_t qld_pair_count(const WhiteningTransform& tr, const Eigen::MatrixXd& whitened,
                       const Eigen::VectorXd& dir, const Eigen::MatrixXd& w_u, int32_t t);

// ---- ITGIS ----

struct ItgisOptions {
    double temperature = 1.0;
    double alpha = 0.9;  // score moving-average decay
    int threads = 1;
};

EstimateRecord itgis(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                     const EstimatorBudget& budget, uint64_t seed, const ItgisOptions& opt = {});

// ---- MHIS ----

struct MhisProposal {
    TokenSeq next;
    int position = 0;
    double forward_logweight = 0.0;  // log phi(x'|x), position factor omitted
    double reverse_logweight = 0.0;  // log phi(x|x')
};

// One gradient-tilted single-position proposal draw.
MhisProposal mhis_proposal(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                           const TokenSeq& x, double temperature, Rng& rng);

// The proposal categorical at one position (exposed for chain diagnostics).
PositionDist mhis_proposal_dist(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                                const TokenSeq& x, int position, double temperature);

// Unclipped ratio q(x') phi(x|x') / (q(x) phi(x'|x)); the caller accepts with
// probability min(1, ratio).
double mh_acceptance_ratio(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                           double temperature, const TokenSeq& x, const TokenSeq& x_next,
                           double forward_logweight, double reverse_logweight);

struct MhisOptions {
    double temperature = 1.0;
    int threads = 1;
};

EstimateRecord mhis(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                    const EstimatorBudget& budget, uint64_t seed, const MhisOptions& opt = {});

// Kept post-burn-in samples of one chain (stationarity diagnostics).
std::vector<TokenSeq> mhis_chain_samples(const ModelWeights& w, const TokenDistribution& dist,
                                         int32_t t, double temperature, int n_burn, int n_kept,
                                         uint64_t seed);

// ---- QLD ----

struct QldOptions {
    RcpOptions rcp;
    int threads = 1;
};

// Pre-unembed samples and their whitening, shared across targets.
struct QldShared {
    WhitenResult white;
    int64_t n_samples = 0;
};

QldShared qld_collect(const ModelWeights& w, const TokenDistribution& dist, int64_t n,
                      uint64_t seed, int threads = 1);
EstimateRecord qld_from_shared(const QldShared& shared, const ModelWeights& w, int32_t t,
                               uint64_t seed, const QldOptions& opt = {});
EstimateRecord qld(const ModelWeights& w, const TokenDistribution& dist, int32_t t, int64_t n,
                   uint64_t seed, const QldOptions& opt = {});

// ---- GLD ----

struct GldStats {
    double mu = 0.0;
    double sigma = 0.0;  // population standard deviation
};

struct FitParams4 {
    double a = 1.0;
    double b = 0.0;
    double c = 0.0;
    double eps = 0.0;
};

GldStats gld_stats_from_deltas(const std::vector<double>& deltas);
GldStats gld_stats(const ModelWeights& w, const TokenDistribution& dist, int32_t t, int64_t n,
                   uint64_t seed, int threads = 1);
std::vector<GldStats> gld_stats_multi(const ModelWeights& w, const TokenDistribution& dist,
                                      const std::vector<int32_t>& targets, int64_t n,
                                      uint64_t seed, int threads = 1);

// exp(-(a mu / (sigma + eps))^2 + b) + c, exponent evaluated in log space.
double gld_estimate(const GldStats& stats, const FitParams4& params);

// Record wrapper: raw_estimate is the plain Gaussian plug-in Phi(mu/sigma),
// diagnostics carry (mu, sigma) for the functional-form fit downstream.
EstimateRecord gld_record(const GldStats& stats, int32_t t, int64_t n);

double normal_cdf(double x);

}  // namespace lowprob
