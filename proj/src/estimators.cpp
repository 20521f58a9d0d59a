#include "lowprob/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lowprob/common.hpp"

namespace lowprob {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kForwardBatch = 512;
constexpr int64_t kSampleGranule = 1 << 14;
}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::itgis: return "itgis";
        case Method::mhis: return "mhis";
        case Method::qld: return "qld";
        case Method::gld: return "gld";
    }
    throw input_error("bad method enum");
}

Method method_from_name(const std::string& name) {
    if (name == "itgis") return Method::itgis;
    if (name == "mhis") return Method::mhis;
    if (name == "qld") return Method::qld;
    if (name == "gld") return Method::gld;
    throw input_error("unknown method: " + name);
}

EstimatorBudget EstimatorBudget::from_total(int64_t total) {
    if (total < 4) throw input_error("budget must be at least 4 model calls");
    EstimatorBudget b;
    b.total_model_calls = total;
    int64_t bs = 1;
    while ((bs * 2) * (bs * 2) <= total) bs *= 2;
    b.itgis_batch_size = static_cast<int>(bs);
    b.itgis_batches = static_cast<int>(std::max<int64_t>(1, total / bs));
    b.mhis_chains = static_cast<int>(std::min<int64_t>(32, std::max<int64_t>(1, total / 32)));
    b.mhis_kept = static_cast<int>(std::max<int64_t>(1, total / b.mhis_chains));
    b.mhis_burn = static_cast<int>(std::max<int64_t>(1, b.mhis_kept / 2));
    b.qld_samples = total;
    b.gld_samples = total;
    return b;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / 1.4142135623730950488); }

// ---------------------------------------------------------------- whitening

WhitenResult whiten(const Eigen::MatrixXd& samples, double eps_rel) {
    const Eigen::Index n = samples.rows();
    const Eigen::Index d = samples.cols();
    if (n < 2) throw input_error("whitening needs at least 2 samples");
    if (!samples.allFinite()) throw numeric_error("non-finite whitening input");

    WhitenResult out;
    out.transform.mu = samples.colwise().mean();
    Eigen::MatrixXd centered = samples.rowwise() - out.transform.mu.transpose();
    Eigen::MatrixXd sigma = (centered.adjoint() * centered) / static_cast<double>(n);
    const double trace = sigma.trace();
    out.transform.eps =
        trace > 0.0 ? eps_rel * trace / static_cast<double>(d) : 1e-12;
    sigma.diagonal().array() += out.transform.eps;

    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw numeric_error("covariance factorization failed after eps inflation");
    out.transform.a = llt.matrixL();

    Eigen::MatrixXd w = centered.transpose();
    out.transform.a.triangularView<Eigen::Lower>().solveInPlace(w);
    out.whitened = w.transpose();
    if (!out.whitened.allFinite()) throw numeric_error("non-finite whitened samples");
    return out;
}

// ------------------------------------------------- acceptance region pieces

Eigen::VectorXd accepting_margins(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                  int32_t t, const Eigen::VectorXd& u) {
    Eigen::VectorXd logits = w_u.transpose() * (tr.a * u + tr.mu);
    Eigen::VectorXd margins(logits.size() - 1);
    Eigen::Index j = 0;
    for (Eigen::Index c = 0; c < logits.size(); ++c) {
        if (c == t) continue;
        margins[j++] = logits[t] - logits[c];
    }
    return margins;
}

bool accepting_member(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u, int32_t t,
                      const Eigen::VectorXd& u, double tol) {
    return accepting_margins(tr, w_u, t, u).minCoeff() >= -tol;
}

namespace {

// Intersects the half-line constraints c1[c] * alpha + c0[c] >= 0 over all
// competitors c != t. A zero slope resolves by the lowest-id tie rule.
AcceptanceInterval build_interval(const Eigen::RowVectorXd& c1, const Eigen::RowVectorXd& c0,
                                  int32_t t) {
    AcceptanceInterval iv;
    iv.lo = -kInf;
    iv.hi = kInf;
    iv.empty = false;
    for (Eigen::Index c = 0; c < c1.size(); ++c) {
        if (c == t) continue;
        if (c1[c] > 0.0) {
            iv.lo = std::max(iv.lo, -c0[c] / c1[c]);
        } else if (c1[c] < 0.0) {
            iv.hi = std::min(iv.hi, -c0[c] / c1[c]);
        } else if (c0[c] < 0.0 || (c0[c] == 0.0 && c < t)) {
            iv.empty = true;
            return iv;
        }
    }
    if (iv.lo > iv.hi) iv.empty = true;
    return iv;
}

}  // namespace

AcceptanceInterval acceptance_interval(const Eigen::VectorXd& b, const Eigen::VectorXd& dir,
                                       const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                       int32_t t) {
    Eigen::RowVectorXd z = (tr.a * dir).transpose() * w_u;         // slope per competitor
    Eigen::RowVectorXd y = (tr.a * b + tr.mu).transpose() * w_u;   // offset per competitor
    Eigen::RowVectorXd c1 = Eigen::RowVectorXd::Constant(z.size(), z[t]) - z;
    Eigen::RowVectorXd c0 = Eigen::RowVectorXd::Constant(y.size(), y[t]) - y;
    return build_interval(c1, c0, t);
}

RcpResult try_shortest_accepting_vector(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                        int32_t t, const RcpOptions& opt, uint64_t seed) {
    const Eigen::Index d = tr.a.rows();
    const Eigen::Index vocab = w_u.cols();
    if (t < 0 || t >= vocab) throw input_error("target token out of range");
    if (opt.n_reps < 1) throw input_error("n_reps must be >= 1");

    Eigen::MatrixXd p = tr.a.transpose() * w_u;          // column c = A^T w_c
    Eigen::VectorXd base = w_u.transpose() * tr.mu;      // [vocab]
    Eigen::VectorXd u = Eigen::VectorXd::Zero(d);

    Rng rng(seed);
    RcpResult res;
    std::vector<int32_t> violated;
    violated.reserve(vocab);
    const int max_steps = 100 * opt.n_reps;
    for (int step = 1; step <= max_steps; ++step) {
        res.steps = step;
        Eigen::VectorXd logits = p.transpose() * u + base;
        const double lt = logits[t];
        double min_margin = kInf;
        violated.clear();
        for (Eigen::Index c = 0; c < vocab; ++c) {
            if (c == t) continue;
            const double m = lt - logits[c];
            min_margin = std::min(min_margin, m);
            if (m < 0.0) violated.push_back(static_cast<int32_t>(c));
        }
        if (min_margin >= -opt.tol) {
            if (step < opt.n_reps) {
                u *= 0.99;
                continue;
            }
            res.found = true;
            break;
        }
        const int32_t c = violated[rng.below(static_cast<int64_t>(violated.size()))];
        Eigen::VectorXd g = p.col(t) - p.col(c);
        const double g2 = g.squaredNorm();
        if (g2 == 0.0) break;  // constant infeasible constraint: S is empty
        const double margin = lt - logits[c];
        u -= (margin / g2) * g;
    }

    res.point = u;
    const double norm = u.norm();
    if (norm > 1e-12) {
        res.direction = u / norm;
    } else {
        res.direction = Eigen::VectorXd::Zero(d);
        res.direction[0] = 1.0;
        res.degenerate = true;
    }
    return res;
}

RcpResult shortest_accepting_vector(const WhiteningTransform& tr, const Eigen::MatrixXd& w_u,
                                    int32_t t, const RcpOptions& opt, uint64_t seed) {
    RcpResult res = try_shortest_accepting_vector(tr, w_u, t, opt, seed);
    if (!res.found)
        throw numeric_error(
            "random constraint projection exhausted its step cap (empty region or tolerance too "
            "tight)");
    return res;
}

namespace {

// Direction-free membership count: how many whitened rows land in S.
int64_t member_count(const WhiteningTransform& tr, const Eigen::MatrixXd& whitened,
                     const Eigen::MatrixXd& w_u, int32_t t) {
    const Eigen::Index n = whitened.rows();
    Eigen::RowVectorXd base = tr.mu.transpose() * w_u;
    int64_t count = 0;
    for (Eigen::Index r0 = 0; r0 < n; r0 += kForwardBatch) {
        const Eigen::Index m = std::min<Eigen::Index>(kForwardBatch, n - r0);
        Eigen::MatrixXd logits =
            (whitened.middleRows(r0, m) * tr.a.transpose()) * w_u;
        logits.rowwise() += base;
        for (Eigen::Index j = 0; j < m; ++j) {
            if (argmax_token(logits.row(j).transpose()) == t) ++count;
        }
    }
    return count;
}

}  // namespace

int64_t qld_pair_count(const WhiteningTransform& tr, const Eigen::MatrixXd& whitened,
                       const Eigen::VectorXd& dir, const Eigen::MatrixXd& w_u, int32_t t) {
    const Eigen::Index n = whitened.rows();
    const Eigen::Index vocab = w_u.cols();
    Eigen::VectorXd a = whitened * dir;
    std::vector<double> sorted_a(a.data(), a.data() + n);
    std::sort(sorted_a.begin(), sorted_a.end());

    Eigen::RowVectorXd z = (tr.a * dir).transpose() * w_u;  // slope of each logit along dir
    Eigen::RowVectorXd base = tr.mu.transpose() * w_u;
    Eigen::RowVectorXd c1 = Eigen::RowVectorXd::Constant(vocab, z[t]) - z;

    int64_t count = 0;
    Eigen::RowVectorXd c0(vocab);
    for (Eigen::Index r0 = 0; r0 < n; r0 += kForwardBatch) {
        const Eigen::Index m = std::min<Eigen::Index>(kForwardBatch, n - r0);
        // logits of the residual component b_j = u_j - a_j * dir
        Eigen::MatrixXd y = (whitened.middleRows(r0, m) * tr.a.transpose()) * w_u;
        y.rowwise() += base;
        for (Eigen::Index j = 0; j < m; ++j) {
            const double aj = a[r0 + j];
            for (Eigen::Index c = 0; c < vocab; ++c) {
                const double yc = y(j, c) - aj * z[c];
                c0[c] = yc;  // offset of logit c at alpha = 0
            }
            const double yt = c0[t];
            for (Eigen::Index c = 0; c < vocab; ++c) c0[c] = yt - c0[c];
            AcceptanceInterval iv = build_interval(c1, c0, t);
            if (iv.empty) continue;
            auto lo_it = std::lower_bound(sorted_a.begin(), sorted_a.end(), iv.lo);
            auto hi_it = std::upper_bound(sorted_a.begin(), sorted_a.end(), iv.hi);
            if (hi_it > lo_it) count += hi_it - lo_it;
        }
    }
    return count;
}

// -------------------------------------------------------------------- ITGIS

EstimateRecord itgis(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                     const EstimatorBudget& budget, uint64_t seed, const ItgisOptions& opt) {
    dist.validate();
    if (t < 0 || t >= dist.vocab_size) throw input_error("target token out of range");
    if (!(opt.temperature > 0.0)) throw input_error("temperature must be > 0");
    if (!(opt.alpha > 0.0 && opt.alpha < 1.0)) throw input_error("alpha must be in (0, 1)");
    const int n_batches = budget.itgis_batches;
    const int batch_size = budget.itgis_batch_size;
    if (n_batches < 1 || batch_size < 1) throw input_error("empty ITGIS budget");

    const int k = dist.k();
    const int vocab = dist.vocab_size;
    Eigen::MatrixXd score_num = Eigen::MatrixXd::Zero(k, vocab);
    Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(k, vocab);
    double score_den = 0.0;

    double estimate_sum = 0.0;
    int64_t n_hits = 0;
    std::vector<TokenSeq> xs(batch_size);
    std::vector<Eigen::MatrixXd> grads(batch_size);
    std::vector<double> weighted_hit(batch_size);
    std::vector<int8_t> hit(batch_size);

    for (int j = 0; j < n_batches; ++j) {
        TokenDistribution q = tilt_independent(dist, scores, opt.temperature);
        // One sampling stream per batch: (seed, itgis, batch index).
        Rng rng(derive_seed(seed, stream::itgis, static_cast<uint64_t>(j)));
        for (int b = 0; b < batch_size; ++b) xs[b] = sample(q, rng);

        parallel_chunks(batch_size, 1, opt.threads, [&](int64_t b, int64_t, int64_t) {
            ForwardBackward fb = forward_and_grad(w, xs[b], t);
            grads[b] = std::move(fb.grad);
            hit[b] = argmax_token(fb.logits) == t ? 1 : 0;
            const double lw = log_pmf(dist, xs[b]) - log_pmf(q, xs[b]);
            const double weight = std::exp(lw);
            if (!std::isfinite(weight)) throw numeric_error("non-finite importance weight");
            weighted_hit[b] = hit[b] ? weight : 0.0;
        });

        Eigen::MatrixXd grad_mean = Eigen::MatrixXd::Zero(k, vocab);
        double batch_est = 0.0;
        for (int b = 0; b < batch_size; ++b) {
            grad_mean += grads[b];
            batch_est += weighted_hit[b];
            n_hits += hit[b];
        }
        grad_mean /= static_cast<double>(batch_size);
        batch_est /= static_cast<double>(batch_size);
        estimate_sum += batch_est;

        score_num = grad_mean + opt.alpha * score_num;
        score_den = 1.0 + opt.alpha * score_den;
        scores = score_num / score_den;
    }

    EstimateRecord rec;
    rec.method = Method::itgis;
    rec.target = t;
    rec.raw_estimate = estimate_sum / static_cast<double>(n_batches);
    rec.model_calls_used = static_cast<int64_t>(n_batches) * batch_size;
    rec.diagnostics = {{"n_batches", n_batches},
                       {"batch_size", batch_size},
                       {"n_positive", n_hits},
                       {"n_forward", rec.model_calls_used},
                       {"n_backward", rec.model_calls_used},
                       {"temperature", opt.temperature},
                       {"alpha", opt.alpha}};
    return rec;
}

// --------------------------------------------------------------------- MHIS

PositionDist mhis_proposal_dist(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                                const TokenSeq& x, int position, double temperature) {
    if (position < 0 || position >= dist.k()) throw input_error("proposal position out of range");
    ForwardBackward fb = forward_and_grad(w, x, t);
    Eigen::VectorXd row = fb.grad.row(position);
    return tilt_position(dist.positions[position], row.data(), temperature);
}

MhisProposal mhis_proposal(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                           const TokenSeq& x, double temperature, Rng& rng) {
    if (!(temperature > 0.0)) throw input_error("temperature must be > 0");
    const int k = dist.k();
    const int i = static_cast<int>(rng.below(k));
    PositionDist fwd = mhis_proposal_dist(w, dist, t, x, i, temperature);
    MhisProposal out;
    out.position = i;
    out.next = x;
    out.next[i] = sample_position(fwd, rng);
    out.forward_logweight = std::log(fwd.probs[out.next[i]]);
    if (out.next[i] == x[i]) {
        out.reverse_logweight = out.forward_logweight;
    } else {
        PositionDist rev = mhis_proposal_dist(w, dist, t, out.next, i, temperature);
        out.reverse_logweight = std::log(rev.probs[x[i]]);
    }
    return out;
}

double mh_acceptance_ratio(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                           double temperature, const TokenSeq& x, const TokenSeq& x_next,
                           double forward_logweight, double reverse_logweight) {
    if (x.size() != x_next.size()) throw input_error("state length mismatch");
    int diff = -1;
    for (size_t i = 0; i < x.size(); ++i) {
        if (x[i] != x_next[i]) {
            if (diff >= 0) throw input_error("states differ in more than one position");
            diff = static_cast<int>(i);
        }
    }
    double log_r = reverse_logweight - forward_logweight;
    if (diff >= 0) {
        const double pi_cur = dist.positions[diff].probs[x[diff]];
        const double pi_next = dist.positions[diff].probs[x_next[diff]];
        if (pi_cur == 0.0 || pi_next == 0.0) throw input_error("state off distribution support");
        log_r += std::log(pi_next) - std::log(pi_cur);
        const double mt_cur = forward_logits(w, x)[t];
        const double mt_next = forward_logits(w, x_next)[t];
        log_r += (mt_next - mt_cur) / temperature;
    }
    return std::exp(log_r);
}

namespace {

// One Metropolis-Hastings walk with the gradient at the current state cached:
// a proposal costs one forward + one backward at the proposed point only.
struct MhisWalker {
    const ModelWeights& w;
    const TokenDistribution& dist;
    int32_t t;
    double temperature;

    TokenSeq x;
    double target_logit = 0.0;
    bool hit = false;
    Eigen::MatrixXd grad;

    int64_t n_forward = 0, n_backward = 0, n_accept = 0, n_self = 0, n_steps = 0;

    void eval_current() {
        ForwardBackward fb = forward_and_grad(w, x, t);
        ++n_forward;
        ++n_backward;
        target_logit = fb.logits[t];
        hit = argmax_token(fb.logits) == t;
        grad = std::move(fb.grad);
    }

    void init(Rng& rng) {
        x = sample(dist, rng);
        eval_current();
    }

    void step(Rng& rng) {
        ++n_steps;
        const int i = static_cast<int>(rng.below(dist.k()));
        Eigen::VectorXd row = grad.row(i);
        PositionDist fwd = tilt_position(dist.positions[i], row.data(), temperature);
        const int32_t cand = sample_position(fwd, rng);
        if (cand == x[i]) {
            ++n_accept;
            ++n_self;
            return;
        }
        TokenSeq x2 = x;
        x2[i] = cand;
        ForwardBackward fb2 = forward_and_grad(w, x2, t);
        ++n_forward;
        ++n_backward;
        Eigen::VectorXd row2 = fb2.grad.row(i);
        PositionDist rev = tilt_position(dist.positions[i], row2.data(), temperature);
        const double log_r = std::log(dist.positions[i].probs[cand]) -
                             std::log(dist.positions[i].probs[x[i]]) +
                             (fb2.logits[t] - target_logit) / temperature +
                             std::log(rev.probs[x[i]]) - std::log(fwd.probs[cand]);
        const double u = rng.uniform();
        if (u <= 0.0 || std::log(u) < log_r) {
            x = std::move(x2);
            target_logit = fb2.logits[t];
            hit = argmax_token(fb2.logits) == t;
            grad = std::move(fb2.grad);
            ++n_accept;
        }
    }
};

}  // namespace

std::vector<TokenSeq> mhis_chain_samples(const ModelWeights& w, const TokenDistribution& dist,
                                         int32_t t, double temperature, int n_burn, int n_kept,
                                         uint64_t seed) {
    MhisWalker walker{w, dist, t, temperature};
    Rng rng(derive_seed(seed, stream::mhis, 0));
    walker.init(rng);
    std::vector<TokenSeq> kept;
    kept.reserve(n_kept);
    for (int s = 0; s < n_burn + n_kept; ++s) {
        walker.step(rng);
        if (s >= n_burn) kept.push_back(walker.x);
    }
    return kept;
}

EstimateRecord mhis(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                    const EstimatorBudget& budget, uint64_t seed, const MhisOptions& opt) {
    dist.validate();
    if (t < 0 || t >= dist.vocab_size) throw input_error("target token out of range");
    if (!(opt.temperature > 0.0)) throw input_error("temperature must be > 0");
    const int n_chains = budget.mhis_chains;
    const int n_burn = budget.mhis_burn;
    const int n_kept = budget.mhis_kept;
    if (n_chains < 1 || n_kept < 1) throw input_error("empty MHIS budget");

    struct ChainOut {
        std::vector<double> neg_scaled_logit;  // -M_t / T per kept sample
        std::vector<int8_t> hit;
        int64_t n_forward = 0, n_backward = 0, n_accept = 0, n_self = 0, n_steps = 0;
    };
    std::vector<ChainOut> chains(n_chains);

    parallel_chunks(n_chains, 1, opt.threads, [&](int64_t c, int64_t, int64_t) {
        MhisWalker walker{w, dist, t, opt.temperature};
        Rng rng(derive_seed(seed, stream::mhis, static_cast<uint64_t>(c)));
        walker.init(rng);
        auto& out = chains[c];
        out.neg_scaled_logit.reserve(n_kept);
        out.hit.reserve(n_kept);
        for (int s = 0; s < n_burn + n_kept; ++s) {
            walker.step(rng);
            if (s >= n_burn) {
                out.neg_scaled_logit.push_back(-walker.target_logit / opt.temperature);
                out.hit.push_back(walker.hit ? 1 : 0);
            }
        }
        out.n_forward = walker.n_forward;
        out.n_backward = walker.n_backward;
        out.n_accept = walker.n_accept;
        out.n_self = walker.n_self;
        out.n_steps = walker.n_steps;
    });

    // Pool kept samples; the normalizing constant comes from the identity
    // E_p[exp(M_t/T)] = E_q[exp(-M_t/T)]^-1, so the estimate reduces to a
    // softmax-weighted hit fraction, stable under max-subtraction.
    double c_max = -kInf;
    for (const auto& c : chains)
        for (double v : c.neg_scaled_logit) c_max = std::max(c_max, v);
    double denom = 0.0, numer = 0.0;
    int64_t n_total = 0, n_hits = 0;
    int64_t n_forward = 0, n_backward = 0, n_accept = 0, n_self = 0, n_steps = 0;
    for (const auto& c : chains) {
        for (size_t j = 0; j < c.neg_scaled_logit.size(); ++j) {
            const double e = std::exp(c.neg_scaled_logit[j] - c_max);
            denom += e;
            if (c.hit[j]) {
                numer += e;
                ++n_hits;
            }
            ++n_total;
        }
        n_forward += c.n_forward;
        n_backward += c.n_backward;
        n_accept += c.n_accept;
        n_self += c.n_self;
        n_steps += c.n_steps;
    }
    if (!(denom > 0.0) || !std::isfinite(denom)) throw numeric_error("degenerate MHIS weights");

    const double log_mean = std::log(denom / static_cast<double>(n_total)) + c_max;

    EstimateRecord rec;
    rec.method = Method::mhis;
    rec.target = t;
    rec.raw_estimate = numer / denom;
    rec.model_calls_used = n_total;
    rec.diagnostics = {{"n_chains", n_chains},
                       {"n_burn", n_burn},
                       {"n_kept", n_kept},
                       {"n_positive", n_hits},
                       {"acceptance_rate", static_cast<double>(n_accept) / n_steps},
                       {"self_proposal_rate", static_cast<double>(n_self) / n_steps},
                       {"log_z", -log_mean},
                       {"n_forward", n_forward},
                       {"n_backward", n_backward},
                       {"temperature", opt.temperature}};
    return rec;
}

// ---------------------------------------------------------------------- QLD

QldShared qld_collect(const ModelWeights& w, const TokenDistribution& dist, int64_t n,
                      uint64_t seed, int threads) {
    dist.validate();
    if (n < 2) throw input_error("QLD needs at least 2 samples");
    const int k = dist.k();
    Eigen::MatrixXd samples(n, w.spec.d_model);

    parallel_chunks(n, kSampleGranule, threads, [&](int64_t chunk, int64_t begin, int64_t end) {
        Rng rng(derive_seed(seed, stream::qld, static_cast<uint64_t>(chunk)));
        TokenBatch batch;
        Eigen::MatrixXd pre;
        int64_t row = begin;
        while (row < end) {
            const int b = static_cast<int>(std::min<int64_t>(end - row, kForwardBatch));
            batch.resize(b, k);
            for (int s = 0; s < b; ++s) sample_into(dist, rng, batch.row(s));
            forward_batch(w, batch, nullptr, &pre);
            samples.middleRows(row, b) = pre;
            row += b;
        }
    });

    QldShared out;
    out.white = whiten(samples);
    out.n_samples = n;
    return out;
}

EstimateRecord qld_from_shared(const QldShared& shared, const ModelWeights& w, int32_t t,
                               uint64_t seed, const QldOptions& opt) {
    const auto& tr = shared.white.transform;
    const auto& u = shared.white.whitened;
    const int64_t n = shared.n_samples;
    if (t < 0 || t >= w.spec.vocab_size) throw input_error("target token out of range");

    EstimateRecord rec;
    rec.method = Method::qld;
    rec.target = t;
    rec.model_calls_used = n;

    const int64_t diag = member_count(tr, u, w.unembed, t);
    rec.diagnostics["diagonal_hits"] = diag;
    rec.diagnostics["n_samples"] = n;

    if (diag == n) {
        // Every sample already produces the target: the event is not rare and
        // the diagonal (naive) estimate is the honest answer.
        rec.raw_estimate = 1.0;
        rec.diagnostics["degenerate_all_hits"] = true;
        return rec;
    }

    RcpResult rcp = try_shortest_accepting_vector(tr, w.unembed, t, opt.rcp,
                                                  derive_seed(seed, stream::rcp, t));
    rec.diagnostics["rcp_steps"] = rcp.steps;
    rec.diagnostics["rcp_found"] = rcp.found;
    if (!rcp.found || rcp.degenerate) {
        rec.raw_estimate = static_cast<double>(diag) / static_cast<double>(n);
        rec.diagnostics["fallback_diagonal"] = true;
        return rec;
    }

    const int64_t pairs = qld_pair_count(tr, u, rcp.direction, w.unembed, t);
    rec.raw_estimate = static_cast<double>(pairs) / (static_cast<double>(n) * static_cast<double>(n));
    rec.diagnostics["pair_count"] = pairs;
    rec.diagnostics["shortest_vector_norm"] = rcp.point.norm();
    return rec;
}

EstimateRecord qld(const ModelWeights& w, const TokenDistribution& dist, int32_t t, int64_t n,
                   uint64_t seed, const QldOptions& opt) {
    QldShared shared = qld_collect(w, dist, n, seed, opt.threads);
    return qld_from_shared(shared, w, t, seed, opt);
}

// ---------------------------------------------------------------------- GLD

GldStats gld_stats_from_deltas(const std::vector<double>& deltas) {
    if (deltas.size() < 2) throw input_error("GLD needs at least 2 samples");
    double sum = 0.0;
    for (double d : deltas) sum += d;
    const double mu = sum / static_cast<double>(deltas.size());
    double ss = 0.0;
    for (double d : deltas) ss += (d - mu) * (d - mu);
    GldStats s;
    s.mu = mu;
    s.sigma = std::sqrt(ss / static_cast<double>(deltas.size()));
    return s;
}

std::vector<GldStats> gld_stats_multi(const ModelWeights& w, const TokenDistribution& dist,
                                      const std::vector<int32_t>& targets, int64_t n,
                                      uint64_t seed, int threads) {
    dist.validate();
    if (n < 2) throw input_error("GLD needs at least 2 samples");
    for (int32_t t : targets)
        if (t < 0 || t >= dist.vocab_size) throw input_error("target token out of range");
    const int k = dist.k();
    const size_t m = targets.size();
    const int64_t n_chunks = (n + kSampleGranule - 1) / kSampleGranule;

    struct Acc {
        std::vector<double> sum, sumsq;
    };
    std::vector<Acc> accs(n_chunks);

    parallel_chunks(n, kSampleGranule, threads, [&](int64_t chunk, int64_t begin, int64_t end) {
        Rng rng(derive_seed(seed, stream::gld, static_cast<uint64_t>(chunk)));
        auto& acc = accs[chunk];
        acc.sum.assign(m, 0.0);
        acc.sumsq.assign(m, 0.0);
        TokenBatch batch;
        Eigen::MatrixXd logits;
        int64_t remaining = end - begin;
        while (remaining > 0) {
            const int b = static_cast<int>(std::min<int64_t>(remaining, kForwardBatch));
            batch.resize(b, k);
            for (int s = 0; s < b; ++s) sample_into(dist, rng, batch.row(s));
            forward_batch(w, batch, &logits, nullptr);
            for (int s = 0; s < b; ++s) {
                // top-two scan so every target's max-other is O(1) afterwards
                int32_t best = 0;
                double best_v = logits(s, 0), second_v = -kInf;
                for (Eigen::Index j = 1; j < logits.cols(); ++j) {
                    const double v = logits(s, j);
                    if (v > best_v) {
                        second_v = best_v;
                        best_v = v;
                        best = static_cast<int32_t>(j);
                    } else if (v > second_v) {
                        second_v = v;
                    }
                }
                for (size_t ti = 0; ti < m; ++ti) {
                    const double max_other = targets[ti] == best ? second_v : best_v;
                    const double delta = logits(s, targets[ti]) - max_other;
                    acc.sum[ti] += delta;
                    acc.sumsq[ti] += delta * delta;
                }
            }
            remaining -= b;
        }
    });

    std::vector<GldStats> out(m);
    for (size_t ti = 0; ti < m; ++ti) {
        double sum = 0.0, sumsq = 0.0;
        for (const auto& acc : accs) {
            sum += acc.sum[ti];
            sumsq += acc.sumsq[ti];
        }
        const double mu = sum / static_cast<double>(n);
        const double var = std::max(0.0, sumsq / static_cast<double>(n) - mu * mu);
        out[ti].mu = mu;
        out[ti].sigma = std::sqrt(var);
    }
    return out;
}

GldStats gld_stats(const ModelWeights& w, const TokenDistribution& dist, int32_t t, int64_t n,
                   uint64_t seed, int threads) {
    return gld_stats_multi(w, dist, {t}, n, seed, threads)[0];
}

double gld_estimate(const GldStats& stats, const FitParams4& params) {
    const double denom = stats.sigma + params.eps;
    if (!(denom > 0.0)) throw input_error("sigma + eps must be > 0");
    const double r = params.a * stats.mu / denom;
    const double log_term = -r * r + params.b;
    return std::exp(log_term) + params.c;
}

EstimateRecord gld_record(const GldStats& stats, int32_t t, int64_t n) {
    EstimateRecord rec;
    rec.method = Method::gld;
    rec.target = t;
    rec.raw_estimate = stats.sigma > 0.0 ? normal_cdf(stats.mu / stats.sigma)
                                         : (stats.mu >= 0.0 ? 1.0 : 0.0);
    rec.model_calls_used = n;
    rec.diagnostics = {{"mu", stats.mu}, {"sigma", stats.sigma}, {"n_samples", n}};
    return rec;
}

}  // namespace lowprob
