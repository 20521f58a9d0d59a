#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "lowprob/estimators.hpp"
#include "lowprob/groundtruth.hpp"
#include "support/oracles.hpp"

using namespace lowprob;

namespace {

ModelSpec small_spec(int layers, int vocab, int k, int d = 16) {
    ModelSpec s;
    s.n_layers = layers;
    s.d_model = d;
    s.n_heads = 2;
    s.d_mlp = 2 * d;
    s.vocab_size = vocab;
    s.max_seq_len = k;
    return s;
}

// Target logit identically zero (unembed column zeroed): the gradient of the
// target logit vanishes bit-exactly while other logits still vary.
ModelWeights zero_gradient_model(int vocab, int k, int32_t t, uint64_t seed) {
    ModelWeights w = random_weights(small_spec(1, vocab, k), seed);
    w.unembed.col(t).setZero();
    return w;
}

// Naive Monte Carlo replica of the ITGIS sampling streams: batch j draws from
// the untilted distribution with Rng(derive_seed(seed, stream::itgis, j)).
double naive_mc_like_itgis(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                           const EstimatorBudget& budget, uint64_t seed) {
    double est_sum = 0.0;
    for (int j = 0; j < budget.itgis_batches; ++j) {
        Rng rng(derive_seed(seed, stream::itgis, static_cast<uint64_t>(j)));
        double batch = 0.0;
        for (int b = 0; b < budget.itgis_batch_size; ++b) {
            TokenSeq x = sample(dist, rng);
            batch += argmax_token(forward_logits(w, x)) == t ? 1.0 : 0.0;
        }
        est_sum += batch / budget.itgis_batch_size;
    }
    return est_sum / budget.itgis_batches;
}

WhiteningTransform identity_transform(int d) {
    WhiteningTransform tr;
    tr.mu = Eigen::VectorXd::Zero(d);
    tr.a = Eigen::MatrixXd::Identity(d, d);
    tr.eps = 0.0;
    return tr;
}

}  // namespace

// ---------------------------------------------------------------- whitening

TEST_CASE("whitening a two-point 1-d sample set") {
    Eigen::MatrixXd samples(2, 1);
    samples << 1.0, 3.0;
    WhitenResult r = whiten(samples);
    CHECK(r.transform.mu[0] == doctest::Approx(2.0));
    // population variance of {1,3} is 1; A = sqrt(1 + eps)
    CHECK(r.transform.a(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(r.whitened(0, 0) == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(r.whitened(1, 0) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("whitening near-standard-normal data is near identity") {
    Rng rng(12);
    Eigen::MatrixXd samples(10000, 8);
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
        for (Eigen::Index j = 0; j < 8; ++j) samples(i, j) = rng.gauss();
    WhitenResult r = whiten(samples);
    CHECK((r.transform.a - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() <= 0.1);
}

TEST_CASE("whitening identities hold exactly up to eps") {
    Rng rng(77);
    const int n = 2048, d = 16;
    Eigen::MatrixXd samples(n, d);
    Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) mix(i, j) = rng.gauss() * 0.4;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd g(d);
        for (int j = 0; j < d; ++j) g[j] = rng.gauss();
        samples.row(i) = (mix * g).transpose();
        samples(i, 0) += 3.0;
    }
    WhitenResult r = whiten(samples);
    // factorization: A A^T == Sigma + eps I (relative, entrywise)
    Eigen::MatrixXd centered = samples.rowwise() - r.transform.mu.transpose();
    Eigen::MatrixXd sigma = centered.adjoint() * centered / n;
    sigma.diagonal().array() += r.transform.eps;
    Eigen::MatrixXd aat = r.transform.a * r.transform.a.transpose();
    CHECK((aat - sigma).cwiseAbs().maxCoeff() / sigma.cwiseAbs().maxCoeff() <= 1e-8);
    // whitened mean ~ 0
    CHECK(r.whitened.colwise().mean().cwiseAbs().maxCoeff() <= 1e-9);
    // whitened covariance + eps (A A^T)^-1 == identity
    Eigen::MatrixXd cov = r.whitened.adjoint() * r.whitened / n;
    Eigen::MatrixXd correction =
        r.transform.eps * (r.transform.a.transpose() * r.transform.a).inverse();
    CHECK((cov + correction - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("whitening survives duplicate (rank-deficient) sample sets") {
    Eigen::MatrixXd samples(5, 3);
    for (int i = 0; i < 5; ++i) samples.row(i) << 1.0, -2.0, 0.5;
    WhitenResult r = whiten(samples);
    CHECK(r.whitened.allFinite());
    CHECK(r.whitened.cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS_AS(whiten(samples.topRows(1)), input_error);
}

// ------------------------------------------------------ acceptance interval

TEST_CASE("acceptance interval with a single competitor") {
    WhiteningTransform tr = identity_transform(2);
    Eigen::MatrixXd w_u(2, 2);
    w_u.col(0) << 1.0, -2.0;  // target
    w_u.col(1) << 0.0, 0.0;
    Eigen::VectorXd dir(2), b(2);
    dir << 1.0, 0.0;
    b << 0.0, 1.0;
    AcceptanceInterval iv = acceptance_interval(b, dir, tr, w_u, 0);
    REQUIRE(!iv.empty);
    CHECK(iv.lo == doctest::Approx(2.0));
    CHECK(std::isinf(iv.hi));
}

TEST_CASE("contradictory competitors give an empty interval") {
    WhiteningTransform tr = identity_transform(2);
    Eigen::MatrixXd w_u(2, 3);
    w_u.col(0) << 0.0, 0.0;    // target
    w_u.col(1) << -1.0, 1.0;   // forces alpha >= 1
    w_u.col(2) << 1.0, 1.0;    // forces alpha <= -1
    Eigen::VectorXd dir(2), b(2);
    dir << 1.0, 0.0;
    b << 0.0, 1.0;
    AcceptanceInterval iv = acceptance_interval(b, dir, tr, w_u, 0);
    CHECK(iv.empty);
}

TEST_CASE("interval membership agrees with direct argmax along the line") {
    Rng rng(21);
    for (int rep = 0; rep < 5; ++rep) {
        const int d = 6, vocab = 8;
        Eigen::MatrixXd spd(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) spd(i, j) = rng.gauss() * 0.3;
        Eigen::MatrixXd sigma = spd * spd.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
        WhiteningTransform tr;
        tr.a = Eigen::LLT<Eigen::MatrixXd>(sigma).matrixL();
        tr.mu = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) { return rng.gauss(); });
        tr.eps = 0.0;
        Eigen::MatrixXd w_u(d, vocab);
        for (int i = 0; i < d; ++i)
            for (int c = 0; c < vocab; ++c) w_u(i, c) = rng.gauss();
        Eigen::VectorXd dir(d), b(d);
        for (int i = 0; i < d; ++i) {
            dir[i] = rng.gauss();
            b[i] = rng.gauss();
        }
        dir.normalize();
        const int32_t t = static_cast<int32_t>(rng.below(vocab));
        AcceptanceInterval iv = acceptance_interval(b, dir, tr, w_u, t);
        for (int g = 0; g < 1000; ++g) {
            const double alpha = -10.0 + 20.0 * g / 999.0;
            Eigen::VectorXd u = alpha * dir + b;
            const bool in_interval = !iv.empty && alpha >= iv.lo && alpha <= iv.hi;
            Eigen::VectorXd logits = w_u.transpose() * (tr.a * u + tr.mu);
            CHECK(in_interval == (argmax_token(logits) == t));
        }
    }
}

// --------------------------------------------------- shortest accepting vector

TEST_CASE("random constraint projection: origin already accepting") {
    oracles::Wedge2d inst;
    inst.tr = identity_transform(2);
    inst.tr.mu = Eigen::VectorXd::Zero(2);
    inst.tr.mu << 1.0, 0.5;
    inst.w_u.resize(2, 3);
    inst.w_u << 1.0, -1.0, 0.0, 0.5, -0.5, -1.0;
    Eigen::VectorXd origin = Eigen::VectorXd::Zero(2);
    Eigen::VectorXd logits = inst.w_u.transpose() * inst.tr.mu;
    inst.t = argmax_token(logits);
    REQUIRE(accepting_member(inst.tr, inst.w_u, inst.t, origin, 1e-6));
    RcpResult r = try_shortest_accepting_vector(inst.tr, inst.w_u, inst.t, {}, 1);
    CHECK(r.found);
    CHECK(r.point.norm() <= 1e-6);
    CHECK(r.degenerate);
}

TEST_CASE("random constraint projection matches the 2-d angular oracle") {
    // tight angular accuracy needs a longer shrink phase than the QLD default
    RcpOptions opt;
    opt.n_reps = 2000;
    int done = 0;
    for (uint64_t seed = 1; done < 6; ++seed) {
        oracles::Wedge2d inst = oracles::make_2d_instance(seed);
        Eigen::VectorXd oracle = oracles::grid_shortest_direction(inst);
        RcpResult r = shortest_accepting_vector(inst.tr, inst.w_u, inst.t, opt, seed);
        const double cosine = std::clamp(r.direction.dot(oracle), -1.0, 1.0);
        const double angle_deg = std::acos(cosine) * 180.0 / 3.14159265358979323846;
        CHECK(angle_deg <= 2.0);
        ++done;
    }
}

TEST_CASE("projection result is member and ray-minimal on random instances") {
    Rng rng(66);
    int done = 0;
    for (uint64_t seed = 100; done < 6; ++seed) {
        const int d = 32, vocab = 24;
        Rng gen(seed);
        WhiteningTransform tr = identity_transform(d);
        for (int i = 0; i < d; ++i) tr.mu[i] = 0.3 * gen.gauss();
        Eigen::MatrixXd w_u(d, vocab);
        for (int i = 0; i < d; ++i)
            for (int c = 0; c < vocab; ++c) w_u(i, c) = gen.gauss();
        Eigen::VectorXd logits_at_origin = w_u.transpose() * tr.mu;
        const int32_t t = (argmax_token(logits_at_origin) + 1) % vocab;  // not the argmax
        RcpOptions opt;
        RcpResult r = try_shortest_accepting_vector(tr, w_u, t, opt, seed);
        if (!r.found) continue;
        CHECK(accepting_member(tr, w_u, t, r.point, opt.tol));
        CHECK(!accepting_member(tr, w_u, t, Eigen::VectorXd(0.99 * r.point), opt.tol));
        ++done;
    }
}

// ---------------------------------------------------------------------- QLD

TEST_CASE("fast pair count equals brute force") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        ModelSpec spec = small_spec(1, 8 + 4 * (seed % 3), 4, 8);
        ModelWeights w = random_weights(spec, 500 + seed);
        TokenDistribution d = zipf_dist(spec.vocab_size, 4, {}, 0.8);
        const int n = seed % 2 == 0 ? 64 : 128;
        QldShared shared = qld_collect(w, d, n, seed);
        const int32_t t = static_cast<int32_t>(rng.below(spec.vocab_size));

        Eigen::VectorXd dir;
        RcpResult r = try_shortest_accepting_vector(shared.white.transform, w.unembed, t, {}, seed);
        if (r.found && !r.degenerate) {
            dir = r.direction;
        } else {
            dir.resize(spec.d_model);
            for (int i = 0; i < spec.d_model; ++i) dir[i] = rng.gauss();
            dir.normalize();
        }
        const int64_t fast = qld_pair_count(shared.white.transform, shared.white.whitened, dir,
                                            w.unembed, t);
        const int64_t brute = oracles::brute_force_pair_count(shared.white.transform,
                                                              shared.white.whitened, dir,
                                                              w.unembed, t);
        CHECK(fast == brute);
    }
}

TEST_CASE("qld diagonal pairs equal the naive estimate on the same samples") {
    ModelSpec spec = small_spec(1, 8, 4);
    ModelWeights w = random_weights(spec, 71);
    TokenDistribution d = uniform_dist(8, 4);
    const int64_t n = 512;
    const uint64_t seed = 9;
    QldShared shared = qld_collect(w, d, n, seed);
    const int32_t t = 3;
    EstimateRecord rec = qld_from_shared(shared, w, t, seed);

    // redraw the identical sample stream and count argmax hits directly
    Rng rng(derive_seed(seed, stream::qld, 0));
    int64_t hits = 0;
    for (int64_t i = 0; i < n; ++i) {
        TokenSeq x = sample(d, rng);
        hits += argmax_token(forward_logits(w, x)) == t;
    }
    CHECK(rec.diagnostics.at("diagonal_hits").get<int64_t>() == hits);
}

TEST_CASE("qld returns zero when the acceptance region is empty") {
    ModelSpec spec = small_spec(1, 8, 3);
    ModelWeights w = random_weights(spec, 44);
    w.unembed.col(5) = w.unembed.col(0);  // exact tie, id 0 wins: token 5 never argmax
    TokenDistribution d = uniform_dist(8, 3);
    EstimateRecord rec = qld(w, d, 5, 256, 3);
    CHECK(rec.raw_estimate == 0.0);
}

TEST_CASE("qld estimate sits between 0 and 1 with sane diagnostics") {
    ModelSpec spec = small_spec(1, 12, 4);
    ModelWeights w = random_weights(spec, 90);
    TokenDistribution d = zipf_dist(12, 4, {}, 1.0);
    EstimateRecord rec = qld(w, d, 2, 1024, 17);
    CHECK(rec.raw_estimate >= 0.0);
    CHECK(rec.raw_estimate <= 1.0);
    CHECK(rec.model_calls_used == 1024);
    CHECK(rec.diagnostics.contains("diagonal_hits"));
}

// ---------------------------------------------------------------------- GLD

TEST_CASE("gld stats on a constant-activation model") {
    ModelSpec spec = small_spec(1, 6, 3);
    ModelWeights w = random_weights(spec, 2);
    w.ln_f_w.setZero();  // final norm output becomes the constant bias
    Rng rng(5);
    for (int i = 0; i < spec.d_model; ++i) w.ln_f_b[i] = rng.gauss();
    Eigen::VectorXd logits = w.unembed.transpose() * w.ln_f_b;
    const int32_t t = 4;
    double max_other = -1e300;
    for (int c = 0; c < 6; ++c)
        if (c != t) max_other = std::max(max_other, logits[c]);
    TokenDistribution d = uniform_dist(6, 3);
    GldStats s = gld_stats(w, d, t, 256, 11);
    CHECK(s.sigma == 0.0);
    CHECK(s.mu == doctest::Approx(logits[t] - max_other).epsilon(1e-12));
}

TEST_CASE("gld stats recover synthetic gaussian parameters") {
    Rng rng(31);
    std::vector<double> deltas(100000);
    for (auto& v : deltas) v = -5.0 + 2.0 * rng.gauss();
    GldStats s = gld_stats_from_deltas(deltas);
    CHECK(std::fabs(s.mu + 5.0) <= 0.03);
    CHECK(std::fabs(s.sigma - 2.0) <= 0.02);
}

TEST_CASE("delta sign characterizes the argmax event") {
    ModelSpec spec = small_spec(1, 8, 3);
    ModelWeights w = random_weights(spec, 123);
    TokenDistribution d = uniform_dist(8, 3);
    Rng rng(9);
    const int32_t t = 2;
    for (int i = 0; i < 1000; ++i) {
        TokenSeq x = sample(d, rng);
        Eigen::VectorXd logits = forward_logits(w, x);
        double max_other = -1e300;
        for (int c = 0; c < 8; ++c)
            if (c != t) max_other = std::max(max_other, logits[c]);
        const double delta = logits[t] - max_other;
        const bool hit = argmax_token(logits) == t;
        if (delta > 0.0) CHECK(hit);
        if (!hit) CHECK(delta <= 0.0);
    }
}

TEST_CASE("gld functional form evaluation") {
    CHECK(gld_estimate({-10.0, 1.0}, {1.0, 0.0, 0.0, 0.0}) ==
          doctest::Approx(std::exp(-100.0)).epsilon(1e-12));
    // additive floor
    CHECK(gld_estimate({-100.0, 1.0}, {1.0, 0.0, 0.5, 0.0}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(gld_estimate({1.0, 0.0}, {1.0, 0.0, 0.0, 0.0}), input_error);
}

// -------------------------------------------------------------------- ITGIS

TEST_CASE("itgis defaults") {
    CHECK(ItgisOptions{}.alpha == 0.9);
    EstimatorBudget b = EstimatorBudget::from_total(4096);
    CHECK(b.itgis_batches == 64);
    CHECK(b.itgis_batch_size == 64);
    CHECK(b.mhis_chains == 32);
    CHECK(b.mhis_burn == 64);
    CHECK(b.mhis_kept == 128);
}

TEST_CASE("itgis reduces to naive monte carlo when the target gradient vanishes") {
    const int32_t t = 0;
    ModelWeights w = zero_gradient_model(4, 4, t, 603);
    TokenDistribution d = zipf_dist(4, 4, {}, 0.7);
    const double exact = exhaustive_probability(w, d, t);
    REQUIRE(exact > 0.001);
    REQUIRE(exact < 0.999);

    EstimatorBudget budget = EstimatorBudget::from_total(256);
    std::vector<double> estimates;
    for (uint64_t seed = 0; seed < 64; ++seed) {
        EstimateRecord rec = itgis(w, d, t, budget, seed);
        const double naive = naive_mc_like_itgis(w, d, t, budget, seed);
        CHECK(rec.raw_estimate == doctest::Approx(naive).epsilon(1e-12));
        estimates.push_back(rec.raw_estimate);
    }
    const double err = std::fabs(oracles::mean(estimates) - exact);
    CHECK(err <= 3.0 * oracles::standard_error(estimates));
}

TEST_CASE("itgis at near-infinite temperature matches naive monte carlo per seed") {
    ModelSpec spec = small_spec(1, 8, 4);
    ModelWeights w = random_weights(spec, 15);
    TokenDistribution d = uniform_dist(8, 4);
    EstimatorBudget budget = EstimatorBudget::from_total(256);
    ItgisOptions opt;
    opt.temperature = 1e12;
    for (uint64_t seed = 1; seed <= 8; ++seed) {
        EstimateRecord rec = itgis(w, d, 2, budget, seed, opt);
        const double naive = naive_mc_like_itgis(w, d, 2, budget, seed);
        CHECK(std::fabs(rec.raw_estimate - naive) <= 1e-6);
    }
}

TEST_CASE("itgis importance weights stay finite across tilted batches") {
    ModelSpec spec = small_spec(1, 6, 3);
    ModelWeights w = random_weights(spec, 81);
    TokenDistribution d = zipf_dist(6, 3, {}, 1.4);
    EstimatorBudget budget = EstimatorBudget::from_total(512);
    ItgisOptions opt;
    opt.temperature = 0.5;  // aggressive tilt
    EstimateRecord rec = itgis(w, d, 1, budget, 3, opt);
    CHECK(std::isfinite(rec.raw_estimate));
    CHECK(rec.raw_estimate >= 0.0);
    CHECK(rec.model_calls_used == 512);
}

// --------------------------------------------------------------------- MHIS

TEST_CASE("mhis proposal equals the base distribution when the gradient vanishes") {
    const int32_t t = 1;
    ModelWeights w = zero_gradient_model(2, 1, t, 700);
    TokenDistribution d = explicit_dist(2, {{0.5, 0.5}});
    PositionDist prop = mhis_proposal_dist(w, d, t, {0}, 0, 1.0);
    CHECK(prop.probs[0] == 0.5);
    CHECK(prop.probs[1] == 0.5);

    Rng rng(10);
    int64_t count1 = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        MhisProposal p = mhis_proposal(w, d, t, {0}, 1.0, rng);
        count1 += p.next[0] == 1;
    }
    CHECK(std::fabs(count1 / static_cast<double>(n) - 0.5) <= 4.0 * std::sqrt(0.25 / n));
}

TEST_CASE("self-proposals carry symmetric weights") {
    ModelSpec spec = small_spec(1, 4, 2);
    ModelWeights w = random_weights(spec, 8);
    TokenDistribution d = explicit_dist(4, {{0, 1.0, 0, 0}, {0, 0, 1.0, 0}});  // point mass
    Rng rng(2);
    MhisProposal p = mhis_proposal(w, d, 0, {1, 2}, 1.0, rng);
    CHECK(p.next == TokenSeq{1, 2});
    CHECK(p.forward_logweight == p.reverse_logweight);
    CHECK(mh_acceptance_ratio(w, d, 0, 1.0, {1, 2}, p.next, p.forward_logweight,
                              p.reverse_logweight) == doctest::Approx(1.0));
}

TEST_CASE("strongly dominant gradient makes the replacement near-certain") {
    TokenDistribution d = uniform_dist(2, 1);
    const double temperature = 2.0;
    std::vector<double> scores = {0.0, 50.0 * temperature};
    PositionDist q = tilt_position(d.positions[0], scores.data(), temperature);
    CHECK(q.probs[0] <= 1e-20);
    CHECK(q.probs[1] >= 1.0 - 1e-20);
}

TEST_CASE("acceptance ratio is 1 for token swaps between identical embeddings") {
    ModelSpec spec = small_spec(1, 4, 2);
    ModelWeights w = random_weights(spec, 5);
    w.token_embedding.row(2) = w.token_embedding.row(1);
    TokenDistribution d = uniform_dist(4, 2);
    TokenSeq x = {1, 3}, x2 = {2, 3};
    PositionDist fwd = mhis_proposal_dist(w, d, 0, x, 0, 1.0);
    PositionDist rev = mhis_proposal_dist(w, d, 0, x2, 0, 1.0);
    const double r = mh_acceptance_ratio(w, d, 0, 1.0, x, x2, std::log(fwd.probs[2]),
                                         std::log(rev.probs[1]));
    CHECK(r == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("detailed balance holds on a fully enumerable chain") {
    ModelSpec spec = small_spec(1, 4, 1);
    ModelWeights w = random_weights(spec, 19);
    TokenDistribution d = explicit_dist(4, {{0.4, 0.3, 0.2, 0.1}});
    const int32_t t = 2;
    const double temperature = 0.8;

    // unnormalized q(x) = p(x) exp(M_t(x)/T); single-position proposals
    auto q_un = [&](int32_t x) {
        return d.positions[0].probs[x] *
               std::exp(forward_logits(w, {x})[t] / temperature);
    };
    for (int32_t a = 0; a < 4; ++a) {
        PositionDist prop_a = mhis_proposal_dist(w, d, t, {a}, 0, temperature);
        for (int32_t b = 0; b < 4; ++b) {
            if (a == b) continue;
            PositionDist prop_b = mhis_proposal_dist(w, d, t, {b}, 0, temperature);
            const double r_ab = mh_acceptance_ratio(w, d, t, temperature, {a}, {b},
                                                    std::log(prop_a.probs[b]),
                                                    std::log(prop_b.probs[a]));
            const double r_ba = mh_acceptance_ratio(w, d, t, temperature, {b}, {a},
                                                    std::log(prop_b.probs[a]),
                                                    std::log(prop_a.probs[b]));
            const double flow_ab = q_un(a) * prop_a.probs[b] * std::min(1.0, r_ab);
            const double flow_ba = q_un(b) * prop_b.probs[a] * std::min(1.0, r_ba);
            CHECK(flow_ab == doctest::Approx(flow_ba).epsilon(1e-10));
        }
    }
}

TEST_CASE("mhis chain empirical distribution approaches exact q") {
    ModelSpec spec = small_spec(1, 4, 2);
    ModelWeights w = random_weights(spec, 23);
    TokenDistribution d = uniform_dist(4, 2);
    const int32_t t = 1;
    const double temperature = 1.0;

    // exact q by enumeration over the 16 states
    std::vector<lowprob::TokenSeq> states = oracles::enumerate_support(d);
    std::vector<double> q_exact(states.size());
    double z = 0.0;
    for (size_t i = 0; i < states.size(); ++i) {
        q_exact[i] = std::exp(log_pmf(d, states[i]) +
                              forward_logits(w, states[i])[t] / temperature);
        z += q_exact[i];
    }
    for (auto& v : q_exact) v /= z;

    const int kept = 1 << 13;
    std::vector<TokenSeq> samples = mhis_chain_samples(w, d, t, temperature, 1 << 10, kept, 5);
    std::vector<double> freq(states.size(), 0.0);
    for (const auto& x : samples) {
        const size_t idx = static_cast<size_t>(x[0]) * 4 + x[1];
        freq[idx] += 1.0 / kept;
    }
    CHECK(oracles::total_variation(freq, q_exact) <= 0.08);
}

TEST_CASE("mhis matches naive monte carlo at near-infinite temperature") {
    ModelSpec spec = small_spec(1, 6, 3);
    ModelWeights w = random_weights(spec, 29);
    TokenDistribution d = uniform_dist(6, 3);
    const int32_t t = 2;
    const double exact = exhaustive_probability(w, d, t);
    REQUIRE(exact > 0.01);

    EstimatorBudget budget = EstimatorBudget::from_total(512);
    MhisOptions opt;
    opt.temperature = 1e12;
    std::vector<double> estimates;
    for (uint64_t seed = 0; seed < 32; ++seed)
        estimates.push_back(mhis(w, d, t, budget, seed, opt).raw_estimate);
    const double err = std::fabs(oracles::mean(estimates) - exact);
    CHECK(err <= 3.5 * oracles::standard_error(estimates));
}

TEST_CASE("normalization identity: both sides agree on an enumerable instance") {
    ModelSpec spec = small_spec(1, 6, 3);
    ModelWeights w = random_weights(spec, 37);
    TokenDistribution d = uniform_dist(6, 3);
    const int32_t t = 2;
    const double temperature = 1.0;

    double lhs = 0.0;  // E_p[exp(M_t/T)] by enumeration
    for (const auto& x : oracles::enumerate_support(d))
        lhs += std::exp(log_pmf(d, x)) * std::exp(forward_logits(w, x)[t] / temperature);

    EstimatorBudget budget = EstimatorBudget::from_total(1 << 13);
    MhisOptions opt;
    opt.temperature = temperature;
    EstimateRecord rec = mhis(w, d, t, budget, 3, opt);
    const double rhs = std::exp(rec.diagnostics.at("log_z").get<double>());
    CHECK(std::fabs(rhs - lhs) / lhs <= 0.05);
}

TEST_CASE("importance sampling methods are unbiased on an enumerable instance") {
    ModelSpec spec = small_spec(1, 6, 3);
    ModelWeights w = random_weights(spec, 53);
    TokenDistribution d = zipf_dist(6, 3, {}, 0.5);
    std::vector<double> exact = exhaustive_distribution(w, d);
    // a target with non-extreme probability
    int32_t t = 0;
    for (int32_t v = 0; v < 6; ++v)
        if (exact[v] > 0.005 && exact[v] < 0.3) t = v;
    REQUIRE(exact[t] > 0.005);

    EstimatorBudget budget = EstimatorBudget::from_total(512);
    std::vector<double> its, mhs;
    for (uint64_t seed = 0; seed < 32; ++seed) {
        its.push_back(itgis(w, d, t, budget, seed).raw_estimate);
        mhs.push_back(mhis(w, d, t, budget, seed).raw_estimate);
    }
    CHECK(std::fabs(oracles::mean(its) - exact[t]) <= 3.5 * oracles::standard_error(its));
    CHECK(std::fabs(oracles::mean(mhs) - exact[t]) <= 3.5 * oracles::standard_error(mhs));
}

TEST_CASE("importance weights are finite for every sample drawn from a tilt") {
    ModelSpec spec = small_spec(1, 6, 2);
    ModelWeights w = random_weights(spec, 61);
    TokenDistribution d = zipf_dist(6, 2, {0, 1, 2, 3}, 1.2);
    Eigen::MatrixXd scores = grad_target_logit(w, {0, 1}, 3);
    TokenDistribution q = tilt_independent(d, scores, 0.3);
    Rng rng(14);
    for (int i = 0; i < 100; ++i) {
        TokenSeq x = sample(q, rng);
        const double weight = std::exp(log_pmf(d, x) - log_pmf(q, x));
        CHECK(std::isfinite(weight));
        CHECK(weight > 0.0);
    }
}

// ------------------------------------------------ synthetic pair-count gain

TEST_CASE("pair counting gets signal where naive sampling gets zeros") {
    // a, b standard normal; event a + b > 4*sqrt(2); p = Phi(-4). The pair
    // count is unbiased and positive where the diagonal (naive) count is 0.
    const double threshold = 4.0 * std::sqrt(2.0);
    const double p_true = oracles::reference_phi(-4.0);
    const int n = 2048;
    int positive = 0, naive_zero = 0;
    const uint64_t n_seeds = 10;
    std::vector<double> estimates;
    for (uint64_t seed = 0; seed < n_seeds; ++seed) {
        Rng rng(derive_seed(seed, stream::synthetic));
        std::vector<double> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            a[i] = rng.gauss();
            b[i] = rng.gauss();
        }
        int64_t diag = 0;
        for (int i = 0; i < n; ++i) diag += a[i] + b[i] > threshold;
        std::vector<double> sorted_a = a;
        std::sort(sorted_a.begin(), sorted_a.end());
        int64_t pairs = 0;
        for (int j = 0; j < n; ++j) {
            const double lo = threshold - b[j];
            pairs += sorted_a.end() - std::upper_bound(sorted_a.begin(), sorted_a.end(), lo);
        }
        const double est = static_cast<double>(pairs) / (static_cast<double>(n) * n);
        estimates.push_back(est);
        positive += est > 0;
        naive_zero += diag == 0;
    }
    CHECK(positive == 10);
    CHECK(naive_zero >= 8);
    // pooled mean close to the true tail probability
    CHECK(std::fabs(oracles::mean(estimates) - p_true) <=
          3.5 * oracles::standard_error(estimates) + 0.05 * p_true);
}
