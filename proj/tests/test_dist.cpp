#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "lowprob/dist.hpp"
#include "lowprob/rng.hpp"

using namespace lowprob;

TEST_CASE("point-mass distribution always yields the unique sequence") {
    TokenDistribution d = explicit_dist(4, {{0, 0, 1, 0}, {1, 0, 0, 0}});
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        TokenSeq x = sample(d, rng);
        CHECK(x == TokenSeq{2, 0});
    }
    CHECK(log_pmf(d, {2, 0}) == 0.0);
}

TEST_CASE("uniform sampling frequencies match within binomial bounds") {
    TokenDistribution d = uniform_dist(4, 1);
    Rng rng(17);
    const int n = 1000000;
    std::vector<int64_t> counts(4, 0);
    for (int i = 0; i < n; ++i) ++counts[sample(d, rng)[0]];
    for (int v = 0; v < 4; ++v) {
        CHECK(std::fabs(static_cast<double>(counts[v]) / n - 0.25) < 0.005);
    }
}

TEST_CASE("sampling is deterministic per seed") {
    TokenDistribution d = zipf_dist(16, 5, {}, 1.2);
    Rng a(42), b(42);
    for (int i = 0; i < 20; ++i) CHECK(sample(d, a) == sample(d, b));
}

TEST_CASE("log_pmf basics") {
    TokenDistribution d = uniform_dist(8, 3);
    CHECK(log_pmf(d, {0, 1, 2}) == doctest::Approx(std::log(1.0 / 512.0)).epsilon(1e-14));
    CHECK_THROWS_AS(log_pmf(d, {0, 1}), input_error);

    TokenDistribution sparse = explicit_dist(4, {{0.5, 0.5, 0.0, 0.0}});
    CHECK(std::isinf(log_pmf(sparse, {2})));
    CHECK(log_pmf(sparse, {2}) < 0);
}

TEST_CASE("tilting with zero scores returns p exactly") {
    // probabilities that sum to exactly 1.0 in floating point
    TokenDistribution d = explicit_dist(4, {{0.25, 0.25, 0.25, 0.25}, {0.5, 0.25, 0.25, 0.0}});
    Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(2, 4);
    TokenDistribution q = tilt_independent(d, scores, 1.7);
    for (int i = 0; i < 2; ++i)
        for (int v = 0; v < 4; ++v) CHECK(q.positions[i].probs[v] == d.positions[i].probs[v]);
}

TEST_CASE("tilt follows the Boltzmann weights") {
    TokenDistribution d = uniform_dist(2, 1);
    const double temperature = 2.5;
    Eigen::MatrixXd scores(1, 2);
    scores << 0.0, temperature * std::log(3.0);
    TokenDistribution q = tilt_independent(d, scores, temperature);
    CHECK(q.positions[0].probs[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(q.positions[0].probs[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("infinite-temperature tilt approaches p") {
    Rng rng(5);
    TokenDistribution d = zipf_dist(12, 3, {}, 1.3);
    Eigen::MatrixXd scores(3, 12);
    for (int i = 0; i < 3; ++i)
        for (int v = 0; v < 12; ++v) scores(i, v) = rng.gauss() * 5.0;
    TokenDistribution q = tilt_independent(d, scores, 1e12);
    double max_diff = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int v = 0; v < 12; ++v)
            max_diff = std::max(max_diff, std::fabs(q.positions[i].probs[v] - d.positions[i].probs[v]));
    CHECK(max_diff <= 1e-9);
}

TEST_CASE("tilting preserves support exactly and keeps normalization") {
    Rng rng(9);
    for (int rep = 0; rep < 25; ++rep) {
        const int vocab = 6;
        std::vector<std::vector<double>> probs(2, std::vector<double>(vocab, 0.0));
        for (auto& row : probs) {
            for (int v = 0; v < vocab; ++v)
                row[v] = rng.uniform() < 0.4 ? 0.0 : rng.uniform() + 0.01;
            if (std::accumulate(row.begin(), row.end(), 0.0) == 0.0) row[0] = 1.0;
        }
        TokenDistribution d = explicit_dist(vocab, probs);
        Eigen::MatrixXd scores(2, vocab);
        for (int i = 0; i < 2; ++i)
            for (int v = 0; v < vocab; ++v) scores(i, v) = 3.0 * rng.gauss();
        TokenDistribution q = tilt_independent(d, scores, 0.7);
        for (int i = 0; i < 2; ++i) {
            double sum = 0.0;
            for (int v = 0; v < vocab; ++v) {
                CHECK((q.positions[i].probs[v] == 0.0) == (d.positions[i].probs[v] == 0.0));
                sum += q.positions[i].probs[v];
            }
            CHECK(std::fabs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("tilted distribution maximizes score minus temperature-scaled KL") {
    // k=1, |V|=4 instance is enumerable: compare against a dense simplex grid.
    TokenDistribution d = explicit_dist(4, {{0.4, 0.3, 0.2, 0.1}});
    Eigen::MatrixXd scores(1, 4);
    scores << 0.3, -0.7, 1.1, 0.2;
    const double temperature = 0.9;
    TokenDistribution q = tilt_independent(d, scores, temperature);

    auto objective = [&](const std::vector<double>& cand) {
        double val = 0.0;
        for (int v = 0; v < 4; ++v) {
            if (cand[v] == 0.0) continue;
            val += cand[v] * scores(0, v) -
                   temperature * cand[v] * std::log(cand[v] / d.positions[0].probs[v]);
        }
        return val;
    };
    const double best = objective(q.positions[0].probs);

    const int res = 60;
    for (int a = 0; a <= res; ++a)
        for (int b = 0; b + a <= res; ++b)
            for (int c = 0; c + b + a <= res; ++c) {
                std::vector<double> cand = {static_cast<double>(a) / res,
                                            static_cast<double>(b) / res,
                                            static_cast<double>(c) / res,
                                            static_cast<double>(res - a - b - c) / res};
                CHECK(best >= objective(cand) - 1e-12);
            }
}

TEST_CASE("manifest round trip and generator families") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "lowprob_dist_test";
    fs::create_directories(dir);

    TokenDistribution d = zipf_dist(10, 4, {1, 3, 5, 7}, 1.5);
    const std::string path = (dir / "d.json").string();
    save_dist(d, path);
    TokenDistribution back = load_dist(path);
    CHECK(back.k() == 4);
    for (int i = 0; i < 4; ++i)
        for (int v = 0; v < 10; ++v)
            CHECK(back.positions[i].probs[v] == doctest::Approx(d.positions[i].probs[v]).epsilon(1e-15));

    // cycle form
    std::string cycle_json = R"({
      "vocab_size": 6, "k": 5,
      "cycle": [
        {"type": "uniform", "support": [0, 1, 2]},
        {"type": "weighted", "tokens": [3, 4], "weights": [3.0, 1.0]}
      ]
    })";
    TokenDistribution cyc = dist_from_json(cycle_json);
    CHECK(cyc.k() == 5);
    CHECK(cyc.positions[0].probs[0] == doctest::Approx(1.0 / 3));
    CHECK(cyc.positions[1].probs[3] == doctest::Approx(0.75));
    CHECK(cyc.positions[2].probs[1] == doctest::Approx(1.0 / 3));
    CHECK(cyc.positions[3].probs[4] == doctest::Approx(0.25));

    CHECK_THROWS_AS(dist_from_json("{\"vocab_size\": 4}"), input_error);
    CHECK_THROWS_AS(dist_from_json("not json"), input_error);
    fs::remove_all(dir);
}

TEST_CASE("support space saturates at the cap") {
    TokenDistribution d = uniform_dist(16, 8);
    CHECK(d.support_space(1 << 20) == (1 << 20) + 1);
    TokenDistribution small = uniform_dist(4, 3);
    CHECK(small.support_space() == 64);
}
