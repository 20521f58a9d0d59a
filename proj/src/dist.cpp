#include "lowprob/dist.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace lowprob {

void PositionDist::finalize(int vocab_size) {
    if (static_cast<int>(probs.size()) != vocab_size)
        throw input_error("position distribution has wrong vocab size");
    double sum = 0.0;
    for (double p : probs) {
        if (!std::isfinite(p) || p < 0.0) throw input_error("probabilities must be finite and >= 0");
        sum += p;
    }
    if (sum <= 0.0) throw input_error("position distribution has zero total mass");
    support.clear();
    cdf.clear();
    double acc = 0.0;
    for (int32_t v = 0; v < vocab_size; ++v) {
        probs[v] /= sum;
        if (probs[v] > 0.0) {
            acc += probs[v];
            support.push_back(v);
            cdf.push_back(acc);
        }
    }
    cdf.back() = 1.0;  // guard inverse-CDF sampling against rounding
}

void TokenDistribution::validate() const {
    if (vocab_size < 2) throw input_error("vocab_size must be >= 2");
    if (positions.empty()) throw input_error("distribution must have k >= 1");
    for (const auto& p : positions) {
        if (static_cast<int>(p.probs.size()) != vocab_size || p.support.empty() ||
            p.support.size() != p.cdf.size())
            throw input_error("position distribution not finalized");
        double sum = 0.0;
        for (double v : p.probs) sum += v;
        if (std::abs(sum - 1.0) > 1e-12) throw input_error("position probabilities must sum to 1");
    }
}

int64_t TokenDistribution::support_space(int64_t cap_hint) const {
    int64_t total = 1;
    for (const auto& p : positions) {
        total *= static_cast<int64_t>(p.support.size());
        if (total > cap_hint) return cap_hint + 1;
    }
    return total;
}

int32_t sample_position(const PositionDist& p, Rng& rng) {
    const double u = rng.uniform();
    auto it = std::upper_bound(p.cdf.begin(), p.cdf.end(), u);
    size_t idx = static_cast<size_t>(it - p.cdf.begin());
    if (idx >= p.support.size()) idx = p.support.size() - 1;
    return p.support[idx];
}

TokenSeq sample(const TokenDistribution& dist, Rng& rng) {
    TokenSeq x(dist.positions.size());
    sample_into(dist, rng, x.data());
    return x;
}

void sample_into(const TokenDistribution& dist, Rng& rng, int32_t* out) {
    for (size_t i = 0; i < dist.positions.size(); ++i) out[i] = sample_position(dist.positions[i], rng);
}

double log_pmf(const TokenDistribution& dist, const TokenSeq& x) {
    if (x.size() != dist.positions.size()) throw input_error("sequence length != k");
    double total = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double p = dist.positions[i].probs[x[i]];
        if (p == 0.0) return -std::numeric_limits<double>::infinity();
        total += std::log(p);
    }
    return total;
}

PositionDist tilt_position(const PositionDist& p, const double* scores_row, double temperature) {
    PositionDist q;
    q.probs.assign(p.probs.size(), 0.0);
    double max_e = -std::numeric_limits<double>::infinity();
    for (int32_t v : p.support) {
        if (!std::isfinite(scores_row[v])) throw numeric_error("non-finite tilt score");
        max_e = std::max(max_e, scores_row[v] / temperature);
    }
    for (int32_t v : p.support) {
        q.probs[v] = p.probs[v] * std::exp(scores_row[v] / temperature - max_e);
    }
    q.finalize(static_cast<int>(p.probs.size()));
    return q;
}

TokenDistribution tilt_independent(const TokenDistribution& dist, const Eigen::MatrixXd& scores,
                                   double temperature) {
    if (!(temperature > 0.0)) throw input_error("temperature must be > 0");
    if (scores.rows() != dist.k() || scores.cols() != dist.vocab_size)
        throw input_error("score table shape mismatch");
    TokenDistribution q;
    q.vocab_size = dist.vocab_size;
    q.positions.reserve(dist.positions.size());
    std::vector<double> row(dist.vocab_size);
    for (int i = 0; i < dist.k(); ++i) {
        for (int v = 0; v < dist.vocab_size; ++v) row[v] = scores(i, v);
        q.positions.push_back(tilt_position(dist.positions[i], row.data(), temperature));
    }
    return q;
}

// ---- construction ----

namespace {

TokenDistribution from_position_probs(int vocab_size, std::vector<std::vector<double>> probs) {
    TokenDistribution d;
    d.vocab_size = vocab_size;
    d.positions.resize(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) {
        d.positions[i].probs = std::move(probs[i]);
        d.positions[i].finalize(vocab_size);
    }
    d.validate();
    return d;
}

std::vector<double> uniform_probs(int vocab_size, const std::vector<int32_t>& support) {
    std::vector<double> p(vocab_size, 0.0);
    if (support.empty()) {
        std::fill(p.begin(), p.end(), 1.0);
    } else {
        for (int32_t v : support) {
            if (v < 0 || v >= vocab_size) throw input_error("support token out of range");
            p[v] = 1.0;
        }
    }
    return p;
}

}  // namespace

TokenDistribution uniform_dist(int vocab_size, int k, const std::vector<int32_t>& support) {
    if (k < 1) throw input_error("k must be >= 1");
    std::vector<std::vector<double>> probs(k, uniform_probs(vocab_size, support));
    return from_position_probs(vocab_size, std::move(probs));
}

TokenDistribution explicit_dist(int vocab_size, const std::vector<std::vector<double>>& probs) {
    return from_position_probs(vocab_size, probs);
}

TokenDistribution zipf_dist(int vocab_size, int k, const std::vector<int32_t>& support,
                            double exponent, double shift) {
    if (k < 1) throw input_error("k must be >= 1");
    std::vector<int32_t> ids = support;
    if (ids.empty()) {
        ids.resize(vocab_size);
        for (int32_t v = 0; v < vocab_size; ++v) ids[v] = v;
    }
    std::vector<double> p(vocab_size, 0.0);
    for (size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= vocab_size) throw input_error("support token out of range");
        p[ids[r]] = std::pow(static_cast<double>(r) + shift, -exponent);
    }
    std::vector<std::vector<double>> probs(k, p);
    return from_position_probs(vocab_size, std::move(probs));
}

// ---- manifest ----

namespace {

std::vector<double> position_probs_from_json(const nlohmann::json& spec, int vocab_size) {
    const std::string type = spec.at("type").get<std::string>();
    if (type == "explicit") {
        auto probs = spec.at("probs").get<std::vector<double>>();
        if (static_cast<int>(probs.size()) != vocab_size)
            throw input_error("explicit probs length != vocab_size");
        return probs;
    }
    if (type == "uniform") {
        std::vector<int32_t> support;
        if (spec.contains("support")) support = spec.at("support").get<std::vector<int32_t>>();
        return uniform_probs(vocab_size, support);
    }
    if (type == "weighted") {
        auto tokens = spec.at("tokens").get<std::vector<int32_t>>();
        auto weights = spec.at("weights").get<std::vector<double>>();
        if (tokens.size() != weights.size() || tokens.empty())
            throw input_error("weighted spec needs matching tokens/weights");
        std::vector<double> p(vocab_size, 0.0);
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= vocab_size)
                throw input_error("weighted token out of range");
            p[tokens[i]] += weights[i];
        }
        return p;
    }
    if (type == "zipf") {
        std::vector<int32_t> support;
        if (spec.contains("support")) support = spec.at("support").get<std::vector<int32_t>>();
        double exponent = spec.value("exponent", 1.1);
        double shift = spec.value("shift", 2.0);
        std::vector<int32_t> ids = support;
        if (ids.empty()) {
            ids.resize(vocab_size);
            for (int32_t v = 0; v < vocab_size; ++v) ids[v] = v;
        }
        std::vector<double> p(vocab_size, 0.0);
        for (size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] < 0 || ids[r] >= vocab_size) throw input_error("zipf token out of range");
            p[ids[r]] = std::pow(static_cast<double>(r) + shift, -exponent);
        }
        return p;
    }
    throw input_error("unknown position spec type: " + type);
}

}  // namespace

TokenDistribution dist_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw input_error(std::string("bad distribution JSON: ") + e.what());
    }
    int vocab_size, k;
    try {
        vocab_size = j.at("vocab_size").get<int>();
        k = j.at("k").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw input_error(std::string("distribution manifest missing fields: ") + e.what());
    }
    if (k < 1) throw input_error("k must be >= 1");
    std::vector<std::vector<double>> probs;
    probs.reserve(k);
    if (j.contains("positions")) {
        const auto& specs = j.at("positions");
        if (static_cast<int>(specs.size()) != k)
            throw input_error("positions array length != k");
        for (const auto& s : specs) probs.push_back(position_probs_from_json(s, vocab_size));
    } else if (j.contains("cycle")) {
        const auto& cyc = j.at("cycle");
        if (cyc.empty()) throw input_error("cycle must be non-empty");
        std::vector<std::vector<double>> base;
        for (const auto& s : cyc) base.push_back(position_probs_from_json(s, vocab_size));
        for (int i = 0; i < k; ++i) probs.push_back(base[i % base.size()]);
    } else {
        throw input_error("distribution manifest needs 'positions' or 'cycle'");
    }
    return from_position_probs(vocab_size, std::move(probs));
}

std::string dist_to_json(const TokenDistribution& dist) {
    dist.validate();
    nlohmann::json j;
    j["schema_version"] = kSchemaVersion;
    j["vocab_size"] = dist.vocab_size;
    j["k"] = dist.k();
    nlohmann::json positions = nlohmann::json::array();
    for (const auto& p : dist.positions) {
        positions.push_back({{"type", "explicit"}, {"probs", p.probs}});
    }
    j["positions"] = positions;
    return j.dump(2) + "\n";
}

TokenDistribution load_dist(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open distribution manifest: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return dist_from_json(text);
}

void save_dist(const TokenDistribution& dist, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write distribution manifest: " + path);
    out << dist_to_json(dist);
}

}  // namespace lowprob
