#include "lowprob/groundtruth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lowprob/rng.hpp"

namespace lowprob {

namespace {
constexpr int kForwardBatch = 512;
constexpr int64_t kMcGranule = 1 << 14;

int32_t batch_argmax_row(const Eigen::MatrixXd& logits, int row) {
    int32_t best = 0;
    double best_v = logits(row, 0);
    for (int32_t j = 1; j < static_cast<int32_t>(logits.cols()); ++j) {
        if (logits(row, j) > best_v) {
            best_v = logits(row, j);
            best = j;
        }
    }
    return best;
}
}  // namespace

std::vector<double> exhaustive_distribution(const ModelWeights& w, const TokenDistribution& dist,
                                            int64_t cap, int threads) {
    dist.validate();
    const int64_t space = dist.support_space(cap);
    if (space > cap) throw input_error("support space exceeds exhaustive enumeration cap");
    const int k = dist.k();
    const int V = dist.vocab_size;

    // Prefix partition over the first-position support; each part enumerates
    // the suffix odometer and accumulates mass locally.
    const auto& first = dist.positions[0];
    const int n_parts = static_cast<int>(first.support.size());
    std::vector<std::vector<double>> part_mass(n_parts, std::vector<double>(V, 0.0));

    parallel_chunks(n_parts, 1, threads, [&](int64_t part, int64_t, int64_t) {
        std::vector<size_t> idx(k, 0);  // support indices for positions 1..k-1
        TokenBatch batch;
        batch.resize(kForwardBatch, k);
        std::vector<double> seq_prob(kForwardBatch);
        Eigen::MatrixXd logits;
        auto& mass = part_mass[part];
        const int32_t tok0 = first.support[part];
        const double p0 = first.probs[tok0];

        int fill = 0;
        bool done = false;
        while (!done) {
            // emit current sequence
            int32_t* row = batch.row(fill);
            row[0] = tok0;
            double p = p0;
            for (int i = 1; i < k; ++i) {
                const auto& pos = dist.positions[i];
                row[i] = pos.support[idx[i]];
                p *= pos.probs[row[i]];
            }
            seq_prob[fill] = p;
            ++fill;

            // advance suffix odometer
            int i = k - 1;
            while (i >= 1) {
                if (++idx[i] < dist.positions[i].support.size()) break;
                idx[i] = 0;
                --i;
            }
            if (i == 0) done = true;

            if (fill == kForwardBatch || done) {
                TokenBatch run = batch;
                run.n_seqs = fill;
                run.tokens.resize(static_cast<size_t>(fill) * k);
                forward_batch(w, run, &logits, nullptr);
                for (int r = 0; r < fill; ++r) mass[batch_argmax_row(logits, r)] += seq_prob[r];
                fill = 0;
            }
        }
    });

    std::vector<double> out(V, 0.0);
    for (int part = 0; part < n_parts; ++part)
        for (int v = 0; v < V; ++v) out[v] += part_mass[part][v];
    return out;
}

double exhaustive_probability(const ModelWeights& w, const TokenDistribution& dist, int32_t t,
                              int64_t cap, int threads) {
    if (t < 0 || t >= dist.vocab_size) throw input_error("target token out of range");
    return exhaustive_distribution(w, dist, cap, threads)[t];
}

TokenCounts monte_carlo_counts(const ModelWeights& w, const TokenDistribution& dist, int64_t n,
                               uint64_t seed, int threads) {
    dist.validate();
    if (n < 1) throw input_error("sample count must be >= 1");
    const int k = dist.k();
    const int V = dist.vocab_size;
    const int64_t n_chunks = (n + kMcGranule - 1) / kMcGranule;
    std::vector<std::vector<int64_t>> chunk_counts(n_chunks, std::vector<int64_t>(V, 0));

    parallel_chunks(n, kMcGranule, threads, [&](int64_t chunk, int64_t begin, int64_t end) {
        Rng rng(derive_seed(seed, stream::ground_truth, static_cast<uint64_t>(chunk)));
        auto& counts = chunk_counts[chunk];
        TokenBatch batch;
        Eigen::MatrixXd logits;
        int64_t remaining = end - begin;
        while (remaining > 0) {
            const int b = static_cast<int>(std::min<int64_t>(remaining, kForwardBatch));
            batch.resize(b, k);
            for (int s = 0; s < b; ++s) sample_into(dist, rng, batch.row(s));
            forward_batch(w, batch, &logits, nullptr);
            for (int s = 0; s < b; ++s) ++counts[batch_argmax_row(logits, s)];
            remaining -= b;
        }
    });

    TokenCounts out;
    out.counts.assign(V, 0);
    out.n_samples = n;
    for (const auto& c : chunk_counts)
        for (int v = 0; v < V; ++v) out.counts[v] += c[v];
    return out;
}

TargetSet select_targets_from_probs(const std::vector<double>& probs, double lo, double hi,
                                    int64_t m, uint64_t seed) {
    if (!(lo < hi)) throw input_error("target band requires lo < hi");
    if (m < 1) throw input_error("target count must be >= 1");
    TargetSet qualifying;
    for (int32_t v = 0; v < static_cast<int32_t>(probs.size()); ++v) {
        if (probs[v] >= lo && probs[v] <= hi) qualifying.push_back({v, probs[v]});
    }
    if (static_cast<int64_t>(qualifying.size()) > m) {
        Rng rng(derive_seed(seed, stream::target_select));
        // partial Fisher-Yates: the first m entries become a uniform subset
        for (int64_t i = 0; i < m; ++i) {
            int64_t j = i + rng.below(static_cast<int64_t>(qualifying.size()) - i);
            std::swap(qualifying[i], qualifying[j]);
        }
        qualifying.resize(m);
        std::sort(qualifying.begin(), qualifying.end(),
                  [](const Target& a, const Target& b) { return a.token < b.token; });
    }
    return qualifying;
}

TargetSet select_targets(const TokenCounts& counts, double lo, double hi, int64_t m,
                         uint64_t seed) {
    if (counts.n_samples < 1) throw input_error("counts have no samples");
    std::vector<double> probs(counts.counts.size());
    for (size_t v = 0; v < counts.counts.size(); ++v) {
        probs[v] = static_cast<double>(counts.counts[v]) / static_cast<double>(counts.n_samples);
    }
    return select_targets_from_probs(probs, lo, hi, m, seed);
}

void save_counts_csv(const TokenCounts& counts, const std::string& csv_path,
                     const std::string& sidecar_json) {
    std::ofstream out(csv_path);
    if (!out) throw input_error("cannot write counts csv: " + csv_path);
    out << "token,count,probability\n";
    for (size_t v = 0; v < counts.counts.size(); ++v) {
        const double p =
            static_cast<double>(counts.counts[v]) / static_cast<double>(counts.n_samples);
        out << v << "," << counts.counts[v] << "," << format_double(p) << "\n";
    }
    if (!sidecar_json.empty()) {
        std::string sidecar_path = csv_path + ".json";
        std::ofstream sc(sidecar_path);
        if (!sc) throw input_error("cannot write counts sidecar: " + sidecar_path);
        sc << sidecar_json;
    }
}

TokenCounts load_counts_csv(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw input_error("cannot open counts csv: " + csv_path);
    std::string line;
    std::getline(in, line);  // header
    TokenCounts counts;
    counts.n_samples = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok, cnt;
        std::getline(ss, tok, ',');
        std::getline(ss, cnt, ',');
        size_t v = std::stoull(tok);
        if (v >= counts.counts.size()) counts.counts.resize(v + 1, 0);
        counts.counts[v] = std::stoll(cnt);
        counts.n_samples += counts.counts[v];
    }
    if (counts.counts.empty()) throw input_error("counts csv is empty");
    return counts;
}

void save_targets_csv(const TargetSet& targets, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write targets csv: " + path);
    out << "token,probability\n";
    for (const auto& t : targets) out << t.token << "," << format_double(t.probability) << "\n";
}

TargetSet load_targets_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open targets csv: " + path);
    std::string line;
    std::getline(in, line);
    TargetSet targets;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok, prob;
        std::getline(ss, tok, ',');
        std::getline(ss, prob, ',');
        targets.push_back({static_cast<int32_t>(std::stol(tok)), std::stod(prob)});
    }
    return targets;
}

}  // namespace lowprob
