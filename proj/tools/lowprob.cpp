// Command-line front end: generate models and distributions, compute ground
// truth, select targets, tune temperatures, run estimators, evaluate, or run
// the whole pipeline from a JSON config.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lowprob/eval.hpp"
#include "lowprob/pipeline.hpp"

namespace {

using namespace lowprob;

int run(int argc, char** argv) {
    CLI::App app{"low-probability estimation toolkit for micro language models"};
    app.require_subcommand(1);
    int threads = default_thread_count();
    app.add_option("--threads", threads, "worker threads (default: LOWPROB_THREADS or 1)");

    // ---- gen-model ----
    auto* gen_model = app.add_subcommand("gen-model", "generate seeded random model weights");
    std::string gm_spec, gm_out;
    uint64_t gm_seed = 0;
    gen_model->add_option("--spec", gm_spec, "model spec JSON file")->required();
    gen_model->add_option("--seed", gm_seed, "init seed")->required();
    gen_model->add_option("--out", gm_out, "output manifest path (.json)")->required();
    gen_model->callback([&]() {
        ModelSpec spec = load_model_spec(gm_spec);
        save_model(random_weights(spec, gm_seed), gm_out);
        std::cout << "wrote " << gm_out << "\n";
    });

    // ---- gen-dist ----
    auto* gen_dist = app.add_subcommand("gen-dist", "emit a synthetic distribution manifest");
    std::string gd_family = "uniform", gd_out;
    int gd_vocab = 32, gd_k = 8, gd_support = 0;
    double gd_exponent = 1.1, gd_shift = 2.0;
    gen_dist->add_option("--family", gd_family, "uniform | zipf | alternating");
    gen_dist->add_option("--vocab-size", gd_vocab)->required();
    gen_dist->add_option("--k", gd_k)->required();
    gen_dist->add_option("--support-size", gd_support, "tokens per position (0 = full vocab)");
    gen_dist->add_option("--zipf-exponent", gd_exponent);
    gen_dist->add_option("--zipf-shift", gd_shift);
    gen_dist->add_option("--out", gd_out)->required();
    gen_dist->callback([&]() {
        std::vector<int32_t> support;
        const int n = gd_support > 0 ? gd_support : gd_vocab;
        for (int32_t v = 0; v < n && v < gd_vocab; ++v) support.push_back(v);
        TokenDistribution dist;
        if (gd_family == "uniform") {
            dist = uniform_dist(gd_vocab, gd_k, support);
        } else if (gd_family == "zipf") {
            dist = zipf_dist(gd_vocab, gd_k, support, gd_exponent, gd_shift);
        } else if (gd_family == "alternating") {
            std::vector<int32_t> other;
            for (int32_t v = n; v < std::min(2 * n, gd_vocab); ++v) other.push_back(v);
            if (other.empty()) throw input_error("alternating family needs 2*support <= vocab");
            TokenDistribution even = zipf_dist(gd_vocab, 1, support, gd_exponent, gd_shift);
            TokenDistribution odd = zipf_dist(gd_vocab, 1, other, gd_exponent, gd_shift);
            dist.vocab_size = gd_vocab;
            for (int i = 0; i < gd_k; ++i)
                dist.positions.push_back(i % 2 == 0 ? even.positions[0] : odd.positions[0]);
        } else {
            throw input_error("unknown family: " + gd_family);
        }
        save_dist(dist, gd_out);
        std::cout << "wrote " << gd_out << "\n";
    });

    // ---- ground-truth ----
    auto* ground = app.add_subcommand("ground-truth", "argmax statistics over the input space");
    std::string gt_model, gt_dist, gt_out, gt_mode = "auto";
    int64_t gt_samples = 1 << 20, gt_cap = kDefaultExhaustiveCap;
    uint64_t gt_seed = 0;
    ground->add_option("--model", gt_model)->required();
    ground->add_option("--dist", gt_dist)->required();
    ground->add_option("--out", gt_out, "counts CSV path")->required();
    ground->add_option("--mode", gt_mode, "auto | mc | exhaustive");
    ground->add_option("--samples", gt_samples, "Monte Carlo sample count");
    ground->add_option("--cap", gt_cap, "exhaustive enumeration cap");
    ground->add_option("--seed", gt_seed);
    ground->callback([&]() {
        ModelWeights model = load_model(gt_model);
        TokenDistribution dist = load_dist(gt_dist);
        bool exact = gt_mode == "exhaustive" ||
                     (gt_mode == "auto" && dist.support_space(gt_cap) <= gt_cap);
        nlohmann::json sidecar = {{"schema_version", kSchemaVersion},
                                  {"mode", exact ? "exhaustive" : "mc"},
                                  {"seed", gt_seed},
                                  {"model_hash", hash_hex(fnv1a64_file(gt_model))},
                                  {"dist_hash", hash_hex(fnv1a64_file(gt_dist))}};
        if (exact) {
            std::vector<double> probs = exhaustive_distribution(model, dist, gt_cap, threads);
            std::ofstream out(gt_out);
            if (!out) throw input_error("cannot write counts csv: " + gt_out);
            out << "token,count,probability\n";
            for (size_t v = 0; v < probs.size(); ++v)
                out << v << ",-1," << format_double(probs[v]) << "\n";
            sidecar["n_samples"] = 0;
            std::ofstream sc(gt_out + ".json");
            sc << sidecar.dump(2) << "\n";
        } else {
            TokenCounts counts = monte_carlo_counts(model, dist, gt_samples, gt_seed, threads);
            sidecar["n_samples"] = counts.n_samples;
            save_counts_csv(counts, gt_out, sidecar.dump(2) + "\n");
        }
        std::cout << "wrote " << gt_out << "\n";
    });

    // ---- select-targets ----
    auto* select = app.add_subcommand("select-targets", "pick target tokens in a probability band");
    std::string st_counts, st_out;
    double st_lo = 1e-6, st_hi = 1e-4;
    int64_t st_m = 256;
    uint64_t st_seed = 0;
    select->add_option("--counts", st_counts, "counts CSV from ground-truth")->required();
    select->add_option("--lo", st_lo)->required();
    select->add_option("--hi", st_hi)->required();
    select->add_option("--count", st_m, "max targets");
    select->add_option("--seed", st_seed);
    select->add_option("--out", st_out)->required();
    select->callback([&]() {
        TokenCounts counts = load_counts_csv(st_counts);
        TargetSet targets = select_targets(counts, st_lo, st_hi, st_m, st_seed);
        if (targets.empty()) std::cerr << "warning: no tokens qualify for the band\n";
        save_targets_csv(targets, st_out);
        std::cout << "wrote " << st_out << " (" << targets.size() << " targets)\n";
    });

    // ---- tune-temp ----
    auto* tune = app.add_subcommand("tune-temp", "sweep temperatures on easier tuning targets");
    std::string tt_method, tt_model, tt_dist, tt_targets, tt_out, tt_loss = "itakura_saito";
    int64_t tt_budget = 4096;
    uint64_t tt_seed = 0;
    double tt_grid_lo = 0.2, tt_grid_hi = 5.0;
    int tt_grid_n = 9;
    tune->add_option("--method", tt_method, "itgis | mhis")->required();
    tune->add_option("--model", tt_model)->required();
    tune->add_option("--dist", tt_dist)->required();
    tune->add_option("--targets", tt_targets, "tuning targets CSV")->required();
    tune->add_option("--budget", tt_budget);
    tune->add_option("--seed", tt_seed);
    tune->add_option("--loss", tt_loss);
    tune->add_option("--grid-lo", tt_grid_lo);
    tune->add_option("--grid-hi", tt_grid_hi);
    tune->add_option("--grid-n", tt_grid_n);
    tune->add_option("--out", tt_out, "tuning result JSON");
    tune->callback([&]() {
        ModelWeights model = load_model(tt_model);
        TokenDistribution dist = load_dist(tt_dist);
        TargetSet targets = load_targets_csv(tt_targets);
        std::vector<int32_t> tokens;
        std::vector<double> truths;
        for (const auto& t : targets) {
            tokens.push_back(t.token);
            truths.push_back(t.probability);
        }
        TuneOptions opt;
        opt.budget = EstimatorBudget::from_total(tt_budget);
        opt.loss = loss_from_name(tt_loss);
        opt.threads = threads;
        TuneResult res = tune_temperature(method_from_name(tt_method), model, dist, tokens,
                                          truths, temperature_grid(tt_grid_lo, tt_grid_hi, tt_grid_n),
                                          tt_seed, opt);
        nlohmann::json j = {{"method", tt_method},
                            {"temperature", res.temperature},
                            {"grid", res.grid},
                            {"losses", res.losses}};
        if (!tt_out.empty()) {
            std::ofstream f(tt_out);
            f << j.dump(2) << "\n";
        }
        std::cout << j.dump(2) << "\n";
    });

    // ---- estimate ----
    auto* estimate = app.add_subcommand("estimate", "run one method on a target set");
    std::string es_method, es_model, es_dist, es_targets, es_out;
    int64_t es_budget = 4096;
    double es_temperature = 1.0;
    uint64_t es_seed = 0;
    estimate->add_option("--method", es_method, "itgis | mhis | qld | gld")->required();
    estimate->add_option("--model", es_model)->required();
    estimate->add_option("--dist", es_dist)->required();
    estimate->add_option("--targets", es_targets)->required();
    estimate->add_option("--budget", es_budget);
    estimate->add_option("--temperature", es_temperature);
    estimate->add_option("--seed", es_seed);
    estimate->add_option("--out", es_out)->required();
    estimate->callback([&]() {
        ModelWeights model = load_model(es_model);
        TokenDistribution dist = load_dist(es_dist);
        TargetSet targets = load_targets_csv(es_targets);
        Method method = method_from_name(es_method);
        EstimatorBudget budget = EstimatorBudget::from_total(es_budget);
        std::vector<EstimateRecord> records;
        switch (method) {
            case Method::itgis: {
                ItgisOptions o;
                o.temperature = es_temperature;
                o.threads = threads;
                for (const auto& t : targets)
                    records.push_back(itgis(model, dist, t.token, budget,
                                            derive_seed(es_seed, stream::itgis,
                                                        static_cast<uint64_t>(t.token)),
                                            o));
                break;
            }
            case Method::mhis: {
                MhisOptions o;
                o.temperature = es_temperature;
                o.threads = threads;
                for (const auto& t : targets)
                    records.push_back(mhis(model, dist, t.token, budget,
                                           derive_seed(es_seed, stream::mhis,
                                                       static_cast<uint64_t>(t.token)),
                                           o));
                break;
            }
            case Method::qld: {
                QldOptions o;
                o.threads = threads;
                QldShared shared = qld_collect(model, dist, budget.qld_samples, es_seed, threads);
                for (const auto& t : targets)
                    records.push_back(qld_from_shared(shared, model, t.token, es_seed, o));
                break;
            }
            case Method::gld: {
                std::vector<int32_t> tokens;
                for (const auto& t : targets) tokens.push_back(t.token);
                auto stats = gld_stats_multi(model, dist, tokens, budget.gld_samples, es_seed,
                                             threads);
                for (size_t i = 0; i < tokens.size(); ++i)
                    records.push_back(gld_record(stats[i], tokens[i], budget.gld_samples));
                break;
            }
        }
        save_estimates_csv(records, es_out);
        std::cout << "wrote " << es_out << "\n";
    });

    // ---- evaluate ----
    auto* evaluate = app.add_subcommand("evaluate", "fit and score estimates against truths");
    std::string ev_estimates, ev_targets, ev_loss = "itakura_saito", ev_out_dir = ".";
    evaluate->add_option("--estimates", ev_estimates)->required();
    evaluate->add_option("--targets", ev_targets)->required();
    evaluate->add_option("--loss", ev_loss);
    evaluate->add_option("--out-dir", ev_out_dir);
    evaluate->callback([&]() {
        std::vector<EstimateRecord> records = load_estimates_csv(ev_estimates);
        TargetSet targets = load_targets_csv(ev_targets);
        Loss loss = loss_from_name(ev_loss);
        std::filesystem::create_directories(ev_out_dir);
        nlohmann::json summary;
        summary["schema_version"] = kSchemaVersion;
        summary["loss"] = loss_name(loss);
        for (const std::string& name : {"itgis", "mhis", "qld", "gld"}) {
            Method m = method_from_name(name);
            std::vector<int32_t> tokens;
            std::vector<double> truths, estimates;
            std::vector<GldStats> stats;
            for (const auto& r : records) {
                if (r.method != m) continue;
                for (const auto& t : targets) {
                    if (t.token == r.target) {
                        tokens.push_back(t.token);
                        truths.push_back(t.probability);
                        estimates.push_back(r.raw_estimate);
                        if (m == Method::gld)
                            stats.push_back({r.diagnostics.at("mu").get<double>(),
                                             r.diagnostics.at("sigma").get<double>()});
                        break;
                    }
                }
            }
            if (tokens.empty()) continue;
            EvalReport rep = m == Method::gld
                                 ? evaluate_gld(tokens, stats, truths, loss)
                                 : evaluate_affine(name, tokens, estimates, truths, loss);
            save_eval_csv(rep, (std::filesystem::path(ev_out_dir) / ("eval_" + name + ".csv"))
                                   .string());
            summary["methods"][name] = {{"mean_loss", rep.mean_loss},
                                        {"loocv_loss", rep.loocv_loss},
                                        {"optimal_constant", rep.constant},
                                        {"constant_loss", rep.constant_loss}};
        }
        std::ofstream sf(std::filesystem::path(ev_out_dir) / "summary.json");
        sf << summary.dump(2) << "\n";
        std::cout << summary.dump(2) << "\n";
    });

    // ---- pipeline ----
    auto* pipeline = app.add_subcommand("pipeline", "run all stages from a JSON config");
    std::string pl_config, pl_out;
    pipeline->add_option("--config", pl_config)->required();
    pipeline->add_option("--out", pl_out, "output directory")->required();
    pipeline->callback([&]() {
        RunConfig config = load_run_config(pl_config);
        PipelineResult res = run_pipeline(config, pl_out, threads);
        std::cout << "pipeline complete: " << res.out_dir << " (" << res.targets.size()
                  << " targets, " << res.estimates.size() << " estimates)\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const lowprob::input_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lowprob::numeric_error& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const lowprob::stage_error& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
