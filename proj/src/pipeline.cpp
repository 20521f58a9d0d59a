#include "lowprob/pipeline.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace lowprob {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
    if (model_path.empty() || dist_path.empty())
        throw input_error("config needs model and dist paths");
    if (!(band_lo < band_hi)) throw input_error("band requires lo < hi");
    if (budget < 4) throw input_error("budget must be >= 4");
    if (target_count < 1) throw input_error("target_count must be >= 1");
    if (methods.empty()) throw input_error("no methods configured");
    if (ground_truth.mode != "auto" && ground_truth.mode != "mc" &&
        ground_truth.mode != "exhaustive")
        throw input_error("ground_truth.mode must be auto|mc|exhaustive");
    if (ground_truth.samples < 1) throw input_error("ground_truth.samples must be >= 1");
    if (!(tuning.band_lo < tuning.band_hi)) throw input_error("tuning band requires lo < hi");
}

namespace {

TemperatureSpec temperature_spec_from_json(const json& j) {
    TemperatureSpec spec;
    if (j.is_string()) {
        if (j.get<std::string>() != "tune") throw input_error("temperature must be a number or \"tune\"");
        spec.tune = true;
    } else if (j.is_number()) {
        spec.value = j.get<double>();
        if (!(spec.value > 0.0)) throw input_error("temperature must be > 0");
    } else {
        throw input_error("temperature must be a number or \"tune\"");
    }
    return spec;
}

}  // namespace

RunConfig run_config_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw input_error(std::string("bad config JSON: ") + e.what());
    }
    RunConfig c;
    try {
        c.model_path = j.at("model").get<std::string>();
        c.dist_path = j.at("dist").get<std::string>();
        c.seed = j.value("seed", 0ull);
        c.budget = j.value("budget", c.budget);
        if (j.contains("band")) {
            c.band_lo = j.at("band").at(0).get<double>();
            c.band_hi = j.at("band").at(1).get<double>();
        }
        c.target_count = j.value("target_count", c.target_count);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j.at("methods")) c.methods.push_back(method_from_name(m));
        }
        if (j.contains("temperature")) {
            const auto& t = j.at("temperature");
            if (t.is_object()) {
                for (auto it = t.begin(); it != t.end(); ++it) {
                    c.temperature[static_cast<int>(method_from_name(it.key()))] =
                        temperature_spec_from_json(it.value());
                }
            } else {
                TemperatureSpec spec = temperature_spec_from_json(t);
                for (auto& s : c.temperature) s = spec;
            }
        }
        if (j.contains("ground_truth")) {
            const auto& g = j.at("ground_truth");
            c.ground_truth.mode = g.value("mode", c.ground_truth.mode);
            c.ground_truth.samples = g.value("samples", c.ground_truth.samples);
            c.ground_truth.cap = g.value("cap", c.ground_truth.cap);
        }
        if (j.contains("tuning")) {
            const auto& t = j.at("tuning");
            if (t.contains("band")) {
                c.tuning.band_lo = t.at("band").at(0).get<double>();
                c.tuning.band_hi = t.at("band").at(1).get<double>();
            }
            c.tuning.count = t.value("count", c.tuning.count);
            c.tuning.budget = t.value("budget", c.tuning.budget);
        }
        if (j.contains("loss")) c.loss = loss_from_name(j.at("loss").get<std::string>());
    } catch (const json::exception& e) {
        throw input_error(std::string("bad config fields: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return run_config_from_json(text);
}

ModelSpec model_spec_from_json(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw input_error(std::string("bad model spec JSON: ") + e.what());
    }
    ModelSpec spec;
    spec.n_layers = j.value("n_layers", spec.n_layers);
    spec.d_model = j.value("d_model", spec.d_model);
    spec.n_heads = j.value("n_heads", spec.n_heads);
    spec.d_mlp = j.value("d_mlp", spec.d_mlp);
    spec.vocab_size = j.value("vocab_size", spec.vocab_size);
    spec.max_seq_len = j.value("max_seq_len", spec.max_seq_len);
    spec.activation = j.value("activation", spec.activation);
    spec.validate();
    return spec;
}

ModelSpec load_model_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open model spec: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return model_spec_from_json(text);
}

void save_estimates_csv(const std::vector<EstimateRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write estimates csv: " + path);
    out << "method,target,raw_estimate,model_calls,diagnostics\n";
    for (const auto& r : records) {
        out << method_name(r.method) << "," << r.target << "," << format_double(r.raw_estimate)
            << "," << r.model_calls_used << "," << csv_quote(r.diagnostics.dump()) << "\n";
    }
}

std::vector<EstimateRecord> load_estimates_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open estimates csv: " + path);
    std::string line;
    std::getline(in, line);
    std::vector<EstimateRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EstimateRecord r;
        size_t pos = 0;
        auto next_field = [&](bool quoted_tail) -> std::string {
            if (quoted_tail) {
                std::string rest = line.substr(pos);
                return csv_unquote(rest);
            }
            size_t comma = line.find(',', pos);
            std::string field = line.substr(pos, comma - pos);
            pos = comma + 1;
            return field;
        };
        r.method = method_from_name(next_field(false));
        r.target = static_cast<int32_t>(std::stol(next_field(false)));
        r.raw_estimate = std::stod(next_field(false));
        r.model_calls_used = std::stoll(next_field(false));
        r.diagnostics = json::parse(next_field(true));
        records.push_back(std::move(r));
    }
    return records;
}

void save_eval_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw input_error("cannot write eval csv: " + path);
    out << "token,truth,raw,fitted,loss\n";
    for (size_t i = 0; i < report.tokens.size(); ++i) {
        out << report.tokens[i] << "," << format_double(report.truths[i]) << ","
            << format_double(report.raws[i]) << "," << format_double(report.fitted[i]) << ","
            << format_double(report.losses[i]) << "\n";
    }
}

namespace {

uint64_t model_file_hash(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw input_error("cannot open model manifest: " + manifest_path);
    json manifest;
    in >> manifest;
    fs::path blob = fs::path(manifest_path).parent_path() / manifest.at("blob").get<std::string>();
    return hash_mix(fnv1a64_file(manifest_path), fnv1a64_file(blob.string()));
}

json eval_summary_json(const EvalReport& rep) {
    json fit;
    if (rep.uses_gld_form) {
        fit = {{"a", rep.fit4.a}, {"b", rep.fit4.b}, {"c", rep.fit4.c}, {"eps", rep.fit4.eps}};
    } else {
        fit = {{"a", rep.fit.a}, {"b", rep.fit.b}, {"c", rep.fit.c}};
    }
    return {{"fit", fit},
            {"fit_converged", rep.fit_converged},
            {"mean_loss", rep.mean_loss},
            {"loocv_loss", rep.loocv_loss},
            {"optimal_constant", rep.constant},
            {"constant_loss", rep.constant_loss},
            {"constant_loocv_loss", rep.constant_loocv_loss},
            {"n_targets", rep.tokens.size()}};
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& config, const std::string& out_dir, int threads) {
    config.validate();
    fs::create_directories(out_dir);
    const fs::path out(out_dir);

    std::string stage = "setup";
    auto fail_marker = [&](const std::string& what) {
        std::ofstream f(out / "FAILED");
        f << stage << ": " << what << "\n";
    };

    PipelineResult result;
    result.out_dir = out_dir;
    try {
        ModelWeights model = load_model(config.model_path);
        TokenDistribution dist = load_dist(config.dist_path);
        if (model.spec.vocab_size != dist.vocab_size)
            throw input_error("model and distribution vocab sizes differ");
        if (dist.k() > model.spec.max_seq_len)
            throw input_error("distribution length exceeds model max_seq_len");

        const uint64_t model_hash = model_file_hash(config.model_path);
        const uint64_t dist_hash = fnv1a64_file(config.dist_path);

        // Manifest goes first so every later artifact is attributable.
        {
            json manifest;
            manifest["schema_version"] = kSchemaVersion;
            manifest["tool_version"] = kToolVersion;
            manifest["model_hash"] = hash_hex(model_hash);
            manifest["dist_hash"] = hash_hex(dist_hash);
            manifest["seed"] = config.seed;
            manifest["budget"] = config.budget;
            manifest["band"] = {config.band_lo, config.band_hi};
            manifest["loss"] = loss_name(config.loss);
            json methods = json::array();
            for (Method m : config.methods) methods.push_back(method_name(m));
            manifest["methods"] = methods;
            manifest["started_at_unix"] =
                std::chrono::duration_cast<std::chrono::seconds>(
                    std::chrono::system_clock::now().time_since_epoch())
                    .count();
            const std::string dump = manifest.dump(2);
            manifest["config_hash"] = hash_hex(fnv1a64(dump.data(), dump.size()));
            std::ofstream mf(out / "run_manifest.json");
            if (!mf) throw input_error("cannot write run manifest");
            mf << manifest.dump(2) << "\n";
        }

        // ---- ground truth ----
        stage = "ground_truth";
        bool exact = config.ground_truth.mode == "exhaustive" ||
                     (config.ground_truth.mode == "auto" &&
                      dist.support_space(config.ground_truth.cap) <= config.ground_truth.cap);
        std::vector<double> probs;
        TokenCounts counts;
        if (exact) {
            probs = exhaustive_distribution(model, dist, config.ground_truth.cap, threads);
            counts.counts.assign(probs.size(), -1);
            counts.n_samples = 0;
        } else {
            counts = monte_carlo_counts(model, dist, config.ground_truth.samples, config.seed,
                                        threads);
            probs.resize(counts.counts.size());
            for (size_t v = 0; v < probs.size(); ++v)
                probs[v] = static_cast<double>(counts.counts[v]) /
                           static_cast<double>(counts.n_samples);
        }
        {
            std::ofstream gt(out / "ground_truth.csv");
            if (!gt) throw input_error("cannot write ground truth csv");
            gt << "token,count,probability\n";
            for (size_t v = 0; v < probs.size(); ++v)
                gt << v << "," << counts.counts[v] << "," << format_double(probs[v]) << "\n";
            json sidecar = {{"schema_version", kSchemaVersion},
                            {"mode", exact ? "exhaustive" : "mc"},
                            {"n_samples", counts.n_samples},
                            {"seed", config.seed},
                            {"model_hash", hash_hex(model_hash)},
                            {"dist_hash", hash_hex(dist_hash)}};
            std::ofstream sc(out / "ground_truth.csv.json");
            sc << sidecar.dump(2) << "\n";
        }

        // ---- target selection ----
        stage = "select_targets";
        result.targets = select_targets_from_probs(probs, config.band_lo, config.band_hi,
                                                   config.target_count, config.seed);
        save_targets_csv(result.targets, (out / "targets.csv").string());
        if (result.targets.empty())
            throw input_error("no tokens in the target probability band");

        // ---- temperature tuning ----
        stage = "tuning";
        bool any_tuned = false;
        for (Method m : config.methods) {
            auto& spec = config.temperature[static_cast<int>(m)];
            result.temperatures_used[static_cast<int>(m)] = spec.value;
            if (spec.tune && (m == Method::itgis || m == Method::mhis)) any_tuned = true;
        }
        if (any_tuned) {
            TargetSet tuning_targets =
                select_targets_from_probs(probs, config.tuning.band_lo, config.tuning.band_hi,
                                          config.tuning.count,
                                          derive_seed(config.seed, stream::tuning));
            if (tuning_targets.size() < 3)
                throw input_error("not enough tuning targets in the tuning band");
            std::vector<int32_t> ttok;
            std::vector<double> ttruth;
            for (const auto& t : tuning_targets) {
                ttok.push_back(t.token);
                ttruth.push_back(t.probability);
            }
            json tuning_out;
            for (Method m : config.methods) {
                if (!config.temperature[static_cast<int>(m)].tune) continue;
                if (m != Method::itgis && m != Method::mhis) continue;
                TuneOptions topt;
                topt.budget = EstimatorBudget::from_total(
                    config.tuning.budget > 0 ? config.tuning.budget : config.budget);
                topt.loss = config.loss;
                topt.threads = threads;
                TuneResult tr = tune_temperature(m, model, dist, ttok, ttruth,
                                                 temperature_grid(), config.seed, topt);
                result.temperatures_used[static_cast<int>(m)] = tr.temperature;
                tuning_out[method_name(m)] = {{"temperature", tr.temperature},
                                              {"grid", tr.grid},
                                              {"losses", tr.losses}};
            }
            std::ofstream tf(out / "tuning.json");
            tf << tuning_out.dump(2) << "\n";
        }

        // ---- estimation ----
        stage = "estimate";
        EstimatorBudget budget = EstimatorBudget::from_total(config.budget);
        std::vector<int32_t> tokens;
        std::vector<double> truths;
        for (const auto& t : result.targets) {
            tokens.push_back(t.token);
            truths.push_back(t.probability);
        }
        std::vector<GldStats> gld_stats_by_target;
        for (Method m : config.methods) {
            const double temperature = result.temperatures_used[static_cast<int>(m)];
            switch (m) {
                case Method::itgis: {
                    ItgisOptions o;
                    o.temperature = temperature;
                    o.threads = threads;
                    for (int32_t t : tokens) {
                        result.estimates.push_back(itgis(
                            model, dist, t, budget,
                            derive_seed(config.seed, stream::itgis, static_cast<uint64_t>(t)), o));
                    }
                    break;
                }
                case Method::mhis: {
                    MhisOptions o;
                    o.temperature = temperature;
                    o.threads = threads;
                    for (int32_t t : tokens) {
                        result.estimates.push_back(mhis(
                            model, dist, t, budget,
                            derive_seed(config.seed, stream::mhis, static_cast<uint64_t>(t)), o));
                    }
                    break;
                }
                case Method::qld: {
                    QldOptions o;
                    o.threads = threads;
                    QldShared shared =
                        qld_collect(model, dist, budget.qld_samples, config.seed, threads);
                    for (int32_t t : tokens)
                        result.estimates.push_back(qld_from_shared(shared, model, t, config.seed, o));
                    break;
                }
                case Method::gld: {
                    gld_stats_by_target = gld_stats_multi(model, dist, tokens,
                                                          budget.gld_samples, config.seed, threads);
                    for (size_t i = 0; i < tokens.size(); ++i)
                        result.estimates.push_back(
                            gld_record(gld_stats_by_target[i], tokens[i], budget.gld_samples));
                    break;
                }
            }
        }
        save_estimates_csv(result.estimates, (out / "estimates.csv").string());

        // ---- evaluation ----
        stage = "evaluate";
        json summary;
        summary["schema_version"] = kSchemaVersion;
        summary["loss"] = loss_name(config.loss);
        for (Method m : config.methods) {
            EvalReport rep;
            if (m == Method::gld) {
                rep = evaluate_gld(tokens, gld_stats_by_target, truths, config.loss);
            } else {
                std::vector<double> estimates;
                for (const auto& r : result.estimates)
                    if (r.method == m) estimates.push_back(r.raw_estimate);
                rep = evaluate_affine(method_name(m), tokens, estimates, truths, config.loss);
            }
            save_eval_csv(rep, (out / ("eval_" + method_name(m) + ".csv")).string());
            summary["methods"][rep.method] = eval_summary_json(rep);
            summary["methods"][rep.method]["temperature"] =
                result.temperatures_used[static_cast<int>(m)];
            result.reports.push_back(std::move(rep));
        }
        std::ofstream sf(out / "summary.json");
        sf << summary.dump(2) << "\n";
    } catch (const std::exception& e) {
        fail_marker(e.what());
        throw stage_error(stage, e.what());
    }
    return result;
}

}  // namespace lowprob
