#pragma once

#include <array>
#include <string>
#include <vector>

#include "lowprob/eval.hpp"
#include "lowprob/groundtruth.hpp"

namespace lowprob {

struct TemperatureSpec {
    bool tune = false;
    double value = 1.0;
};

struct GroundTruthConfig {
    std::string mode = "auto";  // auto | mc | exhaustive
    int64_t samples = 1 << 20;
    int64_t cap = kDefaultExhaustiveCap;
};

struct TuningConfig {
    double band_lo = 1e-4;
    double band_hi = 1e-2;
    int64_t count = 32;
    int64_t budget = 0;  // 0: reuse the estimation budget
};

struct RunConfig {
    std::string model_path;
    std::string dist_path;
    uint64_t seed = 0;
    int64_t budget = 4096;
    double band_lo = 1e-6;
    double band_hi = 1e-4;
    int64_t target_count = 48;
    std::vector<Method> methods = {Method::itgis, Method::mhis, Method::qld, Method::gld};
    std::array<TemperatureSpec, 4> temperature;  // indexed by Method
    GroundTruthConfig ground_truth;
    TuningConfig tuning;
    Loss loss = Loss::itakura_saito;

    void validate() const;
};

RunConfig run_config_from_json(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

ModelSpec model_spec_from_json(const std::string& json_text);
ModelSpec load_model_spec(const std::string& path);

// estimates.csv rows: method,target,raw_estimate,model_calls,diagnostics
void save_estimates_csv(const std::vector<EstimateRecord>& records, const std::string& path);
std::vector<EstimateRecord> load_estimates_csv(const std::string& path);

// eval_<method>.csv rows: token,truth,raw,fitted,loss
void save_eval_csv(const EvalReport& report, const std::string& path);

// Runs ground truth -> target selection -> optional tuning -> estimation ->
// evaluation. Every artifact lands in out_dir; a FAILED marker is left behind
// when a stage throws. Re-running with an identical config and seed produces
// byte-identical CSVs.
struct PipelineResult {
    std::string out_dir;
    TargetSet targets;
    std::vector<EstimateRecord> estimates;
    std::vector<EvalReport> reports;
    std::array<double, 4> temperatures_used{1.0, 1.0, 1.0, 1.0};
};

PipelineResult run_pipeline(const RunConfig& config, const std::string& out_dir, int threads = 1);

}  // namespace lowprob
