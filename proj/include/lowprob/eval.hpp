#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lowprob/estimators.hpp"

namespace lowprob {

enum class Loss { itakura_saito, log_mse };
std::string loss_name(Loss l);
Loss loss_from_name(const std::string& name);

// D_IS(p, q) = p/q - ln(p/q) - 1; ratio-sensitive proper scoring rule.
double is_loss(double p, double q);
// (ln p - ln q)^2
double log_mse(double p, double q);
double loss_value(Loss loss, double p, double q);

// Constant minimizing the mean loss: arithmetic mean for Itakura-Saito,
// geometric mean for squared error in log space.
double optimal_constant(const std::vector<double>& truths, Loss loss);

// Monotone calibration x -> a x^c + b with a, c > 0 and b floored at a tiny
// positive value so fitted outputs stay inside the loss domain.
struct FitParams {
    double a = 1.0;
    double b = 1e-300;
    double c = 1.0;
};
double apply_affine(const FitParams& p, double x);

struct FitResult {
    FitParams params;
    double mean_loss = 0.0;
    bool converged = true;
};

struct FitGldResult {
    FitParams4 params;
    double mean_loss = 0.0;
    bool converged = true;
};

// Derivative-free fit (bracketed coordinate descent in log-parameter space,
// deterministic multi-start).
FitResult fit_affine(const std::vector<double>& estimates, const std::vector<double>& truths,
                     Loss loss);
FitGldResult fit_gld(const std::vector<GldStats>& stats, const std::vector<double>& truths,
                     Loss loss);

// Leave-one-out cross-validation; needs at least 4 points.
double loocv_affine(const std::vector<double>& estimates, const std::vector<double>& truths,
                    Loss loss);
double loocv_gld(const std::vector<GldStats>& stats, const std::vector<double>& truths, Loss loss);
double loocv_constant(const std::vector<double>& truths, Loss loss);

struct EvalReport {
    std::string method;
    Loss loss = Loss::itakura_saito;
    std::vector<int32_t> tokens;
    std::vector<double> truths;
    std::vector<double> raws;  // raw estimates, or plug-in values for GLD
    std::vector<double> fitted;
    std::vector<double> losses;
    double mean_loss = 0.0;
    double loocv_loss = 0.0;
    double constant = 0.0;       // optimal-constant baseline
    double constant_loss = 0.0;  // its in-sample mean loss
    double constant_loocv_loss = 0.0;
    bool uses_gld_form = false;
    FitParams fit;
    FitParams4 fit4;
    bool fit_converged = true;
};

EvalReport evaluate_affine(const std::string& method, const std::vector<int32_t>& tokens,
                           const std::vector<double>& estimates, const std::vector<double>& truths,
                           Loss loss);
EvalReport evaluate_gld(const std::vector<int32_t>& tokens, const std::vector<GldStats>& stats,
                        const std::vector<double>& truths, Loss loss);

// Appendix-style temperature sweep: runs the method at each grid value on the
// tuning targets, fits, and returns the grid temperature with the lowest mean
// fitted loss (ties go to the lower temperature).
std::vector<double> temperature_grid(double lo = 0.2, double hi = 5.0, int n = 9);

struct TuneOptions {
    EstimatorBudget budget = EstimatorBudget::from_total(4096);
    Loss loss = Loss::itakura_saito;
    int threads = 1;
};

struct TuneResult {
    double temperature = 1.0;
    std::vector<double> grid;
    std::vector<double> losses;
};

TuneResult tune_temperature(Method method, const ModelWeights& w, const TokenDistribution& dist,
                            const std::vector<int32_t>& tuning_tokens,
                            const std::vector<double>& tuning_truths,
                            const std::vector<double>& grid, uint64_t seed,
                            const TuneOptions& opt = {});

}  // namespace lowprob
