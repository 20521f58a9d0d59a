#include "lowprob/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lowprob {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kBFloor = 1e-300;
}  // namespace

std::string loss_name(Loss l) {
    return l == Loss::itakura_saito ? "itakura_saito" : "log_mse";
}

Loss loss_from_name(const std::string& name) {
    if (name == "itakura_saito" || name == "is") return Loss::itakura_saito;
    if (name == "log_mse" || name == "logmse") return Loss::log_mse;
    throw input_error("unknown loss: " + name);
}

double is_loss(double p, double q) {
    if (!(p > 0.0) || !(q > 0.0)) throw input_error("Itakura-Saito loss needs p, q > 0");
    const double log_ratio = std::log(p) - std::log(q);
    return std::exp(log_ratio) - log_ratio - 1.0;
}

double log_mse(double p, double q) {
    if (!(p > 0.0) || !(q > 0.0)) throw input_error("log-space squared error needs p, q > 0");
    const double d = std::log(p) - std::log(q);
    return d * d;
}

double loss_value(Loss loss, double p, double q) {
    return loss == Loss::itakura_saito ? is_loss(p, q) : log_mse(p, q);
}

double optimal_constant(const std::vector<double>& truths, Loss loss) {
    if (truths.empty()) throw input_error("optimal constant needs at least one truth");
    for (double p : truths)
        if (!(p > 0.0) || !std::isfinite(p)) throw input_error("truths must be positive and finite");
    if (loss == Loss::itakura_saito) {
        double sum = 0.0;
        for (double p : truths) sum += p;
        return sum / static_cast<double>(truths.size());
    }
    double sum_log = 0.0;
    for (double p : truths) sum_log += std::log(p);
    return std::exp(sum_log / static_cast<double>(truths.size()));
}

double apply_affine(const FitParams& p, double x) {
    if (x < 0.0) throw input_error("affine fit input must be >= 0");
    const double b = std::max(p.b, kBFloor);
    return x > 0.0 ? p.a * std::exp(p.c * std::log(x)) + b : b;
}

// ------------------------------------------------- derivative-free fitting

namespace {

// Bracketed coordinate descent: per-coordinate steps expand on success and
// halve on failure until every bracket collapses or the sweep cap is hit.
struct CoordResult {
    Eigen::VectorXd x;
    double f = kInf;
    bool converged = false;
};

template <typename F>
CoordResult coordinate_descent(const F& f, const Eigen::VectorXd& x0, int max_sweeps = 500,
                               double h0 = 0.5, double h_min = 1e-11) {
    CoordResult res;
    res.x = x0;
    res.f = f(res.x);
    Eigen::VectorXd h = Eigen::VectorXd::Constant(x0.size(), h0);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        for (Eigen::Index j = 0; j < res.x.size(); ++j) {
            Eigen::VectorXd cand = res.x;
            cand[j] = res.x[j] + h[j];
            double f_plus = f(cand);
            cand[j] = res.x[j] - h[j];
            double f_minus = f(cand);
            if (f_plus < res.f && f_plus <= f_minus) {
                res.x[j] += h[j];
                res.f = f_plus;
                h[j] *= 1.6;
            } else if (f_minus < res.f) {
                res.x[j] -= h[j];
                res.f = f_minus;
                h[j] *= 1.6;
            } else {
                h[j] *= 0.5;
            }
        }
        if (h.maxCoeff() < h_min) {
            res.converged = true;
            break;
        }
    }
    return res;
}

double geometric_mean(const std::vector<double>& xs) {
    double sum = 0.0;
    int64_t n = 0;
    for (double x : xs) {
        if (x > 0.0) {
            sum += std::log(x);
            ++n;
        }
    }
    return n > 0 ? std::exp(sum / static_cast<double>(n)) : 1.0;
}

void check_fit_inputs(const std::vector<double>& estimates, const std::vector<double>& truths,
                      size_t min_len) {
    if (estimates.size() != truths.size()) throw input_error("estimate/truth length mismatch");
    if (estimates.size() < min_len)
        throw input_error("fit needs at least " + std::to_string(min_len) + " points");
    for (double q : estimates)
        if (!std::isfinite(q) || q < 0.0) throw input_error("estimates must be finite and >= 0");
    for (double p : truths)
        if (!std::isfinite(p) || !(p > 0.0)) throw input_error("truths must be finite and > 0");
}

}  // namespace

FitResult fit_affine(const std::vector<double>& estimates, const std::vector<double>& truths,
                     Loss loss) {
    check_fit_inputs(estimates, truths, 3);
    const size_t n = truths.size();

    auto objective = [&](const Eigen::VectorXd& theta) -> double {
        const double a = std::exp(theta[0]);
        const double c = std::exp(theta[1]);
        const double b = std::max(std::exp(theta[2]), kBFloor);
        if (!std::isfinite(a) || !std::isfinite(c) || !std::isfinite(b)) return kInf;
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double q =
                estimates[i] > 0.0 ? a * std::exp(c * std::log(estimates[i])) + b : b;
            if (!(q > 0.0) || !std::isfinite(q)) return kInf;
            const double l = loss_value(loss, truths[i], q);
            if (!std::isfinite(l)) return kInf;
            total += l;
        }
        return total / static_cast<double>(n);
    };

    const double gm_t = geometric_mean(truths);
    const double gm_q = geometric_mean(estimates);
    double min_t = truths[0];
    for (double p : truths) min_t = std::min(min_t, p);

    std::vector<Eigen::VectorXd> starts;
    for (double c0 : {0.5, 1.0, 1.5, 2.0}) {
        const double a0 = gm_t / std::pow(gm_q, c0);
        for (double b0 : {min_t / 2.0, gm_t}) {
            Eigen::VectorXd theta(3);
            theta << std::log(std::max(a0, 1e-300)), std::log(c0),
                std::log(std::max(b0, kBFloor));
            starts.push_back(theta);
        }
    }

    CoordResult best;
    for (const auto& s : starts) {
        CoordResult r = coordinate_descent(objective, s);
        if (r.f < best.f) best = r;
    }

    FitResult out;
    out.params.a = std::exp(best.x[0]);
    out.params.c = std::exp(best.x[1]);
    out.params.b = std::max(std::exp(best.x[2]), kBFloor);
    out.mean_loss = best.f;
    out.converged = best.converged && std::isfinite(best.f);
    return out;
}

FitGldResult fit_gld(const std::vector<GldStats>& stats, const std::vector<double>& truths,
                     Loss loss) {
    if (stats.size() != truths.size()) throw input_error("stats/truth length mismatch");
    if (stats.size() < 4) throw input_error("GLD fit needs at least 4 points");
    for (double p : truths)
        if (!std::isfinite(p) || !(p > 0.0)) throw input_error("truths must be finite and > 0");
    const size_t n = truths.size();

    auto objective = [&](const Eigen::VectorXd& theta) -> double {
        FitParams4 p;
        p.a = std::exp(theta[0]);
        p.b = theta[1];
        p.c = std::max(std::exp(theta[2]), kBFloor);
        p.eps = std::max(std::exp(theta[3]), kBFloor);
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double denom = stats[i].sigma + p.eps;
            if (!(denom > 0.0)) return kInf;
            const double r = p.a * stats[i].mu / denom;
            const double q = std::exp(-r * r + p.b) + p.c;
            if (!(q > 0.0) || !std::isfinite(q)) return kInf;
            const double l = loss_value(loss, truths[i], q);
            if (!std::isfinite(l)) return kInf;
            total += l;
        }
        return total / static_cast<double>(n);
    };

    double sigma_bar = 0.0;
    for (const auto& s : stats) sigma_bar += s.sigma;
    sigma_bar = std::max(sigma_bar / static_cast<double>(n), 1e-6);
    const double gm_t = geometric_mean(truths);
    double min_t = truths[0];
    for (double p : truths) min_t = std::min(min_t, p);

    // b consistent with ln p ~ -(mu/sigma)^2 + b at a = 1
    double b_hat = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double r = stats[i].mu / (stats[i].sigma + 0.01 * sigma_bar);
        b_hat += std::log(std::max(truths[i], kBFloor)) + r * r;
    }
    b_hat /= static_cast<double>(n);

    std::vector<Eigen::VectorXd> starts;
    for (double a0 : {0.7, 1.0}) {
        for (double eps0 : {0.01 * sigma_bar, 0.3 * sigma_bar}) {
            for (int variant = 0; variant < 2; ++variant) {
                Eigen::VectorXd theta(4);
                const double b0 = variant == 0 ? b_hat : 0.0;
                const double c0 = variant == 0 ? min_t / 2.0 : gm_t;
                theta << std::log(a0), b0, std::log(std::max(c0, kBFloor)), std::log(eps0);
                starts.push_back(theta);
            }
        }
    }

    CoordResult best;
    for (const auto& s : starts) {
        CoordResult r = coordinate_descent(objective, s);
        if (r.f < best.f) best = r;
    }

    FitGldResult out;
    out.params.a = std::exp(best.x[0]);
    out.params.b = best.x[1];
    out.params.c = std::max(std::exp(best.x[2]), kBFloor);
    out.params.eps = std::max(std::exp(best.x[3]), kBFloor);
    out.mean_loss = best.f;
    out.converged = best.converged && std::isfinite(best.f);
    return out;
}

double loocv_affine(const std::vector<double>& estimates, const std::vector<double>& truths,
                    Loss loss) {
    check_fit_inputs(estimates, truths, 4);
    const size_t n = truths.size();
    double total = 0.0;
    std::vector<double> est_rest(n - 1), truth_rest(n - 1);
    for (size_t i = 0; i < n; ++i) {
        size_t w = 0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            est_rest[w] = estimates[j];
            truth_rest[w] = truths[j];
            ++w;
        }
        FitResult fit = fit_affine(est_rest, truth_rest, loss);
        total += loss_value(loss, truths[i], apply_affine(fit.params, estimates[i]));
    }
    return total / static_cast<double>(n);
}

double loocv_gld(const std::vector<GldStats>& stats, const std::vector<double>& truths,
                 Loss loss) {
    if (stats.size() != truths.size()) throw input_error("stats/truth length mismatch");
    if (stats.size() < 5) throw input_error("GLD LOOCV needs at least 5 points");
    const size_t n = truths.size();
    double total = 0.0;
    std::vector<GldStats> stats_rest(n - 1);
    std::vector<double> truth_rest(n - 1);
    for (size_t i = 0; i < n; ++i) {
        size_t w = 0;
        for (size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            stats_rest[w] = stats[j];
            truth_rest[w] = truths[j];
            ++w;
        }
        FitGldResult fit = fit_gld(stats_rest, truth_rest, loss);
        total += loss_value(loss, truths[i], gld_estimate(stats[i], fit.params));
    }
    return total / static_cast<double>(n);
}

double loocv_constant(const std::vector<double>& truths, Loss loss) {
    if (truths.size() < 2) throw input_error("constant LOOCV needs at least 2 points");
    const size_t n = truths.size();
    double total = 0.0;
    std::vector<double> rest(n - 1);
    for (size_t i = 0; i < n; ++i) {
        size_t w = 0;
        for (size_t j = 0; j < n; ++j)
            if (j != i) rest[w++] = truths[j];
        total += loss_value(loss, truths[i], optimal_constant(rest, loss));
    }
    return total / static_cast<double>(n);
}

namespace {

void fill_common_report(EvalReport& rep, Loss loss) {
    rep.mean_loss = 0.0;
    rep.losses.resize(rep.fitted.size());
    for (size_t i = 0; i < rep.fitted.size(); ++i) {
        rep.losses[i] = loss_value(loss, rep.truths[i], rep.fitted[i]);
        rep.mean_loss += rep.losses[i];
    }
    rep.mean_loss /= static_cast<double>(rep.fitted.size());
    rep.constant = optimal_constant(rep.truths, loss);
    rep.constant_loss = 0.0;
    for (double p : rep.truths) rep.constant_loss += loss_value(loss, p, rep.constant);
    rep.constant_loss /= static_cast<double>(rep.truths.size());
    rep.constant_loocv_loss =
        rep.truths.size() >= 2 ? loocv_constant(rep.truths, loss)
                               : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

EvalReport evaluate_affine(const std::string& method, const std::vector<int32_t>& tokens,
                           const std::vector<double>& estimates, const std::vector<double>& truths,
                           Loss loss) {
    if (tokens.size() != truths.size()) throw input_error("token/truth length mismatch");
    EvalReport rep;
    rep.method = method;
    rep.loss = loss;
    rep.tokens = tokens;
    rep.truths = truths;
    rep.raws = estimates;
    FitResult fit = fit_affine(estimates, truths, loss);
    rep.fit = fit.params;
    rep.fit_converged = fit.converged;
    rep.fitted.resize(estimates.size());
    for (size_t i = 0; i < estimates.size(); ++i)
        rep.fitted[i] = apply_affine(fit.params, estimates[i]);
    fill_common_report(rep, loss);
    rep.loocv_loss = truths.size() >= 4 ? loocv_affine(estimates, truths, loss)
                                        : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

EvalReport evaluate_gld(const std::vector<int32_t>& tokens, const std::vector<GldStats>& stats,
                        const std::vector<double>& truths, Loss loss) {
    if (tokens.size() != truths.size() || stats.size() != truths.size())
        throw input_error("token/stats/truth length mismatch");
    EvalReport rep;
    rep.method = "gld";
    rep.loss = loss;
    rep.tokens = tokens;
    rep.truths = truths;
    rep.uses_gld_form = true;
    rep.raws.resize(stats.size());
    for (size_t i = 0; i < stats.size(); ++i) {
        rep.raws[i] = stats[i].sigma > 0.0 ? normal_cdf(stats[i].mu / stats[i].sigma)
                                           : (stats[i].mu >= 0.0 ? 1.0 : 0.0);
    }
    FitGldResult fit = fit_gld(stats, truths, loss);
    rep.fit4 = fit.params;
    rep.fit_converged = fit.converged;
    rep.fitted.resize(stats.size());
    for (size_t i = 0; i < stats.size(); ++i) rep.fitted[i] = gld_estimate(stats[i], fit.params);
    fill_common_report(rep, loss);
    rep.loocv_loss = truths.size() >= 5 ? loocv_gld(stats, truths, loss)
                                        : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

std::vector<double> temperature_grid(double lo, double hi, int n) {
    if (!(lo > 0.0) || !(hi >= lo) || n < 1) throw input_error("bad temperature grid");
    std::vector<double> grid(n);
    if (n == 1) {
        grid[0] = lo;
        return grid;
    }
    const double llo = std::log(lo), lhi = std::log(hi);
    for (int i = 0; i < n; ++i)
        grid[i] = std::exp(llo + (lhi - llo) * static_cast<double>(i) / (n - 1));
    return grid;
}

TuneResult tune_temperature(Method method, const ModelWeights& w, const TokenDistribution& dist,
                            const std::vector<int32_t>& tuning_tokens,
                            const std::vector<double>& tuning_truths,
                            const std::vector<double>& grid, uint64_t seed,
                            const TuneOptions& opt) {
    if (method != Method::itgis && method != Method::mhis)
        throw input_error("temperature tuning applies to the importance sampling methods only");
    if (grid.empty()) throw input_error("empty temperature grid");
    if (tuning_tokens.size() != tuning_truths.size())
        throw input_error("tuning token/truth length mismatch");

    TuneResult res;
    res.grid = grid;
    std::sort(res.grid.begin(), res.grid.end());
    if (res.grid.size() == 1) {
        res.temperature = res.grid[0];
        res.losses = {std::numeric_limits<double>::quiet_NaN()};
        return res;
    }
    if (tuning_tokens.size() < 3) throw input_error("tuning needs at least 3 targets");

    res.losses.assign(res.grid.size(), kInf);
    size_t best = 0;
    for (size_t gi = 0; gi < res.grid.size(); ++gi) {
        std::vector<double> estimates(tuning_tokens.size());
        for (size_t ti = 0; ti < tuning_tokens.size(); ++ti) {
            const uint64_t s = derive_seed(seed, stream::tuning, gi, ti);
            if (method == Method::itgis) {
                ItgisOptions io;
                io.temperature = res.grid[gi];
                io.threads = opt.threads;
                estimates[ti] = itgis(w, dist, tuning_tokens[ti], opt.budget, s, io).raw_estimate;
            } else {
                MhisOptions mo;
                mo.temperature = res.grid[gi];
                mo.threads = opt.threads;
                estimates[ti] = mhis(w, dist, tuning_tokens[ti], opt.budget, s, mo).raw_estimate;
            }
        }
        res.losses[gi] = fit_affine(estimates, tuning_truths, opt.loss).mean_loss;
        if (res.losses[gi] < res.losses[best]) best = gi;
    }
    res.temperature = res.grid[best];
    return res;
}

}  // namespace lowprob
