#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/em.hpp"
#include "fhcure/empirical_bayes.hpp"
#include "fhcure/evaluate.hpp"
#include "fhcure/laplace.hpp"
#include "fhcure/model.hpp"
#include "fhcure/rng.hpp"

namespace fhcure {

/// Scenario A: the fitted model is also the generator. One standard-normal
/// covariate plus one-hot blocks of 4, 3 and 2 levels (reference level
/// dropped) give p = 7. Latency times follow the polynomial baseline
/// S0(t) = 1 - (t/c)^eta in proportional-hazards form; rows outside the
/// event group get an event time c + Exponential(lambda_after_c); censoring
/// is Exponential(lambda_cens).
struct ScenarioAConfig {
    int N = 1000;
    double c = 10.0;
    double eta = 1.5;
    Eigen::VectorXd b_true;     // p + 1, intercept first
    Eigen::VectorXd beta_true;  // p
    double lambda_cens = 0.06;
    double lambda_after_c = 0.05;
    std::uint64_t seed = 1;
};

inline Eigen::VectorXd scenario_a_b_tail() {
    Eigen::VectorXd v(7);
    v << -0.3, 0.5, 0.4, 0.2, 0.0, -0.2, -0.5;
    return v;
}

inline Eigen::VectorXd scenario_a_beta_true() {
    Eigen::VectorXd v(7);
    v << 0.3, -0.4, -0.2, 0.0, 0.2, 0.4, 0.5;
    return v;
}

inline ScenarioAConfig scenario_a_config(double intercept, int N, std::uint64_t seed) {
    ScenarioAConfig cfg;
    cfg.N = N;
    cfg.seed = seed;
    cfg.b_true.resize(8);
    cfg.b_true[0] = intercept;
    cfg.b_true.tail(7) = scenario_a_b_tail();
    cfg.beta_true = scenario_a_beta_true();
    return cfg;
}

/// Calibrated intercepts: 70% / 30% event-group share at 30% censoring.
inline ScenarioAConfig scenario_a1_config(int N, std::uint64_t seed) {
    return scenario_a_config(0.928, N, seed);
}
inline ScenarioAConfig scenario_a2_config(int N, std::uint64_t seed) {
    return scenario_a_config(-0.838, N, seed);
}

inline std::vector<std::string> scenario_a_feature_names() {
    return {"x_cont", "cat4_b", "cat4_c", "cat4_d", "cat3_b", "cat3_c", "cat2_b"};
}

/// Covariate matrix for Scenario A; this is held fixed across replications,
/// so it only depends on the master seed (stream 0).
inline Eigen::MatrixXd make_scenario_a_covariates(const ScenarioAConfig& cfg) {
    RngStream rng(cfg.seed, 0);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(cfg.N, 7);
    for (int i = 0; i < cfg.N; ++i) {
        X(i, 0) = rng.normal();
        const int c4 = rng.categorical(4);
        if (c4 > 0) X(i, c4) = 1.0;  // columns 1..3
        const int c3 = rng.categorical(3);
        if (c3 > 0) X(i, 3 + c3) = 1.0;  // columns 4..5
        const int c2 = rng.categorical(2);
        if (c2 > 0) X(i, 6) = 1.0;
    }
    return X;
}

/// Inverse-transform draw of a latency time on [0, c): solves
/// S(t | x) = u for the polynomial baseline, t = c (1 - u^{exp(-x'beta)})^{1/eta}.
inline double sample_latency_time_a(double u, const Eigen::VectorXd& x_tilde,
                                    const Eigen::VectorXd& beta, double c, double eta) {
    if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("sample_latency_time_a: u outside [0, 1]");
    const double largest_below_c = std::nextafter(c, 0.0);
    if (u == 0.0) return largest_below_c;
    const double t = c * std::pow(1.0 - std::pow(u, std::exp(-x_tilde.dot(beta))), 1.0 / eta);
    return std::min(t, largest_below_c);
}

struct ScenarioATruth {
    Eigen::VectorXi z;
    Eigen::VectorXd latent_time;
    Eigen::VectorXd censor_time;
};

/// Draw one Scenario A replication on a fixed covariate matrix. Stream ids
/// partition the master seed, so replication r conventionally uses stream
/// r + 1 (stream 0 generated the covariates).
inline std::pair<Dataset, ScenarioATruth> draw_scenario_a(const ScenarioAConfig& cfg,
                                                          const Eigen::MatrixXd& X,
                                                          std::uint64_t stream_id) {
    RngStream rng(cfg.seed, stream_id);
    const int n = static_cast<int>(X.rows());

    Dataset data;
    data.time.resize(n);
    data.event.resize(n);
    data.x = X;
    data.feature_names = scenario_a_feature_names();

    ScenarioATruth truth;
    truth.z.resize(n);
    truth.latent_time.resize(n);
    truth.censor_time.resize(n);

    for (int i = 0; i < n; ++i) {
        const double lin = cfg.b_true[0] + X.row(i).dot(cfg.b_true.tail(7));
        const double pi = 1.0 / (1.0 + std::exp(-lin));
        const bool z = rng.bernoulli(pi);
        double t_true;
        if (z) {
            t_true = sample_latency_time_a(rng.uniform_open0(), X.row(i).transpose(),
                                           cfg.beta_true, cfg.c, cfg.eta);
        } else {
            t_true = cfg.c + rng.exponential(cfg.lambda_after_c);
        }
        const double censor = cfg.lambda_cens > 0.0 ? rng.exponential(cfg.lambda_cens)
                                                    : std::numeric_limits<double>::infinity();
        truth.z[i] = z ? 1 : 0;
        truth.latent_time[i] = t_true;
        truth.censor_time[i] = censor;
        data.time[i] = std::min(t_true, censor);
        data.event[i] = t_true <= censor ? 1 : 0;
    }
    return {data, truth};
}

inline std::pair<Dataset, ScenarioATruth> generate_scenario_a(const ScenarioAConfig& cfg) {
    return draw_scenario_a(cfg, make_scenario_a_covariates(cfg), 1);
}

struct CalibrationResult {
    double intercept = 0.0;
    double lambda_cens = 0.0;
    double achieved_event_fraction = 0.0;
    double achieved_censor_fraction = 0.0;
};

/// Tune the incidence intercept and the censoring rate on a pilot dataset so
/// the realized event-group share and the censoring share among the event
/// group hit their targets. Both realized fractions are monotone in the
/// tuned quantity once the underlying uniform draws are fixed, so plain
/// bisection serves as the monotone line search. Tolerance: 0.005 on each
/// fraction.
inline CalibrationResult calibrate(double target_event_fraction, double target_censor_fraction,
                                   ScenarioAConfig cfg, int pilot_n = 100000) {
    if (!(target_event_fraction > 0.0 && target_event_fraction < 1.0) ||
        !(target_censor_fraction > 0.0 && target_censor_fraction < 1.0)) {
        throw std::invalid_argument("calibrate: targets must lie in (0, 1)");
    }
    cfg.N = pilot_n;
    const Eigen::MatrixXd X = make_scenario_a_covariates(cfg);
    RngStream rng(cfg.seed, 0xCA11B7A7E);
    Eigen::VectorXd u_z(pilot_n), u_t(pilot_n), e_cens(pilot_n);
    for (int i = 0; i < pilot_n; ++i) {
        u_z[i] = rng.uniform();
        u_t[i] = rng.uniform_open0();
        e_cens[i] = rng.exponential(1.0);
    }
    Eigen::VectorXd lin_tail(pilot_n);
    for (int i = 0; i < pilot_n; ++i) lin_tail[i] = X.row(i).dot(cfg.b_true.tail(7));

    auto event_fraction = [&](double b1) {
        int count = 0;
        for (int i = 0; i < pilot_n; ++i) {
            const double pi = 1.0 / (1.0 + std::exp(-(b1 + lin_tail[i])));
            if (u_z[i] < pi) ++count;
        }
        return static_cast<double>(count) / pilot_n;
    };

    const double tol = 0.005;
    double lo = -10.0, hi = 10.0;
    double b1 = 0.0;
    if (event_fraction(lo) > target_event_fraction || event_fraction(hi) < target_event_fraction) {
        throw NumericError("calibrate: event-fraction target unattainable on [-10, 10]");
    }
    for (int it = 0; it < 200; ++it) {
        b1 = 0.5 * (lo + hi);
        const double f = event_fraction(b1);
        if (std::abs(f - target_event_fraction) <= tol) break;
        if (f < target_event_fraction) lo = b1;
        else hi = b1;
    }

    // Latency times for the rows that ended up in the event group at b1.
    std::vector<int> group;
    std::vector<double> latent;
    for (int i = 0; i < pilot_n; ++i) {
        const double pi = 1.0 / (1.0 + std::exp(-(b1 + lin_tail[i])));
        if (u_z[i] < pi) {
            group.push_back(i);
            latent.push_back(
                sample_latency_time_a(u_t[i], X.row(i).transpose(), cfg.beta_true, cfg.c, cfg.eta));
        }
    }
    if (group.empty()) throw NumericError("calibrate: empty event group at tuned intercept");

    auto censor_fraction = [&](double rate) {
        int censored = 0;
        for (std::size_t k = 0; k < group.size(); ++k) {
            if (e_cens[group[k]] / rate < latent[k]) ++censored;
        }
        return static_cast<double>(censored) / static_cast<double>(group.size());
    };

    double rlo = 1e-6, rhi = 10.0;
    double rate = 0.05;
    if (censor_fraction(rlo) > target_censor_fraction || censor_fraction(rhi) < target_censor_fraction) {
        throw NumericError("calibrate: censor-fraction target unattainable on [1e-6, 10]");
    }
    for (int it = 0; it < 200; ++it) {
        rate = 0.5 * (rlo + rhi);
        const double f = censor_fraction(rate);
        if (std::abs(f - target_censor_fraction) <= tol) break;
        if (f < target_censor_fraction) rlo = rate;
        else rhi = rate;
    }

    CalibrationResult out;
    out.intercept = b1;
    out.lambda_cens = rate;
    out.achieved_event_fraction = event_fraction(b1);
    out.achieved_censor_fraction = censor_fraction(rate);
    return out;
}

/// Scenario B: a cure-type exponential generator in which the binary
/// covariate lowers the ultimate event probability but makes events much
/// faster among those who experience one.
struct ScenarioBConfig {
    int n = 1000;
    double pi_x1 = 0.5;
    double pi_x0 = 0.8;
    double rate_x1 = 7.0;
    double rate_x0 = 0.4;
    double censor_upper = 8.0;
    std::uint64_t seed = 1;

    std::vector<double> cutoff_grid() const {
        std::vector<double> grid;
        for (double c = 0.1; c <= 6.1 + 1e-9; c += 0.4) grid.push_back(c);
        return grid;
    }
};

inline Dataset generate_scenario_b(const ScenarioBConfig& cfg) {
    RngStream rng(cfg.seed, 1);
    Dataset data;
    data.time.resize(cfg.n);
    data.event.resize(cfg.n);
    data.x.resize(cfg.n, 1);
    data.feature_names = {"x"};
    for (int i = 0; i < cfg.n; ++i) {
        const bool x1 = rng.bernoulli(0.5);
        const bool ever = rng.bernoulli(x1 ? cfg.pi_x1 : cfg.pi_x0);
        // subjects that never experience the event carry an infinite latent
        // time; they can only be observed censored
        const double t_latent =
            ever ? rng.exponential(x1 ? cfg.rate_x1 : cfg.rate_x0)
                 : std::numeric_limits<double>::infinity();
        const double censor = rng.uniform(0.0, cfg.censor_upper);
        data.x(i, 0) = x1 ? 1.0 : 0.0;
        data.time[i] = std::min(t_latent, censor);
        data.event[i] = t_latent <= censor ? 1 : 0;
    }
    return data;
}

struct StudyRunConfig {
    int M = 100;
    std::size_t K = 7;
    FitConfig fit;
    EbConfig eb;
    bool use_empirical_bayes = true;
    double level = 0.95;
    int rmise_intervals = 1000;
    int jobs = 1;
};

struct StudyResult {
    StudySummary summary;
    std::vector<int> failed_replications;
    Eigen::MatrixXd estimates;  ///< successful replications x (p+1+p)
};

/// True Scenario A baseline survival, for RMISE.
inline std::function<double(double)> scenario_a_true_baseline(const ScenarioAConfig& cfg) {
    return [c = cfg.c, eta = cfg.eta](double t) { return 1.0 - std::pow(t / c, eta); };
}

/// Run M Scenario A replications: fresh outcomes per replication on a fixed
/// covariate matrix, each fit by MAP or by the empirical Bayes loop, with
/// Laplace credible intervals. Replications run on `jobs` worker threads;
/// stream r+1 drives replication r, so the output is independent of the
/// thread schedule, and results aggregate in replication order.
inline StudyResult run_replications(const ScenarioAConfig& scenario, const StudyRunConfig& run) {
    if (run.M < 1) throw std::invalid_argument("run_replications: M must be at least 1");
    const Eigen::MatrixXd X = make_scenario_a_covariates(scenario);
    const Eigen::Index n_params = scenario.b_true.size() + scenario.beta_true.size();

    Eigen::MatrixXd estimates = Eigen::MatrixXd::Constant(run.M, n_params, 0.0);
    Eigen::MatrixXd lows = estimates, highs = estimates;
    Eigen::MatrixXd baselines(run.M, run.rmise_intervals + 1);
    std::vector<std::uint8_t> ok(static_cast<std::size_t>(run.M), 0);

    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int r = next.fetch_add(1);
            if (r >= run.M) return;
            try {
                auto [data, truth] = draw_scenario_a(scenario, X, static_cast<std::uint64_t>(r) + 1);
                FitResult fit;
                if (run.use_empirical_bayes) {
                    fit = fit_empirical_bayes(data, scenario.c, run.K, run.fit, run.eb).first;
                } else {
                    fit = fit_map(data, scenario.c, run.K, run.fit);
                }
                const PrecisionMatrix prec = precision_matrix(fit.params, data, fit.lambda);
                const Eigen::VectorXd theta = detail::pack_params(fit.params);
                const auto intervals = credible_intervals(prec, theta, run.level);
                for (Eigen::Index j = 0; j < n_params; ++j) {
                    estimates(r, j) = theta[j];
                    lows(r, j) = intervals[static_cast<std::size_t>(j)].first;
                    highs(r, j) = intervals[static_cast<std::size_t>(j)].second;
                }
                const double dt = scenario.c / run.rmise_intervals;
                for (int g = 0; g <= run.rmise_intervals; ++g) {
                    const double t = g * dt;
                    baselines(r, g) = t < scenario.c ? baseline_survival(fit.params, t) : 0.0;
                }
                ok[static_cast<std::size_t>(r)] = 1;
            } catch (const std::exception&) {
                ok[static_cast<std::size_t>(r)] = 0;
            }
        }
    };

    const int jobs = std::max(1, run.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    std::vector<int> good;
    StudyResult result;
    for (int r = 0; r < run.M; ++r) {
        if (ok[static_cast<std::size_t>(r)]) good.push_back(r);
        else result.failed_replications.push_back(r);
    }
    if (good.empty()) throw NumericError("run_replications: every replication failed");

    Eigen::MatrixXd est(good.size(), n_params), lo(good.size(), n_params), hi(good.size(), n_params);
    for (std::size_t k = 0; k < good.size(); ++k) {
        est.row(static_cast<Eigen::Index>(k)) = estimates.row(good[k]);
        lo.row(static_cast<Eigen::Index>(k)) = lows.row(good[k]);
        hi.row(static_cast<Eigen::Index>(k)) = highs.row(good[k]);
    }

    Eigen::VectorXd truth(n_params);
    truth.head(scenario.b_true.size()) = scenario.b_true;
    truth.tail(scenario.beta_true.size()) = scenario.beta_true;
    std::vector<std::string> names;
    for (Eigen::Index j = 0; j < scenario.b_true.size(); ++j) names.push_back("b" + std::to_string(j + 1));
    for (Eigen::Index j = 0; j < scenario.beta_true.size(); ++j) names.push_back("beta" + std::to_string(j + 1));

    result.summary = summarize(est, lo, hi, truth, names);
    result.summary.failures = static_cast<int>(result.failed_replications.size());

    // RMISE over the successful replications on the same grid
    const auto truth_fn = scenario_a_true_baseline(scenario);
    const double dt = scenario.c / run.rmise_intervals;
    double mean_ise = 0.0;
    for (int r : good) {
        double integral = 0.0;
        for (int g = 0; g < run.rmise_intervals; ++g) {
            const double d0 = baselines(r, g) - truth_fn(g * dt);
            const double d1 = baselines(r, g + 1) - truth_fn((g + 1) * dt);
            integral += 0.5 * (d0 * d0 + d1 * d1) * dt;
        }
        mean_ise += integral / scenario.c;
    }
    result.summary.rmise = std::sqrt(mean_ise / static_cast<double>(good.size()));
    result.estimates = est;
    return result;
}

struct SweepRow {
    double cutoff = 0.0;
    std::string coefficient;
    double estimate = 0.0;
    double low = 0.0;
    double high = 0.0;
    bool ok = false;
};

/// Fit the horizon model at every cutoff in the grid and emit the incidence
/// and latency coefficient estimates with credible intervals, long format.
inline std::vector<SweepRow> sweep_cutoffs(const Dataset& data, const std::vector<double>& grid,
                                           const StudyRunConfig& run) {
    std::vector<SweepRow> rows;
    for (double c : grid) {
        std::vector<std::string> names;
        for (Eigen::Index j = 0; j <= data.p(); ++j) names.push_back("b" + std::to_string(j + 1));
        for (Eigen::Index j = 0; j < data.p(); ++j) names.push_back("beta" + std::to_string(j + 1));
        try {
            FitResult fit;
            if (run.use_empirical_bayes) {
                fit = fit_empirical_bayes(data, c, run.K, run.fit, run.eb).first;
            } else {
                fit = fit_map(data, c, run.K, run.fit);
            }
            const PrecisionMatrix prec = precision_matrix(fit.params, data, fit.lambda);
            const Eigen::VectorXd theta = detail::pack_params(fit.params);
            const auto intervals = credible_intervals(prec, theta, run.level);
            const Eigen::Index n_coef = 2 * data.p() + 1;
            for (Eigen::Index j = 0; j < n_coef; ++j) {
                rows.push_back(SweepRow{c, names[static_cast<std::size_t>(j)], theta[j],
                                        intervals[static_cast<std::size_t>(j)].first,
                                        intervals[static_cast<std::size_t>(j)].second, true});
            }
        } catch (const std::exception&) {
            for (const auto& name : names) rows.push_back(SweepRow{c, name, 0.0, 0.0, 0.0, false});
        }
    }
    return rows;
}

}  // namespace fhcure
