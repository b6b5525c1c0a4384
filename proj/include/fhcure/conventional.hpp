#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/em.hpp"
#include "fhcure/model.hpp"

namespace fhcure {

struct ConventionalConfig {
    double em_tol = 1e-8;
    int em_max_iter = 500;
    double inner_tol = 1e-9;
    int inner_max_iter = 200;
    bool pin_incidence = false;  ///< test hook: force pi == 1 for every row
};

/// Fit of the infinite-horizon benchmark: logistic incidence, Cox latency
/// with a Breslow-type baseline, and the zero-tail constraint (latency
/// survival set to 0 beyond the largest observed event time).
struct ConventionalFit {
    Eigen::VectorXd b;     // p + 1 incidence coefficients
    Eigen::VectorXd beta;  // p latency coefficients
    std::vector<double> baseline_times;     ///< distinct event times, ascending
    std::vector<double> baseline_survival;  ///< S0 after each event time
    double last_event_time = 0.0;
    std::vector<double> log_likelihood_trace;
    bool converged = false;
    bool incidence_separation = false;
    int iterations = 0;

    /// Step baseline survival at t, with the zero tail applied.
    double baseline_at(double t) const {
        if (t > last_event_time) return 0.0;
        const auto it = std::upper_bound(baseline_times.begin(), baseline_times.end(), t);
        if (it == baseline_times.begin()) return 1.0;
        return baseline_survival[static_cast<std::size_t>(it - baseline_times.begin()) - 1];
    }
};

namespace detail {

struct CoxData {
    std::vector<Eigen::Index> order;        // rows sorted by time ascending, events first on ties
    std::vector<double> event_times;        // distinct event times ascending
    std::vector<int> event_counts;          // events per distinct time
    std::vector<Eigen::Index> risk_start;   // first position in `order` with t >= event time
};

inline CoxData prepare_cox(const Dataset& data) {
    CoxData cd;
    cd.order.resize(static_cast<std::size_t>(data.n()));
    std::iota(cd.order.begin(), cd.order.end(), Eigen::Index{0});
    std::sort(cd.order.begin(), cd.order.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (data.time[a] != data.time[b]) return data.time[a] < data.time[b];
        return data.event[a] > data.event[b];
    });
    for (std::size_t k = 0; k < cd.order.size(); ++k) {
        const Eigen::Index i = cd.order[k];
        if (data.event[i] != 1) continue;
        if (cd.event_times.empty() || data.time[i] != cd.event_times.back()) {
            cd.event_times.push_back(data.time[i]);
            cd.event_counts.push_back(1);
            cd.risk_start.push_back(static_cast<Eigen::Index>(k));
        } else {
            ++cd.event_counts.back();
        }
    }
    return cd;
}

/// Weighted Breslow partial log-likelihood and gradient. Event rows carry
/// unit weight by construction; censored rows enter the risk sums with their
/// membership weights.
inline double cox_partial_loglik(const Dataset& data, const CoxData& cd,
                                 const Eigen::VectorXd& weights, const Eigen::VectorXd& beta,
                                 Eigen::VectorXd* grad_out) {
    const Eigen::Index p = data.p();
    const Eigen::Index n = data.n();
    std::vector<double> xb(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) xb[static_cast<std::size_t>(i)] = data.x.row(i).dot(beta);

    // suffix sums over the ordered rows: sum of w*e and of w*e*x
    double sum_we = 0.0;
    Eigen::VectorXd sum_wex = Eigen::VectorXd::Zero(p);
    std::vector<double> suffix_we(cd.order.size() + 1, 0.0);
    Eigen::MatrixXd suffix_wex(p, static_cast<Eigen::Index>(cd.order.size()) + 1);
    suffix_wex.setZero();
    for (std::size_t k = cd.order.size(); k-- > 0;) {
        const Eigen::Index i = cd.order[k];
        const double we = weights[i] * std::exp(xb[static_cast<std::size_t>(i)]);
        sum_we += we;
        sum_wex += we * data.x.row(i).transpose();
        suffix_we[k] = sum_we;
        suffix_wex.col(static_cast<Eigen::Index>(k)) = sum_wex;
    }

    double loglik = 0.0;
    if (grad_out) grad_out->setZero(p);
    std::size_t pos = 0;
    for (std::size_t j = 0; j < cd.event_times.size(); ++j) {
        const double denom = suffix_we[static_cast<std::size_t>(cd.risk_start[j])];
        const Eigen::VectorXd denom_x = suffix_wex.col(cd.risk_start[j]);
        // events at this time sit at the head of the risk set
        pos = static_cast<std::size_t>(cd.risk_start[j]);
        for (int d = 0; d < cd.event_counts[j]; ++d, ++pos) {
            const Eigen::Index i = cd.order[pos];
            loglik += xb[static_cast<std::size_t>(i)] - std::log(denom);
            if (grad_out) *grad_out += data.x.row(i).transpose() - denom_x / denom;
        }
    }
    return loglik;
}

}  // namespace detail

/// EM fit of the conventional mixture cure model. The E-step uses the
/// zero-tail constraint (censored rows beyond the last event time get weight
/// 0); the M-step pairs a weighted logistic fit with a weighted Cox partial
/// likelihood and a Breslow baseline update. Convergence is declared on the
/// relative change of the observed log-likelihood.
inline ConventionalFit fit_conventional(const Dataset& data, const ConventionalConfig& config = {}) {
    data.validate();
    if ((data.event.array() == 1).count() == 0) {
        throw DataError("fit_conventional: no observed events");
    }
    const Eigen::Index n = data.n();
    const Eigen::Index p = data.p();
    const detail::CoxData cd = detail::prepare_cox(data);

    Eigen::MatrixXd X(n, p + 1);
    X.col(0).setOnes();
    if (p > 0) X.rightCols(p) = data.x;

    ConventionalFit fit;
    fit.b = Eigen::VectorXd::Zero(p + 1);
    fit.beta = Eigen::VectorXd::Zero(p);
    fit.last_event_time = cd.event_times.back();

    FitConfig inner;
    inner.inner_tol = config.inner_tol;
    inner.inner_max_iter = config.inner_max_iter;

    std::vector<double> h0(cd.event_times.size(), 0.0);  // hazard increments
    std::vector<double> H0_at_row(static_cast<std::size_t>(n), 0.0);

    auto update_baseline = [&](const Eigen::VectorXd& weights) {
        std::vector<double> suffix_we(cd.order.size() + 1, 0.0);
        double acc = 0.0;
        for (std::size_t k = cd.order.size(); k-- > 0;) {
            const Eigen::Index i = cd.order[k];
            acc += weights[i] * std::exp(data.x.row(i).dot(fit.beta));
            suffix_we[k] = acc;
        }
        for (std::size_t j = 0; j < cd.event_times.size(); ++j) {
            h0[j] = cd.event_counts[j] / suffix_we[static_cast<std::size_t>(cd.risk_start[j])];
        }
        // cumulative hazard at each row's observed time
        double cum = 0.0;
        std::size_t j = 0;
        for (std::size_t k = 0; k < cd.order.size(); ++k) {
            const Eigen::Index i = cd.order[k];
            while (j < cd.event_times.size() && cd.event_times[j] <= data.time[i]) {
                cum += h0[j];
                ++j;
            }
            H0_at_row[static_cast<std::size_t>(i)] = cum;
        }
    };

    auto survival_at_row = [&](Eigen::Index i) {
        if (data.time[i] > fit.last_event_time) return 0.0;
        const double e = std::exp(data.x.row(i).dot(fit.beta));
        return std::exp(-e * H0_at_row[static_cast<std::size_t>(i)]);
    };

    auto observed_loglik = [&]() {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double pi =
                config.pin_incidence ? 1.0 - detail::kProbClamp : incidence(fit.b, X.row(i).transpose());
            if (data.event[i] == 1) {
                const double e = std::exp(data.x.row(i).dot(fit.beta));
                // hazard increment at this row's event time
                const auto it = std::lower_bound(cd.event_times.begin(), cd.event_times.end(),
                                                 data.time[i]);
                const double dh = h0[static_cast<std::size_t>(it - cd.event_times.begin())];
                total += std::log(pi) + std::log(dh * e) - e * H0_at_row[static_cast<std::size_t>(i)];
            } else {
                total += std::log((1.0 - pi) + pi * survival_at_row(i));
            }
        }
        return total;
    };

    Eigen::VectorXd weights = Eigen::VectorXd::Ones(n);
    update_baseline(weights);
    double prev = observed_loglik();
    fit.log_likelihood_trace.push_back(prev);

    for (int iter = 0; iter < config.em_max_iter; ++iter) {
        // E-step
        for (Eigen::Index i = 0; i < n; ++i) {
            if (data.event[i] == 1) {
                weights[i] = 1.0;
            } else {
                const double pi = config.pin_incidence
                                      ? 1.0 - detail::kProbClamp
                                      : incidence(fit.b, X.row(i).transpose());
                weights[i] = censored_weight(pi, survival_at_row(i));
            }
        }

        // M-step: incidence
        if (!config.pin_incidence) {
            auto [b_new, ok] = weighted_logistic_fit(weights, X, inner, fit.b);
            fit.b = b_new;
            // beyond |linear predictor| ~ 15 the clamped probabilities are
            // saturated; the intercept drifting there means separation
            if (!ok || fit.b.lpNorm<Eigen::Infinity>() > 15.0) fit.incidence_separation = true;
        }

        // M-step: latency via weighted Cox partial likelihood
        if (p > 0) {
            auto fn = [&](const Eigen::VectorXd& beta, Eigen::VectorXd& grad) {
                Eigen::VectorXd g;
                const double v = detail::cox_partial_loglik(data, cd, weights, beta, &g);
                grad = -g;
                return -v;
            };
            LbfgsOptions opts;
            opts.grad_tol = config.inner_tol;
            opts.max_iter = config.inner_max_iter;
            fit.beta = lbfgs_minimize(fn, fit.beta, opts).x;
        }
        update_baseline(weights);

        const double value = observed_loglik();
        fit.log_likelihood_trace.push_back(value);
        fit.iterations = iter + 1;
        if (std::abs(value - prev) / (1.0 + std::abs(value)) < config.em_tol) {
            fit.converged = true;
            break;
        }
        prev = value;
    }

    fit.baseline_times = cd.event_times;
    fit.baseline_survival.resize(h0.size());
    double cum = 0.0;
    for (std::size_t j = 0; j < h0.size(); ++j) {
        cum += h0[j];
        fit.baseline_survival[j] = std::exp(-cum);
    }
    return fit;
}

/// Predicted event risk 1 - S_pop(t | x) under the conventional fit;
/// `x_tilde` excludes the intercept. Beyond the last event time the zero
/// tail makes this pi(x).
inline double conventional_risk_score(const ConventionalFit& fit, const Eigen::VectorXd& x_tilde,
                                      double t) {
    if (t < 0.0) throw std::domain_error("conventional_risk_score: t must be nonnegative");
    Eigen::VectorXd x(x_tilde.size() + 1);
    x[0] = 1.0;
    x.tail(x_tilde.size()) = x_tilde;
    const double pi = incidence(fit.b, x);
    const double e = fit.beta.size() > 0 ? std::exp(x_tilde.dot(fit.beta)) : 1.0;
    const double s0 = fit.baseline_at(t);
    const double s = s0 > 0.0 ? std::pow(s0, e) : 0.0;
    return 1.0 - ((1.0 - pi) + pi * s);
}

}  // namespace fhcure
