#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/spline.hpp"

namespace fhcure {

/// Right-censored survival data: observed time, event indicator, covariates.
/// The covariate matrix excludes the intercept; the incidence design vector
/// (1, x) is formed where needed.
struct Dataset {
    Eigen::VectorXd time;
    Eigen::VectorXi event;
    Eigen::MatrixXd x;  // N x p
    std::vector<std::string> feature_names;

    Eigen::Index n() const { return time.size(); }
    Eigen::Index p() const { return x.cols(); }

    void validate() const {
        if (time.size() == 0) throw DataError("Dataset: empty");
        if (event.size() != time.size() || (x.rows() != time.size() && x.cols() > 0)) {
            throw DataError("Dataset: column lengths disagree");
        }
        for (Eigen::Index i = 0; i < time.size(); ++i) {
            if (!(time[i] >= 0.0) || !std::isfinite(time[i])) {
                throw DataError("Dataset: observed time must be finite and nonnegative (row " +
                                std::to_string(i) + ")");
            }
            if (event[i] != 0 && event[i] != 1) {
                throw DataError("Dataset: event indicator must be 0 or 1 (row " +
                                std::to_string(i) + ")");
            }
        }
    }

    /// Indices of covariate columns that are constant, which make the
    /// incidence design collinear with the intercept.
    std::vector<Eigen::Index> constant_columns() const {
        std::vector<Eigen::Index> out;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            if (x.rows() == 0) continue;
            if ((x.col(j).array() == x(0, j)).all()) out.push_back(j);
        }
        return out;
    }
};

/// Parameters of the horizon-bounded mixture model: logistic incidence
/// coefficients b (with intercept), proportional-hazards latency coefficients
/// beta, and spline log-weights alpha with the last entry pinned at zero.
struct FiniteHorizonParams {
    Eigen::VectorXd b;      // p + 1
    Eigen::VectorXd beta;   // p
    Eigen::VectorXd alpha;  // K, alpha[K-1] == 0
    NormalizedBasis basis;

    double c() const { return basis.horizon(); }
    Eigen::Index K() const { return alpha.size(); }
};

/// Softmax weights of the baseline mixture. The last alpha entry must be the
/// pinned zero; the max is subtracted before exponentiating.
inline Eigen::VectorXd mixture_weights(const Eigen::VectorXd& alpha) {
    if (alpha.size() == 0) throw std::invalid_argument("mixture_weights: empty alpha");
    if (!alpha.allFinite()) throw std::invalid_argument("mixture_weights: non-finite alpha");
    if (alpha[alpha.size() - 1] != 0.0) {
        throw std::invalid_argument("mixture_weights: last alpha entry must be pinned at 0");
    }
    const double m = alpha.maxCoeff();
    Eigen::VectorXd w = (alpha.array() - m).exp();
    w /= w.sum();
    return w;
}

namespace detail {

inline void check_horizon_domain(double t, double c) {
    if (!(t >= 0.0 && t < c)) {
        throw std::domain_error("finite-horizon model: t must lie in [0, c)");
    }
}

constexpr double kLogSurvivalFloor = -700.0;
constexpr double kProbClamp = 1e-12;

}  // namespace detail

/// Baseline density f0(t) = sum_i gamma_i(alpha) * normalized basis_i(t).
inline double baseline_density(const FiniteHorizonParams& params, double t) {
    detail::check_horizon_domain(t, params.c());
    const Eigen::VectorXd gamma = mixture_weights(params.alpha);
    double f = 0.0;
    for (Eigen::Index i = 0; i < gamma.size(); ++i) {
        f += gamma[i] * params.basis.eval(static_cast<std::size_t>(i), t);
    }
    return f;
}

/// Baseline survival S0(t) = 1 - sum_i gamma_i * cumulative_i(t). Strictly
/// positive on [0, c); floored away from zero so that powers of it stay
/// finite for events within rounding distance of c.
inline double baseline_survival(const FiniteHorizonParams& params, double t) {
    detail::check_horizon_domain(t, params.c());
    const Eigen::VectorXd gamma = mixture_weights(params.alpha);
    double cum = 0.0;
    for (Eigen::Index i = 0; i < gamma.size(); ++i) {
        cum += gamma[i] * params.basis.cumulative(static_cast<std::size_t>(i), t);
    }
    return std::max(1.0 - cum, 1e-300);
}

inline double log_baseline_survival(const FiniteHorizonParams& params, double t) {
    return std::max(std::log(baseline_survival(params, t)), detail::kLogSurvivalFloor);
}

/// Latency survival S(t | x) = S0(t)^{exp(x' beta)}.
inline double latency_survival(const FiniteHorizonParams& params, double t,
                               const Eigen::VectorXd& x_tilde) {
    if (x_tilde.size() != params.beta.size()) {
        throw std::invalid_argument("latency_survival: covariate length mismatch");
    }
    const double e = std::exp(x_tilde.dot(params.beta));
    return std::exp(e * log_baseline_survival(params, t));
}

/// Latency density f(t | x) = exp(x' beta) f0(t) S0(t)^{exp(x' beta) - 1}.
inline double latency_density(const FiniteHorizonParams& params, double t,
                              const Eigen::VectorXd& x_tilde) {
    if (x_tilde.size() != params.beta.size()) {
        throw std::invalid_argument("latency_density: covariate length mismatch");
    }
    const double xb = x_tilde.dot(params.beta);
    const double e = std::exp(xb);
    const double logs0 = log_baseline_survival(params, t);
    return std::exp(xb + std::log(baseline_density(params, t)) + (e - 1.0) * logs0);
}

/// Time-constant hazard ratio exp((x1 - x2)' beta).
inline double hazard_ratio(const Eigen::VectorXd& beta, const Eigen::VectorXd& x1_tilde,
                           const Eigen::VectorXd& x2_tilde) {
    if (x1_tilde.size() != x2_tilde.size() || x1_tilde.size() != beta.size()) {
        throw std::invalid_argument("hazard_ratio: covariate length mismatch");
    }
    return std::exp((x1_tilde - x2_tilde).dot(beta));
}

/// Logistic incidence probability; x carries the leading 1. Clamped away
/// from {0, 1} so log-likelihood terms stay finite under separation.
inline double incidence(const Eigen::VectorXd& b, const Eigen::VectorXd& x) {
    if (b.size() != x.size()) throw std::invalid_argument("incidence: design length mismatch");
    const double p = 1.0 / (1.0 + std::exp(-x.dot(b)));
    return std::clamp(p, detail::kProbClamp, 1.0 - detail::kProbClamp);
}

/// Population survival (1 - pi(x)) + pi(x) S(t | x); x carries the leading 1.
inline double population_survival(const FiniteHorizonParams& params, double t,
                                  const Eigen::VectorXd& x) {
    if (x.size() != params.b.size()) {
        throw std::invalid_argument("population_survival: design length mismatch");
    }
    const double pi = incidence(params.b, x);
    const Eigen::VectorXd x_tilde = x.tail(x.size() - 1);
    return (1.0 - pi) + pi * latency_survival(params, t, x_tilde);
}

}  // namespace fhcure
