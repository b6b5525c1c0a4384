#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/lbfgs.hpp"
#include "fhcure/model.hpp"
#include "fhcure/spline.hpp"

namespace fhcure {

struct FitConfig {
    double lambda = 1.0;       ///< L2 precision on the free spline log-weights
    double em_tol = 1e-8;      ///< relative change of the observed log-posterior
    int em_max_iter = 500;
    double inner_tol = 1e-9;   ///< gradient sup-norm for the quasi-Newton M-steps
    int inner_max_iter = 200;
    std::uint64_t seed = 0;    ///< reserved; the default zero start is deterministic
};

struct EmDiagnostics {
    int events_beyond_horizon = 0;  ///< rows with delta=1 and t >= c, assigned w=0
    int rows_below_horizon = 0;
    int events_below_horizon = 0;
    bool incidence_step_converged = true;
    bool latency_step_converged = true;
};

struct FitResult {
    FiniteHorizonParams params;
    std::vector<double> log_posterior_trace;
    Eigen::VectorXd weights;
    bool converged = false;
    int iterations = 0;
    double lambda = 0.0;
    EmDiagnostics diagnostics;
};

/// Per-dataset cache for likelihood work. Below-horizon rows are compacted
/// so every likelihood pass reduces to a few matrix-vector products against
/// the design matrix and the precomputed basis values / cumulative integrals
/// at the observed times (which never change during a fit).
class LikelihoodContext {
public:
    LikelihoodContext(const Dataset& data, const NormalizedBasis& basis)
        : data_(&data), basis_(&basis) {
        const Eigen::Index n = data.n();
        const Eigen::Index p = data.p();
        const auto K = static_cast<Eigen::Index>(basis.size());
        const double c = basis.horizon();

        design_.resize(n, p + 1);
        design_.col(0).setOnes();
        if (p > 0) design_.rightCols(p) = data.x;

        std::vector<Eigen::Index> below;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (data.time[i] < c) below.push_back(i);
        }
        n_below_ = static_cast<int>(below.size());
        rows_below_.resize(n_below_);
        xb_design_.resize(n_below_, p);
        basis_vals_.resize(n_below_, K);
        basis_cums_.resize(n_below_, K);
        event_below_.resize(n_below_);
        for (int k = 0; k < n_below_; ++k) {
            const Eigen::Index i = below[static_cast<std::size_t>(k)];
            rows_below_[k] = i;
            if (p > 0) xb_design_.row(k) = data.x.row(i);
            for (Eigen::Index kk = 0; kk < K; ++kk) {
                basis_vals_(k, kk) = basis.eval(static_cast<std::size_t>(kk), data.time[i]);
                basis_cums_(k, kk) = basis.cumulative(static_cast<std::size_t>(kk), data.time[i]);
            }
            event_below_[k] = data.event[i] == 1 ? 1.0 : 0.0;
            if (data.event[i] == 1) ++n_events_below_;
        }
    }

    const Dataset& data() const { return *data_; }
    const NormalizedBasis& basis() const { return *basis_; }
    const Eigen::MatrixXd& design() const { return design_; }
    bool below_horizon(Eigen::Index i) const { return data_->time[i] < basis_->horizon(); }
    int n_below() const { return n_below_; }
    int n_events_below() const { return n_events_below_; }
    const Eigen::VectorXi& rows_below() const { return rows_below_; }
    const Eigen::MatrixXd& latency_design() const { return xb_design_; }
    const Eigen::VectorXd& event_below() const { return event_below_; }
    const Eigen::MatrixXd& basis_values() const { return basis_vals_; }
    const Eigen::MatrixXd& basis_cumulatives() const { return basis_cums_; }

    /// Shared per-row latency state at (beta, gamma), below-horizon rows only.
    struct LatencyState {
        Eigen::VectorXd xb, e, f0, cum, s0, log_s0, log_sc, sc;
    };

    LatencyState latency_state(const Eigen::VectorXd& beta, const Eigen::VectorXd& gamma) const {
        LatencyState st;
        st.xb = data_->p() > 0 ? Eigen::VectorXd(xb_design_ * beta)
                               : Eigen::VectorXd::Zero(n_below_);
        st.e = st.xb.array().exp();
        st.f0 = basis_vals_ * gamma;
        st.cum = basis_cums_ * gamma;
        st.s0 = (1.0 - st.cum.array()).max(1e-300);
        st.log_s0 = st.s0.array().log().max(detail::kLogSurvivalFloor);
        st.log_sc = st.e.array() * st.log_s0.array();
        st.sc = st.log_sc.array().exp();
        return st;
    }

    /// Clamped incidence probabilities for every row at coefficients b.
    Eigen::VectorXd incidence_all(const Eigen::VectorXd& b) const {
        Eigen::VectorXd pi = design_ * b;
        for (Eigen::Index i = 0; i < pi.size(); ++i) {
            pi[i] = std::clamp(1.0 / (1.0 + std::exp(-pi[i])), detail::kProbClamp,
                               1.0 - detail::kProbClamp);
        }
        return pi;
    }

private:
    const Dataset* data_;
    const NormalizedBasis* basis_;
    Eigen::MatrixXd design_;
    Eigen::VectorXi rows_below_;
    Eigen::MatrixXd xb_design_;
    Eigen::MatrixXd basis_vals_;
    Eigen::MatrixXd basis_cums_;
    Eigen::VectorXd event_below_;
    int n_below_ = 0;
    int n_events_below_ = 0;
};

namespace detail {

/// Parameter packing order used everywhere downstream (precision matrices,
/// credible intervals, the evidence decomposition): (b, beta, alpha_free).
inline Eigen::VectorXd pack_params(const FiniteHorizonParams& params) {
    const Eigen::Index pb = params.b.size();
    const Eigen::Index pbeta = params.beta.size();
    const Eigen::Index ka = params.alpha.size() - 1;
    Eigen::VectorXd theta(pb + pbeta + ka);
    theta.head(pb) = params.b;
    theta.segment(pb, pbeta) = params.beta;
    theta.tail(ka) = params.alpha.head(ka);
    return theta;
}

inline void unpack_params(const Eigen::VectorXd& theta, FiniteHorizonParams& params) {
    const Eigen::Index pb = params.b.size();
    const Eigen::Index pbeta = params.beta.size();
    const Eigen::Index ka = params.alpha.size() - 1;
    params.b = theta.head(pb);
    params.beta = theta.segment(pb, pbeta);
    params.alpha.head(ka) = theta.tail(ka);
    params.alpha[ka] = 0.0;
}

}  // namespace detail

/// Posterior membership weight of a censored below-horizon row given its
/// incidence probability and latency survival.
inline double censored_weight(double pi, double latency_surv) {
    return pi * latency_surv / ((1.0 - pi) + pi * latency_surv);
}

/// Observed-data log-posterior: event rows contribute log(pi * f), censored
/// below-horizon rows log((1-pi) + pi * S), rows at or beyond the horizon
/// log(1-pi), minus the L2 penalty (lambda/2)||alpha||^2.
inline double observed_log_posterior(const LikelihoodContext& ctx,
                                     const FiniteHorizonParams& params, double lambda) {
    const Eigen::VectorXd gamma = mixture_weights(params.alpha);
    const Eigen::VectorXd pi = ctx.incidence_all(params.b);
    const auto st = ctx.latency_state(params.beta, gamma);

    double total = 0.0;
    // rows at or beyond the horizon: log(1 - pi), taken as the full sum
    // minus the below-horizon contribution
    for (Eigen::Index i = 0; i < pi.size(); ++i) total += std::log(1.0 - pi[i]);
    for (int k = 0; k < ctx.n_below(); ++k) {
        const Eigen::Index i = ctx.rows_below()[k];
        total -= std::log(1.0 - pi[i]);
        if (ctx.event_below()[k] == 1.0) {
            total += std::log(pi[i]) + st.xb[k] + std::log(st.f0[k]) +
                     (st.e[k] - 1.0) * st.log_s0[k];
        } else {
            total += std::log((1.0 - pi[i]) + pi[i] * st.sc[k]);
        }
    }
    const Eigen::Index ka = params.alpha.size() - 1;
    total -= 0.5 * lambda * params.alpha.head(ka).squaredNorm();

    if (!std::isfinite(total)) {
        // locate the offending row for the error message
        for (int k = 0; k < ctx.n_below(); ++k) {
            const Eigen::Index i = ctx.rows_below()[k];
            const double term =
                ctx.event_below()[k] == 1.0
                    ? std::log(pi[i]) + st.xb[k] + std::log(st.f0[k]) +
                          (st.e[k] - 1.0) * st.log_s0[k]
                    : std::log((1.0 - pi[i]) + pi[i] * st.sc[k]);
            if (!std::isfinite(term)) {
                throw NumericError("observed_log_posterior: non-finite contribution at row " +
                                   std::to_string(i));
            }
        }
        throw NumericError("observed_log_posterior: non-finite value");
    }
    return total;
}

inline double observed_log_posterior(const FiniteHorizonParams& params, const Dataset& data,
                                     double lambda) {
    LikelihoodContext ctx(data, params.basis);
    return observed_log_posterior(ctx, params, lambda);
}

/// Analytic gradient of the observed log-posterior in packed order
/// (b, beta, alpha_free).
inline Eigen::VectorXd observed_log_posterior_gradient(const LikelihoodContext& ctx,
                                                       const FiniteHorizonParams& params,
                                                       double lambda) {
    const Eigen::Index pb = params.b.size();
    const Eigen::Index pbeta = params.beta.size();
    const Eigen::Index K = params.alpha.size();
    const Eigen::Index ka = K - 1;
    const Eigen::VectorXd gamma = mixture_weights(params.alpha);
    const Eigen::VectorXd pi = ctx.incidence_all(params.b);
    const auto st = ctx.latency_state(params.beta, gamma);
    const int nb = ctx.n_below();

    // per-row multipliers: q against the incidence design, r against the
    // latency design, (u, v, s) against the basis value/cumulative columns
    Eigen::VectorXd q(pi.size());
    for (Eigen::Index i = 0; i < pi.size(); ++i) q[i] = -pi[i];
    Eigen::VectorXd r(nb), u(nb), v(nb);
    double scalar_sum = 0.0;
    for (int k = 0; k < nb; ++k) {
        const Eigen::Index i = ctx.rows_below()[k];
        if (ctx.event_below()[k] == 1.0) {
            q[i] = 1.0 - pi[i];
            r[k] = 1.0 + st.e[k] * st.log_s0[k];
            u[k] = 1.0 / st.f0[k];
            v[k] = -(st.e[k] - 1.0) / st.s0[k];
            scalar_sum += -1.0 + (st.e[k] - 1.0) * st.cum[k] / st.s0[k];
        } else {
            const double denom = (1.0 - pi[i]) + pi[i] * st.sc[k];
            q[i] = pi[i] * (1.0 - pi[i]) * (st.sc[k] - 1.0) / denom;
            const double common = pi[i] * st.sc[k] / denom;
            r[k] = common * st.e[k] * st.log_s0[k];
            u[k] = 0.0;
            v[k] = -common * st.e[k] / st.s0[k];
            scalar_sum += common * st.e[k] * st.cum[k] / st.s0[k];
        }
    }

    Eigen::VectorXd grad(pb + pbeta + ka);
    grad.head(pb) = ctx.design().transpose() * q;
    if (pbeta > 0) grad.segment(pb, pbeta) = ctx.latency_design().transpose() * r;
    const Eigen::VectorXd basis_part =
        ctx.basis_values().transpose() * u + ctx.basis_cumulatives().transpose() * v +
        Eigen::VectorXd::Constant(K, scalar_sum);
    grad.tail(ka) =
        gamma.head(ka).array() * basis_part.head(ka).array() - lambda * params.alpha.head(ka).array();
    return grad;
}

/// E-step responsibilities: 1 for observed events below the horizon, the
/// posterior membership weight for censored rows below the horizon, and 0
/// for every row at or beyond the horizon. The last case applies even when
/// delta=1 (the event happened outside the window of interest); such rows
/// are counted in the fit diagnostics.
inline Eigen::VectorXd e_step(const LikelihoodContext& ctx, const FiniteHorizonParams& params) {
    const Eigen::VectorXd gamma = mixture_weights(params.alpha);
    const Eigen::VectorXd pi = ctx.incidence_all(params.b);
    const auto st = ctx.latency_state(params.beta, gamma);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(ctx.data().n());
    for (int k = 0; k < ctx.n_below(); ++k) {
        const Eigen::Index i = ctx.rows_below()[k];
        w[i] = ctx.event_below()[k] == 1.0 ? 1.0 : censored_weight(pi[i], st.sc[k]);
    }
    return w;
}

inline Eigen::VectorXd e_step(const FiniteHorizonParams& params, const Dataset& data) {
    LikelihoodContext ctx(data, params.basis);
    return e_step(ctx, params);
}

/// Weighted Bernoulli log-likelihood fit by quasi-Newton: the incidence
/// M-step here and the same step of the conventional benchmark. Perfect
/// separation stops at the iteration cap with the coefficients still finite
/// (the probability clamp bounds the objective).
inline std::pair<Eigen::VectorXd, bool> weighted_logistic_fit(const Eigen::VectorXd& weights,
                                                              const Eigen::MatrixXd& X,
                                                              const FitConfig& config,
                                                              const Eigen::VectorXd& b_init) {
    auto fn = [&](const Eigen::VectorXd& b, Eigen::VectorXd& grad) -> double {
        Eigen::VectorXd pi = X * b;
        double value = 0.0;
        for (Eigen::Index i = 0; i < X.rows(); ++i) {
            pi[i] = std::clamp(1.0 / (1.0 + std::exp(-pi[i])), detail::kProbClamp,
                               1.0 - detail::kProbClamp);
            value += weights[i] * std::log(pi[i]) + (1.0 - weights[i]) * std::log(1.0 - pi[i]);
        }
        grad = X.transpose() * (pi - weights);
        return -value;
    };
    LbfgsOptions opts;
    opts.grad_tol = config.inner_tol;
    opts.max_iter = config.inner_max_iter;
    const LbfgsResult res = lbfgs_minimize(fn, b_init, opts);
    return {res.x, res.converged};
}

inline std::pair<Eigen::VectorXd, bool> m_step_incidence(const Eigen::VectorXd& weights,
                                                         const LikelihoodContext& ctx,
                                                         const FitConfig& config,
                                                         const Eigen::VectorXd& b_init) {
    return weighted_logistic_fit(weights, ctx.design(), config, b_init);
}

inline Eigen::VectorXd m_step_incidence(const Eigen::VectorXd& weights, const Dataset& data,
                                        const FitConfig& config = {}) {
    Eigen::MatrixXd X(data.n(), data.p() + 1);
    X.col(0).setOnes();
    if (data.p() > 0) X.rightCols(data.p()) = data.x;
    return weighted_logistic_fit(weights, X, config, Eigen::VectorXd::Zero(data.p() + 1)).first;
}

struct LatencyStep {
    Eigen::VectorXd beta;
    Eigen::VectorXd alpha;
    bool converged = false;
};

/// M-step for the latency block: maximizes the weighted latency
/// log-likelihood minus the alpha penalty jointly over (beta, alpha_free).
/// Rows with zero weight drop out. `freeze_beta` is a diagnostic hook that
/// optimizes alpha with beta held at its initial value.
inline LatencyStep m_step_latency(const Eigen::VectorXd& weights, const LikelihoodContext& ctx,
                                  double lambda, const FitConfig& config,
                                  const Eigen::VectorXd& beta_init,
                                  const Eigen::VectorXd& alpha_init, bool freeze_beta = false) {
    const Eigen::Index pbeta = ctx.data().p();
    const auto K = static_cast<Eigen::Index>(ctx.basis().size());
    const Eigen::Index ka = K - 1;
    const int nb = ctx.n_below();

    Eigen::VectorXd wb(nb);
    double weight_mass = 0.0;
    for (int k = 0; k < nb; ++k) {
        wb[k] = weights[ctx.rows_below()[k]];
        weight_mass += wb[k];
    }
    if (!(weight_mass > 0.0)) {
        throw DataError("m_step_latency: no rows with positive weight below the horizon");
    }

    const Eigen::Index nbeta = freeze_beta ? 0 : pbeta;
    Eigen::VectorXd theta0(nbeta + ka);
    if (!freeze_beta) theta0.head(pbeta) = beta_init;
    theta0.tail(ka) = alpha_init.head(ka);

    Eigen::VectorXd alpha_full(K);
    auto fn = [&](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) -> double {
        const Eigen::VectorXd beta =
            freeze_beta ? beta_init : Eigen::VectorXd(theta.head(pbeta));
        alpha_full.head(ka) = theta.tail(ka);
        alpha_full[ka] = 0.0;
        const Eigen::VectorXd gamma = mixture_weights(alpha_full);
        const auto st = ctx.latency_state(beta, gamma);

        double value = 0.0;
        Eigen::VectorXd r(nb), u(nb), v(nb);
        double scalar_sum = 0.0;
        for (int k = 0; k < nb; ++k) {
            const double w = wb[k];
            if (w == 0.0) {
                r[k] = u[k] = v[k] = 0.0;
                continue;
            }
            if (ctx.event_below()[k] == 1.0) {
                value += w * (st.xb[k] + std::log(st.f0[k]) + (st.e[k] - 1.0) * st.log_s0[k]);
                r[k] = w * (1.0 + st.e[k] * st.log_s0[k]);
                u[k] = w / st.f0[k];
                v[k] = -w * (st.e[k] - 1.0) / st.s0[k];
                scalar_sum += w * (-1.0 + (st.e[k] - 1.0) * st.cum[k] / st.s0[k]);
            } else {
                value += w * st.log_sc[k];
                r[k] = w * st.e[k] * st.log_s0[k];
                u[k] = 0.0;
                v[k] = -w * st.e[k] / st.s0[k];
                scalar_sum += w * st.e[k] * st.cum[k] / st.s0[k];
            }
        }
        value -= 0.5 * lambda * alpha_full.head(ka).squaredNorm();

        grad.resize(theta.size());
        if (!freeze_beta && pbeta > 0) {
            grad.head(pbeta) = ctx.latency_design().transpose() * r;
        }
        const Eigen::VectorXd basis_part =
            ctx.basis_values().transpose() * u + ctx.basis_cumulatives().transpose() * v +
            Eigen::VectorXd::Constant(K, scalar_sum);
        grad.tail(ka) = gamma.head(ka).array() * basis_part.head(ka).array() -
                        lambda * alpha_full.head(ka).array();
        grad = -grad;
        return -value;
    };

    LbfgsOptions opts;
    opts.grad_tol = config.inner_tol;
    opts.max_iter = config.inner_max_iter;
    const LbfgsResult res = lbfgs_minimize(fn, theta0, opts);

    LatencyStep out;
    out.beta = freeze_beta ? beta_init : Eigen::VectorXd(res.x.head(pbeta));
    out.alpha.resize(K);
    out.alpha.head(ka) = res.x.tail(ka);
    out.alpha[ka] = 0.0;
    out.converged = res.converged;
    return out;
}

/// MAP fit of (b, beta, alpha) by EM at a fixed penalty lambda.
///
/// Starts from b = 0, beta = 0, alpha = 0 (uniform mixture) unless an
/// initial parameter set is given, and alternates the E-step with the two
/// M-steps until the relative change of the observed log-posterior drops
/// below `em_tol`. Each M-step is warm-started at the previous estimate and
/// only accepts non-decreasing steps, so the trace is nondecreasing up to
/// floating-point rounding even when an inner solve hits its iteration cap.
inline FitResult fit_map(const Dataset& data, double c, std::size_t K, const FitConfig& config,
                         std::optional<FiniteHorizonParams> init = std::nullopt) {
    data.validate();
    if (!(c > 0.0)) throw std::invalid_argument("fit_map: horizon must be positive");

    std::vector<double> event_times;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.event[i] == 1 && data.time[i] < c) event_times.push_back(data.time[i]);
    }
    if (event_times.empty()) throw DataError("fit_map: no observed events below the horizon");

    FiniteHorizonParams params =
        init ? *init
             : FiniteHorizonParams{Eigen::VectorXd::Zero(data.p() + 1),
                                   Eigen::VectorXd::Zero(data.p()),
                                   Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K)),
                                   NormalizedBasis(build_knots(c, K, event_times))};

    LikelihoodContext ctx(data, params.basis);

    FitResult result;
    result.lambda = config.lambda;
    result.diagnostics.rows_below_horizon = ctx.n_below();
    result.diagnostics.events_below_horizon = ctx.n_events_below();
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.event[i] == 1 && !ctx.below_horizon(i)) {
            ++result.diagnostics.events_beyond_horizon;
        }
    }

    double prev = observed_log_posterior(ctx, params, config.lambda);
    result.log_posterior_trace.push_back(prev);

    for (int iter = 0; iter < config.em_max_iter; ++iter) {
        const Eigen::VectorXd weights = e_step(ctx, params);

        auto [b_new, inc_ok] = m_step_incidence(weights, ctx, config, params.b);
        params.b = b_new;
        result.diagnostics.incidence_step_converged = inc_ok;

        const LatencyStep latency =
            m_step_latency(weights, ctx, config.lambda, config, params.beta, params.alpha);
        params.beta = latency.beta;
        params.alpha = latency.alpha;
        result.diagnostics.latency_step_converged = latency.converged;

        const double value = observed_log_posterior(ctx, params, config.lambda);
        result.log_posterior_trace.push_back(value);
        result.iterations = iter + 1;
        if (std::abs(value - prev) / (1.0 + std::abs(value)) < config.em_tol) {
            result.converged = true;
            prev = value;
            break;
        }
        prev = value;
    }

    result.params = params;
    result.weights = e_step(ctx, params);
    return result;
}

}  // namespace fhcure
