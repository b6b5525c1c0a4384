#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/em.hpp"
#include "fhcure/laplace.hpp"

namespace fhcure {

struct EbConfig {
    double lambda_init = 1.0;
    double outer_tol = 1e-6;   ///< on the change of the approximate log marginal
    int max_outer = 50;
    double lambda_max = 1e6;   ///< upper end of the root scan
    int scan_points = 400;
    double root_slope_tol = 1e-6;  ///< |g(lambda_hat)| required of a stable fixed point
};

struct EbState {
    double lambda_hat = 0.0;
    double log_marginal = 0.0;
    Eigen::VectorXd mu;  ///< eigenvalues of the Schur complement at the final fit
    int outer_iterations = 0;
    bool converged = false;
    std::vector<double> lambda_trace;
    std::vector<double> marginal_trace;
    Eigen::VectorXd theta_before_refit;  ///< packed estimate entering the final refit
};

struct SchurResult {
    Eigen::MatrixXd S;
    bool ridge_applied = false;
};

/// Schur complement of the (b, beta) block: S = H_aa - H_at * H_tt^-1 * H_ta,
/// symmetrized. A numerically singular H_tt is ridge-stabilized by 1e-10 I.
inline SchurResult schur_complement(const Eigen::MatrixXd& H, Eigen::Index dim_theta_tilde) {
    const Eigen::Index m = H.rows();
    const Eigen::Index ka = m - dim_theta_tilde;
    if (ka <= 0 || dim_theta_tilde <= 0) {
        throw std::invalid_argument("schur_complement: empty block");
    }
    const Eigen::MatrixXd Htt = H.topLeftCorner(dim_theta_tilde, dim_theta_tilde);
    const Eigen::MatrixXd Hta = H.topRightCorner(dim_theta_tilde, ka);
    const Eigen::MatrixXd Hat = H.bottomLeftCorner(ka, dim_theta_tilde);
    const Eigen::MatrixXd Haa = H.bottomRightCorner(ka, ka);

    SchurResult out;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Htt);
    Eigen::MatrixXd solved;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
        solved = ldlt.solve(Hta);
    } else {
        out.ridge_applied = true;
        Eigen::MatrixXd ridged =
            Htt + 1e-10 * Eigen::MatrixXd::Identity(dim_theta_tilde, dim_theta_tilde);
        solved = ridged.ldlt().solve(Hta);
    }
    Eigen::MatrixXd S = Haa - Hat * solved;
    out.S = 0.5 * (S + S.transpose());
    return out;
}

/// Stationarity function of the evidence in lambda, on the domain
/// lambda > max(0, -mu_min).
inline double g_eval(double lambda, const Eigen::VectorXd& mu, double alpha_norm_sq) {
    const double lo = std::max(0.0, -mu.minCoeff());
    if (!(lambda > lo)) {
        throw std::domain_error("g_eval: lambda must exceed max(0, -mu_min)");
    }
    double s = 0.0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) s += mu[i] / (mu[i] + lambda);
    return s - lambda * alpha_norm_sq;
}

inline double g_prime(double lambda, const Eigen::VectorXd& mu, double alpha_norm_sq) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
        const double d = mu[i] + lambda;
        s += mu[i] / (d * d);
    }
    return -s - alpha_norm_sq;
}

/// All roots of g on (max(0,-mu_min), lambda_max] at which g is decreasing:
/// a 400-point log grid brackets the sign changes and each bracket is
/// bisected to 1e-10 relative width.
inline std::vector<double> find_lambda_candidates(const Eigen::VectorXd& mu,
                                                  const Eigen::VectorXd& alpha_hat,
                                                  double lambda_max = 1e6,
                                                  int scan_points = 400) {
    const double a2 = alpha_hat.squaredNorm();
    const double lo = std::max(0.0, -mu.minCoeff());
    const double hi = std::max(lambda_max, 100.0 * (lo + 1.0));

    // geometric grid in the shifted variable s = lambda - lo
    const double s_min = 1e-10 * (1.0 + lo);
    const double s_max = hi - lo;
    if (!(s_max > s_min)) return {};
    std::vector<double> grid(static_cast<std::size_t>(scan_points));
    const double ratio = std::log(s_max / s_min) / (scan_points - 1);
    for (int k = 0; k < scan_points; ++k) grid[static_cast<std::size_t>(k)] = lo + s_min * std::exp(ratio * k);

    auto g = [&](double lam) { return g_eval(lam, mu, a2); };

    std::vector<double> roots;
    double prev_l = grid[0];
    double prev_g = g(prev_l);
    for (std::size_t k = 1; k < grid.size(); ++k) {
        const double cur_l = grid[k];
        const double cur_g = g(cur_l);
        if ((prev_g > 0.0 && cur_g < 0.0) || (prev_g < 0.0 && cur_g > 0.0) || prev_g == 0.0) {
            double a = prev_l, b = cur_l, ga = prev_g;
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (a + b);
                const double gm = g(mid);
                if (std::abs(gm) <= 1e-13 || (b - a) <= 1e-12 * std::max(1.0, mid)) {
                    a = b = mid;
                    break;
                }
                if ((ga > 0.0) == (gm > 0.0)) {
                    a = mid;
                    ga = gm;
                } else {
                    b = mid;
                }
            }
            const double root = 0.5 * (a + b);
            if (g_prime(root, mu, a2) < 0.0) {
                if (roots.empty() || std::abs(root - roots.back()) > 1e-9 * (1.0 + root)) {
                    roots.push_back(root);
                }
            }
        }
        prev_l = cur_l;
        prev_g = cur_g;
    }
    return roots;
}

/// Laplace-approximated log marginal likelihood assembled from its parts:
/// loglik at the mode + prior at the mode + Gaussian volume. The lambda-free
/// constant (M - M_alpha)/2 * log(2*pi) is kept so the quadratic-model case
/// matches the exact Gaussian evidence.
inline double log_marginal_core(double loglik_at_mode, Eigen::Index m_alpha, double lambda,
                                double alpha_norm_sq, double logdet_A, Eigen::Index m_total) {
    static const double log2pi = std::log(2.0 * 3.14159265358979323846);
    return loglik_at_mode + 0.5 * static_cast<double>(m_alpha) * std::log(lambda) -
           0.5 * lambda * alpha_norm_sq - 0.5 * logdet_A +
           0.5 * static_cast<double>(m_total - m_alpha) * log2pi;
}

/// Log marginal evaluated from a fitted mode and its precision matrix. The
/// log-determinant comes from an LDLT factorization; a non-PD precision is
/// refused.
inline double log_marginal(double lambda, const Dataset& data,
                           const FiniteHorizonParams& theta_hat, const PrecisionMatrix& prec) {
    if (!prec.positive_definite) {
        throw NumericError("log_marginal: precision matrix is not positive definite");
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(prec.A);
    const double logdet = ldlt.vectorD().array().log().sum();
    const Eigen::Index ka = theta_hat.alpha.size() - 1;
    const double loglik = observed_log_posterior(theta_hat, data, 0.0);
    return log_marginal_core(loglik, ka, lambda, theta_hat.alpha.head(ka).squaredNorm(), logdet,
                             prec.A.rows());
}

namespace detail {

/// log|A(lambda)| via the Schur identity: log|H_tt| + sum log(mu_i + lambda).
inline double logdet_via_spectrum(double logdet_htt, const Eigen::VectorXd& mu, double lambda) {
    double s = logdet_htt;
    for (Eigen::Index i = 0; i < mu.size(); ++i) s += std::log(mu[i] + lambda);
    return s;
}

}  // namespace detail

/// Empirical Bayes estimation of the penalty: alternate MAP fitting with the
/// evidence-stationarity update for lambda until the approximate log
/// marginal stabilizes, then refit at the selected lambda.
///
/// The candidate set for each update consists of the decreasing-crossing
/// roots of g; when the scan finds none, the update falls back to the
/// argmax of the log marginal over the scan grid. Convergence additionally
/// requires the selected lambda to remain a root of g under the spectrum of
/// the refit, so the returned state always satisfies the root contract when
/// `converged` is true.
inline std::pair<FitResult, EbState> fit_empirical_bayes(const Dataset& data, double c,
                                                         std::size_t K, const FitConfig& fit_cfg,
                                                         const EbConfig& eb_cfg = {}) {
    FitConfig cfg = fit_cfg;
    cfg.lambda = eb_cfg.lambda_init;

    EbState state;
    FitResult fit;
    std::optional<FiniteHorizonParams> warm;
    double prev_marginal = std::numeric_limits<double>::quiet_NaN();
    double best_marginal = -std::numeric_limits<double>::infinity();
    double best_lambda = cfg.lambda;

    for (int outer = 0; outer < eb_cfg.max_outer; ++outer) {
        fit = fit_map(data, c, K, cfg, warm);
        warm = fit.params;
        state.outer_iterations = outer + 1;

        // Negative Hessian of the log-likelihood (penalty excluded).
        LikelihoodContext ctx(data, fit.params.basis);
        FiniteHorizonParams work = fit.params;
        auto gradient = [&](const Eigen::VectorXd& theta) {
            detail::unpack_params(theta, work);
            return observed_log_posterior_gradient(ctx, work, 0.0);
        };
        const Eigen::VectorXd theta_hat = detail::pack_params(fit.params);
        const Eigen::MatrixXd H = -hessian_from_gradient(gradient, theta_hat);

        const Eigen::Index dim_tt = fit.params.b.size() + fit.params.beta.size();
        const Eigen::Index ka = fit.params.alpha.size() - 1;
        const SchurResult schur = schur_complement(H, dim_tt);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(schur.S, Eigen::EigenvaluesOnly);
        const Eigen::VectorXd mu = eig.eigenvalues();
        const Eigen::VectorXd alpha_free = fit.params.alpha.head(ka);
        const double a2 = alpha_free.squaredNorm();

        Eigen::LDLT<Eigen::MatrixXd> ldlt_tt(
            Eigen::MatrixXd(H.topLeftCorner(dim_tt, dim_tt)));
        const double logdet_htt = ldlt_tt.vectorD().array().abs().log().sum();
        const double loglik = observed_log_posterior(ctx, fit.params, 0.0);

        auto marginal_at = [&](double lam) {
            return log_marginal_core(loglik, ka, lam, a2,
                                     detail::logdet_via_spectrum(logdet_htt, mu, lam),
                                     theta_hat.size());
        };

        std::vector<double> candidates =
            find_lambda_candidates(mu, alpha_free, eb_cfg.lambda_max, eb_cfg.scan_points);
        double lambda_new;
        if (!candidates.empty()) {
            lambda_new = candidates.front();
            double best = marginal_at(lambda_new);
            for (double cand : candidates) {
                const double v = marginal_at(cand);
                if (v > best) {
                    best = v;
                    lambda_new = cand;
                }
            }
        } else {
            // no stationary point: fall back to the grid argmax
            const double lo = std::max(0.0, -mu.minCoeff());
            const double s_min = 1e-10 * (1.0 + lo);
            const double s_max = std::max(eb_cfg.lambda_max, 100.0 * (lo + 1.0)) - lo;
            const double ratio = std::log(s_max / s_min) / (eb_cfg.scan_points - 1);
            lambda_new = lo + s_min;
            double best = marginal_at(lambda_new);
            for (int k = 1; k < eb_cfg.scan_points; ++k) {
                const double lam = lo + s_min * std::exp(ratio * k);
                const double v = marginal_at(lam);
                if (v > best) {
                    best = v;
                    lambda_new = lam;
                }
            }
        }

        const double marginal = marginal_at(lambda_new);
        state.lambda_hat = lambda_new;
        state.log_marginal = marginal;
        state.mu = mu;
        state.lambda_trace.push_back(lambda_new);
        state.marginal_trace.push_back(marginal);
        state.theta_before_refit = theta_hat;
        if (marginal > best_marginal) {
            best_marginal = marginal;
            best_lambda = lambda_new;
        }

        // Converged once the evidence stops moving and the previous lambda is
        // still (numerically) a root under the current spectrum. When g has
        // no stationary point the root condition is vacuous and the evidence
        // criterion alone decides.
        const bool marginal_stable =
            std::isfinite(prev_marginal) && std::abs(marginal - prev_marginal) < eb_cfg.outer_tol;
        bool root_stable = candidates.empty();
        if (!root_stable && marginal_stable && cfg.lambda > std::max(0.0, -mu.minCoeff())) {
            root_stable = std::abs(g_eval(cfg.lambda, mu, a2)) < eb_cfg.root_slope_tol &&
                          g_prime(cfg.lambda, mu, a2) < 0.0;
        }
        prev_marginal = marginal;
        cfg.lambda = lambda_new;
        if (marginal_stable && root_stable) {
            state.converged = true;
            break;
        }
    }

    if (!state.converged) {
        cfg.lambda = best_lambda;
        state.lambda_hat = best_lambda;
        state.log_marginal = best_marginal;
    }

    // Final MAP refit at the selected lambda.
    fit = fit_map(data, c, K, cfg, warm);
    return {fit, state};
}

}  // namespace fhcure
