#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "fhcure/common.hpp"
#include "fhcure/em.hpp"
#include "fhcure/stats.hpp"

namespace fhcure {

/// Symmetric negative Hessian used as a Gaussian posterior precision.
struct PrecisionMatrix {
    Eigen::MatrixXd A;
    double min_eigenvalue = 0.0;
    bool positive_definite = false;
    bool eigen_floor_applied = false;
};

/// Central finite differences of a gradient callable: H[j][k] = d g_k / d
/// theta_j with step `rel_step * (1 + |theta_j|)`, symmetrized as (H+H')/2.
inline Eigen::MatrixXd hessian_from_gradient(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient,
    const Eigen::VectorXd& theta, double rel_step = 1e-5) {
    const Eigen::Index m = theta.size();
    Eigen::MatrixXd H(m, m);
    Eigen::VectorXd point = theta;
    for (Eigen::Index j = 0; j < m; ++j) {
        const double h = rel_step * (1.0 + std::abs(theta[j]));
        point[j] = theta[j] + h;
        const Eigen::VectorXd gp = gradient(point);
        point[j] = theta[j] - h;
        const Eigen::VectorXd gm = gradient(point);
        point[j] = theta[j];
        H.row(j) = ((gp - gm) / (2.0 * h)).transpose();
    }
    return 0.5 * (H + H.transpose());
}

/// Negative Hessian of the observed log-posterior at the MAP point, via
/// finite differences of the analytic gradient.
inline PrecisionMatrix precision_matrix(const FiniteHorizonParams& params_hat,
                                        const Dataset& data, double lambda) {
    LikelihoodContext ctx(data, params_hat.basis);
    FiniteHorizonParams work = params_hat;
    auto gradient = [&](const Eigen::VectorXd& theta) {
        detail::unpack_params(theta, work);
        return observed_log_posterior_gradient(ctx, work, lambda);
    };
    const Eigen::VectorXd theta_hat = detail::pack_params(params_hat);

    PrecisionMatrix out;
    out.A = -hessian_from_gradient(gradient, theta_hat);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.A, Eigen::EigenvaluesOnly);
    out.min_eigenvalue = eig.eigenvalues().minCoeff();
    out.positive_definite = out.min_eigenvalue > 0.0;
    return out;
}

/// Clamp the spectrum of a non-PD precision matrix from below; used only
/// when interval computation is forced on a degenerate fit.
inline PrecisionMatrix floor_eigenvalues(const PrecisionMatrix& prec, double floor_value) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(prec.A);
    Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(floor_value);
    PrecisionMatrix out;
    out.A = eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
    out.min_eigenvalue = vals.minCoeff();
    out.positive_definite = out.min_eigenvalue > 0.0;
    out.eigen_floor_applied = true;
    return out;
}

/// Per-parameter credible intervals theta_j -/+ z * sqrt((A^-1)_jj), where the
/// marginal variances come from symmetric solves against unit vectors.
/// Refuses a non-positive-definite precision unless `force`.
inline std::vector<std::pair<double, double>> credible_intervals(const PrecisionMatrix& prec,
                                                                 const Eigen::VectorXd& theta_hat,
                                                                 double level,
                                                                 bool force = false) {
    if (!(level >= 0.0 && level < 1.0)) {
        throw std::invalid_argument("credible_intervals: level must lie in [0, 1)");
    }
    const PrecisionMatrix* use = &prec;
    PrecisionMatrix floored;
    if (!prec.positive_definite) {
        if (!force) {
            throw NumericError(
                "credible_intervals: precision matrix is not positive definite (min eigenvalue " +
                std::to_string(prec.min_eigenvalue) + ")");
        }
        floored = floor_eigenvalues(prec, 1e-8);
        use = &floored;
    }
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(use->A);
    const double z = level == 0.0 ? 0.0 : normal_quantile(0.5 * (1.0 + level));
    std::vector<std::pair<double, double>> intervals;
    intervals.reserve(static_cast<std::size_t>(theta_hat.size()));
    Eigen::VectorXd unit = Eigen::VectorXd::Zero(theta_hat.size());
    for (Eigen::Index j = 0; j < theta_hat.size(); ++j) {
        unit[j] = 1.0;
        const double var = ldlt.solve(unit)[j];
        unit[j] = 0.0;
        const double half = z * std::sqrt(std::max(var, 0.0));
        intervals.emplace_back(theta_hat[j] - half, theta_hat[j] + half);
    }
    return intervals;
}

}  // namespace fhcure
