#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

namespace fhcure {

struct LbfgsOptions {
    double grad_tol = 1e-9;   ///< convergence on the gradient sup-norm
    int max_iter = 200;
    int history = 10;
    int max_line_search = 60;
};

struct LbfgsResult {
    Eigen::VectorXd x;
    double f = 0.0;
    Eigen::VectorXd grad;
    int iterations = 0;
    bool converged = false;
};

/// Limited-memory BFGS minimizer with backtracking line search (Armijo
/// sufficient decrease, quadratic interpolation between trials).
///
/// `fn(x, grad)` returns the objective value and fills the gradient. Only
/// strictly non-increasing steps are accepted, so callers that maximize a
/// warm-started objective (EM M-steps) keep their monotonicity guarantee
/// even when the iteration cap is reached before `grad_tol`. Iteration also
/// stops once improvements fall to floating-point resolution; at that point
/// the gradient cannot be pushed lower.
inline LbfgsResult lbfgs_minimize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& fn,
    const Eigen::VectorXd& x0, const LbfgsOptions& opts = {}) {
    using Eigen::VectorXd;

    LbfgsResult result;
    VectorXd x = x0;
    VectorXd grad(x.size());
    double f = fn(x, grad);

    std::deque<VectorXd> s_hist, y_hist;
    std::deque<double> rho_hist;
    int stagnant = 0;

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (grad.lpNorm<Eigen::Infinity>() <= opts.grad_tol) {
            result.converged = true;
            result.iterations = iter;
            break;
        }

        // two-loop recursion
        VectorXd q = grad;
        std::vector<double> a(s_hist.size());
        for (std::size_t k = s_hist.size(); k-- > 0;) {
            a[k] = rho_hist[k] * s_hist[k].dot(q);
            q -= a[k] * y_hist[k];
        }
        if (!s_hist.empty()) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= gamma;
        }
        for (std::size_t k = 0; k < s_hist.size(); ++k) {
            const double bk = rho_hist[k] * y_hist[k].dot(q);
            q += (a[k] - bk) * s_hist[k];
        }
        VectorXd direction = -q;
        double dg = direction.dot(grad);
        if (!(dg < 0.0)) {  // not a descent direction: restart from steepest descent
            direction = -grad;
            dg = -grad.squaredNorm();
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        double step = 1.0;
        if (iter == 0 && s_hist.empty()) {
            step = 1.0 / std::max(1.0, grad.lpNorm<Eigen::Infinity>());
        }

        const double c1 = 1e-4;
        VectorXd x_new;
        VectorXd grad_new(x.size());
        double f_new = f;
        bool accepted = false;
        for (int ls = 0; ls < opts.max_line_search; ++ls) {
            x_new = x + step * direction;
            f_new = fn(x_new, grad_new);
            if (std::isfinite(f_new) && f_new <= f + c1 * step * dg) {
                accepted = true;
                break;
            }
            // quadratic interpolation through f(0), f'(0), f(step)
            double next = step;
            if (std::isfinite(f_new)) {
                const double denom = 2.0 * (f_new - f - dg * step);
                if (denom > 0.0) next = -dg * step * step / denom;
            } else {
                next = 0.1 * step;
            }
            step = std::clamp(next, 0.1 * step, 0.5 * step);
        }
        if (!accepted || f_new > f) {
            result.iterations = iter;
            break;  // no further progress possible along this direction
        }
        if (f - f_new <= 1e-14 * (1.0 + std::abs(f))) {
            ++stagnant;
        } else {
            stagnant = 0;
        }

        const VectorXd s = x_new - x;
        const VectorXd y = grad_new - grad;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > opts.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }

        x = std::move(x_new);
        grad = std::move(grad_new);
        f = f_new;
        result.iterations = iter + 1;
        if (stagnant >= 2) break;  // objective at floating-point resolution
    }

    if (grad.lpNorm<Eigen::Infinity>() <= opts.grad_tol) result.converged = true;
    result.x = std::move(x);
    result.f = f;
    result.grad = std::move(grad);
    return result;
}

}  // namespace fhcure
