#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fhcure/common.hpp"

namespace fhcure {

/// Product-limit survival estimate as a right-continuous step function.
struct StepSurvival {
    std::vector<double> times;     ///< distinct event times with at least one event
    std::vector<double> survival;  ///< value after each jump
    std::vector<int> n_risk;
    std::vector<int> n_event;

    double at(double t) const {
        const auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 1.0;
        return survival[static_cast<std::size_t>(it - times.begin()) - 1];
    }
};

/// Kaplan-Meier estimator. At tied times, events are processed before
/// censorings, so same-time censored subjects remain in the risk set for
/// that jump.
inline StepSurvival kaplan_meier(const std::vector<double>& times, const std::vector<int>& events) {
    if (times.empty() || times.size() != events.size()) {
        throw DataError("kaplan_meier: empty input or length mismatch");
    }
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (times[a] != times[b]) return times[a] < times[b];
        return events[a] > events[b];
    });

    StepSurvival out;
    double s = 1.0;
    int at_risk = static_cast<int>(times.size());
    std::size_t k = 0;
    while (k < order.size()) {
        const double t = times[order[k]];
        int d = 0, cen = 0;
        while (k < order.size() && times[order[k]] == t) {
            if (events[order[k]] == 1) ++d;
            else ++cen;
            ++k;
        }
        if (d > 0) {
            s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
            out.times.push_back(t);
            out.survival.push_back(s);
            out.n_risk.push_back(at_risk);
            out.n_event.push_back(d);
        }
        at_risk -= d + cen;
    }
    return out;
}

/// Root mean integrated squared error of estimated curves against the truth
/// on [0, c]: sqrt of the mean over replications of (1/c) * trapezoid
/// integral of the squared deviation, on J+1 equally spaced nodes
/// (spacing c/J).
inline double rmise(const std::vector<std::function<double(double)>>& estimates,
                    const std::function<double(double)>& truth, double c, int grid_intervals = 1000) {
    if (estimates.empty()) throw std::invalid_argument("rmise: no replications");
    if (!(c > 0.0)) throw std::invalid_argument("rmise: horizon must be positive");
    if (grid_intervals < 2) throw std::invalid_argument("rmise: need at least 2 grid intervals");

    const double dt = c / grid_intervals;
    std::vector<double> true_vals(static_cast<std::size_t>(grid_intervals) + 1);
    for (int j = 0; j <= grid_intervals; ++j) true_vals[static_cast<std::size_t>(j)] = truth(j * dt);

    double mean_ise = 0.0;
    for (const auto& est : estimates) {
        double integral = 0.0;
        double prev_sq = 0.0;
        for (int j = 0; j <= grid_intervals; ++j) {
            const double d = est(j * dt) - true_vals[static_cast<std::size_t>(j)];
            const double sq = d * d;
            if (j > 0) integral += 0.5 * (prev_sq + sq) * dt;
            prev_sq = sq;
        }
        mean_ise += integral / c;
    }
    mean_ise /= static_cast<double>(estimates.size());
    return std::sqrt(mean_ise);
}

struct ParamSummary {
    std::string name;
    double truth = 0.0;
    double bias = 0.0;
    std::optional<double> sd;  ///< absent when only one replication
    double coverage = 0.0;
    double mean_width = 0.0;
};

struct StudySummary {
    std::vector<ParamSummary> params;
    std::optional<double> rmise;
    int replications = 0;
    int failures = 0;
};

/// Summarize per-replication estimates and intervals against the truth.
/// `estimates`, `lows`, `highs` are M x P.
inline StudySummary summarize(const Eigen::MatrixXd& estimates, const Eigen::MatrixXd& lows,
                              const Eigen::MatrixXd& highs, const Eigen::VectorXd& truth,
                              const std::vector<std::string>& names) {
    const Eigen::Index m = estimates.rows();
    const Eigen::Index p = estimates.cols();
    if (m == 0 || truth.size() != p || static_cast<Eigen::Index>(names.size()) != p) {
        throw std::invalid_argument("summarize: shape mismatch");
    }
    StudySummary out;
    out.replications = static_cast<int>(m);
    for (Eigen::Index j = 0; j < p; ++j) {
        ParamSummary ps;
        ps.name = names[static_cast<std::size_t>(j)];
        ps.truth = truth[j];
        const double mean = estimates.col(j).mean();
        ps.bias = mean - truth[j];
        if (m >= 2) {
            const double ss = (estimates.col(j).array() - mean).square().sum();
            ps.sd = std::sqrt(ss / static_cast<double>(m - 1));
        }
        int covered = 0;
        double width = 0.0;
        for (Eigen::Index r = 0; r < m; ++r) {
            if (lows(r, j) <= truth[j] && truth[j] <= highs(r, j)) ++covered;
            width += highs(r, j) - lows(r, j);
        }
        ps.coverage = static_cast<double>(covered) / static_cast<double>(m);
        ps.mean_width = width / static_cast<double>(m);
        out.params.push_back(std::move(ps));
    }
    return out;
}

/// Evaluation grid for the mean cumulative/dynamic AUC: distinct test event
/// times inside [tau1, tau2].
inline std::vector<double> auc_time_grid(const std::vector<double>& test_times,
                                         const std::vector<int>& test_events, double tau1,
                                         double tau2) {
    std::vector<double> grid;
    for (std::size_t i = 0; i < test_times.size(); ++i) {
        if (test_events[i] == 1 && test_times[i] >= tau1 && test_times[i] <= tau2) {
            grid.push_back(test_times[i]);
        }
    }
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

namespace detail {

/// Cumulative/dynamic AUC at a single time: cases are events with t_i <= t
/// (IPCW-weighted by 1/G(t_i) with G the censoring KM from training data),
/// controls are subjects with t_j > t. Tied scores count one half.
inline std::optional<double> auc_at_time(const std::vector<double>& test_times,
                                         const std::vector<int>& test_events,
                                         const std::vector<double>& scores,
                                         const StepSurvival& censor_km, double t) {
    std::vector<std::pair<double, double>> cases;  // (score, ipcw weight)
    std::vector<double> control_scores;
    for (std::size_t i = 0; i < test_times.size(); ++i) {
        if (test_times[i] <= t && test_events[i] == 1) {
            const double g = censor_km.at(test_times[i]);
            if (g <= 0.0) continue;
            cases.emplace_back(scores[i], 1.0 / g);
        } else if (test_times[i] > t) {
            control_scores.push_back(scores[i]);
        }
    }
    if (cases.empty() || control_scores.empty()) return std::nullopt;

    std::sort(control_scores.begin(), control_scores.end());
    double num = 0.0;
    double case_mass = 0.0;
    for (const auto& [score, w] : cases) {
        const auto lo = std::lower_bound(control_scores.begin(), control_scores.end(), score);
        const auto hi = std::upper_bound(control_scores.begin(), control_scores.end(), score);
        const double below = static_cast<double>(lo - control_scores.begin());
        const double tied = static_cast<double>(hi - lo);
        num += w * (below + 0.5 * tied);
        case_mass += w;
    }
    const double denom = case_mass * static_cast<double>(control_scores.size());
    if (denom <= 0.0) return std::nullopt;
    return num / denom;
}

}  // namespace detail

/// Mean cumulative/dynamic AUC over [tau1, tau2].
///
/// Censoring weights come from a Kaplan-Meier fit of the censoring
/// distribution on the training split; the per-time AUCs are averaged with
/// survival-decrement weights S(t_{k-1}) - S(t_k) of the test-time KM,
/// normalized over the window (the formula is spelled out in
/// docs/method_notes.md). `scores` has one row per grid time and one column
/// per test subject; larger means higher risk. Returns nullopt when the
/// window contains no usable event time.
inline std::optional<double> mean_cumulative_dynamic_auc(
    const std::vector<double>& train_times, const std::vector<int>& train_events,
    const std::vector<double>& test_times, const std::vector<int>& test_events,
    const std::vector<double>& grid, const Eigen::MatrixXd& scores, double tau1, double tau2) {
    if (!(tau1 < tau2)) throw std::invalid_argument("mean_cumulative_dynamic_auc: tau1 < tau2 required");
    if (grid.empty()) return std::nullopt;
    if (scores.rows() != static_cast<Eigen::Index>(grid.size()) ||
        scores.cols() != static_cast<Eigen::Index>(test_times.size())) {
        throw std::invalid_argument("mean_cumulative_dynamic_auc: score matrix shape mismatch");
    }

    // censoring distribution on training data: flip the event indicator
    std::vector<int> censor_ind(train_events.size());
    for (std::size_t i = 0; i < train_events.size(); ++i) censor_ind[i] = 1 - train_events[i];
    const StepSurvival censor_km = kaplan_meier(train_times, censor_ind);
    const StepSurvival test_km = kaplan_meier(test_times, test_events);

    double weighted = 0.0;
    double total_weight = 0.0;
    double prev_s = test_km.at(tau1);
    std::vector<double> row(test_times.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = scores(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i));
        const auto auc = detail::auc_at_time(test_times, test_events, row, censor_km, grid[k]);
        const double s_k = test_km.at(grid[k]);
        const double w = std::max(prev_s - s_k, 0.0);
        prev_s = s_k;
        if (auc && w > 0.0) {
            weighted += *auc * w;
            total_weight += w;
        }
    }
    if (total_weight <= 0.0) return std::nullopt;
    return weighted / total_weight;
}

/// Convenience overload for a time-constant score vector.
inline std::optional<double> mean_cumulative_dynamic_auc(
    const std::vector<double>& train_times, const std::vector<int>& train_events,
    const std::vector<double>& test_times, const std::vector<int>& test_events,
    const std::vector<double>& scores, double tau1, double tau2) {
    const std::vector<double> grid = auc_time_grid(test_times, test_events, tau1, tau2);
    Eigen::MatrixXd mat(static_cast<Eigen::Index>(grid.size()),
                        static_cast<Eigen::Index>(scores.size()));
    for (Eigen::Index k = 0; k < mat.rows(); ++k) {
        for (Eigen::Index i = 0; i < mat.cols(); ++i) mat(k, i) = scores[static_cast<std::size_t>(i)];
    }
    return mean_cumulative_dynamic_auc(train_times, train_events, test_times, test_events, grid,
                                       mat, tau1, tau2);
}

}  // namespace fhcure
