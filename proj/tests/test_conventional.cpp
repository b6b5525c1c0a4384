#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fhcure/conventional.hpp"
#include "fhcure/simulate.hpp"

using namespace fhcure;

namespace {

// Independent plain Cox fit: Newton-Raphson with the explicit Hessian of the
// Breslow partial likelihood, no shared code with the library path.
Eigen::VectorXd newton_cox(const Dataset& data) {
    const Eigen::Index p = data.p();
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    for (int it = 0; it < 50; ++it) {
        Eigen::VectorXd grad = Eigen::VectorXd::Zero(p);
        Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            if (data.event[i] != 1) continue;
            double s0 = 0.0;
            Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
            Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
            for (Eigen::Index j = 0; j < data.n(); ++j) {
                if (data.time[j] < data.time[i]) continue;
                const double e = std::exp(data.x.row(j).dot(beta));
                s0 += e;
                s1 += e * data.x.row(j).transpose();
                s2 += e * data.x.row(j).transpose() * data.x.row(j);
            }
            grad += data.x.row(i).transpose() - s1 / s0;
            hess += s2 / s0 - (s1 / s0) * (s1 / s0).transpose();
        }
        const Eigen::VectorXd delta = hess.ldlt().solve(grad);
        beta += delta;
        if (delta.lpNorm<Eigen::Infinity>() < 1e-12) break;
    }
    return beta;
}

}  // namespace

TEST_CASE("conventional fit on scenario B recovers the infinite-horizon signs") {
    ScenarioBConfig cfg;
    cfg.n = 1000;
    cfg.seed = 3;
    const Dataset data = generate_scenario_b(cfg);
    const ConventionalFit fit = fit_conventional(data);
    REQUIRE(fit.converged);

    // x = 1 lowers the ultimate event probability but speeds up events
    CHECK(fit.b[1] < 0.0);
    CHECK(fit.beta[0] > 0.0);

    SECTION("EM log-likelihood trace is nondecreasing") {
        for (std::size_t k = 1; k < fit.log_likelihood_trace.size(); ++k) {
            CHECK(fit.log_likelihood_trace[k] >= fit.log_likelihood_trace[k - 1] - 1e-10);
        }
    }
    SECTION("baseline survival steps are in (0, 1], nonincreasing, zero-tailed") {
        double prev = 1.0;
        for (double s : fit.baseline_survival) {
            CHECK(s <= prev + 1e-15);
            CHECK(s > 0.0);
            prev = s;
        }
        CHECK(fit.baseline_at(0.0) == 1.0);
        CHECK(fit.baseline_at(fit.last_event_time + 1.0) == 0.0);
    }
}

TEST_CASE("incidence log-odds difference matches the generator across seeds") {
    // logit(0.5) - logit(0.8) = -log(4) = -1.3863
    double total = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        ScenarioBConfig cfg;
        cfg.n = 1000;
        cfg.seed = seed;
        const ConventionalFit fit = fit_conventional(generate_scenario_b(cfg));
        total += fit.b[1];
    }
    CHECK(total / 20.0 == Catch::Approx(-std::log(4.0)).margin(0.35));
}

TEST_CASE("no-censoring data flags separation without crashing") {
    ScenarioBConfig cfg;
    cfg.n = 400;
    cfg.seed = 5;
    cfg.censor_upper = 1e9;  // censoring practically impossible for finite times
    Dataset data = generate_scenario_b(cfg);
    // force every observation to be an event so the susceptible group is all
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.event[i] == 0) {
            data.time[i] = 0.5;
            data.event[i] = 1;
        }
    }
    const ConventionalFit fit = fit_conventional(data);
    CHECK(fit.incidence_separation);
    CHECK(fit.b.allFinite());
}

TEST_CASE("pinned incidence reduces to a plain Cox fit") {
    ScenarioBConfig cfg;
    cfg.n = 300;
    cfg.seed = 11;
    Dataset data = generate_scenario_b(cfg);
    // make the largest observed time an event so no censored row sits beyond
    // the last event time (those rows would otherwise be dropped by the
    // zero-tail constraint, which a plain Cox fit does not do)
    Eigen::Index argmax = 0;
    data.time.maxCoeff(&argmax);
    data.event[argmax] = 1;

    ConventionalConfig config;
    config.pin_incidence = true;
    const ConventionalFit fit = fit_conventional(data, config);
    const Eigen::VectorXd oracle = newton_cox(data);
    CHECK(fit.beta[0] == Catch::Approx(oracle[0]).margin(1e-4));
}

TEST_CASE("conventional risk score") {
    ScenarioBConfig cfg;
    cfg.n = 500;
    cfg.seed = 7;
    const ConventionalFit fit = fit_conventional(generate_scenario_b(cfg));
    Eigen::VectorXd x1(1), x0(1);
    x1 << 1.0;
    x0 << 0.0;

    CHECK(conventional_risk_score(fit, x1, 0.0) == Catch::Approx(0.0).margin(1e-9));

    Eigen::VectorXd design(2);
    design << 1.0, 1.0;
    const double pi = incidence(fit.b, design);
    CHECK(conventional_risk_score(fit, x1, fit.last_event_time + 5.0) ==
          Catch::Approx(pi).margin(1e-12));

    SECTION("monotone nondecreasing in t") {
        double prev = -1.0;
        for (double t = 0.0; t <= 9.0; t += 0.05) {
            const double r = conventional_risk_score(fit, x0, t);
            CHECK(r >= prev - 1e-12);
            prev = r;
        }
    }
    SECTION("negative time rejected") {
        CHECK_THROWS_AS(conventional_risk_score(fit, x1, -1.0), std::domain_error);
    }
}
