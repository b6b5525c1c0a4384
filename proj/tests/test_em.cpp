#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fhcure/em.hpp"
#include "fhcure/simulate.hpp"

using namespace fhcure;

namespace {

Dataset single_row(double t, int delta) {
    Dataset d;
    d.time.resize(1);
    d.time << t;
    d.event.resize(1);
    d.event << delta;
    d.x.resize(1, 0);
    return d;
}

FiniteHorizonParams toy_params(double c, std::size_t K, Eigen::Index p) {
    std::vector<double> times;
    for (int i = 1; i < 30; ++i) times.push_back(c * i / 30.0);
    return FiniteHorizonParams{Eigen::VectorXd::Zero(p + 1), Eigen::VectorXd::Zero(p),
                               Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K)),
                               NormalizedBasis(build_knots(c, K, times))};
}

Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& theta) {
    Eigen::VectorXd g(theta.size());
    Eigen::VectorXd point = theta;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
        const double h = 1e-6 * (1.0 + std::abs(theta[j]));
        point[j] = theta[j] + h;
        const double fp = f(point);
        point[j] = theta[j] - h;
        const double fm = f(point);
        point[j] = theta[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace

TEST_CASE("observed log posterior on single-row datasets") {
    SECTION("row at or beyond the horizon contributes log(1 - pi)") {
        auto params = toy_params(10.0, 4, 0);
        const Dataset d = single_row(12.0, 0);
        CHECK(observed_log_posterior(params, d, 0.0) == Catch::Approx(std::log(0.5)).margin(1e-12));
        const Dataset d_event = single_row(12.0, 1);  // delta=1 beyond c: same term
        CHECK(observed_log_posterior(params, d_event, 0.0) ==
              Catch::Approx(std::log(0.5)).margin(1e-12));
    }
    SECTION("event row contributes log(pi * f)") {
        auto params = toy_params(10.0, 5, 0);
        params.alpha << 0.4, -0.2, 0.3, -0.5, 0.0;
        const double t = 3.7;
        const Dataset d = single_row(t, 1);
        Eigen::VectorXd x1(1);
        x1 << 1.0;
        const double expected =
            std::log(incidence(params.b, x1) * latency_density(params, t, Eigen::VectorXd(0)));
        CHECK(observed_log_posterior(params, d, 0.0) == Catch::Approx(expected).margin(1e-12));
    }
    SECTION("censored row below the horizon contributes the mixture term") {
        auto params = toy_params(10.0, 5, 0);
        params.alpha << 0.1, 0.2, -0.1, 0.4, 0.0;
        const double t = 6.1;
        const Dataset d = single_row(t, 0);
        const double pi = 0.5;
        const double s = latency_survival(params, t, Eigen::VectorXd(0));
        CHECK(observed_log_posterior(params, d, 0.0) ==
              Catch::Approx(std::log((1 - pi) + pi * s)).margin(1e-12));
    }
    SECTION("zero alpha makes the penalty vanish") {
        auto params = toy_params(10.0, 6, 0);
        const Dataset d = single_row(2.0, 1);
        CHECK(observed_log_posterior(params, d, 0.0) == observed_log_posterior(params, d, 1e8));
    }
}

TEST_CASE("e-step responsibilities follow the three-case table") {
    const auto cfg = scenario_a1_config(400, 99);
    auto [data, truth] = generate_scenario_a(cfg);
    auto params = toy_params(cfg.c, 6, data.p());
    params.b[0] = 0.4;
    params.beta.setConstant(0.1);
    params.alpha << 0.3, -0.3, 0.2, 0.1, -0.2, 0.0;

    LikelihoodContext ctx(data, params.basis);
    const Eigen::VectorXd w = e_step(ctx, params);
    int checked_event = 0, checked_beyond = 0, checked_censored = 0;
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.time[i] >= cfg.c) {
            CHECK(w[i] == 0.0);
            ++checked_beyond;
        } else if (data.event[i] == 1) {
            CHECK(w[i] == 1.0);
            ++checked_event;
        } else {
            Eigen::VectorXd x(data.p() + 1);
            x[0] = 1.0;
            x.tail(data.p()) = data.x.row(i);
            const double pi = incidence(params.b, x);
            const double s = latency_survival(params, data.time[i], data.x.row(i).transpose());
            CHECK(w[i] == Catch::Approx(pi * s / ((1 - pi) + pi * s)).margin(1e-14));
            ++checked_censored;
        }
    }
    CHECK(checked_event > 0);
    CHECK(checked_beyond > 0);
    CHECK(checked_censored > 0);
}

TEST_CASE("censored-weight formula") {
    CHECK(censored_weight(0.6, 0.5) == Catch::Approx(0.3 / 0.7).margin(1e-15));
    CHECK(censored_weight(0.5, 1.0) == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("incidence M-step") {
    SECTION("intercept-only closed form") {
        const int n = 1000;
        Dataset d;
        d.time = Eigen::VectorXd::Ones(n);
        d.event = Eigen::VectorXi::Ones(n);
        d.x.resize(n, 0);
        Eigen::VectorXd w(n);
        for (int i = 0; i < n; ++i) w[i] = i < 700 ? 1.0 : 0.0;
        const Eigen::VectorXd b = m_step_incidence(w, d);
        CHECK(b[0] == Catch::Approx(std::log(0.7 / 0.3)).margin(1e-7));

        w.setConstant(0.5);
        const Eigen::VectorXd b0 = m_step_incidence(w, d);
        CHECK(b0[0] == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("gradient matches finite differences") {
        const auto cfg = scenario_a1_config(200, 5);
        auto [data, truth] = generate_scenario_a(cfg);
        Eigen::MatrixXd X(data.n(), data.p() + 1);
        X.col(0).setOnes();
        X.rightCols(data.p()) = data.x;
        RngStream rng(3, 0);
        Eigen::VectorXd w(data.n());
        for (Eigen::Index i = 0; i < data.n(); ++i) w[i] = rng.uniform();

        auto value = [&](const Eigen::VectorXd& b) {
            double v = 0.0;
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                const double pi = incidence(b, X.row(i).transpose());
                v += w[i] * std::log(pi) + (1 - w[i]) * std::log(1 - pi);
            }
            return v;
        };
        for (int rep = 0; rep < 5; ++rep) {
            Eigen::VectorXd b(data.p() + 1);
            for (Eigen::Index j = 0; j <= data.p(); ++j) b[j] = rng.uniform(-0.5, 0.5);
            Eigen::VectorXd analytic = Eigen::VectorXd::Zero(b.size());
            for (Eigen::Index i = 0; i < X.rows(); ++i) {
                analytic += (w[i] - incidence(b, X.row(i).transpose())) * X.row(i).transpose();
            }
            const Eigen::VectorXd fd = fd_gradient(value, b);
            for (Eigen::Index j = 0; j < b.size(); ++j) {
                CHECK(analytic[j] == Catch::Approx(fd[j]).margin(1e-5 * (1 + std::abs(fd[j]))));
            }
        }
    }
}

TEST_CASE("latency M-step") {
    const auto cfg = scenario_a1_config(500, 21);
    auto [data, truth] = generate_scenario_a(cfg);
    auto params = toy_params(cfg.c, 6, data.p());
    LikelihoodContext ctx(data, params.basis);
    const Eigen::VectorXd w = e_step(ctx, params);

    SECTION("huge penalty drives alpha to zero") {
        FitConfig config;
        const auto step = m_step_latency(w, ctx, 1e8, config, params.beta, params.alpha);
        CHECK(step.alpha.head(5).lpNorm<Eigen::Infinity>() < 1e-3);
    }
    SECTION("no positive weights is an error") {
        FitConfig config;
        const Eigen::VectorXd zero = Eigen::VectorXd::Zero(data.n());
        CHECK_THROWS_AS(m_step_latency(zero, ctx, 1.0, config, params.beta, params.alpha),
                        DataError);
    }
    SECTION("objective gradient matches finite differences") {
        const double lambda = 0.7;
        RngStream rng(8, 0);
        for (int rep = 0; rep < 5; ++rep) {
            FiniteHorizonParams pr = params;
            for (Eigen::Index j = 0; j < pr.beta.size(); ++j) pr.beta[j] = rng.uniform(-0.4, 0.4);
            for (Eigen::Index j = 0; j + 1 < pr.alpha.size(); ++j) {
                pr.alpha[j] = rng.uniform(-0.6, 0.6);
            }

            // independent objective evaluation through the model functions
            auto value = [&](const Eigen::VectorXd& theta) {
                FiniteHorizonParams work = pr;
                work.beta = theta.head(pr.beta.size());
                work.alpha.head(pr.alpha.size() - 1) = theta.tail(pr.alpha.size() - 1);
                work.alpha[pr.alpha.size() - 1] = 0.0;
                double v = 0.0;
                for (Eigen::Index i = 0; i < data.n(); ++i) {
                    if (data.time[i] >= cfg.c || w[i] == 0.0) continue;
                    const Eigen::VectorXd xt = data.x.row(i).transpose();
                    if (data.event[i] == 1) {
                        v += w[i] * std::log(latency_density(work, data.time[i], xt));
                    } else {
                        v += w[i] * std::log(latency_survival(work, data.time[i], xt));
                    }
                }
                return v - 0.5 * lambda * work.alpha.head(pr.alpha.size() - 1).squaredNorm();
            };

            Eigen::VectorXd theta(pr.beta.size() + pr.alpha.size() - 1);
            theta.head(pr.beta.size()) = pr.beta;
            theta.tail(pr.alpha.size() - 1) = pr.alpha.head(pr.alpha.size() - 1);
            const Eigen::VectorXd fd = fd_gradient(value, theta);

            // analytic gradient: latency block of the observed-posterior
            // gradient evaluated with every below-horizon weight applied
            FiniteHorizonParams work = pr;
            work.alpha[pr.alpha.size() - 1] = 0.0;
            const Eigen::VectorXd gamma = mixture_weights(work.alpha);
            Eigen::VectorXd analytic = Eigen::VectorXd::Zero(theta.size());
            auto gbeta = analytic.head(pr.beta.size());
            auto galpha = analytic.tail(pr.alpha.size() - 1);
            for (Eigen::Index i = 0; i < data.n(); ++i) {
                if (data.time[i] >= cfg.c || w[i] == 0.0) continue;
                const double e = std::exp(data.x.row(i).dot(work.beta));
                double f0 = 0.0, cum = 0.0;
                for (Eigen::Index k = 0; k < work.alpha.size(); ++k) {
                    f0 += gamma[k] * work.basis.eval(static_cast<std::size_t>(k), data.time[i]);
                    cum += gamma[k] * work.basis.cumulative(static_cast<std::size_t>(k), data.time[i]);
                }
                const double s0 = 1.0 - cum;
                const double logs0 = std::log(s0);
                Eigen::VectorXd dlogs0(gamma.size() - 1);
                for (Eigen::Index j = 0; j + 1 < gamma.size(); ++j) {
                    dlogs0[j] =
                        -gamma[j] *
                        (work.basis.cumulative(static_cast<std::size_t>(j), data.time[i]) - cum) / s0;
                }
                if (data.event[i] == 1) {
                    gbeta += w[i] * (1.0 + e * logs0) * data.x.row(i).transpose();
                    for (Eigen::Index j = 0; j + 1 < gamma.size(); ++j) {
                        const double dlogf0 =
                            gamma[j] *
                            (work.basis.eval(static_cast<std::size_t>(j), data.time[i]) - f0) / f0;
                        galpha[j] += w[i] * (dlogf0 + (e - 1.0) * dlogs0[j]);
                    }
                } else {
                    gbeta += w[i] * e * logs0 * data.x.row(i).transpose();
                    galpha += (w[i] * e) * dlogs0;
                }
            }
            galpha -= lambda * work.alpha.head(pr.alpha.size() - 1);

            for (Eigen::Index j = 0; j < theta.size(); ++j) {
                CHECK(analytic[j] == Catch::Approx(fd[j]).margin(1e-5 * (1 + std::abs(fd[j]))));
            }
        }
    }
    SECTION("baseline shape recovery with frozen beta") {
        // one active covariate, everyone an observed event below c
        ScenarioAConfig gen = scenario_a1_config(2000, 77);
        gen.b_true.setZero();
        gen.b_true[0] = 50.0;  // everyone in the event group
        gen.lambda_cens = 0.0;
        gen.beta_true.setZero();
        gen.beta_true[0] = 0.3;
        auto [d3, tr3] = generate_scenario_a(gen);
        REQUIRE((d3.event.array() == 1).count() == 2000);

        Dataset data1;
        data1.time = d3.time;
        data1.event = d3.event;
        data1.x = d3.x.leftCols(1);
        data1.feature_names = {"x_cont"};

        const std::vector<double> times(d3.time.data(), d3.time.data() + 2000);
        FiniteHorizonParams pr{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(1),
                               Eigen::VectorXd::Zero(7),
                               NormalizedBasis(build_knots(gen.c, 7, times))};
        pr.beta[0] = 0.3;  // frozen at the generating value
        LikelihoodContext ctx1(data1, pr.basis);
        const Eigen::VectorXd w1 = Eigen::VectorXd::Ones(2000);
        FitConfig config;
        const auto step = m_step_latency(w1, ctx1, 1.0, config, pr.beta, pr.alpha, true);
        pr.alpha = step.alpha;
        CHECK(step.beta[0] == 0.3);

        double sq = 0.0;
        const int grid = 400;
        for (int g = 0; g <= grid; ++g) {
            const double t = gen.c * g / grid;
            const double est = t < gen.c ? baseline_survival(pr, t) : 0.0;
            const double truth_s = 1.0 - std::pow(t / gen.c, gen.eta);
            sq += (est - truth_s) * (est - truth_s) / (grid + 1);
        }
        CHECK(std::sqrt(sq) < 0.05);
    }
}

TEST_CASE("fit_map") {
    const auto cfg = scenario_a1_config(600, 31);
    auto [data, truth] = generate_scenario_a(cfg);
    FitConfig config;
    config.lambda = 1.0;

    const FitResult fit = fit_map(data, cfg.c, 7, config);
    REQUIRE(fit.converged);

    SECTION("EM trace is nondecreasing") {
        for (std::size_t k = 1; k < fit.log_posterior_trace.size(); ++k) {
            CHECK(fit.log_posterior_trace[k] >= fit.log_posterior_trace[k - 1] - 1e-10);
        }
    }
    SECTION("fixed point: one more EM pass moves the objective below tolerance") {
        const FitResult again = fit_map(data, cfg.c, 7, config, fit.params);
        REQUIRE(again.log_posterior_trace.size() >= 2);
        const double before = again.log_posterior_trace[0];
        const double after = again.log_posterior_trace[1];
        CHECK(std::abs(after - before) / (1.0 + std::abs(after)) < config.em_tol * 10);
    }
    SECTION("deterministic: identical traces across runs") {
        const FitResult fit2 = fit_map(data, cfg.c, 7, config);
        REQUIRE(fit.log_posterior_trace.size() == fit2.log_posterior_trace.size());
        for (std::size_t k = 0; k < fit.log_posterior_trace.size(); ++k) {
            CHECK(fit.log_posterior_trace[k] == fit2.log_posterior_trace[k]);
        }
    }
    SECTION("final weights respect the table") {
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            if (data.time[i] >= cfg.c) CHECK(fit.weights[i] == 0.0);
            else if (data.event[i] == 1) CHECK(fit.weights[i] == 1.0);
            else {
                CHECK(fit.weights[i] >= 0.0);
                CHECK(fit.weights[i] <= 1.0);
            }
        }
    }
    SECTION("beyond-horizon events are flagged in the diagnostics") {
        int expected = 0;
        for (Eigen::Index i = 0; i < data.n(); ++i) {
            if (data.event[i] == 1 && data.time[i] >= cfg.c) ++expected;
        }
        CHECK(fit.diagnostics.events_beyond_horizon == expected);
    }
    SECTION("observed gradient at the optimum matches finite differences") {
        LikelihoodContext ctx(data, fit.params.basis);
        FiniteHorizonParams work = fit.params;
        auto value = [&](const Eigen::VectorXd& theta) {
            detail::unpack_params(theta, work);
            return observed_log_posterior(ctx, work, config.lambda);
        };
        const Eigen::VectorXd theta = detail::pack_params(fit.params);
        const Eigen::VectorXd analytic =
            observed_log_posterior_gradient(ctx, fit.params, config.lambda);
        const Eigen::VectorXd fd = fd_gradient(value, theta);
        for (Eigen::Index j = 0; j < theta.size(); ++j) {
            CHECK(analytic[j] == Catch::Approx(fd[j]).margin(1e-5 * (1 + std::abs(fd[j]))));
        }
    }
    SECTION("no events below the horizon is an error") {
        Dataset bad = data;
        bad.event.setZero();
        CHECK_THROWS_AS(fit_map(bad, cfg.c, 7, config), DataError);
    }
}

TEST_CASE("observed gradient at random parameter points") {
    const auto cfg = scenario_a2_config(300, 47);
    auto [data, truth] = generate_scenario_a(cfg);
    auto params = toy_params(cfg.c, 6, data.p());
    LikelihoodContext ctx(data, params.basis);
    RngStream rng(12, 0);
    const double lambda = 0.5;
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd theta(params.b.size() + params.beta.size() + params.alpha.size() - 1);
        for (Eigen::Index j = 0; j < theta.size(); ++j) theta[j] = rng.uniform(-0.7, 0.7);
        FiniteHorizonParams work = params;
        detail::unpack_params(theta, work);
        const Eigen::VectorXd analytic = observed_log_posterior_gradient(ctx, work, lambda);
        auto value = [&](const Eigen::VectorXd& th) {
            FiniteHorizonParams w2 = params;
            detail::unpack_params(th, w2);
            return observed_log_posterior(ctx, w2, lambda);
        };
        const Eigen::VectorXd fd = fd_gradient(value, theta);
        for (Eigen::Index j = 0; j < theta.size(); ++j) {
            CHECK(analytic[j] == Catch::Approx(fd[j]).margin(1e-5 * (1 + std::abs(fd[j]))));
        }
    }
}

TEST_CASE("degenerate K=4 fit recovers the empirical CDF") {
    // intercept-only incidence, no covariates, everyone an event below c
    const double c = 10.0;
    const int n = 2000;
    RngStream rng(55, 1);
    Dataset data;
    data.time.resize(n);
    data.event = Eigen::VectorXi::Ones(n);
    data.x.resize(n, 0);
    for (int i = 0; i < n; ++i) {
        // inverse transform from S0(t) = 1 - (t/c)^1.5
        data.time[i] = c * std::pow(1.0 - rng.uniform_open0(), 1.0 / 1.5);
        data.time[i] = std::min(data.time[i], std::nextafter(c, 0.0));
    }
    FitConfig config;
    config.lambda = 1.0;
    const FitResult fit = fit_map(data, c, 4, config);

    std::vector<double> sorted(data.time.data(), data.time.data() + n);
    std::sort(sorted.begin(), sorted.end());
    double worst = 0.0;
    for (int g = 1; g < 100; ++g) {
        const double t = c * g / 100.0;
        const double ecdf =
            static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin()) /
            n;
        const double fitted = 1.0 - baseline_survival(fit.params, t);
        worst = std::max(worst, std::abs(fitted - ecdf));
    }
    CHECK(worst < 0.05);
}
