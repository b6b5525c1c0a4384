#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fhcure/laplace.hpp"
#include "fhcure/simulate.hpp"

using namespace fhcure;

TEST_CASE("finite-difference Hessian recovers a quadratic exactly") {
    Eigen::MatrixXd Q(3, 3);
    Q << 5, 1, 0.5, 1, 4, -0.3, 0.5, -0.3, 2;
    Eigen::VectorXd m(3);
    m << 0.2, -1.0, 0.7;
    // objective -1/2 (theta-m)' Q (theta-m); its gradient is -Q(theta-m)
    auto gradient = [&](const Eigen::VectorXd& theta) -> Eigen::VectorXd {
        return -Q * (theta - m);
    };
    Eigen::VectorXd at(3);
    at << 1.0, 2.0, -0.5;
    const Eigen::MatrixXd H = hessian_from_gradient(gradient, at);
    const Eigen::MatrixXd A = -H;  // negative Hessian
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) CHECK(A(i, j) == Catch::Approx(Q(i, j)).margin(1e-6));
    }
}

TEST_CASE("penalty contributes exactly lambda I on the alpha block") {
    const auto cfg = scenario_a1_config(250, 3);
    auto [data, truth] = generate_scenario_a(cfg);
    FitConfig config;
    config.lambda = 2.0;
    const FitResult fit = fit_map(data, cfg.c, 5, config);

    const PrecisionMatrix with = precision_matrix(fit.params, data, 2.0);
    const PrecisionMatrix without = precision_matrix(fit.params, data, 0.0);
    const Eigen::MatrixXd diff = with.A - without.A;
    const Eigen::Index dim_tt = fit.params.b.size() + fit.params.beta.size();
    for (Eigen::Index i = 0; i < diff.rows(); ++i) {
        for (Eigen::Index j = 0; j < diff.cols(); ++j) {
            const bool alpha_diag = i == j && i >= dim_tt;
            CHECK(diff(i, j) == Catch::Approx(alpha_diag ? 2.0 : 0.0).margin(1e-8));
        }
    }
    CHECK(with.positive_definite);
}

TEST_CASE("credible intervals") {
    SECTION("identity precision gives the standard normal quantile") {
        PrecisionMatrix prec;
        prec.A = Eigen::MatrixXd::Identity(4, 4);
        prec.positive_definite = true;
        prec.min_eigenvalue = 1.0;
        const auto iv = credible_intervals(prec, Eigen::VectorXd::Zero(4), 0.95);
        for (const auto& [lo, hi] : iv) {
            CHECK(lo == Catch::Approx(-1.959964).margin(1e-6));
            CHECK(hi == Catch::Approx(1.959964).margin(1e-6));
        }
    }
    SECTION("level zero degenerates to the point estimate") {
        PrecisionMatrix prec;
        prec.A = Eigen::MatrixXd::Identity(2, 2);
        prec.positive_definite = true;
        Eigen::VectorXd theta(2);
        theta << 3.0, -1.5;
        const auto iv = credible_intervals(prec, theta, 0.0);
        CHECK(iv[0].first == 3.0);
        CHECK(iv[0].second == 3.0);
        CHECK(iv[1].first == -1.5);
        CHECK(iv[1].second == -1.5);
    }
    SECTION("width scales as the inverse square root of the precision") {
        PrecisionMatrix prec;
        prec.A = Eigen::MatrixXd::Identity(2, 2);
        prec.A(1, 1) = 4.0;
        prec.positive_definite = true;
        const auto iv = credible_intervals(prec, Eigen::VectorXd::Zero(2), 0.95);
        const double w0 = iv[0].second - iv[0].first;
        const double w1 = iv[1].second - iv[1].first;
        CHECK(w1 == Catch::Approx(0.5 * w0).epsilon(1e-12));
    }
    SECTION("non-PD precision is refused unless forced") {
        PrecisionMatrix prec;
        prec.A = -Eigen::MatrixXd::Identity(2, 2);
        prec.positive_definite = false;
        prec.min_eigenvalue = -1.0;
        CHECK_THROWS_AS(credible_intervals(prec, Eigen::VectorXd::Zero(2), 0.95), NumericError);
        const auto iv = credible_intervals(prec, Eigen::VectorXd::Zero(2), 0.95, true);
        CHECK(iv[0].second > iv[0].first);
    }
}

TEST_CASE("precision matrix at a fitted optimum is positive definite") {
    const auto cfg = scenario_a2_config(400, 9);
    auto [data, truth] = generate_scenario_a(cfg);
    FitConfig config;
    config.lambda = 1.0;
    const FitResult fit = fit_map(data, cfg.c, 6, config);
    const PrecisionMatrix prec = precision_matrix(fit.params, data, config.lambda);
    CHECK(prec.positive_definite);
    CHECK(prec.min_eigenvalue > 0.0);
    // symmetric by construction
    CHECK((prec.A - prec.A.transpose()).lpNorm<Eigen::Infinity>() < 1e-10);
}
