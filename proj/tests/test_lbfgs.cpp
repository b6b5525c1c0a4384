#include <catch2/catch_amalgamated.hpp>

#include "fhcure/lbfgs.hpp"
#include "fhcure/stats.hpp"

using namespace fhcure;

TEST_CASE("lbfgs minimizes a quadratic exactly") {
    Eigen::MatrixXd Q(3, 3);
    Q << 4, 1, 0, 1, 3, 0.5, 0, 0.5, 2;
    Eigen::VectorXd target(3);
    target << 1.0, -2.0, 0.5;
    auto fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
        const Eigen::VectorXd d = x - target;
        grad = Q * d;
        return 0.5 * d.dot(grad);
    };
    const auto res = lbfgs_minimize(fn, Eigen::VectorXd::Zero(3));
    REQUIRE(res.converged);
    CHECK((res.x - target).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("lbfgs handles the Rosenbrock valley") {
    auto fn = [](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
        const double a = 1.0 - x[0];
        const double b = x[1] - x[0] * x[0];
        grad.resize(2);
        grad[0] = -2.0 * a - 400.0 * x[0] * b;
        grad[1] = 200.0 * b;
        return a * a + 100.0 * b * b;
    };
    LbfgsOptions opts;
    opts.max_iter = 500;
    opts.grad_tol = 1e-8;
    const auto res = lbfgs_minimize(fn, Eigen::VectorXd::Constant(2, -1.2), opts);
    REQUIRE(res.converged);
    CHECK(res.x[0] == Catch::Approx(1.0).margin(1e-6));
    CHECK(res.x[1] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("normal quantile matches the CDF to high accuracy") {
    CHECK(normal_quantile(0.975) == Catch::Approx(1.959963984540054).margin(1e-9));
    CHECK(normal_quantile(0.5) == Catch::Approx(0.0).margin(1e-15));
    for (double p : {1e-6, 1e-3, 0.025, 0.2, 0.5, 0.8, 0.975, 0.999, 1 - 1e-7}) {
        CHECK(normal_cdf(normal_quantile(p)) == Catch::Approx(p).margin(1e-12));
    }
    CHECK_THROWS_AS(normal_quantile(-0.1), std::domain_error);
}
