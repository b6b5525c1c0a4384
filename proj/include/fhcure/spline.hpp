#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "fhcure/common.hpp"

namespace fhcure {

/// Cubic B-spline knot sequence on [0, c].
///
/// The sequence pins 0 and c as knots, places the internal knots at empirical
/// quantiles of the observed event times, and extends outside [0, c] with
/// equally spaced phantom knots (spacing = mean internal spacing) so that
/// exactly K basis functions have support intersecting [0, c].
struct KnotVector {
    std::vector<double> knots;  ///< full nondecreasing sequence, length K + 4
    double c = 0.0;             ///< horizon; knots[3] == 0 and knots[K] == c

    static constexpr int degree = 3;

    std::size_t basis_count() const {
        return knots.size() > static_cast<std::size_t>(degree) + 1
                   ? knots.size() - degree - 1
                   : 0;
    }
};

namespace detail {

/// Type-7 (linear interpolation) sample quantile of a sorted array.
inline double quantile_type7(const std::vector<double>& sorted, double p) {
    const std::size_t n = sorted.size();
    if (n == 1) return sorted[0];
    const double g = p * static_cast<double>(n - 1);
    const auto k = static_cast<std::size_t>(std::floor(g));
    if (k + 1 >= n) return sorted[n - 1];
    const double frac = g - static_cast<double>(k);
    return sorted[k] + frac * (sorted[k + 1] - sorted[k]);
}

}  // namespace detail

/// Build the knot sequence for K normalized cubic basis functions on [0, c].
///
/// Internal knots sit at the j/(K-3) quantiles (j = 1..K-4) of the observed
/// event times; tied or boundary-touching quantiles are nudged by 1e-9*c so
/// the internal knots are strictly increasing inside (0, c).
inline KnotVector build_knots(double c, std::size_t K, std::span<const double> event_times) {
    if (!(c > 0.0)) throw std::invalid_argument("build_knots: horizon c must be positive");
    if (K < 4) throw std::invalid_argument("build_knots: basis size K must be at least 4");

    const std::size_t n_internal = K - 4;
    std::vector<double> internal;
    if (n_internal > 0) {
        if (event_times.empty()) {
            throw DataError("build_knots: internal knots require observed event times");
        }
        std::vector<double> sorted(event_times.begin(), event_times.end());
        std::sort(sorted.begin(), sorted.end());
        internal.reserve(n_internal);
        for (std::size_t j = 1; j <= n_internal; ++j) {
            internal.push_back(
                detail::quantile_type7(sorted, static_cast<double>(j) / static_cast<double>(K - 3)));
        }
        const double eps = 1e-9 * c;
        double prev = 0.0;
        for (auto& q : internal) {
            q = std::max(q, prev + eps);
            prev = q;
        }
        double next = c;
        for (std::size_t j = internal.size(); j-- > 0;) {
            internal[j] = std::min(internal[j], next - eps);
            next = internal[j];
        }
        for (std::size_t j = 0; j < internal.size(); ++j) {
            const double lo = j == 0 ? 0.0 : internal[j - 1];
            if (!(internal[j] > lo && internal[j] < c)) {
                throw DataError("build_knots: could not place strictly increasing internal knots");
            }
        }
    }

    const double h = c / static_cast<double>(K - 3);  // mean internal spacing
    KnotVector kv;
    kv.c = c;
    kv.knots.reserve(K + 4);
    kv.knots.push_back(-3.0 * h);
    kv.knots.push_back(-2.0 * h);
    kv.knots.push_back(-h);
    kv.knots.push_back(0.0);
    for (double q : internal) kv.knots.push_back(q);
    kv.knots.push_back(c);
    kv.knots.push_back(c + h);
    kv.knots.push_back(c + 2.0 * h);
    kv.knots.push_back(c + 3.0 * h);
    return kv;
}

/// Normalized cubic B-spline basis on [0, c].
///
/// Each raw basis function is expanded once, at construction, into its exact
/// piecewise cubic polynomial representation (local coordinates per knot
/// span). Evaluation is then Horner's rule and the cumulative integral is the
/// exact polynomial antiderivative, so the integrals feeding the likelihood
/// are bit-stable. Normalization divides each raw function by its integral
/// over [0, c], making every normalized basis a probability density on the
/// horizon.
///
/// Immutable after construction; all evaluations are pure.
class NormalizedBasis {
public:
    /// Empty basis; usable only as a placeholder before assignment.
    NormalizedBasis() = default;

    explicit NormalizedBasis(KnotVector kv) : kv_(std::move(kv)) {
        const std::size_t K = kv_.basis_count();
        if (K < 4) throw std::invalid_argument("NormalizedBasis: too few knots");
        for (std::size_t j = 1; j < kv_.knots.size(); ++j) {
            if (kv_.knots[j] < kv_.knots[j - 1]) {
                throw std::invalid_argument("NormalizedBasis: knots must be nondecreasing");
            }
        }
        build_pieces();
        normalizers_.resize(K);
        for (std::size_t i = 0; i < K; ++i) {
            normalizers_[i] = raw_integral(i, 0.0, kv_.c);
            if (!(normalizers_[i] > 0.0)) {
                throw NumericError("NormalizedBasis: basis function has no mass on [0, c]");
            }
        }
    }

    std::size_t size() const { return normalizers_.size(); }
    double horizon() const { return kv_.c; }
    const KnotVector& knot_vector() const { return kv_; }
    const std::vector<double>& normalizers() const { return normalizers_; }

    /// Raw (unnormalized) basis value; defined on the whole real line.
    double raw_eval(std::size_t i, double t) const {
        check_index(i);
        for (const Piece& pc : pieces_[i]) {
            if (t >= pc.lo && t < pc.hi) return eval_poly(pc, t);
        }
        return 0.0;
    }

    /// Normalized basis value at t in [0, c].
    double eval(std::size_t i, double t) const {
        check_domain(t);
        return raw_eval(i, t) / normalizers_[i];
    }

    /// Integral of the normalized basis over [0, t]; 0 at t=0 and 1 at t=c.
    double cumulative(std::size_t i, double t) const {
        check_domain(t);
        check_index(i);
        return raw_integral(i, 0.0, t) / normalizers_[i];
    }

private:
    struct Piece {
        double lo, hi;
        std::array<double, 4> a;  // value = a0 + a1 u + a2 u^2 + a3 u^3, u = t - lo
    };

    void check_index(std::size_t i) const {
        if (i >= size()) throw std::out_of_range("NormalizedBasis: basis index out of range");
    }
    void check_domain(double t) const {
        if (!(t >= 0.0 && t <= kv_.c)) {
            throw std::domain_error("NormalizedBasis: t outside [0, c]");
        }
    }

    static double eval_poly(const Piece& pc, double t) {
        const double u = t - pc.lo;
        return ((pc.a[3] * u + pc.a[2]) * u + pc.a[1]) * u + pc.a[0];
    }

    /// Exact integral of the raw basis i over [a, b] (intersected with its support).
    double raw_integral(std::size_t i, double a, double b) const {
        double total = 0.0;
        for (const Piece& pc : pieces_[i]) {
            const double lo = std::max(a, pc.lo);
            const double hi = std::min(b, pc.hi);
            if (hi <= lo) continue;
            total += antiderivative(pc, hi) - antiderivative(pc, lo);
        }
        return total;
    }

    static double antiderivative(const Piece& pc, double t) {
        const double u = t - pc.lo;
        return (((pc.a[3] / 4.0 * u + pc.a[2] / 3.0) * u + pc.a[1] / 2.0) * u + pc.a[0]) * u;
    }

    // Cox-de Boor recursion carried out on polynomial coefficients, giving
    // the exact piecewise representation of each degree-3 basis function.
    void build_pieces() {
        const auto& t = kv_.knots;
        const std::size_t K = kv_.basis_count();

        // poly of B_{i,p} on span s, in local coordinate u = x - t[s]
        auto poly = [&](auto&& self, std::size_t i, int p, std::size_t s) -> std::array<double, 4> {
            std::array<double, 4> out{0.0, 0.0, 0.0, 0.0};
            if (s < i || s > i + static_cast<std::size_t>(p)) return out;
            if (p == 0) {
                if (s == i && t[i + 1] > t[i]) out[0] = 1.0;
                return out;
            }
            const auto left = self(self, i, p - 1, s);
            const auto right = self(self, i + 1, p - 1, s);
            const double d1 = t[i + p] - t[i];
            const double d2 = t[i + p + 1] - t[i + 1];
            if (d1 > 0.0) {
                // (x - t[i])/d1 = ((t[s] - t[i]) + u)/d1
                const double c0 = (t[s] - t[i]) / d1;
                const double c1 = 1.0 / d1;
                accumulate_linear_times(out, left, c0, c1);
            }
            if (d2 > 0.0) {
                // (t[i+p+1] - x)/d2 = ((t[i+p+1] - t[s]) - u)/d2
                const double c0 = (t[i + p + 1] - t[s]) / d2;
                const double c1 = -1.0 / d2;
                accumulate_linear_times(out, right, c0, c1);
            }
            return out;
        };

        pieces_.resize(K);
        for (std::size_t i = 0; i < K; ++i) {
            for (std::size_t s = i; s <= i + 3; ++s) {
                if (t[s + 1] <= t[s]) continue;
                const auto coeffs = poly(poly, i, 3, s);
                if (coeffs == std::array<double, 4>{0.0, 0.0, 0.0, 0.0}) continue;
                pieces_[i].push_back(Piece{t[s], t[s + 1], coeffs});
            }
        }
    }

    /// out += (c0 + c1*u) * q(u), truncating above degree 3 (exact here: the
    /// product of the recursion never exceeds the target degree).
    static void accumulate_linear_times(std::array<double, 4>& out, const std::array<double, 4>& q,
                                        double c0, double c1) {
        out[0] += c0 * q[0];
        out[1] += c0 * q[1] + c1 * q[0];
        out[2] += c0 * q[2] + c1 * q[1];
        out[3] += c0 * q[3] + c1 * q[2];
    }

    KnotVector kv_;
    std::vector<std::vector<Piece>> pieces_;
    std::vector<double> normalizers_;
};

}  // namespace fhcure
