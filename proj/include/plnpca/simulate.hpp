#ifndef PLNPCA_SIMULATE_HPP
#define PLNPCA_SIMULATE_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "errors.hpp"
#include "model.hpp"
#include "quadrature.hpp"

/**
 * @file simulate.hpp
 * @brief Seeded Poisson-lognormal data and a quadrature marginal likelihood.
 */

namespace plnpca {

/**
 * xoshiro256** 1.0 (Blackman and Vigna), seeded by running splitmix64 on the
 * 64-bit seed to fill the four state words. Streams are identical on every
 * platform and easy to reproduce in other languages.
 */
class Xoshiro256 {
public:
    static constexpr const char* algorithm = "xoshiro256**-1.0/splitmix64";

    explicit Xoshiro256(std::uint64_t seed) {
        std::uint64_t z = seed;
        for (auto& word : state_) {
            z += 0x9e3779b97f4a7c15ULL;
            std::uint64_t x = z;
            x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
            x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
            word = x ^ (x >> 31);
        }
    }

    std::uint64_t next() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform on the open interval (0, 1): the top 53 bits plus half a step.
    double uniform() { return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53; }

    /// Standard normal by inversion of the uniform stream.
    double normal() {
        static const boost::math::normal_distribution<double> standard;
        return boost::math::quantile(standard, uniform());
    }

    /**
     * Poisson draw: sequential inversion below rate 10, Hormann's PTRS
     * transformed rejection above. Both consume only `uniform()`.
     */
    std::int64_t poisson(double rate) {
        if (!(rate >= 0) || !std::isfinite(rate)) {
            throw DomainError("Poisson rate must be finite and nonnegative");
        }
        if (rate == 0) {
            return 0;
        }
        if (rate < 10) {
            double u = uniform();
            std::int64_t k = 0;
            double prob = std::exp(-rate);
            double cdf = prob;
            while (u > cdf && k < 1000) {
                ++k;
                prob *= rate / static_cast<double>(k);
                cdf += prob;
            }
            return k;
        }

        const double slam = std::sqrt(rate);
        const double loglam = std::log(rate);
        const double b = 0.931 + 2.53 * slam;
        const double a = -0.059 + 0.02483 * b;
        const double invalpha = 1.1239 + 1.1328 / (b - 3.4);
        const double vr = 0.9277 - 3.6224 / (b - 2);
        while (true) {
            double u = uniform() - 0.5;
            double v = uniform();
            double us = 0.5 - std::abs(u);
            double k = std::floor((2 * a / us + b) * u + rate + 0.43);
            if (us >= 0.07 && v <= vr) {
                return static_cast<std::int64_t>(k);
            }
            if (k < 0 || (us < 0.013 && v > us)) {
                continue;
            }
            if (std::log(v) + std::log(invalpha) - std::log(a / (us * us) + b) <=
                -rate + k * loglam - std::lgamma(k + 1)) {
                return static_cast<std::int64_t>(k);
            }
        }
    }

private:
    std::uint64_t state_[4];

    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
};

/**
 * Description of a simulated data set.
 *
 * Draws happen in this fixed order, each matrix filled row by row:
 * covariates (columns 1..d-1, column 0 is the intercept), per-sample log
 * depths, theta (only when not given), B (only when neither B nor Sigma is
 * given), latent scores W, counts, mask.
 */
struct SimSpec {
    int n = 100;
    int p = 10;
    int q = 2;
    int d = 1;

    /// Explicit p x d coefficients; generated when empty.
    Matrix theta;
    /// Explicit p x q loadings; generated when empty (and `sigma` is empty).
    Matrix B;
    /// Explicit p x p latent covariance of rank <= q; converted to loadings.
    Matrix sigma;

    /// Generated intercepts are uniform on [intercept_low, intercept_high].
    double intercept_low = 1.0;
    double intercept_high = 2.0;
    /// Generated non-intercept coefficients are N(0, coef_sd^2).
    double coef_sd = 0.3;
    /// Generated loadings are N(0, loading_sd^2).
    double loading_sd = 0.5;

    enum class OffsetMode { none, constant, log_depth };
    OffsetMode offset_mode = OffsetMode::none;
    /// Constant offset, or mean of the normal log depths.
    double offset_mean = 0.0;
    /// Standard deviation of the normal log depths.
    double offset_sd = 0.0;

    double missing_fraction = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        if (n < 1 || p < 1 || q < 0 || d < 1) {
            throw DomainError("simulation sizes must be positive (q may be 0)");
        }
        if (q > p) {
            throw DomainError("simulation rank exceeds the number of variables");
        }
        if (!(missing_fraction >= 0 && missing_fraction < 1)) {
            throw DomainError("missing fraction must lie in [0, 1)");
        }
        if (theta.size() > 0 && (theta.rows() != p || theta.cols() != d)) {
            throw DimensionError("explicit theta must be p x d");
        }
        if (B.size() > 0 && (B.rows() != p || B.cols() != q)) {
            throw DimensionError("explicit B must be p x q");
        }
        if (sigma.size() > 0 && (sigma.rows() != p || sigma.cols() != p)) {
            throw DimensionError("explicit sigma must be p x p");
        }
    }
};

/**
 * A simulated data set and the values that generated it.
 */
struct Simulation {
    CountTable counts;
    Design design;
    Matrix theta;
    Matrix B;
    Matrix sigma;
    Matrix W;
    Matrix Z;
};

/**
 * Loadings `L` (p x q) with `L L^T = sigma`, from the top q eigenpairs.
 */
inline Matrix loadings_from_covariance(const Matrix& sigma, int q) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sigma + sigma.transpose()));
    const auto p = sigma.rows();
    double tol = 1e-10 * std::max(1.0, sigma.trace());
    for (Eigen::Index k = 0; k < p - q; ++k) {
        if (std::abs(eig.eigenvalues()(k)) > tol) {
            throw DomainError("latent covariance has rank above the simulation rank");
        }
    }
    if (p > 0 && eig.eigenvalues()(0) < -tol) {
        throw DomainError("latent covariance is not positive semidefinite");
    }
    Matrix out(p, q);
    for (int k = 0; k < q; ++k) {
        Eigen::Index idx = p - 1 - k;
        out.col(k) = eig.eigenvectors().col(idx) * std::sqrt(std::max(eig.eigenvalues()(idx), 0.0));
    }
    return out;
}

inline Simulation sample(const SimSpec& spec) {
    spec.validate();
    Xoshiro256 rng(spec.seed);
    const int n = spec.n, p = spec.p, q = spec.q, d = spec.d;

    Matrix X(n, d);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1;
        for (int k = 1; k < d; ++k) {
            X(i, k) = rng.normal();
        }
    }

    Matrix O = Matrix::Zero(n, p);
    if (spec.offset_mode != SimSpec::OffsetMode::none) {
        for (int i = 0; i < n; ++i) {
            double o = spec.offset_mean;
            if (spec.offset_mode == SimSpec::OffsetMode::log_depth) {
                o += spec.offset_sd * rng.normal();
            }
            O.row(i).setConstant(o);
        }
    }

    Matrix theta = spec.theta;
    if (theta.size() == 0) {
        theta.resize(p, d);
        for (int j = 0; j < p; ++j) {
            theta(j, 0) = spec.intercept_low + (spec.intercept_high - spec.intercept_low) * rng.uniform();
            for (int k = 1; k < d; ++k) {
                theta(j, k) = spec.coef_sd * rng.normal();
            }
        }
    }

    Matrix B = spec.B;
    if (B.size() == 0) {
        if (spec.sigma.size() > 0) {
            B = loadings_from_covariance(spec.sigma, q);
        } else {
            B.resize(p, q);
            for (int j = 0; j < p; ++j) {
                for (int k = 0; k < q; ++k) {
                    B(j, k) = spec.loading_sd * rng.normal();
                }
            }
        }
    }

    Matrix W(n, q);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < q; ++k) {
            W(i, k) = rng.normal();
        }
    }

    Matrix Z = O + X * theta.transpose() + W * B.transpose();
    Matrix Y(n, p);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < p; ++j) {
            double rate = std::exp(Z(i, j));
            if (!std::isfinite(rate) || rate > 1e12) {
                throw OverflowError("simulated Poisson rate exp(" + std::to_string(Z(i, j)) +
                                    ") is too large; reduce intercepts or loadings");
            }
            Y(i, j) = static_cast<double>(rng.poisson(rate));
        }
    }

    Matrix mask = Matrix::Ones(n, p);
    if (spec.missing_fraction > 0) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < p; ++j) {
                if (rng.uniform() < spec.missing_fraction) {
                    mask(i, j) = 0;
                }
            }
        }
    }

    CountTableOptions options;
    options.allow_zero_columns = true;
    std::vector<std::string> covariate_names;
    for (int k = 0; k < d; ++k) {
        covariate_names.push_back(k == 0 ? "(Intercept)" : "X" + std::to_string(k));
    }

    Simulation out{CountTable(Y, mask, {}, {}, options),
                   Design(X, O, covariate_names),
                   theta,
                   B,
                   B * B.transpose(),
                   W,
                   Z};
    return out;
}

namespace internal {

inline double log_sum_exp(const std::vector<double>& values) {
    double top = -std::numeric_limits<double>::infinity();
    for (double v : values) {
        top = std::max(top, v);
    }
    if (!std::isfinite(top)) {
        return top;
    }
    double total = 0;
    for (double v : values) {
        total += std::exp(v - top);
    }
    return top + std::log(total);
}

/**
 * `log int exp(sum_j [y_j z_j - e^{z_j} - log y_j!]) N(u; 0, I_r) du` with
 * `z = mu + L u`, by Gauss-Hermite quadrature recentred and rescaled at the
 * mode of the integrand.
 */
inline double log_poisson_lognormal_integral(const Vector& y, const Vector& mu, const Matrix& L,
                                             const GaussHermiteRule& rule) {
    const auto r = L.cols();
    auto log_lik = [&](const Vector& z) {
        double total = 0;
        for (Eigen::Index j = 0; j < y.size(); ++j) {
            total += y(j) * z(j) - std::exp(z(j)) - std::lgamma(y(j) + 1);
        }
        return total;
    };
    if (r == 0) {
        return log_lik(mu);
    }

    // Newton ascent on g(u) = loglik(mu + L u) - |u|^2 / 2.
    Vector u = Vector::Zero(r);
    auto g = [&](const Vector& v) { return log_lik(mu + L * v) - 0.5 * v.squaredNorm(); };
    double current = g(u);
    Matrix precision(r, r);
    for (int it = 0; it < 200; ++it) {
        Vector z = mu + L * u;
        Vector rate = z.array().exp();
        Vector grad = L.transpose() * (y - rate) - u;
        precision = L.transpose() * rate.asDiagonal() * L + Matrix::Identity(r, r);
        Vector step = precision.llt().solve(grad);
        double t = 1;
        Vector next = u + step;
        double value = g(next);
        while (!(value >= current) && t > 1e-12) {
            t *= 0.5;
            next = u + t * step;
            value = g(next);
        }
        if (!(value >= current)) {
            break;
        }
        bool done = (next - u).lpNorm<Eigen::Infinity>() < 1e-13 * std::max(1.0, u.lpNorm<Eigen::Infinity>());
        u = next;
        current = value;
        if (done) {
            break;
        }
    }
    {
        Vector rate = (mu + L * u).array().exp();
        precision = L.transpose() * rate.asDiagonal() * L + Matrix::Identity(r, r);
    }
    Eigen::LLT<Matrix> chol(precision);
    Matrix R = chol.matrixL();
    // u = mode + R^{-T} v, v ~ N(0, I) under the rule.
    Matrix transform = R.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(r, r));
    double log_jacobian = -R.diagonal().array().log().sum();

    const auto m = static_cast<Eigen::Index>(rule.size());
    Eigen::Index total = 1;
    for (Eigen::Index k = 0; k < r; ++k) {
        total *= m;
    }
    std::vector<double> terms;
    terms.reserve(static_cast<std::size_t>(total));
    std::vector<Eigen::Index> index(static_cast<std::size_t>(r), 0);
    Vector v(r);
    for (Eigen::Index flat = 0; flat < total; ++flat) {
        Eigen::Index rest = flat;
        double log_weight = 0;
        for (Eigen::Index k = 0; k < r; ++k) {
            Eigen::Index pos = rest % m;
            rest /= m;
            v(k) = rule.nodes()[static_cast<std::size_t>(pos)];
            log_weight += std::log(rule.weights()[static_cast<std::size_t>(pos)]);
        }
        Vector point = u + transform * v;
        // Integrand over the standard normal of v: exp(g(point)) / phi(v) * jacobian / (2 pi)^{r/2}.
        terms.push_back(log_weight + g(point) + 0.5 * v.squaredNorm() + log_jacobian);
    }
    return log_sum_exp(terms);
}

} // namespace internal

/**
 * `log p(Y; theta, sigma)` for the Poisson-lognormal model by tensorized
 * Gauss-Hermite quadrature, observed entries only.
 *
 * Only available when the latent integral is low dimensional: `p <= 2`, or a
 * diagonal `sigma`, which factorizes the integral over variables.
 */
inline double marginal_loglik_oracle(const CountTable& counts, const Design& design, const Matrix& theta,
                                     const Matrix& sigma, std::size_t nodes = 100) {
    internal::require_shape(counts.n() == design.n() && counts.p() == design.p(), "counts and design");
    internal::require_shape(theta.rows() == counts.p() && theta.cols() == design.d(), "theta");
    internal::require_shape(sigma.rows() == counts.p() && sigma.cols() == counts.p(), "sigma");
    const auto n = counts.n();
    const auto p = counts.p();

    Matrix off_diagonal = sigma;
    off_diagonal.diagonal().setZero();
    const bool diagonal = off_diagonal.cwiseAbs().maxCoeff() == 0;
    if (!diagonal && p > 2) {
        throw DimensionError("quadrature oracle needs p <= 2 or a diagonal latent covariance");
    }

    GaussHermiteRule rule(nodes);
    Matrix mu = design.offsets() + design.covariates() * theta.transpose();
    double tol = 1e-14 * std::max(1.0, sigma.trace());

    double total = 0;
    if (diagonal) {
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < p; ++j) {
                if (!counts.observed(i, j)) {
                    continue;
                }
                if (sigma(j, j) < -tol) {
                    throw DomainError("latent variance is negative");
                }
                Matrix L = sigma(j, j) > tol ? Matrix::Constant(1, 1, std::sqrt(sigma(j, j))) : Matrix(1, 0);
                total += internal::log_poisson_lognormal_integral(Vector::Constant(1, counts.counts()(i, j)),
                                                                  Vector::Constant(1, mu(i, j)), L, rule);
            }
        }
        return total;
    }

    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (sigma + sigma.transpose()));
    if (eig.eigenvalues().minCoeff() < -tol) {
        throw DomainError("latent covariance is not positive semidefinite");
    }
    std::vector<Eigen::Index> kept;
    for (Eigen::Index k = 0; k < p; ++k) {
        if (eig.eigenvalues()(k) > tol) {
            kept.push_back(k);
        }
    }
    Matrix L_full(p, static_cast<Eigen::Index>(kept.size()));
    for (std::size_t c = 0; c < kept.size(); ++c) {
        L_full.col(static_cast<Eigen::Index>(c)) =
            eig.eigenvectors().col(kept[c]) * std::sqrt(eig.eigenvalues()(kept[c]));
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<Eigen::Index> obs;
        for (Eigen::Index j = 0; j < p; ++j) {
            if (counts.observed(i, j)) {
                obs.push_back(j);
            }
        }
        const auto k = static_cast<Eigen::Index>(obs.size());
        Vector y(k), m(k);
        Matrix L(k, L_full.cols());
        for (Eigen::Index a = 0; a < k; ++a) {
            y(a) = counts.counts()(i, obs[static_cast<std::size_t>(a)]);
            m(a) = mu(i, obs[static_cast<std::size_t>(a)]);
            L.row(a) = L_full.row(obs[static_cast<std::size_t>(a)]);
        }
        total += internal::log_poisson_lognormal_integral(y, m, L, rule);
    }
    return total;
}

} // namespace plnpca

#endif
