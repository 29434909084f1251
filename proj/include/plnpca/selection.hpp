#ifndef PLNPCA_SELECTION_HPP
#define PLNPCA_SELECTION_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "model.hpp"
#include "parallel.hpp"

/**
 * @file selection.hpp
 * @brief Approximate BIC/ICL, pseudo-R^2 and rank selection.
 */

namespace plnpca {

/**
 * BIC, ICL and the entropy of the variational posterior for one fitted rank.
 */
struct InformationCriteria {
    double bic = 0;
    double icl = 0;
    double entropy = 0;
};

/**
 * Entropy of the product of diagonal Gaussians with standard deviations `S`,
 * `nq/2 log(2 pi e) + sum log S`.
 */
inline double variational_entropy(const Matrix& S) {
    if (!(S.array() > 0).all()) {
        throw DomainError("variational standard deviations must be strictly positive");
    }
    const double count = static_cast<double>(S.size());
    return 0.5 * count * std::log(2 * std::numbers::pi * std::numbers::e) + S.array().log().sum();
}

/**
 * `BIC = J - p (d + q) log(n) / 2` and `ICL = BIC - entropy`.
 *
 * The parameter count `p (d + q)` ignores the rotational redundancy of B.
 * The reported entropy is `bic - icl` as stored, so that difference is exact
 * in floating point; it is within one ulp of `bic` of `variational_entropy(S)`.
 */
inline InformationCriteria bic_icl(double elbo, const Matrix& S, Eigen::Index n, Eigen::Index p, Eigen::Index d,
                                   Eigen::Index q) {
    internal::require_shape(S.rows() == n && S.cols() == q, "S and (n, q)");
    InformationCriteria out;
    out.bic = elbo - 0.5 * static_cast<double>(p * (d + q)) * std::log(static_cast<double>(n));
    out.icl = out.bic - variational_entropy(S);
    out.entropy = out.bic - out.icl;
    return out;
}

/**
 * Per-column Poisson regressions with offsets, the null model of the pseudo-R^2.
 */
struct NullModel {
    /// p x d coefficients.
    Matrix theta;
    /// Observed-data log-likelihood including `-K(Y)`.
    double loglik = 0;
    bool converged = true;
    std::vector<int> iterations;
};

struct GlmOptions {
    int max_iterations = 50;
    /// Relative change of the deviance that stops IRLS.
    double tolerance = 1e-8;
    int num_threads = 1;
};

namespace internal {

inline double log_factorial(double y) { return std::lgamma(y + 1); }

/// Poisson log-likelihood of one observation at canonical parameter `lambda`.
inline double poisson_term(double y, double lambda) { return y * lambda - std::exp(lambda) - log_factorial(y); }

/// Saturated term with the convention `0 log 0 = 0`.
inline double poisson_saturated_term(double y) {
    return (y > 0 ? y * std::log(y) - y : 0.0) - log_factorial(y);
}

inline double poisson_deviance_term(double y, double mu) {
    double lead = y > 0 ? y * std::log(y / mu) : 0.0;
    return 2 * (lead - (y - mu));
}

} // namespace internal

struct GlmFit {
    Vector beta;
    bool converged = false;
    int iterations = 0;
};

/**
 * Iteratively reweighted least squares for one Poisson GLM with offset.
 * Rows with `observed == 0` are ignored.
 */
inline GlmFit poisson_glm(const Matrix& X, const Vector& y, const Vector& offset,
                          const Vector& observed, const GlmOptions& options = {}) {
    const auto n = X.rows();
    const auto d = X.cols();
    Vector eta(n), beta = Vector::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) {
        eta(i) = std::log(y(i) + 0.1);
    }

    auto deviance_of = [&](const Vector& lin) {
        double dev = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (observed(i) != 0) {
                dev += internal::poisson_deviance_term(y(i), std::exp(lin(i)));
            }
        }
        return dev;
    };

    double dev_old = deviance_of(eta);
    Matrix wx(n, d);
    Vector wz(n);
    for (int it = 1; it <= options.max_iterations; ++it) {
        for (Eigen::Index i = 0; i < n; ++i) {
            double mu = std::exp(eta(i));
            double w = observed(i) != 0 ? mu : 0.0;
            double z = eta(i) - offset(i) + (y(i) - mu) / mu;
            double sw = std::sqrt(w);
            wx.row(i) = sw * X.row(i);
            wz(i) = sw * z;
        }
        Eigen::ColPivHouseholderQR<Matrix> qr(wx);
        if (qr.rank() < d) {
            return {beta, false, it};
        }
        beta = qr.solve(wz);
        eta = offset + X * beta;
        if (!eta.allFinite()) {
            return {beta, false, it};
        }
        double dev = deviance_of(eta);
        if (std::abs(dev - dev_old) / (std::abs(dev) + 0.1) < options.tolerance) {
            return {beta, true, it};
        }
        dev_old = dev;
    }
    return {beta, false, options.max_iterations};
}

/**
 * Fit the null model column by column; masked entries are excluded.
 */
inline NullModel fit_null_model(const CountTable& counts, const Design& design, const GlmOptions& options = {}) {
    internal::require_shape(counts.n() == design.n() && counts.p() == design.p(), "counts and design");
    const auto p = counts.p();
    NullModel out;
    out.theta = Matrix::Zero(p, design.d());
    out.iterations.assign(static_cast<std::size_t>(p), 0);
    std::vector<double> column_loglik(static_cast<std::size_t>(p), 0.0);
    std::vector<char> column_ok(static_cast<std::size_t>(p), 1);

    parallelize(static_cast<std::size_t>(p), options.num_threads, [&](std::size_t start, std::size_t stop) {
        for (auto j = static_cast<Eigen::Index>(start); j < static_cast<Eigen::Index>(stop); ++j) {
            Vector y = counts.counts().col(j);
            Vector o = design.offsets().col(j);
            Vector w = counts.mask().col(j);
            GlmFit glm = poisson_glm(design.covariates(), y, o, w, options);
            out.theta.row(j) = glm.beta.transpose();
            out.iterations[static_cast<std::size_t>(j)] = glm.iterations;
            column_ok[static_cast<std::size_t>(j)] = glm.converged;
            Vector eta = o + design.covariates() * glm.beta;
            double ll = 0;
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                if (w(i) != 0) {
                    ll += internal::poisson_term(y(i), eta(i));
                }
            }
            column_loglik[static_cast<std::size_t>(j)] = ll;
        }
    });

    for (char ok : column_ok) {
        out.converged = out.converged && ok;
    }
    out.loglik = pairwise_sum(column_loglik.begin(), column_loglik.size());
    return out;
}

/**
 * Poisson log-likelihood of the observed entries at canonical parameters `lambda`.
 */
inline double poisson_loglik(const CountTable& counts, const Matrix& lambda) {
    internal::require_shape(lambda.rows() == counts.n() && lambda.cols() == counts.p(), "lambda and counts");
    double total = 0;
    for (Eigen::Index j = 0; j < counts.p(); ++j) {
        for (Eigen::Index i = 0; i < counts.n(); ++i) {
            if (counts.observed(i, j)) {
                total += internal::poisson_term(counts.counts()(i, j), lambda(i, j));
            }
        }
    }
    return total;
}

/**
 * Saturated Poisson log-likelihood, `lambda = log Y` with `0 log 0 = 0`.
 */
inline double poisson_saturated_loglik(const CountTable& counts) {
    double total = 0;
    for (Eigen::Index j = 0; j < counts.p(); ++j) {
        for (Eigen::Index i = 0; i < counts.n(); ++i) {
            if (counts.observed(i, j)) {
                total += internal::poisson_saturated_term(counts.counts()(i, j));
            }
        }
    }
    return total;
}

/**
 * Pseudo-R^2 of a fit from its latent positions.
 */
struct PseudoR2 {
    std::optional<double> r2;
    double loglik_model = 0;
    double loglik_null = 0;
    double loglik_saturated = 0;
};

/**
 * `(l_q - l_min) / (l_max - l_min)`, with `l_q` evaluated at `lambda = latent`.
 *
 * `null_loglik` is the null-model log-likelihood; pass the one of a smaller
 * covariate model to get the corrected version across nested designs.
 * Reported as unavailable when the denominator vanishes.
 */
inline PseudoR2 pseudo_r2(const Matrix& latent, const CountTable& counts, double null_loglik) {
    PseudoR2 out;
    out.loglik_model = poisson_loglik(counts, latent);
    out.loglik_saturated = poisson_saturated_loglik(counts);
    out.loglik_null = null_loglik;
    double denom = out.loglik_saturated - out.loglik_null;
    double scale = std::max({1.0, std::abs(out.loglik_saturated), std::abs(out.loglik_null)});
    if (std::isfinite(denom) && std::abs(denom) > 1e-9 * scale) {
        out.r2 = (out.loglik_model - out.loglik_null) / denom;
    }
    return out;
}

inline PseudoR2 pseudo_r2(const Matrix& latent, const CountTable& counts, const Design& design,
                          const GlmOptions& options = {}) {
    NullModel null = fit_null_model(counts, design, options);
    if (!null.converged) {
        PseudoR2 out;
        out.loglik_model = poisson_loglik(counts, latent);
        out.loglik_saturated = poisson_saturated_loglik(counts);
        out.loglik_null = null.loglik;
        return out;
    }
    return pseudo_r2(latent, counts, null.loglik);
}

enum class Criterion { icl, bic };

inline const char* to_string(Criterion c) { return c == Criterion::icl ? "icl" : "bic"; }

/**
 * Rank maximizing the chosen criterion among the fits that did not fail.
 * Ties go to the smaller rank. Returns 0 if no fit is usable.
 */
inline int select_rank(std::span<const FitResult> fits, Criterion criterion) {
    int best_rank = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& fit : fits) {
        if (fit.status == FitStatus::failed) {
            continue;
        }
        double value = criterion == Criterion::icl ? fit.criteria.icl : fit.criteria.bic;
        if (value > best || (value == best && fit.rank < best_rank)) {
            best = value;
            best_rank = fit.rank;
        }
    }
    return best_rank;
}

} // namespace plnpca

#endif
