#ifndef PLNPCA_OPTIM_HPP
#define PLNPCA_OPTIM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ccsa.hpp"
#include "elbo.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "nef.hpp"
#include "parallel.hpp"
#include "selection.hpp"

/**
 * @file optim.hpp
 * @brief Initialization, single-rank fits and rank scans.
 */

namespace plnpca {

enum class Algorithm { mma, projected_gradient };

inline const char* to_string(Algorithm a) { return a == Algorithm::mma ? "mma" : "projected_gradient"; }

/**
 * Optimizer settings for one fit.
 */
struct OptimConfig {
    int max_iterations = 5000;
    /// Relative change of J below which an iterate counts as stalled.
    double ftol_rel = 1e-6;
    /// Number of consecutive stalled iterates that ends the fit.
    int ftol_patience = 5;
    double xtol_rel = 1e-10;
    /// Sup-norm of the projected gradient that ends the fit.
    double gtol = 1e-8;
    /// Lower bound of every entry of S.
    double s_floor = 1e-4;
    /// Starting value of every entry of S.
    double s_init = 0.1;
    /// Gauss-Hermite nodes for generic families.
    std::size_t quadrature_nodes = Family::default_nodes;
    /// Echoed in run manifests; the fit itself is deterministic.
    std::uint64_t seed = 0;
    Algorithm algorithm = Algorithm::mma;
    /// Workers for one fit's bound evaluations, or for the ranks of a scan.
    int num_threads = 1;
    bool record_trajectory = true;

    void validate() const {
        if (max_iterations < 1) {
            throw DomainError("max_iterations must be positive");
        }
        if (!(ftol_rel > 0) || !(xtol_rel > 0) || !(gtol > 0)) {
            throw DomainError("tolerances must be positive");
        }
        if (ftol_patience < 1) {
            throw DomainError("ftol_patience must be positive");
        }
        if (!(s_floor > 0)) {
            throw DomainError("S floor must be positive");
        }
        if (!(s_init >= s_floor)) {
            throw DomainError("initial S must not be below the S floor");
        }
        if (quadrature_nodes < 1) {
            throw DomainError("quadrature needs at least one node");
        }
    }

    AscentOptions ascent_options() const {
        AscentOptions out;
        out.max_iterations = max_iterations;
        out.ftol_rel = ftol_rel;
        out.ftol_patience = ftol_patience;
        out.xtol_rel = xtol_rel;
        out.gtol = gtol;
        out.record_trajectory = record_trajectory;
        return out;
    }
};

namespace internal {

/// Layout of the flat optimization vector: theta, B, M, S, each column-major.
struct Packing {
    Eigen::Index n, p, d, q;

    Eigen::Index size() const { return p * d + p * q + 2 * n * q; }
    Eigen::Index theta_offset() const { return 0; }
    Eigen::Index b_offset() const { return p * d; }
    Eigen::Index m_offset() const { return p * (d + q); }
    Eigen::Index s_offset() const { return p * (d + q) + n * q; }

    Eigen::VectorXd pack(const ModelParams& params, const VariationalState& vstate) const {
        Eigen::VectorXd x(size());
        x.segment(theta_offset(), p * d) = params.theta.reshaped();
        x.segment(b_offset(), p * q) = params.B.reshaped();
        x.segment(m_offset(), n * q) = vstate.M.reshaped();
        x.segment(s_offset(), n * q) = vstate.S.reshaped();
        return x;
    }

    void unpack(const Eigen::VectorXd& x, ModelParams& params, VariationalState& vstate) const {
        params.theta = x.segment(theta_offset(), p * d).reshaped(p, d);
        params.B = x.segment(b_offset(), p * q).reshaped(p, q);
        vstate.M = x.segment(m_offset(), n * q).reshaped(n, q);
        vstate.S = x.segment(s_offset(), n * q).reshaped(n, q);
    }

    void pack_gradients(const Gradients& g, Eigen::VectorXd& out) const {
        out.resize(size());
        out.segment(theta_offset(), p * d) = g.theta.reshaped();
        out.segment(b_offset(), p * q) = g.B.reshaped();
        out.segment(m_offset(), n * q) = g.M.reshaped();
        out.segment(s_offset(), n * q) = g.S.reshaped();
    }
};

/**
 * Response transform of the starting linear model: `log(1 + y)` for count
 * families, the identity for the Gaussian family.
 */
inline double starting_transform(const Family& family, double y) {
    return family.kind() == Family::Kind::gaussian_unit_variance ? y : std::log1p(y);
}

} // namespace internal

/**
 * Starting point from a linear model on the transformed responses.
 *
 * `theta` holds the least-squares coefficients of `log(1 + Y) - O` on `X`,
 * `B` is the square root of the best rank-q approximation of the residual
 * covariance, `M = 0` and every entry of `S` equals `s_init`. Masked entries
 * are replaced by their column mean of the transformed observed values.
 */
inline std::pair<ModelParams, VariationalState> initialize(const CountTable& counts, const Design& design, int q,
                                                           double s_init = 0.1,
                                                           const Family& family = Family::poisson()) {
    internal::require_shape(counts.n() == design.n() && counts.p() == design.p(), "counts and design");
    const auto n = counts.n();
    const auto p = counts.p();
    if (q < 1 || q > std::min(n, p)) {
        throw DomainError("rank must lie in [1, min(n, p)], got " + std::to_string(q));
    }
    if (!(s_init > 0)) {
        throw DomainError("initial S must be positive");
    }

    Matrix target(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        double sum = 0;
        double count = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (counts.observed(i, j)) {
                target(i, j) = internal::starting_transform(family, counts.counts()(i, j)) - design.offsets()(i, j);
                sum += target(i, j);
                count += 1;
            }
        }
        double fill = count > 0 ? sum / count : 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!counts.observed(i, j)) {
                target(i, j) = fill;
            }
        }
    }

    Eigen::ColPivHouseholderQR<Matrix> qr(design.covariates());
    if (qr.rank() < design.d()) {
        throw DomainError("covariate matrix is rank deficient");
    }
    Matrix coef = qr.solve(target); // d x p
    Matrix residual = target - design.covariates() * coef;

    Matrix centered = residual.rowwise() - residual.colwise().mean();
    double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    Matrix cov = centered.transpose() * centered / denom;
    cov = 0.5 * (cov + cov.transpose()).eval();

    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    // Eigenvalues come in increasing order.
    Matrix B(p, q);
    for (int k = 0; k < q; ++k) {
        Eigen::Index idx = p - 1 - k;
        double value = std::max(eig.eigenvalues()(idx), 0.0);
        B.col(k) = eig.eigenvectors().col(idx) * std::sqrt(value);
    }

    ModelParams params{coef.transpose(), std::move(B)};
    VariationalState vstate{Matrix::Zero(n, q), Matrix::Constant(n, q, s_init)};
    return {std::move(params), std::move(vstate)};
}

/**
 * Fill the derived quantities of a fit: Sigma, latent positions, criteria.
 *
 * `null_loglik` is the null-model log-likelihood used by the pseudo-R^2; it is
 * computed on the spot when absent. The pseudo-R^2 is only defined for the
 * Poisson family.
 */
inline void summarize_fit(FitResult& fit, const ElboProblem& problem, std::optional<double> null_loglik = {}) {
    const CountTable& counts = problem.counts();
    const Design& design = problem.design();
    fit.rank = static_cast<int>(fit.params.q());
    fit.sigma = sigma_hat(fit.params, fit.vstate);
    auto [latent, structure] = latent_positions(fit.params, fit.vstate, design);
    fit.latent = std::move(latent);
    fit.structure = std::move(structure);

    auto info = bic_icl(fit.elbo, fit.vstate.S, counts.n(), counts.p(), design.d(), fit.params.q());
    fit.criteria.elbo = fit.elbo;
    fit.criteria.bic = info.bic;
    fit.criteria.icl = info.icl;
    fit.criteria.entropy = info.entropy;

    if (problem.family().kind() != Family::Kind::gaussian_unit_variance) {
        if (!null_loglik) {
            NullModel null = fit_null_model(counts, design);
            if (null.converged) {
                null_loglik = null.loglik;
            }
        }
        if (null_loglik) {
            auto r2 = pseudo_r2(fit.latent, counts, *null_loglik);
            fit.criteria.r2 = r2.r2;
            fit.criteria.loglik_model = r2.loglik_model;
            fit.criteria.loglik_null = r2.loglik_null;
            fit.criteria.loglik_saturated = r2.loglik_saturated;
        } else {
            fit.criteria.loglik_model = poisson_loglik(counts, fit.latent);
            fit.criteria.loglik_saturated = poisson_saturated_loglik(counts);
        }
    }
}

/**
 * Maximize J from a given starting point.
 */
inline FitResult fit_from(const ElboProblem& problem, const ModelParams& start_params,
                          const VariationalState& start_vstate, const OptimConfig& config,
                          std::optional<double> null_loglik = {}) {
    config.validate();
    problem.check(start_params, start_vstate);
    const auto n = problem.counts().n();
    const internal::Packing layout{n, start_params.p(), start_params.d(), start_params.q()};

    Eigen::VectorXd lower = Eigen::VectorXd::Constant(layout.size(), -std::numeric_limits<double>::infinity());
    Eigen::VectorXd upper = Eigen::VectorXd::Constant(layout.size(), std::numeric_limits<double>::infinity());
    lower.segment(layout.s_offset(), n * layout.q).setConstant(config.s_floor);

    ModelParams params = start_params;
    VariationalState vstate = start_vstate;
    ElboWorkspace ws;
    Gradients grad;
    auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        layout.unpack(x, params, vstate);
        double value = problem.value_and_gradients(params, vstate, ws, grad);
        layout.pack_gradients(grad, g);
        return value;
    };

    Eigen::VectorXd x0 = layout.pack(start_params, start_vstate);
    AscentResult run = config.algorithm == Algorithm::mma
                           ? maximize_mma(objective, std::move(x0), lower, upper, config.ascent_options())
                           : maximize_projected_gradient(objective, std::move(x0), lower, upper,
                                                         config.ascent_options());

    FitResult fit;
    layout.unpack(run.x, fit.params, fit.vstate);
    fit.elbo = run.value;
    fit.iterations = run.iterations;
    fit.evaluations = run.evaluations;
    fit.gradient_norm = internal::projected_gradient_norm(run.x, run.gradient, lower, upper);
    fit.trajectory = std::move(run.trajectory);
    fit.message = run.message;
    switch (run.status) {
    case AscentStatus::ftol_reached:
    case AscentStatus::xtol_reached:
    case AscentStatus::gtol_reached:
        fit.status = FitStatus::converged;
        break;
    case AscentStatus::max_iterations:
        fit.status = FitStatus::max_iterations;
        break;
    case AscentStatus::stalled:
        fit.status = FitStatus::failed;
        fit.message = "optimizer could not find an admissible step after repeated backoff (overflow or "
                      "non-conservative approximation)";
        break;
    }
    summarize_fit(fit, problem, null_loglik);
    return fit;
}

/**
 * Fit one rank from the linear-model starting point.
 */
inline FitResult fit_rank(const CountTable& counts, const Design& design, const Family& family, int q,
                          const OptimConfig& config = {}, std::optional<double> null_loglik = {}) {
    config.validate();
    if (q < 1) {
        throw DomainError("rank must be at least 1");
    }
    ElboProblem problem(counts, design, family, config.num_threads);
    auto [params, vstate] = initialize(counts, design, q, config.s_init, family);
    return fit_from(problem, params, vstate, config, null_loglik);
}

/**
 * Fits of several ranks with the rank chosen by each criterion.
 */
struct RankScanResult {
    /// One entry per requested rank, in increasing rank order.
    std::vector<FitResult> fits;
    /// Error message per rank; empty when the fit ran.
    std::vector<std::string> errors;
    int best_icl = 0;
    int best_bic = 0;
    std::optional<double> null_loglik;

    const FitResult* find(int rank) const {
        for (const auto& f : fits) {
            if (f.rank == rank) {
                return &f;
            }
        }
        return nullptr;
    }

    int best(Criterion c) const { return c == Criterion::icl ? best_icl : best_bic; }
};

/**
 * Independent fits for each rank, each from its own starting point.
 *
 * Ranks are spread over `config.num_threads` workers; each fit is single
 * threaded and deterministic, so the result does not depend on the worker count.
 * A rank whose fit throws is kept with status `failed` and its message.
 */
inline RankScanResult fit_rank_scan(const CountTable& counts, const Design& design, const Family& family,
                                    std::vector<int> ranks, const OptimConfig& config = {}) {
    config.validate();
    if (ranks.empty()) {
        throw DomainError("rank list is empty");
    }
    std::sort(ranks.begin(), ranks.end());
    if (std::adjacent_find(ranks.begin(), ranks.end()) != ranks.end()) {
        throw DomainError("rank list contains duplicates");
    }
    const auto limit = std::min(counts.n(), counts.p());
    for (int q : ranks) {
        if (q < 1 || q > limit) {
            throw DomainError("rank " + std::to_string(q) + " outside [1, " + std::to_string(limit) + "]");
        }
    }

    RankScanResult out;
    if (family.kind() != Family::Kind::gaussian_unit_variance) {
        NullModel null = fit_null_model(counts, design);
        if (null.converged) {
            out.null_loglik = null.loglik;
        }
    }

    out.fits.resize(ranks.size());
    out.errors.resize(ranks.size());
    OptimConfig inner = config;
    inner.num_threads = 1;
    parallelize(ranks.size(), config.num_threads, [&](std::size_t start, std::size_t stop) {
        for (std::size_t r = start; r < stop; ++r) {
            try {
                out.fits[r] = fit_rank(counts, design, family, ranks[r], inner, out.null_loglik);
            } catch (const Error& e) {
                out.fits[r] = FitResult{};
                out.fits[r].rank = ranks[r];
                out.fits[r].status = FitStatus::failed;
                out.fits[r].message = e.what();
                out.errors[r] = e.what();
            }
        }
    });

    out.best_icl = select_rank(out.fits, Criterion::icl);
    out.best_bic = select_rank(out.fits, Criterion::bic);
    return out;
}

} // namespace plnpca

#endif
