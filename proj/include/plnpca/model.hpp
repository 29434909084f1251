#ifndef PLNPCA_MODEL_HPP
#define PLNPCA_MODEL_HPP

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

/**
 * @file model.hpp
 * @brief Data, parameters and derived estimators of the low-rank Poisson-lognormal model.
 *
 * Counts follow `Y_ij | Z_ij ~ P(exp(Z_ij))` with `Z_i = O_i + Theta X_i + B W_i`
 * and `W_i ~ N(0, I_q)`. Only `Sigma = B B^T` is identifiable, so every
 * comparison between fitted models goes through `Sigma`, never through `B`.
 */

namespace plnpca {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/**
 * Options applied when a `CountTable` is validated.
 */
struct CountTableOptions {
    /**
     * Require observed entries to be nonnegative integers.
     * Set to false when the responses feed a continuous family.
     */
    bool integer_counts = true;

    /**
     * Accept columns whose observed entries are all zero.
     * Such columns push the intercept to minus infinity, so they are rejected by default.
     */
    bool allow_zero_columns = false;
};

/**
 * Response matrix `Y` (n x p) with its observation mask.
 * A mask entry of 1 marks an observed value; masked entries of `Y` are stored as 0.
 */
class CountTable {
public:
    CountTable() = default;

    CountTable(Matrix counts, Matrix mask, std::vector<std::string> row_names = {},
               std::vector<std::string> col_names = {}, CountTableOptions options = {})
        : y_(std::move(counts)), mask_(std::move(mask)), rows_(std::move(row_names)), cols_(std::move(col_names)) {
        validate(options);
    }

    explicit CountTable(Matrix counts, CountTableOptions options = {})
        : CountTable(counts, Matrix::Ones(counts.rows(), counts.cols()), {}, {}, options) {}

    Eigen::Index n() const { return y_.rows(); }
    Eigen::Index p() const { return y_.cols(); }

    const Matrix& counts() const { return y_; }
    const Matrix& mask() const { return mask_; }
    bool observed(Eigen::Index i, Eigen::Index j) const { return mask_(i, j) != 0; }
    bool fully_observed() const { return mask_.minCoeff() == 1; }

    const std::vector<std::string>& row_names() const { return rows_; }
    const std::vector<std::string>& col_names() const { return cols_; }

private:
    Matrix y_;
    Matrix mask_;
    std::vector<std::string> rows_;
    std::vector<std::string> cols_;

    void validate(const CountTableOptions& options) {
        internal::require_shape(y_.rows() == mask_.rows() && y_.cols() == mask_.cols(), "counts and mask");
        if (y_.rows() == 0 || y_.cols() == 0) {
            throw DimensionError("count table is empty");
        }
        if (rows_.empty()) {
            for (Eigen::Index i = 0; i < y_.rows(); ++i) {
                rows_.push_back("S" + std::to_string(i + 1));
            }
        }
        if (cols_.empty()) {
            for (Eigen::Index j = 0; j < y_.cols(); ++j) {
                cols_.push_back("V" + std::to_string(j + 1));
            }
        }
        internal::require_shape(rows_.size() == static_cast<std::size_t>(y_.rows()), "row names");
        internal::require_shape(cols_.size() == static_cast<std::size_t>(y_.cols()), "column names");

        for (Eigen::Index j = 0; j < y_.cols(); ++j) {
            bool any_nonzero = false;
            bool any_observed = false;
            for (Eigen::Index i = 0; i < y_.rows(); ++i) {
                double m = mask_(i, j);
                if (m != 0 && m != 1) {
                    throw DomainError("mask entries must be 0 or 1");
                }
                if (m == 0) {
                    y_(i, j) = 0;
                    continue;
                }
                any_observed = true;
                double v = y_(i, j);
                if (!std::isfinite(v)) {
                    throw DomainError("non-finite observed value at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
                }
                if (options.integer_counts && (v < 0 || std::floor(v) != v)) {
                    throw DomainError("count at (" + std::to_string(i) + ", " + std::to_string(j) +
                                      ") is not a nonnegative integer");
                }
                any_nonzero = any_nonzero || v != 0;
            }
            if (!any_observed) {
                throw DomainError("column '" + cols_[j] + "' has no observed entry");
            }
            if (options.integer_counts && !any_nonzero && !options.allow_zero_columns) {
                throw DomainError("column '" + cols_[j] + "' is all zero; filter it or allow zero columns");
            }
        }
    }
};

/**
 * Covariates `X` (n x d) and known offsets `O` (n x p).
 */
class Design {
public:
    Design() = default;

    Design(Matrix covariates, Matrix offsets, std::vector<std::string> covariate_names = {})
        : x_(std::move(covariates)), o_(std::move(offsets)), names_(std::move(covariate_names)) {
        internal::require_shape(x_.rows() == o_.rows(), "covariates and offsets have different row counts");
        if (x_.cols() == 0) {
            throw DimensionError("design needs at least one covariate column");
        }
        if (!o_.allFinite()) {
            throw DomainError("offsets must be finite");
        }
        if (!x_.allFinite()) {
            throw DomainError("covariates must be finite");
        }
        Eigen::ColPivHouseholderQR<Matrix> qr(x_);
        if (qr.rank() < x_.cols()) {
            throw DomainError("covariate matrix is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                              std::to_string(x_.cols()) + ")");
        }
        if (names_.empty()) {
            for (Eigen::Index k = 0; k < x_.cols(); ++k) {
                names_.push_back(k == 0 ? "(Intercept)" : "X" + std::to_string(k));
            }
        }
        internal::require_shape(names_.size() == static_cast<std::size_t>(x_.cols()), "covariate names");
    }

    /// Intercept-only design with zero offsets.
    static Design intercept(Eigen::Index n, Eigen::Index p) {
        return Design(Matrix::Ones(n, 1), Matrix::Zero(n, p));
    }

    Eigen::Index n() const { return x_.rows(); }
    Eigen::Index d() const { return x_.cols(); }
    Eigen::Index p() const { return o_.cols(); }

    const Matrix& covariates() const { return x_; }
    const Matrix& offsets() const { return o_; }
    const std::vector<std::string>& covariate_names() const { return names_; }

private:
    Matrix x_;
    Matrix o_;
    std::vector<std::string> names_;
};

/**
 * Regression coefficients `theta` (p x d) and loadings `B` (p x q).
 */
struct ModelParams {
    Matrix theta;
    Matrix B;

    Eigen::Index p() const { return theta.rows(); }
    Eigen::Index d() const { return theta.cols(); }
    Eigen::Index q() const { return B.cols(); }
};

/**
 * Means `M` and standard deviations `S` (both n x q) of the diagonal Gaussian
 * approximations to the posteriors of the latent scores.
 */
struct VariationalState {
    Matrix M;
    Matrix S;

    Eigen::Index n() const { return M.rows(); }
    Eigen::Index q() const { return M.cols(); }
};

/**
 * Rank-q matrix kept as `scores * loadings^T`.
 */
struct LowRankMatrix {
    Matrix scores;
    Matrix loadings;

    Matrix dense() const { return scores * loadings.transpose(); }
};

/**
 * Goodness-of-fit and model selection summary of a fitted rank.
 */
struct Criteria {
    double elbo = 0;
    double bic = 0;
    double icl = 0;
    double entropy = 0;
    /// Unset when the null and saturated log-likelihoods coincide or the null GLM failed.
    std::optional<double> r2;
    double loglik_model = 0;
    double loglik_null = 0;
    double loglik_saturated = 0;
};

enum class FitStatus { converged, max_iterations, failed };

inline const char* to_string(FitStatus status) {
    switch (status) {
    case FitStatus::converged:
        return "converged";
    case FitStatus::max_iterations:
        return "max_iterations";
    case FitStatus::failed:
        return "failed";
    }
    return "unknown";
}

struct FitResult {
    int rank = 0;
    ModelParams params;
    VariationalState vstate;
    double elbo = 0;
    Criteria criteria;
    /// Estimated latent covariance, p x p, rank <= q.
    Matrix sigma;
    /// Latent positions `O + X Theta^T + M B^T`.
    Matrix latent;
    /// `M B^T` in factored form.
    LowRankMatrix structure;
    int iterations = 0;
    int evaluations = 0;
    double gradient_norm = 0;
    FitStatus status = FitStatus::failed;
    std::string message;
    /// Objective value at every accepted iterate, starting with the initial point.
    std::vector<double> trajectory;
};

inline void check_state(const ModelParams& params, const VariationalState& vstate) {
    internal::require_shape(params.theta.rows() == params.B.rows(), "theta and B row counts");
    internal::require_shape(vstate.M.rows() == vstate.S.rows() && vstate.M.cols() == vstate.S.cols(), "M and S");
    internal::require_shape(vstate.M.cols() == params.B.cols(), "rank of B and M");
}

/**
 * Latent positions `Z = O + X Theta^T + M B^T` and the latent structure
 * `P = M B^T`, the latter kept factored.
 */
inline std::pair<Matrix, LowRankMatrix> latent_positions(const ModelParams& params, const VariationalState& vstate,
                                                         const Design& design) {
    check_state(params, vstate);
    internal::require_shape(design.n() == vstate.n(), "design rows and M rows");
    internal::require_shape(design.p() == params.p(), "offset columns and theta rows");
    internal::require_shape(design.d() == params.d(), "covariate columns and theta columns");

    LowRankMatrix structure{vstate.M, params.B};
    Matrix z = design.offsets() + design.covariates() * params.theta.transpose() + vstate.M * params.B.transpose();
    return {std::move(z), std::move(structure)};
}

/**
 * Covariance estimator `B (M^T M / n + diag(colsum(S o S)) / n) B^T`.
 *
 * The inner q x q matrix is symmetrized and its eigenvalues in
 * `[-1e-10 trace, 0)` are clamped to zero before the product is formed as
 * `L L^T`, so the result is symmetric PSD with rank at most q.
 */
inline Matrix sigma_hat(const ModelParams& params, const VariationalState& vstate) {
    check_state(params, vstate);
    if ((vstate.S.array() <= 0).any()) {
        throw DomainError("variational standard deviations must be positive");
    }
    const double n = static_cast<double>(vstate.n());
    Matrix inner = vstate.M.transpose() * vstate.M / n;
    inner.diagonal() += vstate.S.array().square().colwise().sum().matrix().transpose() / n;
    inner = 0.5 * (inner + inner.transpose()).eval();

    Eigen::SelfAdjointEigenSolver<Matrix> eig(inner);
    Vector values = eig.eigenvalues();
    double tol = 1e-10 * std::max(values.cwiseAbs().sum(), 1e-300);
    for (Eigen::Index k = 0; k < values.size(); ++k) {
        if (values(k) < 0 && values(k) >= -tol) {
            values(k) = 0;
        }
    }
    if ((values.array() < 0).any()) {
        throw DomainError("inner covariance of sigma_hat is not PSD");
    }
    Matrix root = params.B * eig.eigenvectors() * values.cwiseSqrt().asDiagonal();
    Matrix sigma = root * root.transpose();
    return 0.5 * (sigma + sigma.transpose());
}

/**
 * Marginal moments of a Poisson-lognormal vector with log-mean `mu` and latent covariance `sigma`.
 */
struct PlnMoments {
    Vector mean;
    Vector variance;
    Matrix covariance;
};

inline PlnMoments pln_moments(const Vector& mu, const Matrix& sigma) {
    internal::require_shape(sigma.rows() == mu.size() && sigma.cols() == mu.size(), "mu and sigma");
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, sigma.cwiseAbs().maxCoeff())) {
        throw DomainError("latent covariance is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(sigma, Eigen::EigenvaluesOnly);
    double scale = std::max(1.0, sigma.trace());
    if (eig.eigenvalues().minCoeff() < -1e-10 * scale) {
        throw DomainError("latent covariance is not positive semidefinite");
    }

    const auto p = mu.size();
    PlnMoments out;
    out.mean = (mu.array() + 0.5 * sigma.diagonal().array()).exp().matrix();
    out.covariance.resize(p, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        for (Eigen::Index k = 0; k < p; ++k) {
            out.covariance(j, k) = std::expm1(sigma(j, k)) * out.mean(j) * out.mean(k);
        }
        out.covariance(j, j) += out.mean(j);
    }
    out.variance = out.covariance.diagonal();
    return out;
}

} // namespace plnpca

#endif
