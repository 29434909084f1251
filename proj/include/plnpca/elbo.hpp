#ifndef PLNPCA_ELBO_HPP
#define PLNPCA_ELBO_HPP

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "model.hpp"
#include "nef.hpp"
#include "parallel.hpp"

/**
 * @file elbo.hpp
 * @brief Variational lower bound of the log-likelihood and its blockwise gradients.
 *
 * With `V = O + X Theta^T + (M + S o U) B^T` and `U` standard normal, the bound is
 *
 *     J = sum_Omega [Y o (O + X Theta^T + M B^T) - A] - 1/2 sum [M^2 + S^2 - 2 log S - 1] - K(Y)
 *
 * where `A = E[b(V)]` and `K(Y)` sums the base measure over observed entries.
 * Each entry of `V` is a scalar Gaussian with location `O + X Theta^T + M B^T`
 * and variance `(S o S)(B o B)^T`, so every expectation is one-dimensional.
 * The cross moments behind the B and S gradients reduce to `E[b''(V)]` through
 * Stein's identity `E[h(a + cU) U] = c E[h'(a + cU)]`.
 */

namespace plnpca {

/**
 * Buffers shared by the bound and its gradients at one parameter value.
 */
struct ElboWorkspace {
    /// `O + X Theta^T + M B^T`, n x p.
    Matrix location;
    /// Variance of each entry of V, `(S o S)(B o B)^T`, n x p.
    Matrix variance;
    /// `E[b(V)]`, n x p.
    Matrix A;
    /// `E[b'(V)]`, n x p; the conditional expectation of Y under the variational law.
    Matrix Aprime;
    /// `E[b''(V)]`, n x p.
    Matrix Asecond;
    /// Cross-moment term of the B gradient, p x q.
    Matrix A1;
    /// Cross-moment term of the S gradient, n x q.
    Matrix A2;
    std::vector<double> row_terms;
};

/**
 * Gradients of J with respect to each parameter block.
 */
struct Gradients {
    Matrix theta;
    Matrix B;
    Matrix M;
    Matrix S;
};

/**
 * Fill `ws.A = E[b(V)]`, `ws.Aprime = E[b'(V)]` and `ws.Asecond = E[b''(V)]`.
 * Throws `OverflowError` if any entry is not finite.
 */
inline void compute_A(const Family& family, const ModelParams& params, const VariationalState& vstate,
                      const Design& design, ElboWorkspace& ws, int num_threads = 1) {
    check_state(params, vstate);
    internal::require_shape(params.p() == design.p() && params.d() == design.d(), "parameters and design");
    internal::require_shape(vstate.n() == design.n(), "M rows and design rows");
    if (!(vstate.S.array() > 0).all()) {
        throw DomainError("variational standard deviations must be strictly positive");
    }
    const auto n = design.n();
    const auto p = design.p();

    ws.location.noalias() = design.covariates() * params.theta.transpose();
    ws.location += design.offsets();
    ws.location.noalias() += vstate.M * params.B.transpose();
    ws.variance.noalias() = vstate.S.array().square().matrix() * params.B.array().square().matrix().transpose();
    ws.A.resize(n, p);
    ws.Aprime.resize(n, p);
    ws.Asecond.resize(n, p);

    if (family.kind() == Family::Kind::poisson) {
        parallelize(static_cast<std::size_t>(p), num_threads, [&](std::size_t start, std::size_t stop) {
            auto cols = static_cast<Eigen::Index>(stop - start);
            auto s = static_cast<Eigen::Index>(start);
            ws.A.middleCols(s, cols) =
                (ws.location.middleCols(s, cols) + 0.5 * ws.variance.middleCols(s, cols)).array().exp().matrix();
        });
        if (!ws.A.allFinite()) {
            throw OverflowError("exp overflow in E[b(V)]; parameters are too large");
        }
        ws.Aprime = ws.A;
        ws.Asecond = ws.A;
        return;
    }

    parallelize(static_cast<std::size_t>(p), num_threads, [&](std::size_t start, std::size_t stop) {
        for (auto j = static_cast<Eigen::Index>(start); j < static_cast<Eigen::Index>(stop); ++j) {
            for (Eigen::Index i = 0; i < n; ++i) {
                auto m = family.gauss_moments(ws.location(i, j), std::sqrt(ws.variance(i, j)));
                ws.A(i, j) = m.e0;
                ws.Aprime(i, j) = m.e1;
                ws.Asecond(i, j) = m.e2;
            }
        }
    });
}

inline ElboWorkspace compute_A(const Family& family, const ModelParams& params, const VariationalState& vstate,
                               const Design& design) {
    ElboWorkspace ws;
    compute_A(family, params, vstate, design, ws);
    return ws;
}

/**
 * Binds a data set and a family; evaluates J and its gradients for any parameter value.
 *
 * Instances are immutable after construction, so one problem can be shared by
 * several threads as long as each uses its own `ElboWorkspace`.
 */
class ElboProblem {
public:
    ElboProblem(const CountTable& counts, const Design& design, Family family, int num_threads = 1)
        : counts_(&counts), design_(&design), family_(std::move(family)), threads_(num_threads) {
        internal::require_shape(counts.n() == design.n(), "count rows and design rows");
        internal::require_shape(counts.p() == design.p(), "count columns and offset columns");
        const Matrix& y = counts.counts();
        const Matrix& mask = counts.mask();
        std::vector<double> per_row(counts.n(), 0.0);
        for (Eigen::Index i = 0; i < counts.n(); ++i) {
            double total = 0;
            for (Eigen::Index j = 0; j < counts.p(); ++j) {
                if (mask(i, j) != 0) {
                    total += family_.base_measure(y(i, j));
                }
            }
            per_row[i] = total;
        }
        constant_ = pairwise_sum(per_row.begin(), per_row.size());
    }

    const CountTable& counts() const { return *counts_; }
    const Design& design() const { return *design_; }
    const Family& family() const { return family_; }
    int num_threads() const { return threads_; }

    /// `K(Y)`: base measure summed over observed entries.
    double constant() const { return constant_; }

    void check(const ModelParams& params, const VariationalState& vstate) const {
        check_state(params, vstate);
        internal::require_shape(params.p() == counts_->p(), "theta rows and count columns");
        internal::require_shape(params.d() == design_->d(), "theta columns and covariate columns");
        internal::require_shape(vstate.n() == counts_->n(), "M rows and count rows");
        if (!(vstate.S.array() > 0).all()) {
            throw DomainError("variational standard deviations must be strictly positive");
        }
    }

    /**
     * Fill `A`, `Aprime` and `Asecond` (and the location and variance buffers).
     * Throws `OverflowError` if any entry is not finite.
     */
    void compute_A(const ModelParams& params, const VariationalState& vstate, ElboWorkspace& ws) const {
        check(params, vstate);
        plnpca::compute_A(family_, params, vstate, *design_, ws, threads_);
    }

    /**
     * J from a workspace already filled by `compute_A` at the same parameters.
     */
    double value_from(const VariationalState& vstate, ElboWorkspace& ws) const {
        const Matrix& y = counts_->counts();
        const Matrix& mask = counts_->mask();
        const auto n = counts_->n();
        const auto p = counts_->p();
        const auto q = vstate.q();
        ws.row_terms.assign(static_cast<std::size_t>(n), 0.0);

        parallelize(static_cast<std::size_t>(n), threads_, [&](std::size_t start, std::size_t stop) {
            for (auto i = static_cast<Eigen::Index>(start); i < static_cast<Eigen::Index>(stop); ++i) {
                double total = 0;
                for (Eigen::Index j = 0; j < p; ++j) {
                    if (mask(i, j) != 0) {
                        total += y(i, j) * ws.location(i, j) - ws.A(i, j);
                    }
                }
                double penalty = 0;
                for (Eigen::Index k = 0; k < q; ++k) {
                    double m = vstate.M(i, k);
                    double s = vstate.S(i, k);
                    penalty += m * m + s * s - 2 * std::log(s) - 1;
                }
                ws.row_terms[static_cast<std::size_t>(i)] = total - 0.5 * penalty;
            }
        });

        double value = pairwise_sum(ws.row_terms.begin(), ws.row_terms.size()) - constant_;
        if (!std::isfinite(value)) {
            throw OverflowError("variational bound is not finite");
        }
        return value;
    }

    double value(const ModelParams& params, const VariationalState& vstate, ElboWorkspace& ws) const {
        compute_A(params, vstate, ws);
        return value_from(vstate, ws);
    }

    double value(const ModelParams& params, const VariationalState& vstate) const {
        ElboWorkspace ws;
        return value(params, vstate, ws);
    }

    /**
     * Gradients from a workspace already filled by `compute_A` at the same parameters.
     * Masked entries are dropped from the residual and from both cross-moment terms.
     */
    void gradients_from(const ModelParams& params, const VariationalState& vstate, ElboWorkspace& ws,
                        Gradients& grad) const {
        const Matrix& mask = counts_->mask();
        Matrix residual = (counts_->counts() - ws.Aprime).cwiseProduct(mask);
        Matrix curvature = ws.Asecond.cwiseProduct(mask);
        Matrix s2 = vstate.S.array().square().matrix();
        Matrix b2 = params.B.array().square().matrix();

        ws.A1.noalias() = curvature.transpose() * s2;
        ws.A1 = ws.A1.cwiseProduct(params.B);
        ws.A2.noalias() = curvature * b2;
        ws.A2 = ws.A2.cwiseProduct(vstate.S);

        grad.theta.noalias() = residual.transpose() * design_->covariates();
        grad.B.noalias() = residual.transpose() * vstate.M;
        grad.B -= ws.A1;
        grad.M.noalias() = residual * params.B;
        grad.M -= vstate.M;
        grad.S = vstate.S.cwiseInverse() - ws.A2 - vstate.S;
    }

    double value_and_gradients(const ModelParams& params, const VariationalState& vstate, ElboWorkspace& ws,
                               Gradients& grad) const {
        compute_A(params, vstate, ws);
        double value = value_from(vstate, ws);
        gradients_from(params, vstate, ws, grad);
        return value;
    }

private:
    const CountTable* counts_;
    const Design* design_;
    Family family_;
    int threads_;
    double constant_ = 0;
};

inline double elbo(const Family& family, const ModelParams& params, const VariationalState& vstate,
                   const CountTable& counts, const Design& design) {
    return ElboProblem(counts, design, family).value(params, vstate);
}

inline Gradients gradients(const Family& family, const ModelParams& params, const VariationalState& vstate,
                           const CountTable& counts, const Design& design) {
    ElboProblem problem(counts, design, family);
    ElboWorkspace ws;
    Gradients grad;
    problem.value_and_gradients(params, vstate, ws, grad);
    return grad;
}

/**
 * Counts with every masked entry replaced by `A'`, its conditional expectation
 * under the variational law. `ws` must come from `compute_A` at the current parameters.
 */
inline Matrix impute(const CountTable& counts, const ElboWorkspace& ws) {
    internal::require_shape(ws.Aprime.rows() == counts.n() && ws.Aprime.cols() == counts.p(), "workspace and counts");
    Matrix out = counts.counts();
    const Matrix& mask = counts.mask();
    for (Eigen::Index j = 0; j < counts.p(); ++j) {
        for (Eigen::Index i = 0; i < counts.n(); ++i) {
            if (mask(i, j) == 0) {
                out(i, j) = ws.Aprime(i, j);
            }
        }
    }
    return out;
}

} // namespace plnpca

#endif
