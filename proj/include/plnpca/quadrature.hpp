#ifndef PLNPCA_QUADRATURE_HPP
#define PLNPCA_QUADRATURE_HPP

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

/**
 * @file quadrature.hpp
 * @brief Gauss-Hermite rules for expectations under a standard normal.
 */

namespace plnpca {

/**
 * Gauss-Hermite rule rescaled for the standard normal density, so that
 * `E[f(U)] ~ sum_k weights[k] * f(nodes[k])` with `U ~ N(0, 1)`.
 *
 * Nodes start from the Jacobi-matrix eigenvalues and are polished by Newton
 * iteration on the orthonormal Hermite recurrence, which also gives the
 * weights. Weights taken from eigenvectors lose relative precision in the tails.
 */
class GaussHermiteRule {
public:
    GaussHermiteRule() = default;

    explicit GaussHermiteRule(std::size_t order) {
        if (order == 0) {
            throw DomainError("Gauss-Hermite rule needs at least one node");
        }
        compute(order);
    }

    std::size_t size() const { return nodes_.size(); }
    const std::vector<double>& nodes() const { return nodes_; }
    const std::vector<double>& weights() const { return weights_; }

    template<class Function_>
    double expectation(Function_&& f) const {
        double total = 0;
        for (std::size_t k = 0; k < nodes_.size(); ++k) {
            total += weights_[k] * f(nodes_[k]);
        }
        return total;
    }

private:
    std::vector<double> nodes_;
    std::vector<double> weights_;

    void compute(std::size_t n) {
        // Physicists' nodes x (weight exp(-x^2)); converted at the end.
        // Starting points are the eigenvalues of the Jacobi matrix.
        Eigen::VectorXd diag = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        Eigen::VectorXd sub(static_cast<Eigen::Index>(n > 1 ? n - 1 : 0));
        for (Eigen::Index j = 0; j < sub.size(); ++j) {
            sub(j) = std::sqrt(static_cast<double>(j + 1) / 2.0);
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> jacobi;
        jacobi.computeFromTridiagonal(diag, sub, Eigen::EigenvaluesOnly);

        std::vector<double> x(n), w(n);
        const double pim4 = 1.0 / std::pow(std::numbers::pi, 0.25);
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < (n + 1) / 2; ++i) {
            double z = jacobi.eigenvalues()(static_cast<Eigen::Index>(n - 1 - i));
            double pp = 0;
            bool converged = false;
            for (int its = 0; its < 100; ++its) {
                double p1 = pim4, p2 = 0;
                for (std::size_t j = 1; j <= n; ++j) {
                    double p3 = p2;
                    p2 = p1;
                    double dj = static_cast<double>(j);
                    p1 = z * std::sqrt(2.0 / dj) * p2 - std::sqrt((dj - 1) / dj) * p3;
                }
                pp = std::sqrt(2 * dn) * p2;
                double z1 = z;
                z = z1 - p1 / pp;
                if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) {
                    converged = true;
                    break;
                }
            }
            if (!converged) {
                throw ConvergenceError("Gauss-Hermite node iteration did not converge");
            }
            if (2 * i + 1 == n) {
                z = 0;
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }

        nodes_.resize(n);
        weights_.resize(n);
        const double inv_sqrt_pi = 1.0 / std::sqrt(std::numbers::pi);
        for (std::size_t i = 0; i < n; ++i) {
            // Ascending order.
            nodes_[i] = std::numbers::sqrt2 * x[n - 1 - i];
            weights_[i] = w[n - 1 - i] * inv_sqrt_pi;
        }
    }
};

} // namespace plnpca

#endif
