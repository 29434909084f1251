#ifndef PLNPCA_TESTS_SUPPORT_HPP
#define PLNPCA_TESTS_SUPPORT_HPP

// Random instances and numerical oracles shared by the unit tests and the acceptance binary.
// Randomness here comes from the standard library, independent of the library's own generator.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "plnpca/elbo.hpp"
#include "plnpca/model.hpp"
#include "plnpca/nef.hpp"

namespace support {

using plnpca::Matrix;
using plnpca::Vector;

struct Instance {
    plnpca::CountTable counts;
    plnpca::Design design;
    plnpca::ModelParams params;
    plnpca::VariationalState vstate;
};

struct InstanceShape {
    int n = 6;
    int p = 5;
    int q = 2;
    int d = 2;
    double missing = 0.0;
    /// Spread of theta, B and M entries.
    double scale = 0.5;
};

inline Matrix normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
    std::normal_distribution<double> normal(0.0, sd);
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            out(i, j) = normal(rng);
        }
    }
    return out;
}

inline Matrix uniform_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    std::uniform_real_distribution<double> uniform(lo, hi);
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
            out(i, j) = uniform(rng);
        }
    }
    return out;
}

/// Covariates with an intercept column followed by standard normals.
inline Matrix covariates(std::mt19937_64& rng, Eigen::Index n, Eigen::Index d) {
    Matrix x = normal_matrix(rng, n, d, 1.0);
    x.col(0).setOnes();
    return x;
}

/// Mask with each entry missing with probability `missing`, every column keeping one observed entry.
inline Matrix random_mask(std::mt19937_64& rng, Eigen::Index n, Eigen::Index p, double missing) {
    std::bernoulli_distribution drop(missing);
    Matrix mask = Matrix::Ones(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            if (drop(rng)) {
                mask(i, j) = 0;
            }
        }
        if (mask.col(j).sum() == 0) {
            std::uniform_int_distribution<Eigen::Index> row(0, n - 1);
            mask(row(rng), j) = 1;
        }
    }
    return mask;
}

/// Poisson counts at rates exp(eta), drawn with the standard library.
inline Matrix poisson_counts(std::mt19937_64& rng, const Matrix& eta) {
    Matrix y(eta.rows(), eta.cols());
    for (Eigen::Index i = 0; i < eta.rows(); ++i) {
        for (Eigen::Index j = 0; j < eta.cols(); ++j) {
            std::poisson_distribution<long> draw(std::exp(eta(i, j)));
            y(i, j) = static_cast<double>(draw(rng));
        }
    }
    return y;
}

/// Bernoulli draws at probabilities 1 / (1 + exp(-eta)).
inline Matrix bernoulli_counts(std::mt19937_64& rng, const Matrix& eta) {
    Matrix y(eta.rows(), eta.cols());
    for (Eigen::Index i = 0; i < eta.rows(); ++i) {
        for (Eigen::Index j = 0; j < eta.cols(); ++j) {
            std::bernoulli_distribution draw(1.0 / (1.0 + std::exp(-eta(i, j))));
            y(i, j) = draw(rng) ? 1.0 : 0.0;
        }
    }
    return y;
}

/// Logistic kernel `b(x) = log(1 + e^x)`, an exponential family without closed-form Gaussian expectations.
inline plnpca::Kernel logistic_kernel() {
    plnpca::Kernel k;
    k.name = "bernoulli";
    k.b = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
    k.b1 = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    k.b2 = [](double x) {
        double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1 - s);
    };
    k.base_measure = [](double) { return 0.0; };
    k.link = [](double mu) { return std::log(mu / (1 - mu)); };
    k.check_observation = [](double y) {
        if (y != 0 && y != 1) {
            throw plnpca::DomainError("Bernoulli observations must be 0 or 1");
        }
    };
    return k;
}

/**
 * A random instance with data drawn from the model at random parameters and
 * an unrelated random variational state.
 */
inline Instance random_instance(std::mt19937_64& rng, const InstanceShape& shape, bool bernoulli = false) {
    Matrix x = covariates(rng, shape.n, shape.d);
    Matrix o = normal_matrix(rng, shape.n, shape.p, 0.3);
    plnpca::ModelParams params{normal_matrix(rng, shape.p, shape.d, shape.scale),
                               normal_matrix(rng, shape.p, shape.q, shape.scale)};
    plnpca::VariationalState vstate{normal_matrix(rng, shape.n, shape.q, shape.scale),
                                    uniform_matrix(rng, shape.n, shape.q, 0.2, 1.0)};
    Matrix w = normal_matrix(rng, shape.n, shape.q, 1.0);
    Matrix eta = o + x * params.theta.transpose() + w * params.B.transpose();
    Matrix y = bernoulli ? bernoulli_counts(rng, eta) : poisson_counts(rng, eta);
    Matrix mask = random_mask(rng, shape.n, shape.p, shape.missing);
    plnpca::CountTableOptions options;
    options.allow_zero_columns = true;
    return {plnpca::CountTable(y, mask, {}, {}, options), plnpca::Design(x, o), std::move(params), std::move(vstate)};
}

/**
 * Fourth-order central difference of `f` along every entry of `target`.
 */
template<class F>
Matrix finite_difference(Matrix& target, F&& f, double h = 1e-4) {
    Matrix out(target.rows(), target.cols());
    for (Eigen::Index i = 0; i < target.rows(); ++i) {
        for (Eigen::Index j = 0; j < target.cols(); ++j) {
            double saved = target(i, j);
            double step = h * std::max(1.0, std::abs(saved));
            auto at = [&](double delta) {
                target(i, j) = saved + delta;
                return f();
            };
            double fp2 = at(2 * step), fp1 = at(step), fm1 = at(-step), fm2 = at(-2 * step);
            target(i, j) = saved;
            out(i, j) = (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * step);
        }
    }
    return out;
}

inline double relative_error(const Matrix& approx, const Matrix& exact) {
    if (exact.size() == 0) {
        return 0;
    }
    return (approx - exact).norm() / std::max(exact.norm(), 1.0);
}

struct BlockErrors {
    double theta = 0, B = 0, M = 0, S = 0;
    double max() const { return std::max({theta, B, M, S}); }
};

/// Analytic gradients against finite differences of the bound, block by block.
inline BlockErrors gradient_check(const plnpca::Family& family, Instance& inst) {
    plnpca::ElboProblem problem(inst.counts, inst.design, family);
    plnpca::ElboWorkspace ws;
    plnpca::Gradients grad;
    problem.value_and_gradients(inst.params, inst.vstate, ws, grad);
    auto f = [&] { return problem.value(inst.params, inst.vstate); };
    BlockErrors out;
    out.theta = relative_error(finite_difference(inst.params.theta, f), grad.theta);
    out.B = relative_error(finite_difference(inst.params.B, f), grad.B);
    out.M = relative_error(finite_difference(inst.vstate.M, f), grad.M);
    // Keep the S perturbation well inside S > 0.
    out.S = relative_error(finite_difference(inst.vstate.S, f, 1e-5), grad.S);
    return out;
}

/**
 * `J(midpoint) - (J(a) + J(b)) / 2` for two random points that differ only in
 * the (theta, B) block (`model_block`) or only in the (M, S) block.
 */
inline double midpoint_slack(const plnpca::ElboProblem& problem, const Instance& base, std::mt19937_64& rng,
                             bool model_block, double spread = 0.5) {
    auto a = base;
    auto b = base;
    if (model_block) {
        a.params.theta += normal_matrix(rng, base.params.theta.rows(), base.params.theta.cols(), spread);
        a.params.B += normal_matrix(rng, base.params.B.rows(), base.params.B.cols(), spread);
        b.params.theta += normal_matrix(rng, base.params.theta.rows(), base.params.theta.cols(), spread);
        b.params.B += normal_matrix(rng, base.params.B.rows(), base.params.B.cols(), spread);
    } else {
        a.vstate.M += normal_matrix(rng, base.vstate.M.rows(), base.vstate.M.cols(), spread);
        b.vstate.M += normal_matrix(rng, base.vstate.M.rows(), base.vstate.M.cols(), spread);
        a.vstate.S = uniform_matrix(rng, base.vstate.S.rows(), base.vstate.S.cols(), 0.05, 1.5);
        b.vstate.S = uniform_matrix(rng, base.vstate.S.rows(), base.vstate.S.cols(), 0.05, 1.5);
    }
    auto mid = base;
    mid.params.theta = 0.5 * (a.params.theta + b.params.theta);
    mid.params.B = 0.5 * (a.params.B + b.params.B);
    mid.vstate.M = 0.5 * (a.vstate.M + b.vstate.M);
    mid.vstate.S = 0.5 * (a.vstate.S + b.vstate.S);
    double ja = problem.value(a.params, a.vstate);
    double jb = problem.value(b.params, b.vstate);
    double jm = problem.value(mid.params, mid.vstate);
    return jm - 0.5 * (ja + jb);
}

} // namespace support

#endif
