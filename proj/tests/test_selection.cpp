#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "plnpca/optim.hpp"
#include "plnpca/selection.hpp"
#include "plnpca/simulate.hpp"
#include "support.hpp"

using plnpca::CountTable;
using plnpca::Design;
using plnpca::Matrix;
using plnpca::Vector;

TEST(Criteria, BicExample) {
    auto info = plnpca::bic_icl(-100, Matrix::Ones(50, 2), 50, 10, 1, 2);
    EXPECT_NEAR(info.bic, -100 - 15 * std::log(50.0), 1e-12);
    EXPECT_NEAR(info.bic, -158.680, 1e-3);
}

TEST(Criteria, EntropyExample) {
    double h = plnpca::variational_entropy(Matrix::Ones(1, 1));
    EXPECT_NEAR(h, 0.5 * std::log(2 * std::numbers::pi * std::numbers::e), 1e-15);
    EXPECT_NEAR(h, 1.4189, 1e-4);
}

TEST(Criteria, EntropyMonotoneAndDifferenceExact) {
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 50; ++rep) {
        Matrix S = support::uniform_matrix(rng, 7, 3, 0.01, 2.0);
        double before = plnpca::variational_entropy(S);
        Matrix smaller = S;
        smaller(rep % 7, rep % 3) *= 0.5;
        EXPECT_LT(plnpca::variational_entropy(smaller), before);
        double j = -1000 * (rep + 1) * 0.37;
        auto info = plnpca::bic_icl(j, S, 7, 4, 2, 3);
        EXPECT_EQ(info.bic - info.icl, info.entropy);
        EXPECT_NEAR(info.entropy, before, 4 * std::numeric_limits<double>::epsilon() * std::abs(info.bic));
    }
    EXPECT_THROW(plnpca::variational_entropy(Matrix::Zero(1, 1)), plnpca::DomainError);
}

TEST(Glm, ScoreEquationsVanish) {
    std::mt19937_64 rng(2);
    const int n = 200;
    Matrix x = support::covariates(rng, n, 3);
    Vector beta(3);
    beta << 1.0, 0.4, -0.3;
    Vector offset = support::normal_matrix(rng, n, 1, 0.2).col(0);
    Matrix y = support::poisson_counts(rng, (offset + x * beta).eval());
    Vector observed = support::random_mask(rng, n, 1, 0.1).col(0);
    auto fit = plnpca::poisson_glm(x, y.col(0), offset, observed);
    ASSERT_TRUE(fit.converged);
    Vector mu = (offset + x * fit.beta).array().exp();
    Vector residual = (y.col(0) - mu).cwiseProduct(observed);
    Vector score = x.transpose() * residual;
    EXPECT_LT(score.cwiseAbs().maxCoeff(), 1e-6 * y.sum());
    EXPECT_LT((fit.beta - beta).cwiseAbs().maxCoeff(), 0.2);
}

TEST(Glm, InterceptClosedForm) {
    std::mt19937_64 rng(3);
    const int n = 40;
    Vector offset = support::normal_matrix(rng, n, 1, 0.5).col(0);
    Matrix y = support::poisson_counts(rng, (offset.array() + 1.0).matrix());
    auto fit = plnpca::poisson_glm(Matrix::Ones(n, 1), y.col(0), offset, Vector::Ones(n));
    ASSERT_TRUE(fit.converged);
    double expected = std::log(y.sum() / offset.array().exp().sum());
    EXPECT_NEAR(fit.beta(0), expected, 1e-9);
}

TEST(Glm, NullModelMatchesColumnFits) {
    std::mt19937_64 rng(4);
    auto inst = support::random_instance(rng, {12, 4, 1, 2, 0.2, 0.5});
    auto null = plnpca::fit_null_model(inst.counts, inst.design);
    ASSERT_TRUE(null.converged);
    double total = 0;
    for (Eigen::Index j = 0; j < 4; ++j) {
        auto glm = plnpca::poisson_glm(inst.design.covariates(), inst.counts.counts().col(j),
                                       inst.design.offsets().col(j), inst.counts.mask().col(j));
        EXPECT_EQ(glm.beta.transpose(), null.theta.row(j));
        Vector eta = inst.design.offsets().col(j) + inst.design.covariates() * glm.beta;
        for (Eigen::Index i = 0; i < 12; ++i) {
            if (inst.counts.observed(i, j)) {
                double y = inst.counts.counts()(i, j);
                total += y * eta(i) - std::exp(eta(i)) - std::lgamma(y + 1);
            }
        }
    }
    EXPECT_NEAR(null.loglik, total, 1e-10 * std::abs(total));
}

TEST(PseudoR2, SaturatedFitGivesOne) {
    std::mt19937_64 rng(5);
    auto inst = support::random_instance(rng, {10, 3, 1, 1, 0.0, 0.5});
    Matrix y = inst.counts.counts();
    Matrix latent = y.array().max(1e-300).log();
    double null_ll = plnpca::fit_null_model(inst.counts, inst.design).loglik;
    auto r2 = plnpca::pseudo_r2(latent, inst.counts, null_ll);
    ASSERT_TRUE(r2.r2.has_value());
    EXPECT_NEAR(*r2.r2, 1.0, 1e-12);
}

TEST(PseudoR2, SaturatedLikelihoodConvention) {
    Matrix y(1, 3);
    y << 0, 1, 4;
    CountTable counts(y, [] {
        plnpca::CountTableOptions o;
        o.allow_zero_columns = true;
        return o;
    }());
    double expected = (1 * 0.0 - 1 - 0.0) + (4 * std::log(4.0) - 4 - std::lgamma(5.0));
    EXPECT_NEAR(plnpca::poisson_saturated_loglik(counts), expected, 1e-13);
}

TEST(PseudoR2, NullFitGivesZero) {
    std::mt19937_64 rng(6);
    auto inst = support::random_instance(rng, {15, 3, 1, 2, 0.0, 0.5});
    auto null = plnpca::fit_null_model(inst.counts, inst.design);
    Matrix latent = inst.design.offsets() + inst.design.covariates() * null.theta.transpose();
    auto r2 = plnpca::pseudo_r2(latent, inst.counts, inst.design);
    ASSERT_TRUE(r2.r2.has_value());
    EXPECT_NEAR(*r2.r2, 0.0, 1e-12);
}

TEST(PseudoR2, DegenerateDenominatorIsUnavailable) {
    CountTable counts(Matrix::Constant(1, 1, 2.0));
    Design design = Design::intercept(1, 1);
    auto r2 = plnpca::pseudo_r2(Matrix::Constant(1, 1, std::log(2.0)), counts, design);
    EXPECT_FALSE(r2.r2.has_value());
}

TEST(PseudoR2, FittedValuesInUnitInterval) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        plnpca::SimSpec spec;
        spec.n = 100;
        spec.p = 6;
        spec.d = 2;
        spec.seed = seed;
        auto sim = plnpca::sample(spec);
        auto fit = plnpca::fit_rank(sim.counts, sim.design, plnpca::Family::poisson(), 2);
        ASSERT_TRUE(fit.criteria.r2.has_value());
        EXPECT_GE(*fit.criteria.r2, 0.0);
        EXPECT_LE(*fit.criteria.r2, 1.0);

        // Rotating (M, B) leaves the latent positions, hence R^2, unchanged.
        Matrix R(2, 2);
        R << 0, 1, -1, 0;
        plnpca::ModelParams rotated{fit.params.theta, fit.params.B * R};
        plnpca::VariationalState vrot{fit.vstate.M * R, fit.vstate.S};
        auto [latent, structure] = plnpca::latent_positions(rotated, vrot, sim.design);
        auto r2 = plnpca::pseudo_r2(latent, sim.counts, fit.criteria.loglik_null);
        EXPECT_NEAR(*r2.r2, *fit.criteria.r2, 1e-12);
    }
}

namespace {

plnpca::FitResult scored(int rank, double icl, double bic, plnpca::FitStatus status = plnpca::FitStatus::converged) {
    plnpca::FitResult f;
    f.rank = rank;
    f.criteria.icl = icl;
    f.criteria.bic = bic;
    f.status = status;
    return f;
}

} // namespace

TEST(SelectRank, Examples) {
    std::vector<plnpca::FitResult> one{scored(3, -10, -5)};
    EXPECT_EQ(plnpca::select_rank(one, plnpca::Criterion::icl), 3);

    std::vector<plnpca::FitResult> tie{scored(1, -30, -1), scored(2, -20, -2), scored(3, -20, -3)};
    EXPECT_EQ(plnpca::select_rank(tie, plnpca::Criterion::icl), 2);
    EXPECT_EQ(plnpca::select_rank(tie, plnpca::Criterion::bic), 1);

    std::vector<plnpca::FitResult> failed{scored(1, -30, -30), scored(2, 0, 0, plnpca::FitStatus::failed)};
    EXPECT_EQ(plnpca::select_rank(failed, plnpca::Criterion::icl), 1);

    std::vector<plnpca::FitResult> flagged{scored(1, -30, -30), scored(2, -3, -3, plnpca::FitStatus::max_iterations)};
    EXPECT_EQ(plnpca::select_rank(flagged, plnpca::Criterion::icl), 2);
}

TEST(SelectRank, UnimodalCriteria) {
    std::vector<plnpca::FitResult> fits;
    std::vector<double> icl{-500, -420, -430, -460, -480};
    for (int q = 1; q <= 5; ++q) {
        fits.push_back(scored(q, icl[q - 1], icl[q - 1]));
    }
    EXPECT_EQ(plnpca::select_rank(fits, plnpca::Criterion::icl), 2);
}
