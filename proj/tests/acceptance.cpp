// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "plnpca/optim.hpp"
#include "plnpca/selection.hpp"
#include "plnpca/simulate.hpp"
#include "plnpca/viz.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using plnpca::CountTable;
using plnpca::Design;
using plnpca::Family;
using plnpca::Matrix;
using plnpca::Vector;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome()> run;
};

std::string fmt(const char* pattern, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
    return buf;
}

// 1. Analytic gradients of all four blocks against finite differences.
Outcome gradients() {
    std::mt19937_64 rng(101);
    const Family generic = Family::generic(Family::poisson_kernel(), 60);
    const double missing[] = {0.0, 0.1, 0.5};
    double worst = 0;
    int bad = 0;
    for (int rep = 0; rep < 50; ++rep) {
        support::InstanceShape shape;
        shape.n = std::uniform_int_distribution<int>(3, 8)(rng);
        shape.p = std::uniform_int_distribution<int>(1, 6)(rng);
        shape.q = std::uniform_int_distribution<int>(1, std::min(3, shape.p))(rng);
        shape.d = std::uniform_int_distribution<int>(1, 3)(rng);
        shape.missing = missing[rep % 3];
        auto inst = support::random_instance(rng, shape);
        auto errors = support::gradient_check(rep % 2 == 0 ? Family::poisson() : generic, inst);
        worst = std::max(worst, errors.max());
        bad += errors.max() >= 1e-6;
    }
    return {bad == 0, fmt("50 instances, max relative error %.2e, %g above 1e-6", worst, bad)};
}

// 2. The bound never exceeds the marginal log-likelihood.
Outcome lower_bound() {
    std::mt19937_64 rng(202);
    double worst = -1e300;
    int checked = 0;
    for (int rep = 0; rep < 20; ++rep) {
        support::InstanceShape shape;
        shape.n = 6;
        shape.p = 1 + rep % 2;
        shape.q = 1 + (rep / 2) % shape.p;
        shape.d = 1 + rep % 2;
        shape.missing = rep % 4 == 3 ? 0.2 : 0.0;
        auto inst = support::random_instance(rng, shape);
        plnpca::ElboProblem problem(inst.counts, inst.design, Family::poisson());
        for (int k = 0; k < 200; ++k) {
            plnpca::ModelParams params{support::normal_matrix(rng, shape.p, shape.d, 0.8),
                                       support::normal_matrix(rng, shape.p, shape.q, 0.8)};
            plnpca::VariationalState vstate{support::normal_matrix(rng, shape.n, shape.q, 1.0),
                                            support::uniform_matrix(rng, shape.n, shape.q, 0.01, 2.0)};
            double j = problem.value(params, vstate);
            double oracle = plnpca::marginal_loglik_oracle(inst.counts, inst.design, params.theta,
                                                           params.B * params.B.transpose());
            worst = std::max(worst, j - oracle);
            ++checked;
        }
        auto fit = plnpca::fit_rank(inst.counts, inst.design, Family::poisson(), shape.q);
        double oracle = plnpca::marginal_loglik_oracle(inst.counts, inst.design, fit.params.theta, fit.sigma);
        worst = std::max(worst, fit.elbo - oracle);
        ++checked;
    }
    return {worst <= 1e-8, fmt("%g points, max J - log p(Y) = %.3e", checked, worst)};
}

// 3. Midpoint concavity of each block.
Outcome biconcavity() {
    std::mt19937_64 rng(303);
    const Family generic = Family::generic(Family::poisson_kernel(), 60);
    double worst_model = 1e300, worst_variational = 1e300;
    for (int rep = 0; rep < 200; ++rep) {
        support::InstanceShape shape;
        shape.missing = rep % 3 == 0 ? 0.2 : 0.0;
        auto inst = support::random_instance(rng, shape);
        plnpca::ElboProblem problem(inst.counts, inst.design, rep % 2 == 0 ? Family::poisson() : generic);
        const double spread = rep % 4 < 2 ? 0.5 : 0.02;
        worst_model = std::min(worst_model, support::midpoint_slack(problem, inst, rng, true, spread));
        worst_variational = std::min(worst_variational, support::midpoint_slack(problem, inst, rng, false, spread));
    }
    bool pass = worst_model >= -1e-10 && worst_variational >= -1e-10;
    return {pass, fmt("200 checks per block, min slack (Theta,B) %.3e, (M,S) %.3e", worst_model, worst_variational)};
}

// 4. Accepted iterates never lose more than 1e-8 |J|.
Outcome monotone() {
    double worst = 0;
    int bad = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        plnpca::SimSpec spec;
        spec.n = 100;
        spec.p = 10;
        spec.d = 2;
        spec.missing_fraction = seed % 2 == 0 ? 0.1 : 0.0;
        spec.seed = seed;
        auto sim = plnpca::sample(spec);
        plnpca::OptimConfig config;
        config.algorithm = seed <= 8 ? plnpca::Algorithm::mma : plnpca::Algorithm::projected_gradient;
        auto fit = plnpca::fit_rank(sim.counts, sim.design, Family::poisson(), 2, config);
        const auto& t = fit.trajectory;
        for (std::size_t k = 1; k < t.size(); ++k) {
            double drop = (t[k - 1] - t[k]) / std::abs(t[k - 1]);
            worst = std::max(worst, drop);
            bad += drop > 1e-8;
        }
    }
    return {bad == 0, fmt("10 fits, largest relative decrease %.3e, %g violations", worst, bad)};
}

plnpca::SimSpec recovery_spec(std::uint64_t seed) {
    plnpca::SimSpec spec;
    spec.n = 500;
    spec.p = 10;
    spec.q = 2;
    spec.d = 2;
    spec.seed = seed;
    return spec;
}

// 5. Recovery of Sigma and Theta on simulated data.
Outcome recovery() {
    int good = 0;
    double worst_sigma = 0, worst_theta = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto sim = plnpca::sample(recovery_spec(seed));
        auto fit = plnpca::fit_rank(sim.counts, sim.design, Family::poisson(), 2);
        double sigma_error = (fit.sigma - sim.sigma).norm() / sim.sigma.norm();
        double theta_error = (fit.params.theta - sim.theta).cwiseAbs().maxCoeff();
        worst_sigma = std::max(worst_sigma, sigma_error);
        worst_theta = std::max(worst_theta, theta_error);
        good += sigma_error < 0.25 && theta_error < 0.15;
    }
    return {good >= 18, fmt("%g/20 seeds within tolerance (worst Sigma %.3f, worst Theta %.3f)", good, worst_sigma,
                            worst_theta)};
}

// 6. ICL picks the true rank.
Outcome rank_selection() {
    int good = 0;
    std::ostringstream chosen;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto sim = plnpca::sample(recovery_spec(seed));
        auto scan = plnpca::fit_rank_scan(sim.counts, sim.design, Family::poisson(), {1, 2, 3, 4, 5});
        good += scan.best_icl == 2;
        chosen << scan.best_icl;
    }
    return {good >= 18, fmt("%g/20 seeds choose rank 2", good) + " (choices " + chosen.str() + ")"};
}

// 7. Unit-variance Gaussian family against fixed-noise probabilistic PCA.
Outcome gaussian() {
    std::mt19937_64 rng(707);
    const int n = 2000, p = 6, q = 2;
    Matrix loadings = support::normal_matrix(rng, p, q, 1.0);
    Vector mu = support::normal_matrix(rng, p, 1, 1.0).col(0);
    Matrix y = (support::normal_matrix(rng, n, q, 1.0) * loadings.transpose() + support::normal_matrix(rng, n, p, 1.0))
                   .rowwise() +
               mu.transpose();
    plnpca::CountTableOptions options;
    options.integer_counts = false;
    CountTable counts(y, options);
    auto fit = plnpca::fit_rank(counts, Design::intercept(n, p), Family::gaussian_unit_variance(), q);

    // Maximum likelihood with noise variance fixed at 1: top-q eigenpairs of the sample covariance, shrunk by 1.
    Matrix centered = y.rowwise() - y.colwise().mean();
    Matrix cov = centered.transpose() * centered / n;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    Matrix u = eig.eigenvectors().rightCols(q);
    Vector l = (eig.eigenvalues().tail(q).array() - 1.0).cwiseMax(0.0);
    Matrix oracle = u * l.asDiagonal() * u.transpose();
    double error = (fit.sigma - oracle).norm();
    return {error < 0.1, fmt("Frobenius error %.4f after %g iterations", error, fit.iterations)};
}

// 8. Masked gradients against gradients on data completed with A'.
Outcome missing_data() {
    std::mt19937_64 rng(808);
    plnpca::Kernel kernel = Family::poisson_kernel();
    kernel.check_observation = nullptr;
    const Family family = Family::generic(kernel, 60);
    double theta = 0, b = 0, m = 0, s = 0;
    for (int rep = 0; rep < 20; ++rep) {
        support::InstanceShape shape;
        shape.missing = 0.3;
        auto inst = support::random_instance(rng, shape);
        plnpca::ElboProblem masked(inst.counts, inst.design, family);
        plnpca::ElboWorkspace ws;
        plnpca::Gradients g_masked;
        masked.value_and_gradients(inst.params, inst.vstate, ws, g_masked);

        plnpca::CountTableOptions options;
        options.integer_counts = false;
        CountTable completed(plnpca::impute(inst.counts, ws), options);
        plnpca::ElboProblem full(completed, inst.design, family);
        plnpca::ElboWorkspace ws_full;
        plnpca::Gradients g_full;
        full.value_and_gradients(inst.params, inst.vstate, ws_full, g_full);

        theta = std::max(theta, (g_masked.theta - g_full.theta).cwiseAbs().maxCoeff());
        b = std::max(b, (g_masked.B - g_full.B).cwiseAbs().maxCoeff());
        m = std::max(m, (g_masked.M - g_full.M).cwiseAbs().maxCoeff());
        s = std::max(s, (g_masked.S - g_full.S).cwiseAbs().maxCoeff());
    }
    bool pass = std::max({theta, b, m, s}) <= 1e-12;
    return {pass, fmt("max abs difference Theta %.2e, B %.2e, M %.2e, S %.2e", theta, b, m, s)};
}

// 9. Structural invariants of fits, factor maps and criteria.
Outcome invariants() {
    std::vector<std::string> failures;
    auto require = [&](bool ok, const std::string& what) {
        if (!ok) {
            failures.push_back(what);
        }
    };
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        plnpca::SimSpec spec;
        spec.n = 120;
        spec.p = 8;
        spec.q = 3;
        spec.d = 2;
        spec.missing_fraction = seed % 2 == 0 ? 0.1 : 0.0;
        spec.seed = seed;
        auto sim = plnpca::sample(spec);
        const int q = 1 + static_cast<int>(seed % 3);
        auto fit = plnpca::fit_rank(sim.counts, sim.design, Family::poisson(), q);

        Eigen::SelfAdjointEigenSolver<Matrix> eig(fit.sigma);
        const double top = eig.eigenvalues().maxCoeff();
        require(eig.eigenvalues().minCoeff() >= -1e-10 * top, "Sigma PSD");
        require((eig.eigenvalues().array() > 1e-10 * top).count() <= q, "Sigma rank <= q");

        auto map = plnpca::orthogonalize(fit.structure, fit.criteria.r2);
        const auto r = map.axes();
        Matrix gram = map.loadings.transpose() * map.loadings;
        require((gram - Matrix::Identity(r, r)).cwiseAbs().maxCoeff() < 1e-10, "loadings orthonormal");
        Matrix P = fit.structure.scores * fit.structure.loadings.transpose();
        Matrix rebuilt = (map.scores * map.loadings.transpose()).rowwise() + map.column_center.transpose();
        require((rebuilt - P).norm() <= 1e-10 * P.norm(), "map reconstructs M B^T");
        for (Eigen::Index k = 0; k + 1 < r; ++k) {
            require(map.variances(k) >= map.variances(k + 1), "variances ordered");
        }
        require((plnpca::rotated_sigma(map, fit.params.B, fit.vstate.S) - fit.sigma).norm() <=
                    1e-10 * fit.sigma.norm(),
                "rotated Sigma");

        require(fit.criteria.r2 && *fit.criteria.r2 >= 0 && *fit.criteria.r2 <= 1, "R^2 in [0, 1]");
        auto info = plnpca::bic_icl(fit.elbo, fit.vstate.S, sim.counts.n(), sim.counts.p(), sim.design.d(), q);
        require(info.bic - info.icl == info.entropy, "BIC - ICL equals the entropy");
        require(fit.criteria.bic - fit.criteria.icl == fit.criteria.entropy, "reported BIC - ICL equals the entropy");

        auto null = plnpca::fit_null_model(sim.counts, sim.design);
        Matrix null_latent = sim.design.offsets() + sim.design.covariates() * null.theta.transpose();
        auto r2_null = plnpca::pseudo_r2(null_latent, sim.counts, null.loglik);
        require(r2_null.r2 && std::abs(*r2_null.r2) <= 1e-12, "R^2 = 0 at the null fit");
        Matrix saturated = sim.counts.counts().array().max(1e-300).log();
        auto r2_sat = plnpca::pseudo_r2(saturated, sim.counts, null.loglik);
        require(r2_sat.r2 && std::abs(*r2_sat.r2 - 1) <= 1e-12, "R^2 = 1 at the saturated fit");
    }
    std::set<std::string> unique(failures.begin(), failures.end());
    std::string detail = "5 fits checked";
    for (const auto& f : unique) {
        detail += "; failed: " + f;
    }
    return {failures.empty(), detail};
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

int plnfit(const std::string& args) {
    std::string command = std::string("\"") + PLNFIT_EXECUTABLE + "\" " + args + " 2>/dev/null";
    int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 10. Two identical CLI runs write identical files.
Outcome determinism() {
    fs::path dir = fs::temp_directory_path() / "plnpca_acceptance_determinism";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string q = "\"";
    if (plnfit("simulate --n 80 --p 8 --rank 2 --missing 0.1 --seed 11 --out " + q + (dir / "sim").string() + q) != 0) {
        return {false, "simulate failed"};
    }
    std::string counts = q + (dir / "sim" / "counts.csv").string() + q;
    std::string args_fit = "fit --counts " + counts + " --offset-mode log-row-totals --rank 2 --seed 5 --threads 2";
    std::string args_scan = "scan --counts " + counts + " --ranks 1:4 --seed 5 --threads 2";
    int status = plnfit(args_fit + " --out " + q + (dir / "fit_a").string() + q) +
                 plnfit(args_fit + " --out " + q + (dir / "fit_b").string() + q) +
                 plnfit(args_scan + " --out " + q + (dir / "scan_a").string() + q) +
                 plnfit(args_scan + " --out " + q + (dir / "scan_b").string() + q);
    if (status != 0) {
        return {false, "plnfit returned a nonzero status"};
    }
    int files = 0, differing = 0;
    for (const auto& [a, b] : {std::pair{"fit_a", "fit_b"}, std::pair{"scan_a", "scan_b"}}) {
        for (const auto& entry : fs::directory_iterator(dir / a)) {
            if (entry.path().filename() == "timings.json") {
                continue;
            }
            ++files;
            fs::path other = dir / b / entry.path().filename();
            differing += !fs::exists(other) || slurp(entry.path()) != slurp(other);
        }
    }
    return {files > 0 && differing == 0, fmt("%g artifacts compared, %g differ", files, differing)};
}

// 11. Wall time against p, log-log least-squares slope.
Outcome scaling() {
    const std::vector<int> ps = {100, 200, 400};
    std::vector<double> seconds;
    for (int p : ps) {
        double total = 0;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            plnpca::SimSpec spec;
            spec.n = 100;
            spec.p = p;
            spec.q = 5;
            spec.seed = seed;
            auto sim = plnpca::sample(spec);
            auto start = std::chrono::steady_clock::now();
            plnpca::fit_rank(sim.counts, sim.design, Family::poisson(), 5);
            total += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        }
        seconds.push_back(total);
    }
    double mx = 0, my = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
        mx += std::log(ps[k]) / ps.size();
        my += std::log(seconds[k]) / ps.size();
    }
    double sxy = 0, sxx = 0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
        sxy += (std::log(ps[k]) - mx) * (std::log(seconds[k]) - my);
        sxx += (std::log(ps[k]) - mx) * (std::log(ps[k]) - mx);
    }
    double slope = sxy / sxx;
    return {slope <= 1.2, fmt("slope %.3f (5-seed totals %.2f s, %.2f s, %.2f s)", slope, seconds[0], seconds[1],
                              seconds[2])};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", 30, gradients},
        {2, "lower-bound certification", 60, lower_bound},
        {3, "biconcavity", 10, biconcavity},
        {4, "monotone ascent", 60, monotone},
        {5, "parameter recovery", 300, recovery},
        {6, "rank selection", 600, rank_selection},
        {7, "Gaussian cross-check", 120, gaussian},
        {8, "missing-data equivalence", 10, missing_data},
        {9, "structural invariants", 30, invariants},
        {10, "determinism", 120, determinism},
        {11, "scaling shape", 900, scaling},
    };
    std::set<int> selected;
    for (int k = 1; k < argc; ++k) {
        selected.insert(std::atoi(argv[k]));
    }

    int failed = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.id)) {
            continue;
        }
        auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("threw: ") + e.what()};
        }
        double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool in_time = elapsed < c.budget_seconds;
        bool pass = outcome.pass && in_time;
        failed += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << "  [" << c.id << "] " << c.name << ": " << outcome.detail << " ("
                  << fmt("%.1f s of %g s", elapsed, c.budget_seconds) << (in_time ? "" : ", over budget") << ")"
                  << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
