#ifndef PLNPCA_VIZ_HPP
#define PLNPCA_VIZ_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"

/**
 * @file viz.hpp
 * @brief Orthogonalized scores and loadings of the latent structure, and plot-ready exports.
 */

namespace plnpca {

/**
 * Principal axes of the column-centered latent structure `P = M B^T`.
 *
 * `scores * loadings^T + 1 * column_center^T` reproduces `P`; the loadings
 * are orthonormal and the score columns have nonincreasing variance.
 */
struct FactorMap {
    /// n x r, centered, columns in decreasing variance order.
    Matrix scores;
    /// p x r with orthonormal columns.
    Matrix loadings;
    /// Mean of the uncentered scores `M B^T loadings`, length r.
    Vector score_center;
    /// Column means of `P`, length p.
    Vector column_center;
    /// Score variances with denominator n.
    Vector variances;
    /// Variance fractions; sum to 1 when r > 0.
    Vector fractions;
    /// `fractions * R^2`, empty when no pseudo-R^2 is available.
    Vector contributions;
    /// Pearson correlations between the columns of `P` and the scores, p x r.
    Matrix correlations;
    /// Columns of `P` with zero variance; their correlations are reported as 0.
    std::vector<Eigen::Index> constant_columns;

    Eigen::Index axes() const { return scores.cols(); }

    /// Scores before centering, `M B^T loadings`.
    Matrix uncentered_scores() const { return scores.rowwise() + score_center.transpose(); }
};

/**
 * Pearson correlations between the columns of `P` (n x p) and of `scores` (n x r).
 * Zero-variance columns of `P` get correlation 0 and are listed in `constant_columns`.
 */
inline Matrix correlation_circle(const Matrix& P, const Matrix& scores,
                                 std::vector<Eigen::Index>* constant_columns = nullptr) {
    internal::require_shape(P.rows() == scores.rows(), "structure rows and score rows");
    const auto n = static_cast<double>(P.rows());
    Matrix pc = P.rowwise() - P.colwise().mean();
    Matrix sc = scores.rowwise() - scores.colwise().mean();
    Vector p_norm = pc.colwise().norm().transpose();
    Vector s_norm = sc.colwise().norm().transpose();
    Matrix out = pc.transpose() * sc;
    for (Eigen::Index j = 0; j < out.rows(); ++j) {
        bool constant = !(p_norm(j) > 1e-14 * std::sqrt(n) * std::max(1.0, P.col(j).cwiseAbs().maxCoeff()));
        if (constant && constant_columns) {
            constant_columns->push_back(j);
        }
        for (Eigen::Index k = 0; k < out.cols(); ++k) {
            out(j, k) = (constant || s_norm(k) == 0) ? 0.0 : std::clamp(out(j, k) / (p_norm(j) * s_norm(k)), -1.0, 1.0);
        }
    }
    return out;
}

/**
 * PCA of the centered structure `M B^T`, computed from thin QR factors of the
 * centered `M` and of `B` and the SVD of the small q x q product, so the
 * n x p matrix is never formed.
 *
 * Each loading column is signed so that its largest-magnitude entry is
 * positive. If the centered structure is zero the map has no axes.
 */
inline FactorMap orthogonalize(const Matrix& M, const Matrix& B, std::optional<double> r2 = {}) {
    internal::require_shape(M.cols() == B.cols(), "M and B ranks");
    const auto n = M.rows();
    const auto p = B.rows();
    const auto q = M.cols();
    if (q < 1) {
        throw DomainError("orthogonalization needs q >= 1");
    }
    internal::require_shape(q <= n && q <= p, "rank at most min(n, p)");

    Vector mean = M.colwise().mean().transpose();
    Matrix centered = M.rowwise() - mean.transpose();

    Eigen::HouseholderQR<Matrix> qr_m(centered);
    Eigen::HouseholderQR<Matrix> qr_b(B);
    Matrix qm = qr_m.householderQ() * Matrix::Identity(n, q);
    Matrix qb = qr_b.householderQ() * Matrix::Identity(p, q);
    Matrix rm = qr_m.matrixQR().topRows(q).triangularView<Eigen::Upper>();
    Matrix rb = qr_b.matrixQR().topRows(q).triangularView<Eigen::Upper>();

    Eigen::JacobiSVD<Matrix> svd(rm * rb.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vector singular = svd.singularValues();

    FactorMap out;
    double total = singular.squaredNorm();
    double scale = std::max(centered.norm() * B.norm(), 1e-300);
    if (!(total > 0) || singular(0) <= 1e-14 * scale) {
        out.scores = Matrix(n, 0);
        out.loadings = Matrix(p, 0);
        out.score_center = Vector(0);
        out.column_center = B * mean;
        out.variances = Vector(0);
        out.fractions = Vector(0);
        out.contributions = Vector(0);
        out.correlations = Matrix(p, 0);
        return out;
    }

    out.loadings = qb * svd.matrixV();
    out.scores = qm * svd.matrixU() * singular.asDiagonal();
    for (Eigen::Index k = 0; k < q; ++k) {
        Eigen::Index top = 0;
        out.loadings.col(k).cwiseAbs().maxCoeff(&top);
        if (out.loadings(top, k) < 0) {
            out.loadings.col(k) *= -1;
            out.scores.col(k) *= -1;
        }
    }
    out.score_center = out.loadings.transpose() * (B * mean);
    out.column_center = B * mean;
    out.variances = singular.array().square().matrix() / static_cast<double>(n);
    out.fractions = singular.array().square().matrix() / total;
    if (r2) {
        out.contributions = out.fractions * *r2;
    }
    Matrix P = centered * B.transpose();
    out.correlations = correlation_circle(P, out.scores, &out.constant_columns);
    return out;
}

inline FactorMap orthogonalize(const LowRankMatrix& structure, std::optional<double> r2 = {}) {
    return orthogonalize(structure.scores, structure.loadings, r2);
}

/**
 * The covariance estimator evaluated in the rotated coordinates of `map`.
 *
 * With `T = B^T loadings`, the uncentered scores are `M T` and the variational
 * covariances become `T^T diag(colsum(S o S)) T`; the result equals
 * `sigma_hat(params, vstate)` whenever the loadings span the columns of B.
 * Using the centered scores instead drops the mean term `B mean(M) mean(M)^T B^T`.
 */
inline Matrix rotated_sigma(const FactorMap& map, const Matrix& B, const Matrix& S) {
    internal::require_shape(B.cols() == S.cols(), "B and S ranks");
    const double n = static_cast<double>(S.rows());
    Matrix T = B.transpose() * map.loadings;
    Matrix scores = map.uncentered_scores();
    Vector s2 = S.array().square().colwise().sum().transpose();
    Matrix inner = (scores.transpose() * scores + T.transpose() * s2.asDiagonal() * T) / n;
    Matrix sigma = map.loadings * inner * map.loadings.transpose();
    return 0.5 * (sigma + sigma.transpose());
}

namespace internal {

inline std::vector<std::string> axis_names(Eigen::Index r) {
    std::vector<std::string> out;
    for (Eigen::Index k = 0; k < r; ++k) {
        out.push_back("Axis" + std::to_string(k + 1));
    }
    return out;
}

inline std::vector<std::string> default_names(const std::vector<std::string>& given, Eigen::Index count,
                                              const std::string& prefix) {
    if (given.size() == static_cast<std::size_t>(count)) {
        return given;
    }
    std::vector<std::string> out;
    for (Eigen::Index k = 0; k < count; ++k) {
        out.push_back(prefix + std::to_string(k + 1));
    }
    return out;
}

inline std::string percent_label(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100 * fraction);
    return buf;
}

} // namespace internal

/**
 * One row of `criteria.csv`.
 */
struct CriteriaRow {
    int rank = 0;
    Criteria criteria;
    FitStatus status = FitStatus::failed;
    int iterations = 0;
    bool chosen_icl = false;
    bool chosen_bic = false;
};

inline void write_criteria(const std::filesystem::path& path, const std::vector<CriteriaRow>& rows) {
    std::vector<std::string> header = {"rank",          "elbo",        "bic",           "icl",
                                       "entropy",       "r2",          "loglik_model",  "loglik_null",
                                       "loglik_saturated", "status",   "iterations",    "chosen_icl",
                                       "chosen_bic"};
    std::vector<std::vector<std::string>> body;
    for (const auto& row : rows) {
        const Criteria& c = row.criteria;
        body.push_back({std::to_string(row.rank), format_number(c.elbo), format_number(c.bic),
                        format_number(c.icl), format_number(c.entropy), c.r2 ? format_number(*c.r2) : "NA",
                        format_number(c.loglik_model), format_number(c.loglik_null),
                        format_number(c.loglik_saturated), to_string(row.status), std::to_string(row.iterations),
                        row.chosen_icl ? "1" : "0", row.chosen_bic ? "1" : "0"});
    }
    write_csv(path, header, body);
}

/**
 * Write scores.csv, loadings.csv, criteria.csv, sigma_hat.csv,
 * correlations.csv and factor_maps.py into `out_dir`.
 *
 * `criteria` defaults to a single row for `fit`. Returns the file names written.
 */
inline std::vector<std::string> export_fit(const FitResult& fit, const FactorMap& map,
                                           const std::vector<std::string>& sample_names,
                                           const std::vector<std::string>& variable_names,
                                           const std::filesystem::path& out_dir,
                                           std::optional<std::vector<CriteriaRow>> criteria = {}) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    }
    const auto n = map.scores.rows();
    const auto p = map.loadings.rows();
    auto samples = internal::default_names(sample_names, n, "S");
    auto variables = internal::default_names(variable_names, p, "V");
    auto axes = internal::axis_names(map.axes());

    write_matrix_csv(out_dir / "scores.csv", map.scores, "sample", samples, axes);
    write_matrix_csv(out_dir / "loadings.csv", map.loadings, "variable", variables, axes);
    write_matrix_csv(out_dir / "correlations.csv", map.correlations, "variable", variables, axes);
    write_matrix_csv(out_dir / "sigma_hat.csv", fit.sigma, "variable", variables, variables);
    if (!criteria) {
        criteria = std::vector<CriteriaRow>{{fit.rank, fit.criteria, fit.status, fit.iterations, false, false}};
    }
    write_criteria(out_dir / "criteria.csv", *criteria);

    std::string labels;
    for (Eigen::Index k = 0; k < map.axes(); ++k) {
        double share = map.contributions.size() == map.axes() ? map.contributions(k) : map.fractions(k);
        labels += "    \"Axis " + std::to_string(k + 1) + " (" + internal::percent_label(share) + "%)\",\n";
    }
    std::string script =
        "import csv\n"
        "import os\n"
        "\n"
        "import matplotlib\n"
        "\n"
        "matplotlib.use(\"Agg\")\n"
        "import matplotlib.pyplot as plt\n"
        "\n"
        "HERE = os.path.dirname(os.path.abspath(__file__))\n"
        "# Percentages are axis variance fractions times the pseudo-R^2 when it is available.\n"
        "LABELS = [\n" +
        labels +
        "]\n"
        "\n"
        "\n"
        "def read(name):\n"
        "    with open(os.path.join(HERE, name), newline=\"\") as handle:\n"
        "        rows = list(csv.reader(handle))\n"
        "    return [r[0] for r in rows[1:]], [[float(v) for v in r[1:]] for r in rows[1:]]\n"
        "\n"
        "\n"
        "def main():\n"
        "    if len(LABELS) < 2:\n"
        "        print(\"fewer than two axes; nothing to draw\")\n"
        "        return\n"
        "    _, scores = read(\"scores.csv\")\n"
        "    names, corr = read(\"correlations.csv\")\n"
        "\n"
        "    fig, ax = plt.subplots(figsize=(6, 6))\n"
        "    ax.scatter([s[0] for s in scores], [s[1] for s in scores], s=8)\n"
        "    ax.axhline(0, color=\"grey\", lw=0.5)\n"
        "    ax.axvline(0, color=\"grey\", lw=0.5)\n"
        "    ax.set_xlabel(LABELS[0])\n"
        "    ax.set_ylabel(LABELS[1])\n"
        "    ax.set_title(\"Individual factor map\")\n"
        "    fig.savefig(os.path.join(HERE, \"individual_factor_map.png\"), dpi=150)\n"
        "\n"
        "    fig, ax = plt.subplots(figsize=(6, 6))\n"
        "    ax.add_patch(plt.Circle((0, 0), 1, fill=False, color=\"grey\"))\n"
        "    for name, c in zip(names, corr):\n"
        "        ax.arrow(0, 0, c[0], c[1], head_width=0.02, length_includes_head=True)\n"
        "        ax.annotate(name, (c[0], c[1]), fontsize=7)\n"
        "    ax.set_xlim(-1.1, 1.1)\n"
        "    ax.set_ylim(-1.1, 1.1)\n"
        "    ax.set_aspect(\"equal\")\n"
        "    ax.set_xlabel(LABELS[0])\n"
        "    ax.set_ylabel(LABELS[1])\n"
        "    ax.set_title(\"Variable factor map\")\n"
        "    fig.savefig(os.path.join(HERE, \"variable_factor_map.png\"), dpi=150)\n"
        "\n"
        "\n"
        "if __name__ == \"__main__\":\n"
        "    main()\n";
    write_text(out_dir / "factor_maps.py", script);

    return {"scores.csv", "loadings.csv", "correlations.csv", "sigma_hat.csv", "criteria.csv", "factor_maps.py"};
}

} // namespace plnpca

#endif
