#ifndef PLNPCA_CLI_HPP
#define PLNPCA_CLI_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "elbo.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"
#include "nef.hpp"
#include "optim.hpp"
#include "selection.hpp"
#include "simulate.hpp"
#include "viz.hpp"

/**
 * @file cli.hpp
 * @brief Data ingestion and the fit, scan, simulate and impute commands behind `plnfit`.
 */

namespace plnpca {

inline constexpr const char* version = "0.1.0";

enum class OffsetMode { none, log_row_totals, per_group_log_totals, file };

inline OffsetMode parse_offset_mode(const std::string& text) {
    if (text == "none") {
        return OffsetMode::none;
    }
    if (text == "log-row-totals") {
        return OffsetMode::log_row_totals;
    }
    if (text == "per-group-log-totals") {
        return OffsetMode::per_group_log_totals;
    }
    if (text == "file") {
        return OffsetMode::file;
    }
    throw DomainError("unknown offset mode '" + text + "' (none, log-row-totals, per-group-log-totals, file)");
}

inline const char* to_string(OffsetMode mode) {
    switch (mode) {
    case OffsetMode::none:
        return "none";
    case OffsetMode::log_row_totals:
        return "log-row-totals";
    case OffsetMode::per_group_log_totals:
        return "per-group-log-totals";
    case OffsetMode::file:
        return "file";
    }
    return "unknown";
}

/**
 * Parse `"3"`, `"1:5"`, `"1-5"` or `"1,2,4"` into a sorted list of distinct ranks.
 */
inline std::vector<int> parse_ranks(const std::string& text) {
    auto to_int = [&](const std::string& piece) {
        double value = 0;
        if (!parse_number(piece, value) || value != std::floor(value) || value < 1 || value > 1e6) {
            throw DomainError("invalid rank '" + piece + "' in '" + text + "'");
        }
        return static_cast<int>(value);
    };
    std::vector<int> out;
    for (auto sep : {':', '-'}) {
        auto pos = text.find(sep);
        if (pos != std::string::npos) {
            int lo = to_int(text.substr(0, pos));
            int hi = to_int(text.substr(pos + 1));
            if (hi < lo) {
                throw DomainError("empty rank range '" + text + "'");
            }
            for (int q = lo; q <= hi; ++q) {
                out.push_back(q);
            }
            return out;
        }
    }
    std::size_t start = 0;
    while (start <= text.size()) {
        auto stop = text.find(',', start);
        if (stop == std::string::npos) {
            stop = text.size();
        }
        out.push_back(to_int(text.substr(start, stop - start)));
        start = stop + 1;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

/**
 * Everything a `plnfit` invocation needs.
 */
struct RunConfig {
    std::string subcommand;
    std::filesystem::path counts;
    std::filesystem::path covariates;
    std::filesystem::path offsets;
    std::filesystem::path groups;
    /// JSON simulation spec for `simulate`; flags are used when empty.
    std::filesystem::path spec;
    std::filesystem::path out = "plnfit_out";
    OffsetMode offset_mode = OffsetMode::none;
    /// Covariate columns to use; all columns when empty.
    std::vector<std::string> covariate_columns;
    std::optional<int> rank;
    std::vector<int> ranks;
    Criterion criterion = Criterion::icl;
    /// Variables whose observed total is below this are dropped after offsets are computed.
    double min_abundance = 0;
    bool allow_zero_columns = false;
    std::string family = "poisson";
    OptimConfig optim;
    SimSpec simulation;

    Family make_family() const {
        if (family == "poisson") {
            return Family::poisson();
        }
        if (family == "gaussian") {
            return Family::gaussian_unit_variance();
        }
        throw DomainError("unknown family '" + family + "' (poisson, gaussian)");
    }

    void validate() const {
        static const std::set<std::string> commands = {"fit", "scan", "simulate", "impute"};
        if (!commands.count(subcommand)) {
            throw DomainError("unknown subcommand '" + subcommand + "'");
        }
        make_family();
        optim.validate();
        if (subcommand == "simulate") {
            if (spec.empty()) {
                simulation.validate();
            } else if (!std::filesystem::exists(spec)) {
                throw IoError("simulation spec " + spec.string() + " does not exist");
            }
            return;
        }
        auto must_exist = [](const std::filesystem::path& path, const char* what) {
            if (!std::filesystem::exists(path)) {
                throw IoError(std::string(what) + " file " + path.string() + " does not exist");
            }
        };
        if (counts.empty()) {
            throw DomainError("--counts is required");
        }
        must_exist(counts, "counts");
        if (!covariates.empty()) {
            must_exist(covariates, "covariates");
        }
        if (offset_mode == OffsetMode::file) {
            if (offsets.empty()) {
                throw DomainError("--offset-mode file needs --offsets");
            }
            must_exist(offsets, "offsets");
        }
        if (offset_mode == OffsetMode::per_group_log_totals) {
            if (groups.empty()) {
                throw DomainError("--offset-mode per-group-log-totals needs --groups");
            }
            must_exist(groups, "groups");
        }
        if (subcommand == "scan") {
            if (ranks.empty()) {
                throw DomainError("scan needs a nonempty --ranks list");
            }
        } else if (!rank) {
            throw DomainError(subcommand + " needs --rank");
        }
        if (!(min_abundance >= 0)) {
            throw DomainError("--min-abundance must be nonnegative");
        }
    }
};

/**
 * Worker count: `PLNFIT_THREADS` if set, else `requested` if positive, else the number of cores.
 */
inline int resolve_threads(int requested) {
    if (const char* env = std::getenv("PLNFIT_THREADS"); env && *env) {
        double value = 0;
        if (!parse_number(env, value) || value < 1 || value != std::floor(value)) {
            throw DomainError(std::string("PLNFIT_THREADS must be a positive integer, got '") + env + "'");
        }
        return static_cast<int>(value);
    }
    if (requested > 0) {
        return requested;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/**
 * Aligned data ready for fitting.
 */
struct IngestResult {
    CountTable counts;
    Design design;
    std::vector<std::string> dropped_variables;
    std::vector<std::string> dropped_samples;
    std::vector<std::string> warnings;
};

namespace internal {

inline std::map<std::string, std::size_t> index_names(const std::vector<std::string>& names, const std::string& what,
                                                      const std::string& source) {
    std::map<std::string, std::size_t> out;
    for (std::size_t k = 0; k < names.size(); ++k) {
        if (!out.emplace(names[k], k).second) {
            throw IoError(source + ": duplicate " + what + " '" + names[k] + "'");
        }
    }
    return out;
}

inline std::vector<std::string> first_column(const TextTable& table) {
    std::vector<std::string> out;
    for (const auto& row : table.rows) {
        out.push_back(row.front());
    }
    return out;
}

/// Covariate block for `samples`: numeric columns as-is, text columns reference-coded.
inline std::pair<Matrix, std::vector<std::string>> covariate_block(const TextTable& table,
                                                                   const std::vector<std::size_t>& rows,
                                                                   const std::vector<std::string>& selected,
                                                                   const std::string& source) {
    std::vector<std::size_t> columns;
    if (selected.empty()) {
        for (std::size_t c = 1; c < table.header.size(); ++c) {
            columns.push_back(c);
        }
    } else {
        auto lookup = index_names(table.header, "column", source);
        for (const auto& name : selected) {
            auto it = lookup.find(name);
            if (it == lookup.end() || it->second == 0) {
                throw IoError(source + ": no covariate column named '" + name + "'");
            }
            columns.push_back(it->second);
        }
    }

    std::vector<Vector> blocks;
    std::vector<std::string> names;
    const auto n = static_cast<Eigen::Index>(rows.size());
    for (std::size_t c : columns) {
        const std::string& name = table.header[c];
        std::vector<std::string> fields;
        bool numeric = true;
        for (std::size_t r : rows) {
            const std::string& field = table.rows[r][c];
            if (field.empty() || field == "NA") {
                throw IoError(source + ": missing value of covariate '" + name + "' for sample '" +
                              table.rows[r][0] + "'");
            }
            double value = 0;
            numeric = numeric && parse_number(field, value);
            fields.push_back(field);
        }
        if (numeric) {
            Vector column(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                parse_number(fields[static_cast<std::size_t>(i)], column(i));
            }
            blocks.push_back(std::move(column));
            names.push_back(name);
            continue;
        }
        std::set<std::string> levels(fields.begin(), fields.end());
        auto level = levels.begin();
        for (++level; level != levels.end(); ++level) {
            Vector indicator(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                indicator(i) = fields[static_cast<std::size_t>(i)] == *level ? 1.0 : 0.0;
            }
            blocks.push_back(std::move(indicator));
            names.push_back(name + "=" + *level);
        }
    }
    Matrix out(n, static_cast<Eigen::Index>(blocks.size()));
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        out.col(static_cast<Eigen::Index>(k)) = blocks[k];
    }
    return {std::move(out), std::move(names)};
}

inline double checked_log_total(double total, const std::string& sample, const std::string& what) {
    if (!(total > 0)) {
        throw DomainError("sample '" + sample + "' has zero " + what + "; its log offset is undefined");
    }
    return std::log(total);
}

} // namespace internal

/**
 * Read, align and filter the inputs named in `config`.
 *
 * Samples are the counts rows that also appear in the covariates file, in
 * counts order. Offsets are computed on the full table before columns are
 * dropped by `min_abundance`, and are not recomputed afterwards.
 */
inline IngestResult ingest(const RunConfig& config) {
    const std::string counts_source = config.counts.string();
    TextTable table = read_table(config.counts);
    if (table.header.size() < 2) {
        throw IoError(counts_source + ": needs a sample name column and at least one variable column");
    }
    std::vector<std::string> variables(table.header.begin() + 1, table.header.end());
    std::vector<std::string> all_samples = internal::first_column(table);
    internal::index_names(variables, "variable name", counts_source);
    internal::index_names(all_samples, "sample name", counts_source);
    Matrix raw = table_values(table, counts_source);

    const bool counts_family = config.family == "poisson";
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        for (Eigen::Index j = 0; j < raw.cols(); ++j) {
            double y = raw(i, j);
            if (std::isnan(y)) {
                continue;
            }
            if (counts_family && (y < 0 || y != std::floor(y))) {
                throw IoError(counts_source + ": sample '" + all_samples[static_cast<std::size_t>(i)] +
                              "', variable '" + variables[static_cast<std::size_t>(j)] +
                              "': counts must be nonnegative integers, got " + format_number(y));
            }
        }
    }

    std::vector<std::string> dropped_samples;
    std::vector<std::string> dropped_variables;
    std::vector<std::string> warnings;

    // Sample alignment.
    std::vector<std::size_t> count_rows;
    std::vector<std::size_t> covariate_rows;
    TextTable covariates;
    if (!config.covariates.empty()) {
        covariates = read_table(config.covariates);
        auto lookup = internal::index_names(internal::first_column(covariates), "sample name",
                                            config.covariates.string());
        for (std::size_t i = 0; i < all_samples.size(); ++i) {
            auto it = lookup.find(all_samples[i]);
            if (it == lookup.end()) {
                dropped_samples.push_back(all_samples[i]);
                continue;
            }
            count_rows.push_back(i);
            covariate_rows.push_back(it->second);
        }
        if (count_rows.empty()) {
            throw IoError("no sample names in common between " + counts_source + " and " +
                          config.covariates.string());
        }
        if (!dropped_samples.empty()) {
            warnings.push_back(std::to_string(dropped_samples.size()) +
                                      " samples without covariates were dropped");
        }
    } else {
        for (std::size_t i = 0; i < all_samples.size(); ++i) {
            count_rows.push_back(i);
        }
    }
    const auto n = static_cast<Eigen::Index>(count_rows.size());
    const auto p_all = raw.cols();
    std::vector<std::string> samples;
    Matrix values(n, p_all);
    for (Eigen::Index i = 0; i < n; ++i) {
        samples.push_back(all_samples[count_rows[static_cast<std::size_t>(i)]]);
        values.row(i) = raw.row(static_cast<Eigen::Index>(count_rows[static_cast<std::size_t>(i)]));
    }
    Matrix mask = values.unaryExpr([](double v) { return std::isnan(v) ? 0.0 : 1.0; });
    values = values.unaryExpr([](double v) { return std::isnan(v) ? 0.0 : v; });

    // Offsets on the full table.
    Matrix offsets = Matrix::Zero(n, p_all);
    switch (config.offset_mode) {
    case OffsetMode::none:
        break;
    case OffsetMode::log_row_totals:
        for (Eigen::Index i = 0; i < n; ++i) {
            offsets.row(i).setConstant(
                internal::checked_log_total(values.row(i).sum(), samples[static_cast<std::size_t>(i)], "total count"));
        }
        break;
    case OffsetMode::per_group_log_totals: {
        const std::string source = config.groups.string();
        TextTable groups = read_table(config.groups);
        if (groups.header.size() < 2) {
            throw IoError(source + ": needs a variable column and a group column");
        }
        auto variable_index = internal::index_names(variables, "variable name", counts_source);
        std::vector<std::string> group_of(static_cast<std::size_t>(p_all));
        std::set<std::string> seen;
        for (const auto& row : groups.rows) {
            auto it = variable_index.find(row[0]);
            if (it == variable_index.end()) {
                throw IoError(source + ": variable '" + row[0] + "' is not a column of " + counts_source);
            }
            if (!seen.insert(row[0]).second) {
                throw IoError(source + ": variable '" + row[0] + "' is listed twice");
            }
            if (row[1].empty()) {
                throw IoError(source + ": variable '" + row[0] + "' has an empty group");
            }
            group_of[it->second] = row[1];
        }
        for (std::size_t j = 0; j < group_of.size(); ++j) {
            if (group_of[j].empty()) {
                throw IoError(source + ": variable '" + variables[j] + "' has no group");
            }
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            std::map<std::string, double> totals;
            for (Eigen::Index j = 0; j < p_all; ++j) {
                totals[group_of[static_cast<std::size_t>(j)]] += values(i, j);
            }
            for (Eigen::Index j = 0; j < p_all; ++j) {
                const std::string& g = group_of[static_cast<std::size_t>(j)];
                offsets(i, j) = internal::checked_log_total(totals[g], samples[static_cast<std::size_t>(i)],
                                                            "total in group '" + g + "'");
            }
        }
        break;
    }
    case OffsetMode::file: {
        const std::string source = config.offsets.string();
        TextTable file = read_table(config.offsets);
        Matrix given = table_values(file, source);
        if (!given.allFinite()) {
            throw IoError(source + ": offsets must all be present and finite");
        }
        auto rows = internal::index_names(internal::first_column(file), "sample name", source);
        std::vector<Eigen::Index> cols;
        if (given.cols() != 1) {
            std::vector<std::string> names(file.header.begin() + 1, file.header.end());
            auto lookup = internal::index_names(names, "variable name", source);
            for (const auto& v : variables) {
                auto it = lookup.find(v);
                if (it == lookup.end()) {
                    throw IoError(source + ": no offset column for variable '" + v + "'");
                }
                cols.push_back(static_cast<Eigen::Index>(it->second));
            }
        }
        for (Eigen::Index i = 0; i < n; ++i) {
            auto it = rows.find(samples[static_cast<std::size_t>(i)]);
            if (it == rows.end()) {
                throw IoError(source + ": no offsets for sample '" + samples[static_cast<std::size_t>(i)] + "'");
            }
            auto r = static_cast<Eigen::Index>(it->second);
            for (Eigen::Index j = 0; j < p_all; ++j) {
                offsets(i, j) = cols.empty() ? given(r, 0) : given(r, cols[static_cast<std::size_t>(j)]);
            }
        }
        break;
    }
    }

    // Abundance filter.
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < p_all; ++j) {
        if (config.min_abundance > 0 && values.col(j).sum() < config.min_abundance) {
            dropped_variables.push_back(variables[static_cast<std::size_t>(j)]);
        } else {
            keep.push_back(j);
        }
    }
    if (keep.empty()) {
        throw DomainError("--min-abundance " + format_number(config.min_abundance) + " removes every variable");
    }
    const auto p = static_cast<Eigen::Index>(keep.size());
    Matrix y(n, p), m(n, p), o(n, p);
    std::vector<std::string> kept_names;
    for (Eigen::Index k = 0; k < p; ++k) {
        Eigen::Index j = keep[static_cast<std::size_t>(k)];
        y.col(k) = values.col(j);
        m.col(k) = mask.col(j);
        o.col(k) = offsets.col(j);
        kept_names.push_back(variables[static_cast<std::size_t>(j)]);
    }

    // Covariates with the intercept first.
    Matrix x = Matrix::Ones(n, 1);
    std::vector<std::string> covariate_names{"(Intercept)"};
    if (!config.covariates.empty()) {
        auto [block, names] =
            internal::covariate_block(covariates, covariate_rows, config.covariate_columns, config.covariates.string());
        Matrix joined(n, 1 + block.cols());
        joined << x, block;
        x = std::move(joined);
        covariate_names.insert(covariate_names.end(), names.begin(), names.end());
    } else if (!config.covariate_columns.empty()) {
        throw DomainError("--covariate-columns given without --covariates");
    }

    CountTableOptions options;
    options.integer_counts = counts_family;
    options.allow_zero_columns = config.allow_zero_columns;
    return {CountTable(std::move(y), std::move(m), std::move(samples), std::move(kept_names), options),
            Design(std::move(x), std::move(o), std::move(covariate_names)), std::move(dropped_variables),
            std::move(dropped_samples), std::move(warnings)};
}

namespace internal {

using Json = nlohmann::ordered_json;

inline Json matrix_json(const Matrix& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            row.push_back(m(i, j));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix json_matrix(const Json& value, const std::string& what) {
    if (!value.is_array()) {
        throw IoError(what + " must be an array of rows");
    }
    const auto rows = static_cast<Eigen::Index>(value.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(value[0].size()) : 0;
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const Json& row = value[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
            throw IoError(what + " rows must all have " + std::to_string(cols) + " entries");
        }
        for (Eigen::Index j = 0; j < cols; ++j) {
            out(i, j) = row[static_cast<std::size_t>(j)].get<double>();
        }
    }
    return out;
}

inline Json optional_json(const std::optional<double>& value) {
    return value ? Json(*value) : Json(nullptr);
}

inline Json criteria_json(const FitResult& fit) {
    Json row;
    row["rank"] = fit.rank;
    row["status"] = to_string(fit.status);
    row["message"] = fit.message;
    row["elbo"] = fit.criteria.elbo;
    row["bic"] = fit.criteria.bic;
    row["icl"] = fit.criteria.icl;
    row["entropy"] = fit.criteria.entropy;
    row["r2"] = optional_json(fit.criteria.r2);
    row["iterations"] = fit.iterations;
    row["evaluations"] = fit.evaluations;
    row["gradient_norm"] = fit.gradient_norm;
    return row;
}

inline const char* to_string(SimSpec::OffsetMode mode) {
    switch (mode) {
    case SimSpec::OffsetMode::none:
        return "none";
    case SimSpec::OffsetMode::constant:
        return "constant";
    case SimSpec::OffsetMode::log_depth:
        return "log-depth";
    }
    return "unknown";
}

} // namespace internal

/**
 * JSON form of a simulation spec; explicit matrices are arrays of rows.
 */
inline nlohmann::ordered_json simspec_to_json(const SimSpec& spec) {
    internal::Json out;
    out["n"] = spec.n;
    out["p"] = spec.p;
    out["q"] = spec.q;
    out["d"] = spec.d;
    if (spec.theta.size() > 0) {
        out["theta"] = internal::matrix_json(spec.theta);
    }
    if (spec.B.size() > 0) {
        out["B"] = internal::matrix_json(spec.B);
    }
    if (spec.sigma.size() > 0) {
        out["sigma"] = internal::matrix_json(spec.sigma);
    }
    out["intercept_low"] = spec.intercept_low;
    out["intercept_high"] = spec.intercept_high;
    out["coef_sd"] = spec.coef_sd;
    out["loading_sd"] = spec.loading_sd;
    out["offset_mode"] = internal::to_string(spec.offset_mode);
    out["offset_mean"] = spec.offset_mean;
    out["offset_sd"] = spec.offset_sd;
    out["missing_fraction"] = spec.missing_fraction;
    out["seed"] = spec.seed;
    return out;
}

inline SimSpec simspec_from_json(const nlohmann::ordered_json& in) {
    static const std::set<std::string> known = {"n",          "p",           "q",           "d",
                                                "theta",      "B",           "sigma",       "intercept_low",
                                                "intercept_high", "coef_sd", "loading_sd",  "offset_mode",
                                                "offset_mean", "offset_sd",  "missing_fraction", "seed"};
    if (!in.is_object()) {
        throw IoError("simulation spec must be a JSON object");
    }
    for (const auto& item : in.items()) {
        if (!known.count(item.key())) {
            throw IoError("unknown simulation spec key '" + item.key() + "'");
        }
    }
    SimSpec spec;
    try {
        spec.n = in.value("n", spec.n);
        spec.p = in.value("p", spec.p);
        spec.q = in.value("q", spec.q);
        spec.d = in.value("d", spec.d);
        if (in.contains("theta")) {
            spec.theta = internal::json_matrix(in["theta"], "theta");
        }
        if (in.contains("B")) {
            spec.B = internal::json_matrix(in["B"], "B");
        }
        if (in.contains("sigma")) {
            spec.sigma = internal::json_matrix(in["sigma"], "sigma");
        }
        spec.intercept_low = in.value("intercept_low", spec.intercept_low);
        spec.intercept_high = in.value("intercept_high", spec.intercept_high);
        spec.coef_sd = in.value("coef_sd", spec.coef_sd);
        spec.loading_sd = in.value("loading_sd", spec.loading_sd);
        std::string mode = in.value("offset_mode", std::string("none"));
        if (mode == "none") {
            spec.offset_mode = SimSpec::OffsetMode::none;
        } else if (mode == "constant") {
            spec.offset_mode = SimSpec::OffsetMode::constant;
        } else if (mode == "log-depth") {
            spec.offset_mode = SimSpec::OffsetMode::log_depth;
        } else {
            throw IoError("unknown simulation offset_mode '" + mode + "' (none, constant, log-depth)");
        }
        spec.offset_mean = in.value("offset_mean", spec.offset_mean);
        spec.offset_sd = in.value("offset_sd", spec.offset_sd);
        spec.missing_fraction = in.value("missing_fraction", spec.missing_fraction);
        spec.seed = in.value("seed", spec.seed);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed simulation spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

/**
 * Outcome of a command: exit status and the files written.
 */
struct RunOutcome {
    int exit_code = 0;
    std::vector<std::string> files;
    std::vector<std::string> warnings;
};

namespace internal {

inline Json config_json(const RunConfig& config, int threads) {
    Json out;
    out["subcommand"] = config.subcommand;
    if (config.subcommand != "simulate") {
        out["counts"] = config.counts.string();
        out["covariates"] = config.covariates.string();
        out["covariate_columns"] = config.covariate_columns;
        out["offset_mode"] = to_string(config.offset_mode);
        out["offsets"] = config.offsets.string();
        out["groups"] = config.groups.string();
        out["min_abundance"] = config.min_abundance;
        out["allow_zero_columns"] = config.allow_zero_columns;
        out["family"] = config.family;
        if (config.rank) {
            out["rank"] = *config.rank;
        }
        if (!config.ranks.empty()) {
            out["ranks"] = config.ranks;
        }
        out["criterion"] = to_string(config.criterion);
        Json optim;
        optim["algorithm"] = to_string(config.optim.algorithm);
        optim["max_iterations"] = config.optim.max_iterations;
        optim["ftol_rel"] = config.optim.ftol_rel;
        optim["ftol_patience"] = config.optim.ftol_patience;
        optim["xtol_rel"] = config.optim.xtol_rel;
        optim["gtol"] = config.optim.gtol;
        optim["s_floor"] = config.optim.s_floor;
        optim["s_init"] = config.optim.s_init;
        out["optimizer"] = std::move(optim);
    } else if (!config.spec.empty()) {
        out["spec"] = config.spec.string();
    }
    out["seed"] = config.optim.seed;
    out["threads"] = threads;
    return out;
}

inline Json manifest_head(const RunConfig& config, int threads) {
    Json out;
    out["tool"] = "plnfit";
    out["version"] = version;
    Json versions;
    versions["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION);
    versions["json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH);
#ifdef __VERSION__
    versions["compiler"] = __VERSION__;
#endif
    out["versions"] = std::move(versions);
    out["config"] = config_json(config, threads);
    return out;
}

inline Json ingest_json(const IngestResult& data) {
    Json out;
    out["samples"] = data.counts.n();
    out["variables"] = data.counts.p();
    out["covariates"] = data.design.covariate_names();
    out["observed_fraction"] = data.counts.mask().mean();
    out["dropped_variables"] = data.dropped_variables;
    out["dropped_samples"] = data.dropped_samples;
    return out;
}

inline void write_json(const std::filesystem::path& path, const Json& value) { write_text(path, value.dump(2) + "\n"); }

inline void prepare_out(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
}

class Stopwatch {
public:
    void mark(const std::string& name) {
        auto now = std::chrono::steady_clock::now();
        timings_[name] = std::chrono::duration<double>(now - last_).count();
        last_ = now;
    }
    /// Wall times vary between runs, so they live outside the manifest.
    void write(const std::filesystem::path& dir) const { write_json(dir / "timings.json", timings_); }

private:
    std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
    Json timings_ = Json::object();
};

inline int fit_exit_code(const FitResult& fit) { return fit.status == FitStatus::failed ? 3 : 0; }

} // namespace internal

/**
 * Fit one rank and export its artifacts and manifest.
 */
inline RunOutcome run_fit(const RunConfig& config) {
    config.validate();
    internal::Stopwatch clock;
    const int threads = resolve_threads(config.optim.num_threads);
    IngestResult data = ingest(config);
    clock.mark("ingest");

    OptimConfig optim = config.optim;
    optim.num_threads = threads;
    FitResult fit = fit_rank(data.counts, data.design, config.make_family(), *config.rank, optim);
    clock.mark("fit");

    internal::prepare_out(config.out);
    RunOutcome outcome;
    outcome.warnings = data.warnings;
    if (fit.status == FitStatus::max_iterations) {
        outcome.warnings.push_back("rank " + std::to_string(fit.rank) + " stopped at the iteration limit");
    }
    FactorMap map = orthogonalize(fit.structure, fit.criteria.r2);
    outcome.files = export_fit(fit, map, data.counts.row_names(), data.counts.col_names(), config.out);
    write_matrix_csv(config.out / "theta.csv", fit.params.theta, "variable", data.counts.col_names(),
                     data.design.covariate_names());
    outcome.files.push_back("theta.csv");
    clock.mark("export");

    internal::Json manifest = internal::manifest_head(config, threads);
    manifest["data"] = internal::ingest_json(data);
    manifest["fit"] = internal::criteria_json(fit);
    manifest["axis_fractions"] = std::vector<double>(map.fractions.data(), map.fractions.data() + map.fractions.size());
    manifest["warnings"] = outcome.warnings;
    outcome.files.push_back("manifest.json");
    manifest["files"] = outcome.files;
    internal::write_json(config.out / "manifest.json", manifest);
    clock.write(config.out);
    outcome.exit_code = internal::fit_exit_code(fit);
    return outcome;
}

/**
 * Fit every requested rank, mark the chosen ones in criteria.csv and export the chosen fit.
 */
inline RunOutcome run_scan(const RunConfig& config) {
    config.validate();
    internal::Stopwatch clock;
    const int threads = resolve_threads(config.optim.num_threads);
    IngestResult data = ingest(config);
    clock.mark("ingest");

    OptimConfig optim = config.optim;
    optim.num_threads = threads;
    RankScanResult scan = fit_rank_scan(data.counts, data.design, config.make_family(), config.ranks, optim);
    clock.mark("fit");

    internal::prepare_out(config.out);
    RunOutcome outcome;
    outcome.warnings = data.warnings;
    std::vector<CriteriaRow> rows;
    internal::Json table = internal::Json::array();
    for (std::size_t r = 0; r < scan.fits.size(); ++r) {
        const FitResult& fit = scan.fits[r];
        rows.push_back({fit.rank, fit.criteria, fit.status, fit.iterations, fit.rank == scan.best_icl,
                        fit.rank == scan.best_bic});
        table.push_back(internal::criteria_json(fit));
        if (fit.status == FitStatus::failed) {
            outcome.warnings.push_back("rank " + std::to_string(fit.rank) + " failed: " + fit.message);
        } else if (fit.status == FitStatus::max_iterations) {
            outcome.warnings.push_back("rank " + std::to_string(fit.rank) + " stopped at the iteration limit");
        }
    }

    const int chosen = scan.best(config.criterion);
    internal::Json manifest = internal::manifest_head(config, threads);
    manifest["data"] = internal::ingest_json(data);
    manifest["null_loglik"] = internal::optional_json(scan.null_loglik);
    manifest["criteria"] = std::move(table);
    manifest["chosen_rank"] = {{"icl", scan.best_icl}, {"bic", scan.best_bic}, {"used", chosen}};

    if (const FitResult* best = scan.find(chosen)) {
        FactorMap map = orthogonalize(best->structure, best->criteria.r2);
        outcome.files = export_fit(*best, map, data.counts.row_names(), data.counts.col_names(), config.out, rows);
        write_matrix_csv(config.out / "theta.csv", best->params.theta, "variable", data.counts.col_names(),
                         data.design.covariate_names());
        outcome.files.push_back("theta.csv");
    } else {
        write_criteria(config.out / "criteria.csv", rows);
        outcome.files.push_back("criteria.csv");
        outcome.warnings.push_back("no rank produced a usable fit");
        outcome.exit_code = 3;
    }
    clock.mark("export");
    manifest["warnings"] = outcome.warnings;
    outcome.files.push_back("manifest.json");
    manifest["files"] = outcome.files;
    internal::write_json(config.out / "manifest.json", manifest);
    clock.write(config.out);
    return outcome;
}

/**
 * Draw a data set and write counts.csv, covariates.csv, offsets.csv and the true parameters.
 */
inline RunOutcome run_simulate(const RunConfig& config) {
    config.validate();
    internal::Stopwatch clock;
    SimSpec spec = config.spec.empty()
                       ? config.simulation
                       : simspec_from_json(nlohmann::ordered_json::parse(read_text(config.spec), nullptr, true, true));
    Simulation sim = sample(spec);
    clock.mark("sample");

    internal::prepare_out(config.out);
    RunOutcome outcome;
    const auto& samples = sim.counts.row_names();
    const auto& variables = sim.counts.col_names();
    write_matrix_csv(config.out / "counts.csv", sim.counts.counts(), "sample", samples, variables,
                     &sim.counts.mask());
    std::vector<std::string> covariate_names(sim.design.covariate_names().begin() + 1,
                                             sim.design.covariate_names().end());
    write_matrix_csv(config.out / "covariates.csv", sim.design.covariates().rightCols(spec.d - 1), "sample", samples,
                     covariate_names);
    write_matrix_csv(config.out / "offsets.csv", sim.design.offsets(), "sample", samples, variables);
    write_matrix_csv(config.out / "true_theta.csv", sim.theta, "variable", variables, sim.design.covariate_names());
    write_matrix_csv(config.out / "true_sigma.csv", sim.sigma, "variable", variables, variables);
    outcome.files = {"counts.csv", "covariates.csv", "offsets.csv", "true_theta.csv", "true_sigma.csv"};
    clock.mark("write");

    internal::Json manifest = internal::manifest_head(config, 1);
    manifest["rng"] = Xoshiro256::algorithm;
    manifest["spec"] = simspec_to_json(spec);
    outcome.files.push_back("manifest.json");
    manifest["files"] = outcome.files;
    internal::write_json(config.out / "manifest.json", manifest);
    clock.write(config.out);
    return outcome;
}

/**
 * Fit one rank and write the counts with masked entries replaced by their
 * conditional expectation.
 */
inline RunOutcome run_impute(const RunConfig& config) {
    config.validate();
    internal::Stopwatch clock;
    const int threads = resolve_threads(config.optim.num_threads);
    IngestResult data = ingest(config);
    clock.mark("ingest");

    OptimConfig optim = config.optim;
    optim.num_threads = threads;
    Family family = config.make_family();
    FitResult fit = fit_rank(data.counts, data.design, family, *config.rank, optim);
    ElboWorkspace ws = compute_A(family, fit.params, fit.vstate, data.design);
    Matrix completed = impute(data.counts, ws);
    clock.mark("fit");

    internal::prepare_out(config.out);
    RunOutcome outcome;
    outcome.warnings = data.warnings;
    write_matrix_csv(config.out / "imputed_counts.csv", completed, "sample", data.counts.row_names(),
                     data.counts.col_names());
    outcome.files = {"imputed_counts.csv"};

    internal::Json manifest = internal::manifest_head(config, threads);
    manifest["data"] = internal::ingest_json(data);
    manifest["fit"] = internal::criteria_json(fit);
    manifest["imputed_entries"] = static_cast<long long>((data.counts.mask().array() == 0).count());
    manifest["warnings"] = outcome.warnings;
    outcome.files.push_back("manifest.json");
    manifest["files"] = outcome.files;
    internal::write_json(config.out / "manifest.json", manifest);
    clock.write(config.out);
    outcome.exit_code = internal::fit_exit_code(fit);
    return outcome;
}

inline RunOutcome run(const RunConfig& config) {
    if (config.subcommand == "fit") {
        return run_fit(config);
    }
    if (config.subcommand == "scan") {
        return run_scan(config);
    }
    if (config.subcommand == "simulate") {
        return run_simulate(config);
    }
    if (config.subcommand == "impute") {
        return run_impute(config);
    }
    throw DomainError("unknown subcommand '" + config.subcommand + "'");
}

} // namespace plnpca

#endif
