#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "plnpca/cli.hpp"

namespace {

const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const plnpca::DomainError*>(&e)) {
        return "domain";
    }
    if (dynamic_cast<const plnpca::DimensionError*>(&e)) {
        return "dimension";
    }
    if (dynamic_cast<const plnpca::OverflowError*>(&e)) {
        return "overflow";
    }
    if (dynamic_cast<const plnpca::ConvergenceError*>(&e)) {
        return "convergence";
    }
    if (dynamic_cast<const plnpca::IoError*>(&e)) {
        return "io";
    }
    return "internal";
}

void add_data_options(CLI::App& cmd, plnpca::RunConfig& config, std::string& offset_mode) {
    cmd.add_option("--counts", config.counts, "Count table: samples in rows, variables in columns")->required();
    cmd.add_option("--covariates", config.covariates, "Covariate table keyed by sample name");
    cmd.add_option("--covariate-columns", config.covariate_columns, "Covariate columns to use (default: all)")
        ->delimiter(',');
    cmd.add_option("--offsets", config.offsets, "Offset table for --offset-mode file");
    cmd.add_option("--offset-mode", offset_mode, "none, log-row-totals, per-group-log-totals or file")
        ->capture_default_str();
    cmd.add_option("--groups", config.groups, "Variable to group table for per-group offsets");
    cmd.add_option("--min-abundance", config.min_abundance, "Drop variables whose total count is below this");
    cmd.add_flag("--allow-zero-columns", config.allow_zero_columns, "Keep variables that are zero in every sample");
    cmd.add_option("--family", config.family, "poisson or gaussian")->capture_default_str();
}

void add_optim_options(CLI::App& cmd, plnpca::RunConfig& config, std::string& algorithm) {
    cmd.add_option("--max-iter", config.optim.max_iterations, "Iteration limit")->capture_default_str();
    cmd.add_option("--tol", config.optim.ftol_rel, "Relative objective tolerance")->capture_default_str();
    cmd.add_option("--algorithm", algorithm, "mma or projected-gradient")->capture_default_str();
    cmd.add_option("--seed", config.optim.seed, "Seed echoed in the manifest");
    cmd.add_option("--threads", config.optim.num_threads, "Worker threads (default: all cores; PLNFIT_THREADS wins)");
    cmd.add_option("--out", config.out, "Output directory")->capture_default_str();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Poisson lognormal PCA: fit, rank scan, simulation and imputation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", plnpca::version);

    plnpca::RunConfig config;
    config.optim.num_threads = 0;
    std::string offset_mode = "none";
    std::string algorithm = "mma";
    std::string criterion = "icl";
    std::string ranks;
    int rank = 0;

    auto* fit = app.add_subcommand("fit", "Fit one rank and export scores, loadings and criteria");
    add_data_options(*fit, config, offset_mode);
    add_optim_options(*fit, config, algorithm);
    fit->add_option("--rank", rank, "Latent rank q")->required();

    auto* scan = app.add_subcommand("scan", "Fit a range of ranks and select one");
    add_data_options(*scan, config, offset_mode);
    add_optim_options(*scan, config, algorithm);
    scan->add_option("--ranks", ranks, "Ranks as 1:5, 1-5 or 1,2,4")->required();
    scan->add_option("--criterion", criterion, "icl or bic")->capture_default_str();

    auto* impute = app.add_subcommand("impute", "Fit one rank and fill missing entries");
    add_data_options(*impute, config, offset_mode);
    add_optim_options(*impute, config, algorithm);
    impute->add_option("--rank", rank, "Latent rank q")->required();

    auto* simulate = app.add_subcommand("simulate", "Draw a Poisson lognormal data set");
    plnpca::SimSpec& sim = config.simulation;
    simulate->add_option("--spec", config.spec, "JSON simulation spec (overrides the size flags)");
    simulate->add_option("--n", sim.n, "Samples")->capture_default_str();
    simulate->add_option("--p", sim.p, "Variables")->capture_default_str();
    simulate->add_option("--rank", sim.q, "Latent rank")->capture_default_str();
    simulate->add_option("--d", sim.d, "Covariates including the intercept")->capture_default_str();
    simulate->add_option("--missing", sim.missing_fraction, "Fraction of masked entries")->capture_default_str();
    simulate->add_option("--seed", sim.seed, "Random seed")->capture_default_str();
    simulate->add_option("--out", config.out, "Output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        config.subcommand = app.get_subcommands().front()->get_name();
        config.offset_mode = plnpca::parse_offset_mode(offset_mode);
        if (algorithm == "mma") {
            config.optim.algorithm = plnpca::Algorithm::mma;
        } else if (algorithm == "projected-gradient") {
            config.optim.algorithm = plnpca::Algorithm::projected_gradient;
        } else {
            throw plnpca::DomainError("unknown algorithm '" + algorithm + "' (mma, projected-gradient)");
        }
        if (criterion != "icl" && criterion != "bic") {
            throw plnpca::DomainError("unknown criterion '" + criterion + "' (icl, bic)");
        }
        config.criterion = criterion == "icl" ? plnpca::Criterion::icl : plnpca::Criterion::bic;
        if (config.subcommand == "scan") {
            config.ranks = plnpca::parse_ranks(ranks);
        } else if (config.subcommand != "simulate") {
            config.rank = rank;
        } else {
            config.optim.seed = sim.seed;
        }

        plnpca::RunOutcome outcome = plnpca::run(config);
        for (const auto& warning : outcome.warnings) {
            std::cerr << "warning: " << warning << "\n";
        }
        if (outcome.exit_code != 0) {
            nlohmann::json err = {{"error", {{"kind", "fit"}, {"message", "fit failed; see manifest.json"}}}};
            std::cerr << err.dump() << "\n";
        }
        return outcome.exit_code;
    } catch (const std::exception& e) {
        nlohmann::json err = {{"error", {{"kind", error_kind(e)}, {"message", e.what()}}}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
