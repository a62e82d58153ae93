// SPDX-License-Identifier: Apache-2.0
//
// Operator surface for the CSFL simulator: validate configs, run experiments,
// sweep one config axis, and export synthetic datasets.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "csfl/csfl.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIo = 4;

struct CliArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::string out_file;
    std::string protocol;
    std::string axis;
    std::vector<double> values;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

nlohmann::json load_config_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw csfl::IoError("cannot open config file " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw csfl::ConfigError(path + ": " + e.what());
    }
}

void apply_overrides(csfl::ExperimentConfig& cfg, const CliArgs& args) {
    if (args.seed_given) cfg.seed = args.seed;
    if (!args.protocol.empty()) {
        cfg.protocols = {csfl::protocol_from_name(args.protocol)};
    }
}

void print_defaulted(const csfl::ExperimentConfig& cfg, std::ostream& os) {
    if (cfg.defaulted.empty()) return;
    os << "defaults applied:\n";
    for (const auto& line : cfg.defaulted) os << "  " << line << "\n";
}

int run_validate(const CliArgs& args) {
    csfl::ExperimentConfig cfg = csfl::validate_config(args.config_path);
    std::cout << "config OK: " << cfg.data.num_users << " users, " << cfg.training.epochs
              << " epochs, protocols";
    for (auto p : cfg.protocols) std::cout << ' ' << csfl::protocol_name(p);
    std::cout << "\n";
    print_defaulted(cfg, std::cout);
    return kExitOk;
}

int run_run(const CliArgs& args) {
    csfl::ExperimentConfig cfg = csfl::validate_config(args.config_path);
    apply_overrides(cfg, args);
    print_defaulted(cfg, std::cerr);
    const std::string out_dir = args.out_dir.empty() ? cfg.output.dir : args.out_dir;
    const csfl::RunArtifacts files = csfl::cmd_run(cfg, out_dir);
    std::cout << "wrote " << files.metrics_csv << "\n";
    std::cout << "wrote " << files.trace_json << "\n";
    return kExitOk;
}

int run_sweep(const CliArgs& args) {
    nlohmann::json base = load_config_json(args.config_path);
    if (args.seed_given) base["seed"] = args.seed;
    const std::string out_dir = args.out_dir;
    const std::vector<std::string> files =
        csfl::cmd_sweep(base, args.axis, args.values, out_dir);
    for (const auto& f : files) std::cout << "wrote " << f << "\n";
    return kExitOk;
}

int run_gen_data(const CliArgs& args) {
    csfl::ExperimentConfig cfg = csfl::validate_config(args.config_path);
    apply_overrides(cfg, args);
    csfl::cmd_gen_data(cfg, args.out_file);
    std::cout << "wrote " << args.out_file << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Collaborative Split Federated Learning simulator"};
    app.require_subcommand(1);
    CliArgs args;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", args.config_path, "Experiment config (JSON)")->required();
        cmd->add_option("--seed", args.seed, "Override the config seed")
            ->each([&args](const std::string&) { args.seed_given = true; });
    };

    CLI::App* validate = app.add_subcommand("validate", "Parse and cross-check a config");
    validate->add_option("--config", args.config_path, "Experiment config (JSON)")->required();

    CLI::App* run = app.add_subcommand("run", "Run the configured experiment");
    add_common(run);
    run->add_option("--out", args.out_dir, "Output directory (default from config)");
    run->add_option("--protocol", args.protocol, "Run only this protocol (psl|sfl|csfl-g)");

    CLI::App* sweep = app.add_subcommand("sweep", "Run the experiment once per axis value");
    add_common(sweep);
    sweep->add_option("--axis", args.axis, "Dot path of a scalar config field")->required();
    sweep->add_option("--values", args.values, "Comma-separated values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--out", args.out_dir, "Output directory");

    CLI::App* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as CSV");
    add_common(gen);
    gen->add_option("--out", args.out_file, "Output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (validate->parsed()) return run_validate(args);
        if (run->parsed()) return run_run(args);
        if (sweep->parsed()) return run_sweep(args);
        if (gen->parsed()) return run_gen_data(args);
        std::cerr << "no subcommand\n";
        return kExitConfig;
    } catch (const csfl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const csfl::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
