// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "csfl/config.hpp"
#include "csfl/data.hpp"
#include "csfl/errors.hpp"
#include "csfl/experiment.hpp"
#include "csfl/io.hpp"

namespace csfl {

struct RunArtifacts {
    std::string metrics_csv;
    std::string trace_json;
};

namespace detail {

inline void ensure_directory(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

}  // namespace detail

// Runs the configured experiment and writes metrics.csv plus trace.json into
// out_dir. Rerunning with the same config reproduces both files byte for byte.
inline RunArtifacts cmd_run(const ExperimentConfig& cfg, const std::string& out_dir) {
    detail::ensure_directory(out_dir);
    const ExperimentResult result = run_experiment(cfg);
    RunArtifacts files;
    files.metrics_csv = (std::filesystem::path(out_dir) / "metrics.csv").string();
    files.trace_json = (std::filesystem::path(out_dir) / "trace.json").string();
    write_text_file(files.metrics_csv, metrics_to_csv(result.report));
    write_text_file(files.trace_json, result_to_trace_json(result).dump(2) + "\n");
    return files;
}

// Writes the configured synthetic dataset as a CSV loadable by the csv source.
inline void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_path) {
    SyntheticSpec spec;
    spec.n = cfg.effective_synthetic_n();
    spec.num_numeric = cfg.arch.num_numeric;
    spec.vocab1 = cfg.arch.vocab1;
    spec.vocab2 = cfg.arch.vocab2;
    spec.noise_sigma = cfg.data.noise_sigma;
    Dataset d = generate_synthetic(cfg.seed, spec);
    d.schema = cfg.data.schema;
    write_csv(d, out_path);
}

namespace detail {

// Sets a scalar leaf addressed by a dot path ("training.lr", "profiles.2.cpu_rate").
inline void set_config_scalar(nlohmann::json& root, const std::string& axis, double value) {
    std::vector<std::string> tokens;
    std::string token;
    for (char c : axis) {
        if (c == '.') {
            tokens.push_back(token);
            token.clear();
        } else {
            token += c;
        }
    }
    tokens.push_back(token);
    if (tokens.empty() || tokens.front().empty()) throw ConfigError("sweep: empty axis path");

    nlohmann::json* node = &root;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (node->is_array()) {
            std::size_t idx = 0;
            try {
                idx = static_cast<std::size_t>(std::stoul(t));
            } catch (const std::exception&) {
                throw ConfigError("sweep: '" + t + "' is not an array index in axis " + axis);
            }
            if (idx >= node->size()) throw ConfigError("sweep: index out of range in axis " + axis);
            node = &(*node)[idx];
        } else if (node->is_object()) {
            if (!node->contains(t)) {
                throw ConfigError("sweep: axis '" + axis + "' does not name an existing field");
            }
            node = &(*node)[t];
        } else {
            throw ConfigError("sweep: axis '" + axis + "' descends through a scalar");
        }
    }
    const std::string& leaf = tokens.back();
    if (node->is_array()) {
        throw ConfigError("sweep: axis '" + axis + "' must end at an object field");
    }
    if (node->contains(leaf) && !(*node)[leaf].is_number() && !(*node)[leaf].is_boolean()) {
        throw ConfigError("sweep: axis '" + axis + "' is not a scalar field");
    }
    (*node)[leaf] = value;
}

inline std::string sweep_cell_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "metrics_cell%03zu.csv", index);
    return buf;
}

}  // namespace detail

// One run per axis value, each written to its own metrics file, plus a
// combined summary. Cells are independent: results do not depend on the order
// of the value list.
inline std::vector<std::string> cmd_sweep(const nlohmann::json& base_config,
                                          const std::string& axis,
                                          const std::vector<double>& values,
                                          const std::string& out_dir) {
    if (values.empty()) throw ConfigError("sweep: value list must not be empty");
    detail::ensure_directory(out_dir);

    std::vector<std::string> written;
    std::string summary = "axis,value,protocol,epoch,train_mae,eval_mae,throughput,sync_delay,"
                          "aggregations\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        nlohmann::json cell = base_config;
        detail::set_config_scalar(cell, axis, values[i]);
        const ExperimentConfig cfg = validate_config_json(cell);
        const ExperimentResult result = run_experiment(cfg);

        const std::string cell_path =
            (std::filesystem::path(out_dir) / detail::sweep_cell_name(i)).string();
        write_text_file(cell_path, metrics_to_csv(result.report));
        written.push_back(cell_path);

        for (const auto& row : result.report.rows) {
            summary += axis;
            summary += ',';
            summary += format_g17(values[i]);
            summary += ',';
            summary += row.protocol;
            summary += ',';
            summary += std::to_string(row.epoch);
            summary += ',';
            summary += format_g17(row.train_mae);
            summary += ',';
            summary += format_g17(row.eval_mae);
            summary += ',';
            summary += format_g17(row.throughput);
            summary += ',';
            summary += format_g17(row.sync_delay);
            summary += ',';
            summary += std::to_string(row.aggregations);
            summary += '\n';
        }
    }
    const std::string summary_path =
        (std::filesystem::path(out_dir) / "sweep_summary.csv").string();
    write_text_file(summary_path, summary);
    written.push_back(summary_path);
    return written;
}

}  // namespace csfl
