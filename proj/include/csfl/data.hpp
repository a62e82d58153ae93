// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "csfl/errors.hpp"
#include "csfl/linalg.hpp"
#include "csfl/model.hpp"
#include "csfl/rng.hpp"

namespace csfl {

struct DataSchema {
    std::vector<std::string> numeric_names;
    std::vector<std::string> cat_names;  // exactly two categorical features
    std::string target_name;

    void validate() const {
        if (numeric_names.empty()) throw SchemaError("schema: needs at least one numeric feature");
        if (cat_names.size() != 2) throw SchemaError("schema: exactly two categorical features required");
        if (target_name.empty()) throw SchemaError("schema: target column name missing");
    }
};

inline DataSchema default_schema(int num_numeric) {
    DataSchema s;
    for (int i = 0; i < num_numeric; ++i) s.numeric_names.push_back("num" + std::to_string(i));
    s.cat_names = {"cat1", "cat2"};
    s.target_name = "target";
    return s;
}

// Ground-truth coefficients the synthetic generator drew; kept with the
// dataset so tests can recompute targets independently.
struct GeneratorParams {
    std::vector<double> numeric_weights;
    std::vector<double> cat1_effects;
    std::vector<double> cat2_effects;
};

struct Dataset {
    Matrix numeric;  // n x num_numeric, standardized columns
    std::vector<int> cat1;
    std::vector<int> cat2;
    std::vector<double> target;
    DataSchema schema;
    std::vector<std::string> cat1_labels;  // index -> original label
    std::vector<std::string> cat2_labels;
    std::optional<GeneratorParams> generator;

    std::size_t size() const { return target.size(); }

    friend bool operator==(const Dataset& a, const Dataset& b) {
        return a.numeric == b.numeric && a.cat1 == b.cat1 && a.cat2 == b.cat2 &&
               a.target == b.target;
    }
};

struct SyntheticSpec {
    std::size_t n = 0;
    int num_numeric = 6;
    int vocab1 = 4;
    int vocab2 = 3;
    double noise_sigma = 0.1;
};

namespace detail {

// In-place exact column standardization (population moments). A constant
// column keeps its centered values (scale 1) instead of dividing by zero.
inline void standardize_columns(Matrix& m) {
    if (m.rows == 0) return;
    const double n = static_cast<double>(m.rows);
    for (std::size_t j = 0; j < m.cols; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) mean += m(i, j);
        mean /= n;
        double var = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            const double d = m(i, j) - mean;
            var += d * d;
        }
        var /= n;
        const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
        for (std::size_t i = 0; i < m.rows; ++i) {
            m(i, j) = (m(i, j) - mean) * scale;
        }
    }
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline Dataset generate_synthetic(std::uint64_t seed, const SyntheticSpec& spec,
                                  const GeneratorParams& gen) {
    if (spec.n < 1) throw ConfigError("generate_synthetic: n must be >= 1");
    if (spec.num_numeric < 1 || spec.vocab1 < 1 || spec.vocab2 < 1) {
        throw ConfigError("generate_synthetic: feature spec fields must be >= 1");
    }
    if (spec.noise_sigma < 0.0) throw ConfigError("generate_synthetic: noise_sigma must be >= 0");
    if (gen.numeric_weights.size() != static_cast<std::size_t>(spec.num_numeric) ||
        gen.cat1_effects.size() != static_cast<std::size_t>(spec.vocab1) ||
        gen.cat2_effects.size() != static_cast<std::size_t>(spec.vocab2)) {
        throw ConfigError("generate_synthetic: generator parameter sizes do not match spec");
    }

    Rng rng = Rng(seed).derive(0x64617461);  // data stream
    Dataset d;
    d.schema = default_schema(spec.num_numeric);
    d.numeric = Matrix(spec.n, static_cast<std::size_t>(spec.num_numeric));
    for (double& v : d.numeric.data) v = rng.normal();
    detail::standardize_columns(d.numeric);

    d.cat1.resize(spec.n);
    d.cat2.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        d.cat1[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.vocab1)));
        d.cat2[i] = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.vocab2)));
    }
    for (int v = 0; v < spec.vocab1; ++v) d.cat1_labels.push_back(std::to_string(v));
    for (int v = 0; v < spec.vocab2; ++v) d.cat2_labels.push_back(std::to_string(v));

    d.target.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        double y = 0.0;
        for (std::size_t j = 0; j < d.numeric.cols; ++j) {
            y += gen.numeric_weights[j] * d.numeric(i, j);
        }
        y += gen.cat1_effects[static_cast<std::size_t>(d.cat1[i])];
        y += gen.cat2_effects[static_cast<std::size_t>(d.cat2[i])];
        if (spec.noise_sigma > 0.0) y += spec.noise_sigma * rng.normal();
        d.target[i] = y;
    }
    d.generator = gen;
    return d;
}

inline Dataset generate_synthetic(std::uint64_t seed, const SyntheticSpec& spec) {
    if (spec.num_numeric < 1 || spec.vocab1 < 1 || spec.vocab2 < 1) {
        throw ConfigError("generate_synthetic: feature spec fields must be >= 1");
    }
    Rng rng = Rng(seed).derive(0x636f6566);  // coefficient stream
    GeneratorParams gen;
    gen.numeric_weights.resize(static_cast<std::size_t>(spec.num_numeric));
    for (double& v : gen.numeric_weights) v = rng.uniform(-1.0, 1.0);
    gen.cat1_effects.resize(static_cast<std::size_t>(spec.vocab1));
    for (double& v : gen.cat1_effects) v = rng.uniform(-1.0, 1.0);
    gen.cat2_effects.resize(static_cast<std::size_t>(spec.vocab2));
    for (double& v : gen.cat2_effects) v = rng.uniform(-1.0, 1.0);
    return generate_synthetic(seed, spec, gen);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace detail

// Reads a comma-separated UTF-8 file with a header row. Columns are located
// by name; columns outside the schema are ignored so exported slices of
// larger health datasets load unchanged. Categorical strings are mapped to
// indices in first-appearance order and numeric columns are standardized.
inline Dataset load_csv(const std::string& path, const DataSchema& schema) {
    schema.validate();
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);

    std::string header_line;
    if (!std::getline(in, header_line)) throw DataError(path + ": empty file");
    const std::vector<std::string> header = detail::split_csv_line(detail::strip_cr(header_line));

    std::unordered_map<std::string, std::size_t> col_of;
    for (std::size_t i = 0; i < header.size(); ++i) col_of[header[i]] = i;
    auto require_col = [&](const std::string& name) {
        auto it = col_of.find(name);
        if (it == col_of.end()) throw SchemaError(path + ": missing column '" + name + "'");
        return it->second;
    };
    std::vector<std::size_t> numeric_cols;
    for (const auto& name : schema.numeric_names) numeric_cols.push_back(require_col(name));
    const std::size_t cat1_col = require_col(schema.cat_names[0]);
    const std::size_t cat2_col = require_col(schema.cat_names[1]);
    const std::size_t target_col = require_col(schema.target_name);

    Dataset d;
    d.schema = schema;
    std::vector<std::vector<double>> numeric_rows;
    std::unordered_map<std::string, int> cat1_index;
    std::unordered_map<std::string, int> cat2_index;

    auto parse_double = [&](const std::string& cell, std::size_t line_no, const std::string& col) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(cell, &pos);
            if (pos != cell.size()) throw std::invalid_argument(cell);
            return v;
        } catch (const std::exception&) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": cannot parse '" +
                            cell + "' in column '" + col + "' as a number");
        }
    };

    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::strip_cr(line);
        if (line.empty()) continue;
        const std::vector<std::string> cells = detail::split_csv_line(line);
        if (cells.size() != header.size()) {
            throw DataError(path + ": line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " cells, got " +
                            std::to_string(cells.size()));
        }
        std::vector<double> row;
        row.reserve(numeric_cols.size());
        for (std::size_t j = 0; j < numeric_cols.size(); ++j) {
            row.push_back(parse_double(cells[numeric_cols[j]], line_no, schema.numeric_names[j]));
        }
        numeric_rows.push_back(std::move(row));

        auto intern = [](std::unordered_map<std::string, int>& table,
                         std::vector<std::string>& labels, const std::string& value) {
            auto it = table.find(value);
            if (it != table.end()) return it->second;
            const int idx = static_cast<int>(labels.size());
            table.emplace(value, idx);
            labels.push_back(value);
            return idx;
        };
        d.cat1.push_back(intern(cat1_index, d.cat1_labels, cells[cat1_col]));
        d.cat2.push_back(intern(cat2_index, d.cat2_labels, cells[cat2_col]));
        d.target.push_back(parse_double(cells[target_col], line_no, schema.target_name));
    }
    if (numeric_rows.empty()) throw DataError(path + ": no data rows");

    d.numeric = Matrix(numeric_rows.size(), schema.numeric_names.size());
    for (std::size_t i = 0; i < numeric_rows.size(); ++i) {
        for (std::size_t j = 0; j < d.numeric.cols; ++j) {
            d.numeric(i, j) = numeric_rows[i][j];
        }
    }
    detail::standardize_columns(d.numeric);
    return d;
}

// Writes the schema's columns in order: numerics, the two categoricals (as
// their original labels), then the target. %.17g keeps reloads bit-faithful.
inline void write_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (std::size_t j = 0; j < d.schema.numeric_names.size(); ++j) {
        out << d.schema.numeric_names[j] << ',';
    }
    out << d.schema.cat_names[0] << ',' << d.schema.cat_names[1] << ',' << d.schema.target_name
        << '\n';
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < d.numeric.cols; ++j) {
            out << detail::format_double(d.numeric(i, j)) << ',';
        }
        out << d.cat1_labels[static_cast<std::size_t>(d.cat1[i])] << ','
            << d.cat2_labels[static_cast<std::size_t>(d.cat2[i])] << ','
            << detail::format_double(d.target[i]) << '\n';
    }
    if (!out) throw IoError("write failed: " + path);
}

// One user's slice of a dataset.
struct Shard {
    int owner = 0;
    std::vector<std::size_t> indices;
    double data_quality = 1.0;

    friend bool operator==(const Shard&, const Shard&) = default;
};

// Seeded shuffle then contiguous assignment; IID by construction.
inline std::vector<Shard> partition(const Dataset& dataset, int num_users, std::size_t per_user,
                                    std::uint64_t seed,
                                    const std::vector<double>& data_quality = {}) {
    if (num_users < 1) throw ConfigError("partition: num_users must be >= 1");
    if (per_user < 1) throw ConfigError("partition: per_user must be >= 1");
    const std::size_t need = static_cast<std::size_t>(num_users) * per_user;
    if (need > dataset.size()) {
        throw ConfigError("partition: " + std::to_string(num_users) + " users x " +
                          std::to_string(per_user) + " samples needs " + std::to_string(need) +
                          " rows, dataset has " + std::to_string(dataset.size()));
    }
    if (!data_quality.empty() && data_quality.size() != static_cast<std::size_t>(num_users)) {
        throw ConfigError("partition: data_quality list size != num_users");
    }

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng(seed).derive(0x73686172);  // shard stream
    rng.shuffle(order);

    std::vector<Shard> shards;
    shards.reserve(static_cast<std::size_t>(num_users));
    for (int u = 0; u < num_users; ++u) {
        Shard s;
        s.owner = u;
        const std::size_t begin = static_cast<std::size_t>(u) * per_user;
        s.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                         order.begin() + static_cast<std::ptrdiff_t>(begin + per_user));
        s.data_quality = data_quality.empty() ? 1.0 : data_quality[static_cast<std::size_t>(u)];
        shards.push_back(std::move(s));
    }
    return shards;
}

// Rows of `dataset` at `indices`, as model inputs plus a target column.
inline std::pair<RawBatch, Matrix> make_batch(const Dataset& dataset,
                                              const std::vector<std::size_t>& indices) {
    RawBatch batch;
    batch.numeric = Matrix(indices.size(), dataset.numeric.cols);
    batch.cat1.resize(indices.size());
    batch.cat2.resize(indices.size());
    Matrix target(indices.size(), 1);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t r = indices[i];
        if (r >= dataset.size()) throw ContractError("make_batch: index out of range");
        for (std::size_t j = 0; j < dataset.numeric.cols; ++j) {
            batch.numeric(i, j) = dataset.numeric(r, j);
        }
        batch.cat1[i] = dataset.cat1[r];
        batch.cat2[i] = dataset.cat2[r];
        target(i, 0) = dataset.target[r];
    }
    return {std::move(batch), std::move(target)};
}

}  // namespace csfl
