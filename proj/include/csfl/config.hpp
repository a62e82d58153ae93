// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "csfl/data.hpp"
#include "csfl/errors.hpp"
#include "csfl/model.hpp"
#include "csfl/sim.hpp"
#include "csfl/system_model.hpp"

namespace csfl {

enum class Protocol { kPsl, kSfl, kCsflG };

inline std::string protocol_name(Protocol p) {
    switch (p) {
        case Protocol::kPsl: return "psl";
        case Protocol::kSfl: return "sfl";
        case Protocol::kCsflG: return "csfl-g";
    }
    throw ContractError("unknown protocol enum value");
}

inline Protocol protocol_from_name(const std::string& name) {
    if (name == "psl") return Protocol::kPsl;
    if (name == "sfl") return Protocol::kSfl;
    if (name == "csfl-g") return Protocol::kCsflG;
    throw ConfigError("unknown protocol '" + name + "' (expected psl, sfl or csfl-g)");
}

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" | "csv"
    std::string csv_path;
    DataSchema schema;            // CSV column names; defaults follow the arch
    std::size_t synthetic_n = 0;  // 0 = num_users * per_user + 300
    double noise_sigma = 0.1;
    int num_users = 6;
    std::size_t per_user = 200;
    std::size_t batch_size = 32;
};

struct TrainConfig {
    int epochs = 30;
    double lr = 0.05;
};

struct SystemConfig {
    double aggregation_latency = 0.05;
    double bytes_per_element = 8.0;
    double server_cpu_rate = 1e11;
    double rate_jitter_sigma = 0.0;
};

struct OutputConfig {
    std::string dir = "out";
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    ArchSpec arch;
    DataConfig data;
    std::vector<UserProfile> profiles;
    std::vector<Protocol> protocols;
    TrainConfig training;
    CromOptions crom;
    SystemConfig system;
    OutputConfig output;

    std::vector<std::string> defaulted;  // "path = value" for every filled-in field

    std::size_t effective_synthetic_n() const {
        if (data.synthetic_n > 0) return data.synthetic_n;
        return static_cast<std::size_t>(data.num_users) * data.per_user + 300;
    }
};

namespace detail {

using json = nlohmann::json;

inline std::string join_path(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

inline void check_keys(const json& obj, const std::string& path,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw SchemaError("config section '" + path + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::none_of(allowed.begin(), allowed.end(),
                         [&](const char* k) { return it.key() == k; })) {
            throw SchemaError("unknown key: " + join_path(path, it.key()));
        }
    }
}

template <typename T>
T get_field(const json& obj, const std::string& path, const char* key) {
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config field '" + join_path(path, key) + "': " + e.what());
    }
}

template <typename T>
T field_or(const json& obj, const std::string& path, const char* key, T def,
           std::vector<std::string>& defaulted) {
    if (obj.contains(key)) return get_field<T>(obj, path, key);
    defaulted.push_back(join_path(path, key) + " = " + json(def).dump());
    return def;
}

}  // namespace detail

// Parses, defaults and cross-validates an experiment configuration. Unknown
// keys are rejected by name; every defaulted field is recorded.
inline ExperimentConfig validate_config_json(const nlohmann::json& root) {
    using detail::check_keys;
    using detail::field_or;
    using detail::get_field;
    using json = nlohmann::json;

    ExperimentConfig cfg;
    auto& defaulted = cfg.defaulted;

    check_keys(root, "", {"seed", "arch", "data", "profiles", "protocols", "training", "crom",
                          "system", "output"});
    cfg.seed = field_or<std::uint64_t>(root, "", "seed", 42, defaulted);

    // arch
    {
        const json arch = root.contains("arch") ? root.at("arch") : json::object();
        if (!root.contains("arch")) defaulted.push_back("arch = {built-in defaults}");
        check_keys(arch, "arch",
                   {"num_numeric", "vocab1", "vocab2", "wide_out", "embed_dim1", "embed_dim2",
                    "client_hidden", "server_hidden", "output_dim", "split_layer_index"});
        ArchSpec a;
        a.num_numeric = field_or<int>(arch, "arch", "num_numeric", a.num_numeric, defaulted);
        a.vocab1 = field_or<int>(arch, "arch", "vocab1", a.vocab1, defaulted);
        a.vocab2 = field_or<int>(arch, "arch", "vocab2", a.vocab2, defaulted);
        a.wide_out = field_or<int>(arch, "arch", "wide_out", a.wide_out, defaulted);
        a.embed_dim1 = field_or<int>(arch, "arch", "embed_dim1", a.embed_dim1, defaulted);
        a.embed_dim2 = field_or<int>(arch, "arch", "embed_dim2", a.embed_dim2, defaulted);
        a.client_hidden =
            field_or<std::vector<int>>(arch, "arch", "client_hidden", a.client_hidden, defaulted);
        a.server_hidden =
            field_or<std::vector<int>>(arch, "arch", "server_hidden", a.server_hidden, defaulted);
        a.output_dim = field_or<int>(arch, "arch", "output_dim", a.output_dim, defaulted);
        a.split_layer_index =
            field_or<int>(arch, "arch", "split_layer_index",
                          1 + static_cast<int>(a.client_hidden.size()), defaulted);
        a.validate();
        cfg.arch = a;
    }

    // data
    {
        const json data = root.contains("data") ? root.at("data") : json::object();
        if (!root.contains("data")) defaulted.push_back("data = {built-in defaults}");
        check_keys(data, "data",
                   {"source", "csv_path", "schema", "synthetic_n", "noise_sigma", "num_users",
                    "per_user", "batch_size"});
        DataConfig d;
        d.source = field_or<std::string>(data, "data", "source", d.source, defaulted);
        if (d.source != "synthetic" && d.source != "csv") {
            throw ConfigError("data.source must be 'synthetic' or 'csv', got '" + d.source + "'");
        }
        d.csv_path = field_or<std::string>(data, "data", "csv_path", "", defaulted);
        if (d.source == "csv" && d.csv_path.empty()) {
            throw ConfigError("data.csv_path is required when data.source is 'csv'");
        }
        if (data.contains("schema")) {
            const json sc = data.at("schema");
            check_keys(sc, "data.schema", {"numeric", "categorical", "target"});
            d.schema.numeric_names =
                get_field<std::vector<std::string>>(sc, "data.schema", "numeric");
            d.schema.cat_names =
                get_field<std::vector<std::string>>(sc, "data.schema", "categorical");
            d.schema.target_name = get_field<std::string>(sc, "data.schema", "target");
            d.schema.validate();
            if (d.schema.numeric_names.size() != static_cast<std::size_t>(cfg.arch.num_numeric)) {
                throw ConfigError("data.schema lists " +
                                  std::to_string(d.schema.numeric_names.size()) +
                                  " numeric columns but arch.num_numeric = " +
                                  std::to_string(cfg.arch.num_numeric));
            }
        } else {
            d.schema = default_schema(cfg.arch.num_numeric);
            defaulted.push_back("data.schema = {num0..num" +
                                std::to_string(cfg.arch.num_numeric - 1) + ", cat1, cat2, target}");
        }
        d.synthetic_n =
            field_or<std::size_t>(data, "data", "synthetic_n", d.synthetic_n, defaulted);
        d.noise_sigma = field_or<double>(data, "data", "noise_sigma", d.noise_sigma, defaulted);
        if (d.noise_sigma < 0.0) throw ConfigError("data.noise_sigma must be >= 0");
        d.num_users = field_or<int>(data, "data", "num_users", d.num_users, defaulted);
        if (d.num_users < 1) throw ConfigError("data.num_users must be >= 1");
        d.per_user = field_or<std::size_t>(data, "data", "per_user", d.per_user, defaulted);
        if (d.per_user < 1) throw ConfigError("data.per_user must be >= 1");
        d.batch_size = field_or<std::size_t>(data, "data", "batch_size", d.batch_size, defaulted);
        if (d.batch_size < 1) throw ConfigError("data.batch_size must be >= 1");
        cfg.data = d;
    }

    // profiles
    {
        if (!root.contains("profiles")) throw ConfigError("config: 'profiles' section is required");
        const json profs = root.at("profiles");
        if (!profs.is_array()) throw ConfigError("profiles must be an array");
        int next_id = 0;
        for (const auto& entry : profs) {
            const std::string path = "profiles[" + std::to_string(next_id) + "]";
            check_keys(entry, path,
                       {"user_id", "cpu_rate", "data_quality", "uplink_rate", "d2d_rate",
                        "link_latency"});
            UserProfile p;
            p.user_id = field_or<int>(entry, path, "user_id", next_id, defaulted);
            p.cpu_rate = field_or<double>(entry, path, "cpu_rate", p.cpu_rate, defaulted);
            p.data_quality = field_or<double>(entry, path, "data_quality", p.data_quality, defaulted);
            p.uplink_rate = field_or<double>(entry, path, "uplink_rate", p.uplink_rate, defaulted);
            p.d2d_rate = field_or<double>(entry, path, "d2d_rate", p.d2d_rate, defaulted);
            p.link_latency = field_or<double>(entry, path, "link_latency", p.link_latency, defaulted);
            p.validate();
            cfg.profiles.push_back(p);
            ++next_id;
        }
        if (cfg.profiles.size() != static_cast<std::size_t>(cfg.data.num_users)) {
            throw ConfigError("data.num_users = " + std::to_string(cfg.data.num_users) +
                              " but profiles lists " + std::to_string(cfg.profiles.size()) +
                              " entries");
        }
        std::vector<int> ids;
        for (const auto& p : cfg.profiles) ids.push_back(p.user_id);
        std::sort(ids.begin(), ids.end());
        for (int i = 0; i < cfg.data.num_users; ++i) {
            if (ids[static_cast<std::size_t>(i)] != i) {
                throw ConfigError("profiles: user_id values must be exactly 0.." +
                                  std::to_string(cfg.data.num_users - 1));
            }
        }
        std::sort(cfg.profiles.begin(), cfg.profiles.end(),
                  [](const UserProfile& a, const UserProfile& b) { return a.user_id < b.user_id; });
    }

    // protocols
    {
        std::vector<std::string> names = {"psl", "sfl", "csfl-g"};
        if (root.contains("protocols")) {
            names = get_field<std::vector<std::string>>(root, "", "protocols");
        } else {
            defaulted.push_back("protocols = [\"psl\",\"sfl\",\"csfl-g\"]");
        }
        if (names.empty()) throw ConfigError("protocols list must not be empty");
        for (const auto& name : names) cfg.protocols.push_back(protocol_from_name(name));
    }

    // training
    {
        const json training = root.contains("training") ? root.at("training") : json::object();
        if (!root.contains("training")) defaulted.push_back("training = {built-in defaults}");
        check_keys(training, "training", {"epochs", "lr"});
        cfg.training.epochs =
            field_or<int>(training, "training", "epochs", cfg.training.epochs, defaulted);
        if (cfg.training.epochs < 0) throw ConfigError("training.epochs must be >= 0");
        cfg.training.lr = field_or<double>(training, "training", "lr", cfg.training.lr, defaulted);
        if (cfg.training.lr <= 0.0) throw ConfigError("training.lr must be > 0");
    }

    // crom
    {
        const json crom = root.contains("crom") ? root.at("crom") : json::object();
        if (!root.contains("crom")) defaulted.push_back("crom = {built-in defaults}");
        check_keys(crom, "crom",
                   {"alpha", "beta", "gamma", "rematch_round", "helper_budget", "ship_weights",
                    "d2d_timeout", "distance_mode"});
        CromOptions c;
        c.weights.alpha = field_or<double>(crom, "crom", "alpha", c.weights.alpha, defaulted);
        c.weights.beta = field_or<double>(crom, "crom", "beta", c.weights.beta, defaulted);
        c.weights.gamma = field_or<double>(crom, "crom", "gamma", c.weights.gamma, defaulted);
        c.rematch_round = field_or<int>(crom, "crom", "rematch_round", c.rematch_round, defaulted);
        c.helper_budget = field_or<double>(crom, "crom", "helper_budget", c.helper_budget, defaulted);
        c.ship_weights = field_or<bool>(crom, "crom", "ship_weights", c.ship_weights, defaulted);
        c.d2d_timeout = field_or<double>(crom, "crom", "d2d_timeout", c.d2d_timeout, defaulted);
        const std::string mode = field_or<std::string>(crom, "crom", "distance_mode",
                                                       "norm_of_difference", defaulted);
        if (mode == "norm_of_difference") {
            c.distance_mode = GradientDistanceMode::kNormOfDifference;
        } else if (mode == "difference_of_norms") {
            c.distance_mode = GradientDistanceMode::kDifferenceOfNorms;
        } else {
            throw ConfigError("crom.distance_mode must be 'norm_of_difference' or "
                              "'difference_of_norms'");
        }
        c.validate();
        cfg.crom = c;
    }

    // system
    {
        const json system = root.contains("system") ? root.at("system") : json::object();
        if (!root.contains("system")) defaulted.push_back("system = {built-in defaults}");
        check_keys(system, "system",
                   {"aggregation_latency", "bytes_per_element", "server_cpu_rate",
                    "rate_jitter_sigma"});
        SystemConfig sys;
        sys.aggregation_latency = field_or<double>(system, "system", "aggregation_latency",
                                                   sys.aggregation_latency, defaulted);
        if (sys.aggregation_latency < 0.0) {
            throw ConfigError("system.aggregation_latency must be >= 0");
        }
        sys.bytes_per_element =
            field_or<double>(system, "system", "bytes_per_element", sys.bytes_per_element, defaulted);
        if (sys.bytes_per_element < 1.0) throw ConfigError("system.bytes_per_element must be >= 1");
        sys.server_cpu_rate =
            field_or<double>(system, "system", "server_cpu_rate", sys.server_cpu_rate, defaulted);
        if (sys.server_cpu_rate <= 0.0) throw ConfigError("system.server_cpu_rate must be > 0");
        sys.rate_jitter_sigma = field_or<double>(system, "system", "rate_jitter_sigma",
                                                 sys.rate_jitter_sigma, defaulted);
        if (sys.rate_jitter_sigma < 0.0) throw ConfigError("system.rate_jitter_sigma must be >= 0");
        cfg.system = sys;
    }

    // output
    {
        const json output = root.contains("output") ? root.at("output") : json::object();
        if (!root.contains("output")) defaulted.push_back("output = {built-in defaults}");
        check_keys(output, "output", {"dir"});
        cfg.output.dir = field_or<std::string>(output, "output", "dir", cfg.output.dir, defaulted);
    }

    // Cross-checks that need several sections at once.
    if (cfg.data.source == "synthetic") {
        const std::size_t need =
            static_cast<std::size_t>(cfg.data.num_users) * cfg.data.per_user;
        if (cfg.effective_synthetic_n() < need) {
            throw ConfigError("data.synthetic_n = " + std::to_string(cfg.effective_synthetic_n()) +
                              " is less than num_users * per_user = " + std::to_string(need));
        }
    }
    return cfg;
}

inline ExperimentConfig validate_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return validate_config_json(root);
}

}  // namespace csfl
