// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "csfl/config.hpp"
#include "csfl/crom.hpp"
#include "csfl/data.hpp"
#include "csfl/errors.hpp"
#include "csfl/sim.hpp"

namespace csfl {

struct RoundRecord {
    RoundTrace trace;
    std::optional<MatchPlan> plan;              // CSFL rounds only
    std::vector<PartitionDecision> partitions;  // CSFL rounds only
};

struct ProtocolRun {
    Protocol protocol = Protocol::kPsl;
    std::vector<RoundRecord> rounds;
};

struct ExperimentResult {
    MetricsReport report;
    std::vector<ProtocolRun> runs;
};

// Materializes the configured dataset: a seeded synthetic table or a CSV.
inline Dataset build_dataset(const ExperimentConfig& cfg) {
    if (cfg.data.source == "csv") {
        Dataset d = load_csv(cfg.data.csv_path, cfg.data.schema);
        if (d.cat1_labels.size() > static_cast<std::size_t>(cfg.arch.vocab1)) {
            throw ConfigError(cfg.data.csv_path + ": column '" + cfg.data.schema.cat_names[0] +
                              "' has " + std::to_string(d.cat1_labels.size()) +
                              " distinct values, arch.vocab1 = " + std::to_string(cfg.arch.vocab1));
        }
        if (d.cat2_labels.size() > static_cast<std::size_t>(cfg.arch.vocab2)) {
            throw ConfigError(cfg.data.csv_path + ": column '" + cfg.data.schema.cat_names[1] +
                              "' has " + std::to_string(d.cat2_labels.size()) +
                              " distinct values, arch.vocab2 = " + std::to_string(cfg.arch.vocab2));
        }
        return d;
    }
    SyntheticSpec spec;
    spec.n = cfg.effective_synthetic_n();
    spec.num_numeric = cfg.arch.num_numeric;
    spec.vocab1 = cfg.arch.vocab1;
    spec.vocab2 = cfg.arch.vocab2;
    spec.noise_sigma = cfg.data.noise_sigma;
    Dataset d = generate_synthetic(cfg.seed, spec);
    d.schema = cfg.data.schema;
    return d;
}

namespace detail {

inline RoundContext make_round_context(const ExperimentConfig& cfg, const Dataset& data) {
    RoundContext ctx;
    ctx.data = &data;
    ctx.cost.arch = cfg.arch;
    ctx.cost.bytes_per_element = cfg.system.bytes_per_element;
    ctx.cost.aggregation_latency = cfg.system.aggregation_latency;
    ctx.cost.validate();
    ctx.sim.server_cpu_rate = cfg.system.server_cpu_rate;
    ctx.sim.rate_jitter_sigma = cfg.system.rate_jitter_sigma;
    ctx.sim.validate();
    ctx.crom = cfg.crom;
    ctx.lr = cfg.training.lr;
    ctx.batch_size = cfg.data.batch_size;
    return ctx;
}

inline SystemState make_initial_state(const ExperimentConfig& cfg,
                                      const std::vector<Shard>& shards,
                                      const SplitModelParams& init) {
    SystemState state;
    state.arch = cfg.arch;
    state.client_params.assign(static_cast<std::size_t>(cfg.data.num_users), init);
    state.server_params = init;
    state.profiles = cfg.profiles;
    state.shards = shards;
    state.round_index = 1;
    state.rng = Rng(cfg.seed).derive(0x6a697474);  // jitter stream
    return state;
}

}  // namespace detail

// Runs every configured protocol from one shared seeded setup (same data,
// shards, initial weights, device profiles) and reports per-epoch metrics.
// Fully deterministic for a fixed config.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const Dataset* external_data = nullptr) {
    Dataset owned;
    const Dataset* data = external_data;
    if (data == nullptr) {
        owned = build_dataset(cfg);
        data = &owned;
    }

    std::vector<double> quality;
    for (const auto& p : cfg.profiles) quality.push_back(p.data_quality);
    const std::vector<Shard> shards =
        partition(*data, cfg.data.num_users, cfg.data.per_user, cfg.seed, quality);

    // Rows not assigned to any shard form the held-out evaluation split; if
    // the shards consume the whole table, evaluation falls back to it.
    std::vector<bool> assigned(data->size(), false);
    for (const auto& shard : shards) {
        for (std::size_t idx : shard.indices) assigned[idx] = true;
    }
    std::vector<std::size_t> eval_indices;
    for (std::size_t i = 0; i < assigned.size(); ++i) {
        if (!assigned[i]) eval_indices.push_back(i);
    }
    if (eval_indices.empty()) {
        eval_indices.resize(data->size());
        for (std::size_t i = 0; i < eval_indices.size(); ++i) eval_indices[i] = i;
    }

    const SplitModelParams init = init_params(cfg.arch, cfg.seed);
    RoundContext ctx = detail::make_round_context(cfg, *data);
    const std::size_t batches_per_epoch = rounds_per_epoch(cfg.data.per_user, cfg.data.batch_size);

    ExperimentResult result;
    for (Protocol protocol : cfg.protocols) {
        SystemState state = detail::make_initial_state(cfg, shards, init);
        ProtocolRun run;
        run.protocol = protocol;

        for (int epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
            double epoch_sync = 0.0;
            std::size_t epoch_samples = 0;
            double mae_weighted = 0.0;
            int aggregations = 0;

            for (std::size_t b = 0; b < batches_per_epoch; ++b) {
                ctx.batch_index = static_cast<int>(b);
                RoundRecord record;
                RoundTrace trace;
                switch (protocol) {
                    case Protocol::kPsl:
                        trace = run_round_psl(state, ctx);
                        break;
                    case Protocol::kSfl:
                        trace = run_round_sfl(state, ctx);
                        break;
                    case Protocol::kCsflG:
                        plan_csfl_round(state, ctx);
                        record.plan = state.plan;
                        record.partitions = state.partitions;
                        trace = run_round_csfl(state, ctx);
                        break;
                }
                trace.epoch = epoch;
                epoch_sync += trace.sync_delay;
                epoch_samples += trace.samples_processed;
                mae_weighted += trace.train_mae * static_cast<double>(trace.samples_processed);
                if (trace.aggregated) ++aggregations;
                record.trace = std::move(trace);
                run.rounds.push_back(std::move(record));
            }

            // PSL keeps per-user client models; the reported figure is the
            // mean of their individual scores. After aggregation the copies
            // coincide, so the mean equals any single model's score.
            double eval_sum = 0.0;
            for (const auto& client : state.client_params) {
                eval_sum += evaluate(client, state.server_params, *data, eval_indices);
            }
            MetricsRow row;
            row.protocol = protocol_name(protocol);
            row.epoch = epoch;
            row.train_mae = mae_weighted / static_cast<double>(epoch_samples);
            row.eval_mae = eval_sum / static_cast<double>(cfg.data.num_users);
            row.throughput = static_cast<double>(epoch_samples) / epoch_sync;
            row.sync_delay = epoch_sync;
            row.aggregations = aggregations;
            result.report.rows.push_back(std::move(row));
        }
        result.runs.push_back(std::move(run));
    }
    return result;
}

}  // namespace csfl
