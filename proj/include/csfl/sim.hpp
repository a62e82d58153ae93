// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "csfl/crom.hpp"
#include "csfl/data.hpp"
#include "csfl/errors.hpp"
#include "csfl/model.hpp"
#include "csfl/rng.hpp"
#include "csfl/system_model.hpp"

namespace csfl {

struct SimOptions {
    double server_cpu_rate = 1e11;
    // Optional per-round multiplicative jitter on cpu/uplink/d2d rates, drawn
    // from the state's recorded stream. Zero keeps the baseline fully static.
    double rate_jitter_sigma = 0.0;

    void validate() const {
        if (server_cpu_rate <= 0.0) throw ConfigError("system: server_cpu_rate must be > 0");
        if (rate_jitter_sigma < 0.0) throw ConfigError("system: rate_jitter_sigma must be >= 0");
    }
};

struct CromOptions {
    MatchWeights weights;
    int rematch_round = 5;       // first round that matches on gradient distance
    double helper_budget = 2.0;  // relay compute allowed per unit of own stage-1 compute
    bool ship_weights = false;   // relay on the bottleneck's weights, costed as extra bytes
    double d2d_timeout = 30.0;   // seconds; slower handoffs demote the pair for the round
    GradientDistanceMode distance_mode = GradientDistanceMode::kNormOfDifference;

    void validate() const {
        if (weights.alpha < 0 || weights.beta < 0 || weights.gamma < 0) {
            throw ConfigError("crom: match weights must be >= 0");
        }
        if (weights.alpha + weights.beta + weights.gamma <= 0.0) {
            throw ConfigError("crom: match weights must not all be zero");
        }
        if (rematch_round < 1) throw ConfigError("crom: rematch_round must be >= 1");
        if (helper_budget <= 0.0) throw ConfigError("crom: helper_budget must be > 0");
        if (d2d_timeout <= 0.0) throw ConfigError("crom: d2d_timeout must be > 0");
    }
};

// Simulated-time events for one user within one round, relative to the round
// start. Events that did not occur for the user stay empty.
struct UserEvents {
    std::optional<double> stage1_start;
    std::optional<double> stage1_end;
    std::optional<double> handoff_send;
    std::optional<double> relay_start;
    std::optional<double> relay_end;
    std::optional<double> smashed_upload;
    std::optional<double> server_compute;
    std::optional<double> grad_return;
    std::optional<double> client_backward_end;
    double completion = 0.0;

    friend bool operator==(const UserEvents&, const UserEvents&) = default;
};

struct RoundTrace {
    int round_index = 0;
    int epoch = 0;
    std::map<int, UserEvents> events;
    double sync_delay = 0.0;  // slowest completion, plus aggregation latency when it applies
    std::size_t samples_processed = 0;
    double train_mae = 0.0;  // batch-size weighted across the round's batches
    std::vector<int> timeout_demoted;
    bool aggregated = false;

    friend bool operator==(const RoundTrace&, const RoundTrace&) = default;
};

struct SystemState {
    ArchSpec arch;
    std::vector<SplitModelParams> client_params;  // indexed by user id
    SplitModelParams server_params;
    std::vector<UserProfile> profiles;  // indexed by user id
    std::vector<Shard> shards;          // indexed by user id
    int round_index = 1;                // global, 1-based
    Rng rng{0};
    std::optional<MatchPlan> plan;              // CSFL only
    std::vector<PartitionDecision> partitions;  // CSFL only
    // Flattened client-side gradients each user applied to its own copy last
    // round; the re-matching signature.
    std::map<int, std::vector<double>> last_client_grads;

    int num_users() const { return static_cast<int>(profiles.size()); }
};

// Simulation outcome minus the planning metadata. The match plan records how
// a round was scheduled, not what it computed, so degeneracy comparisons
// (CSFL with no bottlenecks vs plain SFL) use this.
inline bool core_state_equal(const SystemState& a, const SystemState& b) {
    return a.arch == b.arch && a.client_params == b.client_params &&
           a.server_params == b.server_params && a.profiles == b.profiles &&
           a.shards == b.shards && a.round_index == b.round_index && a.rng == b.rng &&
           a.last_client_grads == b.last_client_grads;
}

// Everything a round needs besides the mutable state.
struct RoundContext {
    const Dataset* data = nullptr;
    CostModel cost;
    SimOptions sim;
    CromOptions crom;
    double lr = 0.05;
    std::size_t batch_size = 32;
    int batch_index = 0;  // which slice of every user's shard this round consumes
};

// Test observer: captures the smashed data that actually reached the server.
struct RoundDebug {
    std::map<int, Matrix> uploaded_smashed;  // by batch owner
};

inline std::vector<std::size_t> shard_slice(const Shard& shard, std::size_t batch_size,
                                            int batch_index) {
    const std::size_t begin = static_cast<std::size_t>(batch_index) * batch_size;
    if (begin >= shard.indices.size()) return {};
    const std::size_t end = std::min(begin + batch_size, shard.indices.size());
    return {shard.indices.begin() + static_cast<std::ptrdiff_t>(begin),
            shard.indices.begin() + static_cast<std::ptrdiff_t>(end)};
}

inline std::size_t rounds_per_epoch(std::size_t per_user, std::size_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    return (per_user + batch_size - 1) / batch_size;
}

// Elementwise weighted average over congruent parameter sets.
inline SplitModelParams fedavg(const std::vector<SplitModelParams>& sets,
                               const std::vector<double>& weights) {
    if (sets.empty()) throw ContractError("fedavg: no parameter sets");
    if (weights.size() != sets.size()) throw ContractError("fedavg: weight count mismatch");
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ConfigError("fedavg: weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw ConfigError("fedavg: weights must not sum to zero");
    for (const auto& set : sets) {
        if (!(set.arch == sets[0].arch)) {
            throw ContractError("fedavg: parameter sets differ in shape");
        }
    }

    // Baseline-plus-deviations form: identical inputs (and zero-weight
    // stragglers) average to the baseline bit-exactly.
    SplitModelParams out = sets[0];
    auto blend = [&](std::vector<double>& dst, auto view) {
        for (std::size_t i = 0; i < dst.size(); ++i) {
            double delta = 0.0;
            for (std::size_t k = 1; k < sets.size(); ++k) {
                delta += weights[k] / total * (view(sets[k])[i] - dst[i]);
            }
            dst[i] += delta;
        }
    };
    blend(out.encoder.wide_weights.data,
          [](const SplitModelParams& p) -> const std::vector<double>& { return p.encoder.wide_weights.data; });
    blend(out.encoder.wide_bias,
          [](const SplitModelParams& p) -> const std::vector<double>& { return p.encoder.wide_bias; });
    blend(out.encoder.embed_table1.data,
          [](const SplitModelParams& p) -> const std::vector<double>& { return p.encoder.embed_table1.data; });
    blend(out.encoder.embed_table2.data,
          [](const SplitModelParams& p) -> const std::vector<double>& { return p.encoder.embed_table2.data; });
    for (std::size_t d = 0; d < out.dense.size(); ++d) {
        blend(out.dense[d].weights.data,
              [d](const SplitModelParams& p) -> const std::vector<double>& { return p.dense[d].weights.data; });
        blend(out.dense[d].bias,
              [d](const SplitModelParams& p) -> const std::vector<double>& { return p.dense[d].bias; });
    }
    return out;
}

// Full forward through a client copy and the server stack; returns MAE.
inline double evaluate(const SplitModelParams& client, const SplitModelParams& server,
                       const Dataset& dataset, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("evaluate: empty dataset");
    const int s = client.arch.split_layer_index;
    const int n = client.arch.total_layers();
    auto [batch, target] = make_batch(dataset, indices);
    const Activation smashed = forward_range(client, 1, s, batch);
    const Activation pred = forward_range(server, s + 1, n, smashed);
    return mae(pred.values, target);
}

inline double evaluate(const SplitModelParams& client, const SplitModelParams& server,
                       const Dataset& dataset) {
    std::vector<std::size_t> all(dataset.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return evaluate(client, server, dataset, all);
}

// Samples per simulated second over a span of rounds.
inline double throughput(const std::vector<RoundTrace>& traces) {
    double samples = 0.0;
    double wall = 0.0;
    for (const auto& t : traces) {
        samples += static_cast<double>(t.samples_processed);
        wall += t.sync_delay;
    }
    if (wall <= 0.0) throw ContractError("throughput: zero simulated wall time");
    return samples / wall;
}

// Builds the round's MatchPlan and PartitionDecisions and stores them on the
// state. Initial profile-based scores run until crom.rematch_round; from then
// on pairs form on gradient distance.
inline void plan_csfl_round(SystemState& state, const RoundContext& ctx) {
    const Classification classes = classify_users(state.profiles, state.arch, ctx.batch_size);
    const Matrix initial = initial_score_matrix(state.profiles, classes.efficient,
                                                classes.bottleneck, ctx.crom.weights);
    MatchPlan plan;
    if (state.round_index >= ctx.crom.rematch_round) {
        plan = gradient_rematch(classes, state.last_client_grads, initial, ctx.crom.distance_mode,
                                state.round_index);
    } else {
        plan = greedy_match(classes.efficient, classes.bottleneck, initial, state.round_index);
    }

    std::vector<PartitionDecision> partitions;
    for (const auto& pair : plan.pairs) {
        partitions.push_back(determine_partition_point(
            state.profiles[static_cast<std::size_t>(pair.helper)],
            state.profiles[static_cast<std::size_t>(pair.bottleneck)], state.arch, ctx.batch_size,
            ctx.cost.bytes_per_element));
    }
    apply_helper_budget(plan, partitions, state.profiles, state.arch, ctx.batch_size,
                        ctx.crom.helper_budget);
    state.plan = std::move(plan);
    state.partitions = std::move(partitions);
}

namespace detail {

struct BatchJob {
    int owner = 0;        // whose samples these are
    int uplink_user = 0;  // device whose uplink carried them and receives the gradient
    bool relayed = false;
    double arrival = 0.0;
    Matrix smashed;  // activation at the split layer
    const Matrix* target = nullptr;
    std::size_t batch = 0;
    double server_end = 0.0;
    Matrix grad_at_split;
    double batch_mae = 0.0;
    std::size_t order = 0;  // position in the server's processing sequence
};

inline double server_batch_seconds(const ArchSpec& arch, std::size_t batch,
                                   double server_cpu_rate) {
    return range_flops(arch, arch.split_layer_index + 1, arch.total_layers(), batch) *
           (1.0 + kBackwardCostRatio) / server_cpu_rate;
}

// One synchronized round: every user consumes one minibatch, pairs relay
// through their helper, and the round optionally ends in federated averaging
// of the client copies.
inline RoundTrace execute_round(SystemState& state, const RoundContext& ctx, bool with_pairs,
                                bool aggregate, RoundDebug* debug) {
    if (ctx.data == nullptr) throw ContractError("round: no dataset bound");
    const int num_users = state.num_users();
    if (num_users == 0) throw ContractError("round: no users");
    if (state.client_params.size() != static_cast<std::size_t>(num_users) ||
        state.shards.size() != static_cast<std::size_t>(num_users)) {
        throw ContractError("round: state arrays disagree on user count");
    }
    const ArchSpec& arch = state.arch;
    const int s = arch.split_layer_index;
    const int n = arch.total_layers();

    RoundTrace trace;
    trace.round_index = state.round_index;

    // Effective per-round profiles; jitter draws advance the recorded stream.
    std::vector<UserProfile> profiles = state.profiles;
    if (ctx.sim.rate_jitter_sigma > 0.0) {
        for (auto& p : profiles) {
            p.cpu_rate *= std::exp(ctx.sim.rate_jitter_sigma * state.rng.normal());
            p.uplink_rate *= std::exp(ctx.sim.rate_jitter_sigma * state.rng.normal());
            p.d2d_rate *= std::exp(ctx.sim.rate_jitter_sigma * state.rng.normal());
        }
    }

    // Batches for this round.
    std::vector<RawBatch> raw(static_cast<std::size_t>(num_users));
    std::vector<Matrix> targets(static_cast<std::size_t>(num_users));
    for (int u = 0; u < num_users; ++u) {
        const std::size_t uu = static_cast<std::size_t>(u);
        const std::vector<std::size_t> idx =
            shard_slice(state.shards[uu], ctx.batch_size, ctx.batch_index);
        if (idx.empty()) throw ContractError("round: batch_index past the end of a shard");
        auto [rb, tg] = make_batch(*ctx.data, idx);
        raw[uu] = std::move(rb);
        targets[uu] = std::move(tg);
        trace.samples_processed += targets[uu].rows;
    }

    // Resolve the round's active pairs. A partition at the split layer means
    // the bottleneck finishes alone; a handoff slower than the D2D timeout
    // demotes the pair for this round.
    struct ActivePair {
        MatchPair pair;
        PartitionDecision part;
        double handoff_bytes = 0.0;
    };
    std::vector<ActivePair> pairs;
    std::vector<bool> is_paired(static_cast<std::size_t>(num_users), false);
    if (with_pairs) {
        if (!state.plan.has_value()) throw ContractError("csfl round requires a match plan");
        if (state.partitions.size() != state.plan->pairs.size()) {
            throw ContractError("csfl round: partitions do not match plan pairs");
        }
        for (std::size_t k = 0; k < state.plan->pairs.size(); ++k) {
            const MatchPair& pair = state.plan->pairs[k];
            const PartitionDecision& part = state.partitions[k];
            if (part.partition_point >= s) continue;
            const UserProfile& bp = profiles[static_cast<std::size_t>(pair.bottleneck)];
            const std::size_t batch = raw[static_cast<std::size_t>(pair.bottleneck)].batch();
            double handoff_bytes = ctx.cost.activation_bytes_at(part.partition_point, batch);
            if (ctx.crom.ship_weights) {
                handoff_bytes +=
                    static_cast<double>(param_count(arch, part.partition_point + 1, s)) *
                    ctx.cost.bytes_per_element;
            }
            if (transfer_time(handoff_bytes, bp.d2d_rate, bp.link_latency) > ctx.crom.d2d_timeout) {
                trace.timeout_demoted.push_back(pair.helper);
                trace.timeout_demoted.push_back(pair.bottleneck);
                continue;
            }
            pairs.push_back({pair, part, handoff_bytes});
            is_paired[static_cast<std::size_t>(pair.helper)] = true;
            is_paired[static_cast<std::size_t>(pair.bottleneck)] = true;
        }
        std::sort(trace.timeout_demoted.begin(), trace.timeout_demoted.end());
    }

    // Client parameters as of round start; all gradients this round are taken
    // against these.
    const std::vector<SplitModelParams> params_begin = state.client_params;

    std::vector<BatchJob> jobs;
    std::map<int, ForwardTrace> solo_trace;  // by user id

    struct PairWork {
        int helper = 0;
        int bottleneck = 0;
        int p = 1;
        ForwardTrace helper_trace;
        ForwardTrace relay_trace;
        ForwardTrace bottleneck_trace;
        double helper_stage1_time = 0.0;
        double relay_compute_time = 0.0;
        double relay_end = 0.0;
    };
    std::vector<PairWork> pair_work;

    // Stage 1, solo users: full client forward, then upload.
    for (int u = 0; u < num_users; ++u) {
        const std::size_t uu = static_cast<std::size_t>(u);
        if (is_paired[uu]) continue;
        const UserProfile& prof = profiles[uu];
        ForwardTrace fwd = forward_range_traced(params_begin[uu], 1, s, raw[uu]);
        const std::size_t batch = raw[uu].batch();
        const double stage1_end = compute_time(prof, arch, 1, s, batch);
        const double upload_done =
            stage1_end + transfer_time(ctx.cost.activation_bytes_at(s, batch), prof.uplink_rate,
                                       prof.link_latency);

        UserEvents& ev = trace.events[u];
        ev.stage1_start = 0.0;
        ev.stage1_end = stage1_end;
        ev.smashed_upload = upload_done;

        BatchJob job;
        job.owner = u;
        job.uplink_user = u;
        job.arrival = upload_done;
        job.smashed = fwd.output;
        job.target = &targets[uu];
        job.batch = batch;
        jobs.push_back(std::move(job));
        solo_trace.emplace(u, std::move(fwd));
    }

    // Stage 1 + relay for pairs. The bottleneck stops at its partition point
    // and ships the intermediate smashed data over D2D; the helper finishes
    // the client stack and uploads both smashed payloads together.
    for (const ActivePair& ap : pairs) {
        const int h = ap.pair.helper;
        const int b = ap.pair.bottleneck;
        const int p = ap.part.partition_point;
        const std::size_t hh = static_cast<std::size_t>(h);
        const std::size_t bb = static_cast<std::size_t>(b);
        const UserProfile& hp = profiles[hh];
        const UserProfile& bp = profiles[bb];
        const std::size_t batch_h = raw[hh].batch();
        const std::size_t batch_b = raw[bb].batch();

        PairWork work;
        work.helper = h;
        work.bottleneck = b;
        work.p = p;
        work.helper_trace = forward_range_traced(params_begin[hh], 1, s, raw[hh]);
        work.helper_stage1_time = compute_time(hp, arch, 1, s, batch_h);
        work.bottleneck_trace = forward_range_traced(params_begin[bb], 1, p, raw[bb]);
        const double bottleneck_stop = compute_time(bp, arch, 1, p, batch_b);

        const double d2d_arrival =
            bottleneck_stop + transfer_time(ap.handoff_bytes, bp.d2d_rate, bp.link_latency);
        const SplitModelParams& relay_params =
            ctx.crom.ship_weights ? params_begin[bb] : params_begin[hh];
        work.relay_trace = forward_range_traced(relay_params, p + 1, s,
                                                Activation{work.bottleneck_trace.output, p});
        work.relay_compute_time = compute_time(hp, arch, p + 1, s, batch_b);
        const double relay_start = std::max(work.helper_stage1_time, d2d_arrival);
        work.relay_end = relay_start + work.relay_compute_time;

        const double upload_bytes = ctx.cost.activation_bytes_at(s, batch_h) +
                                    ctx.cost.activation_bytes_at(s, batch_b);
        const double upload_done =
            work.relay_end + transfer_time(upload_bytes, hp.uplink_rate, hp.link_latency);

        UserEvents& ev_h = trace.events[h];
        ev_h.stage1_start = 0.0;
        ev_h.stage1_end = work.helper_stage1_time;
        ev_h.relay_start = relay_start;
        ev_h.relay_end = work.relay_end;
        ev_h.smashed_upload = upload_done;

        UserEvents& ev_b = trace.events[b];
        ev_b.stage1_start = 0.0;
        ev_b.stage1_end = bottleneck_stop;
        ev_b.handoff_send = bottleneck_stop;
        ev_b.smashed_upload = upload_done;

        BatchJob own;
        own.owner = h;
        own.uplink_user = h;
        own.arrival = upload_done;
        own.smashed = work.helper_trace.output;
        own.target = &targets[hh];
        own.batch = batch_h;
        jobs.push_back(std::move(own));

        BatchJob relayed;
        relayed.owner = b;
        relayed.uplink_user = h;
        relayed.relayed = true;
        relayed.arrival = upload_done;
        relayed.smashed = work.relay_trace.output;
        relayed.target = &targets[bb];
        relayed.batch = batch_b;
        jobs.push_back(std::move(relayed));

        pair_work.push_back(std::move(work));
    }

    // Server: each upload is processed on arrival (the server is not the
    // scarce resource), against the round-start server model. The server's
    // own update is deferred to the round barrier, so simultaneous uploads
    // see the same model and per-user timelines stay independent.
    std::sort(jobs.begin(), jobs.end(), [](const BatchJob& a, const BatchJob& c) {
        return a.arrival != c.arrival ? a.arrival < c.arrival : a.owner < c.owner;
    });
    const SplitModelParams server_begin = state.server_params;
    std::vector<GradientBundle> server_bundles;
    server_bundles.reserve(jobs.size());
    double mae_weighted = 0.0;
    std::map<int, std::size_t> job_of;  // batch owner -> index in jobs
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        BatchJob& job = jobs[j];
        job.order = j;
        job_of[job.owner] = j;
        try {
            ForwardTrace sv =
                forward_range_traced(server_begin, s + 1, n, Activation{job.smashed, s});
            auto [loss, grad] = mse_loss_and_grad(sv.output, *job.target);
            if (!std::isfinite(loss)) throw NumericError("training loss diverged");
            job.batch_mae = mae(sv.output, *job.target);
            GradientBundle bundle = backward_range(server_begin, s + 1, n, sv, grad);
            job.grad_at_split = std::move(bundle.input_gradient);
            server_bundles.push_back(std::move(bundle));
        } catch (const NumericError& e) {
            throw RoundError(job.owner, e.what());
        }
        job.server_end =
            job.arrival + server_batch_seconds(arch, job.batch, ctx.sim.server_cpu_rate);
        trace.events[job.owner].server_compute = job.server_end;
        mae_weighted += job.batch_mae * static_cast<double>(job.batch);
        if (debug != nullptr) debug->uploaded_smashed[job.owner] = job.smashed;
    }
    trace.train_mae = mae_weighted / static_cast<double>(trace.samples_processed);
    for (const GradientBundle& bundle : server_bundles) {
        state.server_params = sgd_step(state.server_params, bundle, ctx.lr);
    }

    // Fresh re-matching signatures for this round.
    std::map<int, std::vector<double>> signatures;
    const std::size_t client_flat = param_count(arch, 1, s);
    for (int u = 0; u < num_users; ++u) signatures[u].assign(client_flat, 0.0);

    // Gradient return and client backward, solo users.
    for (int u = 0; u < num_users; ++u) {
        const std::size_t uu = static_cast<std::size_t>(u);
        if (is_paired[uu]) continue;
        const UserProfile& prof = profiles[uu];
        const BatchJob& job = jobs[job_of.at(u)];
        const std::size_t batch = job.batch;
        const double grad_return =
            job.server_end + transfer_time(ctx.cost.activation_bytes_at(s, batch),
                                           prof.uplink_rate, prof.link_latency);
        GradientBundle bundle;
        try {
            bundle = backward_range(params_begin[uu], 1, s, solo_trace.at(u), job.grad_at_split);
        } catch (const NumericError& e) {
            throw RoundError(u, e.what());
        }
        state.client_params[uu] = sgd_step(params_begin[uu], bundle, ctx.lr);
        accumulate_flat_gradient(arch, 1, s, bundle, signatures[u]);

        UserEvents& ev = trace.events[u];
        ev.grad_return = grad_return;
        const double backward_end =
            grad_return + kBackwardCostRatio * compute_time(prof, arch, 1, s, batch);
        ev.client_backward_end = backward_end;
        ev.completion = backward_end;
    }

    // Gradient return and client backward, pairs. The helper backpropagates
    // its own batch and the relayed range on its device, serialized; the
    // bottleneck resumes once the partition-point gradient arrives over D2D.
    for (const PairWork& work : pair_work) {
        const int h = work.helper;
        const int b = work.bottleneck;
        const std::size_t hh = static_cast<std::size_t>(h);
        const std::size_t bb = static_cast<std::size_t>(b);
        const UserProfile& hp = profiles[hh];
        const UserProfile& bp = profiles[bb];
        const BatchJob& job_own = jobs[job_of.at(h)];
        const BatchJob& job_rel = jobs[job_of.at(b)];

        const double ret_own =
            job_own.server_end + transfer_time(ctx.cost.activation_bytes_at(s, job_own.batch),
                                               hp.uplink_rate, hp.link_latency);
        const double ret_rel =
            job_rel.server_end + transfer_time(ctx.cost.activation_bytes_at(s, job_rel.batch),
                                               hp.uplink_rate, hp.link_latency);

        GradientBundle own_bundle, relay_bundle, bottleneck_bundle;
        try {
            own_bundle = backward_range(params_begin[hh], 1, s, work.helper_trace,
                                        job_own.grad_at_split);
            const SplitModelParams& relay_params =
                ctx.crom.ship_weights ? params_begin[bb] : params_begin[hh];
            relay_bundle = backward_range(relay_params, work.p + 1, s, work.relay_trace,
                                          job_rel.grad_at_split);
            bottleneck_bundle = backward_range(params_begin[bb], 1, work.p,
                                               work.bottleneck_trace,
                                               relay_bundle.input_gradient);
        } catch (const NumericError& e) {
            throw RoundError(b, e.what());
        }

        // Parameter updates. In the default mode the relayed range accrues to
        // the helper's own copy, in server-processing order; in ship mode it
        // travels back to the bottleneck with the gradient return.
        if (ctx.crom.ship_weights) {
            state.client_params[hh] = sgd_step(params_begin[hh], own_bundle, ctx.lr);
            SplitModelParams updated = sgd_step(params_begin[bb], relay_bundle, ctx.lr);
            state.client_params[bb] = sgd_step(updated, bottleneck_bundle, ctx.lr);
            accumulate_flat_gradient(arch, 1, s, relay_bundle, signatures[b]);
        } else {
            if (job_own.order < job_rel.order) {
                SplitModelParams updated = sgd_step(params_begin[hh], own_bundle, ctx.lr);
                state.client_params[hh] = sgd_step(updated, relay_bundle, ctx.lr);
            } else {
                SplitModelParams updated = sgd_step(params_begin[hh], relay_bundle, ctx.lr);
                state.client_params[hh] = sgd_step(updated, own_bundle, ctx.lr);
            }
            state.client_params[bb] = sgd_step(params_begin[bb], bottleneck_bundle, ctx.lr);
            accumulate_flat_gradient(arch, 1, s, relay_bundle, signatures[h]);
        }
        accumulate_flat_gradient(arch, 1, s, own_bundle, signatures[h]);
        accumulate_flat_gradient(arch, 1, s, bottleneck_bundle, signatures[b]);

        // Helper device: serialize the two backward passes.
        struct Task {
            double ready;
            std::size_t order;
            double duration;
            bool own;
        };
        Task tasks[2] = {
            {ret_own, job_own.order, kBackwardCostRatio * work.helper_stage1_time, true},
            {ret_rel, job_rel.order, kBackwardCostRatio * work.relay_compute_time, false},
        };
        if (tasks[1].ready < tasks[0].ready ||
            (tasks[1].ready == tasks[0].ready && tasks[1].order < tasks[0].order)) {
            std::swap(tasks[0], tasks[1]);
        }
        double device_free = work.relay_end;
        double own_backward_end = 0.0;
        double relay_backward_end = 0.0;
        for (const Task& t : tasks) {
            const double start = std::max(t.ready, device_free);
            device_free = start + t.duration;
            (t.own ? own_backward_end : relay_backward_end) = device_free;
        }

        UserEvents& ev_h = trace.events[h];
        ev_h.grad_return = ret_own;
        ev_h.client_backward_end = own_backward_end;
        ev_h.completion = std::max(own_backward_end, relay_backward_end);

        // Partition-point gradient (plus relayed-layer weight gradients in
        // ship mode) travels helper -> bottleneck over the helper's D2D link.
        double back_bytes = ctx.cost.activation_bytes_at(work.p, job_rel.batch);
        if (ctx.crom.ship_weights) {
            back_bytes += static_cast<double>(param_count(arch, work.p + 1, s)) *
                          ctx.cost.bytes_per_element;
        }
        const double grad_arrival =
            relay_backward_end + transfer_time(back_bytes, hp.d2d_rate, hp.link_latency);
        const double bottleneck_backward_end =
            grad_arrival + kBackwardCostRatio * compute_time(bp, arch, 1, work.p, job_rel.batch);

        UserEvents& ev_b = trace.events[b];
        ev_b.grad_return = grad_arrival;
        ev_b.client_backward_end = bottleneck_backward_end;
        ev_b.completion = bottleneck_backward_end;
    }

    double slowest = 0.0;
    for (const auto& [user, ev] : trace.events) slowest = std::max(slowest, ev.completion);

    if (aggregate) {
        std::vector<double> weights;
        weights.reserve(state.shards.size());
        for (const auto& shard : state.shards) {
            weights.push_back(static_cast<double>(shard.indices.size()));
        }
        const SplitModelParams averaged = fedavg(state.client_params, weights);
        for (auto& cp : state.client_params) cp = averaged;
        trace.aggregated = true;
        trace.sync_delay = slowest + ctx.cost.aggregation_latency;
    } else {
        trace.sync_delay = slowest;
    }

    state.last_client_grads = std::move(signatures);
    state.round_index += 1;
    return trace;
}

}  // namespace detail

// Parallel split learning: independent client updates, no aggregation.
inline RoundTrace run_round_psl(SystemState& state, const RoundContext& ctx,
                                RoundDebug* debug = nullptr) {
    return detail::execute_round(state, ctx, /*with_pairs=*/false, /*aggregate=*/false, debug);
}

// Split federated learning: PSL plus federated averaging at the round barrier.
inline RoundTrace run_round_sfl(SystemState& state, const RoundContext& ctx,
                                RoundDebug* debug = nullptr) {
    return detail::execute_round(state, ctx, /*with_pairs=*/false, /*aggregate=*/true, debug);
}

// Collaborative SFL: matched helpers relay their bottleneck's unfinished
// client layers, then the round aggregates as in SFL. Requires state.plan.
inline RoundTrace run_round_csfl(SystemState& state, const RoundContext& ctx,
                                 RoundDebug* debug = nullptr) {
    return detail::execute_round(state, ctx, /*with_pairs=*/true, /*aggregate=*/true, debug);
}

struct MetricsRow {
    std::string protocol;
    int epoch = 0;
    double train_mae = 0.0;
    double eval_mae = 0.0;
    double throughput = 0.0;
    double sync_delay = 0.0;  // total simulated seconds for the epoch
    int aggregations = 0;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct MetricsReport {
    std::vector<MetricsRow> rows;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

}  // namespace csfl
