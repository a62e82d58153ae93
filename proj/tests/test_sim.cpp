// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "csfl/config.hpp"
#include "csfl/experiment.hpp"
#include "csfl/sim.hpp"
#include "test_support.hpp"

using namespace csfl;

namespace {

UserProfile make_profile(int id, double cpu) {
    UserProfile p;
    p.user_id = id;
    p.cpu_rate = cpu;
    p.data_quality = 1.0;
    p.uplink_rate = 1e7;
    p.d2d_rate = 2e7;
    p.link_latency = 0.002;
    return p;
}

// Self-contained simulation setup over a small synthetic dataset.
class Fixture {
public:
    Fixture(std::vector<UserProfile> profiles, std::uint64_t seed, std::size_t per_user = 16,
            std::size_t batch = 8)
        : batch_size_(batch) {
        SyntheticSpec spec;
        spec.n = profiles.size() * per_user + 24;
        spec.num_numeric = arch_.num_numeric;
        spec.vocab1 = arch_.vocab1;
        spec.vocab2 = arch_.vocab2;
        spec.noise_sigma = 0.1;
        data_ = generate_synthetic(seed, spec);

        state_.arch = arch_;
        state_.profiles = std::move(profiles);
        state_.shards = partition(data_, static_cast<int>(state_.profiles.size()), per_user, seed);
        const SplitModelParams init = init_params(arch_, seed);
        state_.client_params.assign(state_.profiles.size(), init);
        state_.server_params = init;
        state_.rng = Rng(seed).derive(0x6a697474);
    }

    RoundContext ctx() const {
        RoundContext c;
        c.data = &data_;
        c.cost.arch = arch_;
        c.cost.aggregation_latency = 0.01;
        c.sim.server_cpu_rate = 1e11;
        c.lr = 0.05;
        c.batch_size = batch_size_;
        c.batch_index = 0;
        return c;
    }

    const Dataset& data() const { return data_; }
    SystemState& state() { return state_; }

private:
    ArchSpec arch_;
    Dataset data_;
    SystemState state_;
    std::size_t batch_size_;
};

std::vector<UserProfile> heterogeneous_profiles() {
    return {make_profile(0, 8e6), make_profile(1, 8e6), make_profile(2, 8e6),
            make_profile(3, 2e6), make_profile(4, 2e6), make_profile(5, 2e6)};
}

std::vector<UserProfile> homogeneous_profiles(int n) {
    std::vector<UserProfile> out;
    for (int i = 0; i < n; ++i) out.push_back(make_profile(i, 4e6));
    return out;
}

// Independent end-to-end timeline for a solo user, rebuilt from the timing
// calculators.
struct SoloTimeline {
    double stage1_end, upload, server_end, grad_return, backward_end;
};

SoloTimeline recompute_solo(const UserProfile& p, const ArchSpec& arch, std::size_t batch,
                            double server_rate) {
    SoloTimeline t;
    const int s = arch.split_layer_index;
    t.stage1_end = compute_time(p, arch, 1, s, batch);
    t.upload = t.stage1_end +
               transfer_time(activation_bytes(arch, s, batch), p.uplink_rate, p.link_latency);
    const double server_seconds = range_flops(arch, s + 1, arch.total_layers(), batch) *
                                  (1.0 + kBackwardCostRatio) / server_rate;
    t.server_end = t.upload + server_seconds;
    t.grad_return = t.server_end +
                    transfer_time(activation_bytes(arch, s, batch), p.uplink_rate, p.link_latency);
    t.backward_end = t.grad_return + kBackwardCostRatio * compute_time(p, arch, 1, s, batch);
    return t;
}

}  // namespace

TEST_CASE("fedavg") {
    const ArchSpec arch;
    const SplitModelParams a = init_params(arch, 1);
    const SplitModelParams b = init_params(arch, 2);

    SUBCASE("identical sets average to themselves") {
        const SplitModelParams avg = fedavg({a, a, a}, {1.0, 1.0, 1.0});
        CHECK(avg == a);
    }
    SUBCASE("weights [1, 0] select the first set exactly") {
        const SplitModelParams avg = fedavg({a, b}, {1.0, 0.0});
        CHECK(avg == a);
    }
    SUBCASE("scalar check: params 1 and 3 average to 2") {
        SplitModelParams x = a, y = a;
        x.dense[0].weights(0, 0) = 1.0;
        y.dense[0].weights(0, 0) = 3.0;
        const SplitModelParams avg = fedavg({x, y}, {0.5, 0.5});
        CHECK(avg.dense[0].weights(0, 0) == doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("all-zero or negative weights are rejected") {
        CHECK_THROWS_AS(fedavg({a, b}, {0.0, 0.0}), ConfigError);
        CHECK_THROWS_AS(fedavg({a, b}, {1.0, -1.0}), ConfigError);
    }
    SUBCASE("shape mismatch is rejected") {
        ArchSpec other;
        other.client_hidden = {4};
        other.split_layer_index = 2;
        const SplitModelParams c = init_params(other, 3);
        CHECK_THROWS_AS(fedavg({a, c}, {1.0, 1.0}), ContractError);
    }
    SUBCASE("matches a brute-force elementwise oracle") {
        Rng rng(15);
        ArchSpec tiny;
        tiny.num_numeric = 2;
        tiny.vocab1 = 2;
        tiny.vocab2 = 2;
        tiny.wide_out = 2;
        tiny.embed_dim1 = 1;
        tiny.embed_dim2 = 1;
        tiny.client_hidden = {2};
        tiny.server_hidden = {};
        tiny.output_dim = 1;
        tiny.split_layer_index = 2;
        REQUIRE(param_count(tiny, 1, tiny.total_layers()) <= 50);
        std::vector<SplitModelParams> sets;
        std::vector<double> weights;
        for (int k = 0; k < 3; ++k) {
            sets.push_back(init_params(tiny, rng.next_u64()));
            weights.push_back(rng.uniform(0.1, 2.0));
        }
        const SplitModelParams avg = fedavg(sets, weights);
        const double total = weights[0] + weights[1] + weights[2];
        for (std::size_t i = 0; i < avg.dense[0].weights.data.size(); ++i) {
            double expect = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                expect += weights[k] / total * sets[k].dense[0].weights.data[i];
            }
            CHECK(avg.dense[0].weights.data[i] == doctest::Approx(expect).epsilon(1e-14));
        }
        for (std::size_t i = 0; i < avg.encoder.embed_table1.data.size(); ++i) {
            double expect = 0.0;
            for (std::size_t k = 0; k < 3; ++k) {
                expect += weights[k] / total * sets[k].encoder.embed_table1.data[i];
            }
            CHECK(avg.encoder.embed_table1.data[i] == doctest::Approx(expect).epsilon(1e-14));
        }
    }
}

TEST_CASE("psl round: single user timeline matches the hand-built chain") {
    Fixture f({make_profile(0, 4e6)}, 91);
    const RoundContext ctx = f.ctx();
    const RoundTrace trace = run_round_psl(f.state(), ctx);

    const SoloTimeline t = recompute_solo(f.state().profiles[0], f.state().arch, ctx.batch_size,
                                          ctx.sim.server_cpu_rate);
    const UserEvents& ev = trace.events.at(0);
    CHECK(*ev.stage1_end == doctest::Approx(t.stage1_end).epsilon(1e-12));
    CHECK(*ev.smashed_upload == doctest::Approx(t.upload).epsilon(1e-12));
    CHECK(*ev.server_compute == doctest::Approx(t.server_end).epsilon(1e-12));
    CHECK(*ev.grad_return == doctest::Approx(t.grad_return).epsilon(1e-12));
    CHECK(*ev.client_backward_end == doctest::Approx(t.backward_end).epsilon(1e-12));
    CHECK(trace.sync_delay == doctest::Approx(t.backward_end).epsilon(1e-12));
    CHECK_FALSE(trace.aggregated);
    CHECK(trace.samples_processed == ctx.batch_size);
}

TEST_CASE("psl round: identical users have identical event timings") {
    Fixture f(homogeneous_profiles(2), 7);
    const RoundTrace trace = run_round_psl(f.state(), f.ctx());
    CHECK(trace.events.at(0) == trace.events.at(1));
}

TEST_CASE("psl round: two heterogeneous users match hand-summed timelines") {
    Fixture f({make_profile(0, 8e6), make_profile(1, 2e6)}, 13);
    const RoundContext ctx = f.ctx();
    const ArchSpec arch = f.state().arch;
    const std::vector<UserProfile> profiles = f.state().profiles;
    const RoundTrace trace = run_round_psl(f.state(), ctx);
    for (int u = 0; u < 2; ++u) {
        const SoloTimeline t = recompute_solo(profiles[static_cast<std::size_t>(u)], arch,
                                              ctx.batch_size, ctx.sim.server_cpu_rate);
        const UserEvents& ev = trace.events.at(u);
        CHECK(*ev.stage1_end == doctest::Approx(t.stage1_end).epsilon(1e-12));
        CHECK(*ev.smashed_upload == doctest::Approx(t.upload).epsilon(1e-12));
        CHECK(*ev.server_compute == doctest::Approx(t.server_end).epsilon(1e-12));
        CHECK(*ev.grad_return == doctest::Approx(t.grad_return).epsilon(1e-12));
        CHECK(*ev.client_backward_end == doctest::Approx(t.backward_end).epsilon(1e-12));
    }
}

TEST_CASE("sfl round: aggregation of identical updates equals any single update") {
    Fixture sfl_f(homogeneous_profiles(2), 19);
    sfl_f.state().shards[1].indices = sfl_f.state().shards[0].indices;
    Fixture psl_f(homogeneous_profiles(2), 19);
    psl_f.state().shards[1].indices = psl_f.state().shards[0].indices;

    run_round_sfl(sfl_f.state(), sfl_f.ctx());
    run_round_psl(psl_f.state(), psl_f.ctx());

    // Identical inputs produce identical per-user updates, so averaging them
    // is the identity: SFL's aggregated copy equals the PSL per-user update.
    CHECK(sfl_f.state().client_params[0] == psl_f.state().client_params[0]);
    CHECK(sfl_f.state().client_params[1] == sfl_f.state().client_params[0]);
    CHECK(psl_f.state().client_params[0] == psl_f.state().client_params[1]);
}

TEST_CASE("sfl round: zero aggregation latency matches the psl sync delay") {
    Fixture a(heterogeneous_profiles(), 23);
    Fixture b(heterogeneous_profiles(), 23);
    RoundContext ctx_sfl = a.ctx();
    ctx_sfl.cost.aggregation_latency = 0.0;
    const RoundTrace sfl = run_round_sfl(a.state(), ctx_sfl);
    const RoundTrace psl = run_round_psl(b.state(), b.ctx());
    CHECK(sfl.sync_delay == doctest::Approx(psl.sync_delay).epsilon(1e-15));
}

TEST_CASE("sfl round: sync delay is the slowest completion plus aggregation latency") {
    Fixture f(heterogeneous_profiles(), 29);
    const RoundContext ctx = f.ctx();
    const ArchSpec arch = f.state().arch;
    const std::vector<UserProfile> profiles = f.state().profiles;
    const RoundTrace trace = run_round_sfl(f.state(), ctx);

    double slowest = 0.0;
    for (const auto& p : profiles) {
        slowest = std::max(
            slowest,
            recompute_solo(p, arch, ctx.batch_size, ctx.sim.server_cpu_rate).backward_end);
    }
    CHECK(trace.aggregated);
    CHECK(trace.sync_delay ==
          doctest::Approx(slowest + ctx.cost.aggregation_latency).epsilon(1e-12));
}

TEST_CASE("csfl degenerates to sfl bit-exactly when no bottlenecks exist") {
    Fixture csfl_f(homogeneous_profiles(4), 37);
    Fixture sfl_f(homogeneous_profiles(4), 37);
    RoundContext csfl_ctx = csfl_f.ctx();
    RoundContext sfl_ctx = sfl_f.ctx();

    for (int round = 0; round < 5; ++round) {
        csfl_ctx.batch_index = round % 2;
        sfl_ctx.batch_index = round % 2;
        plan_csfl_round(csfl_f.state(), csfl_ctx);
        CHECK(csfl_f.state().plan->pairs.empty());
        const RoundTrace t_csfl = run_round_csfl(csfl_f.state(), csfl_ctx);
        const RoundTrace t_sfl = run_round_sfl(sfl_f.state(), sfl_ctx);
        CHECK(t_csfl == t_sfl);
        CHECK(core_state_equal(csfl_f.state(), sfl_f.state()));
    }
}

TEST_CASE("csfl relayed smashed data equals the offline two-model composition") {
    Fixture f(heterogeneous_profiles(), 41);
    RoundContext ctx = f.ctx();
    plan_csfl_round(f.state(), ctx);
    REQUIRE_FALSE(f.state().plan->pairs.empty());
    const MatchPlan plan = *f.state().plan;
    const std::vector<PartitionDecision> partitions = f.state().partitions;
    const std::vector<SplitModelParams> before = f.state().client_params;
    const std::vector<Shard> shards = f.state().shards;

    RoundDebug debug;
    run_round_csfl(f.state(), ctx, &debug);

    const int s = f.state().arch.split_layer_index;
    for (std::size_t k = 0; k < plan.pairs.size(); ++k) {
        const MatchPair& pair = plan.pairs[k];
        const int p = partitions[k].partition_point;
        if (p >= s) continue;
        const auto idx = shard_slice(shards[static_cast<std::size_t>(pair.bottleneck)],
                                     ctx.batch_size, ctx.batch_index);
        const auto [raw, target] = make_batch(f.data(), idx);
        const Activation head =
            forward_range(before[static_cast<std::size_t>(pair.bottleneck)], 1, p, raw);
        const Activation composed =
            forward_range(before[static_cast<std::size_t>(pair.helper)], p + 1, s, head);
        REQUIRE(debug.uploaded_smashed.count(pair.bottleneck) == 1);
        CHECK(debug.uploaded_smashed.at(pair.bottleneck) == composed.values);
    }
}

TEST_CASE("csfl trace: stage-2 events respect the planned handoff and causality") {
    Fixture f(heterogeneous_profiles(), 43);
    RoundContext ctx = f.ctx();
    plan_csfl_round(f.state(), ctx);
    const MatchPlan plan = *f.state().plan;
    const std::vector<PartitionDecision> partitions = f.state().partitions;
    const RoundTrace trace = run_round_csfl(f.state(), ctx);

    for (const auto& [user, ev] : trace.events) {
        std::vector<double> order;
        auto push = [&order](const std::optional<double>& v) {
            if (v.has_value()) order.push_back(*v);
        };
        push(ev.stage1_start);
        push(ev.stage1_end);
        push(ev.handoff_send);
        push(ev.relay_start);
        push(ev.relay_end);
        push(ev.smashed_upload);
        push(ev.server_compute);
        push(ev.grad_return);
        push(ev.client_backward_end);
        for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] >= order[i - 1]);
        CHECK(ev.completion >= *ev.stage1_end);
    }
    for (std::size_t k = 0; k < plan.pairs.size(); ++k) {
        const UserEvents& helper_ev = trace.events.at(plan.pairs[k].helper);
        if (helper_ev.relay_start.has_value()) {
            CHECK(*helper_ev.relay_start >= partitions[k].handoff_time);
        }
    }
}

TEST_CASE("csfl beats sfl on sync delay under the heterogeneous reference layout") {
    Fixture csfl_f(heterogeneous_profiles(), 47);
    Fixture sfl_f(heterogeneous_profiles(), 47);
    RoundContext ctx = csfl_f.ctx();
    plan_csfl_round(csfl_f.state(), ctx);
    const RoundTrace t_csfl = run_round_csfl(csfl_f.state(), ctx);
    const RoundTrace t_sfl = run_round_sfl(sfl_f.state(), sfl_f.ctx());
    CHECK(t_csfl.sync_delay < t_sfl.sync_delay);
}

TEST_CASE("csfl d2d timeout demotes pairs to solo and the round matches sfl") {
    Fixture csfl_f(heterogeneous_profiles(), 53);
    Fixture sfl_f(heterogeneous_profiles(), 53);
    RoundContext ctx = csfl_f.ctx();
    ctx.crom.d2d_timeout = 1e-9;
    plan_csfl_round(csfl_f.state(), ctx);
    REQUIRE_FALSE(csfl_f.state().plan->pairs.empty());

    const RoundTrace t_csfl = run_round_csfl(csfl_f.state(), ctx);
    const RoundTrace t_sfl = run_round_sfl(sfl_f.state(), sfl_f.ctx());
    CHECK_FALSE(t_csfl.timeout_demoted.empty());
    CHECK(core_state_equal(csfl_f.state(), sfl_f.state()));
    CHECK(t_csfl.sync_delay == t_sfl.sync_delay);
    for (const auto& [user, ev] : t_csfl.events) {
        CHECK_FALSE(ev.relay_start.has_value());
        CHECK_FALSE(ev.handoff_send.has_value());
    }
}

TEST_CASE("csfl ship-weights mode reproduces sfl parameter math with relay timing") {
    Fixture csfl_f(heterogeneous_profiles(), 59);
    Fixture sfl_f(heterogeneous_profiles(), 59);
    RoundContext ctx = csfl_f.ctx();
    ctx.crom.ship_weights = true;
    plan_csfl_round(csfl_f.state(), ctx);
    REQUIRE_FALSE(csfl_f.state().plan->pairs.empty());

    const RoundTrace t_csfl = run_round_csfl(csfl_f.state(), ctx);
    const RoundTrace t_sfl = run_round_sfl(sfl_f.state(), sfl_f.ctx());

    // Relaying on the bottleneck's own weights makes every client gradient
    // identical to the plain SFL round; only the timeline changes.
    CHECK(csfl_f.state().client_params == sfl_f.state().client_params);
    bool any_relay = false;
    for (const auto& [user, ev] : t_csfl.events) any_relay |= ev.relay_start.has_value();
    CHECK(any_relay);
    CHECK(t_csfl.sync_delay != t_sfl.sync_delay);
}

TEST_CASE("evaluate: zeroed model predicts zero, so MAE is the mean absolute target") {
    Fixture f(homogeneous_profiles(2), 61);
    SplitModelParams zero = f.state().client_params[0];
    for (double& v : zero.encoder.wide_weights.data) v = 0.0;
    for (double& v : zero.encoder.wide_bias) v = 0.0;
    for (double& v : zero.encoder.embed_table1.data) v = 0.0;
    for (double& v : zero.encoder.embed_table2.data) v = 0.0;
    for (auto& d : zero.dense) {
        for (double& v : d.weights.data) v = 0.0;
        for (double& v : d.bias) v = 0.0;
    }
    const double got = evaluate(zero, zero, f.data());
    double expect = 0.0;
    for (double y : f.data().target) expect += std::fabs(y);
    expect /= static_cast<double>(f.data().size());
    CHECK(got == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("evaluate: a perfect predictor scores zero MAE") {
    // Make the model perfect by construction: relabel a noise-free dataset
    // with the model's own predictions.
    Fixture f(homogeneous_profiles(2), 63);
    const SplitModelParams& client = f.state().client_params[0];
    const SplitModelParams& server = f.state().server_params;
    Dataset relabeled = f.data();
    std::vector<std::size_t> all(relabeled.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto [raw, target] = make_batch(relabeled, all);
    const Activation smashed = forward_range(client, 1, client.arch.split_layer_index, raw);
    const Activation pred = forward_range(server, client.arch.split_layer_index + 1,
                                          client.arch.total_layers(), smashed);
    for (std::size_t i = 0; i < relabeled.size(); ++i) relabeled.target[i] = pred.values(i, 0);
    CHECK(evaluate(client, server, relabeled) == 0.0);
}

TEST_CASE("evaluate equals an independent prediction pass through mae") {
    Fixture f(homogeneous_profiles(2), 67);
    const SplitModelParams& client = f.state().client_params[0];
    const SplitModelParams& server = f.state().server_params;
    const double got = evaluate(client, server, f.data());

    std::vector<std::size_t> all(f.data().size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto [raw, target] = make_batch(f.data(), all);
    const Activation smashed = forward_range(client, 1, client.arch.split_layer_index, raw);
    const Activation pred = forward_range(server, client.arch.split_layer_index + 1,
                                          client.arch.total_layers(), smashed);
    CHECK(got == mae(pred.values, target));
}

TEST_CASE("throughput") {
    RoundTrace t;
    t.samples_processed = 1200;
    t.sync_delay = 10.0;
    CHECK(throughput({t}) == doctest::Approx(120.0).epsilon(1e-15));

    RoundTrace zero;
    zero.samples_processed = 100;
    zero.sync_delay = 0.0;
    CHECK_THROWS_AS(throughput({zero}), ContractError);

    // Faster devices raise throughput.
    Fixture slow_f(homogeneous_profiles(3), 71);
    auto fast_profiles = homogeneous_profiles(3);
    for (auto& p : fast_profiles) p.cpu_rate *= 2.0;
    Fixture fast_f(fast_profiles, 71);
    const RoundTrace t_slow = run_round_sfl(slow_f.state(), slow_f.ctx());
    const RoundTrace t_fast = run_round_sfl(fast_f.state(), fast_f.ctx());
    CHECK(throughput({t_fast}) > throughput({t_slow}));
}

TEST_CASE("diverging loss raises a round error carrying the user id") {
    Fixture f(homogeneous_profiles(2), 73);
    RoundContext ctx = f.ctx();
    ctx.lr = 1e18;  // guaranteed blow-up
    bool thrown = false;
    try {
        for (int i = 0; i < 50 && !thrown; ++i) {
            ctx.batch_index = i % 2;
            run_round_sfl(f.state(), ctx);
        }
    } catch (const RoundError& e) {
        thrown = true;
        CHECK(e.user_id >= 0);
        CHECK(e.user_id < 2);
    }
    CHECK(thrown);
}

TEST_CASE("jitter draws advance the recorded stream deterministically") {
    Fixture a(homogeneous_profiles(2), 79);
    Fixture b(homogeneous_profiles(2), 79);
    RoundContext ctx = a.ctx();
    ctx.sim.rate_jitter_sigma = 0.1;
    const Rng before = a.state().rng;
    const RoundTrace ta = run_round_sfl(a.state(), ctx);
    const RoundTrace tb = run_round_sfl(b.state(), ctx);
    CHECK(ta == tb);
    CHECK_FALSE(a.state().rng == before);

    // Without jitter the stream never moves.
    Fixture c(homogeneous_profiles(2), 79);
    const Rng untouched = c.state().rng;
    run_round_sfl(c.state(), c.ctx());
    CHECK(c.state().rng == untouched);
}

TEST_CASE("run_experiment: zero epochs give an empty report") {
    ExperimentConfig cfg;
    cfg.profiles = heterogeneous_profiles();
    cfg.data.num_users = 6;
    cfg.data.per_user = 16;
    cfg.data.batch_size = 8;
    cfg.data.schema = default_schema(cfg.arch.num_numeric);
    cfg.protocols = {Protocol::kPsl, Protocol::kSfl, Protocol::kCsflG};
    cfg.training.epochs = 0;
    const ExperimentResult result = run_experiment(cfg);
    CHECK(result.report.rows.empty());
}

TEST_CASE("run_experiment: deterministic, conserving, one row per protocol-epoch") {
    ExperimentConfig cfg;
    cfg.seed = 99;
    cfg.profiles = heterogeneous_profiles();
    cfg.data.num_users = 6;
    cfg.data.per_user = 20;
    cfg.data.batch_size = 8;
    cfg.data.schema = default_schema(cfg.arch.num_numeric);
    cfg.protocols = {Protocol::kPsl, Protocol::kSfl, Protocol::kCsflG};
    cfg.training.epochs = 3;
    cfg.training.lr = 0.02;
    cfg.crom.rematch_round = 2;

    const ExperimentResult a = run_experiment(cfg);
    const ExperimentResult b = run_experiment(cfg);
    CHECK(a.report == b.report);
    REQUIRE(a.runs.size() == b.runs.size());
    for (std::size_t r = 0; r < a.runs.size(); ++r) {
        REQUIRE(a.runs[r].rounds.size() == b.runs[r].rounds.size());
        for (std::size_t k = 0; k < a.runs[r].rounds.size(); ++k) {
            CHECK(a.runs[r].rounds[k].trace == b.runs[r].rounds[k].trace);
        }
    }

    CHECK(a.report.rows.size() == 9);  // 3 protocols x 3 epochs

    // Conservation: every protocol processes num_users * per_user samples per
    // epoch, solo or relayed alike.
    const std::size_t rpe = rounds_per_epoch(cfg.data.per_user, cfg.data.batch_size);
    for (const auto& run : a.runs) {
        REQUIRE(run.rounds.size() == rpe * 3);
        for (std::size_t epoch = 0; epoch < 3; ++epoch) {
            std::size_t samples = 0;
            for (std::size_t k = 0; k < rpe; ++k) {
                samples += run.rounds[epoch * rpe + k].trace.samples_processed;
            }
            CHECK(samples == 6 * 20);
        }
    }

    // CSFL runs carry plans with congruent partition lists, and gradient
    // re-matching takes over at the configured round: initial profile scores
    // are non-negative, negated gradient distances are non-positive.
    const ProtocolRun& csfl = a.runs[2];
    REQUIRE(csfl.protocol == Protocol::kCsflG);
    for (const auto& record : csfl.rounds) {
        REQUIRE(record.plan.has_value());
        CHECK(record.partitions.size() == record.plan->pairs.size());
        for (const auto& pair : record.plan->pairs) {
            CHECK_FALSE(pair.used_fallback);
            if (record.plan->round_index < cfg.crom.rematch_round) {
                CHECK(pair.score >= 0.0);
            } else {
                CHECK(pair.score <= 0.0);
            }
        }
    }
}

TEST_CASE("run_experiment conserves samples under forced csfl demotions") {
    ExperimentConfig cfg;
    cfg.seed = 101;
    cfg.profiles = heterogeneous_profiles();
    cfg.data.num_users = 6;
    cfg.data.per_user = 16;
    cfg.data.batch_size = 8;
    cfg.data.schema = default_schema(cfg.arch.num_numeric);
    cfg.protocols = {Protocol::kCsflG};
    cfg.training.epochs = 1;
    cfg.crom.d2d_timeout = 1e-9;  // force demotion every round
    const ExperimentResult result = run_experiment(cfg);
    std::size_t samples = 0;
    for (const auto& record : result.runs[0].rounds) {
        samples += record.trace.samples_processed;
        CHECK_FALSE(record.trace.timeout_demoted.empty());
    }
    CHECK(samples == 6 * 16);
}
