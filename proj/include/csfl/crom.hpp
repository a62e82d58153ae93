// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "csfl/errors.hpp"
#include "csfl/linalg.hpp"
#include "csfl/model.hpp"
#include "csfl/system_model.hpp"

namespace csfl {

struct MatchPair {
    int helper = 0;
    int bottleneck = 0;
    double score = 0.0;
    bool used_fallback = false;  // scored by initial profile score, not gradients

    friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

// One round's pairing. Every user appears at most once across pairs and solo;
// unmatched users train alone.
struct MatchPlan {
    std::vector<MatchPair> pairs;
    std::vector<int> solo;
    int round_index = 0;
    std::vector<int> budget_demoted;  // helpers pulled out by the relay-load guard

    friend bool operator==(const MatchPlan&, const MatchPlan&) = default;
};

struct PartitionDecision {
    int helper = 0;
    int bottleneck = 0;
    int partition_point = 1;        // p in [1, split_layer_index]
    double handoff_time = 0.0;      // planned compute-side handoff instant
    double intermediate_bytes = 0;  // payload of the intermediate smashed data

    friend bool operator==(const PartitionDecision&, const PartitionDecision&) = default;
};

struct Classification {
    std::vector<int> efficient;   // user ids, ascending
    std::vector<int> bottleneck;  // user ids, ascending
};

// Two-class split on estimated client-side forward time: at or below the
// median is efficient, above is bottleneck. Identical devices all land in the
// efficient class, which degenerates CSFL into plain SFL.
inline Classification classify_users(const std::vector<UserProfile>& profiles,
                                     const ArchSpec& arch, std::size_t batch) {
    if (profiles.empty()) throw ContractError("classify_users: no profiles");
    std::vector<double> times;
    times.reserve(profiles.size());
    for (const auto& p : profiles) {
        times.push_back(compute_time(p, arch, 1, arch.split_layer_index, batch));
    }
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median =
        n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

    Classification c;
    for (std::size_t i = 0; i < profiles.size(); ++i) {
        (times[i] <= median ? c.efficient : c.bottleneck).push_back(profiles[i].user_id);
    }
    std::sort(c.efficient.begin(), c.efficient.end());
    std::sort(c.bottleneck.begin(), c.bottleneck.end());
    return c;
}

struct MatchWeights {
    double alpha = 1.0 / 3.0;  // data quality
    double beta = 1.0 / 3.0;   // D2D rate between the pair
    double gamma = 1.0 / 3.0;  // helper CPU rate
};

// Score matrix over all (efficient x bottleneck) cross pairs:
//   alpha * min(dq_h, dq_b) + beta * mm(d2d between pair) + gamma * mm(cpu_h)
// where mm() is min-max normalization over the candidate set and the pair's
// D2D rate is the weaker of the two ends.
inline Matrix initial_score_matrix(const std::vector<UserProfile>& profiles,
                                   const std::vector<int>& efficient,
                                   const std::vector<int>& bottleneck,
                                   const MatchWeights& w = {}) {
    auto profile_of = [&](int id) -> const UserProfile& {
        for (const auto& p : profiles) {
            if (p.user_id == id) return p;
        }
        throw ContractError("initial_score_matrix: unknown user id " + std::to_string(id));
    };

    Matrix pair_d2d(efficient.size(), bottleneck.size());
    double d2d_min = 0.0, d2d_max = 0.0, cpu_min = 0.0, cpu_max = 0.0;
    bool first = true;
    for (std::size_t i = 0; i < efficient.size(); ++i) {
        const UserProfile& h = profile_of(efficient[i]);
        for (std::size_t j = 0; j < bottleneck.size(); ++j) {
            const UserProfile& b = profile_of(bottleneck[j]);
            const double rate = std::min(h.d2d_rate, b.d2d_rate);
            pair_d2d(i, j) = rate;
            if (first) {
                d2d_min = d2d_max = rate;
                cpu_min = cpu_max = h.cpu_rate;
                first = false;
            } else {
                d2d_min = std::min(d2d_min, rate);
                d2d_max = std::max(d2d_max, rate);
                cpu_min = std::min(cpu_min, h.cpu_rate);
                cpu_max = std::max(cpu_max, h.cpu_rate);
            }
        }
    }
    auto minmax = [](double v, double lo, double hi) {
        return hi > lo ? (v - lo) / (hi - lo) : 0.0;
    };

    Matrix scores(efficient.size(), bottleneck.size());
    for (std::size_t i = 0; i < efficient.size(); ++i) {
        const UserProfile& h = profile_of(efficient[i]);
        for (std::size_t j = 0; j < bottleneck.size(); ++j) {
            const UserProfile& b = profile_of(bottleneck[j]);
            scores(i, j) = w.alpha * std::min(h.data_quality, b.data_quality) +
                           w.beta * minmax(pair_d2d(i, j), d2d_min, d2d_max) +
                           w.gamma * minmax(h.cpu_rate, cpu_min, cpu_max);
        }
    }
    return scores;
}

// Repeatedly takes the highest-score available (helper, bottleneck) cell
// until one side is exhausted; leftovers on either side go solo. Ties break
// toward the lower helper id, then the lower bottleneck id.
inline MatchPlan greedy_match(const std::vector<int>& efficient,
                              const std::vector<int>& bottleneck, const Matrix& scores,
                              int round_index = 0) {
    if (scores.rows != efficient.size() || scores.cols != bottleneck.size()) {
        throw DimensionError("greedy_match: score matrix does not cover all cross pairs");
    }
    MatchPlan plan;
    plan.round_index = round_index;
    std::vector<bool> used_h(efficient.size(), false);
    std::vector<bool> used_b(bottleneck.size(), false);
    const std::size_t rounds = std::min(efficient.size(), bottleneck.size());
    for (std::size_t k = 0; k < rounds; ++k) {
        std::size_t best_i = 0, best_j = 0;
        bool found = false;
        double best = 0.0;
        for (std::size_t i = 0; i < efficient.size(); ++i) {
            if (used_h[i]) continue;
            for (std::size_t j = 0; j < bottleneck.size(); ++j) {
                if (used_b[j]) continue;
                if (!found || scores(i, j) > best) {
                    best = scores(i, j);
                    best_i = i;
                    best_j = j;
                    found = true;
                }
            }
        }
        used_h[best_i] = true;
        used_b[best_j] = true;
        plan.pairs.push_back({efficient[best_i], bottleneck[best_j], best, false});
    }
    for (std::size_t i = 0; i < efficient.size(); ++i) {
        if (!used_h[i]) plan.solo.push_back(efficient[i]);
    }
    for (std::size_t j = 0; j < bottleneck.size(); ++j) {
        if (!used_b[j]) plan.solo.push_back(bottleneck[j]);
    }
    std::sort(plan.solo.begin(), plan.solo.end());
    return plan;
}

enum class GradientDistanceMode {
    kNormOfDifference,   // || flat(g_h) - flat(g_b) ||_2
    kDifferenceOfNorms,  // | ||g_h|| - ||g_b|| |
};

inline double gradient_distance(const std::vector<double>& a, const std::vector<double>& b,
                                GradientDistanceMode mode) {
    if (a.size() != b.size()) throw DimensionError("gradient_distance: signature size mismatch");
    if (mode == GradientDistanceMode::kNormOfDifference) {
        double sum = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - b[i];
            sum += d * d;
        }
        return std::sqrt(sum);
    }
    double na = 0.0, nb = 0.0;
    for (double v : a) na += v * v;
    for (double v : b) nb += v * v;
    return std::fabs(std::sqrt(na) - std::sqrt(nb));
}

// Greedy match on gradient affinity (negated L2 distance, so closer gradients
// pair first). A user without a stored signature falls back to the initial
// profile score for its cells; such pairs are flagged.
inline MatchPlan gradient_rematch(const Classification& classes,
                                  const std::map<int, std::vector<double>>& per_user_gradients,
                                  const Matrix& initial_scores,
                                  GradientDistanceMode mode = GradientDistanceMode::kNormOfDifference,
                                  int round_index = 0) {
    const std::vector<int>& efficient = classes.efficient;
    const std::vector<int>& bottleneck = classes.bottleneck;
    if (initial_scores.rows != efficient.size() || initial_scores.cols != bottleneck.size()) {
        throw DimensionError("gradient_rematch: fallback score matrix shape mismatch");
    }
    Matrix scores(efficient.size(), bottleneck.size());
    Matrix fallback(efficient.size(), bottleneck.size());
    for (std::size_t i = 0; i < efficient.size(); ++i) {
        const auto gh = per_user_gradients.find(efficient[i]);
        for (std::size_t j = 0; j < bottleneck.size(); ++j) {
            const auto gb = per_user_gradients.find(bottleneck[j]);
            if (gh != per_user_gradients.end() && gb != per_user_gradients.end()) {
                scores(i, j) = -gradient_distance(gh->second, gb->second, mode);
            } else {
                scores(i, j) = initial_scores(i, j);
                fallback(i, j) = 1.0;
            }
        }
    }
    MatchPlan plan = greedy_match(efficient, bottleneck, scores, round_index);
    for (auto& pair : plan.pairs) {
        const std::size_t i = static_cast<std::size_t>(
            std::find(efficient.begin(), efficient.end(), pair.helper) - efficient.begin());
        const std::size_t j = static_cast<std::size_t>(
            std::find(bottleneck.begin(), bottleneck.end(), pair.bottleneck) - bottleneck.begin());
        pair.used_fallback = fallback(i, j) != 0.0;
    }
    return plan;
}

// Largest k >= 1 whose cumulative time fits within the helper budget; the
// pure core of partition-point selection.
inline int partition_from_times(const std::vector<double>& cumulative_bottleneck_times,
                                double helper_stage1_time) {
    if (cumulative_bottleneck_times.empty()) {
        throw ContractError("partition_from_times: no layers");
    }
    int p = 1;
    for (std::size_t k = 0; k < cumulative_bottleneck_times.size(); ++k) {
        if (cumulative_bottleneck_times[k] <= helper_stage1_time) {
            p = static_cast<int>(k) + 1;
        }
    }
    return p;
}

// Picks the deepest layer the bottleneck can finish within the helper's own
// stage-1 time. p == split_layer_index means the bottleneck finishes alone
// and no relay happens. p never drops below 1: raw inputs stay on-device.
inline PartitionDecision determine_partition_point(const UserProfile& helper,
                                                   const UserProfile& bottleneck,
                                                   const ArchSpec& arch, std::size_t batch,
                                                   double bytes_per_element = 8.0) {
    const int s = arch.split_layer_index;
    const double helper_time = compute_time(helper, arch, 1, s, batch);
    std::vector<double> cumulative(static_cast<std::size_t>(s));
    double acc = 0.0;
    for (int layer = 1; layer <= s; ++layer) {
        acc += layer_flops(arch, layer, batch) / bottleneck.cpu_rate;
        cumulative[static_cast<std::size_t>(layer - 1)] = acc;
    }
    PartitionDecision d;
    d.helper = helper.user_id;
    d.bottleneck = bottleneck.user_id;
    d.partition_point = partition_from_times(cumulative, helper_time);
    d.handoff_time =
        std::max(helper_time, cumulative[static_cast<std::size_t>(d.partition_point - 1)]);
    d.intermediate_bytes = activation_bytes(arch, d.partition_point, batch, bytes_per_element);
    return d;
}

// Relay-load guard: a helper whose relay compute would exceed
// budget x (its own stage-1 compute) is sent solo together with its
// bottleneck for the round.
inline void apply_helper_budget(MatchPlan& plan, std::vector<PartitionDecision>& partitions,
                                const std::vector<UserProfile>& profiles, const ArchSpec& arch,
                                std::size_t batch, double budget) {
    if (budget <= 0.0) throw ConfigError("helper budget must be > 0");
    auto profile_of = [&](int id) -> const UserProfile& {
        for (const auto& p : profiles) {
            if (p.user_id == id) return p;
        }
        throw ContractError("apply_helper_budget: unknown user id");
    };
    std::vector<MatchPair> kept_pairs;
    std::vector<PartitionDecision> kept_parts;
    for (std::size_t k = 0; k < plan.pairs.size(); ++k) {
        const MatchPair& pair = plan.pairs[k];
        const PartitionDecision& part = partitions[k];
        const UserProfile& helper = profile_of(pair.helper);
        const int s = arch.split_layer_index;
        const double own = compute_time(helper, arch, 1, s, batch);
        const double relay = part.partition_point < s
                                 ? compute_time(helper, arch, part.partition_point + 1, s, batch)
                                 : 0.0;
        if (relay > budget * own) {
            plan.budget_demoted.push_back(pair.helper);
            plan.solo.push_back(pair.helper);
            plan.solo.push_back(pair.bottleneck);
        } else {
            kept_pairs.push_back(pair);
            kept_parts.push_back(part);
        }
    }
    plan.pairs = std::move(kept_pairs);
    partitions = std::move(kept_parts);
    std::sort(plan.solo.begin(), plan.solo.end());
}

}  // namespace csfl
