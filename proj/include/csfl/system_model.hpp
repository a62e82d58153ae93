// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "csfl/errors.hpp"
#include "csfl/model.hpp"

namespace csfl {

// Per-client resource and channel description. cpu_rate is an effective
// FLOP/s figure for the device, not a clock frequency.
struct UserProfile {
    int user_id = 0;
    double cpu_rate = 1e9;
    double data_quality = 1.0;
    double uplink_rate = 1e7;   // bits/s to the server
    double d2d_rate = 2e7;      // bits/s to peers
    double link_latency = 0.0;  // seconds per message

    void validate() const {
        const std::string who = "profile " + std::to_string(user_id) + ": ";
        if (cpu_rate <= 0.0) throw ConfigError(who + "cpu_rate must be > 0");
        if (uplink_rate <= 0.0) throw ConfigError(who + "uplink_rate must be > 0");
        if (d2d_rate <= 0.0) throw ConfigError(who + "d2d_rate must be > 0");
        if (link_latency < 0.0) throw ConfigError(who + "link_latency must be >= 0");
        if (data_quality < 0.0 || data_quality > 1.0) {
            throw ConfigError(who + "data_quality must lie in [0, 1]");
        }
    }

    friend bool operator==(const UserProfile&, const UserProfile&) = default;
};

// Backward passes are costed at twice the forward FLOPs.
inline constexpr double kBackwardCostRatio = 2.0;

// Forward FLOPs for one layer. Dense layers cost the usual multiply-add
// count; embedding lookups are counted as one FLOP per fetched element.
inline double layer_flops(const ArchSpec& arch, int layer_index, std::size_t batch) {
    arch.check_layer(layer_index);
    const double b = static_cast<double>(batch);
    if (layer_index == 1) {
        return 2.0 * b * arch.num_numeric * arch.wide_out +
               b * (arch.embed_dim1 + arch.embed_dim2);
    }
    return 2.0 * b * arch.layer_input_width(layer_index) * arch.layer_output_width(layer_index);
}

inline double range_flops(const ArchSpec& arch, int from_layer, int to_layer, std::size_t batch) {
    double total = 0.0;
    for (int layer = from_layer; layer <= to_layer; ++layer) {
        total += layer_flops(arch, layer, batch);
    }
    return total;
}

// Seconds a device spends running layers [from, to] forward.
inline double compute_time(const UserProfile& profile, const ArchSpec& arch, int from_layer,
                           int to_layer, std::size_t batch) {
    if (from_layer > to_layer) throw ContractError("compute_time: empty layer range");
    return range_flops(arch, from_layer, to_layer, batch) / profile.cpu_rate;
}

inline double transfer_time(double bytes, double rate_bits_per_s, double latency_s) {
    if (rate_bits_per_s <= 0.0) throw ConfigError("transfer_time: rate must be > 0");
    if (bytes < 0.0) throw ContractError("transfer_time: negative payload");
    return latency_s + 8.0 * bytes / rate_bits_per_s;
}

inline double activation_bytes(const ArchSpec& arch, int layer_index, std::size_t batch,
                               double bytes_per_element = 8.0) {
    arch.check_layer(layer_index);
    return static_cast<double>(batch) * arch.layer_output_width(layer_index) * bytes_per_element;
}

// Timing knobs shared by every protocol run.
struct CostModel {
    ArchSpec arch;
    double bytes_per_element = 8.0;
    double aggregation_latency = 0.05;  // seconds per aggregation event

    double activation_bytes_at(int layer_index, std::size_t batch) const {
        return activation_bytes(arch, layer_index, batch, bytes_per_element);
    }

    void validate() const {
        if (bytes_per_element < 1.0) throw ConfigError("cost: bytes_per_element must be >= 1");
        if (aggregation_latency < 0.0) throw ConfigError("cost: aggregation_latency must be >= 0");
    }
};

}  // namespace csfl
