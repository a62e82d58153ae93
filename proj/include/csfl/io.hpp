// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "csfl/crom.hpp"
#include "csfl/errors.hpp"
#include "csfl/experiment.hpp"
#include "csfl/sim.hpp"

namespace csfl {

// %.17g round-trips doubles exactly, which keeps metric files byte-stable
// across reruns.
inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string metrics_to_csv(const MetricsReport& report) {
    std::string out = "protocol,epoch,train_mae,eval_mae,throughput,sync_delay,aggregations\n";
    for (const auto& row : report.rows) {
        out += row.protocol;
        out += ',';
        out += std::to_string(row.epoch);
        out += ',';
        out += format_g17(row.train_mae);
        out += ',';
        out += format_g17(row.eval_mae);
        out += ',';
        out += format_g17(row.throughput);
        out += ',';
        out += format_g17(row.sync_delay);
        out += ',';
        out += std::to_string(row.aggregations);
        out += '\n';
    }
    return out;
}

namespace detail {

inline nlohmann::json events_to_json(const UserEvents& ev) {
    nlohmann::json j;
    auto put = [&j](const char* key, const std::optional<double>& v) {
        if (v.has_value()) j[key] = *v;
    };
    put("stage1_start", ev.stage1_start);
    put("stage1_end", ev.stage1_end);
    put("handoff_send", ev.handoff_send);
    put("relay_start", ev.relay_start);
    put("relay_end", ev.relay_end);
    put("smashed_upload", ev.smashed_upload);
    put("server_compute", ev.server_compute);
    put("grad_return", ev.grad_return);
    put("client_backward_end", ev.client_backward_end);
    j["completion"] = ev.completion;
    return j;
}

inline nlohmann::json plan_to_json(const MatchPlan& plan) {
    nlohmann::json j;
    j["round"] = plan.round_index;
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : plan.pairs) {
        j["pairs"].push_back({{"helper", p.helper},
                              {"bottleneck", p.bottleneck},
                              {"score", p.score},
                              {"used_fallback", p.used_fallback}});
    }
    j["solo"] = plan.solo;
    j["budget_demoted"] = plan.budget_demoted;
    return j;
}

inline nlohmann::json partition_to_json(const PartitionDecision& d) {
    return {{"helper", d.helper},
            {"bottleneck", d.bottleneck},
            {"partition_point", d.partition_point},
            {"handoff_time", d.handoff_time},
            {"intermediate_bytes", d.intermediate_bytes}};
}

}  // namespace detail

inline nlohmann::json result_to_trace_json(const ExperimentResult& result) {
    nlohmann::json root;
    root["runs"] = nlohmann::json::array();
    for (const auto& run : result.runs) {
        nlohmann::json jrun;
        jrun["protocol"] = protocol_name(run.protocol);
        jrun["rounds"] = nlohmann::json::array();
        for (const auto& record : run.rounds) {
            const RoundTrace& t = record.trace;
            nlohmann::json jround;
            jround["round"] = t.round_index;
            jround["epoch"] = t.epoch;
            jround["sync_delay"] = t.sync_delay;
            jround["samples_processed"] = t.samples_processed;
            jround["train_mae"] = t.train_mae;
            jround["aggregated"] = t.aggregated;
            if (!t.timeout_demoted.empty()) jround["timeout_demoted"] = t.timeout_demoted;
            nlohmann::json jevents;
            for (const auto& [user, ev] : t.events) {
                jevents[std::to_string(user)] = detail::events_to_json(ev);
            }
            jround["events"] = std::move(jevents);
            if (record.plan.has_value()) jround["match_plan"] = detail::plan_to_json(*record.plan);
            if (!record.partitions.empty()) {
                jround["partitions"] = nlohmann::json::array();
                for (const auto& d : record.partitions) {
                    jround["partitions"].push_back(detail::partition_to_json(d));
                }
            }
            jrun["rounds"].push_back(std::move(jround));
        }
        root["runs"].push_back(std::move(jrun));
    }
    return root;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return content;
}

}  // namespace csfl
