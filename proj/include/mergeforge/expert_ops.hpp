#pragma once

#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/expert.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

// Deep blocks too task-specialized to merge: blocks start_block..L plus the
// output head, kept per task and selected by the router.
struct ExpertHead {
    int start_block = 1;
    NamedTensorMap params;
    std::string task_id;
};

// Weight-average merge of the shallow blocks; blocks head_start_l..L and the
// output head stay per-task.
struct MergedExpert {
    ExpertConfig config;
    int head_start_l = 1;
    NamedTensorMap shared;  // blocks 1..head_start_l-1
    std::vector<ExpertHead> heads;
};

namespace detail {

inline void check_expert_compat(const std::vector<ActionExpert>& experts) {
    if (experts.empty()) throw std::runtime_error("merge_experts: need at least one expert");
    for (std::size_t i = 1; i < experts.size(); ++i)
        if (!(experts[i].config == experts[0].config))
            throw std::runtime_error("merge_experts: expert config mismatch between '" + experts[0].task_id +
                                     "' and '" + experts[i].task_id + "'");
}

inline Tensor mean_of(const std::vector<ActionExpert>& experts, const std::string& name) {
    Tensor acc = experts[0].params.at(name);
    for (std::size_t i = 1; i < experts.size(); ++i) acc = ew_add(acc, experts[i].params.at(name));
    return ew_scale(acc, 1.0f / static_cast<float>(experts.size()));
}

}  // namespace detail

inline MergedExpert merge_experts(const std::vector<ActionExpert>& experts, int head_start_l) {
    detail::check_expert_compat(experts);
    const int L = experts[0].config.num_blocks;
    if (head_start_l < 1 || head_start_l > L)
        throw std::runtime_error("merge_experts: head_start_l " + std::to_string(head_start_l) +
                                 " out of range [1, " + std::to_string(L) + "]");
    MergedExpert out;
    out.config = experts[0].config;
    out.head_start_l = head_start_l;
    for (int b = 1; b < head_start_l; ++b)
        for (const auto& suffix : block_param_suffixes()) {
            const std::string name = block_prefix(b) + suffix;
            out.shared.insert(name, detail::mean_of(experts, name));
        }
    out.shared.metadata["kind"] = "action_expert_shared";
    out.shared.metadata["head_start_l"] = std::to_string(head_start_l);
    for (const auto& e : experts) {
        ExpertHead head;
        head.start_block = head_start_l;
        head.task_id = e.task_id;
        for (int b = head_start_l; b <= L; ++b)
            for (const auto& suffix : block_param_suffixes()) {
                const std::string name = block_prefix(b) + suffix;
                head.params.insert(name, e.params.at(name));
            }
        head.params.insert("head.w", e.params.at("head.w"));
        head.params.insert("head.b", e.params.at("head.b"));
        head.params.metadata["kind"] = "expert_head";
        head.params.metadata["head_start_l"] = std::to_string(head_start_l);
        head.params.metadata["task_id"] = e.task_id;
        out.heads.push_back(std::move(head));
    }
    return out;
}

// Full expert for inference: shared shallow blocks plus one task's head.
inline ActionExpert assemble_expert(const MergedExpert& merged, const ExpertHead& head) {
    ActionExpert e;
    e.config = merged.config;
    e.task_id = head.task_id;
    for (int b = 1; b < merged.head_start_l; ++b)
        for (const auto& suffix : block_param_suffixes()) {
            const std::string name = block_prefix(b) + suffix;
            e.params.insert(name, merged.shared.at(name));
        }
    for (int b = merged.head_start_l; b <= merged.config.num_blocks; ++b)
        for (const auto& suffix : block_param_suffixes()) {
            const std::string name = block_prefix(b) + suffix;
            e.params.insert(name, head.params.at(name));
        }
    e.params.insert("head.w", head.params.at("head.w"));
    e.params.insert("head.b", head.params.at("head.b"));
    return e;
}

// Average relative L2 distance per block over all unordered expert pairs:
//   || a - b ||_2 / (0.5*||a||_2 + 0.5*||b||_2), block parameters flattened.
inline std::vector<double> block_distance(const std::vector<ActionExpert>& experts) {
    detail::check_expert_compat(experts);
    if (experts.size() < 2) throw std::runtime_error("block_distance: need at least two experts");
    const int L = experts[0].config.num_blocks;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(L));
    for (int b = 1; b <= L; ++b) {
        double total = 0.0;
        int pairs = 0;
        for (std::size_t i = 0; i < experts.size(); ++i)
            for (std::size_t j = i + 1; j < experts.size(); ++j) {
                double dist2 = 0.0, na2 = 0.0, nb2 = 0.0;
                for (const auto& suffix : block_param_suffixes()) {
                    const std::string name = block_prefix(b) + suffix;
                    const Tensor& ta = experts[i].params.at(name);
                    const Tensor& tb = experts[j].params.at(name);
                    for (std::size_t k = 0; k < ta.data.size(); ++k) {
                        double av = ta.data[k], bv = tb.data[k];
                        dist2 += (av - bv) * (av - bv);
                        na2 += av * av;
                        nb2 += bv * bv;
                    }
                }
                double denom = 0.5 * std::sqrt(na2) + 0.5 * std::sqrt(nb2);
                total += denom > 0.0 ? std::sqrt(dist2) / denom : 0.0;
                ++pairs;
            }
        out.push_back(total / static_cast<double>(pairs));
    }
    return out;
}

// Progressive-merge hybrid: average blocks 1..k across experts, keep blocks
// k+1..L and the output head from the reference expert.
inline ActionExpert progressive_hybrid(const std::vector<ActionExpert>& experts, int k, std::size_t ref_index) {
    detail::check_expert_compat(experts);
    const int L = experts[0].config.num_blocks;
    if (k < 0 || k > L) throw std::runtime_error("progressive_hybrid: k " + std::to_string(k) + " out of range [0, " + std::to_string(L) + "]");
    if (ref_index >= experts.size()) throw std::runtime_error("progressive_hybrid: reference index out of range");
    ActionExpert e;
    e.config = experts[0].config;
    e.task_id = experts[ref_index].task_id;
    for (int b = 1; b <= L; ++b)
        for (const auto& suffix : block_param_suffixes()) {
            const std::string name = block_prefix(b) + suffix;
            e.params.insert(name, b <= k ? detail::mean_of(experts, name) : experts[ref_index].params.at(name));
        }
    e.params.insert("head.w", experts[ref_index].params.at("head.w"));
    e.params.insert("head.b", experts[ref_index].params.at("head.b"));
    return e;
}

// --- serialization -----------------------------------------------------------

inline void expert_config_to_metadata(const ExpertConfig& cfg, std::map<std::string, std::string>& md) {
    md["num_blocks"] = std::to_string(cfg.num_blocks);
    md["d_model"] = std::to_string(cfg.d_model);
    md["n_heads"] = std::to_string(cfg.n_heads);
    md["d_ff"] = std::to_string(cfg.d_ff);
    md["action_dim"] = std::to_string(cfg.action_dim);
    md["horizon"] = std::to_string(cfg.horizon);
    md["positional_queries"] = cfg.positional_queries ? "1" : "0";
}

inline ExpertConfig expert_config_from_metadata(const std::map<std::string, std::string>& md) {
    ExpertConfig cfg;
    auto get = [&md](const std::string& k) {
        auto it = md.find(k);
        if (it == md.end()) throw std::runtime_error("expert checkpoint: missing metadata key '" + k + "'");
        return it->second;
    };
    cfg.num_blocks = std::stoi(get("num_blocks"));
    cfg.d_model = std::stoi(get("d_model"));
    cfg.n_heads = std::stoi(get("n_heads"));
    cfg.d_ff = std::stoi(get("d_ff"));
    cfg.action_dim = std::stoi(get("action_dim"));
    cfg.horizon = std::stoi(get("horizon"));
    cfg.positional_queries = get("positional_queries") == "1";
    cfg.validate();
    return cfg;
}

inline NamedTensorMap expert_to_map(const ActionExpert& e) {
    NamedTensorMap out = e.params;
    out.metadata["kind"] = "action_expert";
    out.metadata["task_id"] = e.task_id;
    expert_config_to_metadata(e.config, out.metadata);
    return out;
}

inline ActionExpert expert_from_map(const NamedTensorMap& map) {
    ActionExpert e;
    e.config = expert_config_from_metadata(map.metadata);
    e.params = map;
    auto it = map.metadata.find("task_id");
    e.task_id = it != map.metadata.end() ? it->second : "";
    return e;
}

}  // namespace mergeforge
