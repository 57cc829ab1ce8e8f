#pragma once

#include <map>
#include <string>
#include <vector>

#include "mergeforge/merge.hpp"
#include "mergeforge/task_vector.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

// Binary per-parameter mask from the consistency test
//   S = [ |tau_m| > lambda * |tau_merge - tau_m| ]
// Active positions take the merged update; inactive positions revert to the
// pretrained weights. Masks are 0/1-valued float tensors over the merged
// vector's tensor set.
struct TaskMask {
    NamedTensorMap masks;
    float lambda = 0.6f;
    std::string task_id;
};

inline TaskMask build_mask(const TaskVector& tau_m, const MergedVector& tau_merge, float lambda) {
    if (lambda < 0.0f) throw std::runtime_error("build_mask: lambda must be >= 0");
    TaskMask out;
    out.lambda = lambda;
    out.task_id = tau_m.task_id;
    for (const auto& [name, merged] : tau_merge.tau_merge) {
        Tensor s(merged.shape);
        if (tau_m.delta.contains(name)) {
            const Tensor& own = tau_m.delta.at(name);
            if (!own.same_shape(merged))
                throw std::runtime_error("build_mask: shape mismatch for '" + name + "': " +
                                         shape_to_string(own.shape) + " vs " + shape_to_string(merged.shape));
            for (std::size_t i = 0; i < s.data.size(); ++i) {
                float residual = std::fabs(merged.data[i] - own.data[i]);
                s.data[i] = std::fabs(own.data[i]) > lambda * residual ? 1.0f : 0.0f;
            }
        }
        // tensors the task never touched keep an all-zero mask: |0| > x is false
        out.masks.insert(name, std::move(s));
    }
    out.masks.metadata["kind"] = "task_mask";
    out.masks.metadata["lambda"] = std::to_string(lambda);
    out.masks.metadata["task_id"] = tau_m.task_id;
    return out;
}

// theta_0 + S (*) tau_merge; masked-out positions revert to theta_0.
inline NamedTensorMap apply_mask(const NamedTensorMap& theta_0, const MergedVector& tau_merge,
                                 const TaskMask& mask) {
    NamedTensorMap out;
    out.metadata = theta_0.metadata;
    for (const auto& [name, t0] : theta_0) {
        if (!tau_merge.tau_merge.contains(name)) {
            out.insert(name, t0);
            continue;
        }
        const Tensor& merged = tau_merge.tau_merge.at(name);
        if (!merged.same_shape(t0))
            throw std::runtime_error("apply_mask: shape mismatch for '" + name + "': " +
                                     shape_to_string(merged.shape) + " vs " + shape_to_string(t0.shape));
        const Tensor& s = mask.masks.at(name);
        if (!s.same_shape(t0))
            throw std::runtime_error("apply_mask: mask shape mismatch for '" + name + "': " +
                                     shape_to_string(s.shape) + " vs " + shape_to_string(t0.shape));
        Tensor r(t0.shape);
        for (std::size_t i = 0; i < r.data.size(); ++i)
            r.data[i] = s.data[i] != 0.0f ? t0.data[i] + merged.data[i] : t0.data[i];
        out.insert(name, std::move(r));
    }
    return out;
}

// Fraction of positions retained by exactly one task mask.
inline double selfish_ratio(const std::vector<TaskMask>& masks) {
    if (masks.empty()) throw std::runtime_error("selfish_ratio: need at least one mask");
    const auto& ref = masks[0].masks;
    for (const auto& m : masks) {
        if (m.masks.size() != ref.size())
            throw std::runtime_error("selfish_ratio: masks cover different tensor sets");
        for (const auto& [name, t] : ref) {
            if (!m.masks.contains(name) || !m.masks.at(name).same_shape(t))
                throw std::runtime_error("selfish_ratio: mask shape mismatch for '" + name + "'");
        }
    }
    std::int64_t selfish = 0;
    std::int64_t total = 0;
    for (const auto& [name, t] : ref) {
        const std::size_t n = t.data.size();
        for (std::size_t i = 0; i < n; ++i) {
            int count = 0;
            for (const auto& m : masks)
                if (m.masks.at(name).data[i] != 0.0f) ++count;
            if (count == 1) ++selfish;
        }
        total += static_cast<std::int64_t>(n);
    }
    return total == 0 ? 0.0 : static_cast<double>(selfish) / static_cast<double>(total);
}

// Mean mask value over positions whose tensor name starts with the filter
// (empty filter = all positions). Exact integer counting.
inline double active_ratio(const TaskMask& mask, const std::string& component_filter = "") {
    std::int64_t active = 0;
    std::int64_t total = 0;
    for (const auto& [name, t] : mask.masks) {
        if (!component_filter.empty() && name.rfind(component_filter, 0) != 0) continue;
        for (float v : t.data)
            if (v != 0.0f) ++active;
        total += t.numel();
    }
    if (total == 0)
        throw std::runtime_error("active_ratio: filter '" + component_filter + "' matches no tensor");
    return static_cast<double>(active) / static_cast<double>(total);
}

struct MaskStats {
    double selfish_ratio = 0.0;
    std::map<std::string, double> per_component_active_ratio;  // tensor name -> mean over tasks
    std::map<std::string, double> per_task_active_ratio;
    int task_count = 0;
    std::int64_t position_count = 0;
};

inline MaskStats compute_mask_stats(const std::vector<TaskMask>& masks) {
    MaskStats stats;
    stats.selfish_ratio = selfish_ratio(masks);
    stats.task_count = static_cast<int>(masks.size());
    stats.position_count = masks[0].masks.total_numel();
    for (const auto& m : masks) stats.per_task_active_ratio[m.task_id] = active_ratio(m);
    for (const auto& [name, t] : masks[0].masks) {
        std::int64_t active = 0;
        for (const auto& m : masks)
            for (float v : m.masks.at(name).data)
                if (v != 0.0f) ++active;
        stats.per_component_active_ratio[name] =
            static_cast<double>(active) / static_cast<double>(t.numel() * static_cast<std::int64_t>(masks.size()));
    }
    return stats;
}

}  // namespace mergeforge
