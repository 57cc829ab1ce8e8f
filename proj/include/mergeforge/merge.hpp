#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/task_vector.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

enum class MergeMethod { Average, TaskArithmetic, Ties };

inline std::string to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::Average: return "average";
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Ties: return "ties";
    }
    return "?";
}

inline MergeMethod merge_method_from_string(const std::string& s) {
    if (s == "average") return MergeMethod::Average;
    if (s == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (s == "ties") return MergeMethod::Ties;
    throw std::runtime_error("unknown merge method '" + s + "' (expected average|task_arithmetic|ties)");
}

struct MergeRecipe {
    MergeMethod method = MergeMethod::TaskArithmetic;
    float alpha = 1.0f;
    float ties_keep_fraction = 0.2f;
    float lambda = 0.6f;       // mask ratio, consumed by the mask builder
    int head_start_l = 0;      // expert-head start block; 0 means "last block"
    std::vector<std::string> task_ids;

    void validate() const {
        if (!(ties_keep_fraction > 0.0f && ties_keep_fraction <= 1.0f))
            throw std::runtime_error("recipe: ties_keep_fraction must be in (0,1], got " +
                                     std::to_string(ties_keep_fraction));
        if (lambda < 0.0f) throw std::runtime_error("recipe: lambda must be >= 0");
        if (!task_ids.empty()) {
            std::set<std::string> seen(task_ids.begin(), task_ids.end());
            if (seen.size() != task_ids.size()) throw std::runtime_error("recipe: duplicate task ids");
        }
    }
};

inline nlohmann::ordered_json recipe_to_json(const MergeRecipe& r) {
    nlohmann::ordered_json j;
    j["method"] = to_string(r.method);
    j["alpha"] = r.alpha;
    j["ties_keep_fraction"] = r.ties_keep_fraction;
    j["lambda"] = r.lambda;
    j["head_start_l"] = r.head_start_l;
    j["task_ids"] = r.task_ids;
    return j;
}

inline MergeRecipe recipe_from_json(const nlohmann::json& j) {
    MergeRecipe r;
    if (j.contains("method")) r.method = merge_method_from_string(j["method"].get<std::string>());
    if (j.contains("alpha")) r.alpha = j["alpha"].get<float>();
    if (j.contains("ties_keep_fraction")) r.ties_keep_fraction = j["ties_keep_fraction"].get<float>();
    if (j.contains("lambda")) r.lambda = j["lambda"].get<float>();
    if (j.contains("head_start_l")) r.head_start_l = j["head_start_l"].get<int>();
    if (j.contains("task_ids")) r.task_ids = j["task_ids"].get<std::vector<std::string>>();
    r.validate();
    return r;
}

struct MergedVector {
    NamedTensorMap tau_merge;
    MergeRecipe recipe;
    std::vector<std::string> source_task_ids;
    std::string base_fingerprint;
};

namespace detail {

// Union of tensor names across vectors (first-seen order); shapes must agree.
inline std::vector<std::string> union_names(const std::vector<TaskVector>& vectors) {
    if (vectors.empty()) throw std::runtime_error("merge: need at least one task vector");
    for (std::size_t i = 1; i < vectors.size(); ++i)
        if (vectors[i].base_fingerprint != vectors[0].base_fingerprint)
            throw std::runtime_error("merge: base fingerprint mismatch between '" + vectors[0].task_id + "' (" +
                                     vectors[0].base_fingerprint + ") and '" + vectors[i].task_id + "' (" +
                                     vectors[i].base_fingerprint + ")");
    std::vector<std::string> names;
    std::set<std::string> seen;
    for (const auto& v : vectors)
        for (const auto& [name, t] : v.delta)
            if (seen.insert(name).second) names.push_back(name);
    for (const auto& name : names) {
        const Tensor* ref = nullptr;
        for (const auto& v : vectors) {
            if (!v.delta.contains(name)) continue;
            const Tensor& t = v.delta.at(name);
            if (!ref) {
                ref = &t;
            } else if (!ref->same_shape(t)) {
                throw std::runtime_error("merge: shape mismatch for '" + name + "': " + shape_to_string(ref->shape) +
                                         " vs " + shape_to_string(t.shape));
            }
        }
    }
    return names;
}

inline MergedVector make_result(NamedTensorMap tau, const std::vector<TaskVector>& vectors) {
    MergedVector out;
    out.base_fingerprint = vectors[0].base_fingerprint;
    for (const auto& v : vectors) out.source_task_ids.push_back(v.task_id);
    tau.metadata["kind"] = "merged_vector";
    tau.metadata["base_fingerprint"] = out.base_fingerprint;
    out.tau_merge = std::move(tau);
    return out;
}

// Per-tensor trim: zero entries whose magnitude falls below the keep_fraction
// quantile. Ties at the threshold are all kept.
inline std::vector<float> ties_trim(const Tensor& t, float keep_fraction) {
    std::vector<float> mags;
    mags.reserve(t.data.size());
    for (float v : t.data) mags.push_back(std::fabs(v));
    std::vector<float> sorted = mags;
    std::sort(sorted.begin(), sorted.end(), std::greater<float>());
    std::size_t k = static_cast<std::size_t>(
        std::ceil(static_cast<double>(keep_fraction) * static_cast<double>(sorted.size())));
    if (k == 0) k = 1;
    if (k > sorted.size()) k = sorted.size();
    float threshold = sorted[k - 1];
    std::vector<float> out(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) out[i] = mags[i] >= threshold ? t.data[i] : 0.0f;
    return out;
}

}  // namespace detail

inline MergedVector merge_average(const std::vector<TaskVector>& vectors) {
    auto names = detail::union_names(vectors);
    const float inv_m = 1.0f / static_cast<float>(vectors.size());
    NamedTensorMap tau;
    for (const auto& name : names) {
        Tensor acc;
        for (const auto& v : vectors) {
            if (!v.delta.contains(name)) continue;
            const Tensor& t = v.delta.at(name);
            if (acc.data.empty() && acc.shape.empty()) {
                acc = t;
            } else {
                acc = ew_add(acc, t);
            }
        }
        tau.insert(name, ew_scale(acc, inv_m));
    }
    return detail::make_result(std::move(tau), vectors);
}

inline MergedVector merge_ta(const std::vector<TaskVector>& vectors) {
    auto names = detail::union_names(vectors);
    NamedTensorMap tau;
    for (const auto& name : names) {
        Tensor acc;
        for (const auto& v : vectors) {
            if (!v.delta.contains(name)) continue;
            const Tensor& t = v.delta.at(name);
            if (acc.data.empty() && acc.shape.empty()) {
                acc = t;
            } else {
                acc = ew_add(acc, t);
            }
        }
        tau.insert(name, std::move(acc));
    }
    return detail::make_result(std::move(tau), vectors);
}

// TIES: trim per task vector, elect the sign of the trimmed sum per position
// (zero sum elects positive), then average the contributors whose trimmed
// value is non-zero and matches the elected sign.
inline MergedVector merge_ties(const std::vector<TaskVector>& vectors, float keep_fraction) {
    if (!(keep_fraction > 0.0f && keep_fraction <= 1.0f))
        throw std::runtime_error("merge_ties: keep_fraction must be in (0,1], got " + std::to_string(keep_fraction));
    auto names = detail::union_names(vectors);
    NamedTensorMap tau;
    for (const auto& name : names) {
        const Tensor* ref = nullptr;
        for (const auto& v : vectors)
            if (v.delta.contains(name)) {
                ref = &v.delta.at(name);
                break;
            }
        const std::size_t n = ref->data.size();
        std::vector<std::vector<float>> trimmed;
        trimmed.reserve(vectors.size());
        for (const auto& v : vectors) {
            if (v.delta.contains(name)) {
                trimmed.push_back(detail::ties_trim(v.delta.at(name), keep_fraction));
            } else {
                trimmed.emplace_back(n, 0.0f);
            }
        }
        Tensor out(ref->shape);
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (const auto& tv : trimmed) sum += tv[i];
            const float elected = sum >= 0.0 ? 1.0f : -1.0f;
            float acc = 0.0f;
            int count = 0;
            for (const auto& tv : trimmed) {
                float v = tv[i];
                if (v != 0.0f && ((v > 0.0f) == (elected > 0.0f))) {
                    acc += v;
                    ++count;
                }
            }
            out.data[i] = count > 0 ? acc / static_cast<float>(count) : 0.0f;
        }
        tau.insert(name, std::move(out));
    }
    return detail::make_result(std::move(tau), vectors);
}

// Recipe dispatcher; applies the Eq-style scaling after the kernel.
inline MergedVector merge(const MergeRecipe& recipe, const std::vector<TaskVector>& vectors) {
    recipe.validate();
    MergedVector out;
    switch (recipe.method) {
        case MergeMethod::Average: out = merge_average(vectors); break;
        case MergeMethod::TaskArithmetic: out = merge_ta(vectors); break;
        case MergeMethod::Ties: out = merge_ties(vectors, recipe.ties_keep_fraction); break;
        default: throw std::runtime_error("merge: unknown method");
    }
    if (recipe.alpha != 1.0f) {
        NamedTensorMap scaled;
        scaled.metadata = out.tau_merge.metadata;
        for (const auto& [name, t] : out.tau_merge) scaled.insert(name, ew_scale(t, recipe.alpha));
        out.tau_merge = std::move(scaled);
    }
    out.recipe = recipe;
    return out;
}

}  // namespace mergeforge
