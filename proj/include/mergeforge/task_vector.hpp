#pragma once

#include <string>
#include <vector>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/tensor.hpp"

namespace mergeforge {

// Dense per-task delta against a shared base checkpoint. Tensors absent from
// the delta are frozen (identical to the base), not stored as zeros.
struct TaskVector {
    NamedTensorMap delta;
    std::string base_fingerprint;
    std::string task_id;
};

struct LowRankUpdate {
    Tensor down;     // r x d_in
    Tensor up;       // d_out x r
    float scaling = 1.0f;
    std::string target_name;

    std::int64_t rank() const { return down.shape.at(0); }
};

inline TaskVector extract(const NamedTensorMap& theta_m, const NamedTensorMap& theta_0,
                          const std::string& task_id = "") {
    TaskVector tv;
    tv.task_id = task_id;
    tv.base_fingerprint = fingerprint(theta_0);
    for (const auto& [name, t0] : theta_0) {
        if (!theta_m.contains(name)) continue;  // frozen in the finetune
        const Tensor& tm = theta_m.at(name);
        if (!tm.same_shape(t0))
            throw std::runtime_error("extract: shape mismatch for '" + name + "': " + shape_to_string(tm.shape) +
                                     " vs " + shape_to_string(t0.shape));
        tv.delta.insert(name, ew_sub(tm, t0));
    }
    tv.delta.metadata["kind"] = "task_vector";
    tv.delta.metadata["base_fingerprint"] = tv.base_fingerprint;
    tv.delta.metadata["task_id"] = task_id;
    return tv;
}

inline Tensor materialize(const LowRankUpdate& lr) {
    const std::int64_t r = lr.down.shape.at(0);
    const std::int64_t d_in = lr.down.shape.at(1);
    const std::int64_t d_out = lr.up.shape.at(0);
    if (lr.up.shape.at(1) != r)
        throw std::runtime_error("materialize: inner dimension mismatch, up is " + shape_to_string(lr.up.shape) +
                                 " but down rank is " + std::to_string(r));
    Tensor out({d_out, d_in});
    for (std::int64_t i = 0; i < d_out; ++i)
        for (std::int64_t j = 0; j < d_in; ++j) {
            float acc = 0.0f;
            for (std::int64_t k = 0; k < r; ++k) acc += lr.up.at(i, k) * lr.down.at(k, j);
            out.at(i, j) = lr.scaling * acc;
        }
    return out;
}

// Drops tensors whose delta is identically zero. A tensor the finetune never
// touched is frozen; keeping it out of the delta restricts masks and
// interference statistics to the trainable parameters.
inline TaskVector prune_frozen(const TaskVector& tv) {
    TaskVector out;
    out.task_id = tv.task_id;
    out.base_fingerprint = tv.base_fingerprint;
    out.delta.metadata = tv.delta.metadata;
    for (const auto& [name, t] : tv.delta) {
        bool all_zero = true;
        for (float v : t.data)
            if (v != 0.0f) {
                all_zero = false;
                break;
            }
        if (!all_zero) out.delta.insert(name, t);
    }
    return out;
}

// theta_0 + alpha * delta; names absent from the delta pass through unchanged.
inline NamedTensorMap apply_delta(const NamedTensorMap& theta_0, const NamedTensorMap& delta, float alpha) {
    NamedTensorMap out;
    out.metadata = theta_0.metadata;
    for (const auto& [name, t0] : theta_0) {
        if (!delta.contains(name)) {
            out.insert(name, t0);
            continue;
        }
        const Tensor& d = delta.at(name);
        if (!d.same_shape(t0))
            throw std::runtime_error("apply: shape mismatch for '" + name + "': " + shape_to_string(d.shape) +
                                     " vs " + shape_to_string(t0.shape));
        if (alpha == 0.0f) {
            out.insert(name, t0);
        } else if (alpha == 1.0f) {
            out.insert(name, ew_add(t0, d));
        } else {
            out.insert(name, ew_add(t0, ew_scale(d, alpha)));
        }
    }
    return out;
}

inline NamedTensorMap apply(const NamedTensorMap& theta_0, const TaskVector& tau, float alpha) {
    std::string base_fp = fingerprint(theta_0);
    if (tau.base_fingerprint != base_fp)
        throw std::runtime_error("apply: base fingerprint mismatch, task vector was extracted against " +
                                 tau.base_fingerprint + " but base is " + base_fp);
    return apply_delta(theta_0, tau.delta, alpha);
}

}  // namespace mergeforge
