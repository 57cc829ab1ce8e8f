#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/checkpoint.hpp"
#include "mergeforge/expert_ops.hpp"
#include "mergeforge/linalg.hpp"
#include "mergeforge/mask.hpp"
#include "mergeforge/merge.hpp"

namespace mergeforge {

// Training-free test-time task routing. Scores each task's masked backbone
// variant by the projection norms of its pooled hidden states onto the top
// singular subspaces of the merged expert's value projections, then selects
// via softmax-argmax. Value subspaces are the default; key-based variants
// exist for the ablation only.

enum class SubspaceKind { V, K, KandV };

inline std::string to_string(SubspaceKind k) {
    switch (k) {
        case SubspaceKind::V: return "V";
        case SubspaceKind::K: return "K";
        case SubspaceKind::KandV: return "K_and_V";
    }
    return "?";
}

inline SubspaceKind subspace_kind_from_string(const std::string& s) {
    if (s == "V") return SubspaceKind::V;
    if (s == "K") return SubspaceKind::K;
    if (s == "K_and_V") return SubspaceKind::KandV;
    throw std::runtime_error("unknown subspace kind '" + s + "' (expected V|K|K_and_V)");
}

struct RouterSubspace {
    std::vector<Tensor> p_t;  // each k_r x d_model, orthonormal rows
    std::vector<Tensor> p_a;
    int k_r = 8;
    int source_block = 1;  // 1-based expert block the projections came from
    SubspaceKind kind = SubspaceKind::V;
};

namespace detail {

// Weights are stored input x output (row-vector convention); the projection
// matrix of the paper acts on column vectors, so the SVD runs on the transpose.
inline Tensor top_right_vectors(const Tensor& weight, int k_r) {
    Mat m = Mat::from_tensor(weight).transposed();
    Svd s = svd(m);
    std::int64_t rank = svd_rank(s);
    if (k_r > rank)
        throw std::runtime_error("extract_subspace: k_r " + std::to_string(k_r) + " exceeds matrix rank " +
                                 std::to_string(rank));
    Tensor p({static_cast<std::int64_t>(k_r), s.vt.cols});
    for (int i = 0; i < k_r; ++i)
        for (std::int64_t j = 0; j < s.vt.cols; ++j)
            p.data[static_cast<std::size_t>(i) * static_cast<std::size_t>(s.vt.cols) + static_cast<std::size_t>(j)] =
                static_cast<float>(s.vt.at(i, j));
    return p;
}

}  // namespace detail

inline RouterSubspace extract_subspace(const NamedTensorMap& expert_params, int block_index, int k_r,
                                       SubspaceKind kind = SubspaceKind::V) {
    const std::string prefix = block_prefix(block_index);
    if (!expert_params.contains(prefix + "attn_t.wv"))
        throw std::runtime_error("extract_subspace: expert has no block " + std::to_string(block_index));
    RouterSubspace out;
    out.k_r = k_r;
    out.source_block = block_index;
    out.kind = kind;
    if (kind == SubspaceKind::V || kind == SubspaceKind::KandV) {
        out.p_t.push_back(detail::top_right_vectors(expert_params.at(prefix + "attn_t.wv"), k_r));
        out.p_a.push_back(detail::top_right_vectors(expert_params.at(prefix + "attn_a.wv"), k_r));
    }
    if (kind == SubspaceKind::K || kind == SubspaceKind::KandV) {
        out.p_t.push_back(detail::top_right_vectors(expert_params.at(prefix + "attn_t.wk"), k_r));
        out.p_a.push_back(detail::top_right_vectors(expert_params.at(prefix + "attn_a.wk"), k_r));
    }
    return out;
}

namespace detail {

inline double projection_norm(const std::vector<Tensor>& projections, const std::vector<double>& h) {
    double total_sq = 0.0;
    for (const Tensor& p : projections) {
        Mat pm = Mat::from_tensor(p);
        std::vector<double> y = matvec(pm, h);
        for (double v : y) total_sq += v * v;
    }
    return std::sqrt(total_sq);
}

}  // namespace detail

// Eq-style activation strength. The pairing is crossed on purpose: the task
// subspace scores the action hidden state and vice versa; `matched` flips it
// for comparison runs.
inline std::pair<double, double> activation_strength(const RouterSubspace& sub, const std::vector<double>& h_t,
                                                     const std::vector<double>& h_a, bool matched = false) {
    double r_t = detail::projection_norm(sub.p_t, matched ? h_t : h_a);
    double r_a = detail::projection_norm(sub.p_a, matched ? h_a : h_t);
    return {r_t, r_a};
}

struct RoutingDecision {
    std::vector<double> r_t, r_a;  // per-path scores per task
    std::vector<double> scores;    // combined 0.5*(r_t + r_a)
    std::vector<double> probs;     // softmax of scores
    int selected = 0;
};

struct RouterBundle {
    NamedTensorMap base;
    MergedVector tau_merge;
    std::vector<TaskMask> masks;
    MergedExpert expert;
    RouterSubspace subspace;

    std::vector<std::string> task_ids() const {
        std::vector<std::string> ids;
        ids.reserve(masks.size());
        for (const auto& m : masks) ids.push_back(m.task_id);
        return ids;
    }

    void validate() const {
        if (masks.empty()) throw std::runtime_error("router bundle: no task masks");
        if (masks.size() != expert.heads.size())
            throw std::runtime_error("router bundle: " + std::to_string(masks.size()) + " masks but " +
                                     std::to_string(expert.heads.size()) + " expert heads");
        for (std::size_t i = 0; i < masks.size(); ++i)
            if (masks[i].task_id != expert.heads[i].task_id)
                throw std::runtime_error("router bundle: task id mismatch at index " + std::to_string(i) + ": mask '" +
                                         masks[i].task_id + "' vs head '" + expert.heads[i].task_id + "'");
    }
};

// Produces the block-(l-1) hidden-state sequences (h_T, h_A), each seq x d,
// for one masked backbone variant on the current observation.
using StreamEncoder = std::function<std::pair<Tensor, Tensor>(const NamedTensorMap& masked_theta)>;

inline std::vector<double> softmax(const std::vector<double>& scores) {
    double maxv = scores[0];
    for (double s : scores) maxv = std::max(maxv, s);
    std::vector<double> p(scores.size());
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        p[i] = std::exp(scores[i] - maxv);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

inline std::vector<double> mean_pool_rows(const Tensor& seq) {
    if (seq.shape.size() != 2) throw std::runtime_error("route: hidden-state sequence must be 2-D");
    const std::int64_t s = seq.shape[0], d = seq.shape[1];
    std::vector<double> out(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t i = 0; i < s; ++i)
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += static_cast<double>(seq.at(i, j));
    for (auto& v : out) v /= static_cast<double>(s);
    return out;
}

inline RoutingDecision route(const RouterBundle& bundle, const StreamEncoder& encoder, bool matched_pairing = false) {
    bundle.validate();
    const std::size_t m_count = bundle.masks.size();
    RoutingDecision d;
    d.r_t.resize(m_count);
    d.r_a.resize(m_count);
    d.scores.resize(m_count);
    for (std::size_t m = 0; m < m_count; ++m) {
        NamedTensorMap masked = apply_mask(bundle.base, bundle.tau_merge, bundle.masks[m]);
        std::pair<Tensor, Tensor> streams;
        try {
            streams = encoder(masked);
        } catch (const std::exception& e) {
            throw std::runtime_error("route: encoder failed for task '" + bundle.masks[m].task_id + "': " + e.what());
        }
        std::vector<double> h_t = mean_pool_rows(streams.first);
        std::vector<double> h_a = mean_pool_rows(streams.second);
        auto [r_t, r_a] = activation_strength(bundle.subspace, h_t, h_a, matched_pairing);
        d.r_t[m] = r_t;
        d.r_a[m] = r_a;
        d.scores[m] = 0.5 * (r_t + r_a);
    }
    d.probs = softmax(d.scores);
    d.selected = 0;
    for (std::size_t m = 1; m < m_count; ++m)
        if (d.probs[m] > d.probs[static_cast<std::size_t>(d.selected)]) d.selected = static_cast<int>(m);
    return d;
}

// One routing step on the initial observation; the selection stays fixed for
// the whole episode.
struct EpisodeSelection {
    int task_index = 0;
    std::string task_id;
    RoutingDecision decision;
};

inline EpisodeSelection route_episode(const RouterBundle& bundle, const StreamEncoder& initial_obs_encoder,
                                      bool matched_pairing = false) {
    EpisodeSelection sel;
    sel.decision = route(bundle, initial_obs_encoder, matched_pairing);
    sel.task_index = sel.decision.selected;
    sel.task_id = bundle.masks[static_cast<std::size_t>(sel.task_index)].task_id;
    return sel;
}

// --- bundle directory layout ---------------------------------------------
// base.ntm, tau_merge.ntm, masks/<task>.ntm, shared_expert.ntm,
// heads/<task>.ntm, router.json

inline void save_bundle(const RouterBundle& bundle, const std::string& dir) {
    namespace fs = std::filesystem;
    bundle.validate();
    fs::create_directories(fs::path(dir) / "masks");
    fs::create_directories(fs::path(dir) / "heads");
    save_checkpoint(bundle.base, (fs::path(dir) / "base.ntm").string());
    save_checkpoint(bundle.tau_merge.tau_merge, (fs::path(dir) / "tau_merge.ntm").string());
    for (const auto& m : bundle.masks)
        save_checkpoint(m.masks, (fs::path(dir) / "masks" / (m.task_id + ".ntm")).string());
    NamedTensorMap shared = bundle.expert.shared;
    expert_config_to_metadata(bundle.expert.config, shared.metadata);
    shared.metadata["kind"] = "action_expert_shared";
    shared.metadata["head_start_l"] = std::to_string(bundle.expert.head_start_l);
    save_checkpoint(shared, (fs::path(dir) / "shared_expert.ntm").string());
    for (const auto& h : bundle.expert.heads) {
        NamedTensorMap hp = h.params;
        expert_config_to_metadata(bundle.expert.config, hp.metadata);
        hp.metadata["kind"] = "expert_head";
        hp.metadata["head_start_l"] = std::to_string(h.start_block);
        hp.metadata["task_id"] = h.task_id;
        save_checkpoint(hp, (fs::path(dir) / "heads" / (h.task_id + ".ntm")).string());
    }
    nlohmann::ordered_json j;
    j["k_r"] = bundle.subspace.k_r;
    j["source_block"] = bundle.subspace.source_block;
    j["kind"] = to_string(bundle.subspace.kind);
    std::ofstream f((fs::path(dir) / "router.json").string(), std::ios::trunc);
    f << j.dump(2) << "\n";
}

inline RouterBundle load_bundle(const std::string& dir) {
    namespace fs = std::filesystem;
    RouterBundle bundle;
    bundle.base = load_checkpoint((fs::path(dir) / "base.ntm").string());
    bundle.tau_merge.tau_merge = load_checkpoint((fs::path(dir) / "tau_merge.ntm").string());
    {
        auto it = bundle.tau_merge.tau_merge.metadata.find("base_fingerprint");
        if (it != bundle.tau_merge.tau_merge.metadata.end()) bundle.tau_merge.base_fingerprint = it->second;
    }

    std::vector<std::string> mask_files;
    for (const auto& entry : fs::directory_iterator(fs::path(dir) / "masks"))
        if (entry.path().extension() == ".ntm") mask_files.push_back(entry.path().string());
    std::sort(mask_files.begin(), mask_files.end());
    for (const auto& path : mask_files) {
        TaskMask m;
        m.masks = load_checkpoint(path);
        auto it = m.masks.metadata.find("task_id");
        m.task_id = it != m.masks.metadata.end() ? it->second : fs::path(path).stem().string();
        auto lt = m.masks.metadata.find("lambda");
        if (lt != m.masks.metadata.end()) m.lambda = std::stof(lt->second);
        bundle.masks.push_back(std::move(m));
    }

    NamedTensorMap shared = load_checkpoint((fs::path(dir) / "shared_expert.ntm").string());
    bundle.expert.config = expert_config_from_metadata(shared.metadata);
    bundle.expert.head_start_l = std::stoi(shared.metadata.at("head_start_l"));
    bundle.expert.shared = std::move(shared);

    std::vector<std::string> head_files;
    for (const auto& entry : fs::directory_iterator(fs::path(dir) / "heads"))
        if (entry.path().extension() == ".ntm") head_files.push_back(entry.path().string());
    std::sort(head_files.begin(), head_files.end());
    for (const auto& path : head_files) {
        ExpertHead h;
        h.params = load_checkpoint(path);
        h.start_block = std::stoi(h.params.metadata.at("head_start_l"));
        auto it = h.params.metadata.find("task_id");
        h.task_id = it != h.params.metadata.end() ? it->second : fs::path(path).stem().string();
        bundle.expert.heads.push_back(std::move(h));
    }

    std::ifstream f((fs::path(dir) / "router.json").string());
    if (!f) throw std::runtime_error("load_bundle: missing router.json in '" + dir + "'");
    nlohmann::json j = nlohmann::json::parse(f);
    int k_r = j.at("k_r").get<int>();
    int source_block = j.at("source_block").get<int>();
    SubspaceKind kind = subspace_kind_from_string(j.at("kind").get<std::string>());
    bundle.subspace = extract_subspace(bundle.expert.shared, source_block, k_r, kind);
    bundle.validate();
    return bundle;
}

}  // namespace mergeforge
