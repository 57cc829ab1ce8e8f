#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mergeforge/csv.hpp"
#include "mergeforge/toy.hpp"

namespace mergeforge {

// End-to-end report: per-task MSE of (a) individually finetuned experts,
// (b) masked merge with routed expert heads, (c) naive full averaging with
// merged heads and no masks, plus the interference diagnostics.
struct PipelineReport {
    std::vector<std::string> task_ids;
    std::vector<double> mse_finetuned;      // (a)
    std::vector<double> mse_masked_routed;  // (b)
    std::vector<double> mse_naive;          // (c)
    std::vector<double> mse_pretrained;     // mixture baseline on each task
    double routing_accuracy = 0.0;
    struct EpisodeRow {
        int true_task = 0;
        int episode = 0;
        int routed_task = 0;
        std::vector<double> probs;
    };
    std::vector<EpisodeRow> episodes;
    std::vector<std::pair<int, double>> selfish_by_m;  // (task count, selfish ratio)
    MaskStats mask_stats;
    std::vector<double> block_dist;
    std::vector<std::pair<int, double>> progressive;  // (merged leading blocks, ref-task MSE)
    double pretrain_loss_first = 0.0;
    double pretrain_loss_last = 0.0;
};

// Averages every tensor of every expert, output heads included. The failure
// mode the mask/head machinery exists to avoid.
inline ActionExpert naive_average_experts(const std::vector<ActionExpert>& experts) {
    detail::check_expert_compat(experts);
    ActionExpert out;
    out.config = experts[0].config;
    out.task_id = "naive_average";
    for (const auto& [name, t] : experts[0].params) out.params.insert(name, detail::mean_of(experts, name));
    return out;
}

struct PipelineArtifacts {
    std::vector<ToyTask> tasks;
    PretrainResult pretrain;
    std::vector<FinetuneResult> finetuned;
    std::vector<TaskVector> task_vectors;
    MergedVector merged;
    std::vector<TaskMask> masks;
    MergedExpert merged_expert;
    RouterBundle bundle;
};

// k = 0 keeps the reference expert intact; k = L averages every block. The
// output head always stays with the reference task.
inline std::vector<std::pair<int, double>> progressive_merge_eval(
    const std::vector<ActionExpert>& experts, const BackboneConfig& bcfg, const NamedTensorMap& ref_backbone,
    const std::vector<std::pair<std::vector<double>, Tensor>>& ref_eval_set, int num_queries,
    std::size_t ref_index = 0, std::vector<int> k_grid = {}) {
    const int L = experts.at(0).config.num_blocks;
    if (k_grid.empty())
        for (int k = 0; k <= L; ++k) k_grid.push_back(k);
    std::vector<std::pair<int, double>> out;
    for (int k : k_grid) {
        ActionExpert hybrid = progressive_hybrid(experts, k, ref_index);
        out.emplace_back(k, eval_mse(bcfg, ref_backbone, hybrid, ref_eval_set, num_queries));
    }
    return out;
}

inline PipelineReport run_pipeline(const ToyConfig& cfg, PipelineArtifacts* artifacts = nullptr) {
    cfg.validate();
    PipelineReport report;

    std::vector<ToyTask> tasks = gen_tasks(cfg.num_tasks, cfg.seed, cfg.task_spec);
    for (const auto& t : tasks) report.task_ids.push_back(t.task_id);

    PretrainResult pre = pretrain_backbone(tasks, cfg);
    if (!pre.loss_history.empty()) {
        report.pretrain_loss_first = pre.loss_history.front();
        report.pretrain_loss_last = pre.loss_history.back();
    }

    std::vector<FinetuneResult> fts;
    std::vector<ActionExpert> experts;
    std::vector<TaskVector> taus;
    for (const auto& task : tasks) {
        fts.push_back(finetune_task(pre.backbone, task, cfg, cfg.expert_warm_start ? &pre.expert : nullptr));
        experts.push_back(fts.back().expert);
        taus.push_back(extract(fts.back().theta_m, pre.backbone.params, task.task_id));
    }

    MergeRecipe recipe = cfg.recipe;
    recipe.task_ids.clear();
    for (const auto& t : tasks) recipe.task_ids.push_back(t.task_id);
    const int L = cfg.expert.num_blocks;
    const int head_l = recipe.head_start_l > 0 ? recipe.head_start_l : L;

    MergedVector merged = merge(recipe, taus);
    std::vector<TaskMask> masks;
    for (const auto& tau : taus) masks.push_back(build_mask(tau, merged, recipe.lambda));

    MergedExpert merged_expert = merge_experts(experts, head_l);
    if (head_l < 2) throw std::runtime_error("pipeline: routing needs head_start_l >= 2 (block l-1 must be merged)");
    RouterSubspace subspace = extract_subspace(merged_expert.shared, head_l - 1, cfg.k_r, cfg.subspace_kind);

    RouterBundle bundle;
    bundle.base = pre.backbone.params;
    bundle.tau_merge = merged;
    bundle.masks = masks;
    bundle.expert = merged_expert;
    bundle.subspace = subspace;
    bundle.validate();

    // Shared per-task evaluation sets: all variants see the same observations.
    std::vector<std::vector<std::pair<std::vector<double>, Tensor>>> eval_sets;
    for (const auto& task : tasks) eval_sets.push_back(make_eval_set(task, cfg.eval_episodes, cfg.seed));

    // (a) per-task finetuned, plus the pretrained mixture baseline
    for (std::size_t m = 0; m < tasks.size(); ++m) {
        report.mse_finetuned.push_back(
            eval_mse(cfg.backbone, fts[m].theta_m, fts[m].expert, eval_sets[m], cfg.num_queries));
        report.mse_pretrained.push_back(
            eval_mse(cfg.backbone, pre.backbone.params, pre.expert, eval_sets[m], cfg.num_queries));
    }

    // (b) masked merge + routed heads: route once per episode on the initial
    // observation, then run the selected masked variant and assembled expert.
    std::vector<NamedTensorMap> masked_variants;
    std::vector<ActionExpert> assembled;
    for (std::size_t m = 0; m < tasks.size(); ++m) {
        masked_variants.push_back(apply_mask(bundle.base, bundle.tau_merge, bundle.masks[m]));
        assembled.push_back(assemble_expert(merged_expert, merged_expert.heads[m]));
    }
    int correct = 0, total = 0;
    report.mse_masked_routed.assign(tasks.size(), 0.0);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        double mse_sum = 0.0;
        for (std::size_t e = 0; e < eval_sets[t].size(); ++e) {
            const auto& [x, y] = eval_sets[t][e];
            StreamEncoder encoder = [&](const NamedTensorMap& masked_theta) {
                BackboneNet net(cfg.backbone, masked_theta);
                BackboneNet::Trace tr = net.forward(x);
                return std::make_pair(tr.streams.h_t[static_cast<std::size_t>(head_l - 2)],
                                      tr.streams.h_a[static_cast<std::size_t>(head_l - 2)]);
            };
            EpisodeSelection sel = route_episode(bundle, encoder, cfg.matched_pairing);
            const std::size_t m_star = static_cast<std::size_t>(sel.task_index);
            BackboneNet vnet(cfg.backbone, masked_variants[m_star]);
            BackboneNet::Trace tr = vnet.forward(x);
            tr.streams.num_queries = cfg.num_queries;
            ExpertNet enet(assembled[m_star].config, assembled[m_star].params);
            std::vector<double> pred = enet.forward(tr.streams, nullptr);
            double mse = 0.0;
            for (std::size_t i = 0; i < pred.size(); ++i) {
                double diff = pred[i] - static_cast<double>(y.data[i]);
                mse += diff * diff;
            }
            mse_sum += mse / static_cast<double>(pred.size());
            if (sel.task_index == static_cast<int>(t)) ++correct;
            ++total;
            PipelineReport::EpisodeRow row;
            row.true_task = static_cast<int>(t);
            row.episode = static_cast<int>(e);
            row.routed_task = sel.task_index;
            row.probs = sel.decision.probs;
            report.episodes.push_back(std::move(row));
        }
        report.mse_masked_routed[t] = mse_sum / static_cast<double>(eval_sets[t].size());
    }
    report.routing_accuracy = total > 0 ? static_cast<double>(correct) / total : 0.0;

    // (c) naive full averaging, masks and routing disabled
    {
        std::vector<TaskVector> tcopy = taus;
        MergedVector avg = merge_average(tcopy);
        NamedTensorMap naive_backbone = apply_delta(pre.backbone.params, avg.tau_merge, 1.0f);
        ActionExpert naive_expert = naive_average_experts(experts);
        for (std::size_t t = 0; t < tasks.size(); ++t)
            report.mse_naive.push_back(
                eval_mse(cfg.backbone, naive_backbone, naive_expert, eval_sets[t], cfg.num_queries));
    }

    // Diagnostics
    report.mask_stats = compute_mask_stats(masks);
    for (int m_sub = 2; m_sub <= static_cast<int>(tasks.size()); ++m_sub) {
        std::vector<TaskVector> sub(taus.begin(), taus.begin() + m_sub);
        MergeRecipe sub_recipe = recipe;
        sub_recipe.task_ids.assign(recipe.task_ids.begin(), recipe.task_ids.begin() + m_sub);
        MergedVector sub_merged = merge(sub_recipe, sub);
        std::vector<TaskMask> sub_masks;
        for (const auto& tau : sub) sub_masks.push_back(build_mask(tau, sub_merged, sub_recipe.lambda));
        report.selfish_by_m.emplace_back(m_sub, selfish_ratio(sub_masks));
    }
    if (experts.size() >= 2) report.block_dist = block_distance(experts);
    report.progressive = progressive_merge_eval(experts, cfg.backbone, fts[0].theta_m, eval_sets[0], cfg.num_queries, 0);

    if (artifacts) {
        artifacts->tasks = std::move(tasks);
        artifacts->pretrain = std::move(pre);
        artifacts->finetuned = std::move(fts);
        artifacts->task_vectors = std::move(taus);
        artifacts->merged = std::move(merged);
        artifacts->masks = std::move(masks);
        artifacts->merged_expert = std::move(merged_expert);
        artifacts->bundle = std::move(bundle);
    }
    return report;
}

inline void write_report(const PipelineReport& r, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        CsvWriter csv((fs::path(out_dir) / "metrics.csv").string());
        csv.header({"task_id", "mse_finetuned", "mse_masked_routed", "mse_naive_avg", "mse_pretrained",
                    "ratio_masked_over_finetuned", "ratio_naive_over_finetuned"});
        for (std::size_t i = 0; i < r.task_ids.size(); ++i) {
            double a = r.mse_finetuned[i];
            csv.row({r.task_ids[i], fmt_double(a), fmt_double(r.mse_masked_routed[i]), fmt_double(r.mse_naive[i]),
                     fmt_double(r.mse_pretrained[i]), fmt_double(a > 0 ? r.mse_masked_routed[i] / a : 0.0),
                     fmt_double(a > 0 ? r.mse_naive[i] / a : 0.0)});
        }
    }
    {
        CsvWriter csv((fs::path(out_dir) / "routing.csv").string());
        std::vector<std::string> header = {"true_task", "episode", "routed_task", "correct"};
        for (const auto& id : r.task_ids) header.push_back("prob_" + id);
        csv.header(header);
        for (const auto& row : r.episodes) {
            std::vector<std::string> cells = {std::to_string(row.true_task), std::to_string(row.episode),
                                              std::to_string(row.routed_task),
                                              row.true_task == row.routed_task ? "1" : "0"};
            for (double p : row.probs) cells.push_back(fmt_double(p));
            csv.row(cells);
        }
    }
    {
        CsvWriter csv((fs::path(out_dir) / "mask_stats.csv").string());
        csv.header({"stat", "key", "value"});
        csv.row({"selfish_ratio", "", fmt_double(r.mask_stats.selfish_ratio)});
        for (const auto& [m, v] : r.selfish_by_m) csv.row({"selfish_ratio_at_m", std::to_string(m), fmt_double(v)});
        for (const auto& [task, v] : r.mask_stats.per_task_active_ratio)
            csv.row({"active_ratio_task", task, fmt_double(v)});
        for (const auto& [comp, v] : r.mask_stats.per_component_active_ratio)
            csv.row({"active_ratio_component", comp, fmt_double(v)});
        csv.row({"routing_accuracy", "", fmt_double(r.routing_accuracy)});
    }
    {
        CsvWriter csv((fs::path(out_dir) / "block_distance.csv").string());
        csv.header({"block", "mean_relative_l2"});
        for (std::size_t b = 0; b < r.block_dist.size(); ++b)
            csv.row({std::to_string(b + 1), fmt_double(r.block_dist[b])});
    }
    {
        CsvWriter csv((fs::path(out_dir) / "progressive.csv").string());
        csv.header({"merged_leading_blocks", "ref_task_mse"});
        for (const auto& [k, v] : r.progressive) csv.row({std::to_string(k), fmt_double(v)});
    }
}

}  // namespace mergeforge
