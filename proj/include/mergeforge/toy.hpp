#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergeforge/csv.hpp"
#include "mergeforge/expert.hpp"
#include "mergeforge/expert_ops.hpp"
#include "mergeforge/mask.hpp"
#include "mergeforge/merge.hpp"
#include "mergeforge/optim.hpp"
#include "mergeforge/rng.hpp"
#include "mergeforge/router.hpp"
#include "mergeforge/task_vector.hpp"

namespace mergeforge {

// Synthetic multi-task control harness. A small tanh trunk stands in for the
// frozen backbone: each block mixes the previous hidden state with a direct
// observation skip projection, and per-block tap projections expose the
// (h_T, h_A) conditioning streams. Per-task specialization happens only
// through low-rank adapters on the first two skip projections and through the
// task experts, so every merging/masking/routing stage operates on the same
// shapes it would see at full scale.

struct BackboneConfig {
    int d_obs = 16;
    int d_h = 64;
    int d_model = 16;
    int seq_t = 4;
    int seq_a = 4;
    int num_blocks = 4;

    void validate() const {
        if (d_obs < 1 || d_h < 1 || d_model < 1 || seq_t < 1 || seq_a < 1 || num_blocks < 2)
            throw std::runtime_error("backbone config: bad dimensions (need num_blocks >= 2)");
    }
    bool operator==(const BackboneConfig&) const = default;
};

struct ToyBackbone {
    BackboneConfig config;
    NamedTensorMap params;
};

inline const std::vector<std::string>& lora_target_names() {
    static const std::vector<std::string> names = {"skip.block1.w", "skip.block2.w"};
    return names;
}

inline void backbone_config_to_metadata(const BackboneConfig& cfg, std::map<std::string, std::string>& md) {
    md["d_obs"] = std::to_string(cfg.d_obs);
    md["d_h"] = std::to_string(cfg.d_h);
    md["d_model"] = std::to_string(cfg.d_model);
    md["seq_t"] = std::to_string(cfg.seq_t);
    md["seq_a"] = std::to_string(cfg.seq_a);
    md["num_blocks"] = std::to_string(cfg.num_blocks);
}

inline BackboneConfig backbone_config_from_metadata(const std::map<std::string, std::string>& md) {
    auto get = [&md](const std::string& k) {
        auto it = md.find(k);
        if (it == md.end()) throw std::runtime_error("backbone checkpoint: missing metadata key '" + k + "'");
        return std::stoi(it->second);
    };
    BackboneConfig cfg;
    cfg.d_obs = get("d_obs");
    cfg.d_h = get("d_h");
    cfg.d_model = get("d_model");
    cfg.seq_t = get("seq_t");
    cfg.seq_a = get("seq_a");
    cfg.num_blocks = get("num_blocks");
    cfg.validate();
    return cfg;
}

inline ToyBackbone init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ToyBackbone b;
    b.config = cfg;
    Rng rng(seed);
    auto uniform_fanin = [&rng](std::vector<std::int64_t> shape, std::int64_t fan_in) {
        Tensor t(shape);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
        return t;
    };
    const std::int64_t dh = cfg.d_h, dobs = cfg.d_obs, dm = cfg.d_model;
    b.params.insert("embed.w", uniform_fanin({dh, dobs}, dobs));
    b.params.insert("embed.b", Tensor({dh}, 0.0f));
    for (int i = 1; i <= cfg.num_blocks; ++i) {
        const std::string p = "trunk.block" + std::to_string(i) + ".";
        b.params.insert(p + "w", uniform_fanin({dh, dh}, dh));
        b.params.insert(p + "b", Tensor({dh}, 0.0f));
        b.params.insert("skip.block" + std::to_string(i) + ".w", uniform_fanin({dh, dobs}, dobs));
    }
    for (int i = 1; i <= cfg.num_blocks; ++i) {
        b.params.insert("tap_t.block" + std::to_string(i) + ".w",
                        uniform_fanin({static_cast<std::int64_t>(cfg.seq_t) * dm, dh}, dh));
        b.params.insert("tap_a.block" + std::to_string(i) + ".w",
                        uniform_fanin({static_cast<std::int64_t>(cfg.seq_a) * dm, dh}, dh));
    }
    b.params.metadata["kind"] = "toy_backbone";
    backbone_config_to_metadata(cfg, b.params.metadata);
    return b;
}

// Double-precision working copy of the backbone, optionally carrying low-rank
// adapters on the designated projection tensors (y = (W + scaling*up*down) x).
class BackboneNet {
public:
    struct Lora {
        Mat down;  // r x d_in
        Mat up;    // d_out x r
        double scaling = 1.0;
    };

    BackboneNet(const BackboneConfig& cfg, const NamedTensorMap& params) : cfg_(cfg) {
        cfg.validate();
        embed_w_ = Mat::from_tensor(params.at("embed.w"));
        const Tensor& eb = params.at("embed.b");
        embed_b_.assign(eb.data.begin(), eb.data.end());
        for (int i = 1; i <= cfg.num_blocks; ++i) {
            const std::string p = "trunk.block" + std::to_string(i) + ".";
            trunk_w_.push_back(Mat::from_tensor(params.at(p + "w")));
            const Tensor& tb = params.at(p + "b");
            trunk_b_.emplace_back(tb.data.begin(), tb.data.end());
            skip_w_.push_back(Mat::from_tensor(params.at("skip.block" + std::to_string(i) + ".w")));
            tap_t_.push_back(Mat::from_tensor(params.at("tap_t.block" + std::to_string(i) + ".w")));
            tap_a_.push_back(Mat::from_tensor(params.at("tap_a.block" + std::to_string(i) + ".w")));
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    // Targets follow lora_target_names(): the adapters sit on the first two
    // observation skip projections. Either factor may be the trained one; the
    // other starts so that the update begins at zero.
    void attach_lora(int rank, double scaling, std::uint64_t seed, bool train_up = false) {
        Rng rng(seed);
        lora_.clear();
        auto make = [&](std::int64_t rows, std::int64_t cols) {
            Lora l;
            l.down = Mat(rank, cols);
            l.up = Mat(rows, rank);
            l.scaling = scaling;
            if (train_up) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
                for (auto& v : l.down.data) v = rng.uniform(-bound, bound);
            } else {
                const double bound = 1.0 / std::sqrt(static_cast<double>(rank));
                for (auto& v : l.up.data) v = rng.uniform(-bound, bound);
            }
            return l;
        };
        lora_.push_back(make(skip_w_[0].rows, skip_w_[0].cols));
        lora_.push_back(make(skip_w_[1].rows, skip_w_[1].cols));
    }

    bool has_lora() const { return !lora_.empty(); }
    std::vector<Lora>& lora() { return lora_; }

    Mat with_lora(const Mat& base, int lora_index) const {
        if (lora_.empty()) return base;
        const Lora& l = lora_[static_cast<std::size_t>(lora_index)];
        Mat w = base;
        for (std::int64_t i = 0; i < w.rows; ++i)
            for (std::int64_t j = 0; j < w.cols; ++j) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < l.down.rows; ++k) acc += l.up.at(i, k) * l.down.at(k, j);
                w.at(i, j) += l.scaling * acc;
            }
        return w;
    }

    Mat effective_skip(int block_0based) const {
        if (block_0based <= 1 && !lora_.empty()) return with_lora(skip_w_[static_cast<std::size_t>(block_0based)], block_0based);
        return skip_w_[static_cast<std::size_t>(block_0based)];
    }

    struct Trace {
        std::vector<double> x;
        std::vector<std::vector<double>> z;  // z[0] = embed activation, z[i] = block-i activation
        ExpertInputs streams;
    };

    Trace forward(const std::vector<double>& x) const {
        if (static_cast<int>(x.size()) != cfg_.d_obs)
            throw std::runtime_error("backbone forward: observation has " + std::to_string(x.size()) +
                                     " entries, expected " + std::to_string(cfg_.d_obs));
        Trace tr;
        tr.x = x;
        std::vector<double> z(static_cast<std::size_t>(cfg_.d_h));
        for (std::int64_t i = 0; i < cfg_.d_h; ++i) {
            double acc = embed_b_[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < cfg_.d_obs; ++j) acc += embed_w_.at(i, j) * x[static_cast<std::size_t>(j)];
            z[static_cast<std::size_t>(i)] = std::tanh(acc);
        }
        tr.z.push_back(z);
        tr.streams.num_queries = 0;  // caller sets
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const Mat& w = trunk_w_[static_cast<std::size_t>(b)];
            Mat u = effective_skip(b);
            std::vector<double> nz(static_cast<std::size_t>(cfg_.d_h));
            for (std::int64_t i = 0; i < cfg_.d_h; ++i) {
                double acc = trunk_b_[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < cfg_.d_h; ++j) acc += w.at(i, j) * z[static_cast<std::size_t>(j)];
                for (std::int64_t j = 0; j < cfg_.d_obs; ++j) acc += u.at(i, j) * x[static_cast<std::size_t>(j)];
                nz[static_cast<std::size_t>(i)] = std::tanh(acc);
            }
            z = std::move(nz);
            tr.z.push_back(z);

            auto tap = [this, &z](const Mat& m, int seq) {
                Tensor t({seq, cfg_.d_model});
                for (std::int64_t i = 0; i < m.rows; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < m.cols; ++j) acc += m.at(i, j) * z[static_cast<std::size_t>(j)];
                    t.data[static_cast<std::size_t>(i)] = static_cast<float>(acc);
                }
                return t;
            };
            tr.streams.h_t.push_back(tap(tap_t_[static_cast<std::size_t>(b)], cfg_.seq_t));
            tr.streams.h_a.push_back(tap(tap_a_[static_cast<std::size_t>(b)], cfg_.seq_a));
        }
        return tr;
    }

    struct Grads {
        Mat embed_w;
        std::vector<double> embed_b;
        std::vector<Mat> trunk_w;
        std::vector<std::vector<double>> trunk_b;
        std::vector<Mat> skip_w;
        std::vector<Mat> tap_t, tap_a;
        std::vector<Mat> lora_down, lora_up;
    };

    Grads zero_grads() const {
        Grads g;
        g.embed_w = Mat(cfg_.d_h, cfg_.d_obs);
        g.embed_b.assign(static_cast<std::size_t>(cfg_.d_h), 0.0);
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            g.trunk_w.emplace_back(cfg_.d_h, cfg_.d_h);
            g.trunk_b.emplace_back(static_cast<std::size_t>(cfg_.d_h), 0.0);
            g.skip_w.emplace_back(cfg_.d_h, cfg_.d_obs);
            g.tap_t.emplace_back(static_cast<std::int64_t>(cfg_.seq_t) * cfg_.d_model, cfg_.d_h);
            g.tap_a.emplace_back(static_cast<std::int64_t>(cfg_.seq_a) * cfg_.d_model, cfg_.d_h);
        }
        for (const auto& l : lora_) {
            g.lora_down.emplace_back(l.down.rows, l.down.cols);
            g.lora_up.emplace_back(l.up.rows, l.up.cols);
        }
        return g;
    }

    // Accumulates gradients given the expert's stream gradients dh_t/dh_a
    // (one Mat per block, seq x d_model).
    void backward(const Trace& tr, const std::vector<Mat>& dh_t, const std::vector<Mat>& dh_a, Grads& g) const {
        std::vector<std::vector<double>> dz(static_cast<std::size_t>(cfg_.num_blocks) + 1,
                                            std::vector<double>(static_cast<std::size_t>(cfg_.d_h), 0.0));
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const std::vector<double>& z = tr.z[static_cast<std::size_t>(b) + 1];
            auto tap_back = [this, &z](const Mat& m, const Mat& dh, Mat& gm, std::vector<double>& dz_out) {
                // dh is (seq x d_model) laid out to match the tap rows
                for (std::int64_t i = 0; i < m.rows; ++i) {
                    double di = dh.data[static_cast<std::size_t>(i)];
                    if (di == 0.0) continue;
                    for (std::int64_t j = 0; j < m.cols; ++j) {
                        gm.at(i, j) += di * z[static_cast<std::size_t>(j)];
                        dz_out[static_cast<std::size_t>(j)] += di * m.at(i, j);
                    }
                }
            };
            tap_back(tap_t_[static_cast<std::size_t>(b)], dh_t[static_cast<std::size_t>(b)],
                     g.tap_t[static_cast<std::size_t>(b)], dz[static_cast<std::size_t>(b) + 1]);
            tap_back(tap_a_[static_cast<std::size_t>(b)], dh_a[static_cast<std::size_t>(b)],
                     g.tap_a[static_cast<std::size_t>(b)], dz[static_cast<std::size_t>(b) + 1]);
        }

        for (int b = cfg_.num_blocks - 1; b >= 0; --b) {
            const std::vector<double>& z_out = tr.z[static_cast<std::size_t>(b) + 1];
            const std::vector<double>& z_in = tr.z[static_cast<std::size_t>(b)];
            const Mat& w = trunk_w_[static_cast<std::size_t>(b)];
            std::vector<double> dpre(static_cast<std::size_t>(cfg_.d_h));
            for (std::int64_t i = 0; i < cfg_.d_h; ++i) {
                double zo = z_out[static_cast<std::size_t>(i)];
                dpre[static_cast<std::size_t>(i)] = dz[static_cast<std::size_t>(b) + 1][static_cast<std::size_t>(i)] * (1.0 - zo * zo);
            }
            Mat dw(cfg_.d_h, cfg_.d_h);
            Mat du(cfg_.d_h, cfg_.d_obs);
            for (std::int64_t i = 0; i < cfg_.d_h; ++i) {
                double di = dpre[static_cast<std::size_t>(i)];
                g.trunk_b[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)] += di;
                if (di == 0.0) continue;
                for (std::int64_t j = 0; j < cfg_.d_h; ++j) {
                    dw.at(i, j) = di * z_in[static_cast<std::size_t>(j)];
                    dz[static_cast<std::size_t>(b)][static_cast<std::size_t>(j)] += di * w.at(i, j);
                }
                for (std::int64_t j = 0; j < cfg_.d_obs; ++j) du.at(i, j) = di * tr.x[static_cast<std::size_t>(j)];
            }
            if (!lora_.empty() && b <= 1) accumulate_lora_grads(b, du, g);
            for (std::size_t i = 0; i < dw.data.size(); ++i) g.trunk_w[static_cast<std::size_t>(b)].data[i] += dw.data[i];
            for (std::size_t i = 0; i < du.data.size(); ++i) g.skip_w[static_cast<std::size_t>(b)].data[i] += du.data[i];
        }

        // embed layer
        Mat dw_embed(cfg_.d_h, cfg_.d_obs);
        for (std::int64_t i = 0; i < cfg_.d_h; ++i) {
            double z0 = tr.z[0][static_cast<std::size_t>(i)];
            double di = dz[0][static_cast<std::size_t>(i)] * (1.0 - z0 * z0);
            g.embed_b[static_cast<std::size_t>(i)] += di;
            if (di == 0.0) continue;
            for (std::int64_t j = 0; j < cfg_.d_obs; ++j) dw_embed.at(i, j) = di * tr.x[static_cast<std::size_t>(j)];
        }
        for (std::size_t i = 0; i < dw_embed.data.size(); ++i) g.embed_w.data[i] += dw_embed.data[i];
    }

    // dUp = s * dW * down^T ; dDown = s * up^T * dW
    void accumulate_lora_grads(int index, const Mat& dw, Grads& g) const {
        const Lora& l = lora_[static_cast<std::size_t>(index)];
        Mat& gup = g.lora_up[static_cast<std::size_t>(index)];
        Mat& gdown = g.lora_down[static_cast<std::size_t>(index)];
        for (std::int64_t i = 0; i < gup.rows; ++i)
            for (std::int64_t k = 0; k < gup.cols; ++k) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < dw.cols; ++j) acc += dw.at(i, j) * l.down.at(k, j);
                gup.at(i, k) += l.scaling * acc;
            }
        for (std::int64_t k = 0; k < gdown.rows; ++k)
            for (std::int64_t j = 0; j < gdown.cols; ++j) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < dw.rows; ++i) acc += l.up.at(i, k) * dw.at(i, j);
                gdown.at(k, j) += l.scaling * acc;
            }
    }

    // Snapshot to float32, folding any adapters into the trunk targets.
    NamedTensorMap export_params() const {
        NamedTensorMap out;
        out.metadata["kind"] = "toy_backbone";
        backbone_config_to_metadata(cfg_, out.metadata);
        out.insert("embed.w", embed_w_.to_tensor());
        {
            Tensor t({cfg_.d_h});
            for (std::size_t i = 0; i < embed_b_.size(); ++i) t.data[i] = static_cast<float>(embed_b_[i]);
            out.insert("embed.b", std::move(t));
        }
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const std::string p = "trunk.block" + std::to_string(b + 1) + ".";
            out.insert(p + "w", trunk_w_[static_cast<std::size_t>(b)].to_tensor());
            Tensor t({cfg_.d_h});
            for (std::size_t i = 0; i < trunk_b_[static_cast<std::size_t>(b)].size(); ++i)
                t.data[i] = static_cast<float>(trunk_b_[static_cast<std::size_t>(b)][i]);
            out.insert(p + "b", std::move(t));
            out.insert("skip.block" + std::to_string(b + 1) + ".w", effective_skip(b).to_tensor());
        }
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            out.insert("tap_t.block" + std::to_string(b + 1) + ".w", tap_t_[static_cast<std::size_t>(b)].to_tensor());
            out.insert("tap_a.block" + std::to_string(b + 1) + ".w", tap_a_[static_cast<std::size_t>(b)].to_tensor());
        }
        return out;
    }

    Mat& embed_w() { return embed_w_; }
    std::vector<double>& embed_b() { return embed_b_; }
    std::vector<Mat>& trunk_w() { return trunk_w_; }
    std::vector<std::vector<double>>& trunk_b() { return trunk_b_; }
    std::vector<Mat>& skip_w() { return skip_w_; }
    std::vector<Mat>& tap_t() { return tap_t_; }
    std::vector<Mat>& tap_a() { return tap_a_; }

private:
    BackboneConfig cfg_;
    Mat embed_w_;
    std::vector<double> embed_b_;
    std::vector<Mat> trunk_w_;
    std::vector<std::vector<double>> trunk_b_;
    std::vector<Mat> skip_w_;
    std::vector<Mat> tap_t_, tap_a_;
    std::vector<Lora> lora_;
};

// ---------------------------------------------------------------------------

// One synthetic task: an observation distribution plus a smooth target map
// observation -> action chunk (linear term plus a per-output sinusoid). Each
// task owns a disjoint anchor block of observation coordinates; its
// observations vary there and its targets read from there, so per-task
// finetuning updates flow through distinct backbone pathways.
struct ToyTask {
    std::string task_id;
    int index = 0;
    std::vector<double> obs_mean;
    std::vector<double> obs_sigma;         // per-coordinate noise scale
    Mat w_lin;                             // action_dim x d_obs
    std::vector<double> amp, freq, phase;  // per output dimension
    Mat dir;                               // action_dim x d_obs, unit rows
    int action_dim = 4;
    int horizon = 4;

    std::vector<double> sample_obs(Rng& rng) const {
        std::vector<double> x(obs_mean.size());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = obs_mean[i] + obs_sigma[i] * rng.normal();
        return x;
    }

    Tensor target(const std::vector<double>& x) const {
        Tensor out({horizon, action_dim});
        for (int j = 0; j < action_dim; ++j) {
            double lin = 0.0, proj = 0.0;
            for (std::size_t k = 0; k < x.size(); ++k) {
                lin += w_lin.at(j, static_cast<std::int64_t>(k)) * x[k];
                proj += dir.at(j, static_cast<std::int64_t>(k)) * x[k];
            }
            for (int h = 0; h < horizon; ++h) {
                double v = lin + amp[static_cast<std::size_t>(j)] *
                                     std::sin(freq[static_cast<std::size_t>(j)] * proj +
                                              phase[static_cast<std::size_t>(j)] + 0.4 * h);
                out.at(h, j) = static_cast<float>(v);
            }
        }
        return out;
    }

    std::vector<double> goal_params() const {
        std::vector<double> g(w_lin.data);
        g.insert(g.end(), amp.begin(), amp.end());
        g.insert(g.end(), freq.begin(), freq.end());
        g.insert(g.end(), phase.begin(), phase.end());
        return g;
    }
};

struct TaskGenSpec {
    int d_obs = 16;
    int action_dim = 4;
    int horizon = 4;
    int anchor_block = 4;     // coordinates owned by each task
    double obs_sep = 2.0;     // observation mean offset inside the anchor block
    double noise_in = 1.0;    // observation noise on anchor coordinates
    double noise_out = 0.15;  // observation noise elsewhere
    double goal_floor = 1.0;  // required pairwise goal-parameter distance
};

// Tasks regenerate deterministically from (seed, task_id). Each task owns a
// disjoint anchor coordinate block, which keeps observation distributions and
// goal parameters separated by construction; the floor is still checked.
inline ToyTask make_task(const TaskGenSpec& spec, std::uint64_t seed, int index) {
    ToyTask t;
    t.index = index;
    t.task_id = "task" + std::to_string(index);
    t.action_dim = spec.action_dim;
    t.horizon = spec.horizon;
    Rng rng(derive_seed(seed, "task:" + t.task_id));

    const int g = spec.anchor_block;
    const int start = (index * g) % spec.d_obs;
    auto in_block = [&](int k) { return k >= start && k < start + g; };

    t.obs_mean.assign(static_cast<std::size_t>(spec.d_obs), 0.0);
    t.obs_sigma.assign(static_cast<std::size_t>(spec.d_obs), spec.noise_out);
    for (int k = 0; k < spec.d_obs; ++k) {
        if (in_block(k)) {
            t.obs_mean[static_cast<std::size_t>(k)] =
                (spec.obs_sep / std::sqrt(static_cast<double>(g))) * (1.0 + 0.2 * rng.normal());
            t.obs_sigma[static_cast<std::size_t>(k)] = spec.noise_in;
        }
    }

    // targets read (almost only) the anchor block
    t.w_lin = Mat(spec.action_dim, spec.d_obs);
    for (int j = 0; j < spec.action_dim; ++j)
        for (int k = 0; k < spec.d_obs; ++k)
            t.w_lin.at(j, k) = in_block(k) ? 0.8 * rng.normal() : 0.05 * rng.normal();
    t.dir = Mat(spec.action_dim, spec.d_obs);
    for (int j = 0; j < spec.action_dim; ++j) {
        double norm = 0.0;
        for (int k = 0; k < spec.d_obs; ++k) {
            double v = in_block(k) ? rng.normal() : 0.0;
            t.dir.at(j, k) = v;
            norm += v * v;
        }
        norm = std::sqrt(norm);
        for (int k = 0; k < spec.d_obs; ++k) t.dir.at(j, k) /= norm;
    }
    t.amp.resize(static_cast<std::size_t>(spec.action_dim));
    t.freq.resize(static_cast<std::size_t>(spec.action_dim));
    t.phase.resize(static_cast<std::size_t>(spec.action_dim));
    for (int j = 0; j < spec.action_dim; ++j) {
        t.amp[static_cast<std::size_t>(j)] = rng.uniform(0.5, 1.2);
        t.freq[static_cast<std::size_t>(j)] = rng.uniform(0.6, 1.4);
        t.phase[static_cast<std::size_t>(j)] = rng.uniform(0.0, 6.283185307179586);
    }
    return t;
}

inline std::vector<ToyTask> gen_tasks(int m, std::uint64_t seed, const TaskGenSpec& spec = {}) {
    if (m < 1) throw std::runtime_error("gen_tasks: need at least one task");
    if (m * spec.anchor_block > spec.d_obs)
        throw std::runtime_error("gen_tasks: task count exceeds d_obs anchor capacity");
    std::vector<ToyTask> tasks;
    tasks.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) tasks.push_back(make_task(spec, seed, i));
    for (std::size_t i = 0; i < tasks.size(); ++i)
        for (std::size_t j = i + 1; j < tasks.size(); ++j) {
            auto gi = tasks[i].goal_params();
            auto gj = tasks[j].goal_params();
            double d2 = 0.0;
            for (std::size_t k = 0; k < gi.size(); ++k) d2 += (gi[k] - gj[k]) * (gi[k] - gj[k]);
            if (std::sqrt(d2) < spec.goal_floor)
                throw std::runtime_error("gen_tasks: tasks " + tasks[i].task_id + " and " + tasks[j].task_id +
                                         " fall below the goal separation floor");
        }
    return tasks;
}

// ---------------------------------------------------------------------------

struct ToyConfig {
    std::uint64_t seed = 0;
    int num_tasks = 4;
    BackboneConfig backbone;
    ExpertConfig expert;
    TaskGenSpec task_spec;

    ToyConfig() {
        expert.num_blocks = backbone.num_blocks;
        expert.d_model = backbone.d_model;
        task_spec.d_obs = backbone.d_obs;
        task_spec.action_dim = expert.action_dim;
        task_spec.horizon = expert.horizon;
    }
    int num_queries = 4;
    int lora_rank = 4;
    double lora_scaling = 1.0;
    bool lora_sgd = true;     // gradient-proportional updates concentrate adapter deltas
    double lora_lr = 0.3;
    double lora_weight_decay = 0.02;  // damps noise-driven drift in the adapter factors
    bool lora_train_up = false;       // frozen random up factor keeps the update linear in down
    int pretrain_steps = 1200;
    int finetune_steps = 1500;
    int batch_size = 8;
    double lr_pretrain = 3e-3;
    double lr_finetune = 3e-3;
    int eval_episodes = 25;  // per task
    MergeRecipe recipe;
    int k_r = 8;
    SubspaceKind subspace_kind = SubspaceKind::V;
    bool shared_expert_init = true;
    bool expert_warm_start = true;  // start task experts from the pretrained mixture expert
    bool matched_pairing = false;

    void validate() const {
        backbone.validate();
        expert.validate();
        recipe.validate();
        if (backbone.d_model != expert.d_model)
            throw std::runtime_error("toy config: backbone d_model must match expert d_model");
        if (backbone.num_blocks != expert.num_blocks)
            throw std::runtime_error("toy config: backbone block count must match expert block count");
        if (task_spec.action_dim != expert.action_dim || task_spec.horizon != expert.horizon)
            throw std::runtime_error("toy config: task action_dim/horizon must match expert config");
        if (num_tasks < 1) throw std::runtime_error("toy config: need at least one task");
        if (k_r > expert.d_model) throw std::runtime_error("toy config: k_r exceeds d_model");
    }
};

inline ToyConfig toy_config_from_json(const nlohmann::json& j) {
    ToyConfig c;
    auto get = [&j](const char* k, auto def) {
        using T = decltype(def);
        return j.contains(k) ? j[k].get<T>() : def;
    };
    c.seed = get("seed", static_cast<std::uint64_t>(0));
    c.num_tasks = get("num_tasks", 4);
    c.backbone.d_obs = get("d_obs", 16);
    c.backbone.d_h = get("d_h", 64);
    c.backbone.d_model = get("d_model", 16);
    c.backbone.seq_t = get("seq_t", 4);
    c.backbone.seq_a = get("seq_a", 4);
    c.backbone.num_blocks = get("num_blocks", 4);
    c.expert.num_blocks = c.backbone.num_blocks;
    c.expert.d_model = c.backbone.d_model;
    c.expert.n_heads = get("n_heads", 2);
    c.expert.d_ff = get("d_ff", 32);
    c.expert.action_dim = get("action_dim", 4);
    c.expert.horizon = get("horizon", 4);
    c.expert.positional_queries = get("positional_queries", true);
    c.task_spec.d_obs = c.backbone.d_obs;
    c.task_spec.action_dim = c.expert.action_dim;
    c.task_spec.horizon = c.expert.horizon;
    c.task_spec.anchor_block = get("anchor_block", 4);
    c.task_spec.obs_sep = get("obs_sep", 2.0);
    c.task_spec.noise_in = get("noise_in", 1.0);
    c.task_spec.noise_out = get("noise_out", 0.15);
    c.task_spec.goal_floor = get("goal_floor", 1.0);
    c.num_queries = get("num_queries", 4);
    c.lora_rank = get("lora_rank", 4);
    c.lora_scaling = get("lora_scaling", 1.0);
    c.lora_sgd = get("lora_sgd", true);
    c.lora_lr = get("lora_lr", 0.3);
    c.lora_weight_decay = get("lora_weight_decay", 0.02);
    c.lora_train_up = get("lora_train_up", false);
    c.pretrain_steps = get("pretrain_steps", 1200);
    c.finetune_steps = get("finetune_steps", 1500);
    c.batch_size = get("batch_size", 8);
    c.lr_pretrain = get("lr_pretrain", 3e-3);
    c.lr_finetune = get("lr_finetune", 3e-3);
    c.eval_episodes = get("eval_episodes", 25);
    if (j.contains("recipe")) c.recipe = recipe_from_json(j["recipe"]);
    c.k_r = get("k_r", 8);
    c.subspace_kind = subspace_kind_from_string(get("subspace_kind", std::string("V")));
    c.shared_expert_init = get("shared_expert_init", true);
    c.expert_warm_start = get("expert_warm_start", true);
    c.matched_pairing = get("matched_pairing", false);
    c.validate();
    return c;
}

inline ToyConfig load_toy_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("toy config: cannot open '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(f);
    return toy_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Training

struct PretrainResult {
    ToyBackbone backbone;
    ActionExpert expert;  // mixture expert, kept as the pretrained baseline
    std::vector<double> loss_history;
};

namespace toy_detail {

inline void adam_update_backbone(Adam& opt, BackboneNet& net, const BackboneNet::Grads& g, bool lora_only) {
    if (!lora_only) {
        opt.update("bb.embed.w", net.embed_w(), g.embed_w);
        opt.update("bb.embed.b", net.embed_b(), g.embed_b);
        for (std::size_t b = 0; b < net.trunk_w().size(); ++b) {
            opt.update("bb.trunk" + std::to_string(b) + ".w", net.trunk_w()[b], g.trunk_w[b]);
            opt.update("bb.trunk" + std::to_string(b) + ".b", net.trunk_b()[b], g.trunk_b[b]);
            opt.update("bb.skip" + std::to_string(b), net.skip_w()[b], g.skip_w[b]);
            opt.update("bb.tap_t" + std::to_string(b), net.tap_t()[b], g.tap_t[b]);
            opt.update("bb.tap_a" + std::to_string(b), net.tap_a()[b], g.tap_a[b]);
        }
    } else {
        for (std::size_t t = 0; t < net.lora().size(); ++t) {
            opt.update("lora" + std::to_string(t) + ".down", net.lora()[t].down, g.lora_down[t]);
            opt.update("lora" + std::to_string(t) + ".up", net.lora()[t].up, g.lora_up[t]);
        }
    }
}

inline void adam_update_expert(Adam& opt, ExpertNet& net, const ExpertNet::Grads& g) {
    for (std::size_t b = 0; b < net.blocks().size(); ++b) {
        const std::string p = "ex.block" + std::to_string(b) + ".";
        auto& w = net.blocks()[b];
        const auto& gw = g.blocks[b];
        opt.update(p + "ln_t.g", w.attn_t.ln_gamma, gw.attn_t.ln_gamma);
        opt.update(p + "ln_t.b", w.attn_t.ln_beta, gw.attn_t.ln_beta);
        opt.update(p + "at.wq", w.attn_t.wq, gw.attn_t.wq);
        opt.update(p + "at.wk", w.attn_t.wk, gw.attn_t.wk);
        opt.update(p + "at.wv", w.attn_t.wv, gw.attn_t.wv);
        opt.update(p + "at.wo", w.attn_t.wo, gw.attn_t.wo);
        opt.update(p + "ln_a.g", w.attn_a.ln_gamma, gw.attn_a.ln_gamma);
        opt.update(p + "ln_a.b", w.attn_a.ln_beta, gw.attn_a.ln_beta);
        opt.update(p + "aa.wq", w.attn_a.wq, gw.attn_a.wq);
        opt.update(p + "aa.wk", w.attn_a.wk, gw.attn_a.wk);
        opt.update(p + "aa.wv", w.attn_a.wv, gw.attn_a.wv);
        opt.update(p + "aa.wo", w.attn_a.wo, gw.attn_a.wo);
        opt.update(p + "ln_f.g", w.ln_f_gamma, gw.ln_f_gamma);
        opt.update(p + "ln_f.b", w.ln_f_beta, gw.ln_f_beta);
        opt.update(p + "ffn.w1", w.ffn_w1, gw.ffn_w1);
        opt.update(p + "ffn.w2", w.ffn_w2, gw.ffn_w2);
    }
    opt.update("ex.head.w", net.head_w(), g.head_w);
    opt.update("ex.head.b", net.head_b(), g.head_b);
}

inline void scale_expert_grads(ExpertNet::Grads& g, double s) {
    ExpertNet::Grads zero;  // unused; scale in place instead
    (void)zero;
    auto sc_v = [s](std::vector<double>& v) {
        for (auto& x : v) x *= s;
    };
    auto sc_m = [s](Mat& m) {
        for (auto& x : m.data) x *= s;
    };
    for (auto& b : g.blocks) {
        sc_v(b.attn_t.ln_gamma);
        sc_v(b.attn_t.ln_beta);
        sc_m(b.attn_t.wq);
        sc_m(b.attn_t.wk);
        sc_m(b.attn_t.wv);
        sc_m(b.attn_t.wo);
        sc_v(b.attn_a.ln_gamma);
        sc_v(b.attn_a.ln_beta);
        sc_m(b.attn_a.wq);
        sc_m(b.attn_a.wk);
        sc_m(b.attn_a.wv);
        sc_m(b.attn_a.wo);
        sc_v(b.ln_f_gamma);
        sc_v(b.ln_f_beta);
        sc_m(b.ffn_w1);
        sc_m(b.ffn_w2);
    }
    sc_m(g.head_w);
    sc_v(g.head_b);
    for (auto& m : g.dh_t) sc_m(m);
    for (auto& m : g.dh_a) sc_m(m);
}

inline void scale_backbone_grads(BackboneNet::Grads& g, double s) {
    auto sc_v = [s](std::vector<double>& v) {
        for (auto& x : v) x *= s;
    };
    auto sc_m = [s](Mat& m) {
        for (auto& x : m.data) x *= s;
    };
    sc_m(g.embed_w);
    sc_v(g.embed_b);
    for (auto& m : g.trunk_w) sc_m(m);
    for (auto& v : g.trunk_b) sc_v(v);
    for (auto& m : g.skip_w) sc_m(m);
    for (auto& m : g.tap_t) sc_m(m);
    for (auto& m : g.tap_a) sc_m(m);
    for (auto& m : g.lora_down) sc_m(m);
    for (auto& m : g.lora_up) sc_m(m);
}

}  // namespace toy_detail

inline PretrainResult pretrain_backbone(const std::vector<ToyTask>& tasks, const ToyConfig& cfg) {
    if (tasks.empty()) throw std::runtime_error("pretrain: no tasks");
    ToyBackbone init = init_backbone(cfg.backbone, derive_seed(cfg.seed, "backbone_init"));
    BackboneNet bnet(cfg.backbone, init.params);
    ActionExpert einit = init_expert(cfg.expert, derive_seed(cfg.seed, "pretrain_expert"), "pretrain");
    ExpertNet enet(cfg.expert, einit.params);

    Adam opt(cfg.lr_pretrain);
    Rng data_rng(derive_seed(cfg.seed, "pretrain_data"));
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(cfg.pretrain_steps));

    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        BackboneNet::Grads bg = bnet.zero_grads();
        ExpertNet::Grads eg;
        bool eg_init = false;
        double loss = 0.0;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const ToyTask& task = tasks[static_cast<std::size_t>((step * cfg.batch_size + i) % static_cast<int>(tasks.size()))];
            std::vector<double> x = task.sample_obs(data_rng);
            Tensor y = task.target(x);
            BackboneNet::Trace tr = bnet.forward(x);
            tr.streams.num_queries = cfg.num_queries;
            if (!eg_init) {
                eg = enet.zero_grads(true, &tr.streams);
                eg_init = true;
            }
            ExpertNet::Grads sample_g = enet.zero_grads(true, &tr.streams);
            loss += enet.backward(tr.streams, y, sample_g);
            bnet.backward(tr, sample_g.dh_t, sample_g.dh_a, bg);
            eg.add_scaled(sample_g, 1.0);
        }
        loss /= cfg.batch_size;
        if (!std::isfinite(loss))
            throw std::runtime_error("pretrain: loss diverged at step " + std::to_string(step));
        history.push_back(loss);
        toy_detail::scale_expert_grads(eg, 1.0 / cfg.batch_size);
        toy_detail::scale_backbone_grads(bg, 1.0 / cfg.batch_size);
        opt.step_begin();
        toy_detail::adam_update_backbone(opt, bnet, bg, false);
        toy_detail::adam_update_expert(opt, enet, eg);
    }

    PretrainResult out;
    out.backbone.config = cfg.backbone;
    out.backbone.params = bnet.export_params();
    out.expert.config = cfg.expert;
    out.expert.params = enet.export_params();
    out.expert.task_id = "pretrain";
    out.loss_history = std::move(history);
    return out;
}

struct FinetuneResult {
    NamedTensorMap theta_m;  // base with adapters folded in
    ActionExpert expert;
    std::vector<double> loss_history;
};

inline FinetuneResult finetune_task(const ToyBackbone& theta_0, const ToyTask& task, const ToyConfig& cfg,
                                    const ActionExpert* warm_start = nullptr) {
    BackboneNet bnet(theta_0.config, theta_0.params);
    bnet.attach_lora(cfg.lora_rank, cfg.lora_scaling, derive_seed(cfg.seed, "lora_init:" + task.task_id),
                     cfg.lora_train_up);
    ActionExpert einit;
    if (warm_start) {
        if (!(warm_start->config == cfg.expert))
            throw std::runtime_error("finetune: warm-start expert config mismatch");
        einit = *warm_start;
    } else {
        std::uint64_t eseed = cfg.shared_expert_init ? derive_seed(cfg.seed, "expert_init")
                                                     : derive_seed(cfg.seed, "expert_init:" + task.task_id);
        einit = init_expert(cfg.expert, eseed, task.task_id);
    }
    ExpertNet enet(cfg.expert, einit.params);

    Adam opt(cfg.lr_finetune);
    Rng data_rng(derive_seed(cfg.seed, "finetune_data:" + task.task_id));
    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(cfg.finetune_steps));

    for (int step = 0; step < cfg.finetune_steps; ++step) {
        BackboneNet::Grads bg = bnet.zero_grads();
        ExpertNet::Grads eg;
        bool eg_init = false;
        double loss = 0.0;
        for (int i = 0; i < cfg.batch_size; ++i) {
            std::vector<double> x = task.sample_obs(data_rng);
            Tensor y = task.target(x);
            BackboneNet::Trace tr = bnet.forward(x);
            tr.streams.num_queries = cfg.num_queries;
            if (!eg_init) {
                eg = enet.zero_grads(true, &tr.streams);
                eg_init = true;
            }
            ExpertNet::Grads sample_g = enet.zero_grads(true, &tr.streams);
            loss += enet.backward(tr.streams, y, sample_g);
            bnet.backward(tr, sample_g.dh_t, sample_g.dh_a, bg);
            eg.add_scaled(sample_g, 1.0);
        }
        loss /= cfg.batch_size;
        if (!std::isfinite(loss))
            throw std::runtime_error("finetune '" + task.task_id + "': loss diverged at step " + std::to_string(step));
        history.push_back(loss);
        toy_detail::scale_expert_grads(eg, 1.0 / cfg.batch_size);
        toy_detail::scale_backbone_grads(bg, 1.0 / cfg.batch_size);
        opt.step_begin();
        if (cfg.lora_sgd) {
            for (std::size_t t = 0; t < bnet.lora().size(); ++t) {
                auto& l = bnet.lora()[t];
                for (std::size_t i = 0; i < l.down.data.size(); ++i)
                    l.down.data[i] -= cfg.lora_lr * (bg.lora_down[t].data[i] + cfg.lora_weight_decay * l.down.data[i]);
                if (cfg.lora_train_up)
                    for (std::size_t i = 0; i < l.up.data.size(); ++i)
                        l.up.data[i] -= cfg.lora_lr * (bg.lora_up[t].data[i] + cfg.lora_weight_decay * l.up.data[i]);
            }
        } else {
            toy_detail::adam_update_backbone(opt, bnet, bg, true);  // adapters only
        }
        toy_detail::adam_update_expert(opt, enet, eg);
    }

    FinetuneResult out;
    // Theta_m: base tensors bitwise, adapter targets replaced by the folded weights.
    NamedTensorMap folded = bnet.export_params();
    for (const auto& [name, t] : theta_0.params) {
        bool adapted = false;
        for (const auto& target : lora_target_names()) adapted = adapted || name == target;
        out.theta_m.insert(name, adapted ? folded.at(name) : t);
    }
    out.theta_m.metadata = theta_0.params.metadata;
    out.expert.config = cfg.expert;
    out.expert.params = enet.export_params();
    out.expert.task_id = task.task_id;
    out.loss_history = std::move(history);
    return out;
}

// Mean MSE of (backbone variant, expert) over a fixed evaluation set.
inline double eval_mse(const BackboneConfig& bcfg, const NamedTensorMap& backbone_params, const ActionExpert& expert,
                       const std::vector<std::pair<std::vector<double>, Tensor>>& eval_set, int num_queries) {
    BackboneNet bnet(bcfg, backbone_params);
    ExpertNet enet(expert.config, expert.params);
    double total = 0.0;
    for (const auto& [x, y] : eval_set) {
        BackboneNet::Trace tr = bnet.forward(x);
        tr.streams.num_queries = num_queries;
        std::vector<double> pred = enet.forward(tr.streams, nullptr);
        double mse = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            double diff = pred[i] - static_cast<double>(y.data[i]);
            mse += diff * diff;
        }
        total += mse / static_cast<double>(pred.size());
    }
    return total / static_cast<double>(eval_set.size());
}

inline std::vector<std::pair<std::vector<double>, Tensor>> make_eval_set(const ToyTask& task, int episodes,
                                                                         std::uint64_t seed) {
    Rng rng(derive_seed(seed, "eval_data:" + task.task_id));
    std::vector<std::pair<std::vector<double>, Tensor>> set;
    set.reserve(static_cast<std::size_t>(episodes));
    for (int e = 0; e < episodes; ++e) {
        std::vector<double> x = task.sample_obs(rng);
        set.emplace_back(x, task.target(x));
    }
    return set;
}

}  // namespace mergeforge
