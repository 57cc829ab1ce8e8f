#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mergeforge/linalg.hpp"
#include "mergeforge/tensor.hpp"
#include "mergeforge/rng.hpp"

namespace mergeforge {

// Cross-attention-only action expert. Each block runs, in order:
//   1. sigmoid gate on the task conditioning stream
//   2. pre-norm cross-attention, queries from the running state, keys/values
//      from the gated task stream, residual add
//   3. pre-norm cross-attention over the action stream, residual add
//   4. pre-norm GELU feed-forward, residual add
// There is no self-attention anywhere; action-query tokens never see each
// other, so task information cannot accumulate across token positions.

struct ExpertConfig {
    int num_blocks = 2;
    int d_model = 16;
    int n_heads = 2;
    int d_ff = 32;
    int action_dim = 4;
    int horizon = 4;
    bool positional_queries = true;

    void validate() const {
        if (num_blocks < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || action_dim < 1 || horizon < 1)
            throw std::runtime_error("expert config: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::runtime_error("expert config: d_model " + std::to_string(d_model) +
                                     " not divisible by n_heads " + std::to_string(n_heads));
    }

    bool operator==(const ExpertConfig&) const = default;
};

// Learnable tensors of one block, in canonical order.
inline const std::vector<std::string>& block_param_suffixes() {
    static const std::vector<std::string> names = {
        "ln_t.gamma", "ln_t.beta", "attn_t.wq", "attn_t.wk", "attn_t.wv", "attn_t.wo",
        "ln_a.gamma", "ln_a.beta", "attn_a.wq", "attn_a.wk", "attn_a.wv", "attn_a.wo",
        "ln_f.gamma", "ln_f.beta", "ffn.w1",    "ffn.w2",
    };
    return names;
}

inline std::string block_prefix(int block_1based) { return "block" + std::to_string(block_1based) + "."; }

struct ActionExpert {
    ExpertConfig config;
    NamedTensorMap params;
    std::string task_id;
};

inline ActionExpert init_expert(const ExpertConfig& cfg, std::uint64_t seed, const std::string& task_id = "") {
    cfg.validate();
    ActionExpert e;
    e.config = cfg;
    e.task_id = task_id;
    Rng rng(seed);
    const std::int64_t d = cfg.d_model, dff = cfg.d_ff;
    auto uniform_fanin = [&rng](std::vector<std::int64_t> shape, std::int64_t fan_in) {
        Tensor t(shape);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
        return t;
    };
    for (int b = 1; b <= cfg.num_blocks; ++b) {
        const std::string p = block_prefix(b);
        e.params.insert(p + "ln_t.gamma", Tensor({d}, 1.0f));
        e.params.insert(p + "ln_t.beta", Tensor({d}, 0.0f));
        e.params.insert(p + "attn_t.wq", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_t.wk", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_t.wv", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_t.wo", uniform_fanin({d, d}, d));
        e.params.insert(p + "ln_a.gamma", Tensor({d}, 1.0f));
        e.params.insert(p + "ln_a.beta", Tensor({d}, 0.0f));
        e.params.insert(p + "attn_a.wq", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_a.wk", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_a.wv", uniform_fanin({d, d}, d));
        e.params.insert(p + "attn_a.wo", uniform_fanin({d, d}, d));
        e.params.insert(p + "ln_f.gamma", Tensor({d}, 1.0f));
        e.params.insert(p + "ln_f.beta", Tensor({d}, 0.0f));
        e.params.insert(p + "ffn.w1", uniform_fanin({d, dff}, d));
        e.params.insert(p + "ffn.w2", uniform_fanin({dff, d}, dff));
    }
    e.params.insert("head.w", uniform_fanin({d, static_cast<std::int64_t>(cfg.horizon) * cfg.action_dim}, d));
    e.params.insert("head.b", Tensor({static_cast<std::int64_t>(cfg.horizon) * cfg.action_dim}, 0.0f));
    return e;
}

// Per-block conditioning streams: h_t[b] and h_a[b] are (seq x d_model)
// tensors feeding block b+1.
struct ExpertInputs {
    std::vector<Tensor> h_t;
    std::vector<Tensor> h_a;
    int num_queries = 4;
};

namespace expert_detail {

constexpr double kLnEps = 1e-5;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / 1.4142135623730951)); }
inline double gelu_grad(double x) {
    const double phi = std::exp(-0.5 * x * x) / 2.5066282746310005;  // standard normal pdf
    return 0.5 * (1.0 + std::erf(x / 1.4142135623730951)) + x * phi;
}

struct LnCache {
    Mat xhat;
    std::vector<double> inv_std;
};

inline Mat layernorm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                     LnCache* cache) {
    Mat y(x.rows, x.cols);
    if (cache) {
        cache->xhat = Mat(x.rows, x.cols);
        cache->inv_std.assign(static_cast<std::size_t>(x.rows), 0.0);
    }
    for (std::int64_t i = 0; i < x.rows; ++i) {
        double mu = 0.0;
        for (std::int64_t j = 0; j < x.cols; ++j) mu += x.at(i, j);
        mu /= static_cast<double>(x.cols);
        double var = 0.0;
        for (std::int64_t j = 0; j < x.cols; ++j) {
            double c = x.at(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(x.cols);
        double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::int64_t j = 0; j < x.cols; ++j) {
            double xh = (x.at(i, j) - mu) * inv;
            if (cache) cache->xhat.at(i, j) = xh;
            y.at(i, j) = gamma[static_cast<std::size_t>(j)] * xh + beta[static_cast<std::size_t>(j)];
        }
        if (cache) cache->inv_std[static_cast<std::size_t>(i)] = inv;
    }
    return y;
}

inline Mat layernorm_backward(const Mat& dy, const LnCache& cache, const std::vector<double>& gamma,
                              std::vector<double>& dgamma, std::vector<double>& dbeta) {
    const std::int64_t n = dy.cols;
    Mat dx(dy.rows, dy.cols);
    for (std::int64_t i = 0; i < dy.rows; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            double g = dy.at(i, j);
            double xh = cache.xhat.at(i, j);
            dgamma[static_cast<std::size_t>(j)] += g * xh;
            dbeta[static_cast<std::size_t>(j)] += g;
            double dxh = g * gamma[static_cast<std::size_t>(j)];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= static_cast<double>(n);
        mean_dxhat_xhat /= static_cast<double>(n);
        double inv = cache.inv_std[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < n; ++j) {
            double dxh = dy.at(i, j) * gamma[static_cast<std::size_t>(j)];
            dx.at(i, j) = inv * (dxh - mean_dxhat - cache.xhat.at(i, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

struct AttnWeights {
    std::vector<double> ln_gamma, ln_beta;
    Mat wq, wk, wv, wo;
};

struct AttnGradRefs {
    std::vector<double>& dln_gamma;
    std::vector<double>& dln_beta;
    Mat& dwq;
    Mat& dwk;
    Mat& dwv;
    Mat& dwo;
};

struct AttnCache {
    LnCache ln;
    Mat xn, q, k, v, attn, o;  // attn is (n_q x n_heads*s)
};

// Pre-norm multi-head cross-attention with residual add. cond supplies keys
// and values; x supplies queries. Returns x + attention output.
inline Mat cross_attention(const Mat& x, const Mat& cond, const AttnWeights& w, int n_heads, AttnCache* cache) {
    const std::int64_t d = x.cols;
    const std::int64_t dh = d / n_heads;
    const std::int64_t s = cond.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat xn = layernorm(x, w.ln_gamma, w.ln_beta, cache ? &cache->ln : nullptr);
    Mat q = matmul(xn, w.wq);
    Mat k = matmul(cond, w.wk);
    Mat v = matmul(cond, w.wv);

    Mat attn(x.rows, static_cast<std::int64_t>(n_heads) * s);
    Mat o(x.rows, d);
    for (int h = 0; h < n_heads; ++h) {
        const std::int64_t c0 = h * dh;
        for (std::int64_t i = 0; i < x.rows; ++i) {
            double maxv = -1e300;
            std::vector<double> scores(static_cast<std::size_t>(s));
            for (std::int64_t t = 0; t < s; ++t) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < dh; ++j) acc += q.at(i, c0 + j) * k.at(t, c0 + j);
                acc *= scale;
                scores[static_cast<std::size_t>(t)] = acc;
                if (acc > maxv) maxv = acc;
            }
            double z = 0.0;
            for (std::int64_t t = 0; t < s; ++t) {
                double e = std::exp(scores[static_cast<std::size_t>(t)] - maxv);
                scores[static_cast<std::size_t>(t)] = e;
                z += e;
            }
            for (std::int64_t t = 0; t < s; ++t) {
                double a = scores[static_cast<std::size_t>(t)] / z;
                attn.at(i, h * s + t) = a;
                for (std::int64_t j = 0; j < dh; ++j) o.at(i, c0 + j) += a * v.at(t, c0 + j);
            }
        }
    }
    Mat y = matmul(o, w.wo);
    Mat out(x.rows, d);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] + y.data[i];
    if (cache) {
        cache->xn = std::move(xn);
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->o = std::move(o);
    }
    return out;
}

// Backward through cross_attention. Returns dx (including the residual path);
// adds the conditioning-stream gradient into dcond when provided.
inline Mat cross_attention_backward(const Mat& dout, const Mat& cond, const AttnWeights& w, int n_heads,
                                    const AttnCache& cache, AttnGradRefs g, Mat* dcond) {
    const std::int64_t d = dout.cols;
    const std::int64_t dh = d / n_heads;
    const std::int64_t s = cond.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // y = o * wo
    Mat do_(dout.rows, d);
    {
        // dwo += o^T * dout ; do = dout * wo^T
        for (std::int64_t i = 0; i < d; ++i)
            for (std::int64_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < dout.rows; ++r) acc += cache.o.at(r, i) * dout.at(r, j);
                g.dwo.at(i, j) += acc;
            }
        for (std::int64_t r = 0; r < dout.rows; ++r)
            for (std::int64_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < d; ++j) acc += dout.at(r, j) * w.wo.at(i, j);
                do_.at(r, i) = acc;
            }
    }

    Mat dq(dout.rows, d), dk(s, d), dv(s, d);
    for (int h = 0; h < n_heads; ++h) {
        const std::int64_t c0 = h * dh;
        for (std::int64_t i = 0; i < dout.rows; ++i) {
            // dA and softmax backward
            std::vector<double> da(static_cast<std::size_t>(s), 0.0);
            for (std::int64_t t = 0; t < s; ++t) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < dh; ++j) acc += do_.at(i, c0 + j) * cache.v.at(t, c0 + j);
                da[static_cast<std::size_t>(t)] = acc;
            }
            double dot = 0.0;
            for (std::int64_t t = 0; t < s; ++t) dot += da[static_cast<std::size_t>(t)] * cache.attn.at(i, h * s + t);
            for (std::int64_t t = 0; t < s; ++t) {
                double a = cache.attn.at(i, h * s + t);
                double ds = a * (da[static_cast<std::size_t>(t)] - dot);
                // dv += a * do ; dq += ds*k*scale ; dk += ds*q*scale
                for (std::int64_t j = 0; j < dh; ++j) {
                    dv.at(t, c0 + j) += a * do_.at(i, c0 + j);
                    dq.at(i, c0 + j) += ds * scale * cache.k.at(t, c0 + j);
                    dk.at(t, c0 + j) += ds * scale * cache.q.at(i, c0 + j);
                }
            }
        }
    }

    // q = xn*wq, k = cond*wk, v = cond*wv
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            double aq = 0.0;
            for (std::int64_t r = 0; r < dout.rows; ++r) aq += cache.xn.at(r, i) * dq.at(r, j);
            g.dwq.at(i, j) += aq;
            double ak = 0.0, av = 0.0;
            for (std::int64_t r = 0; r < s; ++r) {
                ak += cond.at(r, i) * dk.at(r, j);
                av += cond.at(r, i) * dv.at(r, j);
            }
            g.dwk.at(i, j) += ak;
            g.dwv.at(i, j) += av;
        }

    if (dcond) {
        for (std::int64_t r = 0; r < s; ++r)
            for (std::int64_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < d; ++j) acc += dk.at(r, j) * w.wk.at(i, j) + dv.at(r, j) * w.wv.at(i, j);
                dcond->at(r, i) += acc;
            }
    }

    Mat dxn(dout.rows, d);
    for (std::int64_t r = 0; r < dout.rows; ++r)
        for (std::int64_t i = 0; i < d; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < d; ++j) acc += dq.at(r, j) * w.wq.at(i, j);
            dxn.at(r, i) = acc;
        }
    Mat dx = layernorm_backward(dxn, cache.ln, w.ln_gamma, g.dln_gamma, g.dln_beta);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dout.data[i];  // residual
    return dx;
}

}  // namespace expert_detail

// Fixed sinusoidal query-token embedding. With positional_queries disabled
// every token gets the position-0 code, making tokens indistinguishable.
inline std::vector<double> query_embedding(const ExpertConfig& cfg, int token_index) {
    const int pos = cfg.positional_queries ? token_index : 0;
    std::vector<double> v(static_cast<std::size_t>(cfg.d_model));
    for (int j = 0; j < cfg.d_model; ++j) {
        double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(cfg.d_model);
        double angle = (static_cast<double>(pos) + 1.0) / std::pow(10000.0, exponent);
        v[static_cast<std::size_t>(j)] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
    return v;
}

// Double-precision working copy of an expert, used for inference and training.
// The float32 NamedTensorMap remains the durable interchange format.
class ExpertNet {
public:
    struct BlockW {
        expert_detail::AttnWeights attn_t, attn_a;
        std::vector<double> ln_f_gamma, ln_f_beta;
        Mat ffn_w1, ffn_w2;
    };

    ExpertNet(const ExpertConfig& cfg, const NamedTensorMap& params) : cfg_(cfg) {
        cfg.validate();
        auto vec = [&params](const std::string& n) {
            const Tensor& t = params.at(n);
            return std::vector<double>(t.data.begin(), t.data.end());
        };
        auto mat = [&params](const std::string& n) { return Mat::from_tensor(params.at(n)); };
        blocks_.resize(static_cast<std::size_t>(cfg.num_blocks));
        for (int b = 1; b <= cfg.num_blocks; ++b) {
            const std::string p = block_prefix(b);
            BlockW& w = blocks_[static_cast<std::size_t>(b - 1)];
            w.attn_t.ln_gamma = vec(p + "ln_t.gamma");
            w.attn_t.ln_beta = vec(p + "ln_t.beta");
            w.attn_t.wq = mat(p + "attn_t.wq");
            w.attn_t.wk = mat(p + "attn_t.wk");
            w.attn_t.wv = mat(p + "attn_t.wv");
            w.attn_t.wo = mat(p + "attn_t.wo");
            w.attn_a.ln_gamma = vec(p + "ln_a.gamma");
            w.attn_a.ln_beta = vec(p + "ln_a.beta");
            w.attn_a.wq = mat(p + "attn_a.wq");
            w.attn_a.wk = mat(p + "attn_a.wk");
            w.attn_a.wv = mat(p + "attn_a.wv");
            w.attn_a.wo = mat(p + "attn_a.wo");
            w.ln_f_gamma = vec(p + "ln_f.gamma");
            w.ln_f_beta = vec(p + "ln_f.beta");
            w.ffn_w1 = mat(p + "ffn.w1");
            w.ffn_w2 = mat(p + "ffn.w2");
        }
        head_w_ = mat("head.w");
        head_b_ = vec("head.b");
    }

    const ExpertConfig& config() const { return cfg_; }
    std::vector<BlockW>& blocks() { return blocks_; }
    Mat& head_w() { return head_w_; }
    std::vector<double>& head_b() { return head_b_; }

    struct Cache {
        struct Block {
            expert_detail::AttnCache at, aa;
            expert_detail::LnCache lnf;
            Mat x0, x1, x2;       // running state entering each sub-layer
            Mat ht_gated;
            Mat ffn_pre, ffn_act;
        };
        std::vector<Block> blocks;
        Mat x_final;
        std::vector<double> pooled;
        std::vector<double> out_flat;
    };

    std::vector<double> forward(const ExpertInputs& in, Cache* cache) const {
        validate_inputs(in);
        const std::int64_t d = cfg_.d_model;
        const int n_q = in.num_queries;
        Mat x(n_q, d);
        for (int i = 0; i < n_q; ++i) {
            auto e = query_embedding(cfg_, i);
            for (std::int64_t j = 0; j < d; ++j) x.at(i, j) = e[static_cast<std::size_t>(j)];
        }
        if (cache) cache->blocks.resize(static_cast<std::size_t>(cfg_.num_blocks));

        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const BlockW& w = blocks_[static_cast<std::size_t>(b)];
            Cache::Block* cb = cache ? &cache->blocks[static_cast<std::size_t>(b)] : nullptr;

            Mat ht = Mat::from_tensor(in.h_t[static_cast<std::size_t>(b)]);
            Mat ha = Mat::from_tensor(in.h_a[static_cast<std::size_t>(b)]);
            Mat ht_g(ht.rows, ht.cols);
            for (std::size_t i = 0; i < ht.data.size(); ++i) ht_g.data[i] = 1.0 / (1.0 + std::exp(-ht.data[i]));

            if (cb) cb->x0 = x;
            x = expert_detail::cross_attention(x, ht_g, w.attn_t, cfg_.n_heads, cb ? &cb->at : nullptr);
            if (cb) cb->x1 = x;
            x = expert_detail::cross_attention(x, ha, w.attn_a, cfg_.n_heads, cb ? &cb->aa : nullptr);
            if (cb) cb->x2 = x;

            Mat xn = expert_detail::layernorm(x, w.ln_f_gamma, w.ln_f_beta, cb ? &cb->lnf : nullptr);
            Mat pre = matmul(xn, w.ffn_w1);
            Mat act(pre.rows, pre.cols);
            for (std::size_t i = 0; i < pre.data.size(); ++i) act.data[i] = expert_detail::gelu(pre.data[i]);
            Mat f = matmul(act, w.ffn_w2);
            for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += f.data[i];

            for (double v : x.data)
                if (!std::isfinite(v))
                    throw std::runtime_error("expert forward: non-finite activation in block " + std::to_string(b + 1));

            if (cb) {
                cb->ht_gated = std::move(ht_g);
                cb->ffn_pre = std::move(pre);
                cb->ffn_act = std::move(act);
            }
        }

        std::vector<double> pooled(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t i = 0; i < x.rows; ++i)
            for (std::int64_t j = 0; j < d; ++j) pooled[static_cast<std::size_t>(j)] += x.at(i, j);
        for (auto& v : pooled) v /= static_cast<double>(n_q);

        const std::int64_t k = static_cast<std::int64_t>(cfg_.horizon) * cfg_.action_dim;
        std::vector<double> out(static_cast<std::size_t>(k), 0.0);
        for (std::int64_t j = 0; j < k; ++j) {
            double acc = head_b_[static_cast<std::size_t>(j)];
            for (std::int64_t i = 0; i < d; ++i) acc += pooled[static_cast<std::size_t>(i)] * head_w_.at(i, j);
            out[static_cast<std::size_t>(j)] = acc;
        }
        if (cache) {
            cache->x_final = std::move(x);
            cache->pooled = pooled;
            cache->out_flat = out;
        }
        return out;
    }

    struct Grads {
        std::vector<BlockW> blocks;  // same shapes as weights
        Mat head_w;
        std::vector<double> head_b;
        std::vector<Mat> dh_t, dh_a;  // stream grads, filled when requested

        void add_scaled(const Grads& other, double s) {
            auto axpy_v = [s](std::vector<double>& a, const std::vector<double>& b) {
                for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
            };
            auto axpy_m = [s](Mat& a, const Mat& b) {
                for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += s * b.data[i];
            };
            for (std::size_t b = 0; b < blocks.size(); ++b) {
                axpy_v(blocks[b].attn_t.ln_gamma, other.blocks[b].attn_t.ln_gamma);
                axpy_v(blocks[b].attn_t.ln_beta, other.blocks[b].attn_t.ln_beta);
                axpy_m(blocks[b].attn_t.wq, other.blocks[b].attn_t.wq);
                axpy_m(blocks[b].attn_t.wk, other.blocks[b].attn_t.wk);
                axpy_m(blocks[b].attn_t.wv, other.blocks[b].attn_t.wv);
                axpy_m(blocks[b].attn_t.wo, other.blocks[b].attn_t.wo);
                axpy_v(blocks[b].attn_a.ln_gamma, other.blocks[b].attn_a.ln_gamma);
                axpy_v(blocks[b].attn_a.ln_beta, other.blocks[b].attn_a.ln_beta);
                axpy_m(blocks[b].attn_a.wq, other.blocks[b].attn_a.wq);
                axpy_m(blocks[b].attn_a.wk, other.blocks[b].attn_a.wk);
                axpy_m(blocks[b].attn_a.wv, other.blocks[b].attn_a.wv);
                axpy_m(blocks[b].attn_a.wo, other.blocks[b].attn_a.wo);
                axpy_v(blocks[b].ln_f_gamma, other.blocks[b].ln_f_gamma);
                axpy_v(blocks[b].ln_f_beta, other.blocks[b].ln_f_beta);
                axpy_m(blocks[b].ffn_w1, other.blocks[b].ffn_w1);
                axpy_m(blocks[b].ffn_w2, other.blocks[b].ffn_w2);
            }
            axpy_m(head_w, other.head_w);
            axpy_v(head_b, other.head_b);
        }
    };

    Grads zero_grads(bool with_streams, const ExpertInputs* in = nullptr) const {
        Grads g;
        g.blocks.resize(blocks_.size());
        const std::int64_t d = cfg_.d_model, dff = cfg_.d_ff;
        for (auto& bw : g.blocks) {
            bw.attn_t.ln_gamma.assign(static_cast<std::size_t>(d), 0.0);
            bw.attn_t.ln_beta.assign(static_cast<std::size_t>(d), 0.0);
            bw.attn_t.wq = Mat(d, d);
            bw.attn_t.wk = Mat(d, d);
            bw.attn_t.wv = Mat(d, d);
            bw.attn_t.wo = Mat(d, d);
            bw.attn_a.ln_gamma.assign(static_cast<std::size_t>(d), 0.0);
            bw.attn_a.ln_beta.assign(static_cast<std::size_t>(d), 0.0);
            bw.attn_a.wq = Mat(d, d);
            bw.attn_a.wk = Mat(d, d);
            bw.attn_a.wv = Mat(d, d);
            bw.attn_a.wo = Mat(d, d);
            bw.ln_f_gamma.assign(static_cast<std::size_t>(d), 0.0);
            bw.ln_f_beta.assign(static_cast<std::size_t>(d), 0.0);
            bw.ffn_w1 = Mat(d, dff);
            bw.ffn_w2 = Mat(dff, d);
        }
        g.head_w = Mat(d, static_cast<std::int64_t>(cfg_.horizon) * cfg_.action_dim);
        g.head_b.assign(static_cast<std::size_t>(cfg_.horizon) * static_cast<std::size_t>(cfg_.action_dim), 0.0);
        if (with_streams && in) {
            for (int b = 0; b < cfg_.num_blocks; ++b) {
                g.dh_t.emplace_back(in->h_t[static_cast<std::size_t>(b)].shape[0], d);
                g.dh_a.emplace_back(in->h_a[static_cast<std::size_t>(b)].shape[0], d);
            }
        }
        return g;
    }

    // MSE loss against the target chunk; accumulates parameter gradients into
    // `g` (and stream gradients when g.dh_t is non-empty). Returns the loss.
    double backward(const ExpertInputs& in, const Tensor& target, Grads& g) const {
        const std::int64_t k = static_cast<std::int64_t>(cfg_.horizon) * cfg_.action_dim;
        if (target.numel() != k)
            throw std::runtime_error("expert backward: target has " + std::to_string(target.numel()) +
                                     " entries, expected " + std::to_string(k));
        Cache cache;
        std::vector<double> out = forward(in, &cache);

        double loss = 0.0;
        std::vector<double> dout(static_cast<std::size_t>(k));
        for (std::int64_t j = 0; j < k; ++j) {
            double diff = out[static_cast<std::size_t>(j)] - static_cast<double>(target.data[static_cast<std::size_t>(j)]);
            loss += diff * diff;
            dout[static_cast<std::size_t>(j)] = 2.0 * diff / static_cast<double>(k);
        }
        loss /= static_cast<double>(k);

        const std::int64_t d = cfg_.d_model;
        const int n_q = in.num_queries;
        const bool want_streams = !g.dh_t.empty();

        // head: out = pooled * w + b
        std::vector<double> dpooled(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t j = 0; j < k; ++j) {
            double dj = dout[static_cast<std::size_t>(j)];
            g.head_b[static_cast<std::size_t>(j)] += dj;
            for (std::int64_t i = 0; i < d; ++i) {
                g.head_w.at(i, j) += cache.pooled[static_cast<std::size_t>(i)] * dj;
                dpooled[static_cast<std::size_t>(i)] += head_w_.at(i, j) * dj;
            }
        }
        Mat dx(n_q, d);
        for (int i = 0; i < n_q; ++i)
            for (std::int64_t j = 0; j < d; ++j) dx.at(i, j) = dpooled[static_cast<std::size_t>(j)] / n_q;

        for (int b = cfg_.num_blocks - 1; b >= 0; --b) {
            const BlockW& w = blocks_[static_cast<std::size_t>(b)];
            BlockW& gw = g.blocks[static_cast<std::size_t>(b)];
            const Cache::Block& cb = cache.blocks[static_cast<std::size_t>(b)];

            // FFN sub-layer backward
            {
                const Mat& pre = cb.ffn_pre;
                const Mat& act = cb.ffn_act;
                Mat dact(act.rows, act.cols);
                for (std::int64_t r = 0; r < act.rows; ++r)
                    for (std::int64_t j = 0; j < w.ffn_w2.cols; ++j) {
                        double dj = dx.at(r, j);
                        if (dj == 0.0) continue;
                        for (std::int64_t i = 0; i < act.cols; ++i) dact.at(r, i) += dj * w.ffn_w2.at(i, j);
                    }
                for (std::int64_t i = 0; i < w.ffn_w2.rows; ++i)
                    for (std::int64_t j = 0; j < w.ffn_w2.cols; ++j) {
                        double acc = 0.0;
                        for (std::int64_t r = 0; r < act.rows; ++r) acc += act.at(r, i) * dx.at(r, j);
                        gw.ffn_w2.at(i, j) += acc;
                    }
                Mat dpre(pre.rows, pre.cols);
                for (std::size_t i = 0; i < dpre.data.size(); ++i)
                    dpre.data[i] = dact.data[i] * expert_detail::gelu_grad(pre.data[i]);
                // the FFN input xn is gamma*xhat+beta; recompute it from the cache
                Mat xn(cb.lnf.xhat.rows, cb.lnf.xhat.cols);
                for (std::int64_t r = 0; r < xn.rows; ++r)
                    for (std::int64_t j = 0; j < xn.cols; ++j)
                        xn.at(r, j) = w.ln_f_gamma[static_cast<std::size_t>(j)] * cb.lnf.xhat.at(r, j) +
                                      w.ln_f_beta[static_cast<std::size_t>(j)];
                for (std::int64_t i = 0; i < w.ffn_w1.rows; ++i)
                    for (std::int64_t j = 0; j < w.ffn_w1.cols; ++j) {
                        double acc = 0.0;
                        for (std::int64_t r = 0; r < pre.rows; ++r) acc += xn.at(r, i) * dpre.at(r, j);
                        gw.ffn_w1.at(i, j) += acc;
                    }
                Mat dxn(xn.rows, xn.cols);
                for (std::int64_t r = 0; r < xn.rows; ++r)
                    for (std::int64_t i = 0; i < xn.cols; ++i) {
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < w.ffn_w1.cols; ++j) acc += dpre.at(r, j) * w.ffn_w1.at(i, j);
                        dxn.at(r, i) = acc;
                    }
                Mat dthrough = expert_detail::layernorm_backward(dxn, cb.lnf, w.ln_f_gamma, gw.ln_f_gamma, gw.ln_f_beta);
                for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dthrough.data[i];
            }

            // action-path attention backward
            {
                Mat ha = Mat::from_tensor(in.h_a[static_cast<std::size_t>(b)]);
                expert_detail::AttnGradRefs ag{gw.attn_a.ln_gamma, gw.attn_a.ln_beta,
                                               gw.attn_a.wq, gw.attn_a.wk, gw.attn_a.wv, gw.attn_a.wo};
                Mat* dcond = want_streams ? &g.dh_a[static_cast<std::size_t>(b)] : nullptr;
                dx = expert_detail::cross_attention_backward(dx, ha, w.attn_a, cfg_.n_heads, cb.aa, ag, dcond);
            }

            // task-path attention backward, through the sigmoid gate
            {
                expert_detail::AttnGradRefs ag{gw.attn_t.ln_gamma, gw.attn_t.ln_beta,
                                               gw.attn_t.wq, gw.attn_t.wk, gw.attn_t.wv, gw.attn_t.wo};
                Mat dgate;
                Mat* dcond = nullptr;
                if (want_streams) {
                    dgate = Mat(cb.ht_gated.rows, cb.ht_gated.cols);
                    dcond = &dgate;
                }
                dx = expert_detail::cross_attention_backward(dx, cb.ht_gated, w.attn_t, cfg_.n_heads, cb.at, ag, dcond);
                if (want_streams) {
                    Mat& dht = g.dh_t[static_cast<std::size_t>(b)];
                    for (std::size_t i = 0; i < dht.data.size(); ++i) {
                        double sg = cb.ht_gated.data[i];
                        dht.data[i] += dgate.data[i] * sg * (1.0 - sg);
                    }
                }
            }
        }
        return loss;
    }

    NamedTensorMap export_params() const {
        NamedTensorMap out;
        auto put_vec = [&out](const std::string& n, const std::vector<double>& v) {
            Tensor t({static_cast<std::int64_t>(v.size())});
            for (std::size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
            out.insert(n, std::move(t));
        };
        auto put_mat = [&out](const std::string& n, const Mat& m) { out.insert(n, m.to_tensor()); };
        for (int b = 1; b <= cfg_.num_blocks; ++b) {
            const std::string p = block_prefix(b);
            const BlockW& w = blocks_[static_cast<std::size_t>(b - 1)];
            put_vec(p + "ln_t.gamma", w.attn_t.ln_gamma);
            put_vec(p + "ln_t.beta", w.attn_t.ln_beta);
            put_mat(p + "attn_t.wq", w.attn_t.wq);
            put_mat(p + "attn_t.wk", w.attn_t.wk);
            put_mat(p + "attn_t.wv", w.attn_t.wv);
            put_mat(p + "attn_t.wo", w.attn_t.wo);
            put_vec(p + "ln_a.gamma", w.attn_a.ln_gamma);
            put_vec(p + "ln_a.beta", w.attn_a.ln_beta);
            put_mat(p + "attn_a.wq", w.attn_a.wq);
            put_mat(p + "attn_a.wk", w.attn_a.wk);
            put_mat(p + "attn_a.wv", w.attn_a.wv);
            put_mat(p + "attn_a.wo", w.attn_a.wo);
            put_vec(p + "ln_f.gamma", w.ln_f_gamma);
            put_vec(p + "ln_f.beta", w.ln_f_beta);
            put_mat(p + "ffn.w1", w.ffn_w1);
            put_mat(p + "ffn.w2", w.ffn_w2);
        }
        put_mat("head.w", head_w_);
        put_vec("head.b", head_b_);
        return out;
    }

private:
    void validate_inputs(const ExpertInputs& in) const {
        if (in.num_queries < 1) throw std::runtime_error("expert forward: need at least one action query token");
        if (static_cast<int>(in.h_t.size()) != cfg_.num_blocks || static_cast<int>(in.h_a.size()) != cfg_.num_blocks)
            throw std::runtime_error("expert forward: conditioning streams must cover all " +
                                     std::to_string(cfg_.num_blocks) + " blocks");
        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const Tensor& ht = in.h_t[static_cast<std::size_t>(b)];
            const Tensor& ha = in.h_a[static_cast<std::size_t>(b)];
            if (ht.shape.size() != 2 || ht.shape[1] != cfg_.d_model)
                throw std::runtime_error("expert forward: task stream of block " + std::to_string(b + 1) +
                                         " has shape " + shape_to_string(ht.shape) + ", expected [*, " +
                                         std::to_string(cfg_.d_model) + "]");
            if (ha.shape.size() != 2 || ha.shape[1] != cfg_.d_model)
                throw std::runtime_error("expert forward: action stream of block " + std::to_string(b + 1) +
                                         " has shape " + shape_to_string(ha.shape) + ", expected [*, " +
                                         std::to_string(cfg_.d_model) + "]");
        }
    }

    ExpertConfig cfg_;
    std::vector<BlockW> blocks_;
    Mat head_w_;
    std::vector<double> head_b_;
};

// Functional entry points over the float32 representation.

inline Tensor expert_forward(const ActionExpert& expert, const ExpertInputs& in) {
    ExpertNet net(expert.config, expert.params);
    std::vector<double> out = net.forward(in, nullptr);
    Tensor chunk({expert.config.horizon, expert.config.action_dim});
    for (std::size_t i = 0; i < out.size(); ++i) chunk.data[i] = static_cast<float>(out[i]);
    return chunk;
}

struct ExpertBackwardResult {
    NamedTensorMap grads;
    double loss = 0.0;
};

inline ExpertBackwardResult expert_backward(const ActionExpert& expert, const ExpertInputs& in,
                                            const Tensor& target) {
    ExpertNet net(expert.config, expert.params);
    ExpertNet::Grads g = net.zero_grads(false);
    ExpertBackwardResult r;
    r.loss = net.backward(in, target, g);
    ExpertNet tmp(expert.config, expert.params);
    // reuse the exporter by moving gradients into a net-shaped container
    tmp.blocks() = std::move(g.blocks);
    tmp.head_w() = std::move(g.head_w);
    tmp.head_b() = std::move(g.head_b);
    r.grads = tmp.export_params();
    return r;
}

}  // namespace mergeforge
