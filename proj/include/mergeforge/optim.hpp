#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mergeforge/linalg.hpp"

namespace mergeforge {

// Plain Adam over flat double buffers, keyed by parameter name. Deterministic:
// update order follows the caller's key order and all state lives in doubles.
class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step_begin() { ++t_; }

    void update(const std::string& key, std::vector<double>& param, const std::vector<double>& grad) {
        auto& m = m_[key];
        auto& v = v_[key];
        if (m.size() != param.size()) m.assign(param.size(), 0.0);
        if (v.size() != param.size()) v.assign(param.size(), 0.0);
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < param.size(); ++i) {
            double g = grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            param[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
        }
    }

    void update(const std::string& key, Mat& param, const Mat& grad) { update(key, param.data, grad.data); }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace mergeforge
