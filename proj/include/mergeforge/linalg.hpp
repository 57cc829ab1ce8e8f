#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mergeforge/tensor.hpp"

namespace mergeforge {

// Small dense double matrix for the numeric kernels (attention, SVD, routing).
// Tensors hold the durable float32 state; Mat is the working precision.
struct Mat {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::int64_t r, std::int64_t c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r * c), fill) {}

    double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }

    static Mat identity(std::int64_t n) {
        Mat m(n, n);
        for (std::int64_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
        return m;
    }

    static Mat from_tensor(const Tensor& t) {
        if (t.shape.size() != 2) throw std::runtime_error("mat: tensor is not 2-D: " + shape_to_string(t.shape));
        Mat m(t.shape[0], t.shape[1]);
        for (std::size_t i = 0; i < t.data.size(); ++i) m.data[i] = static_cast<double>(t.data[i]);
        return m;
    }

    Tensor to_tensor() const {
        Tensor t({rows, cols});
        for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<float>(data[i]);
        return t;
    }

    Mat transposed() const {
        Mat m(cols, rows);
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) m.at(j, i) = at(i, j);
        return m;
    }
};

inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows)
        throw std::runtime_error("matmul: inner dimensions differ, " + std::to_string(a.cols) + " vs " +
                                 std::to_string(b.rows));
    Mat out(a.rows, b.cols);
    for (std::int64_t i = 0; i < a.rows; ++i)
        for (std::int64_t k = 0; k < a.cols; ++k) {
            double av = a.at(i, k);
            if (av == 0.0) continue;
            for (std::int64_t j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

inline std::vector<double> matvec(const Mat& a, const std::vector<double>& x) {
    if (a.cols != static_cast<std::int64_t>(x.size()))
        throw std::runtime_error("matvec: dimension mismatch, matrix has " + std::to_string(a.cols) +
                                 " columns but vector has " + std::to_string(x.size()));
    std::vector<double> y(static_cast<std::size_t>(a.rows), 0.0);
    for (std::int64_t i = 0; i < a.rows; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < a.cols; ++j) acc += a.at(i, j) * x[static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(i)] = acc;
    }
    return y;
}

inline double norm2(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s);
}

// Thin SVD a = u * diag(sigma) * vt with singular values in descending order.
// One-sided Jacobi on the columns; accurate for the small matrices used here.
struct Svd {
    Mat u;                      // m x n (thin)
    std::vector<double> sigma;  // length n, descending
    Mat vt;                     // n x n, rows are right singular vectors
};

inline Svd svd(const Mat& a_in) {
    const bool transposed = a_in.rows < a_in.cols;
    Mat a = transposed ? a_in.transposed() : a_in;
    const std::int64_t m = a.rows, n = a.cols;

    Mat v = Mat::identity(n);
    const double eps = 1e-15;
    bool changed = true;
    int sweeps = 0;
    while (changed && sweeps < 60) {
        changed = false;
        ++sweeps;
        for (std::int64_t p = 0; p < n - 1; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::int64_t i = 0; i < m; ++i) {
                    double xp = a.at(i, p), xq = a.at(i, q);
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                if (std::fabs(apq) <= eps * std::sqrt(app * aqq)) continue;
                changed = true;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (std::int64_t i = 0; i < m; ++i) {
                    double xp = a.at(i, p), xq = a.at(i, q);
                    a.at(i, p) = c * xp - s * xq;
                    a.at(i, q) = s * xp + c * xq;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    double vp = v.at(i, p), vq = v.at(i, q);
                    v.at(i, p) = c * vp - s * vq;
                    v.at(i, q) = s * vp + c * vq;
                }
            }
        }
    }
    if (changed) throw std::runtime_error("svd: Jacobi sweep limit reached without convergence");

    std::vector<double> sigma(static_cast<std::size_t>(n));
    Mat u(m, n);
    for (std::int64_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::int64_t i = 0; i < m; ++i) s += a.at(i, j) * a.at(i, j);
        s = std::sqrt(s);
        sigma[static_cast<std::size_t>(j)] = s;
        if (s > 0.0)
            for (std::int64_t i = 0; i < m; ++i) u.at(i, j) = a.at(i, j) / s;
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t x, std::int64_t y) {
        return sigma[static_cast<std::size_t>(x)] > sigma[static_cast<std::size_t>(y)];
    });

    Svd out;
    out.sigma.resize(static_cast<std::size_t>(n));
    out.u = Mat(m, n);
    out.vt = Mat(n, n);
    for (std::int64_t j = 0; j < n; ++j) {
        std::int64_t src = order[static_cast<std::size_t>(j)];
        out.sigma[static_cast<std::size_t>(j)] = sigma[static_cast<std::size_t>(src)];
        for (std::int64_t i = 0; i < m; ++i) out.u.at(i, j) = u.at(i, src);
        for (std::int64_t i = 0; i < n; ++i) out.vt.at(j, i) = v.at(i, src);
    }

    if (transposed) {
        // a_in = (u s vt)^T of the transposed problem => u and v swap roles
        Svd swapped;
        swapped.sigma = out.sigma;
        swapped.u = out.vt.transposed();
        swapped.vt = out.u.transposed();
        out = std::move(swapped);
    }

    // Canonical sign: first nonzero component of each right singular vector positive.
    for (std::int64_t j = 0; j < out.vt.rows; ++j) {
        double lead = 0.0;
        for (std::int64_t i = 0; i < out.vt.cols; ++i) {
            if (out.vt.at(j, i) != 0.0) {
                lead = out.vt.at(j, i);
                break;
            }
        }
        if (lead < 0.0) {
            for (std::int64_t i = 0; i < out.vt.cols; ++i) out.vt.at(j, i) = -out.vt.at(j, i);
            for (std::int64_t i = 0; i < out.u.rows; ++i) out.u.at(i, j) = -out.u.at(i, j);
        }
    }
    return out;
}

inline std::int64_t svd_rank(const Svd& s, double rel_tol = 1e-7) {
    if (s.sigma.empty()) return 0;
    double cutoff = s.sigma[0] * rel_tol;
    std::int64_t r = 0;
    for (double v : s.sigma)
        if (v > cutoff) ++r;
    return r;
}

}  // namespace mergeforge
