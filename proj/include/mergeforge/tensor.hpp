#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mergeforge {

// Global cap on intra-op threads. Elementwise kernels chunk their index range;
// the result must not depend on the chunking, so only position-independent maps
// go through the parallel path.
inline int& thread_cap() {
    static int cap = 1;
    return cap;
}

inline void set_thread_cap(int n) { thread_cap() = n < 1 ? 1 : n; }

namespace detail {

inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
    int threads = thread_cap();
    if (threads <= 1 || n < 4096) {
        body(0, n);
        return;
    }
    std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::size_t chunk = (n + nthreads - 1) / nthreads;
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) {
        std::size_t lo = t * chunk;
        std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

inline std::string shape_to_string(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

// Dense row-major float32 tensor. Every exported operation keeps values finite.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> s, float fill = 0.0f) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
    }

    Tensor(std::vector<std::int64_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
            throw std::runtime_error("tensor: data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_to_string(shape));
    }

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) {
            if (d <= 0) throw std::runtime_error("tensor: non-positive dimension in shape " + shape_to_string(s));
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    // 2-D accessors; rows*cols must equal numel.
    std::int64_t rows() const { return shape.size() == 2 ? shape[0] : (shape.size() == 1 ? 1 : -1); }
    std::int64_t cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : -1); }
    float& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
    float at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols() + c)]; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

// Ordered collection of uniquely named tensors plus string metadata.
// Iteration order is insertion order.
class NamedTensorMap {
public:
    using Entry = std::pair<std::string, Tensor>;

    NamedTensorMap() = default;

    void insert(const std::string& name, Tensor t) {
        if (name.empty()) throw std::runtime_error("named tensor map: empty tensor name");
        if (index_.count(name)) throw std::runtime_error("named tensor map: duplicate tensor name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.emplace_back(name, std::move(t));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("named tensor map: no tensor named '" + name + "'");
        return entries_[it->second].second;
    }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("named tensor map: no tensor named '" + name + "'");
        return entries_[it->second].second;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    const std::vector<Entry>& entries() const { return entries_; }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [n, t] : entries_) out.push_back(n);
        return out;
    }

    std::int64_t total_numel() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : entries_) n += t.numel();
        return n;
    }

    std::map<std::string, std::string> metadata;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline bool operator==(const NamedTensorMap& a, const NamedTensorMap& b) {
    return a.metadata == b.metadata && a.entries() == b.entries();
}

// ---------------------------------------------------------------------------
// Elementwise kernels. All pure; binary tensor forms require equal shapes.

enum class EwOp { Add, Sub, Mul, Scale, Abs, Sign, CompareGt };

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::runtime_error(std::string("ew ") + op + ": shape mismatch " + shape_to_string(a.shape) +
                                 " vs " + shape_to_string(b.shape));
}

template <typename F>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* op, F f) {
    require_same_shape(a, b, op);
    Tensor out(a.shape);
    const float* pa = a.data.data();
    const float* pb = b.data.data();
    float* po = out.data.data();
    parallel_for(a.data.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = f(pa[i], pb[i]);
    });
    return out;
}

template <typename F>
Tensor ew_unary(const Tensor& a, F f) {
    Tensor out(a.shape);
    const float* pa = a.data.data();
    float* po = out.data.data();
    parallel_for(a.data.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = f(pa[i]);
    });
    return out;
}

}  // namespace detail

inline Tensor ew_add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "add", [](float x, float y) { return x + y; });
}

inline Tensor ew_sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "sub", [](float x, float y) { return x - y; });
}

inline Tensor ew_mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "mul", [](float x, float y) { return x * y; });
}

inline Tensor ew_scale(const Tensor& a, float s) {
    return detail::ew_unary(a, [s](float x) { return x * s; });
}

inline Tensor ew_abs(const Tensor& a) {
    return detail::ew_unary(a, [](float x) { return std::fabs(x); });
}

inline Tensor ew_sign(const Tensor& a) {
    return detail::ew_unary(a, [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

inline Tensor ew_compare_gt(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(a, b, "compare_gt", [](float x, float y) { return x > y ? 1.0f : 0.0f; });
}

// Enum-dispatched form; Scale reads the scalar from `scalar`, the others from `b`.
inline Tensor ew(EwOp op, const Tensor& a, const Tensor* b = nullptr, float scalar = 0.0f) {
    switch (op) {
        case EwOp::Add: return ew_add(a, *b);
        case EwOp::Sub: return ew_sub(a, *b);
        case EwOp::Mul: return ew_mul(a, *b);
        case EwOp::Scale: return ew_scale(a, scalar);
        case EwOp::Abs: return ew_abs(a);
        case EwOp::Sign: return ew_sign(a);
        case EwOp::CompareGt: return ew_compare_gt(a, *b);
    }
    throw std::runtime_error("ew: unknown op");
}

}  // namespace mergeforge
