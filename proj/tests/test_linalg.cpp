#include <catch2/catch_amalgamated.hpp>

#include "mergeforge/linalg.hpp"
#include "mergeforge/rng.hpp"

using namespace mergeforge;

namespace {

Mat random_mat(Rng& rng, std::int64_t r, std::int64_t c) {
    Mat m(r, c);
    for (auto& v : m.data) v = rng.normal();
    return m;
}

// Brute-force cyclic Jacobi eigendecomposition of a symmetric matrix; the
// independent oracle for the right singular vectors (eigenvectors of A^T A).
struct Eig {
    std::vector<double> values;
    Mat vectors;  // columns are eigenvectors
};

Eig jacobi_eigen_symmetric(Mat a) {
    const std::int64_t n = a.rows;
    Mat v = Mat::identity(n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < n - 1; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) {
                if (std::fabs(a.at(p, q)) < 1e-300) continue;
                double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * a.at(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (std::int64_t k = 0; k < n; ++k) {
                    double akp = a.at(k, p), akq = a.at(k, q);
                    a.at(k, p) = c * akp - s * akq;
                    a.at(k, q) = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    double apk = a.at(p, k), aqk = a.at(q, k);
                    a.at(p, k) = c * apk - s * aqk;
                    a.at(q, k) = s * apk + c * aqk;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    double vkp = v.at(k, p), vkq = v.at(k, q);
                    v.at(k, p) = c * vkp - s * vkq;
                    v.at(k, q) = s * vkp + c * vkq;
                }
            }
    }
    Eig e;
    e.values.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) e.values[static_cast<std::size_t>(i)] = a.at(i, i);
    e.vectors = v;
    // sort descending by eigenvalue
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::int64_t x, std::int64_t y) { return e.values[static_cast<std::size_t>(x)] > e.values[static_cast<std::size_t>(y)]; });
    Eig sorted;
    sorted.values.resize(static_cast<std::size_t>(n));
    sorted.vectors = Mat(n, n);
    for (std::int64_t j = 0; j < n; ++j) {
        sorted.values[static_cast<std::size_t>(j)] = e.values[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])];
        for (std::int64_t i = 0; i < n; ++i) sorted.vectors.at(i, j) = e.vectors.at(i, order[static_cast<std::size_t>(j)]);
    }
    return sorted;
}

}  // namespace

TEST_CASE("matmul and matvec against hand results") {
    Mat a(2, 3);
    a.data = {1, 2, 3, 4, 5, 6};
    Mat b(3, 2);
    b.data = {7, 8, 9, 10, 11, 12};
    Mat c = matmul(a, b);
    CHECK(c.at(0, 0) == 58);
    CHECK(c.at(0, 1) == 64);
    CHECK(c.at(1, 0) == 139);
    CHECK(c.at(1, 1) == 154);
    CHECK_THROWS(matmul(a, a));

    std::vector<double> y = matvec(a, {1.0, 0.0, -1.0});
    CHECK(y == std::vector<double>{-2.0, -2.0});
    CHECK_THROWS(matvec(a, {1.0}));
}

TEST_CASE("svd of a diagonal matrix") {
    Mat a(2, 2);
    a.at(0, 0) = 3.0;
    a.at(1, 1) = 1.0;
    Svd s = svd(a);
    CHECK(s.sigma[0] == Catch::Approx(3.0).margin(1e-12));
    CHECK(s.sigma[1] == Catch::Approx(1.0).margin(1e-12));
    // top right singular vector is e0 up to sign; canonical sign makes it +e0
    CHECK(s.vt.at(0, 0) == Catch::Approx(1.0).margin(1e-12));
    CHECK(s.vt.at(0, 1) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("svd reconstruction, orthonormality and eigen oracle on random matrices") {
    Rng rng(101);
    for (int trial = 0; trial < 25; ++trial) {
        std::int64_t n = 8;
        Mat a = random_mat(rng, n, n);
        Svd s = svd(a);

        // singular values descending
        for (std::size_t i = 1; i < s.sigma.size(); ++i) CHECK(s.sigma[i] <= s.sigma[i - 1] + 1e-12);

        // reconstruction within 1e-5 (well inside double Jacobi accuracy)
        Mat us(n, n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) us.at(i, j) = s.u.at(i, j) * s.sigma[static_cast<std::size_t>(j)];
        Mat rec = matmul(us, s.vt);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) CHECK(std::fabs(rec.at(i, j) - a.at(i, j)) <= 1e-5);

        // rows of vt orthonormal
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                double dot = 0.0;
                for (std::int64_t k = 0; k < n; ++k) dot += s.vt.at(i, k) * s.vt.at(j, k);
                CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) <= 1e-5);
            }

        // right singular vectors match the Gram-matrix eigenvectors up to sign
        Mat gram = matmul(a.transposed(), a);
        Eig e = jacobi_eigen_symmetric(gram);
        for (std::int64_t j = 0; j < n; ++j) {
            CHECK(std::sqrt(std::max(0.0, e.values[static_cast<std::size_t>(j)])) ==
                  Catch::Approx(s.sigma[static_cast<std::size_t>(j)]).margin(1e-8));
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += e.vectors.at(i, j) * s.vt.at(j, i);
            CHECK(std::fabs(std::fabs(dot) - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("svd handles rectangular matrices both ways") {
    Rng rng(107);
    for (auto [r, c] : std::vector<std::pair<std::int64_t, std::int64_t>>{{6, 3}, {3, 6}}) {
        Mat a = random_mat(rng, r, c);
        Svd s = svd(a);
        std::int64_t small = std::min(r, c);
        REQUIRE(static_cast<std::int64_t>(s.sigma.size()) == small);
        REQUIRE(s.u.rows == r);
        REQUIRE(s.vt.cols == c);
        Mat us(r, small);
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < small; ++j) us.at(i, j) = s.u.at(i, j) * s.sigma[static_cast<std::size_t>(j)];
        Mat rec = matmul(us, s.vt);
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) CHECK(std::fabs(rec.at(i, j) - a.at(i, j)) <= 1e-5);
    }
}

TEST_CASE("canonical sign: first nonzero component of each right vector is positive") {
    Rng rng(109);
    Mat a = random_mat(rng, 5, 5);
    Svd s = svd(a);
    for (std::int64_t j = 0; j < 5; ++j) {
        double lead = 0.0;
        for (std::int64_t i = 0; i < 5; ++i)
            if (s.vt.at(j, i) != 0.0) {
                lead = s.vt.at(j, i);
                break;
            }
        CHECK(lead > 0.0);
    }
}

TEST_CASE("svd_rank counts significant singular values") {
    Mat a(3, 3);
    a.at(0, 0) = 2.0;
    a.at(1, 1) = 1.0;  // rank 2
    Svd s = svd(a);
    CHECK(svd_rank(s) == 2);
}
