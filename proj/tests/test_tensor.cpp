#include <catch2/catch_amalgamated.hpp>

#include "mergeforge/rng.hpp"
#include "mergeforge/tensor.hpp"

using namespace mergeforge;

TEST_CASE("tensor shape and data must agree") {
    CHECK_NOTHROW(Tensor({2, 3}, std::vector<float>(6, 0.0f)));
    CHECK_THROWS_WITH(Tensor({2, 3}, std::vector<float>(5, 0.0f)),
                      Catch::Matchers::ContainsSubstring("does not match shape"));
    CHECK_THROWS(Tensor({0, 3}));
}

TEST_CASE("named map preserves insertion order and rejects duplicates") {
    NamedTensorMap m;
    m.insert("b", Tensor({1}, {1.0f}));
    m.insert("a", Tensor({1}, {2.0f}));
    auto names = m.names();
    REQUIRE(names.size() == 2);
    CHECK(names[0] == "b");
    CHECK(names[1] == "a");
    CHECK_THROWS_WITH(m.insert("a", Tensor({1})), Catch::Matchers::ContainsSubstring("duplicate"));
    CHECK_THROWS_WITH(m.insert("", Tensor({1})), Catch::Matchers::ContainsSubstring("empty"));
    CHECK_THROWS_WITH(m.at("zzz"), Catch::Matchers::ContainsSubstring("no tensor named"));
}

TEST_CASE("elementwise kernels") {
    Tensor a({2}, {1.0f, 2.0f});
    Tensor b({2}, {3.0f, 4.0f});
    CHECK(ew_mul(a, b).data == std::vector<float>{3.0f, 8.0f});
    CHECK(ew_add(a, b).data == std::vector<float>{4.0f, 6.0f});
    CHECK(ew_sub(b, a).data == std::vector<float>{2.0f, 2.0f});
    CHECK(ew_scale(a, 2.0f).data == std::vector<float>{2.0f, 4.0f});
    CHECK(ew_abs(Tensor({2}, {-1.5f, 0.0f})).data == std::vector<float>{1.5f, 0.0f});
    CHECK(ew_sign(Tensor({3}, {-2.0f, 0.0f, 5.0f})).data == std::vector<float>{-1.0f, 0.0f, 1.0f});

    // elementwise evaluation by hand: 1.0 > 0.12, 0.1 < 0.54
    Tensor x({2}, {1.0f, 0.1f});
    Tensor y({2}, {0.12f, 0.54f});
    CHECK(ew_compare_gt(x, y).data == std::vector<float>{1.0f, 0.0f});

    Tensor wrong({3});
    CHECK_THROWS_WITH(ew_add(a, wrong), Catch::Matchers::ContainsSubstring("[2]") &&
                                            Catch::Matchers::ContainsSubstring("[3]"));
}

TEST_CASE("ew dispatcher matches the named kernels") {
    Tensor a({3}, {1.0f, -2.0f, 0.5f});
    Tensor b({3}, {0.5f, 1.0f, 0.5f});
    CHECK(ew(EwOp::Add, a, &b) == ew_add(a, b));
    CHECK(ew(EwOp::Mul, a, &b) == ew_mul(a, b));
    CHECK(ew(EwOp::Scale, a, nullptr, 3.0f) == ew_scale(a, 3.0f));
    CHECK(ew(EwOp::Abs, a) == ew_abs(a));
    CHECK(ew(EwOp::Sign, a) == ew_sign(a));
    CHECK(ew(EwOp::CompareGt, a, &b) == ew_compare_gt(a, b));
}

TEST_CASE("ops are pure and a + (b - a) recovers b") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a({37});
        Tensor b({37});
        for (auto& v : a.data) v = static_cast<float>(rng.normal());
        for (auto& v : b.data) v = static_cast<float>(rng.normal());
        Tensor a_copy = a, b_copy = b;
        Tensor r = ew_add(a, ew_sub(b, a));
        CHECK(a == a_copy);
        CHECK(b == b_copy);
        for (std::size_t i = 0; i < r.data.size(); ++i) {
            float expect = b.data[i];
            CHECK(std::fabs(r.data[i] - expect) <= 1e-6f * std::max(1.0f, std::fabs(expect)));
        }
    }
    // exactly representable values round-trip with zero error
    Tensor a({3}, {1.0f, -4.0f, 0.25f});
    Tensor b({3}, {2.0f, 8.0f, 0.75f});
    CHECK(ew_add(a, ew_sub(b, a)) == b);
}

TEST_CASE("elementwise results are independent of thread chunking") {
    Rng rng(11);
    Tensor a({9001});
    Tensor b({9001});
    for (auto& v : a.data) v = static_cast<float>(rng.normal());
    for (auto& v : b.data) v = static_cast<float>(rng.normal());
    set_thread_cap(1);
    Tensor r1 = ew_mul(a, b);
    set_thread_cap(4);
    Tensor r4 = ew_mul(a, b);
    set_thread_cap(1);
    CHECK(r1 == r4);
}
