#include <catch2/catch_amalgamated.hpp>

#include "mergeforge/rng.hpp"
#include "mergeforge/task_vector.hpp"

using namespace mergeforge;

namespace {

NamedTensorMap random_base(Rng& rng, int n_tensors = 3) {
    NamedTensorMap m;
    for (int i = 0; i < n_tensors; ++i) {
        Tensor t({4, 3});
        for (auto& v : t.data) v = static_cast<float>(rng.normal());
        m.insert("p" + std::to_string(i), std::move(t));
    }
    return m;
}

NamedTensorMap perturbed(const NamedTensorMap& base, Rng& rng) {
    NamedTensorMap m;
    m.metadata = base.metadata;
    for (const auto& [name, t] : base) {
        Tensor p = t;
        for (auto& v : p.data) v = static_cast<float>(v + 0.1 * rng.normal());
        m.insert(name, std::move(p));
    }
    return m;
}

}  // namespace

TEST_CASE("extract subtracts elementwise and skips frozen tensors") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}, {0.5f, 2.0f}));
    theta0.insert("frozen", Tensor({1}, {7.0f}));
    NamedTensorMap thetam;
    thetam.insert("w", Tensor({2}, {1.0f, 2.0f}));

    TaskVector tv = extract(thetam, theta0, "t");
    CHECK(tv.delta.at("w").data == std::vector<float>{0.5f, 0.0f});
    CHECK_FALSE(tv.delta.contains("frozen"));
    CHECK(tv.task_id == "t");
    CHECK(tv.base_fingerprint == fingerprint(theta0));
}

TEST_CASE("extract of identical checkpoints is the zero vector") {
    Rng rng(3);
    NamedTensorMap theta0 = random_base(rng);
    TaskVector tv = extract(theta0, theta0);
    for (const auto& [name, t] : tv.delta)
        for (float v : t.data) CHECK(v == 0.0f);
}

TEST_CASE("extract reports shape mismatches by name") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}));
    NamedTensorMap thetam;
    thetam.insert("w", Tensor({3}));
    CHECK_THROWS_WITH(extract(thetam, theta0), Catch::Matchers::ContainsSubstring("'w'"));
}

TEST_CASE("apply then extract round-trips over 100 random checkpoints") {
    Rng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        NamedTensorMap theta0 = random_base(rng);
        NamedTensorMap thetam = perturbed(theta0, rng);
        TaskVector tv = extract(thetam, theta0);
        NamedTensorMap back = apply(theta0, tv, 1.0f);
        REQUIRE(back.size() == thetam.size());
        for (const auto& [name, t] : thetam) {
            const Tensor& b = back.at(name);
            for (std::size_t i = 0; i < t.data.size(); ++i)
                CHECK(std::fabs(b.data[i] - t.data[i]) <= 1e-6f * std::max(1.0f, std::fabs(t.data[i])));
        }
    }
}

TEST_CASE("apply with alpha 0 returns the base exactly") {
    Rng rng(5);
    NamedTensorMap theta0 = random_base(rng);
    TaskVector tv = extract(perturbed(theta0, rng), theta0);
    CHECK(apply(theta0, tv, 0.0f) == theta0);
}

TEST_CASE("apply scales by alpha per the merged-update rule") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}, {0.5f, 2.0f}));
    TaskVector tv;
    tv.base_fingerprint = fingerprint(theta0);
    tv.delta.insert("w", Tensor({2}, {0.5f, 0.0f}));
    NamedTensorMap out = apply(theta0, tv, 2.0f);
    CHECK(out.at("w").data == std::vector<float>{1.5f, 2.0f});
}

TEST_CASE("apply refuses a fingerprint mismatch naming both") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}));
    TaskVector tv;
    tv.base_fingerprint = "deadbeefdeadbeef";
    tv.delta.insert("w", Tensor({2}));
    CHECK_THROWS_WITH(apply(theta0, tv, 1.0f),
                      Catch::Matchers::ContainsSubstring("deadbeefdeadbeef") &&
                          Catch::Matchers::ContainsSubstring(fingerprint(theta0)));
}

TEST_CASE("extract is anti-symmetric") {
    Rng rng(17);
    NamedTensorMap a = random_base(rng);
    NamedTensorMap b = perturbed(a, rng);
    TaskVector ab = extract(a, b);
    TaskVector ba = extract(b, a);
    for (const auto& [name, t] : ab.delta) {
        const Tensor& r = ba.delta.at(name);
        for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(t.data[i] == -r.data[i]);
    }
}

TEST_CASE("materialize equals the naive triple-loop product") {
    SECTION("hand example") {
        LowRankUpdate lr;
        lr.up = Tensor({2, 1}, {1.0f, 0.0f});
        lr.down = Tensor({1, 2}, {2.0f, 3.0f});
        lr.scaling = 1.0f;
        Tensor d = materialize(lr);
        CHECK(d.shape == std::vector<std::int64_t>{2, 2});
        CHECK(d.data == std::vector<float>{2.0f, 3.0f, 0.0f, 0.0f});
    }
    SECTION("zero scaling gives the zero tensor") {
        LowRankUpdate lr;
        lr.up = Tensor({3, 2}, std::vector<float>(6, 1.0f));
        lr.down = Tensor({2, 4}, std::vector<float>(8, 1.0f));
        lr.scaling = 0.0f;
        for (float v : materialize(lr).data) CHECK(v == 0.0f);
    }
    SECTION("random rank-2 factors against the brute-force oracle") {
        Rng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            LowRankUpdate lr;
            lr.up = Tensor({5, 2});
            lr.down = Tensor({2, 6});
            for (auto& v : lr.up.data) v = static_cast<float>(rng.normal());
            for (auto& v : lr.down.data) v = static_cast<float>(rng.normal());
            lr.scaling = static_cast<float>(rng.uniform(0.1, 2.0));
            Tensor got = materialize(lr);
            for (std::int64_t i = 0; i < 5; ++i)
                for (std::int64_t j = 0; j < 6; ++j) {
                    double acc = 0.0;
                    for (std::int64_t k = 0; k < 2; ++k)
                        acc += static_cast<double>(lr.up.at(i, k)) * static_cast<double>(lr.down.at(k, j));
                    acc *= lr.scaling;
                    CHECK(std::fabs(got.at(i, j) - acc) <= 1e-6 * std::max(1.0, std::fabs(acc)));
                }
        }
    }
    SECTION("inner dimension mismatch is an error") {
        LowRankUpdate lr;
        lr.up = Tensor({2, 3});
        lr.down = Tensor({2, 4});
        CHECK_THROWS_WITH(materialize(lr), Catch::Matchers::ContainsSubstring("inner dimension"));
    }
}

TEST_CASE("materialize is linear in scaling") {
    Rng rng(31);
    LowRankUpdate lr;
    lr.up = Tensor({4, 2});
    lr.down = Tensor({2, 4});
    for (auto& v : lr.up.data) v = static_cast<float>(rng.normal());
    for (auto& v : lr.down.data) v = static_cast<float>(rng.normal());
    lr.scaling = 1.0f;
    Tensor base = materialize(lr);
    lr.scaling = 2.5f;
    Tensor scaled = materialize(lr);
    for (std::size_t i = 0; i < base.data.size(); ++i)
        CHECK(std::fabs(scaled.data[i] - 2.5f * base.data[i]) <= 1e-6f * std::max(1.0f, std::fabs(scaled.data[i])));
}
