#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "mergeforge/merge.hpp"
#include "mergeforge/rng.hpp"

using namespace mergeforge;

namespace {

TaskVector tv_of(const std::vector<float>& values, const std::string& id, const std::string& fp = "fp0") {
    TaskVector tv;
    tv.task_id = id;
    tv.base_fingerprint = fp;
    tv.delta.insert("w", Tensor({static_cast<std::int64_t>(values.size())}, values));
    return tv;
}

std::vector<float> merged_values(const MergedVector& m) { return m.tau_merge.at("w").data; }

// Independent brute-force references. These re-implement the kernels as
// straight loops and stay decoupled from the library path they check.

std::vector<float> oracle_sum(const std::vector<std::vector<float>>& vs) {
    std::vector<float> out(vs[0].size(), 0.0f);
    for (const auto& v : vs)
        for (std::size_t i = 0; i < v.size(); ++i) out[i] += v[i];
    return out;
}

std::vector<float> oracle_ties(const std::vector<std::vector<float>>& vs, float keep_fraction) {
    const std::size_t n = vs[0].size();
    // trim: keep the ceil(keep*n) largest magnitudes per vector, ties kept
    std::vector<std::vector<float>> trimmed;
    for (const auto& v : vs) {
        std::vector<float> mags(n);
        for (std::size_t i = 0; i < n; ++i) mags[i] = std::fabs(v[i]);
        std::vector<float> sorted = mags;
        std::sort(sorted.begin(), sorted.end(), std::greater<float>());
        std::size_t k = static_cast<std::size_t>(std::ceil(double(keep_fraction) * double(n)));
        if (k < 1) k = 1;
        if (k > n) k = n;
        float thr = sorted[k - 1];
        std::vector<float> t(n, 0.0f);
        for (std::size_t i = 0; i < n; ++i) t[i] = mags[i] >= thr ? v[i] : 0.0f;
        trimmed.push_back(std::move(t));
    }
    // elect + disjoint mean
    std::vector<float> out(n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (const auto& t : trimmed) s += t[i];
        float elected = s >= 0.0 ? 1.0f : -1.0f;
        float acc = 0.0f;
        int cnt = 0;
        for (const auto& t : trimmed) {
            if (t[i] != 0.0f && ((t[i] > 0.0f) == (elected > 0.0f))) {
                acc += t[i];
                ++cnt;
            }
        }
        out[i] = cnt > 0 ? acc / float(cnt) : 0.0f;
    }
    return out;
}

}  // namespace

TEST_CASE("average kernel") {
    CHECK(merged_values(merge_average({tv_of({1, 0}, "a")})) == std::vector<float>{1.0f, 0.0f});
    CHECK(merged_values(merge_average({tv_of({1, 0}, "a"), tv_of({0, 1}, "b")})) ==
          std::vector<float>{0.5f, 0.5f});
    // permutation invariance
    auto fwd = merge_average({tv_of({1, 2}, "a"), tv_of({3, 5}, "b")});
    auto rev = merge_average({tv_of({3, 5}, "b"), tv_of({1, 2}, "a")});
    CHECK(merged_values(fwd) == merged_values(rev));
}

TEST_CASE("task arithmetic kernel") {
    CHECK(merged_values(merge_ta({tv_of({1, 0}, "a"), tv_of({0, 1}, "b")})) == std::vector<float>{1.0f, 1.0f});
    // cancellation
    CHECK(merged_values(merge_ta({tv_of({2, -3}, "a"), tv_of({-2, 3}, "b")})) == std::vector<float>{0.0f, 0.0f});
}

TEST_CASE("task arithmetic matches the loop-sum oracle exactly on random vectors") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::vector<float>> raw;
        std::vector<TaskVector> tvs;
        for (int m = 0; m < 3; ++m) {
            std::vector<float> v(17);
            for (auto& x : v) x = static_cast<float>(rng.normal());
            raw.push_back(v);
            tvs.push_back(tv_of(v, "t" + std::to_string(m)));
        }
        CHECK(merged_values(merge_ta(tvs)) == oracle_sum(raw));
    }
}

TEST_CASE("ties trims, elects and disjoint-means by hand") {
    // single vector, keep 0.5 of 4 entries -> top-2 magnitudes survive
    auto single = merge_ties({tv_of({1.0f, -0.2f, 0.0f, 0.4f}, "a")}, 0.5f);
    CHECK(merged_values(single) == std::vector<float>{1.0f, 0.0f, 0.0f, 0.4f});

    // sign election: sum(2, -1) > 0, only the +2 contributes
    auto elected = merge_ties({tv_of({2, 0}, "a"), tv_of({-1, 0}, "b")}, 1.0f);
    CHECK(merged_values(elected) == std::vector<float>{2.0f, 0.0f});

    // consensus: identical vectors pass through
    auto same = merge_ties({tv_of({1, -2, 3}, "a"), tv_of({1, -2, 3}, "b")}, 1.0f);
    CHECK(merged_values(same) == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("ties matches the explicit trim/elect/merge oracle on random vectors") {
    Rng rng(43);
    for (int trial = 0; trial < 100; ++trial) {
        float keep = static_cast<float>(rng.uniform(0.1, 1.0));
        int m_count = 2 + static_cast<int>(rng.next_below(3));
        std::vector<std::vector<float>> raw;
        std::vector<TaskVector> tvs;
        for (int m = 0; m < m_count; ++m) {
            std::vector<float> v(23);
            for (auto& x : v) x = static_cast<float>(rng.normal());
            raw.push_back(v);
            tvs.push_back(tv_of(v, "t" + std::to_string(m)));
        }
        std::vector<float> expect = oracle_ties(raw, keep);
        std::vector<float> got = merged_values(merge_ties(tvs, keep));
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(std::fabs(got[i] - expect[i]) <= 1e-6f * std::max(1.0f, std::fabs(expect[i])));
    }
}

TEST_CASE("ties output magnitude never exceeds the max input magnitude per position") {
    Rng rng(47);
    std::vector<TaskVector> tvs;
    std::vector<std::vector<float>> raw;
    for (int m = 0; m < 4; ++m) {
        std::vector<float> v(31);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        raw.push_back(v);
        tvs.push_back(tv_of(v, "t" + std::to_string(m)));
    }
    auto got = merged_values(merge_ties(tvs, 0.5f));
    for (std::size_t i = 0; i < got.size(); ++i) {
        float maxmag = 0.0f;
        for (const auto& v : raw) maxmag = std::max(maxmag, std::fabs(v[i]));
        CHECK(std::fabs(got[i]) <= maxmag + 1e-6f);
    }
}

TEST_CASE("all kernels are the identity on a single vector") {
    auto v = tv_of({0.3f, -1.2f, 0.0f, 4.5f}, "solo");
    CHECK(merged_values(merge_average({v})) == v.delta.at("w").data);
    CHECK(merged_values(merge_ta({v})) == v.delta.at("w").data);
    CHECK(merged_values(merge_ties({v}, 1.0f)) == v.delta.at("w").data);
}

TEST_CASE("task arithmetic is linear in a common scale") {
    Rng rng(53);
    std::vector<TaskVector> tvs, scaled;
    const float c = 1.7f;
    for (int m = 0; m < 3; ++m) {
        std::vector<float> v(11);
        for (auto& x : v) x = static_cast<float>(rng.normal());
        tvs.push_back(tv_of(v, "t" + std::to_string(m)));
        std::vector<float> vs(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) vs[i] = c * v[i];
        scaled.push_back(tv_of(vs, "t" + std::to_string(m)));
    }
    auto direct = merged_values(merge_ta(scaled));
    auto indirect = merged_values(merge_ta(tvs));
    for (std::size_t i = 0; i < direct.size(); ++i)
        CHECK(std::fabs(direct[i] - c * indirect[i]) <= 1e-5f * std::max(1.0f, std::fabs(direct[i])));
}

TEST_CASE("merge dispatcher applies the recipe scaling") {
    MergeRecipe r;
    r.method = MergeMethod::Average;
    r.alpha = 1.0f;
    r.task_ids = {"a"};
    auto v = tv_of({1.0f, -2.0f}, "a");
    CHECK(merged_values(merge(r, {v})) == v.delta.at("w").data);

    r.method = MergeMethod::TaskArithmetic;
    r.alpha = 0.5f;
    r.task_ids = {"a", "b"};
    auto half = merge(r, {tv_of({2, 0}, "a"), tv_of({0, 2}, "b")});
    CHECK(merged_values(half) == std::vector<float>{1.0f, 1.0f});

    r.method = MergeMethod::Ties;
    r.alpha = 2.0f;
    r.ties_keep_fraction = 0.5f;
    auto tied = merge(r, {tv_of({1.0f, -0.2f, 0.0f, 0.4f}, "a"), tv_of({0.9f, 0.1f, 0.0f, 0.5f}, "b")});
    auto manual = merge_ties({tv_of({1.0f, -0.2f, 0.0f, 0.4f}, "a"), tv_of({0.9f, 0.1f, 0.0f, 0.5f}, "b")}, 0.5f);
    auto scaled = ew_scale(manual.tau_merge.at("w"), 2.0f);
    CHECK(merged_values(tied) == scaled.data);
}

TEST_CASE("merge validates inputs") {
    CHECK_THROWS_WITH(merge_ta({}), Catch::Matchers::ContainsSubstring("at least one"));
    CHECK_THROWS_WITH(merge_ta({tv_of({1}, "a", "fpA"), tv_of({1}, "b", "fpB")}),
                      Catch::Matchers::ContainsSubstring("fingerprint mismatch"));
    CHECK_THROWS_WITH(merge_ties({tv_of({1}, "a")}, 0.0f), Catch::Matchers::ContainsSubstring("keep_fraction"));
    MergeRecipe bad;
    bad.ties_keep_fraction = 1.5f;
    CHECK_THROWS(bad.validate());
    MergeRecipe dup;
    dup.task_ids = {"a", "a"};
    CHECK_THROWS_WITH(dup.validate(), Catch::Matchers::ContainsSubstring("duplicate"));

    TaskVector misshapen = tv_of({1, 2}, "a");
    CHECK_THROWS_WITH(merge_ta({tv_of({1, 2, 3}, "b"), misshapen}),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("union domain: tensors absent from one task count as zero") {
    TaskVector a = tv_of({1, 1}, "a");
    TaskVector b;
    b.task_id = "b";
    b.base_fingerprint = "fp0";
    b.delta.insert("other", Tensor({2}, {4.0f, 4.0f}));
    auto merged = merge_ta({a, b});
    CHECK(merged.tau_merge.at("w").data == std::vector<float>{1.0f, 1.0f});
    CHECK(merged.tau_merge.at("other").data == std::vector<float>{4.0f, 4.0f});
    auto avg = merge_average({a, b});
    CHECK(avg.tau_merge.at("w").data == std::vector<float>{0.5f, 0.5f});
    CHECK(avg.tau_merge.at("other").data == std::vector<float>{2.0f, 2.0f});
}

TEST_CASE("recipe JSON round-trip") {
    MergeRecipe r;
    r.method = MergeMethod::Ties;
    r.alpha = 0.8f;
    r.ties_keep_fraction = 0.3f;
    r.lambda = 0.7f;
    r.head_start_l = 3;
    r.task_ids = {"x", "y"};
    MergeRecipe back = recipe_from_json(recipe_to_json(r));
    CHECK(back.method == MergeMethod::Ties);
    CHECK(back.alpha == r.alpha);
    CHECK(back.ties_keep_fraction == r.ties_keep_fraction);
    CHECK(back.lambda == r.lambda);
    CHECK(back.head_start_l == r.head_start_l);
    CHECK(back.task_ids == r.task_ids);
    CHECK_THROWS_WITH(merge_method_from_string("wudi"), Catch::Matchers::ContainsSubstring("unknown merge method"));
}
