#include <catch2/catch_amalgamated.hpp>

#include "mergeforge/mask.hpp"
#include "mergeforge/rng.hpp"

using namespace mergeforge;

namespace {

TaskVector tv_of(const std::vector<float>& values, const std::string& id) {
    TaskVector tv;
    tv.task_id = id;
    tv.base_fingerprint = "fp0";
    tv.delta.insert("w", Tensor({static_cast<std::int64_t>(values.size())}, values));
    return tv;
}

MergedVector mv_of(const std::vector<float>& values) {
    MergedVector mv;
    mv.base_fingerprint = "fp0";
    mv.tau_merge.insert("w", Tensor({static_cast<std::int64_t>(values.size())}, values));
    return mv;
}

TaskMask mask_of(const std::vector<float>& bits, const std::string& id) {
    TaskMask m;
    m.task_id = id;
    m.masks.insert("w", Tensor({static_cast<std::int64_t>(bits.size())}, bits));
    return m;
}

}  // namespace

TEST_CASE("consistency test by hand") {
    // |tau_merge - tau_m| = [0.2, 0.9], thresholds [0.12, 0.54]
    TaskMask s = build_mask(tv_of({1.0f, 0.1f}, "a"), mv_of({1.2f, 1.0f}), 0.6f);
    CHECK(s.masks.at("w").data == std::vector<float>{1.0f, 0.0f});
}

TEST_CASE("lambda zero keeps exactly the nonzero entries") {
    TaskMask s = build_mask(tv_of({0.5f, 0.0f}, "a"), mv_of({1.0f, 1.0f}), 0.0f);
    CHECK(s.masks.at("w").data == std::vector<float>{1.0f, 0.0f});
}

TEST_CASE("single task under TA: residual vanishes, mask keeps nonzero deltas") {
    std::vector<float> v = {0.3f, 0.0f, -0.7f};
    TaskMask s = build_mask(tv_of(v, "a"), mv_of(v), 0.6f);
    CHECK(s.masks.at("w").data == std::vector<float>{1.0f, 0.0f, 1.0f});
}

TEST_CASE("build_mask matches a straight-line re-evaluation bit-exactly on random pairs") {
    Rng rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<float> tau_m(41), tau_merge(41);
        for (auto& v : tau_m) v = static_cast<float>(rng.normal());
        for (auto& v : tau_merge) v = static_cast<float>(rng.normal());
        float lambda = static_cast<float>(rng.uniform(0.0, 1.5));
        TaskMask got = build_mask(tv_of(tau_m, "a"), mv_of(tau_merge), lambda);
        for (std::size_t i = 0; i < tau_m.size(); ++i) {
            float expect = std::fabs(tau_m[i]) > lambda * std::fabs(tau_merge[i] - tau_m[i]) ? 1.0f : 0.0f;
            REQUIRE(got.masks.at("w").data[i] == expect);
        }
    }
}

TEST_CASE("exact threshold equality drops the parameter") {
    // |tau_m| == lambda*|residual| exactly: 0.5 vs 1.0*0.5
    TaskMask s = build_mask(tv_of({0.5f}, "a"), mv_of({1.0f}), 1.0f);
    CHECK(s.masks.at("w").data == std::vector<float>{0.0f});
}

TEST_CASE("mask rebuild is bit-identical") {
    Rng rng(73);
    std::vector<float> tau_m(17), tau_merge(17);
    for (auto& v : tau_m) v = static_cast<float>(rng.normal());
    for (auto& v : tau_merge) v = static_cast<float>(rng.normal());
    TaskMask a = build_mask(tv_of(tau_m, "a"), mv_of(tau_merge), 0.6f);
    TaskMask b = build_mask(tv_of(tau_m, "a"), mv_of(tau_merge), 0.6f);
    CHECK(a.masks == b.masks);
}

TEST_CASE("masks over tensors the task never touched are all zero") {
    TaskVector tv = tv_of({1.0f}, "a");
    MergedVector mv = mv_of({1.0f});
    mv.tau_merge.insert("untouched", Tensor({3}, {0.5f, -0.5f, 2.0f}));
    TaskMask s = build_mask(tv, mv, 0.6f);
    CHECK(s.masks.at("untouched").data == std::vector<float>{0.0f, 0.0f, 0.0f});
}

TEST_CASE("apply_mask hand evaluation and boundary masks") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}, {0.0f, 0.0f}));
    MergedVector mv = mv_of({1.2f, 1.0f});

    NamedTensorMap all_on = apply_mask(theta0, mv, mask_of({1, 1}, "a"));
    CHECK(all_on.at("w").data == std::vector<float>{1.2f, 1.0f});

    NamedTensorMap all_off = apply_mask(theta0, mv, mask_of({0, 0}, "a"));
    CHECK(all_off == theta0);

    NamedTensorMap mixed = apply_mask(theta0, mv, mask_of({1, 0}, "a"));
    CHECK(mixed.at("w").data == std::vector<float>{1.2f, 0.0f});
}

TEST_CASE("apply_mask leaves tensors outside the merge untouched") {
    NamedTensorMap theta0;
    theta0.insert("w", Tensor({2}, {3.0f, 4.0f}));
    theta0.insert("frozen", Tensor({1}, {9.0f}));
    MergedVector mv = mv_of({1.0f, 1.0f});
    NamedTensorMap out = apply_mask(theta0, mv, mask_of({1, 1}, "a"));
    CHECK(out.at("frozen").data == std::vector<float>{9.0f});
    CHECK(out.at("w").data == std::vector<float>{4.0f, 5.0f});
}

TEST_CASE("identity recovery: single task, TA, alpha 1") {
    Rng rng(79);
    NamedTensorMap theta0;
    Tensor base({13});
    for (auto& v : base.data) v = static_cast<float>(rng.normal());
    theta0.insert("w", base);
    NamedTensorMap theta1;
    Tensor ft = base;
    for (auto& v : ft.data) v = static_cast<float>(v + 0.05 * rng.normal());
    theta1.insert("w", ft);

    TaskVector tau = extract(theta1, theta0, "solo");
    MergeRecipe r;
    r.method = MergeMethod::TaskArithmetic;
    r.alpha = 1.0f;
    r.task_ids = {"solo"};
    MergedVector merged = merge(r, {tau});
    TaskMask mask = build_mask(tau, merged, 0.6f);
    NamedTensorMap rebuilt = apply_mask(theta0, merged, mask);
    CHECK(rebuilt.at("w").data == theta1.at("w").data);
}

TEST_CASE("selfish ratio hand counts and boundaries") {
    // per-position mask counts [1, 0, 2] -> one position kept by exactly one
    CHECK(selfish_ratio({mask_of({1, 0, 1}, "a"), mask_of({0, 0, 1}, "b")}) ==
          Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    // identical masks: every kept position is kept twice
    CHECK(selfish_ratio({mask_of({1, 1, 0}, "a"), mask_of({1, 1, 0}, "b")}) == 0.0);
    // disjoint full coverage
    CHECK(selfish_ratio({mask_of({1, 0}, "a"), mask_of({0, 1}, "b")}) == 1.0);
    // permutation invariance
    auto m1 = mask_of({1, 0, 1, 1}, "a");
    auto m2 = mask_of({0, 1, 1, 0}, "b");
    auto m3 = mask_of({1, 1, 0, 0}, "c");
    CHECK(selfish_ratio({m1, m2, m3}) == selfish_ratio({m3, m1, m2}));
    CHECK_THROWS_WITH(selfish_ratio({}), Catch::Matchers::ContainsSubstring("at least one"));
    CHECK_THROWS_WITH(selfish_ratio({m1, mask_of({1, 0}, "short")}),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
}

TEST_CASE("active ratio with and without component filters") {
    CHECK(active_ratio(mask_of({1, 0, 1, 0}, "a")) == 0.5);
    CHECK(active_ratio(mask_of({0, 0, 0}, "a")) == 0.0);

    TaskMask two;
    two.task_id = "a";
    two.masks.insert("vision.w", Tensor({4}, {1.0f, 1.0f, 0.0f, 0.0f}));
    two.masks.insert("lang.w", Tensor({2}, {1.0f, 0.0f}));
    // subset means computed by hand: vision 2/4, lang 1/2, overall 3/6
    CHECK(active_ratio(two, "vision.") == 0.5);
    CHECK(active_ratio(two, "lang.") == 0.5);
    CHECK(active_ratio(two) == 0.5);
    two.masks.at("lang.w").data = {1.0f, 1.0f};
    CHECK(active_ratio(two, "lang.") == 1.0);
    CHECK_THROWS_WITH(active_ratio(two, "audio."), Catch::Matchers::ContainsSubstring("matches no tensor"));
}

TEST_CASE("mask monotonicity in lambda") {
    Rng rng(83);
    std::vector<float> tau_m(101), tau_merge(101);
    for (auto& v : tau_m) v = static_cast<float>(rng.normal());
    for (auto& v : tau_merge) v = static_cast<float>(rng.normal());
    TaskVector tv = tv_of(tau_m, "a");
    MergedVector mv = mv_of(tau_merge);
    double prev_ratio = 2.0;
    std::vector<float> prev_bits;
    for (float lambda : {0.2f, 0.3f, 0.4f, 0.5f, 0.6f, 0.7f, 0.8f, 0.9f}) {
        TaskMask m = build_mask(tv, mv, lambda);
        const auto& bits = m.masks.at("w").data;
        if (!prev_bits.empty())
            for (std::size_t i = 0; i < bits.size(); ++i) CHECK(bits[i] <= prev_bits[i]);  // S(l1) contains S(l2)
        double ratio = active_ratio(m);
        CHECK(ratio <= prev_ratio);
        prev_ratio = ratio;
        prev_bits = bits;
    }
}

TEST_CASE("mask stats aggregate per task and per component") {
    TaskMask a;
    a.task_id = "a";
    a.masks.insert("x", Tensor({2}, {1.0f, 0.0f}));
    a.masks.insert("y", Tensor({2}, {1.0f, 1.0f}));
    TaskMask b;
    b.task_id = "b";
    b.masks.insert("x", Tensor({2}, {0.0f, 0.0f}));
    b.masks.insert("y", Tensor({2}, {1.0f, 0.0f}));
    MaskStats stats = compute_mask_stats({a, b});
    CHECK(stats.task_count == 2);
    CHECK(stats.position_count == 4);
    CHECK(stats.per_task_active_ratio["a"] == 0.75);
    CHECK(stats.per_task_active_ratio["b"] == 0.25);
    CHECK(stats.per_component_active_ratio["x"] == 0.25);
    CHECK(stats.per_component_active_ratio["y"] == 0.75);
    // positions kept exactly once: x0 (a only), y1 (a only) -> 2/4
    CHECK(stats.selfish_ratio == 0.5);
}
