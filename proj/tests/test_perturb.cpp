// Perturbation operator and harness tests: bijection/inverse properties of
// patch permutation, lossy translocation coordinate arithmetic, and
// decline-report bookkeeping on constructed models.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rvernet/perturb.hpp"

using namespace rvernet;

namespace {

template <typename T>
Tensor<T> random_image(Rng& rng, int S) {
    std::vector<T> v((size_t)(3 * S * S));
    for (auto& x : v) x = (T)rng.uniform(0.0, 1.0);
    return Tensor<T>({3, S, S}, std::move(v));
}

BackboneConfig tiny_cfg(BackboneKind kind) {
    BackboneConfig c;
    c.kind = kind;
    c.width = kind == BackboneKind::mini_cnn ? 16 : 24;
    c.feature_dim = kind == BackboneKind::mini_cnn ? 12 : 24;
    c.depth = 1;
    c.heads = 2;
    c.patch_size = 16;
    c.image_side = 32;
    return c;
}

template <typename T>
std::vector<CutoutPair<T>> tiny_test_set(int n, int S, int num_classes, uint64_t seed) {
    Rng rng(seed);
    std::vector<CutoutPair<T>> out;
    for (int i = 0; i < n; ++i) {
        CutoutPair<T> p;
        p.x1 = random_image<T>(rng, S);
        p.x2 = random_image<T>(rng, S);
        p.label = (int)rng.uniform_int((uint64_t)num_classes);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace

TEST_CASE("permute_patches is a seed-determined bijection on patches") {
    Rng rng(1);
    auto img = random_image<double>(rng, 64);

    SUBCASE("identity permutation reproduces the input") {
        std::vector<int64_t> id(16);
        std::iota(id.begin(), id.end(), 0);
        auto out = permute_patches(img, 16, id);
        CHECK(out.data() == img.data());
    }
    SUBCASE("any seed preserves the pixel multiset") {
        auto out = permute_patches(img, 16, (uint64_t)7);
        auto a = img.data(), b = out.data();
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
        CHECK(out.data() != img.data());
    }
    SUBCASE("applying the inverse permutation restores the input bitwise") {
        for (uint64_t seed : {0ull, 3ull, 12345ull}) {
            auto perm = Rng(seed).permutation(16);
            std::vector<int64_t> inv(16);
            for (int64_t q = 0; q < 16; ++q) inv[(size_t)perm[(size_t)q]] = q;
            auto roundtrip = permute_patches(permute_patches(img, 16, perm), 16, inv);
            CHECK(roundtrip.data() == img.data());
        }
    }
    SUBCASE("same seed twice gives the same output") {
        auto a = permute_patches(img, 16, (uint64_t)5);
        auto b = permute_patches(img, 16, (uint64_t)5);
        CHECK(a.data() == b.data());
    }
    SUBCASE("all channels move together") {
        auto out = permute_patches(img, 32, (uint64_t)9);
        // 2x2 grid: locate where patch 0 went and check all channels match.
        auto perm = Rng((uint64_t)9).permutation(4);
        for (int64_t q = 0; q < 4; ++q) {
            int64_t src = perm[(size_t)q];
            for (int64_t c = 0; c < 3; ++c) {
                size_t oi = (size_t)((c * 64 + (q / 2) * 32) * 64 + (q % 2) * 32);
                size_t si = (size_t)((c * 64 + (src / 2) * 32) * 64 + (src % 2) * 32);
                CHECK(out.data()[oi] == img.data()[si]);
            }
        }
    }
    SUBCASE("bad geometry and bad permutations are rejected") {
        CHECK_THROWS_AS(permute_patches(img, 17, (uint64_t)0), DimensionError);
        CHECK_THROWS_AS(permute_patches(img, 16, std::vector<int64_t>{0, 1}), DimensionError);
        std::vector<int64_t> dup(16, 3);
        CHECK_THROWS_AS(permute_patches(img, 16, dup), DimensionError);
    }
}

TEST_CASE("translocate shifts lossily with black fill") {
    Rng rng(2);
    int S = 16;
    auto img = random_image<double>(rng, S);

    SUBCASE("zero offset is the identity bitwise") {
        CHECK(translocate(img, 0, 0).data() == img.data());
    }
    SUBCASE("near-full shift leaves one column, mass never grows") {
        auto out = translocate(img, S - 1, 0);
        double in_sum = 0, out_sum = 0;
        for (double v : img.data()) in_sum += v;
        for (double v : out.data()) out_sum += v;
        CHECK(out_sum <= in_sum);
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < S; ++y) {
                for (int64_t x = 0; x < S - 1; ++x)
                    CHECK(out.data()[(size_t)((c * S + y) * S + x)] == 0.0);
                CHECK(out.data()[(size_t)((c * S + y) * S + S - 1)] ==
                      img.data()[(size_t)((c * S + y) * S + 0)]);
            }
    }
    SUBCASE("shift there and back equals input on the surviving region") {
        int dx = -5, dy = 9;
        auto back = translocate(translocate(img, dx, dy), -dx, -dy);
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < S; ++y)
                for (int64_t x = 0; x < S; ++x) {
                    // Survivors are pixels that stayed in range both ways.
                    bool survives = y + dy >= 0 && y + dy < S && x + dx >= 0 && x + dx < S;
                    double got = back.data()[(size_t)((c * S + y) * S + x)];
                    if (survives)
                        CHECK(got == img.data()[(size_t)((c * S + y) * S + x)]);
                    else
                        CHECK(got == 0.0);
                }
    }
    SUBCASE("out-of-range offsets are config errors") {
        CHECK_THROWS_AS(translocate(img, S, 0), ConfigError);
        CHECK_THROWS_AS(translocate(img, 0, -S), ConfigError);
    }
}

TEST_CASE("default translocation offsets scale from the 224 reference") {
    auto specs = default_translocations(64);
    REQUIRE(specs.size() == 3u);
    CHECK(specs[0].dx == -9);
    CHECK(specs[0].dy == 18);
    CHECK(specs[1].dx == 17);
    CHECK(specs[1].dy == -24);
    CHECK(specs[2].dx == 11);
    CHECK(specs[2].dy == 40);
    for (const auto& s : specs) CHECK(s.target == PerturbTarget::xroi);
    auto full = default_translocations(224);
    CHECK(full[0].dx == -30);
    CHECK(full[0].dy == 63);
    CHECK(full[1].dx == 60);
    CHECK(full[1].dy == -85);
    CHECK(full[2].dx == 37);
    CHECK(full[2].dy == 139);
}

TEST_CASE("perturbation_eval bookkeeping") {
    auto test = tiny_test_set<float>(40, 32, 3, 3);

    SUBCASE("constant predictor has all-zero deltas") {
        auto m = build_rvernet<float>(tiny_cfg(BackboneKind::mini_vit),
                                      tiny_cfg(BackboneKind::mini_cnn), 3, 8, 1);
        // Zeroing the last head layer makes every logit row identical.
        for (auto& [name, t] : m.named_parameters())
            if (name == "head/linear2.w" || name == "head/linear2.b")
                std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
        std::vector<PerturbSpec> specs = {PermutationSpec{16, 5, PerturbTarget::roi},
                                          TranslocationSpec{3, -4, PerturbTarget::both}};
        auto rep = perturbation_eval(m, test, specs);
        CHECK(rep.roi_kind == "mini_vit");
        CHECK(rep.xroi_kind == "mini_cnn");
        REQUIRE(rep.rows.size() == 2u);
        for (const auto& r : rep.rows) CHECK(r.delta == 0.0);
    }
    SUBCASE("empty spec list leaves only the baseline") {
        auto m = build_rvernet<float>(tiny_cfg(BackboneKind::mini_vit),
                                      tiny_cfg(BackboneKind::mini_cnn), 3, 8, 1);
        auto rep = perturbation_eval(m, test, {});
        CHECK(rep.rows.empty());
        CHECK(rep.baseline_top1 >= 0.0);
        CHECK(rep.baseline_top1 <= 100.0);
    }
    SUBCASE("perturbing the disconnected branch changes nothing") {
        auto m = build_rvernet<float>(tiny_cfg(BackboneKind::mini_cnn),
                                      tiny_cfg(BackboneKind::mini_cnn), 3, 8, 2,
                                      ModelMode::roi_only);
        std::vector<PerturbSpec> specs = {PermutationSpec{16, 5, PerturbTarget::xroi},
                                          TranslocationSpec{7, 7, PerturbTarget::xroi}};
        auto rep = perturbation_eval(m, test, specs);
        CHECK(rep.xroi_kind == "-");
        for (const auto& r : rep.rows) CHECK(r.delta == 0.0);
    }
    SUBCASE("permuting the roi input of a pos-embed-free vit changes no prediction") {
        auto cfg = tiny_cfg(BackboneKind::mini_vit);
        cfg.use_pos_embed = false;
        auto m = build_rvernet<float>(cfg, tiny_cfg(BackboneKind::mini_cnn), 3, 8, 4);
        std::vector<PerturbSpec> specs = {PermutationSpec{16, 11, PerturbTarget::roi}};
        auto rep = perturbation_eval(m, test, specs);
        REQUIRE(rep.rows.size() == 1u);
        CHECK(rep.rows[0].delta == 0.0);
    }
    SUBCASE("same spec seed reproduces the same report") {
        auto m = build_rvernet<float>(tiny_cfg(BackboneKind::mini_cnn),
                                      tiny_cfg(BackboneKind::mini_cnn), 3, 8, 5);
        std::vector<PerturbSpec> specs = {PermutationSpec{8, 21, PerturbTarget::both}};
        auto a = perturbation_eval(m, test, specs);
        auto b = perturbation_eval(m, test, specs);
        CHECK(a.baseline_top1 == b.baseline_top1);
        CHECK(a.rows[0].perturbed_top1 == b.rows[0].perturbed_top1);
    }
    SUBCASE("empty test set is rejected") {
        auto m = build_rvernet<float>(tiny_cfg(BackboneKind::mini_cnn),
                                      tiny_cfg(BackboneKind::mini_cnn), 3, 8, 5);
        CHECK_THROWS_AS(perturbation_eval(m, {}, {}), ConfigError);
    }
}

TEST_CASE("report serialization and aggregation") {
    DeclineReport a;
    a.roi_kind = "mini_cnn";
    a.xroi_kind = "mini_vit";
    a.baseline_top1 = 0.9;
    a.rows.push_back({PermutationSpec{16, 1, PerturbTarget::roi}, 0.8, -0.10});
    DeclineReport b = a;
    b.baseline_top1 = 0.8;
    b.rows[0].perturbed_top1 = 0.6;
    b.rows[0].delta = -0.20;

    SUBCASE("json carries the exact fields") {
        auto j = report_to_json(a);
        CHECK(j["roi_kind"] == "mini_cnn");
        CHECK(j["baseline_top1"] == 0.9);
        CHECK(j["rows"][0]["delta"] == -0.10);
        CHECK(j["rows"][0]["target"] == "roi");
    }
    SUBCASE("csv has one line per row plus a header") {
        auto csv = report_to_csv(a);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
        CHECK(csv.find("permute(patch=16,seed=1,target=roi)") != std::string::npos);
    }
    SUBCASE("single report aggregates to itself") {
        auto rows = aggregate_by_architecture({a});
        REQUIRE(rows.size() == 1u);
        CHECK(rows[0].mean_delta == -0.10);
        CHECK(rows[0].count == 1);
    }
    SUBCASE("two identical reports keep the same mean") {
        auto rows = aggregate_by_architecture({a, a});
        REQUIRE(rows.size() == 1u);
        CHECK(rows[0].mean_delta == -0.10);
        CHECK(rows[0].count == 2);
    }
    SUBCASE("hand-built deltas of -0.10 and -0.20 average to -0.15") {
        auto rows = aggregate_by_architecture({a, b});
        REQUIRE(rows.size() == 1u);
        CHECK(rows[0].mean_delta == doctest::Approx(-0.15).epsilon(1e-12));
        CHECK(rows[0].mean_baseline == doctest::Approx(0.85).epsilon(1e-12));
        // Different architecture pairs land in different cells.
        DeclineReport c = a;
        c.roi_kind = "mini_mixer";
        auto split_rows = aggregate_by_architecture({a, c});
        CHECK(split_rows.size() == 2u);
    }
}

TEST_CASE("targets parse both ways") {
    CHECK(perturb_target_from_string("roi") == PerturbTarget::roi);
    CHECK(perturb_target_from_string("xroi") == PerturbTarget::xroi);
    CHECK(perturb_target_from_string("both") == PerturbTarget::both);
    CHECK_THROWS_AS(perturb_target_from_string("none"), ConfigError);
    CHECK(std::string(to_string(PerturbTarget::both)) == "both");
}
