// Metric-formula tests against hand computations and two-path consistency,
// plus GradCAM math and plumbing checks.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "rvernet/gradcam.hpp"
#include "rvernet/metrics.hpp"
#include "rvernet/png_io.hpp"

using namespace rvernet;

TEST_CASE("top1 arithmetic") {
    CHECK(top1({1, 0, 2}, {1, 0, 2}) == 100.0);
    CHECK(top1({1, 0, 2}, {0, 1, 1}) == 0.0);
    CHECK(top1({1, 0, 2, 2}, {1, 0, 2, 1}) == 75.0);
    CHECK_THROWS_AS(top1({1}, {1, 2}), ConfigError);
    CHECK_THROWS_AS(top1({}, {}), ConfigError);
}

TEST_CASE("confusion matrix bookkeeping") {
    auto conf = confusion_matrix({0, 1, 1, 2, 0}, {0, 1, 2, 2, 1}, 3);
    // Row = target, column = prediction.
    CHECK(conf[0][0] == 1);
    CHECK(conf[1][1] == 1);
    CHECK(conf[1][0] == 1);
    CHECK(conf[2][1] == 1);
    CHECK(conf[2][2] == 1);
    // Row sums equal per-class support.
    int64_t support1 = conf[1][0] + conf[1][1] + conf[1][2];
    CHECK(support1 == 2);
    CHECK_THROWS_AS(confusion_matrix({3}, {0}, 3), ConfigError);
    CHECK_THROWS_AS(confusion_matrix({0}, {-1}, 3), ConfigError);
}

TEST_CASE("macro F1 against hand computations") {
    SUBCASE("perfect predictions give 1") {
        CHECK(macro_f1({0, 1, 2}, {0, 1, 2}, 3) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("symmetric binary mistakes") {
        // targets:     0 0 1 1
        // predictions: 0 1 0 1
        // class 0: TP=1 FP=1 FN=1 -> P=R=1/2 -> F1=1/2; class 1 mirrored.
        CHECK(macro_f1({0, 1, 0, 1}, {0, 0, 1, 1}, 2) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("constant predictor on balanced binary targets") {
        // class 0: TP=2 FP=2 FN=0 -> P=1/2, R=1 -> F1=2/3; class 1: F1=0.
        double v = macro_f1({0, 0, 0, 0}, {0, 0, 1, 1}, 2);
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("an absent class with no predictions counts as zero") {
        // K=3 but class 2 never appears: its F1 contributes 0 to the mean.
        double v = macro_f1({0, 1}, {0, 1}, 3);
        CHECK(v == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("invariant under consistent relabeling") {
        std::vector<int> preds = {0, 1, 2, 1, 0, 2, 2, 1};
        std::vector<int> tgts = {0, 2, 2, 1, 1, 2, 0, 1};
        double base = macro_f1(preds, tgts, 3);
        int perm[3] = {2, 0, 1};
        std::vector<int> p2, t2;
        for (int v : preds) p2.push_back(perm[v]);
        for (int v : tgts) t2.push_back(perm[v]);
        CHECK(macro_f1(p2, t2, 3) == doctest::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("subset F1") {
    std::vector<int> preds = {0, 1, 0, 2, 2, 1};
    std::vector<int> tgts = {0, 1, 1, 2, 1, 0};
    SUBCASE("full subset equals macro") {
        CHECK(subset_f1(preds, tgts, 3, {0, 1, 2}) ==
              doctest::Approx(macro_f1(preds, tgts, 3)).epsilon(1e-12));
    }
    SUBCASE("perfect subset is 1 regardless of the rest") {
        // Class 2 is predicted perfectly; classes 0/1 are noisy.
        std::vector<int> p = {2, 2, 0, 1, 1};
        std::vector<int> t = {2, 2, 1, 0, 1};
        CHECK(subset_f1(p, t, 3, {2}) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("empty subset is rejected") {
        CHECK_THROWS_AS(subset_f1(preds, tgts, 3, {}), ConfigError);
        CHECK_THROWS_AS(subset_f1(preds, tgts, 3, {5}), ConfigError);
    }
}

TEST_CASE("compute_metrics ties the pieces together consistently") {
    Rng rng(9);
    std::vector<int> preds, tgts;
    for (int i = 0; i < 500; ++i) {
        preds.push_back((int)rng.uniform_int(4));
        tgts.push_back((int)rng.uniform_int(4));
    }
    auto r = compute_metrics(preds, tgts, 4, {1, 2});
    // Two-path consistency: list-based metrics equal confusion-based ones.
    CHECK(r.top1 == doctest::Approx(top1(preds, tgts)).epsilon(1e-12));
    CHECK(r.macro_f1 == doctest::Approx(macro_f1(preds, tgts, 4)).epsilon(1e-12));
    CHECK(r.subset_f1 == doctest::Approx(subset_f1(preds, tgts, 4, {1, 2})).epsilon(1e-12));
    int64_t trace = 0, total = 0;
    for (int c = 0; c < 4; ++c)
        for (int p = 0; p < 4; ++p) {
            total += r.confusion[(size_t)c][(size_t)p];
            if (c == p) trace += r.confusion[(size_t)c][(size_t)p];
        }
    CHECK(r.top1 == doctest::Approx(100.0 * (double)trace / (double)total).epsilon(1e-12));
    auto j = metrics_to_json(r);
    CHECK(j["f1_averaging"] == "macro");
    CHECK(j["subset_classes"].size() == 2u);
}

TEST_CASE("table report flags best and worst") {
    MetricsReport a = compute_metrics({0, 1}, {0, 1}, 2);       // perfect
    MetricsReport b = compute_metrics({0, 0}, {0, 1}, 2);       // weaker
    SUBCASE("single run is both best and worst") {
        auto j = table_report_json({{"only", a}});
        CHECK(j["rows"][0]["best_in"].size() == 2u);
        CHECK(j["rows"][0]["worst_in"].size() == 2u);
    }
    SUBCASE("distinct runs get correct flags") {
        auto j = table_report_json({{"good", a}, {"bad", b}});
        CHECK(j["rows"][0]["best_in"] == nlohmann::json::array({"top1", "macro_f1"}));
        CHECK(j["rows"][0]["worst_in"].empty());
        CHECK(j["rows"][1]["worst_in"] == nlohmann::json::array({"top1", "macro_f1"}));
    }
    SUBCASE("ties share the best flag") {
        auto j = table_report_json({{"x", a}, {"y", a}});
        CHECK(j["rows"][0]["best_in"].size() == 2u);
        CHECK(j["rows"][1]["best_in"].size() == 2u);
    }
    SUBCASE("csv mirrors the json") {
        auto csv = table_report_csv({{"good", a}, {"bad", b}});
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
        CHECK(csv.find("good,100,1") != std::string::npos);
    }
}

TEST_CASE("cam_from_activations math") {
    SUBCASE("constant-zero activations stay zero through the guard") {
        auto acts = Tensor<double>::zeros({2, 3, 3});
        auto grads = Tensor<double>::full({2, 3, 3}, 1.0);
        auto cam = cam_from_activations(acts, grads);
        for (double v : cam.data()) CHECK(v == 0.0);
    }
    SUBCASE("single channel with uniform positive gradient is ReLU(acts)/max") {
        std::vector<double> a = {1.0, -2.0, 0.5, 4.0};
        auto acts = Tensor<double>({1, 2, 2}, std::vector<double>(a));
        auto grads = Tensor<double>::full({1, 2, 2}, 0.7);
        auto cam = cam_from_activations(acts, grads);
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(cam.data()[i] ==
                  doctest::Approx(std::max(0.0, a[i]) / 4.0).epsilon(1e-12));
        double mx = *std::max_element(cam.data().begin(), cam.data().end());
        CHECK(mx == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("negative channel weight suppresses its activation") {
        // Channel 0 has positive mean grad, channel 1 negative; the combined
        // map is ReLU(1*A0 - 1*A1).
        std::vector<double> a0 = {2.0, 0.0}, a1 = {1.0, 3.0};
        auto acts = Tensor<double>({2, 1, 2}, {2.0, 0.0, 1.0, 3.0});
        auto grads = Tensor<double>({2, 1, 2}, {1.0, 1.0, -1.0, -1.0});
        auto cam = cam_from_activations(acts, grads);
        CHECK(cam.data()[0] == doctest::Approx(1.0).epsilon(1e-12));  // 2-1=1 -> max
        CHECK(cam.data()[1] == 0.0);                                  // 0-3 clipped
    }
    SUBCASE("shape mismatches are rejected") {
        CHECK_THROWS_AS(
            cam_from_activations(Tensor<double>::zeros({1, 2, 2}), Tensor<double>::zeros({1, 2, 3})),
            DimensionError);
    }
}

TEST_CASE("gradcam on a real model") {
    BackboneConfig cnn;
    cnn.kind = BackboneKind::mini_cnn;
    cnn.width = 16;
    cnn.feature_dim = 12;
    cnn.depth = 2;
    cnn.image_side = 32;
    BackboneConfig vit;
    vit.kind = BackboneKind::mini_vit;
    vit.width = 24;
    vit.feature_dim = 24;
    vit.depth = 1;
    vit.heads = 2;
    vit.patch_size = 16;
    vit.image_side = 32;

    Rng rng(4);
    CutoutPair<float> pair;
    {
        std::vector<float> v1((size_t)(3 * 32 * 32)), v2((size_t)(3 * 32 * 32));
        for (auto& x : v1) x = (float)rng.uniform(0.0, 1.0);
        for (auto& x : v2) x = (float)rng.uniform(0.0, 1.0);
        pair.x1 = Tensor<float>({3, 32, 32}, std::move(v1));
        pair.x2 = Tensor<float>({3, 32, 32}, std::move(v2));
        pair.label = 0;
    }

    SUBCASE("cnn roi branch produces a normalized map and clean grads") {
        auto m = build_rvernet<float>(cnn, vit, 3, 8, 11);
        auto hm = gradcam(m, pair, 0, BranchSel::roi);
        CHECK(hm.layer == "roi/block1");
        CHECK(hm.class_idx == 0);
        float mx = 0;
        for (float v : hm.grid.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
            mx = std::max(mx, v);
        }
        CHECK(mx == 1.0f);  // random init: some positive response, then max-normalized
        for (auto& [name, t] : m.named_parameters()) CHECK_FALSE(t.has_grad());
    }
    SUBCASE("non-cnn branch is an unsupported architecture") {
        auto m = build_rvernet<float>(vit, cnn, 3, 8, 12);
        CHECK_THROWS_AS(gradcam(m, pair, 0, BranchSel::roi), ConfigError);
        auto hm = gradcam(m, pair, 1, BranchSel::xroi);  // cnn sits on xroi here
        CHECK(hm.layer == "xroi/block1");
    }
    SUBCASE("class index is validated") {
        auto m = build_rvernet<float>(cnn, vit, 3, 8, 13);
        CHECK_THROWS_AS(gradcam(m, pair, 3, BranchSel::roi), ConfigError);
    }
    SUBCASE("heatmap png is written upsampled") {
        namespace fs = std::filesystem;
        auto m = build_rvernet<float>(cnn, vit, 3, 8, 14);
        auto hm = gradcam(m, pair, 2, BranchSel::roi);
        auto dir = fs::temp_directory_path() / "rvernet_gradcam";
        fs::create_directories(dir);
        auto path = (dir / "map.png").string();
        save_heatmap_png(hm, 32, path);
        auto img = read_png(path, 1);
        CHECK(img.width == 32);
        CHECK(img.height == 32);
        int h = (int)hm.grid.dim(0);
        // Nearest-neighbor: the top-left upsampled block repeats grid[0][0].
        uint8_t expect = (uint8_t)std::lround((double)hm.grid.data()[0] * 255.0);
        CHECK(img.at(0, 0, 0) == expect);
        CHECK(img.at(32 / h - 1, 32 / h - 1, 0) == expect);
        fs::remove_all(dir);
    }
}
