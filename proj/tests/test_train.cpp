// Training-loop tests: schedule and optimizer closed forms, distillation
// loss algebra, determinism, a separable fitting task, teacher freezing,
// and history serialization.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "rvernet/data.hpp"
#include "rvernet/metrics.hpp"
#include "rvernet/model.hpp"
#include "rvernet/train.hpp"

using namespace rvernet;

namespace {

BackboneConfig tiny_cnn(int side) {
    BackboneConfig c;
    c.kind = BackboneKind::mini_cnn;
    c.width = 12;
    c.feature_dim = 8;
    c.depth = 1;
    c.image_side = side;
    return c;
}

BackboneConfig tiny_deit(int side) {
    BackboneConfig c;
    c.kind = BackboneKind::mini_deit;
    c.width = 12;
    c.feature_dim = 12;
    c.depth = 1;
    c.heads = 2;
    c.patch_size = side / 2;
    c.image_side = side;
    return c;
}

Dataset<double> tiny_data(int num_classes, int per_class_train, int per_class_test,
                          uint64_t seed) {
    SyntheticSpec spec;
    spec.image_side = 32;
    spec.num_classes = num_classes;
    spec.train_per_class = per_class_train;
    spec.test_per_class = per_class_test;
    spec.noise_std = 0.01;
    spec.seed = seed;
    return generate_synthetic<double>(spec);
}

TrainConfig quick_cfg(int epochs, uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.warmup_epochs = epochs > 1 ? 1 : 0;
    cfg.batch_size = 8;
    cfg.lr0 = 3e-3;
    cfg.seed = seed;
    return cfg;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const RveRNetModel<T>& m) {
    std::vector<std::vector<T>> out;
    for (const auto& [name, t] : m.named_parameters()) out.push_back(t.data());
    return out;
}

template <typename T>
bool bitwise_equal(const std::vector<std::vector<T>>& a, const std::vector<std::vector<T>>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// Row-wise smoothed cross-entropy recomputed with scalar math.
double ce_by_hand(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets,
                  double eps) {
    int K = (int)logits[0].size();
    double total = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        double mx = logits[i][0];
        for (double v : logits[i]) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : logits[i]) z += std::exp(v - mx);
        double row = 0.0;
        for (int k = 0; k < K; ++k) {
            double logp = logits[i][k] - mx - std::log(z);
            double q = k == targets[i] ? 1.0 - eps : eps / (K - 1);
            row -= q * logp;
        }
        total += row;
    }
    return total / (double)logits.size();
}

}  // namespace

TEST_CASE("lr schedule follows linear warmup then cosine decay") {
    const double lr0 = 4e-3;
    const int64_t total = 30, warmup = 10;

    for (int64_t s = 0; s < warmup; ++s)
        CHECK(lr_schedule(s, total, warmup, lr0) == doctest::Approx(lr0 * (double)(s + 1) / 10.0).epsilon(1e-15));
    CHECK(lr_schedule(warmup - 1, total, warmup, lr0) == lr0);
    CHECK(lr_schedule(warmup, total, warmup, lr0) == lr0);

    for (int64_t s = warmup; s < total; ++s) {
        double expect =
            lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * (double)(s - warmup) / 20.0));
        CHECK(lr_schedule(s, total, warmup, lr0) == doctest::Approx(expect).epsilon(1e-15));
    }
    CHECK(lr_schedule(20, total, warmup, lr0) == doctest::Approx(lr0 / 2.0).epsilon(1e-12));

    for (int64_t s = warmup; s + 1 < total; ++s)
        CHECK(lr_schedule(s + 1, total, warmup, lr0) < lr_schedule(s, total, warmup, lr0));
    CHECK(lr_schedule(total - 1, total, warmup, lr0) > 0.0);
    CHECK(lr_schedule(total - 1, total, warmup, lr0) < 0.01 * lr0 + 1e-4);

    SUBCASE("no warmup starts at the cosine peak") {
        CHECK(lr_schedule(0, 10, 0, lr0) == lr0);
    }
    SUBCASE("invalid arguments are rejected") {
        CHECK_THROWS_AS(lr_schedule(0, 0, 0, lr0), ConfigError);
        CHECK_THROWS_AS(lr_schedule(0, 10, 10, lr0), ConfigError);
        CHECK_THROWS_AS(lr_schedule(0, 10, 11, lr0), ConfigError);
        CHECK_THROWS_AS(lr_schedule(-1, 10, 2, lr0), ConfigError);
        CHECK_THROWS_AS(lr_schedule(10, 10, 2, lr0), ConfigError);
    }
}

TEST_CASE("adam matches a three-step hand trace") {
    // Gradients are (1, -2) every step via loss = sum(p * c).
    Tensor<double> p({2}, {0.25, -0.5}, true);
    Tensor<double> c({2}, {1.0, -2.0});
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"p", p}};
    Adam<double> opt;
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

    double theta[2] = {0.25, -0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    double g[2] = {1.0, -2.0};
    for (int t = 1; t <= 3; ++t) {
        p.zero_grad();
        backward(reduce_sum_all(mul(p, c)));
        opt.step(params, lr);
        for (int j = 0; j < 2; ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            double mhat = m[j] / (1.0 - std::pow(b1, t));
            double vhat = v[j] / (1.0 - std::pow(b2, t));
            theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        CHECK(opt.t() == t);
        CHECK(p.data()[0] == doctest::Approx(theta[0]).epsilon(1e-12));
        CHECK(p.data()[1] == doctest::Approx(theta[1]).epsilon(1e-12));
    }
}

TEST_CASE("adam treats missing gradients as zero and checks shapes") {
    Tensor<double> p({3}, {1.0, 2.0, 3.0}, true);
    std::vector<std::pair<std::string, Tensor<double>>> params = {{"p", p}};
    Adam<double> opt;

    SUBCASE("no gradient leaves the parameter unchanged") {
        opt.step(params, 0.5);
        opt.step(params, 0.5);
        CHECK(p.data() == std::vector<double>{1.0, 2.0, 3.0});
        CHECK(opt.t() == 2);
    }
    SUBCASE("parameter count changes are rejected") {
        opt.step(params, 0.1);
        params.emplace_back("q", Tensor<double>::zeros({2}, true));
        CHECK_THROWS_AS(opt.step(params, 0.1), DimensionError);
    }
    SUBCASE("parameter size changes are rejected") {
        opt.step(params, 0.1);
        params[0].second = Tensor<double>::zeros({4}, true);
        CHECK_THROWS_AS(opt.step(params, 0.1), DimensionError);
    }
    SUBCASE("two optimizers apply identical updates") {
        Tensor<double> q({3}, {1.0, 2.0, 3.0}, true);
        std::vector<std::pair<std::string, Tensor<double>>> params_q = {{"q", q}};
        Adam<double> opt_q;
        for (int t = 0; t < 4; ++t) {
            p.zero_grad();
            q.zero_grad();
            backward(reduce_sum_all(mul(p, p)));
            backward(reduce_sum_all(mul(q, q)));
            opt.step(params, 0.05);
            opt_q.step(params_q, 0.05);
        }
        CHECK(p.data() == q.data());
    }
}

TEST_CASE("hard distillation loss matches closed forms") {
    std::vector<std::vector<double>> cls = {{1.0, 0.0, -1.0}, {0.5, 0.2, -0.3}};
    std::vector<std::vector<double>> dist = {{0.2, 0.1, 0.0}, {1.0, -1.0, 0.0}};
    std::vector<std::vector<double>> teach = {{0.0, 2.0, 1.0}, {3.0, 0.0, 1.0}};
    auto flat = [](const std::vector<std::vector<double>>& rows) {
        std::vector<double> v;
        for (const auto& r : rows) v.insert(v.end(), r.begin(), r.end());
        return Tensor<double>({2, 3}, std::move(v), true);
    };
    Tensor<double> S = flat(cls), D = flat(dist), Tt = flat(teach);
    std::vector<int> targets = {0, 2};

    SUBCASE("lambda zero is exactly the smoothed class loss") {
        auto a = hard_distillation_loss(S, D, Tt, targets, 0.1, 0.0);
        auto b = cross_entropy_label_smoothing(S, targets, 0.1);
        CHECK(a.item() == b.item());
    }
    SUBCASE("lambda one is exactly the distillation term") {
        auto a = hard_distillation_loss(S, D, Tt, targets, 0.1, 1.0);
        std::vector<int> hard = {1, 0};
        auto b = cross_entropy_label_smoothing(D, hard, 0.0);
        CHECK(a.item() == b.item());
    }
    SUBCASE("lambda one half matches a scalar recomputation") {
        auto loss = hard_distillation_loss(S, D, Tt, targets, 0.1, 0.5);
        double expect = 0.5 * ce_by_hand(cls, targets, 0.1) + 0.5 * ce_by_hand(dist, {1, 0}, 0.0);
        CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
    }
    SUBCASE("no gradient reaches the teacher") {
        auto loss = hard_distillation_loss(S, D, Tt, targets, 0.1, 0.5);
        backward(loss);
        CHECK(S.has_grad());
        CHECK(D.has_grad());
        CHECK_FALSE(Tt.has_grad());
    }
    SUBCASE("invalid arguments are rejected") {
        CHECK_THROWS_AS(hard_distillation_loss(S, D, Tt, targets, 0.1, -0.1), ConfigError);
        CHECK_THROWS_AS(hard_distillation_loss(S, D, Tt, targets, 0.1, 1.5), ConfigError);
        auto bad = Tensor<double>::zeros({2, 4});
        CHECK_THROWS_AS(hard_distillation_loss(S, bad, Tt, targets, 0.1, 0.5), DimensionError);
        CHECK_THROWS_AS(hard_distillation_loss(S, D, bad, targets, 0.1, 0.5), DimensionError);
    }
}

TEST_CASE("train config validation rejects bad fields") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto expect_bad = [](TrainConfig c) { CHECK_THROWS_AS(c.validate(), ConfigError); };
    {
        TrainConfig c;
        c.lr0 = 0.0;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.batch_size = 0;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.epochs = -1;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.warmup_epochs = 31;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.label_smoothing = 1.0;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.flip_p = 1.5;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.distill = DistillSettings{};
        c.distill->lambda = 2.0;
        expect_bad(c);
    }
    {
        TrainConfig c;
        c.subset_classes = {-1};
        expect_bad(c);
    }
}

TEST_CASE("predict agrees with whole-set argmax across batch sizes") {
    auto data = tiny_data(3, 4, 3, 11);
    auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 3, 16, 7);
    std::vector<CutoutPair<double>> pairs;
    for (const auto* s : data.split("test")) pairs.push_back(apply_mask(*s));

    auto whole = stack_pairs(pairs, 0, pairs.size());
    NoGradGuard ng;
    auto expect = argmax_rows(model.logits(whole.x1, whole.x2));
    CHECK(predict(model, pairs, 1) == expect);
    CHECK(predict(model, pairs, 4) == expect);
    CHECK(predict(model, pairs, 1000) == expect);
    CHECK_THROWS_AS(predict(model, pairs, 0), ConfigError);
}

TEST_CASE("train is deterministic and epochs zero is the identity") {
    auto data = tiny_data(2, 8, 4, 3);

    SUBCASE("zero epochs leaves the model untouched") {
        auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto before = snapshot(model);
        auto hist = train(model, data, quick_cfg(0, 1));
        CHECK(hist.epochs.empty());
        CHECK(bitwise_equal(before, snapshot(model)));
    }
    SUBCASE("same seed twice gives bitwise-equal weights and history") {
        auto m1 = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto m2 = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto h1 = train(m1, data, quick_cfg(2, 5));
        auto h2 = train(m2, data, quick_cfg(2, 5));
        CHECK(bitwise_equal(snapshot(m1), snapshot(m2)));
        REQUIRE(h1.epochs.size() == 2);
        for (size_t e = 0; e < 2; ++e) {
            CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);
            CHECK(h1.epochs[e].test_top1 == h2.epochs[e].test_top1);
            CHECK(h1.epochs[e].lr == h2.epochs[e].lr);
        }
        CHECK(h1.epochs[0].epoch == 1);
        CHECK(h1.epochs[0].lr < h1.epochs[1].lr);  // warmup ramps across epoch one
    }
    SUBCASE("different train seeds diverge") {
        auto m1 = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto m2 = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        train(m1, data, quick_cfg(2, 5));
        train(m2, data, quick_cfg(2, 6));
        CHECK_FALSE(bitwise_equal(snapshot(m1), snapshot(m2)));
    }
    SUBCASE("warmup spanning every epoch is rejected") {
        auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto cfg = quick_cfg(2, 5);
        cfg.warmup_epochs = 2;
        CHECK_THROWS_AS(train(model, data, cfg), ConfigError);
    }
    SUBCASE("subset tracking fills subset f1") {
        auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto cfg = quick_cfg(1, 5);
        cfg.subset_classes = {0, 1};
        auto hist = train(model, data, cfg);
        CHECK(hist.has_subset);
        CHECK(hist.epochs[0].subset_f1 >= 0.0);
        CHECK(hist.epochs[0].subset_f1 <= 1.0);
    }
    SUBCASE("out-of-range subset class is rejected") {
        auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
        auto cfg = quick_cfg(1, 5);
        cfg.subset_classes = {2};
        CHECK_THROWS_AS(train(model, data, cfg), ConfigError);
    }
}

TEST_CASE("training fits a separable two-class context task") {
    // Classes 0 and 1 share identical ROIs, so only context separates them;
    // a dual-branch model must fit it through the context branch.
    auto data = tiny_data(2, 32, 6, 21);
    BackboneConfig c = tiny_cnn(32);
    c.width = 16;
    c.feature_dim = 16;
    c.depth = 2;
    auto model = build_rvernet<double>(c, c, 2, 16, 13);
    TrainConfig cfg = quick_cfg(20, 2);
    cfg.lr0 = 4e-3;
    auto hist = train(model, data, cfg);
    REQUIRE(hist.epochs.size() == 20);
    CHECK(hist.epochs.back().train_loss < hist.epochs.front().train_loss);
    CHECK(hist.epochs.back().test_top1 >= 90.0);
}

TEST_CASE("distillation keeps the teacher frozen and lambda zero matches plain training") {
    auto data = tiny_data(2, 8, 4, 17);
    auto teacher = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 12,
                                         31, ModelMode::roi_only);
    train(teacher, data, quick_cfg(2, 40));

    SUBCASE("lambda zero reproduces plain training bitwise") {
        auto plain = build_rvernet<double>(tiny_deit(32), tiny_deit(32), 2, 12,
                                           33, ModelMode::roi_only);
        auto distilled = build_rvernet<double>(tiny_deit(32), tiny_deit(32), 2, 12,
                                               33, ModelMode::roi_only);
        auto cfg = quick_cfg(2, 50);
        auto h_plain = train(plain, data, cfg);
        cfg.distill = DistillSettings{};
        cfg.distill->lambda = 0.0;
        auto h_dist = train(distilled, data, cfg, &teacher);
        CHECK(bitwise_equal(snapshot(plain), snapshot(distilled)));
        CHECK(h_plain.epochs.back().train_loss == h_dist.epochs.back().train_loss);
    }
    SUBCASE("teacher weights are bitwise unchanged by distillation") {
        auto before = snapshot(teacher);
        auto student = build_rvernet<double>(tiny_deit(32), tiny_deit(32), 2, 12,
                                             33, ModelMode::roi_only);
        auto cfg = quick_cfg(2, 50);
        cfg.distill = DistillSettings{};
        cfg.distill->lambda = 0.5;
        auto s_before = snapshot(student);
        auto hist = train(student, data, cfg, &teacher);
        CHECK(bitwise_equal(before, snapshot(teacher)));
        CHECK_FALSE(bitwise_equal(s_before, snapshot(student)));
        CHECK(hist.epochs.size() == 2);
    }
    SUBCASE("distillation without a teacher is rejected") {
        auto student = build_rvernet<double>(tiny_deit(32), tiny_deit(32), 2, 12,
                                             33, ModelMode::roi_only);
        auto cfg = quick_cfg(2, 50);
        cfg.distill = DistillSettings{};
        CHECK_THROWS_AS(train(student, data, cfg), ConfigError);
    }
}

TEST_CASE("non-finite loss aborts with a located diagnostic") {
    // The injection targets the final linear layer: upstream of a ReLU a NaN
    // would be silenced by the comparison, downstream it reaches the loss.
    auto data = tiny_data(2, 8, 4, 17);
    auto model = build_rvernet<double>(tiny_cnn(32), tiny_cnn(32), 2, 16, 9);
    for (auto& [name, t] : model.named_parameters())
        if (name == "head/linear2.w")
            t.mutable_data()[0] = std::numeric_limits<double>::infinity();
    try {
        train(model, data, quick_cfg(1, 5));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
        CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
    }
}

TEST_CASE("history serialization round trips") {
    TrainHistory h;
    h.has_subset = true;
    h.epochs.push_back({1, 0.75, 50.0, 0.5, 0.25, 1e-3});
    h.epochs.push_back({2, 0.5, 75.0, 0.75, 0.5, 2e-3});

    auto j = history_to_json(h);
    CHECK(j["has_subset"] == true);
    REQUIRE(j["epochs"].size() == 2);
    CHECK(j["epochs"][0]["epoch"] == 1);
    CHECK(j["epochs"][1]["train_loss"] == 0.5);
    CHECK(j["epochs"][1]["subset_f1"] == 0.5);

    auto csv = history_to_csv(h);
    CHECK(csv.find("epoch,train_loss,test_top1,test_macro_f1,subset_f1,lr\n") == 0);
    CHECK(csv.find("\n1,0.75,50,") != std::string::npos);

    TrainHistory no_subset;
    no_subset.epochs.push_back({1, 0.75, 50.0, 0.5, 0.0, 1e-3});
    CHECK(history_to_json(no_subset)["epochs"][0]["subset_f1"].is_null());
    CHECK(history_to_csv(no_subset).find(",,") != std::string::npos);
}

TEST_CASE("teacher then distill pipeline wires kinds, chance flag, and histories") {
    auto data = tiny_data(2, 8, 4, 29);
    auto cfg = quick_cfg(2, 60);

    SUBCASE("kind mismatches are rejected") {
        CHECK_THROWS_AS(train_teacher_then_distill(tiny_deit(32), tiny_deit(32), data, cfg, 2, 12),
                        ConfigError);
        CHECK_THROWS_AS(train_teacher_then_distill(tiny_cnn(32), tiny_cnn(32), data, cfg, 2, 12),
                        ConfigError);
    }
    SUBCASE("pipeline trains both models") {
        auto run = train_teacher_then_distill(tiny_cnn(32), tiny_deit(32), data, cfg, 2, 12);
        CHECK(run.teacher_history.epochs.size() == 2);
        CHECK(run.student_history.epochs.size() == 2);
        CHECK(run.tag == "mini_deit_distilled");
        CHECK(run.teacher_test_top1 >= 0.0);
        CHECK(run.teacher_test_top1 <= 100.0);
        CHECK(run.teacher_above_chance == (run.teacher_test_top1 > 50.0));
        CHECK(run.teacher.has_roi());
        CHECK_FALSE(run.teacher.has_xroi());
        CHECK(run.student.roi_backbone().config().kind == BackboneKind::mini_deit);
        // The distillation term reached the student's dist head.
        auto fresh = build_rvernet<double>(tiny_deit(32), tiny_deit(32), 2, 12,
                                           Rng(cfg.seed).split(32).next_u64(),
                                           ModelMode::roi_only);
        CHECK_FALSE(bitwise_equal(snapshot(fresh), snapshot(run.student)));
    }
}
