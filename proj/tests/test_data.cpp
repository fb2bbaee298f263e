// Data-layer tests: cut-out complementarity (bitwise), flip augmentation,
// synthetic generator invariants, PNG round trips, and class filtering.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "rvernet/data.hpp"
#include "rvernet/png_io.hpp"

using namespace rvernet;
namespace fs = std::filesystem;

namespace {

template <typename T>
LabeledImage<T> random_sample(Rng& rng, int S, double mask_density = 0.4) {
    LabeledImage<T> li;
    std::vector<T> img((size_t)(3 * S * S)), msk((size_t)(S * S));
    for (auto& v : img) v = (T)rng.uniform(0.0, 1.0);
    for (auto& v : msk) v = rng.bernoulli(mask_density) ? (T)1 : (T)0;
    li.image = Tensor<T>({3, S, S}, std::move(img));
    li.mask = Tensor<T>({S, S}, std::move(msk));
    li.label = (int)rng.uniform_int(4);
    li.id = "r";
    li.split = "train";
    return li;
}

SyntheticSpec tiny_spec(uint64_t seed = 7) {
    SyntheticSpec s;
    s.image_side = 32;
    s.num_classes = 6;
    s.train_per_class = 6;
    s.test_per_class = 2;
    s.seed = seed;
    return s;
}

bool throws_mentioning(const std::function<void()>& f, const std::string& needle) {
    try {
        f();
    } catch (const std::exception& e) {
        return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
}

}  // namespace

TEST_CASE("apply_mask produces exact complements") {
    Rng rng(1);
    SUBCASE("full mask keeps everything in x1") {
        auto li = random_sample<float>(rng, 8);
        std::fill(li.mask.mutable_data().begin(), li.mask.mutable_data().end(), 1.0f);
        auto p = apply_mask(li);
        CHECK(p.x1.data() == li.image.data());
        for (float v : p.x2.data()) CHECK(v == 0.0f);
    }
    SUBCASE("empty mask keeps everything in x2") {
        auto li = random_sample<float>(rng, 8);
        std::fill(li.mask.mutable_data().begin(), li.mask.mutable_data().end(), 0.0f);
        auto p = apply_mask(li);
        CHECK(p.x2.data() == li.image.data());
        for (float v : p.x1.data()) CHECK(v == 0.0f);
    }
    SUBCASE("random masks reconstruct bitwise with disjoint supports") {
        for (int rep = 0; rep < 50; ++rep) {
            auto li = random_sample<double>(rng, 16, 0.1 + 0.8 * rng.uniform());
            auto p = apply_mask(li);
            CHECK(p.label == li.label);
            for (size_t i = 0; i < li.image.data().size(); ++i) {
                CHECK(p.x1.data()[i] + p.x2.data()[i] == li.image.data()[i]);
                CHECK(p.x1.data()[i] * p.x2.data()[i] == 0.0);
            }
        }
    }
    SUBCASE("non-binary mask is rejected with the offender count") {
        auto li = random_sample<float>(rng, 8);
        li.mask.mutable_data()[3] = 0.5f;
        li.mask.mutable_data()[9] = 2.0f;
        CHECK(throws_mentioning([&] { apply_mask(li); }, "2 non-binary"));
    }
    SUBCASE("shape mismatches are dimension errors") {
        auto li = random_sample<float>(rng, 8);
        li.mask = Tensor<float>::zeros({4, 8});
        CHECK_THROWS_AS(apply_mask(li), DimensionError);
    }
}

TEST_CASE("horizontal_flip respects probability and preserves complementarity") {
    Rng rng(2);
    auto li = random_sample<double>(rng, 12);
    auto pair = apply_mask(li);

    SUBCASE("p=0 is the identity") {
        Rng r(3);
        auto f = horizontal_flip(pair, 0.0, r);
        CHECK(f.x1.data() == pair.x1.data());
        CHECK(f.x2.data() == pair.x2.data());
    }
    SUBCASE("p=1 applied twice is the identity") {
        Rng r(3);
        auto once = horizontal_flip(pair, 1.0, r);
        auto twice = horizontal_flip(once, 1.0, r);
        CHECK(twice.x1.data() == pair.x1.data());
        CHECK(twice.x2.data() == pair.x2.data());
        CHECK(once.x1.data() != pair.x1.data());
    }
    SUBCASE("flipped pair reconstructs the flipped image bitwise") {
        Rng r(3);
        auto f = horizontal_flip(pair, 1.0, r);
        int S = 12;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    double orig = li.image.data()[(size_t)((c * S + y) * S + (S - 1 - x))];
                    size_t i = (size_t)((c * S + y) * S + x);
                    CHECK(f.x1.data()[i] + f.x2.data()[i] == orig);
                    CHECK(f.x1.data()[i] * f.x2.data()[i] == 0.0);
                }
    }
    SUBCASE("out-of-range p is rejected") {
        Rng r(3);
        CHECK_THROWS_AS(horizontal_flip(pair, 1.5, r), ConfigError);
    }
}

TEST_CASE("bulk complementarity holds for random pairs including flips") {
    Rng rng(4);
    Rng flip_rng(5);
    int S = 16;
    for (int rep = 0; rep < 200; ++rep) {
        auto li = random_sample<float>(rng, S, 0.05 + 0.9 * rng.uniform());
        auto p = horizontal_flip(apply_mask(li), 1.0, flip_rng);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    size_t i = (size_t)((c * S + y) * S + x);
                    size_t mir = (size_t)((c * S + y) * S + (S - 1 - x));
                    CHECK(p.x1.data()[i] + p.x2.data()[i] == li.image.data()[mir]);
                    CHECK(p.x1.data()[i] * p.x2.data()[i] == 0.0f);
                }
    }
}

TEST_CASE("generate_synthetic is a pure function of its spec") {
    auto a = generate_synthetic<float>(tiny_spec());
    auto b = generate_synthetic<float>(tiny_spec());
    REQUIRE(a.samples.size() == b.samples.size());
    REQUIRE(a.samples.size() == 6u * 8u);
    CHECK(a.class_names == b.class_names);
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].image.data() == b.samples[i].image.data());
        CHECK(a.samples[i].mask.data() == b.samples[i].mask.data());
        CHECK(a.samples[i].label == b.samples[i].label);
        CHECK(a.samples[i].id == b.samples[i].id);
        CHECK(a.samples[i].split == b.samples[i].split);
    }
    auto c = generate_synthetic<float>(tiny_spec(8));
    bool any_diff = false;
    for (size_t i = 0; i < a.samples.size() && !any_diff; ++i)
        any_diff = a.samples[i].image.data() != c.samples[i].image.data();
    CHECK(any_diff);
}

TEST_CASE("synthetic samples are well-formed") {
    auto d = generate_synthetic<double>(tiny_spec());
    CHECK(d.num_classes() == 6);
    CHECK(d.split("train").size() == 36u);
    CHECK(d.split("test").size() == 12u);
    for (const auto& s : d.samples) {
        for (double v : s.image.data()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            // Quantized to the 8-bit grid so PNG round trips are bitwise.
            CHECK(std::abs(v * 255.0 - std::lround(v * 255.0)) < 1e-9);
        }
        int64_t roi_pixels = 0;
        for (double v : s.mask.data()) {
            CHECK((v == 0.0 || v == 1.0));
            roi_pixels += v == 1.0;
        }
        CHECK(roi_pixels > 0);
        auto bb = mask_bbox(s.mask);
        CHECK(bb[0] >= 0);
        CHECK(bb[2] < 32);
    }
}

TEST_CASE("the ambiguous pair shares identical ROI pixels sample by sample") {
    auto spec = tiny_spec(11);
    auto d = generate_synthetic<float>(spec);
    int per_class = spec.train_per_class + spec.test_per_class;
    int base_a = spec.ambiguous_a * per_class, base_b = spec.ambiguous_b * per_class;
    bool context_differs = false;
    for (int i = 0; i < per_class; ++i) {
        const auto& sa = d.samples[(size_t)(base_a + i)];
        const auto& sb = d.samples[(size_t)(base_b + i)];
        REQUIRE(sa.mask.data() == sb.mask.data());
        auto pa = apply_mask(sa), pb = apply_mask(sb);
        CHECK(pa.x1.data() == pb.x1.data());
        if (pa.x2.data() != pb.x2.data()) context_differs = true;
    }
    CHECK(context_differs);
    // Non-ambiguous classes have distinctive ROI appearances.
    CHECK(d.class_names[0] == "red_disk_ctx_a");
    CHECK(d.class_names[1] == "red_disk_ctx_b");
    std::set<std::string> rest(d.class_names.begin() + 2, d.class_names.end());
    CHECK(rest.size() == 4u);
}

TEST_CASE("generator validates its spec") {
    auto bad = tiny_spec();
    bad.train_per_class = 0;
    CHECK_THROWS_AS(generate_synthetic<float>(bad), ConfigError);
    bad = tiny_spec();
    bad.ambiguous_b = 6;
    CHECK_THROWS_AS(generate_synthetic<float>(bad), ConfigError);
    bad = tiny_spec();
    bad.ambiguous_b = bad.ambiguous_a;
    CHECK_THROWS_AS(generate_synthetic<float>(bad), ConfigError);
    bad = tiny_spec();
    bad.num_classes = 1;
    CHECK_THROWS_AS(generate_synthetic<float>(bad), ConfigError);
}

TEST_CASE("save then load reproduces every tensor bitwise") {
    auto dir = fs::temp_directory_path() / "rvernet_data_roundtrip";
    fs::remove_all(dir);
    auto spec = tiny_spec(21);
    spec.num_classes = 4;
    auto d = generate_synthetic<float>(spec);
    save_dataset(d, dir.string());
    auto r = load_dataset<float>((dir / "manifest.json").string());
    REQUIRE(r.samples.size() == d.samples.size());
    CHECK(r.class_names == d.class_names);
    for (size_t i = 0; i < d.samples.size(); ++i) {
        CHECK(r.samples[i].image.data() == d.samples[i].image.data());
        CHECK(r.samples[i].mask.data() == d.samples[i].mask.data());
        CHECK(r.samples[i].label == d.samples[i].label);
        CHECK(r.samples[i].id == d.samples[i].id);
        CHECK(r.samples[i].split == d.samples[i].split);
    }
    fs::remove_all(dir);
}

TEST_CASE("loader error paths") {
    auto dir = fs::temp_directory_path() / "rvernet_data_errors";
    fs::remove_all(dir);
    fs::create_directories(dir);

    SUBCASE("empty manifest yields an empty dataset") {
        std::ofstream(dir / "manifest.json") << R"({"classes": [], "samples": []})";
        auto d = load_dataset<float>((dir / "manifest.json").string());
        CHECK(d.samples.empty());
        CHECK(d.class_names.empty());
    }
    SUBCASE("a missing PNG is reported by path") {
        std::ofstream(dir / "manifest.json") << R"({"classes": ["a"], "samples": [
            {"id":"s0","image":"images/gone.png","mask":"masks/gone.png","label":0,"split":"train"}]})";
        CHECK(throws_mentioning(
            [&] { load_dataset<float>((dir / "manifest.json").string()); }, "gone.png"));
    }
    SUBCASE("a gray mask that is not strictly 0/255 is rejected") {
        fs::create_directories(dir / "images");
        fs::create_directories(dir / "masks");
        ImageU8 img;
        img.width = img.height = 4;
        img.channels = 3;
        img.pixels.assign(48, 10);
        write_png((dir / "images/s0.png").string(), img);
        ImageU8 msk;
        msk.width = msk.height = 4;
        msk.channels = 1;
        msk.pixels.assign(16, 0);
        msk.pixels[5] = 128;
        write_png((dir / "masks/s0.png").string(), msk);
        std::ofstream(dir / "manifest.json") << R"({"classes": ["a"], "samples": [
            {"id":"s0","image":"images/s0.png","mask":"masks/s0.png","label":0,"split":"train"}]})";
        CHECK(throws_mentioning(
            [&] { load_dataset<float>((dir / "manifest.json").string()); }, "neither 0 nor 255"));
    }
    SUBCASE("missing sample keys are rejected") {
        std::ofstream(dir / "manifest.json") << R"({"classes": ["a"], "samples": [
            {"id":"s0","image":"images/s0.png","label":0,"split":"train"}]})";
        CHECK(throws_mentioning(
            [&] { load_dataset<float>((dir / "manifest.json").string()); }, "mask"));
    }
    fs::remove_all(dir);
}

TEST_CASE("filter_classes re-indexes with a recorded bijection") {
    auto spec = tiny_spec(31);
    auto d = generate_synthetic<float>(spec);

    SUBCASE("empty exclusion is the identity") {
        auto f = filter_classes(d, {});
        CHECK(f.data.samples.size() == d.samples.size());
        CHECK(f.data.class_names == d.class_names);
        for (int c = 0; c < 6; ++c) {
            CHECK(f.old_to_new[(size_t)c] == c);
            CHECK(f.new_to_old[(size_t)c] == c);
        }
    }
    SUBCASE("excluding one class keeps other counts and relabels densely") {
        auto f = filter_classes(d, {2});
        CHECK(f.data.num_classes() == 5);
        CHECK(f.data.samples.size() == d.samples.size() - 8u);
        std::vector<int> counts(5, 0);
        for (const auto& s : f.data.samples) counts[(size_t)s.label]++;
        for (int c = 0; c < 5; ++c) CHECK(counts[(size_t)c] == 8);
        // Bijection: applying the map then inverting recovers original labels.
        for (int c = 0; c < 6; ++c) {
            if (c == 2) {
                CHECK(f.old_to_new[(size_t)c] == -1);
            } else {
                CHECK(f.new_to_old[(size_t)f.old_to_new[(size_t)c]] == c);
            }
        }
        CHECK(f.data.class_names[2] == d.class_names[3]);
    }
    SUBCASE("excluding everything is an error") {
        CHECK_THROWS_AS(filter_classes(d, {0, 1, 2, 3, 4, 5}), ConfigError);
    }
}

TEST_CASE("mask_bbox finds the tight box") {
    auto m = Tensor<float>::zeros({4, 5});
    m.mutable_data()[(size_t)(1 * 5 + 2)] = 1.0f;
    m.mutable_data()[(size_t)(2 * 5 + 4)] = 1.0f;
    auto bb = mask_bbox(m);
    CHECK(bb == std::array<int64_t, 4>{1, 2, 2, 4});
    CHECK_THROWS_AS(mask_bbox(Tensor<float>::zeros({3, 3})), DimensionError);
}
