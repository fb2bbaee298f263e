// Dataset types, complementary cut-out preprocessing, PNG-backed dataset IO,
// and the synthetic context-ambiguity generator.
//
// Pixel values are quantized to k/255 at generation time, so a save/load
// round trip through 8-bit PNG reproduces every tensor bitwise.
#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rvernet/rng.hpp"
#include "rvernet/tensor.hpp"

namespace rvernet {

// One sample: image [3,S,S] in [0,1], mask [S,S] strictly {0,1} (1 = ROI).
template <typename T>
struct LabeledImage {
    Tensor<T> image;
    Tensor<T> mask;
    int label = 0;
    std::string id;
    std::string split;  // "train" or "test"
};

// The (x1, x2) complementary pair: x1 keeps ROI pixels, x2 keeps the rest.
// x1 + x2 reconstructs the source image bitwise and supports are disjoint.
template <typename T>
struct CutoutPair {
    Tensor<T> x1;
    Tensor<T> x2;
    int label = 0;
};

template <typename T>
struct Dataset {
    std::vector<LabeledImage<T>> samples;
    std::vector<std::string> class_names;

    int num_classes() const { return (int)class_names.size(); }
    std::vector<const LabeledImage<T>*> split(const std::string& which) const {
        std::vector<const LabeledImage<T>*> out;
        for (const auto& s : samples)
            if (s.split == which) out.push_back(&s);
        return out;
    }
};

// Synthetic dataset: `num_classes` classes of one noisy ROI object plus 1-3
// context objects on a black background. The ambiguous pair shares one ROI
// generator and RNG stream (sample i of both classes gets identical ROI
// pixels and mask), so ROI appearance carries zero label information for
// that pair; every other class has a distinctive ROI shape and color.
// Context objects come from per-class vocabularies: each ambiguous class has
// its own, all remaining classes share one.
struct SyntheticSpec {
    int image_side = 64;
    int num_classes = 6;
    int ambiguous_a = 0;
    int ambiguous_b = 1;
    int train_per_class = 300;
    int test_per_class = 100;
    double noise_std = 0.05;
    uint64_t seed = 0;
};

template <typename T>
CutoutPair<T> apply_mask(const LabeledImage<T>& li);

// With probability p mirrors both halves of the pair about the vertical
// axis; complementarity is preserved because the same flip hits x1 and x2.
template <typename T>
CutoutPair<T> horizontal_flip(const CutoutPair<T>& pair, double p, Rng& rng);

void validate_spec(const SyntheticSpec& spec);

template <typename T>
Dataset<T> generate_synthetic(const SyntheticSpec& spec);

// Writes images/*.png (8-bit RGB), masks/*.png (8-bit gray, 0/255), and
// manifest.json (class-name table plus {id, image, mask, label, split} rows,
// paths relative to the manifest) under `dir`.
template <typename T>
void save_dataset(const Dataset<T>& data, const std::string& dir);

template <typename T>
Dataset<T> load_dataset(const std::string& manifest_path);

// Class filtering with dense re-indexing. new_to_old[k] is the original
// label of new class k; old_to_new is -1 for excluded classes.
template <typename T>
struct FilteredDataset {
    Dataset<T> data;
    std::vector<int> old_to_new;
    std::vector<int> new_to_old;
};

template <typename T>
FilteredDataset<T> filter_classes(const Dataset<T>& d, const std::set<int>& excluded);

// Tight bounding box of mask==1 pixels as (y0, x0, y1, x1), inclusive.
// Errors on an all-zero mask.
template <typename T>
std::array<int64_t, 4> mask_bbox(const Tensor<T>& mask);

// Stacked model inputs for pairs[from, to): x1/x2 are [N,3,S,S] when
// requested and undefined tensors otherwise.
template <typename T>
struct PairBatch {
    Tensor<T> x1;
    Tensor<T> x2;
    std::vector<int> labels;
};

template <typename T>
PairBatch<T> stack_pairs(const std::vector<CutoutPair<T>>& pairs, size_t from, size_t to,
                         bool need_x1 = true, bool need_x2 = true);

}  // namespace rvernet
