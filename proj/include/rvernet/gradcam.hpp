// GradCAM for the convolutional branch: channel-importance weights from the
// spatial mean of the class-score gradient at the last conv activation,
// combined, rectified, and max-normalized.
#pragma once

#include <string>

#include "rvernet/data.hpp"
#include "rvernet/model.hpp"

namespace rvernet {

template <typename T>
struct Heatmap {
    Tensor<T> grid;     // [h,w], values in [0,1]
    std::string layer;  // activation the map was computed from
    int class_idx = 0;
};

enum class BranchSel { roi, xroi };

inline const char* to_string(BranchSel b) { return b == BranchSel::roi ? "roi" : "xroi"; }

inline BranchSel branch_sel_from_string(const std::string& s) {
    if (s == "roi") return BranchSel::roi;
    if (s == "xroi") return BranchSel::xroi;
    throw ConfigError(strcat_msg("unknown branch \"", s, "\" (expected roi or xroi)"));
}

// Pure math step: acts and grads are [C,h,w] for one sample; returns
// ReLU(sum_k mean(grads_k) * acts_k) scaled so the max is 1 (all-zero maps
// stay zero).
template <typename T>
Tensor<T> cam_from_activations(const Tensor<T>& acts, const Tensor<T>& grads);

// Runs one forward/backward for `pair` and extracts the branch's last-conv
// CAM. Only a mini_cnn branch supports this; other kinds are rejected.
// Parameter gradients touched by the backward pass are zeroed afterwards.
template <typename T>
Heatmap<T> gradcam(RveRNetModel<T>& model, const CutoutPair<T>& pair, int class_idx,
                   BranchSel branch = BranchSel::roi);

// Nearest-neighbor upsample to out_side x out_side, written as 8-bit gray.
template <typename T>
void save_heatmap_png(const Heatmap<T>& hm, int out_side, const std::string& path);

}  // namespace rvernet
