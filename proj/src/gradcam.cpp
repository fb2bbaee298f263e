#include "rvernet/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include "rvernet/png_io.hpp"

namespace rvernet {

template <typename T>
Tensor<T> cam_from_activations(const Tensor<T>& acts, const Tensor<T>& grads) {
    RV_CHECK_DIM(acts.shape().size() == 3, "cam_from_activations: acts must be [C,h,w], got ",
                 shape_str(acts.shape()));
    RV_CHECK_DIM(acts.shape() == grads.shape(), "cam_from_activations: acts ",
                 shape_str(acts.shape()), " vs grads ", shape_str(grads.shape()));
    int64_t C = acts.dim(0), h = acts.dim(1), w = acts.dim(2), plane = h * w;

    std::vector<double> alpha((size_t)C, 0.0);
    for (int64_t c = 0; c < C; ++c) {
        double s = 0;
        for (int64_t i = 0; i < plane; ++i) s += (double)grads.data()[(size_t)(c * plane + i)];
        alpha[(size_t)c] = s / (double)plane;
    }
    std::vector<double> heat((size_t)plane, 0.0);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < plane; ++i)
            heat[(size_t)i] += alpha[(size_t)c] * (double)acts.data()[(size_t)(c * plane + i)];
    double mx = 0;
    for (auto& v : heat) {
        v = std::max(0.0, v);
        mx = std::max(mx, v);
    }
    std::vector<T> out((size_t)plane);
    for (int64_t i = 0; i < plane; ++i)
        out[(size_t)i] = (T)(mx > 0 ? heat[(size_t)i] / mx : 0.0);
    return Tensor<T>({h, w}, std::move(out));
}

template <typename T>
Heatmap<T> gradcam(RveRNetModel<T>& model, const CutoutPair<T>& pair, int class_idx,
                   BranchSel branch) {
    bool roi = branch == BranchSel::roi;
    RV_CHECK_CFG(roi ? model.has_roi() : model.has_xroi(), "gradcam: model has no ",
                 roi ? "roi" : "xroi", " branch");
    const auto& cfg = roi ? model.roi_backbone().config() : model.xroi_backbone().config();
    RV_CHECK_CFG(cfg.kind == BackboneKind::mini_cnn, "gradcam: ", roi ? "roi" : "xroi",
                 " branch is ", to_string(cfg.kind), "; only mini_cnn supports GradCAM");
    RV_CHECK_CFG(class_idx >= 0 && class_idx < model.num_classes(), "gradcam: class ", class_idx,
                 " outside [0,", model.num_classes(), ")");

    auto as_batch = [](const Tensor<T>& t) {
        std::vector<int64_t> shape = {1};
        for (int64_t d : t.shape()) shape.push_back(d);
        return reshape(t, shape);
    };
    Tensor<T> x1 = model.has_roi() ? as_batch(pair.x1) : Tensor<T>();
    Tensor<T> x2 = model.has_xroi() ? as_batch(pair.x2) : Tensor<T>();

    auto out = model.forward(x1, x2);
    auto tap = roi ? out.roi.conv_tap : out.xroi.conv_tap;
    RV_CHECK_DIM(tap.defined(), "gradcam: branch produced no conv activation");

    auto score = reshape(slice(out.logits, 1, class_idx, 1), {});
    backward(score);
    RV_CHECK_DIM(tap.has_grad(), "gradcam: no gradient reached the conv activation");

    // Drop the batch axis of [1,C,h,w] activations and gradients.
    std::vector<int64_t> cshape(tap.shape().begin() + 1, tap.shape().end());
    Tensor<T> acts(cshape, std::vector<T>(tap.data()));
    Tensor<T> grads(cshape, std::vector<T>(tap.grad()));

    Heatmap<T> hm;
    hm.grid = cam_from_activations(acts, grads);
    hm.layer = std::string(roi ? "roi" : "xroi") + "/block" + std::to_string(cfg.depth - 1);
    hm.class_idx = class_idx;

    for (auto& [name, t] : model.named_parameters()) t.zero_grad();
    return hm;
}

template <typename T>
void save_heatmap_png(const Heatmap<T>& hm, int out_side, const std::string& path) {
    RV_CHECK_CFG(out_side >= 1, "save_heatmap_png: out_side must be positive");
    int64_t h = hm.grid.dim(0), w = hm.grid.dim(1);
    ImageU8 img;
    img.width = out_side;
    img.height = out_side;
    img.channels = 1;
    img.pixels.resize((size_t)(out_side * out_side));
    for (int y = 0; y < out_side; ++y)
        for (int x = 0; x < out_side; ++x) {
            int64_t sy = (int64_t)y * h / out_side, sx = (int64_t)x * w / out_side;
            double v = (double)hm.grid.data()[(size_t)(sy * w + sx)];
            v = std::min(1.0, std::max(0.0, v));
            img.pixels[(size_t)(y * out_side + x)] = (uint8_t)std::lround(v * 255.0);
        }
    write_png(path, img);
}

template Tensor<float> cam_from_activations(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> cam_from_activations(const Tensor<double>&, const Tensor<double>&);
template Heatmap<float> gradcam(RveRNetModel<float>&, const CutoutPair<float>&, int, BranchSel);
template Heatmap<double> gradcam(RveRNetModel<double>&, const CutoutPair<double>&, int, BranchSel);
template void save_heatmap_png(const Heatmap<float>&, int, const std::string&);
template void save_heatmap_png(const Heatmap<double>&, int, const std::string&);

}  // namespace rvernet
