// The composite two-branch classifier: an ROI backbone f over the object
// cut-out x1, an extra-ROI backbone g over the complementary context x2,
// and an integration head
//     Softmax(Linear2(ReLU(Linear1(Concat(f(x1), g(x2)))))).
// Ablation modes drop one branch; the head keeps its two-linear shape with a
// narrower first layer, so comparisons differ only in the absent branch.
#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rvernet/backbones.hpp"
#include "rvernet/checkpoint.hpp"
#include "rvernet/common.hpp"
#include "rvernet/ops.hpp"
#include "rvernet/rng.hpp"

namespace rvernet {

enum class ModelMode { both, roi_only, xroi_only };

inline const char* to_string(ModelMode m) {
    switch (m) {
        case ModelMode::both: return "both";
        case ModelMode::roi_only: return "roi_only";
        case ModelMode::xroi_only: return "xroi_only";
    }
    return "?";
}

inline ModelMode model_mode_from_string(const std::string& s) {
    if (s == "both") return ModelMode::both;
    if (s == "roi_only") return ModelMode::roi_only;
    if (s == "xroi_only") return ModelMode::xroi_only;
    throw ConfigError(strcat_msg("unknown model mode \"", s, "\""));
}

template <typename T>
struct ModelForward {
    Tensor<T> logits;            // [N, K]
    Tensor<T> roi_dist_logits;   // defined iff the roi branch is mini_deit
    Tensor<T> xroi_dist_logits;  // defined iff the xroi branch is mini_deit
    BackboneOutput<T> roi;       // populated when the roi branch ran
    BackboneOutput<T> xroi;      // populated when the xroi branch ran
};

template <typename T>
class RveRNetModel {
public:
    RveRNetModel(const BackboneConfig& roi_cfg, const BackboneConfig& xroi_cfg,
                 int num_classes, int hidden, ModelMode mode, uint64_t seed)
        : mode_(mode), num_classes_(num_classes), hidden_(hidden) {
        RV_CHECK_CFG(num_classes >= 2, "model: need at least 2 classes, got ", num_classes);
        RV_CHECK_CFG(hidden >= 1, "model: head hidden width must be positive");
        Rng master(seed);
        uint64_t roi_seed = master.next_u64();
        uint64_t xroi_seed = master.next_u64();
        if (mode != ModelMode::xroi_only)
            roi_.emplace(roi_cfg, roi_seed, BackboneRole::roi_f);
        if (mode != ModelMode::roi_only)
            xroi_.emplace(xroi_cfg, xroi_seed, BackboneRole::xroi_g);

        int64_t in_width = 0;
        if (roi_) in_width += roi_->config().feature_dim;
        if (xroi_) in_width += xroi_->config().feature_dim;

        // Weights scale with fan-in so head logits start O(1) given O(1)
        // branch features; biases start at zero.
        auto param = [&](const std::string& name, std::vector<int64_t> shape, bool zero) {
            int64_t n = 1;
            for (int64_t d : shape) n *= d;
            std::vector<T> data((size_t)n, T(0));
            if (!zero) {
                double sigma = std::sqrt(2.0 / (double)shape.back());
                for (auto& v : data) v = (T)master.truncated_normal(sigma);
            }
            head_params_.emplace_back(name, Tensor<T>(std::move(shape), std::move(data), true));
            return head_params_.back().second;
        };
        param("head/linear1.w", {hidden, in_width}, false);
        param("head/linear1.b", {hidden}, true);
        param("head/linear2.w", {num_classes, hidden}, false);
        param("head/linear2.b", {num_classes}, true);
        if (roi_ && roi_->config().kind == BackboneKind::mini_deit) {
            param("roi_dist_head/w", {num_classes, roi_->config().feature_dim}, false);
            param("roi_dist_head/b", {num_classes}, true);
        }
        if (xroi_ && xroi_->config().kind == BackboneKind::mini_deit) {
            param("xroi_dist_head/w", {num_classes, xroi_->config().feature_dim}, false);
            param("xroi_dist_head/b", {num_classes}, true);
        }
        rebuild_param_list();
    }

    ModelMode mode() const { return mode_; }
    int num_classes() const { return num_classes_; }
    int hidden() const { return hidden_; }
    bool has_roi() const { return roi_.has_value(); }
    bool has_xroi() const { return xroi_.has_value(); }
    const Backbone<T>& roi_backbone() const { return *roi_; }
    const Backbone<T>& xroi_backbone() const { return *xroi_; }
    Backbone<T>& roi_backbone() { return *roi_; }
    Backbone<T>& xroi_backbone() { return *xroi_; }

    // Branch parameters under roi/ and xroi/, head sections under head/ and
    // *_dist_head/.
    std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const {
        return params_;
    }
    int64_t parameter_count() const {
        int64_t n = 0;
        for (auto& [name, t] : params_) n += t.numel();
        return n;
    }

    ModelForward<T> forward(const Tensor<T>& x1, const Tensor<T>& x2) const {
        ModelForward<T> out;
        std::vector<Tensor<T>> feats;
        if (roi_) {
            RV_CHECK_DIM(x1.defined(), "model: mode ", to_string(mode_),
                         " requires the roi input x1");
            out.roi = roi_->forward(x1);
            feats.push_back(out.roi.features);
        }
        if (xroi_) {
            RV_CHECK_DIM(x2.defined(), "model: mode ", to_string(mode_),
                         " requires the xroi input x2");
            out.xroi = xroi_->forward(x2);
            feats.push_back(out.xroi.features);
        }
        auto h = feats.size() == 2 ? concat(feats, 1) : feats[0];
        h = linear(h, p("head/linear1.w"), p("head/linear1.b"));
        h = relu(h);
        out.logits = linear(h, p("head/linear2.w"), p("head/linear2.b"));
        if (roi_ && roi_->config().kind == BackboneKind::mini_deit)
            out.roi_dist_logits = linear(out.roi.dist_state, p("roi_dist_head/w"),
                                         p("roi_dist_head/b"));
        if (xroi_ && xroi_->config().kind == BackboneKind::mini_deit)
            out.xroi_dist_logits = linear(out.xroi.dist_state, p("xroi_dist_head/w"),
                                          p("xroi_dist_head/b"));
        return out;
    }

    Tensor<T> logits(const Tensor<T>& x1, const Tensor<T>& x2) const {
        return forward(x1, x2).logits;
    }

    Tensor<T> class_probabilities(const Tensor<T>& x1, const Tensor<T>& x2) const {
        return softmax_lastdim(logits(x1, x2));
    }

    void save(const std::string& path) const { save_checkpoint(path, params_); }
    void load(const std::string& path) { load_checkpoint_into(path, params_); }

    // Copies one branch's parameters out of another model's checkpoint
    // (e.g. warm-starting a two-branch model from standalone classifiers).
    // src_prefix names the section in the file; branch selects roi/ or xroi/.
    void load_branch(const std::string& path, const std::string& branch,
                     const std::string& src_prefix) {
        RV_CHECK_CFG(branch == "roi" || branch == "xroi", "load_branch: branch must be roi or xroi");
        auto loaded = load_checkpoint<T>(path);
        int copied = 0;
        for (auto& [name, t] : params_) {
            if (name.rfind(branch + "/", 0) != 0) continue;
            std::string key = src_prefix + "/" + name.substr(branch.size() + 1);
            auto it = loaded.find(key);
            RV_CHECK_CFG(it != loaded.end(), "checkpoint ", path, " has no parameter ", key,
                         " for branch ", branch);
            RV_CHECK_CFG(it->second.shape() == t.shape(), "checkpoint ", path, ": ", key,
                         " has shape ", shape_str(it->second.shape()), ", branch expects ",
                         shape_str(t.shape()));
            t.mutable_data() = it->second.data();
            ++copied;
        }
        RV_CHECK_CFG(copied > 0, "load_branch: model has no ", branch, " branch to fill");
    }

private:
    const Tensor<T>& p(const std::string& name) const {
        for (auto& [n, t] : head_params_)
            if (n == name) return t;
        throw DimensionError("model: no head parameter " + name);
    }

    void rebuild_param_list() {
        params_.clear();
        if (roi_)
            for (auto& [n, t] : roi_->named_parameters()) params_.emplace_back("roi/" + n, t);
        if (xroi_)
            for (auto& [n, t] : xroi_->named_parameters()) params_.emplace_back("xroi/" + n, t);
        for (auto& [n, t] : head_params_) params_.emplace_back(n, t);
    }

    ModelMode mode_;
    int num_classes_;
    int hidden_;
    std::optional<Backbone<T>> roi_, xroi_;
    std::vector<std::pair<std::string, Tensor<T>>> head_params_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
};

template <typename T>
RveRNetModel<T> build_rvernet(const BackboneConfig& roi_cfg, const BackboneConfig& xroi_cfg,
                              int num_classes, int hidden, uint64_t seed,
                              ModelMode mode = ModelMode::both) {
    return RveRNetModel<T>(roi_cfg, xroi_cfg, num_classes, hidden, mode, seed);
}

}  // namespace rvernet
