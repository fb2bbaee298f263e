// Four miniature backbone families, each mapping [N,3,S,S] images to
// [N, feature_dim] features: an inverted-residual CNN, a ViT, a DeiT (ViT
// plus a distillation token), and an all-MLP mixer.
//
// Parameters are created in a fixed order from a seeded stream, so equal
// seeds give bitwise-equal models.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rvernet/common.hpp"
#include "rvernet/ops.hpp"
#include "rvernet/rng.hpp"
#include "rvernet/tensor.hpp"

namespace rvernet {

enum class BackboneKind { mini_cnn, mini_vit, mini_deit, mini_mixer };

inline const char* to_string(BackboneKind k) {
    switch (k) {
        case BackboneKind::mini_cnn: return "mini_cnn";
        case BackboneKind::mini_vit: return "mini_vit";
        case BackboneKind::mini_deit: return "mini_deit";
        case BackboneKind::mini_mixer: return "mini_mixer";
    }
    return "?";
}

inline BackboneKind backbone_kind_from_string(const std::string& s) {
    if (s == "mini_cnn") return BackboneKind::mini_cnn;
    if (s == "mini_vit") return BackboneKind::mini_vit;
    if (s == "mini_deit") return BackboneKind::mini_deit;
    if (s == "mini_mixer") return BackboneKind::mini_mixer;
    throw ConfigError(strcat_msg("unknown backbone kind \"", s, "\""));
}

enum class BackboneRole { roi_f, xroi_g, standalone };

// Hidden width of transformer/mixer MLPs relative to their input width.
inline constexpr int kMlpRatio = 2;

struct BackboneConfig {
    BackboneKind kind = BackboneKind::mini_cnn;
    int feature_dim = 64;
    int depth = 3;
    int width = 64;
    int heads = 4;
    int patch_size = 16;     // transformer/mixer kinds
    bool use_pos_embed = true;  // vit/deit
    int image_side = 64;

    bool is_patch_based() const { return kind != BackboneKind::mini_cnn; }

    void validate() const {
        RV_CHECK_CFG(feature_dim > 0, "backbone: feature_dim must be positive");
        RV_CHECK_CFG(depth >= 0, "backbone: depth must be non-negative");
        RV_CHECK_CFG(width > 0 && image_side > 0, "backbone: width/image_side must be positive");
        if (is_patch_based()) {
            RV_CHECK_CFG(patch_size > 0 && image_side % patch_size == 0, "backbone: image side ",
                         image_side, " not divisible by patch size ", patch_size);
        }
        if (kind == BackboneKind::mini_vit || kind == BackboneKind::mini_deit) {
            RV_CHECK_CFG(heads > 0 && width % heads == 0, "backbone: width ", width,
                         " not divisible by heads ", heads);
        }
        if (is_patch_based()) {
            // Patch-based features are token states, so their width is the
            // feature width; only the CNN projects pooled channels.
            RV_CHECK_CFG(feature_dim == width, "backbone: ", to_string(kind),
                         " feature_dim must equal width (got ", feature_dim, " vs ", width, ")");
        }
        if (kind == BackboneKind::mini_cnn) {
            RV_CHECK_CFG(depth >= 1, "backbone: mini_cnn needs at least one block");
        }
    }

    int num_patches() const {
        int g = image_side / patch_size;
        return g * g;
    }
};

// Rearranges [B,3,S,S] into row-major patch tokens [B, G*G, 3*p*p].
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int patch) {
    RV_CHECK_DIM(x.ndim() == 4 && x.dim(1) == 3, "patchify: expected [N,3,S,S], got ",
                 shape_str(x.shape()));
    int64_t b = x.dim(0), s = x.dim(2);
    RV_CHECK_DIM(x.dim(3) == s && s % patch == 0, "patchify: spatial dims ", shape_str(x.shape()),
                 " not divisible by patch ", patch);
    int64_t g = s / patch;
    auto t = reshape(x, {b, 3, g, patch, g, patch});
    t = permute(t, {0, 2, 4, 1, 3, 5});
    return reshape(t, {b, g * g, 3 * (int64_t)patch * patch});
}

template <typename T>
struct BackboneOutput {
    Tensor<T> features;    // [N, feature_dim]
    Tensor<T> cls_state;   // vit/deit: class token state
    Tensor<T> dist_state;  // deit: distillation token state
    Tensor<T> conv_tap;    // cnn: activation of the last convolution, [N,C,H,W]
};

template <typename T>
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, uint64_t seed, BackboneRole role = BackboneRole::standalone)
        : cfg_(cfg), role_(role) {
        cfg_.validate();
        Rng rng(seed);
        switch (cfg_.kind) {
            case BackboneKind::mini_cnn: init_cnn(rng); break;
            case BackboneKind::mini_vit: init_vit(rng, false); break;
            case BackboneKind::mini_deit: init_vit(rng, true); break;
            case BackboneKind::mini_mixer: init_mixer(rng); break;
        }
    }

    const BackboneConfig& config() const { return cfg_; }
    BackboneRole role() const { return role_; }
    void set_role(BackboneRole r) { role_ = r; }

    std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor<T>>>& named_parameters() const {
        return params_;
    }
    int64_t parameter_count() const {
        int64_t n = 0;
        for (auto& [name, t] : params_) n += t.numel();
        return n;
    }

    BackboneOutput<T> forward(const Tensor<T>& image) const {
        RV_CHECK_DIM(image.ndim() == 4 && image.dim(1) == 3 && image.dim(2) == cfg_.image_side &&
                         image.dim(3) == cfg_.image_side,
                     "backbone: expected [N,3,", cfg_.image_side, ",", cfg_.image_side,
                     "], got ", shape_str(image.shape()));
        switch (cfg_.kind) {
            case BackboneKind::mini_cnn: return forward_cnn(image);
            case BackboneKind::mini_vit: return forward_vit(image, false);
            case BackboneKind::mini_deit: return forward_vit(image, true);
            case BackboneKind::mini_mixer: return forward_mixer(image);
        }
        throw ConfigError("backbone: unreachable kind");
    }

    Tensor<T> forward_features(const Tensor<T>& image) const { return forward(image).features; }

    // Channel counts of the CNN trunk: c0 at the stem, then a linear ramp.
    static int cnn_stem_channels(const BackboneConfig& cfg) { return std::max(8, cfg.width / 4); }
    static int cnn_block_channels(const BackboneConfig& cfg, int block) {
        int c0 = cnn_stem_channels(cfg);
        return c0 + (c0 / 2) * (block + 1);
    }

private:
    const Tensor<T>& p(const std::string& name) const {
        auto it = index_.find(name);
        RV_CHECK_DIM(it != index_.end(), "backbone: no parameter ", name);
        return params_[it->second].second;
    }

    Tensor<T>& add_param(const std::string& name, std::vector<int64_t> shape, Rng& rng,
                         double sigma) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        std::vector<T> data((size_t)n);
        if (sigma == 0.0) {
            std::fill(data.begin(), data.end(), T(0));
        } else if (sigma < 0.0) {
            std::fill(data.begin(), data.end(), T(1));
        } else {
            for (auto& v : data) v = (T)rng.truncated_normal(sigma);
        }
        index_[name] = params_.size();
        params_.emplace_back(name, Tensor<T>(std::move(shape), std::move(data), true));
        return params_.back().second;
    }
    Tensor<T>& add_zeros(const std::string& name, std::vector<int64_t> shape, Rng& rng) {
        return add_param(name, std::move(shape), rng, 0.0);
    }
    Tensor<T>& add_ones(const std::string& name, std::vector<int64_t> shape, Rng& rng) {
        return add_param(name, std::move(shape), rng, -1.0);
    }
    // Truncated-normal with the fan-in scaling used for conv stacks.
    Tensor<T>& add_conv(const std::string& name, std::vector<int64_t> shape, Rng& rng) {
        double fan_in = (double)(shape[1] * shape[2] * shape[3]);
        return add_param(name, std::move(shape), rng, std::sqrt(2.0 / fan_in));
    }

    void add_ln(const std::string& prefix, int64_t d, Rng& rng) {
        add_ones(prefix + ".g", {d}, rng);
        add_zeros(prefix + ".b", {d}, rng);
    }

    Tensor<T> ln(const std::string& prefix, const Tensor<T>& x) const {
        return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"));
    }

    // LayerNorm over the channel axis of [B,C,H,W].
    Tensor<T> channel_ln(const std::string& prefix, const Tensor<T>& x) const {
        auto t = permute(x, {0, 2, 3, 1});
        t = layer_norm(t, p(prefix + ".g"), p(prefix + ".b"));
        return permute(t, {0, 3, 1, 2});
    }

    // ---- mini_cnn ----

    static int cnn_stride(int block) { return block % 2 == 1 ? 2 : 1; }

    void init_cnn(Rng& rng) {
        int c0 = cnn_stem_channels(cfg_);
        add_conv("stem.w", {c0, 3, 3, 3}, rng);
        add_ln("stem.ln", c0, rng);
        int cin = c0;
        for (int i = 0; i < cfg_.depth; ++i) {
            int cout = cnn_block_channels(cfg_, i);
            int e = 3 * cin;
            std::string b = "block" + std::to_string(i);
            add_conv(b + ".expand.w", {e, cin, 1, 1}, rng);
            add_ln(b + ".expand.ln", e, rng);
            add_conv(b + ".dw.w", {e, 1, 3, 3}, rng);
            add_ln(b + ".dw.ln", e, rng);
            add_conv(b + ".project.w", {cout, e, 1, 1}, rng);
            add_ln(b + ".project.ln", cout, rng);
            cin = cout;
        }
        // Pooled channels are normalized before projection so feature scale
        // is O(1) even when most input pixels are blank.
        add_ln("head.ln", cin, rng);
        add_param("head.w", {cfg_.feature_dim, cin}, rng, std::sqrt(1.0 / cin));
        add_zeros("head.b", {cfg_.feature_dim}, rng);
    }

    BackboneOutput<T> forward_cnn(const Tensor<T>& image) const {
        auto h = conv2d(image, p("stem.w"), Tensor<T>(), 2, 1);
        h = relu(channel_ln("stem.ln", h));
        int cin = cnn_stem_channels(cfg_);
        Tensor<T> tap;
        for (int i = 0; i < cfg_.depth; ++i) {
            int cout = cnn_block_channels(cfg_, i);
            int s = cnn_stride(i);
            std::string b = "block" + std::to_string(i);
            auto t = conv2d(h, p(b + ".expand.w"), Tensor<T>(), 1, 0);
            t = relu(channel_ln(b + ".expand.ln", t));
            t = conv2d(t, p(b + ".dw.w"), Tensor<T>(), s, 1, PadMode::Zero, 3 * cin);
            t = relu(channel_ln(b + ".dw.ln", t));
            t = conv2d(t, p(b + ".project.w"), Tensor<T>(), 1, 0);
            t = channel_ln(b + ".project.ln", t);
            if (s == 1 && cin == cout) t = add(t, h);
            h = t;
            tap = t;
            cin = cout;
        }
        // Global average pool, then project to the feature width.
        auto pooled = reduce_mean(reshape(h, {h.dim(0), h.dim(1), h.dim(2) * h.dim(3)}), 2);
        BackboneOutput<T> out;
        out.features = linear(ln("head.ln", pooled), p("head.w"), p("head.b"));
        out.conv_tap = tap;
        return out;
    }

    // ---- mini_vit / mini_deit ----

    void init_vit(Rng& rng, bool deit) {
        int64_t w = cfg_.width, pd = 3LL * cfg_.patch_size * cfg_.patch_size;
        int64_t tokens = cfg_.num_patches() + (deit ? 2 : 1);
        add_param("patch.w", {w, pd}, rng, 0.02);
        add_zeros("patch.b", {w}, rng);
        add_param("cls", {1, w}, rng, 0.02);
        if (deit) add_param("dist", {1, w}, rng, 0.02);
        if (cfg_.use_pos_embed) add_param("pos", {tokens, w}, rng, 0.02);
        for (int i = 0; i < cfg_.depth; ++i) {
            std::string b = "blk" + std::to_string(i);
            add_ln(b + ".ln1", w, rng);
            add_param(b + ".attn.wqkv", {3 * w, w}, rng, 0.02);
            add_zeros(b + ".attn.bqkv", {3 * w}, rng);
            add_param(b + ".attn.wproj", {w, w}, rng, 0.02);
            add_zeros(b + ".attn.bproj", {w}, rng);
            add_ln(b + ".ln2", w, rng);
            add_param(b + ".mlp.w1", {kMlpRatio * w, w}, rng, 0.02);
            add_zeros(b + ".mlp.b1", {kMlpRatio * w}, rng);
            add_param(b + ".mlp.w2", {w, kMlpRatio * w}, rng, 0.02);
            add_zeros(b + ".mlp.b2", {w}, rng);
        }
        add_ln("final_ln", w, rng);
    }

    BackboneOutput<T> forward_vit(const Tensor<T>& image, bool deit) const {
        int64_t b = image.dim(0), w = cfg_.width;
        auto tok = linear(patchify(image, cfg_.patch_size), p("patch.w"), p("patch.b"));
        std::vector<Tensor<T>> parts;
        parts.push_back(broadcast_axis0(p("cls"), b));  // [B,1,W]
        if (deit) parts.push_back(broadcast_axis0(p("dist"), b));
        parts.push_back(tok);
        auto x = concat(parts, 1);
        if (cfg_.use_pos_embed) x = add(x, p("pos"));
        for (int i = 0; i < cfg_.depth; ++i) {
            std::string bp = "blk" + std::to_string(i);
            auto h = ln(bp + ".ln1", x);
            h = multi_head_self_attention(h, p(bp + ".attn.wqkv"), p(bp + ".attn.bqkv"),
                                          p(bp + ".attn.wproj"), p(bp + ".attn.bproj"),
                                          cfg_.heads);
            x = add(x, h);
            h = ln(bp + ".ln2", x);
            h = linear(h, p(bp + ".mlp.w1"), p(bp + ".mlp.b1"));
            h = gelu(h);
            h = linear(h, p(bp + ".mlp.w2"), p(bp + ".mlp.b2"));
            x = add(x, h);
        }
        x = ln("final_ln", x);
        BackboneOutput<T> out;
        out.cls_state = reshape(slice(x, 1, 0, 1), {b, w});
        out.features = out.cls_state;
        if (deit) {
            out.dist_state = reshape(slice(x, 1, 1, 1), {b, w});
            // Inference feature fuses the two token states evenly.
            out.features = scale(add(out.cls_state, out.dist_state), T(0.5));
        }
        return out;
    }

    // ---- mini_mixer ----

    void init_mixer(Rng& rng) {
        int64_t w = cfg_.width, pd = 3LL * cfg_.patch_size * cfg_.patch_size;
        int64_t tokens = cfg_.num_patches();
        add_param("patch.w", {w, pd}, rng, 0.02);
        add_zeros("patch.b", {w}, rng);
        for (int i = 0; i < cfg_.depth; ++i) {
            std::string b = "blk" + std::to_string(i);
            add_ln(b + ".ln1", w, rng);
            add_param(b + ".tok.w1", {kMlpRatio * tokens, tokens}, rng, 0.02);
            add_zeros(b + ".tok.b1", {kMlpRatio * tokens}, rng);
            add_param(b + ".tok.w2", {tokens, kMlpRatio * tokens}, rng, 0.02);
            add_zeros(b + ".tok.b2", {tokens}, rng);
            add_ln(b + ".ln2", w, rng);
            add_param(b + ".ch.w1", {kMlpRatio * w, w}, rng, 0.02);
            add_zeros(b + ".ch.b1", {kMlpRatio * w}, rng);
            add_param(b + ".ch.w2", {w, kMlpRatio * w}, rng, 0.02);
            add_zeros(b + ".ch.b2", {w}, rng);
        }
    }

    BackboneOutput<T> forward_mixer(const Tensor<T>& image) const {
        auto x = linear(patchify(image, cfg_.patch_size), p("patch.w"), p("patch.b"));
        for (int i = 0; i < cfg_.depth; ++i) {
            std::string bp = "blk" + std::to_string(i);
            // Token mixing: MLP across the token axis, per channel.
            auto h = ln(bp + ".ln1", x);
            h = permute(h, {0, 2, 1});  // [B,W,T]
            h = linear(h, p(bp + ".tok.w1"), p(bp + ".tok.b1"));
            h = gelu(h);
            h = linear(h, p(bp + ".tok.w2"), p(bp + ".tok.b2"));
            h = permute(h, {0, 2, 1});
            x = add(x, h);
            // Channel mixing: MLP across channels, per token.
            h = ln(bp + ".ln2", x);
            h = linear(h, p(bp + ".ch.w1"), p(bp + ".ch.b1"));
            h = gelu(h);
            h = linear(h, p(bp + ".ch.w2"), p(bp + ".ch.b2"));
            x = add(x, h);
        }
        BackboneOutput<T> out;
        out.features = reduce_mean(x, 1);  // depth 0 yields pooled patch embeddings
        return out;
    }

    BackboneConfig cfg_;
    BackboneRole role_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Named builders for the four families; each insists on its own kind so a
// mismatched config fails loudly.
template <typename T>
Backbone<T> build_mini_cnn(const BackboneConfig& cfg, uint64_t seed) {
    RV_CHECK_CFG(cfg.kind == BackboneKind::mini_cnn, "build_mini_cnn: wrong kind");
    return Backbone<T>(cfg, seed);
}
template <typename T>
Backbone<T> build_mini_vit(const BackboneConfig& cfg, uint64_t seed) {
    RV_CHECK_CFG(cfg.kind == BackboneKind::mini_vit, "build_mini_vit: wrong kind");
    return Backbone<T>(cfg, seed);
}
template <typename T>
Backbone<T> build_mini_deit(const BackboneConfig& cfg, uint64_t seed) {
    RV_CHECK_CFG(cfg.kind == BackboneKind::mini_deit, "build_mini_deit: wrong kind");
    return Backbone<T>(cfg, seed);
}
template <typename T>
Backbone<T> build_mini_mixer(const BackboneConfig& cfg, uint64_t seed) {
    RV_CHECK_CFG(cfg.kind == BackboneKind::mini_mixer, "build_mini_mixer: wrong kind");
    return Backbone<T>(cfg, seed);
}

}  // namespace rvernet
