#include "rvernet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "rvernet/common.hpp"
#include "rvernet/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rvernet {

namespace {

enum ShapeKind { kDisk = 0, kSquare, kTriangle, kRing, kHBar, kCross };

struct ShapeSpec {
    int kind;
    int cy, cx, size;
    double r, g, b;
};

bool inside_shape(int kind, int dy, int dx, int s) {
    switch (kind) {
        case kDisk:
            return dy * dy + dx * dx <= s * s;
        case kSquare:
            return std::abs(dy) <= s && std::abs(dx) <= s;
        case kTriangle:
            return dy >= -s && dy <= s && std::abs(dx) <= (dy + s) / 2;
        case kRing: {
            int inner = std::max(1, (2 * s) / 3);
            int d2 = dy * dy + dx * dx;
            return d2 <= s * s && d2 >= inner * inner;
        }
        case kHBar:
            return std::abs(dy) <= std::max(1, s / 3) && std::abs(dx) <= s;
        case kCross: {
            int t = std::max(1, s / 3);
            return (std::abs(dx) <= t && std::abs(dy) <= s) ||
                   (std::abs(dy) <= t && std::abs(dx) <= s);
        }
        default:
            return false;
    }
}

template <typename T>
T quantize01(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return (T)((double)std::lround(v * 255.0) / 255.0);
}

// Paints one shape with per-pixel gaussian color noise. Pixel visit order is
// fixed (rows, then columns, then channels) so a given RNG stream always
// produces identical pixels.
template <typename T>
void paint(std::vector<T>& img, std::vector<T>* mask, int S, const ShapeSpec& sh, Rng& rng,
           double noise_std) {
    const double base[3] = {sh.r, sh.g, sh.b};
    for (int y = std::max(0, sh.cy - sh.size); y <= std::min(S - 1, sh.cy + sh.size); ++y)
        for (int x = std::max(0, sh.cx - sh.size); x <= std::min(S - 1, sh.cx + sh.size); ++x) {
            if (!inside_shape(sh.kind, y - sh.cy, x - sh.cx, sh.size)) continue;
            for (int c = 0; c < 3; ++c)
                img[(size_t)((c * S + y) * S + x)] =
                    quantize01<T>(base[c] + noise_std * rng.normal());
            if (mask) (*mask)[(size_t)(y * S + x)] = (T)1;
        }
}

struct Appearance {
    int kind;
    double r, g, b;
    const char* name;
};

// ROI appearances for non-ambiguous classes, cycled by rank.
constexpr Appearance kRoiTable[] = {
    {kSquare, 0.10, 0.80, 0.15, "green_square"},   {kTriangle, 0.15, 0.25, 0.90, "blue_triangle"},
    {kRing, 0.92, 0.86, 0.12, "yellow_ring"},      {kCross, 0.10, 0.80, 0.85, "cyan_cross"},
    {kHBar, 0.85, 0.15, 0.80, "magenta_bar"},
};

// Context vocabularies: one per ambiguous class, one shared by the rest.
constexpr Appearance kVocabA[] = {{kSquare, 0.10, 0.80, 0.15, ""},
                                  {kHBar, 0.92, 0.86, 0.12, ""}};
constexpr Appearance kVocabB[] = {{kTriangle, 0.15, 0.25, 0.90, ""},
                                  {kRing, 0.85, 0.15, 0.80, ""}};
constexpr Appearance kVocabC[] = {{kDisk, 0.92, 0.92, 0.92, ""},
                                  {kCross, 0.55, 0.55, 0.55, ""}};

bool boxes_overlap(int ay0, int ax0, int ay1, int ax1, int by0, int bx0, int by1, int bx1) {
    return ay0 <= by1 && by0 <= ay1 && ax0 <= bx1 && bx0 <= ax1;
}

std::string sample_id(int label, int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "c%d_%04d", label, index);
    return buf;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    RV_CHECK_CFG(in.good(), "cannot open ", path);
    json j = json::parse(in, nullptr, false);
    RV_CHECK_CFG(!j.is_discarded(), "invalid JSON in ", path);
    return j;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        RV_CHECK_CFG(out.good(), "cannot write ", tmp);
        out << content;
        RV_CHECK_CFG(out.good(), "write failed for ", tmp);
    }
    fs::rename(tmp, path);
}

}  // namespace

template <typename T>
CutoutPair<T> apply_mask(const LabeledImage<T>& li) {
    RV_CHECK_DIM(li.image.shape().size() == 3 && li.image.dim(0) == 3,
                 "apply_mask: image must be [3,S,S], got ", shape_str(li.image.shape()));
    RV_CHECK_DIM(li.mask.shape().size() == 2 && li.mask.dim(0) == li.image.dim(1) &&
                     li.mask.dim(1) == li.image.dim(2),
                 "apply_mask: mask ", shape_str(li.mask.shape()), " does not match image ",
                 shape_str(li.image.shape()));
    int64_t bad = 0;
    for (T v : li.mask.data())
        if (v != (T)0 && v != (T)1) ++bad;
    RV_CHECK_CFG(bad == 0, "apply_mask: mask has ", bad, " non-binary pixels");

    const auto& img = li.image.data();
    const auto& m = li.mask.data();
    int64_t plane = li.mask.dim(0) * li.mask.dim(1);
    std::vector<T> x1(img.size()), x2(img.size());
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < plane; ++i) {
            T v = img[(size_t)(c * plane + i)];
            bool roi = m[(size_t)i] == (T)1;
            x1[(size_t)(c * plane + i)] = roi ? v : (T)0;
            x2[(size_t)(c * plane + i)] = roi ? (T)0 : v;
        }
    CutoutPair<T> out;
    out.x1 = Tensor<T>(li.image.shape(), std::move(x1));
    out.x2 = Tensor<T>(li.image.shape(), std::move(x2));
    out.label = li.label;
    return out;
}

template <typename T>
CutoutPair<T> horizontal_flip(const CutoutPair<T>& pair, double p, Rng& rng) {
    RV_CHECK_CFG(p >= 0.0 && p <= 1.0, "horizontal_flip: p must be in [0,1], got ", p);
    if (!rng.bernoulli(p)) return pair;
    auto flip = [](const Tensor<T>& t) {
        int64_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
        std::vector<T> out(t.data().size());
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x)
                    out[(size_t)((c * H + y) * W + x)] =
                        t.data()[(size_t)((c * H + y) * W + (W - 1 - x))];
        return Tensor<T>(t.shape(), std::move(out));
    };
    CutoutPair<T> out;
    out.x1 = flip(pair.x1);
    out.x2 = flip(pair.x2);
    out.label = pair.label;
    return out;
}

void validate_spec(const SyntheticSpec& spec) {
    RV_CHECK_CFG(spec.num_classes >= 2, "synthetic spec: need at least 2 classes, got ",
                 spec.num_classes);
    RV_CHECK_CFG(spec.image_side >= 32, "synthetic spec: image_side must be >= 32, got ",
                 spec.image_side);
    RV_CHECK_CFG(spec.train_per_class > 0, "synthetic spec: train_per_class must be > 0, got ",
                 spec.train_per_class);
    RV_CHECK_CFG(spec.test_per_class >= 0, "synthetic spec: test_per_class must be >= 0, got ",
                 spec.test_per_class);
    RV_CHECK_CFG(spec.noise_std >= 0.0, "synthetic spec: noise_std must be >= 0");
    RV_CHECK_CFG(spec.ambiguous_a != spec.ambiguous_b && spec.ambiguous_a >= 0 &&
                     spec.ambiguous_b >= 0 && spec.ambiguous_a < spec.num_classes &&
                     spec.ambiguous_b < spec.num_classes,
                 "synthetic spec: ambiguous pair (", spec.ambiguous_a, ",", spec.ambiguous_b,
                 ") invalid for ", spec.num_classes, " classes");
}

template <typename T>
Dataset<T> generate_synthetic(const SyntheticSpec& spec) {
    validate_spec(spec);

    const int S = spec.image_side;
    const int roi_min = std::max(4, S / 10), roi_max = std::max(roi_min + 1, S / 6);
    const int ctx_min = std::max(2, S / 16), ctx_max = std::max(ctx_min + 1, S / 10);

    Dataset<T> out;
    out.class_names.resize((size_t)spec.num_classes);
    std::vector<int> rank(spec.num_classes, -1);  // non-ambiguous rank
    {
        int r = 0;
        constexpr int kTableLen = (int)(sizeof kRoiTable / sizeof kRoiTable[0]);
        for (int c = 0; c < spec.num_classes; ++c) {
            if (c == spec.ambiguous_a) {
                out.class_names[(size_t)c] = "red_disk_ctx_a";
            } else if (c == spec.ambiguous_b) {
                out.class_names[(size_t)c] = "red_disk_ctx_b";
            } else {
                rank[(size_t)c] = r;
                std::string name = kRoiTable[r % kTableLen].name;
                if (r >= kTableLen) name += "_" + std::to_string(r / kTableLen + 1);
                out.class_names[(size_t)c] = name;
                ++r;
            }
        }
    }

    Rng base(spec.seed);
    const int per_class = spec.train_per_class + spec.test_per_class;
    out.samples.reserve((size_t)(per_class * spec.num_classes));

    for (int c = 0; c < spec.num_classes; ++c) {
        bool ambiguous = c == spec.ambiguous_a || c == spec.ambiguous_b;
        for (int i = 0; i < per_class; ++i) {
            // Ambiguous classes draw ROI pixels from a class-independent
            // stream: sample i of both classes gets the identical object.
            Rng roi_rng = ambiguous ? base.split(1).split((uint64_t)i)
                                    : base.split(2, (uint64_t)c).split((uint64_t)i);
            Rng ctx_rng = base.split(3, (uint64_t)c).split((uint64_t)i);

            std::vector<T> img((size_t)(3 * S * S), (T)0);
            std::vector<T> msk((size_t)(S * S), (T)0);

            ShapeSpec roi;
            roi.size = roi_min + (int)roi_rng.uniform_int((uint64_t)(roi_max - roi_min + 1));
            int lo = S / 2 - S / 8, hi = S / 2 + S / 8;
            roi.cy = lo + (int)roi_rng.uniform_int((uint64_t)(hi - lo + 1));
            roi.cx = lo + (int)roi_rng.uniform_int((uint64_t)(hi - lo + 1));
            if (ambiguous) {
                roi.kind = kDisk;
                roi.r = 0.85, roi.g = 0.10, roi.b = 0.08;
            } else {
                const auto& ap =
                    kRoiTable[rank[(size_t)c] % (int)(sizeof kRoiTable / sizeof kRoiTable[0])];
                roi.kind = ap.kind;
                roi.r = ap.r, roi.g = ap.g, roi.b = ap.b;
            }
            paint(img, &msk, S, roi, roi_rng, spec.noise_std);
            int ry0 = roi.cy - roi.size - 1, rx0 = roi.cx - roi.size - 1;
            int ry1 = roi.cy + roi.size + 1, rx1 = roi.cx + roi.size + 1;

            const Appearance* vocab = kVocabC;
            if (c == spec.ambiguous_a) vocab = kVocabA;
            if (c == spec.ambiguous_b) vocab = kVocabB;
            int n_ctx = 1 + (int)ctx_rng.uniform_int(3);
            for (int k = 0; k < n_ctx; ++k) {
                const auto& ap = vocab[ctx_rng.uniform_int(2)];
                ShapeSpec ctx;
                ctx.kind = ap.kind;
                ctx.r = ap.r, ctx.g = ap.g, ctx.b = ap.b;
                ctx.size = ctx_min + (int)ctx_rng.uniform_int((uint64_t)(ctx_max - ctx_min + 1));
                bool placed = false;
                for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
                    int span = S - 2 * (ctx.size + 1);
                    ctx.cy = ctx.size + 1 + (int)ctx_rng.uniform_int((uint64_t)span);
                    ctx.cx = ctx.size + 1 + (int)ctx_rng.uniform_int((uint64_t)span);
                    placed = !boxes_overlap(ctx.cy - ctx.size, ctx.cx - ctx.size,
                                            ctx.cy + ctx.size, ctx.cx + ctx.size, ry0, rx0, ry1,
                                            rx1);
                }
                if (placed) paint<T>(img, nullptr, S, ctx, ctx_rng, spec.noise_std);
            }

            LabeledImage<T> li;
            li.image = Tensor<T>({3, S, S}, std::move(img));
            li.mask = Tensor<T>({S, S}, std::move(msk));
            li.label = c;
            li.id = sample_id(c, i);
            li.split = i < spec.train_per_class ? "train" : "test";
            out.samples.push_back(std::move(li));
        }
    }
    return out;
}

template <typename T>
void save_dataset(const Dataset<T>& data, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    json samples = json::array();
    for (const auto& s : data.samples) {
        int S = (int)s.mask.dim(0);
        ImageU8 img;
        img.width = S, img.height = S, img.channels = 3;
        img.pixels.resize((size_t)(3 * S * S));
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                for (int c = 0; c < 3; ++c) {
                    double v = (double)s.image.data()[(size_t)((c * S + y) * S + x)];
                    v = std::min(1.0, std::max(0.0, v));
                    img.pixels[(size_t)((y * S + x) * 3 + c)] = (uint8_t)std::lround(v * 255.0);
                }
        ImageU8 msk;
        msk.width = S, msk.height = S, msk.channels = 1;
        msk.pixels.resize((size_t)(S * S));
        for (int i = 0; i < S * S; ++i)
            msk.pixels[(size_t)i] = s.mask.data()[(size_t)i] == (T)1 ? 255 : 0;

        std::string img_rel = "images/" + s.id + ".png";
        std::string msk_rel = "masks/" + s.id + ".png";
        write_png((fs::path(dir) / img_rel).string(), img);
        write_png((fs::path(dir) / msk_rel).string(), msk);
        samples.push_back({{"id", s.id},
                           {"image", img_rel},
                           {"mask", msk_rel},
                           {"label", s.label},
                           {"split", s.split}});
    }
    json manifest = {{"classes", data.class_names}, {"samples", samples}};
    write_file_atomic((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

template <typename T>
Dataset<T> load_dataset(const std::string& manifest_path) {
    json manifest = read_json_file(manifest_path);
    RV_CHECK_CFG(manifest.is_object() && manifest.contains("classes") &&
                     manifest.contains("samples"),
                 manifest_path, ": manifest must have 'classes' and 'samples'");
    Dataset<T> out;
    for (const auto& n : manifest["classes"]) out.class_names.push_back(n.get<std::string>());
    fs::path root = fs::path(manifest_path).parent_path();

    for (const auto& e : manifest["samples"]) {
        for (const char* key : {"id", "image", "mask", "label", "split"})
            RV_CHECK_CFG(e.contains(key), manifest_path, ": sample entry missing '", key, "'");
        LabeledImage<T> li;
        li.id = e["id"].get<std::string>();
        li.label = e["label"].get<int>();
        li.split = e["split"].get<std::string>();
        RV_CHECK_CFG(li.label >= 0 && li.label < (int)out.class_names.size(), manifest_path,
                     ": sample ", li.id, " has label ", li.label, " outside the class table");

        ImageU8 img = read_png((root / e["image"].get<std::string>()).string(), 3);
        ImageU8 msk = read_png((root / e["mask"].get<std::string>()).string(), 1);
        RV_CHECK_CFG(img.width == msk.width && img.height == msk.height, "sample ", li.id,
                     ": image is ", img.width, "x", img.height, " but mask is ", msk.width, "x",
                     msk.height);
        int S = img.height;
        RV_CHECK_CFG(img.width == S, "sample ", li.id, ": images must be square, got ", img.width,
                     "x", img.height);

        std::vector<T> it((size_t)(3 * S * S)), mt((size_t)(S * S));
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                for (int c = 0; c < 3; ++c)
                    it[(size_t)((c * S + y) * S + x)] =
                        (T)((double)img.pixels[(size_t)((y * S + x) * 3 + c)] / 255.0);
        int64_t bad = 0;
        for (int i = 0; i < S * S; ++i) {
            uint8_t v = msk.pixels[(size_t)i];
            if (v != 0 && v != 255) ++bad;
            mt[(size_t)i] = v == 255 ? (T)1 : (T)0;
        }
        RV_CHECK_CFG(bad == 0, "sample ", li.id, ": mask has ", bad,
                     " pixels that are neither 0 nor 255");
        li.image = Tensor<T>({3, S, S}, std::move(it));
        li.mask = Tensor<T>({S, S}, std::move(mt));
        out.samples.push_back(std::move(li));
    }
    return out;
}

template <typename T>
FilteredDataset<T> filter_classes(const Dataset<T>& d, const std::set<int>& excluded) {
    int K = d.num_classes();
    FilteredDataset<T> out;
    out.old_to_new.assign((size_t)K, -1);
    for (int c = 0; c < K; ++c) {
        if (excluded.count(c)) continue;
        out.old_to_new[(size_t)c] = (int)out.new_to_old.size();
        out.new_to_old.push_back(c);
        out.data.class_names.push_back(d.class_names[(size_t)c]);
    }
    RV_CHECK_CFG(!out.new_to_old.empty(), "filter_classes: excluding all ", K, " classes");
    for (const auto& s : d.samples) {
        RV_CHECK_CFG(s.label >= 0 && s.label < K, "filter_classes: sample ", s.id, " has label ",
                     s.label, " outside the class table");
        if (out.old_to_new[(size_t)s.label] < 0) continue;
        LabeledImage<T> copy = s;
        copy.label = out.old_to_new[(size_t)s.label];
        out.data.samples.push_back(std::move(copy));
    }
    return out;
}

template <typename T>
PairBatch<T> stack_pairs(const std::vector<CutoutPair<T>>& pairs, size_t from, size_t to,
                         bool need_x1, bool need_x2) {
    RV_CHECK_DIM(from < to && to <= pairs.size(), "stack_pairs: bad range [", from, ",", to,
                 ") for ", pairs.size(), " pairs");
    auto stack = [&](bool first) {
        const auto& head = first ? pairs[from].x1 : pairs[from].x2;
        int64_t per = (int64_t)head.data().size();
        std::vector<T> out((size_t)((int64_t)(to - from) * per));
        std::vector<int64_t> shape = {(int64_t)(to - from)};
        for (int64_t d : head.shape()) shape.push_back(d);
        for (size_t i = from; i < to; ++i) {
            const auto& src = first ? pairs[i].x1 : pairs[i].x2;
            RV_CHECK_DIM(src.shape() == head.shape(), "stack_pairs: ragged input shapes");
            std::copy(src.data().begin(), src.data().end(),
                      out.begin() + (int64_t)(i - from) * per);
        }
        return Tensor<T>(std::move(shape), std::move(out));
    };
    PairBatch<T> b;
    if (need_x1) b.x1 = stack(true);
    if (need_x2) b.x2 = stack(false);
    for (size_t i = from; i < to; ++i) b.labels.push_back(pairs[i].label);
    return b;
}

template <typename T>
std::array<int64_t, 4> mask_bbox(const Tensor<T>& mask) {
    RV_CHECK_DIM(mask.shape().size() == 2, "mask_bbox: mask must be 2D, got ",
                 shape_str(mask.shape()));
    int64_t H = mask.dim(0), W = mask.dim(1);
    int64_t y0 = H, x0 = W, y1 = -1, x1 = -1;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            if (mask.data()[(size_t)(y * W + x)] == (T)1) {
                y0 = std::min(y0, y), x0 = std::min(x0, x);
                y1 = std::max(y1, y), x1 = std::max(x1, x);
            }
    RV_CHECK_DIM(y1 >= 0, "mask_bbox: mask has no ROI pixels");
    return {y0, x0, y1, x1};
}

template CutoutPair<float> apply_mask(const LabeledImage<float>&);
template CutoutPair<double> apply_mask(const LabeledImage<double>&);
template CutoutPair<float> horizontal_flip(const CutoutPair<float>&, double, Rng&);
template CutoutPair<double> horizontal_flip(const CutoutPair<double>&, double, Rng&);
template Dataset<float> generate_synthetic(const SyntheticSpec&);
template Dataset<double> generate_synthetic(const SyntheticSpec&);
template void save_dataset(const Dataset<float>&, const std::string&);
template void save_dataset(const Dataset<double>&, const std::string&);
template Dataset<float> load_dataset(const std::string&);
template Dataset<double> load_dataset(const std::string&);
template FilteredDataset<float> filter_classes(const Dataset<float>&, const std::set<int>&);
template FilteredDataset<double> filter_classes(const Dataset<double>&, const std::set<int>&);
template PairBatch<float> stack_pairs(const std::vector<CutoutPair<float>>&, size_t, size_t, bool,
                                      bool);
template PairBatch<double> stack_pairs(const std::vector<CutoutPair<double>>&, size_t, size_t,
                                       bool, bool);
template std::array<int64_t, 4> mask_bbox(const Tensor<float>&);
template std::array<int64_t, 4> mask_bbox(const Tensor<double>&);

}  // namespace rvernet
