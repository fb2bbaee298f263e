#include "rvernet/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

using nlohmann::json;

namespace rvernet {

const char* to_string(PerturbTarget t) {
    switch (t) {
        case PerturbTarget::roi:
            return "roi";
        case PerturbTarget::xroi:
            return "xroi";
        case PerturbTarget::both:
            return "both";
    }
    return "?";
}

PerturbTarget perturb_target_from_string(const std::string& s) {
    if (s == "roi") return PerturbTarget::roi;
    if (s == "xroi") return PerturbTarget::xroi;
    if (s == "both") return PerturbTarget::both;
    throw ConfigError(strcat_msg("unknown perturbation target \"", s, "\""));
}

std::string describe(const PerturbSpec& spec) {
    std::ostringstream os;
    if (std::holds_alternative<PermutationSpec>(spec)) {
        const auto& p = std::get<PermutationSpec>(spec);
        os << "permute(patch=" << p.patch_side << ",seed=" << p.seed
           << ",target=" << to_string(p.target) << ")";
    } else {
        const auto& t = std::get<TranslocationSpec>(spec);
        os << "translocate(dx=" << t.dx << ",dy=" << t.dy << ",target=" << to_string(t.target)
           << ")";
    }
    return os.str();
}

PerturbTarget target_of(const PerturbSpec& spec) {
    return std::holds_alternative<PermutationSpec>(spec)
               ? std::get<PermutationSpec>(spec).target
               : std::get<TranslocationSpec>(spec).target;
}

std::vector<TranslocationSpec> default_translocations(int image_side, PerturbTarget target) {
    const int ref[3][2] = {{-30, 63}, {60, -85}, {37, 139}};
    std::vector<TranslocationSpec> out;
    for (const auto& r : ref) {
        TranslocationSpec t;
        t.dx = (int)std::lround((double)r[0] * image_side / 224.0);
        t.dy = (int)std::lround((double)r[1] * image_side / 224.0);
        t.target = target;
        out.push_back(t);
    }
    return out;
}

template <typename T>
Tensor<T> permute_patches(const Tensor<T>& image, int patch_side,
                          const std::vector<int64_t>& perm) {
    RV_CHECK_DIM(image.shape().size() == 3 && image.dim(0) == 3,
                 "permute_patches: image must be [3,S,S], got ", shape_str(image.shape()));
    int64_t S = image.dim(1);
    RV_CHECK_DIM(image.dim(2) == S, "permute_patches: image must be square");
    RV_CHECK_DIM(patch_side > 0 && S % patch_side == 0, "permute_patches: side ", S,
                 " not divisible by patch_side ", patch_side);
    int64_t g = S / patch_side, n = g * g;
    RV_CHECK_DIM((int64_t)perm.size() == n, "permute_patches: permutation has ", perm.size(),
                 " entries for ", n, " patches");
    std::vector<char> seen((size_t)n, 0);
    for (int64_t v : perm) {
        RV_CHECK_DIM(v >= 0 && v < n && !seen[(size_t)v],
                     "permute_patches: not a permutation of the patch indices");
        seen[(size_t)v] = 1;
    }

    std::vector<T> out(image.data().size());
    for (int64_t q = 0; q < n; ++q) {
        int64_t src = perm[(size_t)q];
        int64_t oy = (q / g) * patch_side, ox = (q % g) * patch_side;
        int64_t sy = (src / g) * patch_side, sx = (src % g) * patch_side;
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < patch_side; ++y)
                for (int64_t x = 0; x < patch_side; ++x)
                    out[(size_t)(((c * S) + oy + y) * S + ox + x)] =
                        image.data()[(size_t)(((c * S) + sy + y) * S + sx + x)];
    }
    return Tensor<T>(image.shape(), std::move(out));
}

template <typename T>
Tensor<T> permute_patches(const Tensor<T>& image, int patch_side, uint64_t seed) {
    int64_t S = image.shape().size() == 3 ? image.dim(1) : 0;
    RV_CHECK_DIM(S > 0 && patch_side > 0 && S % patch_side == 0, "permute_patches: bad geometry");
    int64_t g = S / patch_side;
    return permute_patches(image, patch_side, Rng(seed).permutation(g * g));
}

template <typename T>
Tensor<T> translocate(const Tensor<T>& image, int dx, int dy) {
    RV_CHECK_DIM(image.shape().size() == 3 && image.dim(0) == 3,
                 "translocate: image must be [3,S,S], got ", shape_str(image.shape()));
    int64_t S = image.dim(1);
    RV_CHECK_DIM(image.dim(2) == S, "translocate: image must be square");
    RV_CHECK_CFG(std::abs(dx) < S && std::abs(dy) < S, "translocate: offsets (", dx, ",", dy,
                 ") out of range for side ", S);
    std::vector<T> out(image.data().size(), (T)0);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < S; ++y) {
            int64_t sy = y - dy;
            if (sy < 0 || sy >= S) continue;
            for (int64_t x = 0; x < S; ++x) {
                int64_t sx = x - dx;
                if (sx < 0 || sx >= S) continue;
                out[(size_t)((c * S + y) * S + x)] = image.data()[(size_t)((c * S + sy) * S + sx)];
            }
        }
    return Tensor<T>(image.shape(), std::move(out));
}

namespace {

// Top-1 percentage over the test list, with `mutate(i, pair)` applied to
// each sample's inputs before batching.
template <typename T, typename Mutate>
double eval_top1(const RveRNetModel<T>& model, const std::vector<CutoutPair<T>>& test,
                 int eval_batch, Mutate&& mutate) {
    NoGradGuard ng;
    int64_t correct = 0;
    std::vector<CutoutPair<T>> scratch;
    for (size_t from = 0; from < test.size(); from += (size_t)eval_batch) {
        size_t to = std::min(test.size(), from + (size_t)eval_batch);
        scratch.assign(test.begin() + (int64_t)from, test.begin() + (int64_t)to);
        for (size_t i = 0; i < scratch.size(); ++i) mutate(from + i, scratch[i]);
        auto batch =
            stack_pairs(scratch, 0, scratch.size(), model.has_roi(), model.has_xroi());
        auto pred = argmax_rows(model.logits(batch.x1, batch.x2));
        for (size_t i = 0; i < scratch.size(); ++i)
            if (pred[i] == scratch[i].label) ++correct;
    }
    return 100.0 * (double)correct / (double)test.size();
}

}  // namespace

template <typename T>
DeclineReport perturbation_eval(const RveRNetModel<T>& model,
                                const std::vector<CutoutPair<T>>& test,
                                const std::vector<PerturbSpec>& specs, int eval_batch) {
    RV_CHECK_CFG(!test.empty(), "perturbation_eval: empty test set");
    RV_CHECK_CFG(eval_batch > 0, "perturbation_eval: eval_batch must be positive");

    DeclineReport report;
    report.roi_kind = model.has_roi() ? to_string(model.roi_backbone().config().kind) : "-";
    report.xroi_kind = model.has_xroi() ? to_string(model.xroi_backbone().config().kind) : "-";
    report.baseline_top1 =
        eval_top1(model, test, eval_batch, [](size_t, CutoutPair<T>&) {});

    for (const auto& spec : specs) {
        PerturbTarget target = target_of(spec);
        bool hit_roi = target != PerturbTarget::xroi;
        bool hit_xroi = target != PerturbTarget::roi;
        double top1;
        if (std::holds_alternative<PermutationSpec>(spec)) {
            const auto& p = std::get<PermutationSpec>(spec);
            Rng stream(p.seed);
            top1 = eval_top1(model, test, eval_batch, [&](size_t i, CutoutPair<T>& pair) {
                int64_t S = pair.x1.dim(1);
                RV_CHECK_DIM(p.patch_side > 0 && S % p.patch_side == 0, "permutation spec: side ",
                             S, " not divisible by patch_side ", p.patch_side);
                int64_t g = S / p.patch_side;
                auto perm = stream.split((uint64_t)i).permutation(g * g);
                if (hit_roi) pair.x1 = permute_patches(pair.x1, p.patch_side, perm);
                if (hit_xroi) pair.x2 = permute_patches(pair.x2, p.patch_side, perm);
            });
        } else {
            const auto& t = std::get<TranslocationSpec>(spec);
            top1 = eval_top1(model, test, eval_batch, [&](size_t, CutoutPair<T>& pair) {
                if (hit_roi) pair.x1 = translocate(pair.x1, t.dx, t.dy);
                if (hit_xroi) pair.x2 = translocate(pair.x2, t.dx, t.dy);
            });
        }
        DeclineRow row;
        row.spec = spec;
        row.perturbed_top1 = top1;
        row.delta = top1 - report.baseline_top1;
        report.rows.push_back(row);
    }
    return report;
}

json report_to_json(const DeclineReport& report) {
    json rows = json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"spec", describe(r.spec)},
                        {"target", to_string(target_of(r.spec))},
                        {"perturbed_top1", r.perturbed_top1},
                        {"delta", r.delta}});
    return {{"roi_kind", report.roi_kind},
            {"xroi_kind", report.xroi_kind},
            {"baseline_top1", report.baseline_top1},
            {"rows", rows}};
}

std::string report_to_csv(const DeclineReport& report) {
    std::ostringstream os;
    os << "roi_kind,xroi_kind,spec,target,baseline_top1,perturbed_top1,delta\n";
    for (const auto& r : report.rows)
        os << report.roi_kind << ',' << report.xroi_kind << ',' << describe(r.spec) << ','
           << to_string(target_of(r.spec)) << ',' << report.baseline_top1 << ','
           << r.perturbed_top1 << ',' << r.delta << '\n';
    return os.str();
}

std::vector<AggregateRow> aggregate_by_architecture(const std::vector<DeclineReport>& reports) {
    std::vector<AggregateRow> rows;
    auto cell = [&](const DeclineReport& rep, const std::string& spec) -> AggregateRow& {
        for (auto& r : rows)
            if (r.roi_kind == rep.roi_kind && r.xroi_kind == rep.xroi_kind && r.spec == spec)
                return r;
        rows.push_back({rep.roi_kind, rep.xroi_kind, spec, 0.0, 0.0, 0.0, 0});
        return rows.back();
    };
    for (const auto& rep : reports)
        for (const auto& r : rep.rows) {
            auto& c = cell(rep, describe(r.spec));
            c.mean_baseline += rep.baseline_top1;
            c.mean_perturbed += r.perturbed_top1;
            c.mean_delta += r.delta;
            c.count += 1;
        }
    for (auto& r : rows) {
        r.mean_baseline /= r.count;
        r.mean_perturbed /= r.count;
        r.mean_delta /= r.count;
    }
    return rows;
}

json aggregate_to_json(const std::vector<AggregateRow>& rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"roi_kind", r.roi_kind},
                       {"xroi_kind", r.xroi_kind},
                       {"spec", r.spec},
                       {"mean_baseline", r.mean_baseline},
                       {"mean_perturbed", r.mean_perturbed},
                       {"mean_delta", r.mean_delta},
                       {"count", r.count}});
    return out;
}

std::string aggregate_to_csv(const std::vector<AggregateRow>& rows) {
    std::ostringstream os;
    os << "roi_kind,xroi_kind,spec,mean_baseline,mean_perturbed,mean_delta,count\n";
    for (const auto& r : rows)
        os << r.roi_kind << ',' << r.xroi_kind << ',' << r.spec << ',' << r.mean_baseline << ','
           << r.mean_perturbed << ',' << r.mean_delta << ',' << r.count << '\n';
    return os.str();
}

template Tensor<float> permute_patches(const Tensor<float>&, int, const std::vector<int64_t>&);
template Tensor<double> permute_patches(const Tensor<double>&, int, const std::vector<int64_t>&);
template Tensor<float> permute_patches(const Tensor<float>&, int, uint64_t);
template Tensor<double> permute_patches(const Tensor<double>&, int, uint64_t);
template Tensor<float> translocate(const Tensor<float>&, int, int);
template Tensor<double> translocate(const Tensor<double>&, int, int);
template DeclineReport perturbation_eval(const RveRNetModel<float>&,
                                         const std::vector<CutoutPair<float>>&,
                                         const std::vector<PerturbSpec>&, int);
template DeclineReport perturbation_eval(const RveRNetModel<double>&,
                                         const std::vector<CutoutPair<double>>&,
                                         const std::vector<PerturbSpec>&, int);

}  // namespace rvernet
