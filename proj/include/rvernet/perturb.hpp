// Input perturbation operators (patch permutation, lossy translocation) and
// the harness measuring how much each branch's corruption costs in top-1.
#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "rvernet/data.hpp"
#include "rvernet/model.hpp"

namespace rvernet {

enum class PerturbTarget { roi, xroi, both };

const char* to_string(PerturbTarget t);
PerturbTarget perturb_target_from_string(const std::string& s);

// Patch permutation: rearranges non-overlapping patch_side x patch_side
// pixel blocks. The harness draws one permutation per image from a stream
// derived from `seed`, so equal seeds reproduce the exact evaluation.
struct PermutationSpec {
    int patch_side = 16;
    uint64_t seed = 0;
    PerturbTarget target = PerturbTarget::roi;
};

// Lossy shift by (dx right, dy down): shifted-out pixels are discarded and
// vacated pixels become black.
struct TranslocationSpec {
    int dx = 0;
    int dy = 0;
    PerturbTarget target = PerturbTarget::xroi;
};

using PerturbSpec = std::variant<PermutationSpec, TranslocationSpec>;

std::string describe(const PerturbSpec& spec);
PerturbTarget target_of(const PerturbSpec& spec);

// The stock translocation offsets, scaled from a 224-pixel reference frame
// to `image_side` and rounded: at side 64 they are (-9,18), (17,-24), (11,40).
std::vector<TranslocationSpec> default_translocations(int image_side,
                                                      PerturbTarget target = PerturbTarget::xroi);

// Rearranges patches so output block q is input block perm[q]; the
// permutation is applied identically to all channels.
template <typename T>
Tensor<T> permute_patches(const Tensor<T>& image, int patch_side,
                          const std::vector<int64_t>& perm);

template <typename T>
Tensor<T> permute_patches(const Tensor<T>& image, int patch_side, uint64_t seed);

template <typename T>
Tensor<T> translocate(const Tensor<T>& image, int dx, int dy);

struct DeclineRow {
    PerturbSpec spec;
    double perturbed_top1 = 0.0;
    double delta = 0.0;  // perturbed_top1 - baseline_top1
};

// Accuracies are top-1 percentages in [0,100]; declines are negative deltas
// in percentage points.
struct DeclineReport {
    std::string roi_kind;   // backbone kind name or "-" for a missing branch
    std::string xroi_kind;
    double baseline_top1 = 0.0;
    std::vector<DeclineRow> rows;
};

template <typename T>
DeclineReport perturbation_eval(const RveRNetModel<T>& model,
                                const std::vector<CutoutPair<T>>& test,
                                const std::vector<PerturbSpec>& specs, int eval_batch = 50);

nlohmann::json report_to_json(const DeclineReport& report);
std::string report_to_csv(const DeclineReport& report);

// Mean delta per (roi_kind, xroi_kind, spec description) across reports,
// e.g. across seeds. Rows appear in first-seen order.
struct AggregateRow {
    std::string roi_kind;
    std::string xroi_kind;
    std::string spec;
    double mean_baseline = 0.0;
    double mean_perturbed = 0.0;
    double mean_delta = 0.0;
    int count = 0;
};

std::vector<AggregateRow> aggregate_by_architecture(const std::vector<DeclineReport>& reports);
nlohmann::json aggregate_to_json(const std::vector<AggregateRow>& rows);
std::string aggregate_to_csv(const std::vector<AggregateRow>& rows);

}  // namespace rvernet
