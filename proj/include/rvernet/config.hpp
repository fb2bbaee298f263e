// Experiment configuration: one JSON file describing dataset, model, training
// recipe, perturbation protocol, and heatmap requests. Parsing rejects
// unknown keys at every level and validates before any command does work.
//
// One global seed drives dataset synthesis, model init, and training; the
// dataset and train sections therefore accept no seed of their own.
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "rvernet/backbones.hpp"
#include "rvernet/data.hpp"
#include "rvernet/gradcam.hpp"
#include "rvernet/model.hpp"
#include "rvernet/perturb.hpp"
#include "rvernet/train.hpp"

namespace rvernet {

// Exactly one source: an inline synthetic spec or a manifest on disk.
struct DatasetSection {
    std::optional<SyntheticSpec> synthetic;
    std::optional<std::string> manifest;
    std::set<int> exclude_classes;
};

// Backbone image_side is not a config key: commands copy the dataset's side
// into both branch configs before building the model.
struct ModelSection {
    BackboneConfig roi;
    BackboneConfig xroi;
    ModelMode mode = ModelMode::both;
    int hidden = 64;
    int num_classes = 0;  // 0 = derive from the dataset
};

// Placeholder for the stock translocation offsets, which scale with the
// dataset's image side and so stay symbolic until that side is known.
struct DefaultTranslocations {
    PerturbTarget target = PerturbTarget::xroi;
};

using PerturbEntry = std::variant<PermutationSpec, TranslocationSpec, DefaultTranslocations>;

struct GradcamSection {
    std::vector<std::string> sample_ids;
    BranchSel branch = BranchSel::roi;
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::string dtype = "f32";  // "f32" | "f64"
    std::string out;
    DatasetSection dataset;
    ModelSection model;
    TrainConfig train;
    std::vector<PerturbEntry> perturb;
    std::optional<GradcamSection> gradcam;

    // Re-points every derived stream at `s` (used by the --seed override).
    void set_seed(uint64_t s);

    // Checks everything knowable without the dataset; side-dependent
    // constraints (patch divisibility, excluded-class range) are re-checked
    // by commands after the dataset is loaded but before any output.
    void validate() const;
};

// The out-of-the-box perturbation protocol: one 16-pixel patch permutation
// of the ROI input plus the three stock translocations of the context input.
std::vector<PerturbEntry> stock_perturb_entries();

// Expands symbolic entries against the dataset's image side.
std::vector<PerturbSpec> resolve_perturb(const std::vector<PerturbEntry>& entries, int image_side);

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

// Inverse of parse_config; commands write the result next to their outputs
// so a run records the exact configuration that produced it.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Backbone round trip for checkpoint architecture blocks. backbone_to_json
// omits image_side (a dataset property); backbone_from_json accepts it.
nlohmann::json backbone_to_json(const BackboneConfig& b);
BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& where);

}  // namespace rvernet
