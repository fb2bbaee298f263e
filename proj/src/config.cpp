// JSON experiment configuration: strict key checking, typed extraction with
// path-qualified error messages, and symmetric serialization.
#include "rvernet/config.hpp"

#include <fstream>

namespace rvernet {

namespace {

using nlohmann::json;

void require_object(const json& j, const std::string& where) {
    RV_CHECK_CFG(j.is_object(), "config: ", where, " must be a JSON object");
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known = known || it.key() == k;
        RV_CHECK_CFG(known, "config: unknown key \"", it.key(), "\" in ", where);
    }
}

int64_t get_int(const json& j, const std::string& where, const char* key, int64_t def) {
    if (!j.contains(key)) return def;
    const json& v = j.at(key);
    RV_CHECK_CFG(v.is_number_integer(), "config: ", where, ".", key, " must be an integer");
    return v.get<int64_t>();
}

double get_double(const json& j, const std::string& where, const char* key, double def) {
    if (!j.contains(key)) return def;
    const json& v = j.at(key);
    RV_CHECK_CFG(v.is_number(), "config: ", where, ".", key, " must be a number");
    return v.get<double>();
}

bool get_bool(const json& j, const std::string& where, const char* key, bool def) {
    if (!j.contains(key)) return def;
    const json& v = j.at(key);
    RV_CHECK_CFG(v.is_boolean(), "config: ", where, ".", key, " must be a boolean");
    return v.get<bool>();
}

std::string get_string(const json& j, const std::string& where, const char* key,
                       const std::string& def) {
    if (!j.contains(key)) return def;
    const json& v = j.at(key);
    RV_CHECK_CFG(v.is_string(), "config: ", where, ".", key, " must be a string");
    return v.get<std::string>();
}

// Accepts any non-negative integer representation (parsed literals are
// unsigned, programmatically built values may be signed).
uint64_t get_seed(const json& j, const std::string& where, const char* key, uint64_t def) {
    if (!j.contains(key)) return def;
    const json& v = j.at(key);
    if (v.is_number_unsigned()) return v.get<uint64_t>();
    RV_CHECK_CFG(v.is_number_integer() && v.get<int64_t>() >= 0, "config: ", where, ".", key,
                 " must be a non-negative integer");
    return (uint64_t)v.get<int64_t>();
}

std::vector<int> get_int_array(const json& j, const std::string& where, const char* key) {
    if (!j.contains(key)) return {};
    const json& v = j.at(key);
    RV_CHECK_CFG(v.is_array(), "config: ", where, ".", key, " must be an array of integers");
    std::vector<int> out;
    for (const json& e : v) {
        RV_CHECK_CFG(e.is_number_integer(), "config: ", where, ".", key,
                     " must contain only integers");
        out.push_back(e.get<int>());
    }
    return out;
}

SyntheticSpec parse_synthetic(const json& j) {
    require_object(j, "dataset.synthetic");
    check_keys(j, "dataset.synthetic",
               {"image_side", "num_classes", "ambiguous_a", "ambiguous_b", "train_per_class",
                "test_per_class", "noise_std"});
    SyntheticSpec s;
    s.image_side = (int)get_int(j, "dataset.synthetic", "image_side", s.image_side);
    s.num_classes = (int)get_int(j, "dataset.synthetic", "num_classes", s.num_classes);
    s.ambiguous_a = (int)get_int(j, "dataset.synthetic", "ambiguous_a", s.ambiguous_a);
    s.ambiguous_b = (int)get_int(j, "dataset.synthetic", "ambiguous_b", s.ambiguous_b);
    s.train_per_class = (int)get_int(j, "dataset.synthetic", "train_per_class", s.train_per_class);
    s.test_per_class = (int)get_int(j, "dataset.synthetic", "test_per_class", s.test_per_class);
    s.noise_std = get_double(j, "dataset.synthetic", "noise_std", s.noise_std);
    return s;
}

DatasetSection parse_dataset(const json& j) {
    require_object(j, "dataset");
    check_keys(j, "dataset", {"synthetic", "manifest", "exclude_classes"});
    DatasetSection d;
    if (j.contains("synthetic")) d.synthetic = parse_synthetic(j.at("synthetic"));
    if (j.contains("manifest")) d.manifest = get_string(j, "dataset", "manifest", "");
    for (int c : get_int_array(j, "dataset", "exclude_classes")) d.exclude_classes.insert(c);
    if (!d.synthetic && !d.manifest) d.synthetic = SyntheticSpec{};
    return d;
}

BackboneConfig parse_backbone_fields(const json& j, const std::string& where) {
    BackboneConfig b;
    b.kind = backbone_kind_from_string(get_string(j, where, "kind", to_string(b.kind)));
    b.feature_dim = (int)get_int(j, where, "feature_dim", b.feature_dim);
    b.depth = (int)get_int(j, where, "depth", b.depth);
    b.width = (int)get_int(j, where, "width", b.width);
    b.heads = (int)get_int(j, where, "heads", b.heads);
    b.patch_size = (int)get_int(j, where, "patch_size", b.patch_size);
    b.use_pos_embed = get_bool(j, where, "use_pos_embed", b.use_pos_embed);
    return b;
}

// Config flavor: image_side comes from the dataset, never from the file.
BackboneConfig parse_backbone(const json& j, const std::string& where) {
    require_object(j, where);
    check_keys(j, where,
               {"kind", "feature_dim", "depth", "width", "heads", "patch_size", "use_pos_embed"});
    return parse_backbone_fields(j, where);
}

ModelSection parse_model(const json& j) {
    require_object(j, "model");
    check_keys(j, "model", {"roi", "xroi", "mode", "hidden", "num_classes"});
    ModelSection m;
    if (j.contains("roi")) m.roi = parse_backbone(j.at("roi"), "model.roi");
    if (j.contains("xroi")) m.xroi = parse_backbone(j.at("xroi"), "model.xroi");
    m.mode = model_mode_from_string(get_string(j, "model", "mode", to_string(m.mode)));
    m.hidden = (int)get_int(j, "model", "hidden", m.hidden);
    m.num_classes = (int)get_int(j, "model", "num_classes", m.num_classes);
    return m;
}

TrainConfig parse_train(const json& j) {
    require_object(j, "train");
    check_keys(j, "train",
               {"lr0", "batch_size", "epochs", "warmup_epochs", "label_smoothing", "flip_p",
                "distill", "subset_classes"});
    TrainConfig t;
    t.lr0 = get_double(j, "train", "lr0", t.lr0);
    t.batch_size = (int)get_int(j, "train", "batch_size", t.batch_size);
    t.epochs = (int)get_int(j, "train", "epochs", t.epochs);
    t.warmup_epochs = (int)get_int(j, "train", "warmup_epochs", t.warmup_epochs);
    t.label_smoothing = get_double(j, "train", "label_smoothing", t.label_smoothing);
    t.flip_p = get_double(j, "train", "flip_p", t.flip_p);
    if (j.contains("distill")) {
        const json& d = j.at("distill");
        require_object(d, "train.distill");
        check_keys(d, "train.distill", {"teacher_checkpoint", "lambda"});
        RV_CHECK_CFG(d.contains("teacher_checkpoint"),
                     "config: train.distill needs a teacher_checkpoint");
        DistillSettings ds;
        ds.teacher_checkpoint = get_string(d, "train.distill", "teacher_checkpoint", "");
        ds.lambda = get_double(d, "train.distill", "lambda", ds.lambda);
        t.distill = ds;
    }
    t.subset_classes = get_int_array(j, "train", "subset_classes");
    return t;
}

PerturbEntry parse_perturb_entry(const json& j, const std::string& where) {
    require_object(j, where);
    RV_CHECK_CFG(j.contains("type"), "config: ", where, " needs a type");
    std::string type = get_string(j, where, "type", "");
    if (type == "permutation") {
        check_keys(j, where, {"type", "patch_side", "seed", "target"});
        PermutationSpec p;
        p.patch_side = (int)get_int(j, where, "patch_side", p.patch_side);
        p.seed = get_seed(j, where, "seed", p.seed);
        p.target = perturb_target_from_string(get_string(j, where, "target", to_string(p.target)));
        return p;
    }
    if (type == "translocation") {
        check_keys(j, where, {"type", "dx", "dy", "target"});
        RV_CHECK_CFG(j.contains("dx") && j.contains("dy"), "config: ", where,
                     " needs dx and dy offsets");
        TranslocationSpec t;
        t.dx = (int)get_int(j, where, "dx", 0);
        t.dy = (int)get_int(j, where, "dy", 0);
        t.target = perturb_target_from_string(get_string(j, where, "target", to_string(t.target)));
        return t;
    }
    if (type == "default_translocations") {
        check_keys(j, where, {"type", "target"});
        DefaultTranslocations d;
        d.target = perturb_target_from_string(get_string(j, where, "target", to_string(d.target)));
        return d;
    }
    throw ConfigError(strcat_msg("config: ", where, ": unknown perturbation type \"", type, "\""));
}

GradcamSection parse_gradcam(const json& j) {
    require_object(j, "gradcam");
    check_keys(j, "gradcam", {"sample_ids", "branch"});
    GradcamSection g;
    if (j.contains("sample_ids")) {
        const json& v = j.at("sample_ids");
        RV_CHECK_CFG(v.is_array(), "config: gradcam.sample_ids must be an array of strings");
        for (const json& e : v) {
            RV_CHECK_CFG(e.is_string(), "config: gradcam.sample_ids must contain only strings");
            g.sample_ids.push_back(e.get<std::string>());
        }
    }
    g.branch = branch_sel_from_string(get_string(j, "gradcam", "branch", to_string(g.branch)));
    return g;
}

// Validates the side-independent constraints of a branch config by giving it
// a side every kind accepts; commands re-validate with the dataset's side.
void check_backbone(const BackboneConfig& b, const char* which) {
    BackboneConfig probe = b;
    probe.image_side = b.is_patch_based() ? 4 * std::max(1, b.patch_size) : 64;
    try {
        probe.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(strcat_msg("config: model.", which, ": ", e.what()));
    }
}

json perturb_entry_to_json(const PerturbEntry& e) {
    json j;
    if (const auto* p = std::get_if<PermutationSpec>(&e)) {
        j["type"] = "permutation";
        j["patch_side"] = p->patch_side;
        j["seed"] = p->seed;
        j["target"] = to_string(p->target);
    } else if (const auto* t = std::get_if<TranslocationSpec>(&e)) {
        j["type"] = "translocation";
        j["dx"] = t->dx;
        j["dy"] = t->dy;
        j["target"] = to_string(t->target);
    } else {
        j["type"] = "default_translocations";
        j["target"] = to_string(std::get<DefaultTranslocations>(e).target);
    }
    return j;
}

}  // namespace

nlohmann::json backbone_to_json(const BackboneConfig& b) {
    json j;
    j["kind"] = to_string(b.kind);
    j["feature_dim"] = b.feature_dim;
    j["depth"] = b.depth;
    j["width"] = b.width;
    j["heads"] = b.heads;
    j["patch_size"] = b.patch_size;
    j["use_pos_embed"] = b.use_pos_embed;
    return j;
}

BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& where) {
    require_object(j, where);
    check_keys(j, where,
               {"kind", "feature_dim", "depth", "width", "heads", "patch_size", "use_pos_embed",
                "image_side"});
    BackboneConfig b = parse_backbone_fields(j, where);
    b.image_side = (int)get_int(j, where, "image_side", b.image_side);
    return b;
}

void ExperimentConfig::set_seed(uint64_t s) {
    seed = s;
    if (dataset.synthetic) dataset.synthetic->seed = s;
    train.seed = s;
}

void ExperimentConfig::validate() const {
    RV_CHECK_CFG(dtype == "f32" || dtype == "f64", "config: dtype must be \"f32\" or \"f64\", got \"",
                 dtype, "\"");
    RV_CHECK_CFG(!out.empty(), "config: out must name an output directory");
    RV_CHECK_CFG(!(dataset.synthetic && dataset.manifest),
                 "config: dataset must name exactly one of synthetic/manifest");
    RV_CHECK_CFG(dataset.synthetic || dataset.manifest,
                 "config: dataset names neither synthetic nor manifest");
    if (dataset.synthetic) validate_spec(*dataset.synthetic);
    if (dataset.manifest)
        RV_CHECK_CFG(!dataset.manifest->empty(), "config: dataset.manifest must be a path");
    for (int c : dataset.exclude_classes)
        RV_CHECK_CFG(c >= 0, "config: exclude_classes entries must be >= 0, got ", c);

    RV_CHECK_CFG(model.hidden > 0, "config: model.hidden must be positive");
    RV_CHECK_CFG(model.num_classes >= 0,
                 "config: model.num_classes must be >= 0 (0 derives it from the dataset)");
    if (model.mode != ModelMode::xroi_only) check_backbone(model.roi, "roi");
    if (model.mode != ModelMode::roi_only) check_backbone(model.xroi, "xroi");

    train.validate();

    for (size_t i = 0; i < perturb.size(); ++i)
        if (const auto* p = std::get_if<PermutationSpec>(&perturb[i]))
            RV_CHECK_CFG(p->patch_side >= 1, "config: perturb[", i,
                         "].patch_side must be >= 1, got ", p->patch_side);
}

std::vector<PerturbEntry> stock_perturb_entries() {
    return {PermutationSpec{16, 0, PerturbTarget::roi},
            DefaultTranslocations{PerturbTarget::xroi}};
}

std::vector<PerturbSpec> resolve_perturb(const std::vector<PerturbEntry>& entries,
                                         int image_side) {
    std::vector<PerturbSpec> out;
    for (const auto& e : entries) {
        if (const auto* p = std::get_if<PermutationSpec>(&e)) {
            out.push_back(*p);
        } else if (const auto* t = std::get_if<TranslocationSpec>(&e)) {
            out.push_back(*t);
        } else {
            auto target = std::get<DefaultTranslocations>(e).target;
            for (const auto& t2 : default_translocations(image_side, target)) out.push_back(t2);
        }
    }
    return out;
}

ExperimentConfig parse_config(const nlohmann::json& j) {
    require_object(j, "top level");
    check_keys(j, "top level",
               {"seed", "dtype", "out", "dataset", "model", "train", "perturb", "gradcam"});
    ExperimentConfig cfg;
    cfg.seed = get_seed(j, "top level", "seed", 0);
    cfg.dtype = get_string(j, "top level", "dtype", cfg.dtype);
    RV_CHECK_CFG(j.contains("out"), "config: missing required key \"out\"");
    cfg.out = get_string(j, "top level", "out", "");

    cfg.dataset = j.contains("dataset") ? parse_dataset(j.at("dataset")) : parse_dataset(json::object());
    cfg.model = j.contains("model") ? parse_model(j.at("model")) : ModelSection{};
    cfg.train = j.contains("train") ? parse_train(j.at("train")) : TrainConfig{};

    if (j.contains("perturb")) {
        const json& v = j.at("perturb");
        RV_CHECK_CFG(v.is_array(), "config: perturb must be an array");
        for (size_t i = 0; i < v.size(); ++i)
            cfg.perturb.push_back(
                parse_perturb_entry(v[i], strcat_msg("perturb[", i, "]")));
    } else {
        cfg.perturb = stock_perturb_entries();
    }

    if (j.contains("gradcam")) cfg.gradcam = parse_gradcam(j.at("gradcam"));

    cfg.set_seed(cfg.seed);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    RV_CHECK_CFG(f.good(), "cannot open config ", path);
    json j = json::parse(f, nullptr, false);
    RV_CHECK_CFG(!j.is_discarded(), "invalid JSON in config ", path);
    return parse_config(j);
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["dtype"] = cfg.dtype;
    j["out"] = cfg.out;

    json d = json::object();
    if (cfg.dataset.synthetic) {
        const SyntheticSpec& s = *cfg.dataset.synthetic;
        d["synthetic"] = {{"image_side", s.image_side},
                          {"num_classes", s.num_classes},
                          {"ambiguous_a", s.ambiguous_a},
                          {"ambiguous_b", s.ambiguous_b},
                          {"train_per_class", s.train_per_class},
                          {"test_per_class", s.test_per_class},
                          {"noise_std", s.noise_std}};
    }
    if (cfg.dataset.manifest) d["manifest"] = *cfg.dataset.manifest;
    if (!cfg.dataset.exclude_classes.empty())
        d["exclude_classes"] = std::vector<int>(cfg.dataset.exclude_classes.begin(),
                                                cfg.dataset.exclude_classes.end());
    j["dataset"] = d;

    j["model"] = {{"roi", backbone_to_json(cfg.model.roi)},
                  {"xroi", backbone_to_json(cfg.model.xroi)},
                  {"mode", to_string(cfg.model.mode)},
                  {"hidden", cfg.model.hidden},
                  {"num_classes", cfg.model.num_classes}};

    json t = {{"lr0", cfg.train.lr0},
              {"batch_size", cfg.train.batch_size},
              {"epochs", cfg.train.epochs},
              {"warmup_epochs", cfg.train.warmup_epochs},
              {"label_smoothing", cfg.train.label_smoothing},
              {"flip_p", cfg.train.flip_p}};
    if (cfg.train.distill)
        t["distill"] = {{"teacher_checkpoint", cfg.train.distill->teacher_checkpoint},
                        {"lambda", cfg.train.distill->lambda}};
    if (!cfg.train.subset_classes.empty()) t["subset_classes"] = cfg.train.subset_classes;
    j["train"] = t;

    auto& plist = j["perturb"] = json::array();
    for (const auto& e : cfg.perturb) plist.push_back(perturb_entry_to_json(e));

    if (cfg.gradcam)
        j["gradcam"] = {{"sample_ids", cfg.gradcam->sample_ids},
                        {"branch", to_string(cfg.gradcam->branch)}};
    return j;
}

}  // namespace rvernet
