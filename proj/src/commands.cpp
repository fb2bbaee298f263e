// Subcommand implementations. Shared discipline: configure and validate,
// fail fast on a non-empty output directory unless --force, compute
// everything, then write, so no failure path leaves partial artifacts.
#include "rvernet/commands.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <vector>

#include "rvernet/config.hpp"
#include "rvernet/gradcam.hpp"
#include "rvernet/metrics.hpp"
#include "rvernet/perturb.hpp"
#include "rvernet/train.hpp"

namespace rvernet {

namespace fs = std::filesystem;

namespace {

using nlohmann::json;

ExperimentConfig configure(const CommandOptions& opt) {
    RV_CHECK_CFG(!opt.config_path.empty(), "missing --config PATH");
    ExperimentConfig cfg = load_config(opt.config_path);
    if (opt.seed_override) cfg.set_seed(*opt.seed_override);
    if (!opt.out_override.empty()) cfg.out = opt.out_override;
    cfg.validate();
    return cfg;
}

void check_overwrite(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir))
        RV_CHECK_CFG(force, "output directory ", dir.string(),
                     " already has contents; pass --force to overwrite");
}

// Clears any previous artifacts so a rerun cannot mix generations.
fs::path fresh_dir(const fs::path& dir) {
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    RV_CHECK_CFG(f.good(), "cannot write ", p.string());
    f << s;
    RV_CHECK_CFG(f.good(), "write failed for ", p.string());
}

void write_json_file(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

template <typename T>
Dataset<T> resolve_dataset(const ExperimentConfig& cfg) {
    Dataset<T> d = cfg.dataset.synthetic ? generate_synthetic<T>(*cfg.dataset.synthetic)
                                         : load_dataset<T>(*cfg.dataset.manifest);
    if (!cfg.dataset.exclude_classes.empty()) {
        for (int c : cfg.dataset.exclude_classes)
            RV_CHECK_CFG(c < d.num_classes(), "config: exclude_classes entry ", c,
                         " is out of range for ", d.num_classes(), " classes");
        d = std::move(filter_classes(d, cfg.dataset.exclude_classes).data);
    }
    RV_CHECK_CFG(!d.samples.empty(), "dataset has no samples");
    return d;
}

template <typename T>
int image_side_of(const Dataset<T>& d) {
    return (int)d.samples[0].image.dim(1);
}

template <typename T>
RveRNetModel<T> build_model(const ExperimentConfig& cfg, int K, int side, ModelMode mode) {
    RV_CHECK_CFG(cfg.model.num_classes == 0 || cfg.model.num_classes == K,
                 "config: model.num_classes is ", cfg.model.num_classes, " but the dataset has ",
                 K, " classes");
    BackboneConfig roi = cfg.model.roi, xroi = cfg.model.xroi;
    roi.image_side = side;
    xroi.image_side = side;
    return build_rvernet<T>(roi, xroi, K, cfg.model.hidden, cfg.seed, mode);
}

json arch_meta(const ExperimentConfig& cfg, ModelMode mode, int K, int side) {
    json roi = backbone_to_json(cfg.model.roi);
    roi["image_side"] = side;
    json xroi = backbone_to_json(cfg.model.xroi);
    xroi["image_side"] = side;
    return {{"mode", to_string(mode)}, {"hidden", cfg.model.hidden}, {"num_classes", K},
            {"image_side", side}, {"roi", roi},  {"xroi", xroi}};
}

// Cross-checks the checkpoint's architecture block (when present) before the
// parameter loader turns a mismatch into a harder-to-read error.
template <typename T>
RveRNetModel<T> load_model(const ExperimentConfig& cfg, const std::string& ckpt, int K,
                           int side) {
    RV_CHECK_CFG(!ckpt.empty(), "this command needs --checkpoint PATH");
    RV_CHECK_CFG(fs::exists(ckpt), "checkpoint ", ckpt, " does not exist");
    json meta = checkpoint_meta(ckpt);
    if (!meta.empty()) {
        try {
            std::string mode = meta.value("mode", to_string(cfg.model.mode));
            RV_CHECK_CFG(mode == to_string(cfg.model.mode), "checkpoint ", ckpt,
                         " was trained in mode ", mode, "; the config says ",
                         to_string(cfg.model.mode));
            int ck = meta.value("num_classes", K);
            RV_CHECK_CFG(ck == K, "checkpoint ", ckpt, " expects ", ck, " classes, dataset has ",
                         K);
            int cside = meta.value("image_side", side);
            RV_CHECK_CFG(cside == side, "checkpoint ", ckpt, " was trained at image side ", cside,
                         ", dataset is ", side);
        } catch (const json::exception&) {
            throw ConfigError(strcat_msg("checkpoint ", ckpt, " has a malformed architecture block"));
        }
    }
    auto model = build_model<T>(cfg, K, side, cfg.model.mode);
    model.load(ckpt);
    return model;
}

// Teachers are rebuilt entirely from their checkpoint's architecture block,
// so the student config never has to restate the teacher.
template <typename T>
RveRNetModel<T> load_teacher(const std::string& path, int K, int side) {
    RV_CHECK_CFG(fs::exists(path), "teacher checkpoint ", path, " does not exist");
    json meta = checkpoint_meta(path);
    RV_CHECK_CFG(meta.contains("mode") && meta.contains("roi") && meta.contains("xroi"),
                 "teacher checkpoint ", path,
                 " carries no architecture block; train the teacher with this tool first");
    try {
        ModelMode mode = model_mode_from_string(meta.at("mode").get<std::string>());
        int tK = meta.value("num_classes", 0);
        int tside = meta.value("image_side", 0);
        int hidden = meta.value("hidden", 64);
        RV_CHECK_CFG(tK == K, "teacher checkpoint ", path, " expects ", tK,
                     " classes, dataset has ", K);
        RV_CHECK_CFG(tside == side, "teacher checkpoint ", path, " was trained at image side ",
                     tside, ", dataset is ", side);
        BackboneConfig roi = backbone_from_json(meta.at("roi"), "teacher.roi");
        BackboneConfig xroi = backbone_from_json(meta.at("xroi"), "teacher.xroi");
        auto teacher = build_rvernet<T>(roi, xroi, tK, hidden, 0, mode);
        teacher.load(path);
        return teacher;
    } catch (const json::exception&) {
        throw ConfigError(strcat_msg("teacher checkpoint ", path,
                                     " has a malformed architecture block"));
    }
}

template <typename T>
std::pair<std::vector<CutoutPair<T>>, std::vector<int>> cutouts_of(const Dataset<T>& d,
                                                                   const std::string& split) {
    std::vector<CutoutPair<T>> pairs;
    std::vector<int> targets;
    for (const auto* s : d.split(split)) {
        pairs.push_back(apply_mask(*s));
        targets.push_back(s->label);
    }
    return {std::move(pairs), std::move(targets)};
}

template <typename T>
void run_gen_data(const ExperimentConfig& cfg, const CommandOptions& opt) {
    RV_CHECK_CFG(cfg.dataset.synthetic.has_value(),
                 "gen-data needs a dataset.synthetic section, not a manifest");
    fs::path dir = cfg.out;
    check_overwrite(dir, opt.force);
    Dataset<T> data = generate_synthetic<T>(*cfg.dataset.synthetic);
    fresh_dir(dir);
    save_dataset(data, dir.string());
}

template <typename T>
void run_train(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path dir = fs::path(cfg.out) / "train";
    check_overwrite(dir, opt.force);
    Dataset<T> data = resolve_dataset<T>(cfg);
    int K = data.num_classes(), side = image_side_of(data);
    auto model = build_model<T>(cfg, K, side, cfg.model.mode);
    std::optional<RveRNetModel<T>> teacher;
    if (cfg.train.distill)
        teacher.emplace(load_teacher<T>(cfg.train.distill->teacher_checkpoint, K, side));
    TrainHistory hist = train(model, data, cfg.train, teacher ? &*teacher : nullptr);
    fresh_dir(dir);
    save_checkpoint((dir / "checkpoint.bin").string(), model.named_parameters(),
                    arch_meta(cfg, cfg.model.mode, K, side));
    write_json_file(dir / "history.json", history_to_json(hist));
    write_text(dir / "history.csv", history_to_csv(hist));
    write_json_file(dir / "config.json", config_to_json(cfg));
}

template <typename T>
void run_eval(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path dir = fs::path(cfg.out) / "eval";
    check_overwrite(dir, opt.force);
    Dataset<T> data = resolve_dataset<T>(cfg);
    int K = data.num_classes(), side = image_side_of(data);
    auto model = load_model<T>(cfg, opt.checkpoint, K, side);
    std::set<int> subset(cfg.train.subset_classes.begin(), cfg.train.subset_classes.end());

    json by_split = json::object();
    std::ostringstream csv;
    csv.precision(17);
    csv << "split,top1,macro_f1,subset_f1\n";
    for (const char* split : {"train", "test"}) {
        auto [pairs, targets] = cutouts_of(data, split);
        if (pairs.empty()) continue;
        auto preds = predict(model, pairs);
        MetricsReport m = compute_metrics(preds, targets, K, subset);
        by_split[split] = metrics_to_json(m);
        csv << split << ',' << m.top1 << ',' << m.macro_f1 << ',';
        if (!m.subset_classes.empty()) csv << m.subset_f1;
        csv << '\n';
    }
    RV_CHECK_CFG(!by_split.empty(), "eval: dataset has neither train nor test samples");

    fresh_dir(dir);
    write_json_file(dir / "metrics.json", by_split);
    write_text(dir / "metrics.csv", csv.str());
    write_json_file(dir / "config.json", config_to_json(cfg));
}

template <typename T>
void run_perturb(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path dir = fs::path(cfg.out) / "perturb";
    check_overwrite(dir, opt.force);
    Dataset<T> data = resolve_dataset<T>(cfg);
    int K = data.num_classes(), side = image_side_of(data);
    auto model = load_model<T>(cfg, opt.checkpoint, K, side);
    auto [test, targets] = cutouts_of(data, "test");
    RV_CHECK_CFG(!test.empty(), "perturb: dataset has no test split");
    DeclineReport rep = perturbation_eval(model, test, resolve_perturb(cfg.perturb, side));
    fresh_dir(dir);
    write_json_file(dir / "decline.json", report_to_json(rep));
    write_text(dir / "decline.csv", report_to_csv(rep));
    write_json_file(dir / "config.json", config_to_json(cfg));
}

template <typename T>
void run_ablate(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path dir = fs::path(cfg.out) / "ablate";
    check_overwrite(dir, opt.force);
    Dataset<T> data = resolve_dataset<T>(cfg);
    int K = data.num_classes(), side = image_side_of(data);
    std::optional<RveRNetModel<T>> teacher;
    if (cfg.train.distill)
        teacher.emplace(load_teacher<T>(cfg.train.distill->teacher_checkpoint, K, side));
    auto [test, targets] = cutouts_of(data, "test");
    RV_CHECK_CFG(!test.empty(), "ablate: dataset has no test split");
    std::set<int> subset(cfg.train.subset_classes.begin(), cfg.train.subset_classes.end());

    // All three legs share the dataset, the seed, and the training recipe;
    // only the mode differs, so the comparison isolates the branches.
    const ModelMode modes[] = {ModelMode::roi_only, ModelMode::xroi_only, ModelMode::both};
    std::vector<RveRNetModel<T>> models;
    std::vector<TrainHistory> histories;
    std::vector<TableRow> rows;
    for (ModelMode mode : modes) {
        auto model = build_model<T>(cfg, K, side, mode);
        histories.push_back(train(model, data, cfg.train, teacher ? &*teacher : nullptr));
        auto preds = predict(model, test);
        rows.push_back({to_string(mode), compute_metrics(preds, targets, K, subset)});
        models.push_back(std::move(model));
    }

    fresh_dir(dir);
    for (size_t i = 0; i < models.size(); ++i) {
        fs::path leg = dir / to_string(modes[i]);
        fs::create_directories(leg);
        save_checkpoint((leg / "checkpoint.bin").string(), models[i].named_parameters(),
                        arch_meta(cfg, modes[i], K, side));
        write_json_file(leg / "history.json", history_to_json(histories[i]));
        write_text(leg / "history.csv", history_to_csv(histories[i]));
    }
    write_json_file(dir / "comparison.json", table_report_json(rows));
    write_text(dir / "comparison.csv", table_report_csv(rows));
    write_json_file(dir / "config.json", config_to_json(cfg));
}

template <typename T>
void run_gradcam(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path dir = fs::path(cfg.out) / "gradcam";
    check_overwrite(dir, opt.force);
    RV_CHECK_CFG(cfg.gradcam && !cfg.gradcam->sample_ids.empty(),
                 "gradcam needs a gradcam section with sample_ids");
    BranchSel branch = cfg.gradcam->branch;
    const BackboneConfig& bcfg = branch == BranchSel::roi ? cfg.model.roi : cfg.model.xroi;
    ModelMode missing = branch == BranchSel::roi ? ModelMode::xroi_only : ModelMode::roi_only;
    RV_CHECK_CFG(cfg.model.mode != missing, "gradcam: the model has no ", to_string(branch),
                 " branch in mode ", to_string(cfg.model.mode));
    RV_CHECK_CFG(bcfg.kind == BackboneKind::mini_cnn, "gradcam: ", to_string(branch),
                 " branch is ", to_string(bcfg.kind),
                 "; only mini_cnn produces class activation maps");

    Dataset<T> data = resolve_dataset<T>(cfg);
    int K = data.num_classes(), side = image_side_of(data);
    auto model = load_model<T>(cfg, opt.checkpoint, K, side);

    std::vector<Heatmap<T>> maps;
    std::vector<std::string> names;
    json rows = json::array();
    for (const std::string& id : cfg.gradcam->sample_ids) {
        const LabeledImage<T>* sample = nullptr;
        for (const auto& s : data.samples)
            if (s.id == id) { sample = &s; break; }
        RV_CHECK_CFG(sample, "gradcam: sample id \"", id, "\" is not in the dataset");
        CutoutPair<T> pair = apply_mask(*sample);
        int pred = predict(model, std::vector<CutoutPair<T>>{pair})[0];
        maps.push_back(gradcam(model, pair, pred, branch));
        names.push_back(id + "_" + to_string(branch) + ".png");
        rows.push_back({{"id", id},
                        {"branch", to_string(branch)},
                        {"class_idx", pred},
                        {"label", sample->label},
                        {"layer", maps.back().layer},
                        {"png", names.back()}});
    }

    fresh_dir(dir);
    for (size_t i = 0; i < maps.size(); ++i) save_heatmap_png(maps[i], side, (dir / names[i]).string());
    write_json_file(dir / "gradcam.json", json{{"maps", rows}});
    write_json_file(dir / "config.json", config_to_json(cfg));
}

std::optional<json> read_json_if_present(const fs::path& p) {
    if (!fs::exists(p)) return std::nullopt;
    std::ifstream f(p);
    RV_CHECK_CFG(f.good(), "cannot open ", p.string());
    json j = json::parse(f, nullptr, false);
    RV_CHECK_CFG(!j.is_discarded(), "invalid JSON in ", p.string());
    return j;
}

std::string fmt(double v, int places) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(places) << v;
    return os.str();
}

// Collects whatever artifact sets the other commands left under the output
// root into one summary; sections without artifacts are skipped.
void run_report(const ExperimentConfig& cfg, const CommandOptions& opt) {
    fs::path root = cfg.out;
    fs::path dir = root / "report";
    check_overwrite(dir, opt.force);

    json sections = json::object();
    std::ostringstream md;
    md << "# rvernet-lab report\n\nArtifacts under `" << root.string() << "`.\n";

    if (auto manifest = read_json_if_present(root / "manifest.json")) {
        json sec = {{"classes", manifest->at("classes").size()},
                    {"samples", manifest->at("samples").size()}};
        sections["dataset"] = sec;
        md << "\n## Dataset\n\n" << manifest->at("classes").size() << " classes, "
           << manifest->at("samples").size() << " samples (`manifest.json`).\n";
    }

    if (auto hist = read_json_if_present(root / "train" / "history.json")) {
        sections["train"] = *hist;
        md << "\n## Training\n\n";
        const json& epochs = hist->at("epochs");
        if (epochs.empty()) {
            md << "No epochs were run.\n";
        } else {
            md << "| epoch | train loss | test top-1 | test macro-F1 | lr |\n";
            md << "|---|---|---|---|---|\n";
            for (const json& e : epochs)
                md << "| " << e.at("epoch").get<int>() << " | "
                   << fmt(e.at("train_loss").get<double>(), 4) << " | "
                   << fmt(e.at("test_top1").get<double>(), 2) << " | "
                   << fmt(e.at("test_macro_f1").get<double>(), 4) << " | "
                   << fmt(e.at("lr").get<double>(), 6) << " |\n";
            const json& last = epochs.back();
            md << "\nFinal test top-1 " << fmt(last.at("test_top1").get<double>(), 2)
               << "%, macro-F1 " << fmt(last.at("test_macro_f1").get<double>(), 4) << ".\n";
        }
    }

    if (auto metrics = read_json_if_present(root / "eval" / "metrics.json")) {
        sections["eval"] = *metrics;
        md << "\n## Evaluation\n\n| split | top-1 | macro-F1 |\n|---|---|---|\n";
        for (auto it = metrics->begin(); it != metrics->end(); ++it)
            md << "| " << it.key() << " | " << fmt(it.value().at("top1").get<double>(), 2)
               << " | " << fmt(it.value().at("macro_f1").get<double>(), 4) << " |\n";
    }

    if (auto decline = read_json_if_present(root / "perturb" / "decline.json")) {
        sections["perturb"] = *decline;
        md << "\n## Perturbations\n\nBaseline top-1 "
           << fmt(decline->at("baseline_top1").get<double>(), 2) << "% (roi "
           << decline->at("roi_kind").get<std::string>() << ", xroi "
           << decline->at("xroi_kind").get<std::string>()
           << ").\n\n| perturbation | target | top-1 | delta |\n|---|---|---|---|\n";
        for (const json& r : decline->at("rows"))
            md << "| " << r.at("spec").get<std::string>() << " | "
               << r.at("target").get<std::string>() << " | "
               << fmt(r.at("perturbed_top1").get<double>(), 2) << " | "
               << fmt(r.at("delta").get<double>(), 2) << " |\n";
    }

    if (auto comparison = read_json_if_present(root / "ablate" / "comparison.json")) {
        sections["ablate"] = *comparison;
        md << "\n## Ablation\n\n| leg | top-1 | macro-F1 | best in | worst in |\n"
           << "|---|---|---|---|---|\n";
        for (const json& r : comparison->at("rows")) {
            auto join = [](const json& arr) {
                std::string s;
                for (const auto& v : arr) {
                    if (!s.empty()) s += ", ";
                    s += v.get<std::string>();
                }
                return s.empty() ? std::string("-") : s;
            };
            md << "| " << r.at("name").get<std::string>() << " | "
               << fmt(r.at("top1").get<double>(), 2) << " | "
               << fmt(r.at("macro_f1").get<double>(), 4) << " | " << join(r.at("best_in"))
               << " | " << join(r.at("worst_in")) << " |\n";
        }
    }

    if (auto gc = read_json_if_present(root / "gradcam" / "gradcam.json")) {
        sections["gradcam"] = *gc;
        md << "\n## Class activation maps\n\n";
        for (const json& r : gc->at("maps"))
            md << "- `" << r.at("png").get<std::string>() << "` (sample "
               << r.at("id").get<std::string>() << ", class " << r.at("class_idx").get<int>()
               << ")\n";
    }

    RV_CHECK_CFG(!sections.empty(), "report: no artifacts under ", root.string());

    fresh_dir(dir);
    write_json_file(dir / "report.json", json{{"out", root.string()}, {"sections", sections}});
    write_text(dir / "report.md", md.str());
}

}  // namespace

void cmd_gen_data(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_gen_data<double>(cfg, opt);
    else run_gen_data<float>(cfg, opt);
}

void cmd_train(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_train<double>(cfg, opt);
    else run_train<float>(cfg, opt);
}

void cmd_eval(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_eval<double>(cfg, opt);
    else run_eval<float>(cfg, opt);
}

void cmd_perturb(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_perturb<double>(cfg, opt);
    else run_perturb<float>(cfg, opt);
}

void cmd_ablate(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_ablate<double>(cfg, opt);
    else run_ablate<float>(cfg, opt);
}

void cmd_gradcam(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    if (cfg.dtype == "f64") run_gradcam<double>(cfg, opt);
    else run_gradcam<float>(cfg, opt);
}

void cmd_report(const CommandOptions& opt) {
    ExperimentConfig cfg = configure(opt);
    run_report(cfg, opt);
}

int run_cli(int argc, const char* const* argv) {
    static const char* usage =
        "usage: rvernet-lab <gen-data|train|eval|perturb|ablate|gradcam|report>"
        " --config PATH [--checkpoint PATH] [--out DIR] [--force] [--seed N]\n";
    if (argc < 2) {
        std::cerr << usage;
        return 2;
    }
    std::string cmd = argv[1];
    if (cmd == "--help" || cmd == "-h" || cmd == "help") {
        std::cout << usage;
        return 0;
    }
    try {
        CommandOptions opt;
        for (int i = 2; i < argc; ++i) {
            std::string a = argv[i];
            auto value = [&](const char* flag) -> std::string {
                RV_CHECK_CFG(i + 1 < argc, flag, " needs a value");
                return argv[++i];
            };
            if (a == "--config") {
                opt.config_path = value("--config");
            } else if (a == "--checkpoint") {
                opt.checkpoint = value("--checkpoint");
            } else if (a == "--out") {
                opt.out_override = value("--out");
            } else if (a == "--force") {
                opt.force = true;
            } else if (a == "--seed") {
                std::string v = value("--seed");
                uint64_t n = 0;
                auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
                RV_CHECK_CFG(ec == std::errc{} && p == v.data() + v.size(),
                             "--seed needs a non-negative integer, got \"", v, "\"");
                opt.seed_override = n;
            } else {
                RV_CHECK_CFG(false, "unknown flag ", a);
            }
        }
        if (cmd == "gen-data") cmd_gen_data(opt);
        else if (cmd == "train") cmd_train(opt);
        else if (cmd == "eval") cmd_eval(opt);
        else if (cmd == "perturb") cmd_perturb(opt);
        else if (cmd == "ablate") cmd_ablate(opt);
        else if (cmd == "gradcam") cmd_gradcam(opt);
        else if (cmd == "report") cmd_report(opt);
        else RV_CHECK_CFG(false, "unknown command \"", cmd, "\"\n", usage);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}

}  // namespace rvernet
