// Training recipe: Adam with linear-warmup + cosine-decay schedule, smoothed
// cross-entropy, optional hard distillation from a frozen teacher, shuffled
// mini-batches with flip augmentation, and per-epoch test metrics.
//
// Determinism: given the same seed, config, and thread-independent ops, the
// loop visits samples, draws augmentations, and applies updates in one fixed
// order, so f64 runs reproduce bitwise.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rvernet/data.hpp"
#include "rvernet/model.hpp"

namespace rvernet {

struct DistillSettings {
    std::string teacher_checkpoint;  // used by the CLI layer to locate the teacher
    double lambda = 0.5;
};

struct TrainConfig {
    double lr0 = 4e-3;
    int batch_size = 50;
    int epochs = 30;
    int warmup_epochs = 5;
    double label_smoothing = 0.1;
    double flip_p = 0.5;
    uint64_t seed = 0;
    std::optional<DistillSettings> distill;
    std::vector<int> subset_classes;  // tracked as subset F1 when nonempty

    void validate() const;
};

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double test_top1 = 0.0;    // percent
    double test_macro_f1 = 0.0;
    double subset_f1 = 0.0;    // meaningful iff history.has_subset
    double lr = 0.0;           // learning rate at the first step of the epoch
};

struct TrainHistory {
    bool has_subset = false;
    std::vector<EpochStats> epochs;
};

nlohmann::json history_to_json(const TrainHistory& h);
std::string history_to_csv(const TrainHistory& h);

// Linear warmup to lr0 over warmup_steps, then cosine decay to 0 across the
// remaining steps.
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr0);

// Bias-corrected Adam over named parameter lists. State is keyed by position
// and sized on first use; a parameter without a gradient is treated as
// having a zero gradient.
template <typename T>
class Adam {
public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr);
    int64_t t() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// (1-lambda) * smoothed CE of the class logits against the targets, plus
// lambda * plain CE of the distillation logits against the teacher's argmax.
// The teacher contributes hard labels only, so no gradient reaches it.
template <typename T>
Tensor<T> hard_distillation_loss(const Tensor<T>& student_cls_logits,
                                 const Tensor<T>& student_dist_logits,
                                 const Tensor<T>& teacher_logits, const std::vector<int>& targets,
                                 double label_smoothing, double lambda);

// Batched argmax predictions over cut-out pairs.
template <typename T>
std::vector<int> predict(const RveRNetModel<T>& model, const std::vector<CutoutPair<T>>& pairs,
                         int batch_size = 50);

// Trains in place. When cfg.distill is set, `teacher` must be non-null and
// the distillation term applies to every mini_deit branch of the model;
// models without a deit branch train on plain smoothed CE.
template <typename T>
TrainHistory train(RveRNetModel<T>& model, const Dataset<T>& data, const TrainConfig& cfg,
                   const RveRNetModel<T>* teacher = nullptr);

template <typename T>
struct DistillRun {
    RveRNetModel<T> teacher;
    RveRNetModel<T> student;
    TrainHistory teacher_history;
    TrainHistory student_history;
    double teacher_test_top1 = 0.0;  // percent
    bool teacher_above_chance = false;
    std::string tag = "mini_deit_distilled";
};

// Trains the CNN teacher, freezes it, then trains the DeiT student against
// the teacher's hard labels. A below-chance teacher is reported via
// teacher_above_chance but training proceeds.
template <typename T>
DistillRun<T> train_teacher_then_distill(const BackboneConfig& teacher_cfg,
                                         const BackboneConfig& student_cfg,
                                         const Dataset<T>& data, const TrainConfig& cfg,
                                         int num_classes, int hidden,
                                         ModelMode mode = ModelMode::roi_only);

}  // namespace rvernet
