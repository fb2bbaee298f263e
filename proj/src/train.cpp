#include "rvernet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "rvernet/metrics.hpp"

using nlohmann::json;

namespace rvernet {

void TrainConfig::validate() const {
    RV_CHECK_CFG(lr0 > 0.0, "train config: lr0 must be positive, got ", lr0);
    RV_CHECK_CFG(batch_size >= 1, "train config: batch_size must be >= 1, got ", batch_size);
    RV_CHECK_CFG(epochs >= 0, "train config: epochs must be >= 0, got ", epochs);
    RV_CHECK_CFG(warmup_epochs >= 0 && warmup_epochs <= epochs,
                 "train config: warmup_epochs must lie in [0, epochs], got ", warmup_epochs,
                 " with ", epochs, " epochs");
    RV_CHECK_CFG(label_smoothing >= 0.0 && label_smoothing < 1.0,
                 "train config: label_smoothing must lie in [0,1), got ", label_smoothing);
    RV_CHECK_CFG(flip_p >= 0.0 && flip_p <= 1.0, "train config: flip_p must lie in [0,1], got ",
                 flip_p);
    if (distill)
        RV_CHECK_CFG(distill->lambda >= 0.0 && distill->lambda <= 1.0,
                     "train config: distillation lambda must lie in [0,1], got ",
                     distill->lambda);
    for (int c : subset_classes)
        RV_CHECK_CFG(c >= 0, "train config: negative subset class ", c);
}

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr0) {
    RV_CHECK_CFG(total_steps >= 1, "lr_schedule: total_steps must be >= 1");
    RV_CHECK_CFG(warmup_steps >= 0 && warmup_steps < total_steps,
                 "lr_schedule: warmup_steps (", warmup_steps, ") must be < total_steps (",
                 total_steps, ")");
    RV_CHECK_CFG(step >= 0 && step < total_steps, "lr_schedule: step ", step, " outside [0,",
                 total_steps, ")");
    if (step < warmup_steps) return lr0 * (double)(step + 1) / (double)warmup_steps;
    double progress = (double)(step - warmup_steps) / (double)(total_steps - warmup_steps);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
void Adam<T>::step(std::vector<std::pair<std::string, Tensor<T>>>& params, double lr) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            size_t n = params[i].second.data().size();
            m_[i].assign(n, (T)0);
            v_[i].assign(n, (T)0);
        }
    }
    RV_CHECK_DIM(m_.size() == params.size(), "adam: state tracks ", m_.size(),
                 " parameters but got ", params.size());
    t_ += 1;
    double bc1 = 1.0 - std::pow(beta1_, (double)t_);
    double bc2 = 1.0 - std::pow(beta2_, (double)t_);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].second;
        size_t n = p.data().size();
        RV_CHECK_DIM(m_[i].size() == n, "adam: parameter ", params[i].first,
                     " changed size under the optimizer");
        const T* g = p.has_grad() ? p.grad().data() : nullptr;
        auto& data = p.mutable_data();
        for (size_t j = 0; j < n; ++j) {
            double gj = g ? (double)g[j] : 0.0;
            double mj = beta1_ * (double)m_[i][j] + (1.0 - beta1_) * gj;
            double vj = beta2_ * (double)v_[i][j] + (1.0 - beta2_) * gj * gj;
            m_[i][j] = (T)mj;
            v_[i][j] = (T)vj;
            double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_);
            data[j] = (T)((double)data[j] - update);
        }
    }
}

template <typename T>
Tensor<T> hard_distillation_loss(const Tensor<T>& student_cls_logits,
                                 const Tensor<T>& student_dist_logits,
                                 const Tensor<T>& teacher_logits, const std::vector<int>& targets,
                                 double label_smoothing, double lambda) {
    RV_CHECK_CFG(lambda >= 0.0 && lambda <= 1.0, "hard_distillation_loss: lambda must lie in "
                                                 "[0,1], got ",
                 lambda);
    auto cls_term = [&] {
        return cross_entropy_label_smoothing(student_cls_logits, targets, (T)label_smoothing);
    };
    if (lambda == 0.0) return cls_term();
    RV_CHECK_DIM(student_dist_logits.shape() == student_cls_logits.shape(),
                 "hard_distillation_loss: dist logits ", shape_str(student_dist_logits.shape()),
                 " vs cls logits ", shape_str(student_cls_logits.shape()));
    RV_CHECK_DIM(teacher_logits.shape() == student_cls_logits.shape(),
                 "hard_distillation_loss: teacher logits ", shape_str(teacher_logits.shape()),
                 " vs student logits ", shape_str(student_cls_logits.shape()));
    auto hard = argmax_rows(teacher_logits);
    auto dist_ce = cross_entropy_label_smoothing(student_dist_logits, hard, (T)0);
    if (lambda == 1.0) return dist_ce;
    return add(scale(cls_term(), (T)(1.0 - lambda)), scale(dist_ce, (T)lambda));
}

template <typename T>
std::vector<int> predict(const RveRNetModel<T>& model, const std::vector<CutoutPair<T>>& pairs,
                         int batch_size) {
    RV_CHECK_CFG(batch_size >= 1, "predict: batch_size must be >= 1");
    NoGradGuard ng;
    std::vector<int> out;
    out.reserve(pairs.size());
    for (size_t from = 0; from < pairs.size(); from += (size_t)batch_size) {
        size_t to = std::min(pairs.size(), from + (size_t)batch_size);
        auto b = stack_pairs(pairs, from, to, model.has_roi(), model.has_xroi());
        auto pred = argmax_rows(model.logits(b.x1, b.x2));
        out.insert(out.end(), pred.begin(), pred.end());
    }
    return out;
}

namespace {

template <typename T>
std::vector<CutoutPair<T>> cutouts_of_split(const Dataset<T>& data, const std::string& which) {
    std::vector<CutoutPair<T>> out;
    for (const auto* s : data.split(which)) out.push_back(apply_mask(*s));
    return out;
}

}  // namespace

template <typename T>
TrainHistory train(RveRNetModel<T>& model, const Dataset<T>& data, const TrainConfig& cfg,
                   const RveRNetModel<T>* teacher) {
    cfg.validate();
    int K = model.num_classes();
    for (int c : cfg.subset_classes)
        RV_CHECK_CFG(c < K, "train config: subset class ", c, " outside [0,", K, ")");
    RV_CHECK_CFG(!cfg.distill || teacher != nullptr,
                 "train: distillation configured but no teacher provided");

    auto train_pairs = cutouts_of_split(data, "train");
    auto test_pairs = cutouts_of_split(data, "test");
    RV_CHECK_CFG(!train_pairs.empty(), "train: dataset has no train split");

    TrainHistory hist;
    hist.has_subset = !cfg.subset_classes.empty();
    if (cfg.epochs == 0) return hist;

    bool deit_heads = (model.has_roi() &&
                       model.roi_backbone().config().kind == BackboneKind::mini_deit) ||
                      (model.has_xroi() &&
                       model.xroi_backbone().config().kind == BackboneKind::mini_deit);
    double lambda = cfg.distill ? cfg.distill->lambda : 0.0;
    bool distill_active = cfg.distill && teacher && deit_heads && lambda > 0.0;

    int64_t n = (int64_t)train_pairs.size();
    int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
    int64_t total_steps = spe * cfg.epochs;
    int64_t warmup_steps = spe * cfg.warmup_epochs;
    RV_CHECK_CFG(warmup_steps < total_steps, "train: warmup covers every step; reduce "
                                             "warmup_epochs below epochs");

    std::set<int> subset(cfg.subset_classes.begin(), cfg.subset_classes.end());
    std::vector<int> test_targets;
    for (const auto& p : test_pairs) test_targets.push_back(p.label);

    Adam<T> opt;
    Rng base(cfg.seed);
    int64_t gstep = 0;
    std::vector<CutoutPair<T>> batch;

    for (int e = 0; e < cfg.epochs; ++e) {
        auto order = base.split(10, (uint64_t)e).permutation(n);
        Rng flip_rng = base.split(20, (uint64_t)e);
        double loss_sum = 0.0;
        double first_lr = 0.0;

        for (int64_t from = 0; from < n; from += cfg.batch_size) {
            int64_t to = std::min(n, from + cfg.batch_size);
            batch.clear();
            for (int64_t k = from; k < to; ++k) {
                const auto& pair = train_pairs[(size_t)order[(size_t)k]];
                batch.push_back(cfg.flip_p > 0.0 ? horizontal_flip(pair, cfg.flip_p, flip_rng)
                                                 : pair);
            }
            bool need_x1 = model.has_roi() || (distill_active && teacher->has_roi());
            bool need_x2 = model.has_xroi() || (distill_active && teacher->has_xroi());
            auto pb = stack_pairs(batch, 0, batch.size(), need_x1, need_x2);

            auto out = model.forward(model.has_roi() ? pb.x1 : Tensor<T>(),
                                     model.has_xroi() ? pb.x2 : Tensor<T>());
            Tensor<T> loss;
            if (distill_active) {
                Tensor<T> teacher_logits;
                {
                    NoGradGuard ng;
                    teacher_logits = teacher->logits(teacher->has_roi() ? pb.x1 : Tensor<T>(),
                                                     teacher->has_xroi() ? pb.x2 : Tensor<T>());
                }
                auto hard = argmax_rows(teacher_logits);
                Tensor<T> dist_ce;
                if (out.roi_dist_logits.defined() && out.xroi_dist_logits.defined()) {
                    dist_ce = scale(
                        add(cross_entropy_label_smoothing(out.roi_dist_logits, hard, (T)0),
                            cross_entropy_label_smoothing(out.xroi_dist_logits, hard, (T)0)),
                        (T)0.5);
                } else {
                    auto& dl = out.roi_dist_logits.defined() ? out.roi_dist_logits
                                                             : out.xroi_dist_logits;
                    dist_ce = cross_entropy_label_smoothing(dl, hard, (T)0);
                }
                auto cls_ce = cross_entropy_label_smoothing(out.logits, pb.labels,
                                                            (T)cfg.label_smoothing);
                loss = lambda == 1.0
                           ? dist_ce
                           : add(scale(cls_ce, (T)(1.0 - lambda)), scale(dist_ce, (T)lambda));
            } else {
                loss = cross_entropy_label_smoothing(out.logits, pb.labels, (T)cfg.label_smoothing);
            }

            double lv = (double)loss.item();
            if (!std::isfinite(lv))
                throw NumericError(strcat_msg("train: non-finite loss at epoch ", e + 1,
                                              " batch ", from / cfg.batch_size + 1));
            double lr = lr_schedule(gstep, total_steps, warmup_steps, cfg.lr0);
            if (from == 0) first_lr = lr;
            for (auto& [name, t] : model.named_parameters()) t.zero_grad();
            backward(loss);
            opt.step(model.named_parameters(), lr);
            ++gstep;
            loss_sum += lv * (double)(to - from);
        }

        EpochStats st;
        st.epoch = e + 1;
        st.train_loss = loss_sum / (double)n;
        st.lr = first_lr;
        if (!test_pairs.empty()) {
            auto preds = predict(model, test_pairs, cfg.batch_size);
            auto m = compute_metrics(preds, test_targets, K, subset);
            st.test_top1 = m.top1;
            st.test_macro_f1 = m.macro_f1;
            st.subset_f1 = m.subset_f1;
        }
        hist.epochs.push_back(st);
    }
    return hist;
}

template <typename T>
DistillRun<T> train_teacher_then_distill(const BackboneConfig& teacher_cfg,
                                         const BackboneConfig& student_cfg,
                                         const Dataset<T>& data, const TrainConfig& cfg,
                                         int num_classes, int hidden, ModelMode mode) {
    RV_CHECK_CFG(teacher_cfg.kind == BackboneKind::mini_cnn,
                 "train_teacher_then_distill: teacher must be mini_cnn, got ",
                 to_string(teacher_cfg.kind));
    RV_CHECK_CFG(student_cfg.kind == BackboneKind::mini_deit,
                 "train_teacher_then_distill: student must be mini_deit, got ",
                 to_string(student_cfg.kind));
    Rng base(cfg.seed);
    uint64_t teacher_seed = base.split(31).next_u64();
    uint64_t student_seed = base.split(32).next_u64();

    DistillRun<T> run{
        build_rvernet<T>(teacher_cfg, teacher_cfg, num_classes, hidden, teacher_seed, mode),
        build_rvernet<T>(student_cfg, student_cfg, num_classes, hidden, student_seed, mode),
        {},
        {},
        0.0,
        false,
        "mini_deit_distilled"};

    TrainConfig teacher_cfg_run = cfg;
    teacher_cfg_run.distill.reset();
    run.teacher_history = train(run.teacher, data, teacher_cfg_run);

    auto test_pairs = cutouts_of_split(data, "test");
    if (!test_pairs.empty()) {
        std::vector<int> targets;
        for (const auto& p : test_pairs) targets.push_back(p.label);
        run.teacher_test_top1 = top1(predict(run.teacher, test_pairs, cfg.batch_size), targets);
    }
    run.teacher_above_chance = run.teacher_test_top1 > 100.0 / (double)num_classes;

    TrainConfig student_cfg_run = cfg;
    if (!student_cfg_run.distill) student_cfg_run.distill = DistillSettings{};
    run.student_history = train(run.student, data, student_cfg_run, &run.teacher);
    return run;
}

json history_to_json(const TrainHistory& h) {
    json epochs = json::array();
    for (const auto& e : h.epochs) {
        json row = {{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"test_top1", e.test_top1},
                    {"test_macro_f1", e.test_macro_f1},
                    {"lr", e.lr}};
        if (h.has_subset)
            row["subset_f1"] = e.subset_f1;
        else
            row["subset_f1"] = nullptr;
        epochs.push_back(row);
    }
    return {{"has_subset", h.has_subset}, {"epochs", epochs}};
}

std::string history_to_csv(const TrainHistory& h) {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,test_top1,test_macro_f1,subset_f1,lr\n";
    for (const auto& e : h.epochs) {
        os << e.epoch << ',' << e.train_loss << ',' << e.test_top1 << ',' << e.test_macro_f1
           << ',';
        if (h.has_subset) os << e.subset_f1;
        os << ',' << e.lr << '\n';
    }
    return os.str();
}

template class Adam<float>;
template class Adam<double>;
template Tensor<float> hard_distillation_loss(const Tensor<float>&, const Tensor<float>&,
                                              const Tensor<float>&, const std::vector<int>&,
                                              double, double);
template Tensor<double> hard_distillation_loss(const Tensor<double>&, const Tensor<double>&,
                                               const Tensor<double>&, const std::vector<int>&,
                                               double, double);
template std::vector<int> predict(const RveRNetModel<float>&,
                                  const std::vector<CutoutPair<float>>&, int);
template std::vector<int> predict(const RveRNetModel<double>&,
                                  const std::vector<CutoutPair<double>>&, int);
template TrainHistory train(RveRNetModel<float>&, const Dataset<float>&, const TrainConfig&,
                            const RveRNetModel<float>*);
template TrainHistory train(RveRNetModel<double>&, const Dataset<double>&, const TrainConfig&,
                            const RveRNetModel<double>*);
template DistillRun<float> train_teacher_then_distill(const BackboneConfig&,
                                                      const BackboneConfig&,
                                                      const Dataset<float>&, const TrainConfig&,
                                                      int, int, ModelMode);
template DistillRun<double> train_teacher_then_distill(const BackboneConfig&,
                                                       const BackboneConfig&,
                                                       const Dataset<double>&, const TrainConfig&,
                                                       int, int, ModelMode);

}  // namespace rvernet
