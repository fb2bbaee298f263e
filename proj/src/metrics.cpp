#include "rvernet/metrics.hpp"

#include <algorithm>
#include <sstream>

using nlohmann::json;

namespace rvernet {

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& predictions,
                                                   const std::vector<int>& targets, int K) {
    RV_CHECK_CFG(predictions.size() == targets.size(), "confusion_matrix: ", predictions.size(),
                 " predictions vs ", targets.size(), " targets");
    RV_CHECK_CFG(K >= 1, "confusion_matrix: K must be positive");
    std::vector<std::vector<int64_t>> conf((size_t)K, std::vector<int64_t>((size_t)K, 0));
    for (size_t i = 0; i < targets.size(); ++i) {
        int t = targets[i], p = predictions[i];
        RV_CHECK_CFG(t >= 0 && t < K && p >= 0 && p < K, "confusion_matrix: labels (", t, ",", p,
                     ") outside [0,", K, ")");
        conf[(size_t)t][(size_t)p] += 1;
    }
    return conf;
}

double top1(const std::vector<int>& predictions, const std::vector<int>& targets) {
    RV_CHECK_CFG(predictions.size() == targets.size() && !targets.empty(),
                 "top1: need equal nonempty prediction/target lists");
    int64_t correct = 0;
    for (size_t i = 0; i < targets.size(); ++i) correct += predictions[i] == targets[i];
    return 100.0 * (double)correct / (double)targets.size();
}

std::vector<double> per_class_f1(const std::vector<std::vector<int64_t>>& confusion) {
    size_t K = confusion.size();
    std::vector<double> f1(K, 0.0);
    for (size_t c = 0; c < K; ++c) {
        RV_CHECK_CFG(confusion[c].size() == K, "per_class_f1: confusion matrix not square");
        int64_t tp = confusion[c][c], fn = 0, fp = 0;
        for (size_t j = 0; j < K; ++j) {
            if (j != c) fn += confusion[c][j];
            if (j != c) fp += confusion[j][c];
        }
        double precision = tp + fp > 0 ? (double)tp / (double)(tp + fp) : 0.0;
        double recall = tp + fn > 0 ? (double)tp / (double)(tp + fn) : 0.0;
        f1[c] = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    }
    return f1;
}

double macro_f1(const std::vector<int>& predictions, const std::vector<int>& targets, int K) {
    auto f1 = per_class_f1(confusion_matrix(predictions, targets, K));
    double sum = 0;
    for (double v : f1) sum += v;
    return sum / (double)K;
}

double subset_f1(const std::vector<int>& predictions, const std::vector<int>& targets, int K,
                 const std::set<int>& subset) {
    RV_CHECK_CFG(!subset.empty(), "subset_f1: empty class subset");
    for (int c : subset)
        RV_CHECK_CFG(c >= 0 && c < K, "subset_f1: class ", c, " outside [0,", K, ")");
    auto f1 = per_class_f1(confusion_matrix(predictions, targets, K));
    double sum = 0;
    for (int c : subset) sum += f1[(size_t)c];
    return sum / (double)subset.size();
}

MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& targets, int K,
                              const std::set<int>& subset) {
    MetricsReport r;
    r.confusion = confusion_matrix(predictions, targets, K);
    r.per_class_f1 = per_class_f1(r.confusion);
    int64_t total = 0, diag = 0;
    for (size_t t = 0; t < r.confusion.size(); ++t)
        for (size_t p = 0; p < r.confusion.size(); ++p) {
            total += r.confusion[t][p];
            if (t == p) diag += r.confusion[t][p];
        }
    RV_CHECK_CFG(total > 0, "compute_metrics: empty prediction list");
    r.top1 = 100.0 * (double)diag / (double)total;
    double sum = 0;
    for (double v : r.per_class_f1) sum += v;
    r.macro_f1 = sum / (double)K;
    if (!subset.empty()) {
        r.subset_classes.assign(subset.begin(), subset.end());
        double s = 0;
        for (int c : r.subset_classes) {
            RV_CHECK_CFG(c >= 0 && c < K, "compute_metrics: subset class ", c, " outside [0,", K,
                         ")");
            s += r.per_class_f1[(size_t)c];
        }
        r.subset_f1 = s / (double)r.subset_classes.size();
    }
    return r;
}

json metrics_to_json(const MetricsReport& report) {
    json j = {{"top1", report.top1},
              {"macro_f1", report.macro_f1},
              {"f1_averaging", "macro"},
              {"per_class_f1", report.per_class_f1},
              {"confusion", report.confusion}};
    if (!report.subset_classes.empty()) {
        j["subset_classes"] = report.subset_classes;
        j["subset_f1"] = report.subset_f1;
    }
    return j;
}

namespace {

// Column extractors for the comparison table.
struct Column {
    const char* name;
    double (*get)(const MetricsReport&);
};

constexpr Column kColumns[] = {
    {"top1", [](const MetricsReport& m) { return m.top1; }},
    {"macro_f1", [](const MetricsReport& m) { return m.macro_f1; }},
};

std::vector<std::pair<std::vector<int>, std::vector<int>>> best_worst(
    const std::vector<TableRow>& rows, bool with_subset) {
    // For each column: (indices of best rows, indices of worst rows).
    std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
    auto scan = [&](auto&& get) {
        double best = -1e300, worst = 1e300;
        for (const auto& r : rows) {
            best = std::max(best, get(r.metrics));
            worst = std::min(worst, get(r.metrics));
        }
        std::vector<int> bi, wi;
        for (size_t i = 0; i < rows.size(); ++i) {
            if (get(rows[i].metrics) == best) bi.push_back((int)i);
            if (get(rows[i].metrics) == worst) wi.push_back((int)i);
        }
        out.emplace_back(std::move(bi), std::move(wi));
    };
    for (const auto& col : kColumns) scan(col.get);
    if (with_subset) scan([](const MetricsReport& m) { return m.subset_f1; });
    return out;
}

bool all_have_subset(const std::vector<TableRow>& rows) {
    for (const auto& r : rows)
        if (r.metrics.subset_classes.empty()) return false;
    return !rows.empty();
}

}  // namespace

json table_report_json(const std::vector<TableRow>& rows) {
    RV_CHECK_CFG(!rows.empty(), "table_report: no rows");
    bool with_subset = all_have_subset(rows);
    auto flags = best_worst(rows, with_subset);
    std::vector<std::string> col_names = {"top1", "macro_f1"};
    if (with_subset) col_names.push_back("subset_f1");

    json out = json::array();
    for (size_t i = 0; i < rows.size(); ++i) {
        json row = {{"name", rows[i].name},
                    {"top1", rows[i].metrics.top1},
                    {"macro_f1", rows[i].metrics.macro_f1}};
        if (with_subset) row["subset_f1"] = rows[i].metrics.subset_f1;
        json best = json::array(), worst = json::array();
        for (size_t c = 0; c < col_names.size(); ++c) {
            if (std::count(flags[c].first.begin(), flags[c].first.end(), (int)i))
                best.push_back(col_names[c]);
            if (std::count(flags[c].second.begin(), flags[c].second.end(), (int)i))
                worst.push_back(col_names[c]);
        }
        row["best_in"] = best;
        row["worst_in"] = worst;
        out.push_back(row);
    }
    return {{"f1_averaging", "macro"}, {"rows", out}};
}

std::string table_report_csv(const std::vector<TableRow>& rows) {
    json j = table_report_json(rows);
    bool with_subset = all_have_subset(rows);
    std::ostringstream os;
    os << "name,top1,macro_f1" << (with_subset ? ",subset_f1" : "") << ",best_in,worst_in\n";
    for (const auto& row : j["rows"]) {
        os << row["name"].get<std::string>() << ',' << row["top1"].get<double>() << ','
           << row["macro_f1"].get<double>();
        if (with_subset) os << ',' << row["subset_f1"].get<double>();
        auto join = [](const json& arr) {
            std::string s;
            for (const auto& v : arr) {
                if (!s.empty()) s += ';';
                s += v.get<std::string>();
            }
            return s;
        };
        os << ',' << join(row["best_in"]) << ',' << join(row["worst_in"]) << '\n';
    }
    return os.str();
}

}  // namespace rvernet
