// Classification metrics (top-1, macro-F1, subset F1, confusion matrix) and
// comparison tables with best/worst flags.
//
// Units: top1 is a percentage in [0,100]; all F1 values are in [0,1]. F1
// averaging is macro (unweighted over classes); a class with zero support
// and zero predictions contributes F1 = 0 and stays in the average.
#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rvernet/common.hpp"

namespace rvernet {

struct MetricsReport {
    double top1 = 0.0;
    double macro_f1 = 0.0;
    std::vector<double> per_class_f1;
    std::vector<int> subset_classes;  // empty when no subset was requested
    double subset_f1 = 0.0;           // meaningful iff subset_classes nonempty
    std::vector<std::vector<int64_t>> confusion;  // confusion[target][pred]
};

std::vector<std::vector<int64_t>> confusion_matrix(const std::vector<int>& predictions,
                                                   const std::vector<int>& targets, int K);

double top1(const std::vector<int>& predictions, const std::vector<int>& targets);

std::vector<double> per_class_f1(const std::vector<std::vector<int64_t>>& confusion);

double macro_f1(const std::vector<int>& predictions, const std::vector<int>& targets, int K);

// Macro-F1 over only the subset's classes; per-class F1 still comes from the
// full confusion matrix.
double subset_f1(const std::vector<int>& predictions, const std::vector<int>& targets, int K,
                 const std::set<int>& subset);

MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& targets, int K,
                              const std::set<int>& subset = {});

nlohmann::json metrics_to_json(const MetricsReport& report);

// Comparison table across runs: flags the best and worst run per column
// (ties share the flag).
struct TableRow {
    std::string name;
    MetricsReport metrics;
};

nlohmann::json table_report_json(const std::vector<TableRow>& rows);
std::string table_report_csv(const std::vector<TableRow>& rows);

}  // namespace rvernet
