#pragma once

#include "attmil/bag.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace attmil {

using Confusion = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic>;

enum class F1Average { macro, weighted };

/// rows = true class, cols = predicted class.
Confusion confusion_matrix(std::span<const Index> predictions, std::span<const Index> labels, Index num_classes);
double accuracy(std::span<const Index> predictions, std::span<const Index> labels);
/// Per-class F1 over all `num_classes` classes, 0/0 counted as 0. Weighted
/// averaging uses true-class support.
double f1_score(std::span<const Index> predictions, std::span<const Index> labels, Index num_classes,
                F1Average averaging);

/// Normalised Mann-Whitney U (ties count 1/2). labels are 0/1.
double auroc(std::span<const double> scores, std::span<const int> labels);
/// Step-wise area sum (R_i - R_{i-1}) * P_i over descending distinct thresholds.
double auprc(std::span<const double> scores, std::span<const int> labels);

struct AttentionRecord {
  Eigen::VectorXd attention;
  LandmarkMask landmarks;
  Index label = 0;
  Index predicted = 0;
};

/// Fraction of correctly classified disorder bags (label != 0) whose highest
/// attention instance (lowest index on ties) is a landmark. With
/// `correct_only` false every disorder bag counts.
double attention_hit_rate(std::span<const AttentionRecord> records, bool correct_only = true);

struct EvalReport {
  Index bag_count = 0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double f1_weighted = 0.0;
  /// NaN for a class that is absent (or the only class) in the evaluated bags.
  std::vector<double> auroc_per_class;
  double auroc_mean = 0.0;
  std::vector<double> auprc_per_class;
  double auprc_mean = 0.0;
  Confusion confusion;
  std::optional<double> attention_hit_rate;
};

/// `probabilities` is [bags x K]. Attention records are optional (no landmark
/// ground truth -> no hit rate).
EvalReport make_report(std::span<const Index> labels, std::span<const Index> predictions,
                       const Eigen::MatrixXd& probabilities, Index num_classes,
                       std::span<const AttentionRecord> attention = {});

/// Metric-wise mean over folds; confusion matrices are summed.
EvalReport average_reports(std::span<const EvalReport> reports);

nlohmann::json to_json(const EvalReport& r);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run
};

MetricSummary summarize(std::span<const double> values);

struct MethodRuns {
  std::string method;
  std::vector<EvalReport> runs;
};

struct AblationRow {
  std::string method;
  MetricSummary accuracy, f1_weighted, f1_macro, auroc, hit_rate;
};

std::vector<AblationRow> ablation_report(std::span<const MethodRuns> methods);

inline constexpr const char* kAblationCsvHeader =
    "method,accuracy_mean,accuracy_std,f1w_mean,f1w_std,f1m_mean,f1m_std,auroc_mean,auroc_std,hit_mean,hit_std";

std::string ablation_csv(std::span<const AblationRow> rows);
std::string ablation_table(std::span<const AblationRow> rows);

}  // namespace attmil
