#include "attmil/metrics.hpp"

#include "attmil/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

namespace attmil {

namespace {

void check_pair(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw ArgumentError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                        std::to_string(b) + ")");
  }
  if (a == 0) throw ArgumentError(std::string(what) + ": empty input");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

Confusion confusion_matrix(std::span<const Index> predictions, std::span<const Index> labels, Index num_classes) {
  check_pair(predictions.size(), labels.size(), "confusion_matrix");
  Confusion c = Confusion::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes) {
      throw ArgumentError("confusion_matrix: class index out of range");
    }
    ++c(labels[i], predictions[i]);
  }
  return c;
}

double accuracy(std::span<const Index> predictions, std::span<const Index> labels) {
  check_pair(predictions.size(), labels.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double f1_score(std::span<const Index> predictions, std::span<const Index> labels, Index num_classes,
                F1Average averaging) {
  const Confusion c = confusion_matrix(predictions, labels, num_classes);
  double total = 0.0;
  for (Index k = 0; k < num_classes; ++k) {
    const double tp = static_cast<double>(c(k, k));
    const double support = static_cast<double>(c.row(k).sum());
    const double predicted = static_cast<double>(c.col(k).sum());
    // F1 = 2TP / (2TP + FP + FN) = 2TP / (support + predicted).
    const double denom = support + predicted;
    const double f1 = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    total += averaging == F1Average::macro ? f1 : f1 * support;
  }
  return averaging == F1Average::macro ? total / static_cast<double>(num_classes)
                                       : total / static_cast<double>(labels.size());
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores.size(), labels.size(), "auroc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mid-ranks (1-based); tied blocks share their average rank.
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]]) {
        positive_rank_sum += mid;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) throw UndefinedMetricError("auroc: labels contain a single class");
  const double np = static_cast<double>(positives);
  const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(negatives));
}

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_pair(scores.size(), labels.size(), "auprc");
  const double positives = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
  if (positives == 0.0) throw UndefinedMetricError("auprc: no positive labels");
  const auto idx = descending_order(scores);
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / positives;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return area;
}

double attention_hit_rate(std::span<const AttentionRecord> records, bool correct_only) {
  std::size_t eligible = 0, hits = 0;
  for (const auto& r : records) {
    if (r.label == 0) continue;
    if (correct_only && r.predicted != r.label) continue;
    if (r.attention.size() == 0 || static_cast<Index>(r.landmarks.size()) != r.attention.size()) {
      throw ConfigError("attention_hit_rate: landmark annotations missing or mismatched");
    }
    Index top = 0;
    for (Index i = 1; i < r.attention.size(); ++i) {
      if (r.attention[i] > r.attention[top]) top = i;
    }
    ++eligible;
    hits += r.landmarks[static_cast<std::size_t>(top)] != 0;
  }
  if (eligible == 0) throw UndefinedMetricError("attention_hit_rate: no eligible disorder bags");
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

EvalReport make_report(std::span<const Index> labels, std::span<const Index> predictions,
                       const Eigen::MatrixXd& probabilities, Index num_classes,
                       std::span<const AttentionRecord> attention) {
  check_pair(labels.size(), predictions.size(), "make_report");
  if (probabilities.rows() != static_cast<Index>(labels.size()) || probabilities.cols() != num_classes) {
    throw DimensionError("make_report: probability matrix does not match bag count and classes");
  }
  EvalReport r;
  r.bag_count = static_cast<Index>(labels.size());
  r.accuracy = accuracy(predictions, labels);
  r.f1_macro = f1_score(predictions, labels, num_classes, F1Average::macro);
  r.f1_weighted = f1_score(predictions, labels, num_classes, F1Average::weighted);
  r.confusion = confusion_matrix(predictions, labels, num_classes);

  double auroc_sum = 0.0, auprc_sum = 0.0;
  int auroc_n = 0, auprc_n = 0;
  std::vector<int> binary(labels.size());
  std::vector<double> scores(labels.size());
  for (Index k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      binary[i] = labels[i] == k;
      scores[i] = probabilities(static_cast<Index>(i), k);
    }
    double roc = kNaN, pr = kNaN;
    try {
      roc = auroc(scores, binary);
      auroc_sum += roc;
      ++auroc_n;
    } catch (const UndefinedMetricError&) {
    }
    try {
      pr = auprc(scores, binary);
      auprc_sum += pr;
      ++auprc_n;
    } catch (const UndefinedMetricError&) {
    }
    r.auroc_per_class.push_back(roc);
    r.auprc_per_class.push_back(pr);
  }
  r.auroc_mean = auroc_n ? auroc_sum / auroc_n : kNaN;
  r.auprc_mean = auprc_n ? auprc_sum / auprc_n : kNaN;

  if (!attention.empty()) {
    try {
      r.attention_hit_rate = attention_hit_rate(attention, true);
    } catch (const UndefinedMetricError&) {
      r.attention_hit_rate.reset();
    }
  }
  return r;
}

namespace {

double nan_mean(const std::vector<double>& v) {
  double s = 0.0;
  int n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / n : kNaN;
}

}  // namespace

EvalReport average_reports(std::span<const EvalReport> reports) {
  if (reports.empty()) throw ArgumentError("average_reports: no reports");
  EvalReport out;
  const std::size_t k = reports.front().auroc_per_class.size();
  out.confusion = Confusion::Zero(reports.front().confusion.rows(), reports.front().confusion.cols());
  std::vector<double> acc, f1m, f1w, roc_mean, pr_mean, hit;
  std::vector<std::vector<double>> roc(k), pr(k);
  for (const auto& r : reports) {
    out.bag_count += r.bag_count;
    acc.push_back(r.accuracy);
    f1m.push_back(r.f1_macro);
    f1w.push_back(r.f1_weighted);
    roc_mean.push_back(r.auroc_mean);
    pr_mean.push_back(r.auprc_mean);
    for (std::size_t c = 0; c < k; ++c) {
      roc[c].push_back(r.auroc_per_class.at(c));
      pr[c].push_back(r.auprc_per_class.at(c));
    }
    out.confusion += r.confusion;
    if (r.attention_hit_rate) hit.push_back(*r.attention_hit_rate);
  }
  out.accuracy = nan_mean(acc);
  out.f1_macro = nan_mean(f1m);
  out.f1_weighted = nan_mean(f1w);
  out.auroc_mean = nan_mean(roc_mean);
  out.auprc_mean = nan_mean(pr_mean);
  for (std::size_t c = 0; c < k; ++c) {
    out.auroc_per_class.push_back(nan_mean(roc[c]));
    out.auprc_per_class.push_back(nan_mean(pr[c]));
  }
  if (!hit.empty()) out.attention_hit_rate = nan_mean(hit);
  return out;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < r.confusion.cols(); ++j) row.push_back(r.confusion(i, j));
    confusion.push_back(row);
  }
  // NaN has no JSON spelling; nlohmann writes it as null.
  return {
      {"bag_count", r.bag_count},
      {"accuracy", r.accuracy},
      {"f1_macro", r.f1_macro},
      {"f1_weighted", r.f1_weighted},
      {"auroc_per_class", r.auroc_per_class},
      {"auroc_mean", r.auroc_mean},
      {"auprc_per_class", r.auprc_per_class},
      {"auprc_mean", r.auprc_mean},
      {"confusion", confusion},
      {"attention_hit_rate", r.attention_hit_rate ? nlohmann::json(*r.attention_hit_rate) : nlohmann::json()},
  };
}

MetricSummary summarize(std::span<const double> values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  if (v.empty()) return {kNaN, kNaN};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::vector<AblationRow> ablation_report(std::span<const MethodRuns> methods) {
  std::vector<AblationRow> rows;
  for (const auto& m : methods) {
    std::vector<double> acc, f1w, f1m, roc, hit;
    for (const auto& r : m.runs) {
      acc.push_back(r.accuracy);
      f1w.push_back(r.f1_weighted);
      f1m.push_back(r.f1_macro);
      roc.push_back(r.auroc_mean);
      hit.push_back(r.attention_hit_rate.value_or(kNaN));
    }
    rows.push_back({m.method, summarize(acc), summarize(f1w), summarize(f1m), summarize(roc), summarize(hit)});
  }
  return rows;
}

namespace {

std::string fmt(double x, int precision) {
  if (!std::isfinite(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

}  // namespace

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << kAblationCsvHeader << '\n';
  for (const auto& r : rows) {
    os << r.method;
    for (const MetricSummary* s : {&r.accuracy, &r.f1_weighted, &r.f1_macro, &r.auroc, &r.hit_rate}) {
      os << ',' << fmt(s->mean, 6) << ',' << fmt(s->std, 6);
    }
    os << '\n';
  }
  return os.str();
}

std::string ablation_table(std::span<const AblationRow> rows) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-14s %-15s %-15s %-15s %-15s %-15s\n", "method", "accuracy", "f1_weighted",
                "f1_macro", "auroc", "attention_hit");
  os << line;
  auto cell = [](const MetricSummary& s) { return fmt(s.mean, 3) + " +- " + fmt(s.std, 3); };
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-14s %-15s %-15s %-15s %-15s %-15s\n", r.method.c_str(),
                  cell(r.accuracy).c_str(), cell(r.f1_weighted).c_str(), cell(r.f1_macro).c_str(),
                  cell(r.auroc).c_str(), cell(r.hit_rate).c_str());
    os << line;
  }
  return os.str();
}

}  // namespace attmil
