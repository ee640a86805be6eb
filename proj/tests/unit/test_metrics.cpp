#include "attmil/errors.hpp"
#include "attmil/metrics.hpp"
#include "attmil/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace attmil;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// Sweep every distinct score as a threshold (descending); predicted positive
// means score >= threshold.
double brute_auprc(const std::vector<double>& s, const std::vector<int>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double positives = 0;
  for (int v : y) positives += v;
  double area = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    const double recall = tp / positives;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return area;
}

double brute_f1(const std::vector<Index>& p, const std::vector<Index>& y, Index k, bool weighted) {
  double total = 0;
  for (Index c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      tp += p[i] == c && y[i] == c;
      fp += p[i] == c && y[i] != c;
      fn += p[i] != c && y[i] == c;
      support += y[i] == c;
    }
    const double f1 = (2 * tp + fp + fn) == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
    total += weighted ? f1 * support / static_cast<double>(y.size()) : f1 / static_cast<double>(k);
  }
  return total;
}

}  // namespace

TEST(Accuracy, Examples) {
  const std::vector<Index> y{0, 1, 2, 1};
  EXPECT_EQ(accuracy(y, y), 1.0);
  EXPECT_EQ(f1_score(y, y, 3, F1Average::macro), 1.0);
  EXPECT_EQ(f1_score(y, y, 3, F1Average::weighted), 1.0);
  const std::vector<Index> labels{0, 0, 1, 1}, all0{0, 0, 0, 0};
  EXPECT_EQ(accuracy(all0, labels), 0.5);
  EXPECT_NEAR(f1_score(all0, labels, 2, F1Average::macro), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(accuracy(std::vector<Index>{0}, labels), ArgumentError);
  EXPECT_THROW(accuracy(std::vector<Index>{}, std::vector<Index>{}), ArgumentError);
}

TEST(F1, AbsentClassCountsAsZero) {
  const std::vector<Index> y{0, 1, 0, 1};
  // class 2 never occurs nor is predicted: its F1 is 0 and drags the macro mean
  EXPECT_NEAR(f1_score(y, y, 3, F1Average::macro), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f1_score(y, y, 3, F1Average::weighted), 1.0);
}

TEST(F1, MacroEqualsWeightedForEqualSupports) {
  const std::vector<Index> y{0, 0, 1, 1, 0, 1}, p{0, 1, 1, 1, 0, 0};
  EXPECT_NEAR(f1_score(p, y, 2, F1Average::macro), f1_score(p, y, 2, F1Average::weighted), 1e-15);
}

TEST(Confusion, TraceOverSumIsAccuracy) {
  Rng rng(1);
  std::vector<Index> p, y;
  for (int i = 0; i < 40; ++i) {
    p.push_back(static_cast<Index>(rng.below(4)));
    y.push_back(static_cast<Index>(rng.below(4)));
  }
  const Confusion c = confusion_matrix(p, y, 4);
  EXPECT_EQ(c.sum(), 40);
  EXPECT_EQ(static_cast<double>(c.trace()) / static_cast<double>(c.sum()), accuracy(p, y));
  EXPECT_EQ(c(y[0], p[0]) > 0, true);
}

TEST(Auroc, Examples) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  const std::vector<int> y{1, 1, 0, 0};
  EXPECT_EQ(auroc(s, y), 1.0);
  EXPECT_EQ(auroc(std::vector<double>(4, 0.5), y), 0.5);
  EXPECT_THROW(auroc(s, std::vector<int>{1, 1, 1, 1}), UndefinedMetricError);
  EXPECT_THROW(auroc(s, std::vector<int>{0, 0, 0, 0}), UndefinedMetricError);
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
  Rng rng(2);
  std::vector<double> s, t;
  std::vector<int> y;
  for (int i = 0; i < 30; ++i) {
    s.push_back(std::round(rng.normal() * 4) / 4);  // with ties
    t.push_back(std::exp(3 * s.back()) - 7);
    y.push_back(i % 3 == 0);
  }
  EXPECT_DOUBLE_EQ(auroc(s, y), auroc(t, y));
}

TEST(Auprc, Examples) {
  const std::vector<int> y{1, 0, 1, 0, 0};
  EXPECT_EQ(auprc(std::vector<double>{0.9, 0.2, 0.8, 0.1, 0.3}, y), 1.0);
  EXPECT_NEAR(auprc(std::vector<double>(5, 0.4), y), 0.4, 1e-15);
  EXPECT_THROW(auprc(std::vector<double>(5, 0.4), std::vector<int>(5, 0)), UndefinedMetricError);
}

TEST(MetricOracles, RandomInstancesMatchBruteForce) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(49);
    const Index k = 2 + static_cast<Index>(rng.below(4));
    std::vector<double> s;
    std::vector<int> y;
    std::vector<Index> pred, lab;
    for (std::size_t i = 0; i < n; ++i) {
      s.push_back(static_cast<double>(rng.below(8)) / 8.0);
      y.push_back(rng.bernoulli(0.4));
      pred.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(k))));
      lab.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(k))));
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auroc(s, y), brute_auroc(s, y), 1e-10);
    EXPECT_NEAR(auprc(s, y), brute_auprc(s, y), 1e-10);
    Index hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += pred[i] == lab[i];
    EXPECT_NEAR(accuracy(pred, lab), static_cast<double>(hits) / static_cast<double>(n), 1e-10);
    EXPECT_NEAR(f1_score(pred, lab, k, F1Average::macro), brute_f1(pred, lab, k, false), 1e-10);
    EXPECT_NEAR(f1_score(pred, lab, k, F1Average::weighted), brute_f1(pred, lab, k, true), 1e-10);
  }
}

TEST(HitRate, Examples) {
  std::vector<AttentionRecord> recs;
  for (int b = 0; b < 4; ++b) {
    AttentionRecord r;
    r.attention = Eigen::VectorXd::Constant(5, 0.05);
    r.attention[b] = 0.8;
    r.landmarks = LandmarkMask(5, 0);
    r.landmarks[static_cast<std::size_t>(b)] = 1;
    r.label = 1 + b % 2;
    r.predicted = r.label;
    recs.push_back(r);
  }
  EXPECT_EQ(attention_hit_rate(recs), 1.0);
  recs[0].predicted = 0;  // misclassified: excluded
  recs[1].landmarks = LandmarkMask(5, 0);
  EXPECT_NEAR(attention_hit_rate(recs), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(attention_hit_rate(recs, false), 3.0 / 4.0, 1e-15);
  for (auto& r : recs) r.label = r.predicted = 0;
  EXPECT_THROW(attention_hit_rate(recs), UndefinedMetricError);
  recs[0].landmarks.clear();
  recs[0].label = recs[0].predicted = 1;
  EXPECT_THROW(attention_hit_rate(recs), ConfigError);
}

TEST(HitRate, UniformAttentionMatchesWitnessRate) {
  // Uniform attention picks instance 0; with landmarks at random positions the
  // hit rate estimates the witness rate.
  Rng rng(4);
  const double w = 0.1;
  const int bags = 4000;
  std::vector<AttentionRecord> recs;
  for (int b = 0; b < bags; ++b) {
    AttentionRecord r;
    r.attention = Eigen::VectorXd::Constant(20, 0.05);
    r.landmarks = LandmarkMask(20, 0);
    for (int i = 0; i < 2; ++i) r.landmarks[static_cast<std::size_t>(rng.below(20))] = 1;
    r.label = r.predicted = 1;
    recs.push_back(r);
  }
  const double p = 1.0 - 0.95 * 0.95;  // two independent draws
  const double sigma = std::sqrt(p * (1 - p) / bags);
  EXPECT_NEAR(attention_hit_rate(recs), p, 3 * sigma);
  EXPECT_NEAR(p, w, 0.01);
}

TEST(Report, FieldsAndInvariants) {
  const std::vector<Index> y{0, 1, 2, 0, 1, 2}, p{0, 1, 1, 0, 2, 2};
  Eigen::MatrixXd prob(6, 3);
  prob << 0.8, 0.1, 0.1,
          0.1, 0.7, 0.2,
          0.2, 0.5, 0.3,
          0.6, 0.3, 0.1,
          0.1, 0.3, 0.6,
          0.1, 0.2, 0.7;
  const EvalReport r = make_report(y, p, prob, 3);
  EXPECT_EQ(r.bag_count, 6);
  EXPECT_EQ(r.confusion.sum(), 6);
  EXPECT_NEAR(r.accuracy, 4.0 / 6.0, 1e-15);
  EXPECT_EQ(r.auroc_per_class[0], 1.0);
  EXPECT_NEAR(r.auroc_mean, (r.auroc_per_class[0] + r.auroc_per_class[1] + r.auroc_per_class[2]) / 3, 1e-15);
  EXPECT_FALSE(r.attention_hit_rate.has_value());
  const auto j = to_json(r);
  EXPECT_EQ(j["confusion"].size(), 3u);
  EXPECT_TRUE(j["attention_hit_rate"].is_null());
}

TEST(Report, AbsentClassAurocIsNaN) {
  const std::vector<Index> y{0, 1, 0, 1};
  const Eigen::MatrixXd prob = Eigen::MatrixXd::Constant(4, 3, 1.0 / 3);
  const EvalReport r = make_report(y, y, prob, 3);
  EXPECT_TRUE(std::isnan(r.auroc_per_class[2]));
  EXPECT_EQ(r.auroc_mean, 0.5);
  EXPECT_NE(to_json(r)["auroc_per_class"].dump().find("null"), std::string::npos);
}

TEST(Ablation, SampleStdAndOrder) {
  EvalReport a, b;
  a.accuracy = 0.7;
  b.accuracy = 0.9;
  const std::vector<MethodRuns> runs{{"sic", {a, a}}, {"mil_max", {a, b}}};
  const auto rows = ablation_report(runs);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "sic");
  EXPECT_EQ(rows[0].accuracy.std, 0.0);
  EXPECT_NEAR(rows[1].accuracy.mean, 0.8, 1e-15);
  EXPECT_NEAR(rows[1].accuracy.std, 0.141421356, 1e-9);
  const std::vector<double> single{0.4};
  EXPECT_EQ(summarize(single).std, 0.0);
  const std::string csv = ablation_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kAblationCsvHeader);
  EXPECT_NE(csv.find("\nmil_max,0.800000,0.141421,"), std::string::npos) << csv;
}
