#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace vitbench {

// Parallel score/label arrays, label 1 = positive.
struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t n_pos() const;
  std::size_t n_neg() const;
  // Equal lengths, finite scores, labels in {0, 1}; optionally both classes.
  void validate(bool need_both_classes = true) const;
};

struct RocPoint {
  double fpr;
  double tpr;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

struct RocResult {
  double auc = 0.0;
  double variance = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::vector<RocPoint> points;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

// One point per distinct score (descending), ties grouped, plus (0,0) and (1,1).
std::vector<RocPoint> roc_points(const ScoredLabels& d);

// Mann-Whitney statistic with ties counted as one half.
double auc(const ScoredLabels& d);

// DeLong structural components: v10[i] for each positive, v01[j] for each
// negative, in input order.
struct DelongComponents {
  std::vector<double> v10;
  std::vector<double> v01;
};
DelongComponents delong_components(const ScoredLabels& d);

// Two-sided standard normal quantile z_{1 - alpha/2}.
double normal_quantile_two_sided(double alpha);
double normal_cdf(double x);

// Wald interval on the AUC scale, clamped to [0, 1].
RocResult delong_ci(const ScoredLabels& d, double alpha = 0.05);

struct PairedTest {
  double auc_a;
  double auc_b;
  double z;
  double p_two_sided;
};

PairedTest delong_paired_test(std::span<const double> a, std::span<const double> b, std::span<const int> labels);

void write_roc_csv(std::span<const RocPoint> points, const std::filesystem::path& path);

}  // namespace vitbench
