#include "vitbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/normal.hpp>

#include "vitbench/error.hpp"
#include "vitbench/format.hpp"

namespace vitbench {

std::size_t ScoredLabels::n_pos() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

std::size_t ScoredLabels::n_neg() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
}

void ScoredLabels::validate(bool need_both_classes) const {
  require(scores.size() == labels.size(), "scores and labels differ in length");
  for (double s : scores) require(std::isfinite(s), "non-finite score");
  for (int l : labels) require(l == 0 || l == 1, "labels must be 0 or 1");
  if (need_both_classes && (n_pos() == 0 || n_neg() == 0))
    fail(ErrorKind::Degenerate, "ROC analysis needs at least one positive and one negative");
}

std::vector<RocPoint> roc_points(const ScoredLabels& d) {
  d.validate();
  const double np = static_cast<double>(d.n_pos()), nn = static_cast<double>(d.n_neg());
  std::vector<std::size_t> order(d.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.scores[a] > d.scores[b]; });

  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = d.scores[order[i]];
    for (; i < order.size() && d.scores[order[i]] == t; ++i) (d.labels[order[i]] ? tp : fp) += 1;
    pts.push_back({static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return pts;
}

double auc(const ScoredLabels& d) {
  d.validate();
  const std::size_t n = d.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.scores[a] < d.scores[b]; });
  // Sum of positive midranks (1-based); ranks are half-integers so the sum is exact.
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_group = 0;
    while (j < n && d.scores[order[j]] == d.scores[order[i]]) pos_in_group += d.labels[order[j++]];
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    rank_sum += midrank * static_cast<double>(pos_in_group);
    i = j;
  }
  const double np = static_cast<double>(d.n_pos()), nn = static_cast<double>(d.n_neg());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

DelongComponents delong_components(const ScoredLabels& d) {
  d.validate();
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < d.scores.size(); ++i) (d.labels[i] ? pos : neg).push_back(d.scores[i]);
  std::vector<double> pos_sorted = pos, neg_sorted = neg;
  std::sort(pos_sorted.begin(), pos_sorted.end());
  std::sort(neg_sorted.begin(), neg_sorted.end());

  DelongComponents c;
  c.v10.reserve(pos.size());
  c.v01.reserve(neg.size());
  for (double s : pos) {
    const auto [lo, hi] = std::equal_range(neg_sorted.begin(), neg_sorted.end(), s);
    const double below = static_cast<double>(lo - neg_sorted.begin());
    const double ties = static_cast<double>(hi - lo);
    c.v10.push_back((below + 0.5 * ties) / static_cast<double>(neg.size()));
  }
  for (double s : neg) {
    const auto [lo, hi] = std::equal_range(pos_sorted.begin(), pos_sorted.end(), s);
    const double above = static_cast<double>(pos_sorted.end() - hi);
    const double ties = static_cast<double>(hi - lo);
    c.v01.push_back((above + 0.5 * ties) / static_cast<double>(pos.size()));
  }
  return c;
}

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Unbiased sample covariance.
double covariance(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a), mb = mean_of(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / static_cast<double>(a.size() - 1);
}

}  // namespace

double normal_quantile_two_sided(double alpha) {
  require(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - alpha / 2.0);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

RocResult delong_ci(const ScoredLabels& d, double alpha) {
  d.validate();
  RocResult r;
  r.n_pos = d.n_pos();
  r.n_neg = d.n_neg();
  if (r.n_pos < 2 || r.n_neg < 2)
    fail(ErrorKind::Degenerate, "DeLong variance needs at least 2 positives and 2 negatives");
  r.auc = auc(d);
  const DelongComponents c = delong_components(d);
  r.variance = covariance(c.v10, c.v10) / static_cast<double>(r.n_pos) +
               covariance(c.v01, c.v01) / static_cast<double>(r.n_neg);
  const double half = normal_quantile_two_sided(alpha) * std::sqrt(r.variance);
  r.ci_lo = std::clamp(r.auc - half, 0.0, 1.0);
  r.ci_hi = std::clamp(r.auc + half, 0.0, 1.0);
  r.points = roc_points(d);
  return r;
}

PairedTest delong_paired_test(std::span<const double> a, std::span<const double> b, std::span<const int> labels) {
  require(a.size() == b.size() && a.size() == labels.size(), "paired test inputs differ in length");
  const ScoredLabels da{{a.begin(), a.end()}, {labels.begin(), labels.end()}};
  const ScoredLabels db{{b.begin(), b.end()}, {labels.begin(), labels.end()}};
  da.validate();
  db.validate();
  const double m = static_cast<double>(da.n_pos()), n = static_cast<double>(da.n_neg());
  if (da.n_pos() < 2 || da.n_neg() < 2)
    fail(ErrorKind::Degenerate, "paired DeLong test needs at least 2 positives and 2 negatives");
  const DelongComponents ca = delong_components(da), cb = delong_components(db);
  const double var_a = covariance(ca.v10, ca.v10) / m + covariance(ca.v01, ca.v01) / n;
  const double var_b = covariance(cb.v10, cb.v10) / m + covariance(cb.v01, cb.v01) / n;
  const double cov = covariance(ca.v10, cb.v10) / m + covariance(ca.v01, cb.v01) / n;

  PairedTest t{auc(da), auc(db), 0.0, 1.0};
  const double diff = t.auc_a - t.auc_b;
  const double var_diff = std::max(0.0, var_a + var_b - 2.0 * cov);
  if (var_diff == 0.0) {
    if (diff != 0.0) {
      t.z = diff > 0.0 ? INFINITY : -INFINITY;
      t.p_two_sided = 0.0;
    }
    return t;
  }
  t.z = diff / std::sqrt(var_diff);
  t.p_two_sided = std::min(1.0, 2.0 * normal_cdf(-std::abs(t.z)));
  return t;
}

void write_roc_csv(std::span<const RocPoint> points, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "fpr,tpr\n";
  for (const auto& p : points) os << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << os.str();
  if (!f) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

}  // namespace vitbench
