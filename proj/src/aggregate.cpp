#include "vitbench/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "vitbench/error.hpp"

namespace vitbench {

void SliceScores::validate() const {
  if (scores.empty()) fail(ErrorKind::Invalid, "patient '" + patient_id + "' has no slices");
  for (double s : scores)
    require(std::isfinite(s) && s >= 0.0 && s <= 1.0, "patient '" + patient_id + "' has a slice score outside [0, 1]");
}

std::size_t top_count(std::size_t n, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, "top fraction must be in (0, 1]");
  // The small slack keeps products like 0.1 * 30 = 3.0000000000000004 from
  // rounding up to the next integer.
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

double patient_score_top_fraction(const SliceScores& s, double fraction) {
  s.validate();
  const std::size_t k = top_count(s.scores.size(), fraction);
  std::vector<double> v = s.scores;
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += v[i];
  return std::clamp(sum / static_cast<double>(k), v[k - 1], v[0]);
}

}  // namespace vitbench
