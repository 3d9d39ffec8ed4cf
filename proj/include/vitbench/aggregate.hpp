#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace vitbench {

inline constexpr double kTopFraction = 0.10;

// Per-slice positive-class probabilities of one patient, in slice order.
struct SliceScores {
  std::string patient_id;
  std::vector<double> scores;

  void validate() const;
};

// k = max(1, ceil(fraction * n)).
std::size_t top_count(std::size_t n, double fraction);

// Mean of the k highest slice scores. Ties at the cutoff are equal values, so
// which tied slices are taken does not change the result; the sum is taken in
// descending order so the result is independent of input order.
double patient_score_top_fraction(const SliceScores& s, double fraction = kTopFraction);

}  // namespace vitbench
