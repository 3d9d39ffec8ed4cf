#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitbench/aggregate.hpp"
#include "vitbench/metrics.hpp"
#include "vitbench/phantom.hpp"
#include "vitbench/train.hpp"

namespace vitbench {

struct EvalConfig {
  double extent_threshold = kExtentThreshold;
  std::vector<double> dose_levels{28.5, 57.0};
  double top_fraction = kTopFraction;
  double alpha = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CaseScore {
  std::string case_id;
  Label label = Label::Negative;
  double score = 0.0;
  double dose_mas = 0.0;
  double lesion_fraction = 0.0;
};

struct StratumReport {
  std::string key;
  RocResult roc;
};

// Assigns train/val/test by patient: floor(r * N) patients to train and val,
// the remainder to test. Cases sharing a patient id stay together.
Manifest split_by_patient(const Manifest& m, std::array<double, 3> ratios = {0.6, 0.2, 0.2}, std::uint64_t seed = 0);

// Eval-mode score for every case in `split` (all cases when nullopt), sorted
// by case_id.
std::vector<CaseScore> evaluate_cases(const ModelParams& params, const Manifest& m, std::optional<Split> split,
                                      const CaseLoader& load, std::size_t jobs = 1);

// CSV patient_id,slice_index,score. Patients come back sorted by id with
// slices ordered by slice_index.
std::vector<SliceScores> import_slice_scores(const std::filesystem::path& path);

// One CaseScore per patient via the top-fraction rule; label, dose, and extent
// come from the manifest entry whose case_id equals the patient id.
std::vector<CaseScore> scores_from_slices(const std::vector<SliceScores>& slices, const Manifest& m,
                                          double top_fraction = kTopFraction);

ScoredLabels to_scored(const std::vector<CaseScore>& scores);

StratumReport overall_report(const std::vector<CaseScore>& scores, const EvalConfig& cfg);
std::vector<StratumReport> stratify_by_dose(const std::vector<CaseScore>& scores, const EvalConfig& cfg);
// Strata "lower" (< threshold) and "higher" (>= threshold) of the positives,
// each scored against every negative.
std::vector<StratumReport> stratify_by_extent(const std::vector<CaseScore>& scores, const EvalConfig& cfg);

struct EvalReport {
  EvalConfig config;
  StratumReport overall;
  std::vector<StratumReport> by_dose;
  std::vector<StratumReport> by_extent;
};

EvalReport build_report(const std::vector<CaseScore>& scores, const EvalConfig& cfg);

// report.json (keys config, overall, by_dose, by_extent) and one
// roc_<stratum>.csv per stratum. `run_config`, if non-null, is echoed under
// config.run.
void emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                 const nlohmann::ordered_json* run_config = nullptr);

void write_case_scores(const std::vector<CaseScore>& scores, const std::filesystem::path& path);
std::vector<CaseScore> read_case_scores(const std::filesystem::path& path);

}  // namespace vitbench
