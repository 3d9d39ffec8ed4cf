#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "test_support.hpp"
#include "vitbench/error.hpp"
#include "vitbench/trial.hpp"

using namespace vitbench;
using vitbench::testing::TempDir;

namespace {

Manifest patients_manifest(std::size_t n, std::vector<double> doses = {57.0}) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i)
    for (double d : doses) {
      const bool pos = i % 2 == 0;
      char id[64];
      std::snprintf(id, sizeof id, "%s-%04zu@%g", pos ? "pos" : "neg", i, d);
      m.cases.push_back({id, pos ? Label::Positive : Label::Negative, d, pos ? 0.05 : 0.0, std::string(id) + ".vvol"});
    }
  return m;
}

std::map<Split, std::size_t> split_counts(const Manifest& m) {
  std::map<Split, std::size_t> out;
  for (const auto& c : m.cases) ++out[c.split];
  return out;
}

// Deterministic mixed scores with two doses and a spread of extents.
std::vector<CaseScore> score_table(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CaseScore> out;
  for (int i = 0; i < 80; ++i) {
    const bool pos = i % 9 < 5;
    const double dose = i % 2 ? 28.5 : 57.0;
    const double extent = pos ? uniform(rng, 0.005, 0.08) : 0.0;
    const double score = std::clamp(0.5 + (pos ? 0.15 : 0.0) + 0.2 * (uniform01(rng) - 0.5), 0.0, 1.0);
    out.push_back({"c" + std::to_string(i), pos ? Label::Positive : Label::Negative, score, dose, extent});
  }
  return out;
}

double direct_auc(const std::vector<CaseScore>& s, auto keep) {
  ScoredLabels d;
  for (const auto& c : s)
    if (keep(c)) {
      d.scores.push_back(c.score);
      d.labels.push_back(c.label == Label::Positive);
    }
  return auc(d);
}

EvalConfig two_doses() {
  EvalConfig cfg;
  cfg.dose_levels = {28.5, 57.0};
  return cfg;
}

}  // namespace

TEST_SUITE("trial") {
  TEST_CASE("patient split sizes") {
    auto counts = split_counts(split_by_patient(patients_manifest(10)));
    CHECK(counts[Split::Train] == 6);
    CHECK(counts[Split::Val] == 2);
    CHECK(counts[Split::Test] == 2);
    counts = split_counts(split_by_patient(patients_manifest(1110)));
    CHECK(counts[Split::Train] == 666);
    CHECK(counts[Split::Val] == 222);
    CHECK(counts[Split::Test] == 222);
    counts = split_counts(split_by_patient(patients_manifest(7)));
    CHECK(counts[Split::Train] == 4);
    CHECK(counts[Split::Val] == 1);
    CHECK(counts[Split::Test] == 2);
  }

  TEST_CASE("doses of one patient share a split") {
    const auto m = split_by_patient(patients_manifest(40, {28.5, 57.0}), {0.6, 0.2, 0.2}, 3);
    std::map<std::string, std::set<Split>> by_patient;
    for (const auto& c : m.cases) by_patient[patient_id(c)].insert(c.split);
    CHECK(by_patient.size() == 40);
    for (const auto& [pid, splits] : by_patient) CHECK(splits.size() == 1);
    CHECK(split_counts(m)[Split::Train] == 48);
  }

  TEST_CASE("splits depend only on the seed") {
    const auto base = patients_manifest(50);
    std::size_t differing = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto a = split_by_patient(base, {0.6, 0.2, 0.2}, s);
      const auto b = split_by_patient(base, {0.6, 0.2, 0.2}, s);
      const auto c = split_by_patient(base, {0.6, 0.2, 0.2}, s + 1000);
      bool same = true, differ = false;
      for (std::size_t i = 0; i < base.cases.size(); ++i) {
        same = same && a.cases[i].split == b.cases[i].split;
        differ = differ || a.cases[i].split != c.cases[i].split;
      }
      CHECK(same);
      differing += differ;
    }
    CHECK(differing == 100);
  }

  TEST_CASE("split argument errors") {
    CHECK_THROWS_AS(split_by_patient(patients_manifest(2)), Error);
    CHECK_THROWS_AS(split_by_patient(patients_manifest(10), {0.5, 0.2, 0.2}), Error);
    CHECK_THROWS_AS(split_by_patient(patients_manifest(10), {0.8, 0.0, 0.2}), Error);
  }

  TEST_CASE("extent threshold belongs to the higher stratum") {
    std::vector<CaseScore> s{{"a", Label::Positive, 0.9, 57, 0.0265}, {"b", Label::Positive, 0.2, 57, 0.0265},
                             {"c", Label::Positive, 0.8, 57, 0.01},   {"d", Label::Positive, 0.7, 57, 0.02},
                             {"e", Label::Negative, 0.3, 57, 0.0},    {"f", Label::Negative, 0.4, 57, 0.0}};
    EvalConfig cfg;
    cfg.dose_levels = {57.0};
    const auto strata = stratify_by_extent(s, cfg);
    REQUIRE(strata.size() == 2);
    CHECK(strata[0].key == "lower");
    CHECK(strata[1].key == "higher");
    CHECK(strata[1].roc.n_pos == 2);
    CHECK(strata[1].roc.auc == 0.5);
    CHECK(strata[0].roc.auc == 1.0);
  }

  TEST_CASE("an empty extent stratum is degenerate") {
    std::vector<CaseScore> s{{"a", Label::Positive, 0.9, 57, 0.1}, {"b", Label::Positive, 0.2, 57, 0.2},
                             {"e", Label::Negative, 0.3, 57, 0.0}, {"f", Label::Negative, 0.4, 57, 0.0}};
    EvalConfig cfg;
    cfg.dose_levels = {57.0};
    try {
      stratify_by_extent(s, cfg);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Degenerate);
      CHECK(std::string(e.what()).find("lower") != std::string::npos);
    }
  }

  TEST_CASE("strata equal direct recomputation") {
    const auto s = score_table(4);
    const auto cfg = two_doses();
    const auto r = build_report(s, cfg);
    CHECK(r.overall.roc.auc == direct_auc(s, [](const CaseScore&) { return true; }));
    REQUIRE(r.by_dose.size() == 2);
    CHECK(r.by_dose[0].key == "28.5");
    CHECK(r.by_dose[0].roc.auc == direct_auc(s, [](const CaseScore& c) { return c.dose_mas == 28.5; }));
    CHECK(r.by_dose[1].roc.auc == direct_auc(s, [](const CaseScore& c) { return c.dose_mas == 57.0; }));
    CHECK(r.by_extent[0].roc.auc ==
          direct_auc(s, [](const CaseScore& c) { return c.label == Label::Negative || c.lesion_fraction < 0.0265; }));
    CHECK(r.by_extent[1].roc.auc ==
          direct_auc(s, [](const CaseScore& c) { return c.label == Label::Negative || c.lesion_fraction >= 0.0265; }));
    CHECK(r.by_dose[0].roc.n_pos + r.by_dose[1].roc.n_pos == r.overall.roc.n_pos);
    CHECK(r.by_extent[0].roc.n_neg == r.overall.roc.n_neg);
  }

  TEST_CASE("a single dose stratum equals the overall result") {
    auto s = score_table(5);
    for (auto& c : s) c.dose_mas = 57.0;
    EvalConfig cfg;
    cfg.dose_levels = {57.0};
    const auto r = build_report(s, cfg);
    REQUIRE(r.by_dose.size() == 1);
    CHECK(r.by_dose[0].roc.auc == r.overall.roc.auc);
    CHECK(r.by_dose[0].roc.variance == r.overall.roc.variance);
  }

  TEST_CASE("unknown doses are rejected") {
    auto s = score_table(6);
    s[0].dose_mas = 40.0;
    CHECK_THROWS_AS(stratify_by_dose(s, two_doses()), Error);
  }

  TEST_CASE("slice scores aggregate per patient") {
    TempDir dir("slices");
    {
      std::ofstream f(dir / "s.csv");
      f << "patient_id,slice_index,score\n";
      for (int i = 0; i < 10; ++i) f << "pos-0001@57," << (9 - i) << ',' << (i == 3 ? 0.7 : 0.1) << '\n';
      f << "neg-0002@57,0,0.2\nneg-0002@57,1,0.4\n";
    }
    const auto slices = import_slice_scores(dir / "s.csv");
    REQUIRE(slices.size() == 2);
    CHECK(slices[0].patient_id == "neg-0002@57");
    CHECK(slices[1].scores.size() == 10);
    CHECK(slices[1].scores[6] == 0.7);  // reordered by slice_index

    Manifest m;
    m.cases.push_back({"pos-0001@57", Label::Positive, 57, 0.04, "x"});
    m.cases.push_back({"neg-0002@57", Label::Negative, 57, 0.0, "y"});
    const auto cases = scores_from_slices(slices, m);
    REQUIRE(cases.size() == 2);
    CHECK(cases[1].case_id == "pos-0001@57");
    CHECK(cases[1].score == 0.7);
    CHECK(cases[1].lesion_fraction == 0.04);
    CHECK(cases[0].score == 0.4);

    Manifest other;
    other.cases.push_back({"neg-0002@57", Label::Negative, 57, 0.0, "y"});
    CHECK_THROWS_AS(scores_from_slices(slices, other), Error);
  }

  TEST_CASE("slice scores outside [0, 1] name the row") {
    TempDir dir("badslices");
    std::ofstream(dir / "s.csv") << "patient_id,slice_index,score\np,0,0.5\np,1,1.2\n";
    try {
      import_slice_scores(dir / "s.csv");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Io);
      CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
    std::ofstream(dir / "h.csv") << "id,score\n";
    CHECK_THROWS_AS(import_slice_scores(dir / "h.csv"), Error);
    std::ofstream(dir / "d.csv") << "patient_id,slice_index,score\np,0,0.5\np,0,0.6\n";
    CHECK_THROWS_AS(import_slice_scores(dir / "d.csv"), Error);
  }

  TEST_CASE("case scores and reports round-trip") {
    TempDir dir("report");
    const auto s = score_table(7);
    write_case_scores(s, dir / "scores.csv");
    const auto back = read_case_scores(dir / "scores.csv");
    REQUIRE(back.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(back[i].case_id == s[i].case_id);
      CHECK(back[i].label == s[i].label);
      CHECK(back[i].score == s[i].score);
      CHECK(back[i].dose_mas == s[i].dose_mas);
      CHECK(back[i].lesion_fraction == s[i].lesion_fraction);
    }

    const auto r = build_report(s, two_doses());
    emit_report(r, dir / "a");
    emit_report(build_report(back, two_doses()), dir / "b");
    CHECK(vitbench::testing::slurp(dir / "a" / "report.json") == vitbench::testing::slurp(dir / "b" / "report.json"));
    const auto j = nlohmann::json::parse(vitbench::testing::slurp(dir / "a" / "report.json"));
    CHECK(j["overall"]["auc"].get<double>() == r.overall.roc.auc);
    CHECK(j["by_dose"].contains("28.5"));
    CHECK(j["by_extent"]["higher"]["n_neg"] == r.overall.roc.n_neg);
    CHECK(std::filesystem::exists(dir / "a" / "roc_extent_lower.csv"));
  }

  TEST_CASE("evaluation with a fresh model gives AUC one half, serial or parallel") {
    Manifest m = patients_manifest(12);
    auto load = [](const CaseRecord& c) {
      const float v = c.label == Label::Positive ? 0.8f : 0.2f;
      return Volume3D::filled({8, 16, 16}, {5, 2, 2}, v, Domain::Unit);
    };
    Rng rng(8);
    const auto fresh = init_params<float>(8, 16, rng);
    const auto s = evaluate_cases(fresh, m, std::nullopt, load);
    REQUIRE(s.size() == 12);
    for (const auto& c : s) CHECK(c.score == 0.5);
    CHECK(auc(to_scored(s)) == 0.5);

    auto trained = fresh;
    for (auto& w : trained.head.weight) w = 0.3f;
    for (auto& b : trained.head.bn.beta) b = 0.1f;
    const auto serial = evaluate_cases(trained, m, std::nullopt, load, 1);
    const auto parallel = evaluate_cases(trained, m, std::nullopt, load, 4);
    for (std::size_t i = 0; i < serial.size(); ++i) {
      CHECK(serial[i].case_id == parallel[i].case_id);
      CHECK(serial[i].score == parallel[i].score);
    }

    m = split_by_patient(m);
    CHECK(evaluate_cases(fresh, m, Split::Test, load).size() == 3);
  }
}
