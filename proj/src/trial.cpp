#include "vitbench/trial.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vitbench/error.hpp"
#include "vitbench/format.hpp"
#include "vitbench/parallel.hpp"

namespace vitbench {

void EvalConfig::validate() const {
  require(extent_threshold > 0.0 && extent_threshold < 1.0, "eval.extent_threshold must be in (0, 1)");
  require(top_fraction > 0.0 && top_fraction <= 1.0, "eval.top_fraction must be in (0, 1]");
  require(alpha > 0.0 && alpha < 1.0, "eval.alpha must be in (0, 1)");
  for (std::size_t i = 0; i < dose_levels.size(); ++i) {
    require(std::isfinite(dose_levels[i]) && dose_levels[i] > 0.0, "eval.dose_levels must be positive");
    for (std::size_t j = 0; j < i; ++j) require(dose_levels[i] != dose_levels[j], "eval.dose_levels must be distinct");
  }
}

Manifest split_by_patient(const Manifest& m, std::array<double, 3> ratios, std::uint64_t seed) {
  for (double r : ratios) require(r > 0.0 && std::isfinite(r), "split ratios must be positive");
  require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) <= 1e-9, "split ratios must sum to 1");

  std::vector<std::string> patients;
  std::set<std::string> seen;
  for (const auto& c : m.cases) {
    const auto pid = patient_id(c);
    if (seen.insert(pid).second) patients.push_back(pid);
  }
  require(patients.size() >= 3, "patient-level split needs at least 3 patients");

  Rng rng = make_rng(seed, "split");
  shuffle(patients.begin(), patients.end(), rng);
  const double n = static_cast<double>(patients.size());
  const auto n_train = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));

  std::map<std::string, Split> assign;
  for (std::size_t i = 0; i < patients.size(); ++i)
    assign[patients[i]] = i < n_train ? Split::Train : i < n_train + n_val ? Split::Val : Split::Test;

  Manifest out = m;
  for (auto& c : out.cases) c.split = assign.at(patient_id(c));
  return out;
}

std::vector<CaseScore> evaluate_cases(const ModelParams& params, const Manifest& m, std::optional<Split> split,
                                      const CaseLoader& load, std::size_t jobs) {
  std::vector<const CaseRecord*> cases;
  for (const auto& c : m.cases)
    if (!split || c.split == *split) cases.push_back(&c);
  require(!cases.empty(), "no cases in the requested split");

  std::vector<CaseScore> out(cases.size());
  parallel_for(cases.size(), jobs, [&](std::size_t i) {
    const CaseRecord& c = *cases[i];
    const Volume3D patch = load(c);
    const auto batch = make_batch<float>(std::span<const Volume3D>(&patch, 1));
    const auto r = forward(params, batch, Mode::Eval);
    out[i] = {c.case_id, c.label, static_cast<double>(r.probs[0]), c.dose_mas, c.lesion_fraction};
  });
  std::sort(out.begin(), out.end(), [](const CaseScore& a, const CaseScore& b) { return a.case_id < b.case_id; });
  return out;
}

std::vector<SliceScores> import_slice_scores(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open slice-score table '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || trim(line) != "patient_id,slice_index,score")
    fail(ErrorKind::Io, "'" + path.string() + "' lacks the header patient_id,slice_index,score");

  std::map<std::string, std::map<long long, double>> table;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const std::string where = "slice-score row " + std::to_string(row);
    const auto f = split(trim(line), ',');
    if (f.size() != 3 || trim(f[0]).empty()) fail(ErrorKind::Io, where + ": expected patient_id,slice_index,score");
    long long idx = 0;
    double score = 0.0;
    try {
      idx = parse_int(f[1], "slice_index");
      score = parse_double(f[2], "score");
    } catch (const Error& e) {
      fail(ErrorKind::Io, where + ": " + e.what());
    }
    if (!(score >= 0.0 && score <= 1.0)) fail(ErrorKind::Io, where + ": score " + std::string(trim(f[2])) + " outside [0, 1]");
    if (!table[std::string(trim(f[0]))].emplace(idx, score).second)
      fail(ErrorKind::Io, where + ": duplicate slice_index for patient " + std::string(trim(f[0])));
  }
  std::vector<SliceScores> out;
  for (auto& [pid, slices] : table) {
    SliceScores s{pid, {}};
    for (const auto& [idx, score] : slices) s.scores.push_back(score);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<CaseScore> scores_from_slices(const std::vector<SliceScores>& slices, const Manifest& m,
                                          double top_fraction) {
  std::map<std::string, const CaseRecord*> by_id;
  for (const auto& c : m.cases) by_id[c.case_id] = &c;
  std::vector<CaseScore> out;
  for (const auto& s : slices) {
    const auto it = by_id.find(s.patient_id);
    if (it == by_id.end()) fail(ErrorKind::Invalid, "patient '" + s.patient_id + "' is not in the manifest");
    const CaseRecord& c = *it->second;
    out.push_back({c.case_id, c.label, patient_score_top_fraction(s, top_fraction), c.dose_mas, c.lesion_fraction});
  }
  std::sort(out.begin(), out.end(), [](const CaseScore& a, const CaseScore& b) { return a.case_id < b.case_id; });
  return out;
}

ScoredLabels to_scored(const std::vector<CaseScore>& scores) {
  ScoredLabels d;
  for (const auto& s : scores) {
    d.scores.push_back(s.score);
    d.labels.push_back(s.label == Label::Positive ? 1 : 0);
  }
  return d;
}

namespace {

StratumReport score_stratum(const std::string& key, const std::vector<CaseScore>& cases, double alpha) {
  const ScoredLabels d = to_scored(cases);
  const std::size_t np = d.n_pos(), nn = d.n_neg();
  if (np == 0 || nn == 0) fail(ErrorKind::Degenerate, "stratum '" + key + "' is single-class");
  if (np < 2 || nn < 2)
    fail(ErrorKind::Degenerate, "stratum '" + key + "' needs at least 2 cases per class for DeLong intervals");
  return {key, delong_ci(d, alpha)};
}

bool same_dose(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

}  // namespace

StratumReport overall_report(const std::vector<CaseScore>& scores, const EvalConfig& cfg) {
  cfg.validate();
  return score_stratum("overall", scores, cfg.alpha);
}

std::vector<StratumReport> stratify_by_dose(const std::vector<CaseScore>& scores, const EvalConfig& cfg) {
  cfg.validate();
  for (const auto& s : scores) {
    const bool known = std::any_of(cfg.dose_levels.begin(), cfg.dose_levels.end(),
                                   [&](double d) { return same_dose(s.dose_mas, d); });
    require(known, "case " + s.case_id + " has dose " + format_double(s.dose_mas) + " mAs, not among eval.dose_levels");
  }
  std::vector<StratumReport> out;
  for (double level : cfg.dose_levels) {
    std::vector<CaseScore> stratum;
    for (const auto& s : scores)
      if (same_dose(s.dose_mas, level)) stratum.push_back(s);
    if (stratum.empty()) continue;
    out.push_back(score_stratum(format_double(level), stratum, cfg.alpha));
  }
  return out;
}

std::vector<StratumReport> stratify_by_extent(const std::vector<CaseScore>& scores, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<CaseScore> negatives, lower, higher;
  for (const auto& s : scores) {
    if (s.label == Label::Negative)
      negatives.push_back(s);
    else
      (s.lesion_fraction >= cfg.extent_threshold ? higher : lower).push_back(s);
  }
  if (negatives.empty()) fail(ErrorKind::Degenerate, "extent strata need negatives");
  std::vector<StratumReport> out;
  for (auto [key, positives] : {std::pair{"lower", &lower}, std::pair{"higher", &higher}}) {
    if (positives->empty()) fail(ErrorKind::Degenerate, std::string("empty positive stratum '") + key + "'");
    std::vector<CaseScore> stratum = *positives;
    stratum.insert(stratum.end(), negatives.begin(), negatives.end());
    out.push_back(score_stratum(key, stratum, cfg.alpha));
  }
  return out;
}

EvalReport build_report(const std::vector<CaseScore>& scores, const EvalConfig& cfg) {
  return {cfg, overall_report(scores, cfg), stratify_by_dose(scores, cfg), stratify_by_extent(scores, cfg)};
}

void emit_report(const EvalReport& report, const std::filesystem::path& out_dir,
                 const nlohmann::ordered_json* run_config) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + out_dir.string() + "': " + ec.message());

  auto stratum = [&](const StratumReport& s, const std::string& csv) {
    write_roc_csv(s.roc.points, out_dir / csv);
    nlohmann::ordered_json j;
    j["n_pos"] = s.roc.n_pos;
    j["n_neg"] = s.roc.n_neg;
    j["auc"] = s.roc.auc;
    j["variance"] = s.roc.variance;
    j["ci"] = {s.roc.ci_lo, s.roc.ci_hi};
    j["roc_csv"] = csv;
    return j;
  };

  nlohmann::ordered_json doc;
  auto& cfg = doc["config"];
  cfg["extent_threshold"] = report.config.extent_threshold;
  cfg["dose_levels"] = report.config.dose_levels;
  cfg["top_fraction"] = report.config.top_fraction;
  cfg["alpha"] = report.config.alpha;
  cfg["seed"] = report.config.seed;
  if (run_config) cfg["run"] = *run_config;
  doc["overall"] = stratum(report.overall, "roc_overall.csv");
  doc["by_dose"] = nlohmann::ordered_json::object();
  for (const auto& s : report.by_dose) doc["by_dose"][s.key] = stratum(s, "roc_dose_" + s.key + ".csv");
  doc["by_extent"] = nlohmann::ordered_json::object();
  for (const auto& s : report.by_extent) doc["by_extent"][s.key] = stratum(s, "roc_extent_" + s.key + ".csv");

  std::ofstream os(out_dir / "report.json", std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write '" + (out_dir / "report.json").string() + "'");
  os << doc.dump(2) << '\n';
  if (!os) fail(ErrorKind::Io, "write failed for report.json");
}

void write_case_scores(const std::vector<CaseScore>& scores, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "case_id,label,score,dose_mas,lesion_fraction\n";
  for (const auto& s : scores)
    os << s.case_id << ',' << to_string(s.label) << ',' << format_double(s.score) << ',' << format_double(s.dose_mas)
       << ',' << format_double(s.lesion_fraction) << '\n';
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << os.str();
}

std::vector<CaseScore> read_case_scores(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || trim(line) != "case_id,label,score,dose_mas,lesion_fraction")
    fail(ErrorKind::Io, "'" + path.string() + "' lacks the case-score header");
  std::vector<CaseScore> out;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    try {
      if (f.size() != 5) throw Error(ErrorKind::Invalid, "expected 5 fields");
      CaseScore s{f[0], label_from_string(f[1]), parse_double(f[2], "score"), parse_double(f[3], "dose_mas"),
                  parse_double(f[4], "lesion_fraction")};
      require(s.score >= 0.0 && s.score <= 1.0, "score outside [0, 1]");
      out.push_back(std::move(s));
    } catch (const Error& e) {
      fail(ErrorKind::Io, "case-score row " + std::to_string(row) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vitbench
