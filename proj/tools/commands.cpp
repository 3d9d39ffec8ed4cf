#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "run_config.hpp"
#include "vitbench/error.hpp"
#include "vitbench/format.hpp"
#include "vitbench/model.hpp"
#include "vitbench/phantom.hpp"
#include "vitbench/train.hpp"
#include "vitbench/trial.hpp"

namespace vitbench::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::size_t jobs = 1;

  RunConfig load() const {
    return RunConfig::load(config.empty() ? std::nullopt : std::optional<fs::path>(config), overrides,
                           seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt);
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration (unknown keys are rejected)");
  app->add_option("--set", c.overrides, "Override one config key, e.g. --set train.lr0=0.005 (repeatable)")
      ->allow_extra_args(false);
  c.seed_opt = app->add_option("--seed", c.seed, "Master seed (default: config 'seed', then $VITBENCH_SEED, then 0)");
  app->add_option("--jobs", c.jobs, "Worker threads for per-case work; outputs do not depend on it")
      ->check(CLI::PositiveNumber);
}

std::vector<CountRow> preset_counts(const std::string& name) {
  if (name == "cvit-covid") return cvit_covid_counts();
  // Composition of the two clinical test sets, rendered at the reference dose.
  if (name == "mosmed") return parse_counts("pos:856@57,neg:254@57");
  if (name == "covid-ct-md") return parse_counts("pos:169@57,neg:136@57");
  fail(ErrorKind::Invalid, "unknown preset '" + name + "' (cvit-covid, mosmed, covid-ct-md)");
}

void print_counts(std::ostream& out, const Manifest& m) {
  std::size_t pos = 0;
  for (const auto& c : m.cases) pos += c.label == Label::Positive;
  out << m.cases.size() << " cases (" << pos << " positive, " << m.cases.size() - pos << " negative)\n";
}

void write_split_table(const Manifest& m, const fs::path& path) {
  std::ostringstream os;
  os << "case_id,split\n";
  for (const auto& c : m.cases) os << c.case_id << ',' << to_string(c.split) << '\n';
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << os.str();
}

void ensure_dir(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + dir.string() + "': " + ec.message());
}

void print_report(std::ostream& out, const EvalReport& r) {
  auto line = [&](const std::string& name, const StratumReport& s) {
    out << name << ": AUC " << format_double(s.roc.auc) << " [" << format_double(s.roc.ci_lo) << ", "
        << format_double(s.roc.ci_hi) << "] (" << s.roc.n_pos << " pos, " << s.roc.n_neg << " neg)\n";
  };
  line("overall", r.overall);
  for (const auto& s : r.by_dose) line("dose " + s.key, s);
  for (const auto& s : r.by_extent) line("extent " + s.key, s);
}

// --- gen -------------------------------------------------------------------

struct GenArgs {
  Common common;
  std::string preset;
  std::string counts;
  std::string out;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  const RunConfig rc = a.common.load();
  std::vector<CountRow> counts = rc.counts();
  if (!a.preset.empty()) counts = preset_counts(a.preset);
  if (!a.counts.empty()) counts = parse_counts(a.counts);
  const Manifest m = generate_dataset(counts, rc.generate_options(a.common.jobs), rc.seed, a.out);
  out << "wrote " << a.out << ": ";
  print_counts(out, m);
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data;
  std::string out;
  std::string history;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const RunConfig rc = a.common.load();
  const TrainConfig tc = rc.train();
  const Preprocessing pp = rc.preprocessing();
  const Manifest split = split_by_patient(read_manifest(a.data), rc.split_ratios(), rc.seed);

  std::size_t n[3] = {0, 0, 0};
  for (const auto& c : split.cases)
    if (c.split != Split::None) ++n[static_cast<int>(c.split)];
  out << "split: " << n[0] << " train / " << n[1] << " val / " << n[2] << " test cases\n";

  const auto result = train(split, tc, file_loader(a.data, pp), a.common.jobs, [&](const EpochRecord& r) {
    out << "epoch " << r.epoch << "/" << tc.epochs << "  loss " << format_double(r.loss) << "  val_auc "
        << format_double(r.val_auc) << "  lr " << format_double(r.lr) << '\n'
        << std::flush;
  });

  const fs::path ckpt(a.out);
  ensure_dir(ckpt.parent_path());
  write_checkpoint(result.params, CheckpointInfo{pp.patch, result.best_epoch, result.best_val_auc}, ckpt);
  const fs::path history = a.history.empty() ? ckpt.parent_path() / "history.csv" : fs::path(a.history);
  write_history_csv(result.history, history);
  write_split_table(split, ckpt.parent_path() / "split.csv");
  out << "best epoch " << result.best_epoch << " (val_auc " << format_double(result.best_val_auc) << "), wrote "
      << ckpt.string() << '\n';
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "all";
  std::string slice_scores;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const RunConfig rc = a.common.load();
  const EvalConfig ec = rc.eval();
  Manifest m = read_manifest(a.data);

  std::vector<CaseScore> scores;
  if (!a.slice_scores.empty()) {
    scores = scores_from_slices(import_slice_scores(a.slice_scores), m, ec.top_fraction);
  } else {
    require(!a.checkpoint.empty(), "eval needs --checkpoint or --slice-scores");
    std::optional<Split> which;
    if (a.split != "all") {
      which = split_from_string(a.split);
      m = split_by_patient(m, rc.split_ratios(), rc.seed);
    }
    CheckpointInfo info;
    const ModelParams params = read_checkpoint(a.checkpoint, &info);
    Preprocessing pp = rc.preprocessing();
    pp.patch = info.patch;
    scores = evaluate_cases(params, m, which, file_loader(a.data, pp), a.common.jobs);
  }

  // Scores first, so a degenerate stratum still leaves them for `report`.
  ensure_dir(a.out);
  write_case_scores(scores, fs::path(a.out) / "scores.csv");
  const EvalReport report = build_report(scores, ec);
  const Json echo = rc.echo();
  emit_report(report, a.out, &echo);
  print_report(out, report);
  return kExitOk;
}

// --- report ----------------------------------------------------------------

struct ReportArgs {
  Common common;
  std::string scores;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  const RunConfig rc = a.common.load();
  const auto scores = read_case_scores(a.scores);
  const EvalReport report = build_report(scores, rc.eval());
  const Json echo = rc.echo();
  emit_report(report, a.out, &echo);
  print_report(out, report);
  return kExitOk;
}

// --- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
  Common common;
  GradcheckOptions opts;
  double tol = 1e-4;
};

int cmd_gradcheck(GradcheckArgs a, std::ostream& out) {
  const RunConfig rc = a.common.load();
  a.opts.seed = rc.seed;
  const auto report = gradcheck(a.opts);
  for (const auto& g : report.groups)
    out << g.name << ": " << g.checked << " entries" << (g.kinks ? " (+" + std::to_string(g.kinks) + " at a ReLU kink)" : "")
        << ", max rel err " << format_double(g.max_rel_error) << '\n';
  out << "max relative error " << format_double(report.max_rel_error) << " (tol " << format_double(a.tol) << ")\n";
  if (report.checked == 0 || !(report.max_rel_error < a.tol)) {
    out << "FAIL\n";
    return kExitNumeric;
  }
  out << "PASS\n";
  return kExitOk;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Invalid: return kExitConfig;
    case ErrorKind::Io: return kExitIo;
    case ErrorKind::Numeric: return kExitNumeric;
    case ErrorKind::Degenerate: return kExitDegenerate;
  }
  return 1;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Virtual imaging trial harness: synthetic chest CT, a 3D residual CNN, and DeLong ROC analysis.",
               "vitbench"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a phantom dataset (volumes, masks, manifest)");
  add_common(g, gen.common);
  g->add_option("--preset", gen.preset, "Case composition: cvit-covid (50/40 at 28.5 and 57 mAs), mosmed, covid-ct-md");
  g->add_option("--counts", gen.counts, "Custom composition, e.g. pos:5@28.5,neg:5@28.5 (overrides --preset)");
  g->add_option("-o,--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Split by patient and train the 3D CNN");
  add_common(t, tr.common);
  t->add_option("--data", tr.data, "Dataset directory containing manifest.csv")->required();
  t->add_option("-o,--out", tr.out, "Checkpoint path to write")->required();
  t->add_option("--history", tr.history, "Per-epoch history CSV (default: history.csv next to the checkpoint)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score cases and write report.json, scores.csv and ROC curves");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Trained model checkpoint");
  e->add_option("--data", ev.data, "Dataset directory containing manifest.csv")->required();
  e->add_option("-o,--out", ev.out, "Report output directory")->required();
  e->add_option("--split", ev.split, "Cases to score: all, train, val or test (the patient split of train)")
      ->check(CLI::IsMember({"all", "train", "val", "test"}));
  e->add_option("--slice-scores", ev.slice_scores,
                "CSV patient_id,slice_index,score; patients scored by top-10% aggregation instead of the model");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Rebuild report.json and ROC curves from a scores.csv");
  add_common(r, rp.common);
  r->add_option("--scores", rp.scores, "scores.csv written by eval")->required();
  r->add_option("-o,--out", rp.out, "Report output directory")->required();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Compare backprop against central differences on a reduced model");
  add_common(c, gc.common);
  c->add_option("--eps", gc.opts.eps, "Finite-difference step")->check(CLI::PositiveNumber);
  c->add_option("--tol", gc.tol, "Pass threshold on the max relative error");
  c->add_option("--entries", gc.opts.max_entries_per_tensor, "Entries checked per tensor (0: all)");
  c->add_option("--batch", gc.opts.batch, "Batch size")->check(CLI::PositiveNumber);
  c->add_option("--c1", gc.opts.c1, "Channels at full resolution")->check(CLI::PositiveNumber);
  c->add_option("--c2", gc.opts.c2, "Channels at half resolution")->check(CLI::PositiveNumber);
  c->add_flag("--inject-nonfinite", gc.opts.inject_nonfinite, "Plant a NaN in the parameters (must fail)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*g) return cmd_gen(gen, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*r) return cmd_report(rp, out);
    if (*c) return cmd_gradcheck(gc, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code(ex.kind());
  } catch (const fs::filesystem_error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitIo;
  } catch (const nlohmann::json::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace vitbench::cli
