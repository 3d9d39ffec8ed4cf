#include "vitbench/train.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vitbench/error.hpp"
#include "vitbench/format.hpp"
#include "vitbench/metrics.hpp"
#include "vitbench/parallel.hpp"

namespace vitbench {

CaseLoader file_loader(std::filesystem::path root, Preprocessing pp) {
  return [root = std::move(root), pp = std::move(pp)](const CaseRecord& c) {
    return preprocess(read_volume(root / c.path), pp);
  };
}

std::vector<double> predict(const ModelParams& params, std::span<const Volume3D> patches, std::size_t batch_size,
                            std::size_t jobs) {
  require(batch_size >= 1, "batch size must be >= 1");
  std::vector<double> out(patches.size());
  const std::size_t batches = (patches.size() + batch_size - 1) / batch_size;
  parallel_for(batches, jobs, [&](std::size_t b) {
    const std::size_t lo = b * batch_size, hi = std::min(patches.size(), lo + batch_size);
    const auto batch = make_batch<float>(patches.subspan(lo, hi - lo));
    const auto r = forward(params, batch, Mode::Eval);
    for (std::size_t i = lo; i < hi; ++i) out[i] = r.probs[i - lo];
  });
  return out;
}

namespace {

struct SplitData {
  std::vector<Volume3D> patches;
  std::vector<int> labels;
};

SplitData load_split(const Manifest& m, Split split, const CaseLoader& load, std::size_t jobs) {
  std::vector<const CaseRecord*> cases;
  for (const auto& c : m.cases)
    if (c.split == split) cases.push_back(&c);
  std::vector<std::optional<Volume3D>> slots(cases.size());
  parallel_for(cases.size(), jobs, [&](std::size_t i) { slots[i].emplace(load(*cases[i])); });
  SplitData d;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    d.patches.push_back(std::move(*slots[i]));
    d.labels.push_back(cases[i]->label == Label::Positive ? 1 : 0);
  }
  return d;
}

void require_both_classes(const std::vector<int>& labels, const char* split) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == static_cast<std::ptrdiff_t>(labels.size()))
    fail(ErrorKind::Degenerate, std::string(split) + " split has a single class");
}

}  // namespace

TrainResult train(const Manifest& manifest, const TrainConfig& cfg, const CaseLoader& load, std::size_t jobs,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  SplitData tr = load_split(manifest, Split::Train, load, jobs);
  SplitData va = load_split(manifest, Split::Val, load, jobs);
  require(!tr.patches.empty(), "manifest has no training cases");
  require(!va.patches.empty(), "manifest has no validation cases");
  require_both_classes(tr.labels, "train");
  require_both_classes(va.labels, "validation");

  TrainResult result;
  const auto n_pos = static_cast<std::size_t>(std::count(tr.labels.begin(), tr.labels.end(), 1));
  result.weights = cfg.class_weights.value_or(inverse_frequency_weights(n_pos, tr.labels.size() - n_pos));

  Rng init_rng = make_rng(cfg.seed, "init");
  Rng shuffle_rng = make_rng(cfg.seed, "shuffle");
  Rng dropout_rng = make_rng(cfg.seed, "dropout");
  ModelParams params = init_params<float>(cfg.c1, cfg.c2, init_rng);

  std::vector<std::size_t> order(tr.patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    double lr = lr_schedule(cfg, step);
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<Volume3D> patches;
      std::vector<int> labels;
      for (std::size_t i = lo; i < hi; ++i) {
        patches.push_back(tr.patches[order[i]]);
        labels.push_back(tr.labels[order[i]]);
      }
      const auto batch = make_batch<float>(patches);
      auto fwd = forward(params, batch, Mode::Train, &dropout_rng, cfg.dropout_p);
      const double loss = wcel<float>(fwd.probs, labels, result.weights);
      if (!std::isfinite(loss)) fail(ErrorKind::Numeric, "training diverged: non-finite loss at epoch " + std::to_string(epoch));
      const auto grads = backward(params, *fwd.cache, labels, result.weights);
      update_running_stats(params, *fwd.cache);
      lr = lr_schedule(cfg, step);
      sgd_step(params, grads, lr);
      ++step;
      loss_sum += loss;
      ++batches;
    }

    const auto val_scores = predict(params, va.patches, cfg.batch_size, jobs);
    const double val_auc = auc(ScoredLabels{val_scores, va.labels});
    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), val_auc, lr};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (!have_best || val_auc > result.best_val_auc) {
      have_best = true;
      result.best_val_auc = val_auc;
      result.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "epoch,loss,val_auc,lr\n";
  for (const auto& r : history)
    os << r.epoch << ',' << format_double(r.loss) << ',' << format_double(r.val_auc) << ',' << format_double(r.lr) << '\n';
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << os.str();
}

}  // namespace vitbench
