#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "vitbench/model.hpp"
#include "vitbench/phantom.hpp"

namespace vitbench {

// Produces the network input (a unit-domain patch) for one case.
using CaseLoader = std::function<Volume3D(const CaseRecord&)>;

// Reads <root>/<case.path> and applies the preprocessing chain.
CaseLoader file_loader(std::filesystem::path root, Preprocessing pp);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean training loss over the epoch's batches
  double val_auc = 0.0;
  double lr = 0.0;        // learning rate of the epoch's last step
};

struct TrainResult {
  ModelParams params;  // parameters at the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
  ClassWeights weights;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Eval-mode scores for a list of patches, batched.
std::vector<double> predict(const ModelParams& params, std::span<const Volume3D> patches, std::size_t batch_size = 4,
                            std::size_t jobs = 1);

// Trains on the cases marked Split::Train, selecting the epoch with the best
// validation AUC (strictly greater wins, so ties keep the earlier epoch).
TrainResult train(const Manifest& manifest, const TrainConfig& cfg, const CaseLoader& load, std::size_t jobs = 1,
                  const EpochCallback& on_epoch = {});

void write_history_csv(std::span<const EpochRecord> history, const std::filesystem::path& path);

}  // namespace vitbench
