#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitbench/model.hpp"
#include "vitbench/phantom.hpp"
#include "vitbench/trial.hpp"
#include "vitbench/volume.hpp"

namespace vitbench::cli {

using Json = nlohmann::ordered_json;

// Every recognised key with its default value.
Json default_config();

// Merged view of the JSON config file, --set overrides, and the seed.
struct RunConfig {
  Json doc;
  std::uint64_t seed = 0;

  // defaults <- file <- overrides ("train.lr0=0.005"; values parsed as JSON,
  // falling back to a plain string). Seed precedence: explicit flag, then the
  // config's "seed", then $VITBENCH_SEED, then 0. Throws Error(Invalid) on
  // unknown keys or mistyped values.
  static RunConfig load(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                        std::optional<std::uint64_t> seed_flag);

  PhantomSpec phantom() const;
  NoiseModel noise() const;
  ExtentDistribution extent() const;
  GenerateOptions generate_options(std::size_t jobs) const;
  std::vector<CountRow> counts() const;
  Preprocessing preprocessing() const;
  std::array<double, 3> split_ratios() const;
  TrainConfig train() const;
  EvalConfig eval() const;

  // The resolved document with the seed filled in, for echoing into outputs.
  Json echo() const;
};

}  // namespace vitbench::cli
