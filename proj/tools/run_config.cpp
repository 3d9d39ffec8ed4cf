#include "run_config.hpp"

#include <cstdlib>
#include <fstream>

#include "vitbench/error.hpp"
#include "vitbench/format.hpp"

namespace vitbench::cli {

Json default_config() {
  return Json::parse(R"({
    "seed": null,
    "phantom": {
      "dims": [96, 192, 192],
      "spacing_mm": [5.0, 2.0, 2.0],
      "body_hu": 40.0,
      "lung_hu": -850.0,
      "air_hu": -1000.0,
      "lesion_hu": -400.0,
      "lesion_radius_mm": [4.0, 12.0],
      "low_extent_lesion_hu": null,
      "independent_anatomies": false,
      "write_masks": true
    },
    "noise": {"sigma_ref": 25.0, "dose_ref": 57.0},
    "extent": {"kind": "lognormal", "mode": 0.0265, "sigma": 0.7, "lo": 0.002, "hi": 0.25, "low_hi": 0.02, "high_lo": 0.1},
    "dataset": {"counts": "pos:50@28.5,neg:40@28.5,pos:50@57,neg:40@57"},
    "preprocess": {
      "crop_body": false,
      "resample": true,
      "target_spacing_mm": [5.0, 2.0, 2.0],
      "clip_lo": -1000.0,
      "clip_hi": 800.0,
      "normalize": true,
      "patch": [96, 160, 160]
    },
    "split": {"ratios": [0.6, 0.2, 0.2]},
    "model": {"c1": 8, "c2": 16},
    "train": {
      "lr0": 0.01,
      "decay_rate": 0.9,
      "decay_steps": 100,
      "epochs": 20,
      "batch_size": 4,
      "dropout_p": 0.5,
      "w_pos": null,
      "w_neg": null
    },
    "eval": {"extent_threshold": 0.0265, "dose_levels": [28.5, 57.0], "top_fraction": 0.1, "alpha": 0.05}
  })");
}

namespace {

// Rejects keys absent from the defaults so typos fail loudly.
void check_known(const Json& value, const Json& schema, const std::string& prefix) {
  if (!value.is_object() || !schema.is_object()) return;
  for (const auto& [key, v] : value.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!schema.contains(key)) fail(ErrorKind::Invalid, "unknown config key '" + path + "'");
    check_known(v, schema[key], path);
  }
}

void apply_override(Json& doc, const std::string& text) {
  const auto eq = text.find('=');
  require(eq != std::string::npos && eq > 0, "override '" + text + "' must look like key.path=value");
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  Json* node = &doc;
  const auto parts = split(key, '.');
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require(!parts[i].empty(), "override key '" + key + "' has an empty component");
    if (i + 1 == parts.size()) {
      (*node)[parts[i]] = value;
    } else {
      node = &(*node)[parts[i]];
    }
  }
}

template <typename T>
T get(const Json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Invalid, std::string("config '") + section + "." + key + "' has the wrong type");
  }
}

template <typename T, std::size_t N>
std::array<T, N> get_array(const Json& doc, const char* section, const char* key) {
  const auto v = get<std::vector<T>>(doc, section, key);
  if (v.size() != N)
    fail(ErrorKind::Invalid, std::string("config '") + section + "." + key + "' needs " + std::to_string(N) + " values");
  std::array<T, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

}  // namespace

RunConfig RunConfig::load(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed_flag) {
  const Json defaults = default_config();
  Json doc = defaults;
  if (file) {
    std::ifstream is(*file);
    if (!is) fail(ErrorKind::Invalid, "cannot open config '" + file->string() + "'");
    Json user;
    try {
      user = Json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Invalid, "config '" + file->string() + "' is not valid JSON: " + e.what());
    }
    check_known(user, defaults, "");
    doc.merge_patch(user);
  }
  for (const auto& o : overrides) {
    Json patch = Json::object();
    apply_override(patch, o);
    check_known(patch, defaults, "");
    // merge_patch treats null as deletion; write nulls directly instead.
    apply_override(doc, o);
  }

  RunConfig rc;
  rc.doc = std::move(doc);
  if (seed_flag) {
    rc.seed = *seed_flag;
  } else if (!rc.doc["seed"].is_null()) {
    try {
      rc.seed = rc.doc["seed"].get<std::uint64_t>();
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::Invalid, "config 'seed' must be a non-negative integer");
    }
  } else if (const char* env = std::getenv("VITBENCH_SEED"); env && *env) {
    const long long v = parse_int(env, "VITBENCH_SEED");
    require(v >= 0, "VITBENCH_SEED must be non-negative");
    rc.seed = static_cast<std::uint64_t>(v);
  }
  rc.doc["seed"] = rc.seed;

  // Fail on type errors now rather than halfway through a command.
  (void)rc.phantom();
  (void)rc.noise();
  (void)rc.extent();
  (void)rc.counts();
  (void)rc.preprocessing();
  (void)rc.split_ratios();
  (void)rc.train();
  (void)rc.eval();
  return rc;
}

PhantomSpec RunConfig::phantom() const {
  PhantomSpec s;
  s.dims = get_array<std::size_t, 3>(doc, "phantom", "dims");
  s.spacing = get_array<double, 3>(doc, "phantom", "spacing_mm");
  s.body_hu = get<double>(doc, "phantom", "body_hu");
  s.lung_hu = get<double>(doc, "phantom", "lung_hu");
  s.air_hu = get<double>(doc, "phantom", "air_hu");
  s.lesion_hu = get<double>(doc, "phantom", "lesion_hu");
  const auto r = get_array<double, 2>(doc, "phantom", "lesion_radius_mm");
  s.lesion_radius_mm = {r[0], r[1]};
  s.seed = seed;
  s.validate();
  return s;
}

NoiseModel RunConfig::noise() const {
  NoiseModel n{get<double>(doc, "noise", "sigma_ref"), get<double>(doc, "noise", "dose_ref")};
  n.validate();
  return n;
}

ExtentDistribution RunConfig::extent() const {
  ExtentDistribution e;
  const auto kind = get<std::string>(doc, "extent", "kind");
  if (kind == "lognormal")
    e.kind = ExtentDistribution::Kind::LogNormal;
  else if (kind == "uniform")
    e.kind = ExtentDistribution::Kind::Uniform;
  else if (kind == "two-band")
    e.kind = ExtentDistribution::Kind::TwoBand;
  else
    fail(ErrorKind::Invalid, "extent.kind must be 'lognormal', 'uniform' or 'two-band'");
  e.mode = get<double>(doc, "extent", "mode");
  e.sigma = get<double>(doc, "extent", "sigma");
  e.lo = get<double>(doc, "extent", "lo");
  e.hi = get<double>(doc, "extent", "hi");
  e.low_hi = get<double>(doc, "extent", "low_hi");
  e.high_lo = get<double>(doc, "extent", "high_lo");
  e.validate();
  return e;
}

GenerateOptions RunConfig::generate_options(std::size_t jobs) const {
  GenerateOptions o;
  o.base_spec = phantom();
  o.noise = noise();
  o.extent = extent();
  const auto& low = doc.at("phantom").at("low_extent_lesion_hu");
  if (!low.is_null()) o.low_extent_lesion_hu = get<double>(doc, "phantom", "low_extent_lesion_hu");
  o.extent_threshold = get<double>(doc, "eval", "extent_threshold");
  o.independent_anatomies = get<bool>(doc, "phantom", "independent_anatomies");
  o.write_masks = get<bool>(doc, "phantom", "write_masks");
  o.jobs = jobs;
  return o;
}

std::vector<CountRow> RunConfig::counts() const { return parse_counts(get<std::string>(doc, "dataset", "counts")); }

Preprocessing RunConfig::preprocessing() const {
  Preprocessing pp;
  pp.crop_body = get<bool>(doc, "preprocess", "crop_body");
  if (get<bool>(doc, "preprocess", "resample"))
    pp.target_spacing = get_array<double, 3>(doc, "preprocess", "target_spacing_mm");
  else
    pp.target_spacing.reset();
  pp.clip_lo = get<double>(doc, "preprocess", "clip_lo");
  pp.clip_hi = get<double>(doc, "preprocess", "clip_hi");
  require(pp.clip_lo < pp.clip_hi, "preprocess.clip_lo must be < clip_hi");
  pp.normalize = get<bool>(doc, "preprocess", "normalize");
  pp.patch = get_array<std::size_t, 3>(doc, "preprocess", "patch");
  for (auto d : pp.patch) require(d >= 1, "preprocess.patch components must be >= 1");
  return pp;
}

std::array<double, 3> RunConfig::split_ratios() const { return get_array<double, 3>(doc, "split", "ratios"); }

TrainConfig RunConfig::train() const {
  TrainConfig t;
  t.lr0 = get<double>(doc, "train", "lr0");
  t.decay_rate = get<double>(doc, "train", "decay_rate");
  t.decay_steps = get<double>(doc, "train", "decay_steps");
  t.epochs = get<std::size_t>(doc, "train", "epochs");
  t.batch_size = get<std::size_t>(doc, "train", "batch_size");
  t.dropout_p = get<double>(doc, "train", "dropout_p");
  const auto& wp = doc.at("train").at("w_pos");
  const auto& wn = doc.at("train").at("w_neg");
  require(wp.is_null() == wn.is_null(), "set both train.w_pos and train.w_neg, or neither");
  if (!wp.is_null()) t.class_weights = ClassWeights{get<double>(doc, "train", "w_pos"), get<double>(doc, "train", "w_neg")};
  t.c1 = get<std::size_t>(doc, "model", "c1");
  t.c2 = get<std::size_t>(doc, "model", "c2");
  t.seed = seed;
  t.validate();
  return t;
}

EvalConfig RunConfig::eval() const {
  EvalConfig e;
  e.extent_threshold = get<double>(doc, "eval", "extent_threshold");
  e.dose_levels = get<std::vector<double>>(doc, "eval", "dose_levels");
  e.top_fraction = get<double>(doc, "eval", "top_fraction");
  e.alpha = get<double>(doc, "eval", "alpha");
  e.seed = seed;
  e.validate();
  return e;
}

Json RunConfig::echo() const { return doc; }

}  // namespace vitbench::cli
