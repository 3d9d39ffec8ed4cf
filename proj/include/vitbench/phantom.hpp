#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vitbench/rng.hpp"
#include "vitbench/volume.hpp"

namespace vitbench {

inline constexpr const char* kGeneratorVersion = "vitbench-phantom/1";
inline constexpr double kExtentThreshold = 0.0265;

// Geometric chest surrogate: an ellipsoidal body with two ellipsoidal lungs,
// plus spherical lesions of a single intensity.
struct PhantomSpec {
  Dims dims{96, 192, 192};
  Spacing spacing{5.0, 2.0, 2.0};
  double body_hu = 40.0;
  double lung_hu = -850.0;
  double air_hu = -1000.0;
  double lesion_hu = -400.0;
  double target_lesion_fraction = 0.0;
  std::pair<double, double> lesion_radius_mm{4.0, 12.0};
  std::uint64_t seed = 0;

  void validate() const;
};

// Additive Gaussian noise with std = sigma_ref * sqrt(dose_ref / dose).
struct NoiseModel {
  double sigma_ref = 25.0;
  double dose_ref = 57.0;

  void validate() const;
  double sigma_at(double dose_mas) const;
};

struct Anatomy {
  Volume3D volume;
  Mask3D lung;
  Mask3D body;
};

Anatomy build_anatomy(const PhantomSpec& spec, Rng& rng);

struct LesionResult {
  Volume3D volume;
  Mask3D lesion;
  double achieved_fraction;
  std::size_t spheres;
};

LesionResult insert_lesions(const Volume3D& vol, const Mask3D& lung, double target_fraction, const PhantomSpec& spec,
                            Rng& rng);

double lesion_fraction(const Mask3D& lesion, const Mask3D& lung);

Volume3D simulate_ct_noise(const Volume3D& vol, double dose_mas, const NoiseModel& model, Rng& rng);

// ---------------------------------------------------------------------------
// Datasets

enum class Label { Negative = 0, Positive = 1 };
enum class Split { Train, Val, Test, None };

std::string to_string(Label l);  // "pos" / "neg"
std::string to_string(Split s);  // "train" / "val" / "test" / "none"
Label label_from_string(const std::string& s);
Split split_from_string(const std::string& s);

struct CaseRecord {
  std::string case_id;
  Label label = Label::Negative;
  double dose_mas = 0.0;
  double lesion_fraction = 0.0;
  std::string path;  // relative to the manifest directory
  Split split = Split::None;

  void validate() const;
};

// Cases of one anatomy imaged at several doses share a patient id: the part of
// case_id before '@'.
std::string patient_id(const CaseRecord& c);

struct CountRow {
  Label label;
  double dose_mas;
  std::size_t n;
  friend bool operator==(const CountRow&, const CountRow&) = default;
};

// Parses "pos:50@28.5,neg:40@28.5,...".
std::vector<CountRow> parse_counts(const std::string& text);
std::string format_counts(const std::vector<CountRow>& rows);
// Composition of the simulated dataset: 50 positive / 40 normal at each of
// 28.5 and 57 mAs.
std::vector<CountRow> cvit_covid_counts();

struct Manifest {
  std::vector<CaseRecord> cases;
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
  std::vector<CountRow> counts;

  void validate() const;
};

// manifest.csv plus manifest.json sidecar in `dir`.
void write_manifest(const Manifest& m, const std::filesystem::path& dir);
Manifest read_manifest(const std::filesystem::path& dir);

// Lesion fractions for positives: log-normal with the given mode, truncated
// to [lo, hi] by rejection; uniform on [lo, hi]; or an even mixture of
// uniform [lo, low_hi] and uniform [high_lo, hi].
struct ExtentDistribution {
  enum class Kind { LogNormal, Uniform, TwoBand };
  Kind kind = Kind::LogNormal;
  double mode = kExtentThreshold;
  double sigma = 0.7;
  double lo = 0.002;
  double hi = 0.25;
  double low_hi = 0.02;  // two-band only
  double high_lo = 0.1;

  void validate() const;
  double sample(Rng& rng) const;
};

struct GenerateOptions {
  PhantomSpec base_spec;
  NoiseModel noise;
  ExtentDistribution extent;
  // When set, positives whose target extent is below extent_threshold get this
  // lesion intensity instead of base_spec.lesion_hu.
  std::optional<double> low_extent_lesion_hu;
  double extent_threshold = kExtentThreshold;
  // false: case k of a label reuses anatomy k at every dose level.
  bool independent_anatomies = false;
  bool write_masks = true;
  std::size_t jobs = 1;
};

// Writes volumes/<case_id>{,_lung,_lesion}.vvol plus the manifest files into
// out_dir. Output bytes depend only on (counts, options, seed).
Manifest generate_dataset(const std::vector<CountRow>& counts, const GenerateOptions& opts, std::uint64_t seed,
                          const std::filesystem::path& out_dir);

}  // namespace vitbench
