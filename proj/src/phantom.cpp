#include "vitbench/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "vitbench/error.hpp"
#include "vitbench/format.hpp"
#include "vitbench/parallel.hpp"

namespace vitbench {

void PhantomSpec::validate() const {
  for (auto d : dims) require(d > 0, "phantom dims must be positive");
  for (auto s : spacing) require(std::isfinite(s) && s > 0.0, "phantom spacing must be finite and > 0");
  require(target_lesion_fraction >= 0.0 && target_lesion_fraction < 1.0, "target_lesion_fraction must be in [0, 1)");
  require(lesion_hu > lung_hu && lesion_hu < body_hu, "lesion_hu must lie strictly between lung_hu and body_hu");
  require(lesion_radius_mm.first > 0.0 && lesion_radius_mm.first <= lesion_radius_mm.second,
          "lesion radius range must be positive and ordered");
}

void NoiseModel::validate() const {
  require(std::isfinite(sigma_ref) && sigma_ref >= 0.0, "noise sigma_ref must be >= 0");
  require(std::isfinite(dose_ref) && dose_ref > 0.0, "noise dose_ref must be > 0");
}

double NoiseModel::sigma_at(double dose_mas) const {
  require(std::isfinite(dose_mas) && dose_mas > 0.0, "dose must be > 0 mAs");
  return sigma_ref * std::sqrt(dose_ref / dose_mas);
}

// ---------------------------------------------------------------------------
// Anatomy

namespace {

struct Ellipsoid {
  std::array<double, 3> center;  // normalized coordinates in [-1, 1]
  std::array<double, 3> semi;

  bool contains(const std::array<double, 3>& u) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (u[a] - center[a]) / semi[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

constexpr Ellipsoid kBody{{0.0, 0.0, 0.0}, {0.92, 0.80, 0.92}};
constexpr Ellipsoid kLungLeft{{0.05, -0.05, -0.42}, {0.62, 0.48, 0.30}};
constexpr Ellipsoid kLungRight{{0.05, -0.05, 0.42}, {0.62, 0.48, 0.30}};
constexpr double kJitter = 0.05;

Ellipsoid jitter(const Ellipsoid& e, Rng& rng) {
  Ellipsoid out = e;
  for (int a = 0; a < 3; ++a) out.center[a] += uniform(rng, -kJitter, kJitter) * e.semi[a];
  for (int a = 0; a < 3; ++a) out.semi[a] *= uniform(rng, 1.0 - kJitter, 1.0 + kJitter);
  return out;
}

double normalized(std::size_t i, std::size_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n) * 2.0 - 1.0; }

}  // namespace

Anatomy build_anatomy(const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  for (auto d : spec.dims) require(d >= 16, "dims too small to fit lungs (need >= 16 voxels per axis)");
  const Ellipsoid left = jitter(kLungLeft, rng);
  const Ellipsoid right = jitter(kLungRight, rng);

  const auto [nz, ny, nx] = spec.dims;
  const std::size_t n = voxel_count(spec.dims);
  std::vector<float> vox(n, static_cast<float>(spec.air_hu));
  std::vector<std::uint8_t> lung(n, 0), body(n, 0);
  std::size_t i = 0;
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y)
      for (std::size_t x = 0; x < nx; ++x, ++i) {
        const std::array<double, 3> u{normalized(z, nz), normalized(y, ny), normalized(x, nx)};
        if (!kBody.contains(u)) continue;
        body[i] = 1;
        vox[i] = static_cast<float>(spec.body_hu);
        if (left.contains(u) || right.contains(u)) {
          lung[i] = 1;
          vox[i] = static_cast<float>(spec.lung_hu);
        }
      }
  return {Volume3D(spec.dims, spec.spacing, std::move(vox), Domain::HU), Mask3D(spec.dims, std::move(lung)),
          Mask3D(spec.dims, std::move(body))};
}

// ---------------------------------------------------------------------------
// Lesions

LesionResult insert_lesions(const Volume3D& vol, const Mask3D& lung, double target_fraction, const PhantomSpec& spec,
                            Rng& rng) {
  require(target_fraction >= 0.0 && target_fraction < 1.0, "target lesion fraction must be in [0, 1)");
  require(vol.dims() == lung.dims(), "volume and lung mask dims differ");
  spec.validate();
  const std::size_t lung_count = lung.count();
  require(lung_count > 0, "empty lung mask");
  if (target_fraction == 0.0) return {vol, Mask3D::empty(vol.dims()), 0.0, 0};

  std::vector<std::size_t> lung_idx;
  lung_idx.reserve(lung_count);
  for (std::size_t i = 0; i < lung.size(); ++i)
    if (lung.at(i)) lung_idx.push_back(i);

  const auto [nz, ny, nx] = vol.dims();
  const auto [dz, dy, dx] = vol.spacing();
  const double voxel_mm3 = dz * dy * dx;
  const double target_voxels = target_fraction * static_cast<double>(lung_count);
  constexpr std::size_t kMaxSpheres = 10000;

  std::vector<std::uint8_t> lesion(lung.size(), 0);
  std::size_t lesion_count = 0;
  std::size_t spheres = 0;
  while (static_cast<double>(lesion_count) < target_voxels) {
    if (spheres == kMaxSpheres) fail(ErrorKind::Invalid, "target lesion fraction unreachable within 10000 spheres");
    ++spheres;
    double r = uniform(rng, spec.lesion_radius_mm.first, spec.lesion_radius_mm.second);
    // Shrink the last spheres to the remaining deficit so the achieved
    // fraction lands just above the target.
    const double deficit_mm3 = (target_voxels - static_cast<double>(lesion_count)) * voxel_mm3;
    const double sphere_mm3 = 4.0 / 3.0 * std::numbers::pi * r * r * r;
    if (sphere_mm3 > deficit_mm3) r = std::cbrt(deficit_mm3 * 3.0 / (4.0 * std::numbers::pi));

    const std::size_t c = lung_idx[uniform_index(rng, lung_idx.size())];
    const auto cx = static_cast<std::ptrdiff_t>(c % nx);
    const auto cy = static_cast<std::ptrdiff_t>((c / nx) % ny);
    const auto cz = static_cast<std::ptrdiff_t>(c / (nx * ny));
    const auto rz = static_cast<std::ptrdiff_t>(std::floor(r / dz));
    const auto ry = static_cast<std::ptrdiff_t>(std::floor(r / dy));
    const auto rx = static_cast<std::ptrdiff_t>(std::floor(r / dx));
    for (auto z = std::max<std::ptrdiff_t>(0, cz - rz); z <= std::min<std::ptrdiff_t>(nz - 1, cz + rz); ++z)
      for (auto y = std::max<std::ptrdiff_t>(0, cy - ry); y <= std::min<std::ptrdiff_t>(ny - 1, cy + ry); ++y)
        for (auto x = std::max<std::ptrdiff_t>(0, cx - rx); x <= std::min<std::ptrdiff_t>(nx - 1, cx + rx); ++x) {
          const double ddz = static_cast<double>(z - cz) * dz;
          const double ddy = static_cast<double>(y - cy) * dy;
          const double ddx = static_cast<double>(x - cx) * dx;
          if (ddz * ddz + ddy * ddy + ddx * ddx > r * r) continue;
          const auto i = static_cast<std::size_t>((z * static_cast<std::ptrdiff_t>(ny) + y) * static_cast<std::ptrdiff_t>(nx) + x);
          if (lung.at(i) && !lesion[i]) {
            lesion[i] = 1;
            ++lesion_count;
          }
        }
  }

  std::vector<float> out(vol.voxels().begin(), vol.voxels().end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (lesion[i]) out[i] = static_cast<float>(spec.lesion_hu);
  const double achieved = static_cast<double>(lesion_count) / static_cast<double>(lung_count);
  return {Volume3D(vol.dims(), vol.spacing(), std::move(out), vol.domain()), Mask3D(vol.dims(), std::move(lesion)),
          achieved, spheres};
}

double lesion_fraction(const Mask3D& lesion, const Mask3D& lung) {
  require(lesion.dims() == lung.dims(), "lesion and lung mask dims differ");
  std::size_t both = 0, lung_n = 0;
  for (std::size_t i = 0; i < lung.size(); ++i) {
    lung_n += lung.at(i);
    both += lung.at(i) && lesion.at(i);
  }
  require(lung_n > 0, "empty lung mask");
  return static_cast<double>(both) / static_cast<double>(lung_n);
}

Volume3D simulate_ct_noise(const Volume3D& vol, double dose_mas, const NoiseModel& model, Rng& rng) {
  require(vol.domain() == Domain::HU, "noise is simulated on HU volumes");
  model.validate();
  require(std::isfinite(dose_mas) && dose_mas > 0.0, "non-positive dose");
  const double sigma = model.sigma_at(dose_mas);
  Gaussian gauss;
  std::vector<float> out(vol.voxels().begin(), vol.voxels().end());
  for (auto& v : out) v = static_cast<float>(v + sigma * gauss(rng));
  return Volume3D(vol.dims(), vol.spacing(), std::move(out), Domain::HU);
}

// ---------------------------------------------------------------------------
// Records and manifests

std::string to_string(Label l) { return l == Label::Positive ? "pos" : "neg"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::None: break;
  }
  return "none";
}

Label label_from_string(const std::string& s) {
  if (s == "pos") return Label::Positive;
  if (s == "neg") return Label::Negative;
  fail(ErrorKind::Invalid, "unknown label '" + s + "' (expected pos or neg)");
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "none") return Split::None;
  fail(ErrorKind::Invalid, "unknown split '" + s + "'");
}

void CaseRecord::validate() const {
  require(!case_id.empty() && case_id.find_first_of(",\n\r") == std::string::npos, "invalid case_id '" + case_id + "'");
  require(path.find_first_of(",\n\r") == std::string::npos, "path may not contain commas or newlines");
  require(std::isfinite(dose_mas) && dose_mas > 0.0, "case " + case_id + ": dose must be > 0");
  require(lesion_fraction >= 0.0 && lesion_fraction <= 1.0, "case " + case_id + ": lesion_fraction outside [0, 1]");
  require(label == Label::Positive || lesion_fraction == 0.0, "case " + case_id + ": negative case with lesions");
}

std::string patient_id(const CaseRecord& c) {
  const auto at = c.case_id.rfind('@');
  return at == std::string::npos ? c.case_id : c.case_id.substr(0, at);
}

std::vector<CountRow> parse_counts(const std::string& text) {
  std::vector<CountRow> rows;
  for (const auto& item : split(text, ',')) {
    const auto colon = item.find(':');
    const auto at = item.find('@');
    require(colon != std::string::npos && at != std::string::npos && colon < at,
            "count '" + item + "' must look like pos:50@28.5");
    CountRow row{label_from_string(std::string(trim(item.substr(0, colon)))),
                 parse_double(item.substr(at + 1), "dose"), 0};
    const long long n = parse_int(item.substr(colon + 1, at - colon - 1), "case count");
    require(n > 0, "count '" + item + "' must have n > 0");
    require(row.dose_mas > 0.0 && std::isfinite(row.dose_mas), "count '" + item + "' must have dose > 0");
    row.n = static_cast<std::size_t>(n);
    rows.push_back(row);
  }
  require(!rows.empty(), "no counts given");
  return rows;
}

std::string format_counts(const std::vector<CountRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    if (!out.empty()) out += ',';
    out += to_string(r.label) + ':' + std::to_string(r.n) + '@' + format_double(r.dose_mas);
  }
  return out;
}

std::vector<CountRow> cvit_covid_counts() {
  return {{Label::Positive, 28.5, 50}, {Label::Negative, 28.5, 40}, {Label::Positive, 57.0, 50},
          {Label::Negative, 57.0, 40}};
}

void Manifest::validate() const {
  std::set<std::string> ids;
  for (const auto& c : cases) {
    c.validate();
    require(ids.insert(c.case_id).second, "duplicate case_id '" + c.case_id + "'");
  }
}

namespace {
constexpr const char* kManifestHeader = "case_id,label,dose_mas,lesion_fraction,path,split";
}

void write_manifest(const Manifest& m, const std::filesystem::path& dir) {
  m.validate();
  std::ostringstream csv;
  csv << kManifestHeader << '\n';
  for (const auto& c : m.cases)
    csv << c.case_id << ',' << to_string(c.label) << ',' << format_double(c.dose_mas) << ','
        << format_double(c.lesion_fraction) << ',' << c.path << ',' << to_string(c.split) << '\n';

  nlohmann::ordered_json side;
  side["seed"] = m.seed;
  side["generator_version"] = m.generator_version;
  auto counts = nlohmann::ordered_json::array();
  for (const auto& r : m.counts)
    counts.push_back({{"label", to_string(r.label)}, {"dose_mas", r.dose_mas}, {"n", r.n}});
  side["counts"] = counts;

  auto put = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot write '" + p.string() + "'");
    os << text;
    if (!os) fail(ErrorKind::Io, "write failed for '" + p.string() + "'");
  };
  put(dir / "manifest.csv", csv.str());
  put(dir / "manifest.json", side.dump(2) + "\n");
}

Manifest read_manifest(const std::filesystem::path& dir) {
  Manifest m;
  const auto csv_path = dir / "manifest.csv";
  std::ifstream is(csv_path);
  if (!is) fail(ErrorKind::Io, "cannot open '" + csv_path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || trim(line) != kManifestHeader)
    fail(ErrorKind::Io, "'" + csv_path.string() + "' lacks the manifest header");
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    if (f.size() != 6) fail(ErrorKind::Io, "manifest row " + std::to_string(row) + ": expected 6 fields");
    try {
      CaseRecord c{f[0], label_from_string(f[1]), parse_double(f[2], "dose_mas"), parse_double(f[3], "lesion_fraction"),
                   f[4], split_from_string(f[5])};
      c.validate();
      m.cases.push_back(std::move(c));
    } catch (const Error& e) {
      fail(ErrorKind::Io, "manifest row " + std::to_string(row) + ": " + e.what());
    }
  }

  const auto json_path = dir / "manifest.json";
  std::ifstream js(json_path);
  if (js) {
    try {
      const auto side = nlohmann::json::parse(js);
      m.seed = side.at("seed").get<std::uint64_t>();
      m.generator_version = side.at("generator_version").get<std::string>();
      for (const auto& r : side.at("counts"))
        m.counts.push_back({label_from_string(r.at("label").get<std::string>()), r.at("dose_mas").get<double>(),
                            r.at("n").get<std::size_t>()});
    } catch (const std::exception& e) {
      fail(ErrorKind::Io, "malformed '" + json_path.string() + "': " + e.what());
    }
  }
  try {
    m.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Io, std::string("invalid manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Dataset generation

void ExtentDistribution::validate() const {
  require(lo > 0.0 && lo < hi && hi < 1.0, "extent range must satisfy 0 < lo < hi < 1");
  if (kind == Kind::TwoBand)
    require(lo < low_hi && low_hi <= high_lo && high_lo < hi, "two-band extent needs lo < low_hi <= high_lo < hi");
  if (kind == Kind::LogNormal) {
    require(mode > 0.0 && mode < 1.0, "extent mode must be in (0, 1)");
    require(sigma > 0.0 && std::isfinite(sigma), "extent sigma must be > 0");
  }
}

double ExtentDistribution::sample(Rng& rng) const {
  if (kind == Kind::Uniform) return uniform(rng, lo, hi);
  if (kind == Kind::TwoBand) {
    const bool low = uniform01(rng) < 0.5;
    return low ? uniform(rng, lo, low_hi) : uniform(rng, high_lo, hi);
  }
  // Mode of a log-normal is exp(mu - sigma^2).
  const double mu = std::log(mode) + sigma * sigma;
  Gaussian gauss;
  for (int tries = 0; tries < 10000; ++tries) {
    const double v = std::exp(mu + sigma * gauss(rng));
    if (v >= lo && v <= hi) return v;
  }
  fail(ErrorKind::Invalid, "extent distribution has negligible mass inside [lo, hi]");
}

namespace {

struct PlannedCase {
  CaseRecord record;
  std::string anatomy_id;
};

std::string pad4(std::size_t k) {
  std::string s = std::to_string(k);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

}  // namespace

Manifest generate_dataset(const std::vector<CountRow>& counts, const GenerateOptions& opts, std::uint64_t seed,
                          const std::filesystem::path& out_dir) {
  require(!counts.empty(), "no counts given");
  for (const auto& r : counts) {
    require(r.n > 0, "each count row needs n > 0");
    require(std::isfinite(r.dose_mas) && r.dose_mas > 0.0, "each count row needs dose > 0");
  }
  opts.base_spec.validate();
  opts.noise.validate();
  opts.extent.validate();
  if (opts.low_extent_lesion_hu) {
    PhantomSpec probe = opts.base_spec;
    probe.lesion_hu = *opts.low_extent_lesion_hu;
    probe.validate();
  }

  std::vector<PlannedCase> plan;
  for (const auto& row : counts) {
    const std::string dose = format_double(row.dose_mas);
    for (std::size_t k = 0; k < row.n; ++k) {
      PlannedCase p;
      p.anatomy_id = to_string(row.label) + '-' + (opts.independent_anatomies ? dose + '-' : std::string()) + pad4(k);
      p.record.case_id = p.anatomy_id + '@' + dose;
      p.record.label = row.label;
      p.record.dose_mas = row.dose_mas;
      p.record.path = "volumes/" + p.record.case_id + ".vvol";
      plan.push_back(std::move(p));
    }
  }
  {
    std::set<std::string> ids;
    for (const auto& p : plan)
      require(ids.insert(p.record.case_id).second, "count rows produce duplicate case '" + p.record.case_id + "'");
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  if (ec) fail(ErrorKind::Io, "cannot create '" + (out_dir / "volumes").string() + "': " + ec.message());

  parallel_for(plan.size(), opts.jobs, [&](std::size_t i) {
    auto& p = plan[i];
    PhantomSpec spec = opts.base_spec;
    spec.seed = derive_seed(seed, "anatomy:" + p.anatomy_id);
    Rng anatomy_rng(spec.seed);
    Anatomy anatomy = build_anatomy(spec, anatomy_rng);

    Volume3D clean = anatomy.volume;
    Mask3D lesion = Mask3D::empty(spec.dims);
    double fraction = 0.0;
    if (p.record.label == Label::Positive) {
      Rng extent_rng = make_rng(seed, "extent:" + p.anatomy_id);
      spec.target_lesion_fraction = opts.extent.sample(extent_rng);
      if (opts.low_extent_lesion_hu && spec.target_lesion_fraction < opts.extent_threshold)
        spec.lesion_hu = *opts.low_extent_lesion_hu;
      Rng lesion_rng = make_rng(seed, "lesion:" + p.anatomy_id);
      LesionResult res = insert_lesions(anatomy.volume, anatomy.lung, spec.target_lesion_fraction, spec, lesion_rng);
      clean = std::move(res.volume);
      lesion = std::move(res.lesion);
      fraction = res.achieved_fraction;
    }
    Rng noise_rng = make_rng(seed, "noise:" + p.record.case_id);
    const Volume3D noisy = simulate_ct_noise(clean, p.record.dose_mas, opts.noise, noise_rng);
    p.record.lesion_fraction = fraction;

    const auto vol_dir = out_dir / "volumes";
    write_volume(noisy, vol_dir / (p.record.case_id + ".vvol"));
    if (opts.write_masks) {
      write_mask(anatomy.lung, spec.spacing, vol_dir / (p.record.case_id + "_lung.vvol"));
      write_mask(lesion, spec.spacing, vol_dir / (p.record.case_id + "_lesion.vvol"));
    }
  });

  Manifest m;
  m.seed = seed;
  m.counts = counts;
  for (auto& p : plan) m.cases.push_back(std::move(p.record));
  write_manifest(m, out_dir);
  return m;
}

}  // namespace vitbench
