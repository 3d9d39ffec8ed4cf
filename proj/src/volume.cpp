#include "vitbench/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "vitbench/error.hpp"

namespace vitbench {

namespace {

void check_dims(const Dims& dims) {
  for (auto d : dims) require(d > 0, "invalid dims: every axis needs at least one voxel");
}

void check_spacing(const Spacing& spacing) {
  for (auto s : spacing) require(std::isfinite(s) && s > 0.0, "invalid spacing: components must be finite and > 0");
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::HU ? "HU" : "Unit"; }

Domain domain_from_string(const std::string& s) {
  if (s == "HU") return Domain::HU;
  if (s == "Unit") return Domain::Unit;
  fail(ErrorKind::Invalid, "unknown intensity domain '" + s + "'");
}

Volume3D::Volume3D(Dims dims, Spacing spacing, std::vector<float> voxels, Domain domain)
    : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)), domain_(domain) {
  check_dims(dims_);
  check_spacing(spacing_);
  require(voxels_.size() == voxel_count(dims_), "voxel count does not match dims");
  if (domain_ == Domain::Unit) {
    for (float v : voxels_) require(v >= 0.0f && v <= 1.0f, "unit-domain voxel outside [0, 1]");
  } else {
    for (float v : voxels_) require(std::isfinite(v), "non-finite HU voxel");
  }
}

Volume3D Volume3D::filled(Dims dims, Spacing spacing, float value, Domain domain) {
  check_dims(dims);
  return Volume3D(dims, spacing, std::vector<float>(voxel_count(dims), value), domain);
}

Mask3D::Mask3D(Dims dims, std::vector<std::uint8_t> bits) : dims_(dims), bits_(std::move(bits)) {
  check_dims(dims_);
  require(bits_.size() == voxel_count(dims_), "mask length does not match dims");
  for (auto b : bits_) require(b <= 1, "mask values must be 0 or 1");
}

Mask3D Mask3D::empty(Dims dims) {
  check_dims(dims);
  return Mask3D(dims, std::vector<std::uint8_t>(voxel_count(dims), 0));
}

std::size_t Mask3D::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

// ---------------------------------------------------------------------------
// Body crop

CropResult crop_to_body(const Volume3D& vol, double threshold_hu) {
  require(vol.domain() == Domain::HU, "crop_to_body expects an HU volume");
  const auto [nz, ny, nx] = vol.dims();
  const auto vox = vol.voxels();
  const std::size_t n = vox.size();

  // 0 = background, -1 = foreground not yet labelled, >0 = component id.
  std::vector<std::int32_t> label(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (vox[i] > threshold_hu) label[i] = -1;

  std::int32_t best_id = 0;
  std::size_t best_size = 0;
  BoundingBox best_box{};
  std::vector<std::size_t> stack;
  std::int32_t next_id = 0;

  for (std::size_t seed = 0; seed < n; ++seed) {
    if (label[seed] != -1) continue;
    const std::int32_t id = ++next_id;
    label[seed] = id;
    stack.assign(1, seed);
    std::size_t size = 0;
    BoundingBox box{{nz, ny, nx}, {0, 0, 0}};
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const std::size_t x = i % nx;
      const std::size_t y = (i / nx) % ny;
      const std::size_t z = i / (nx * ny);
      box.lo = {std::min(box.lo[0], z), std::min(box.lo[1], y), std::min(box.lo[2], x)};
      box.hi = {std::max(box.hi[0], z + 1), std::max(box.hi[1], y + 1), std::max(box.hi[2], x + 1)};
      auto visit = [&](std::size_t j) {
        if (label[j] == -1) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < nx) visit(i + 1);
      if (y > 0) visit(i - nx);
      if (y + 1 < ny) visit(i + nx);
      if (z > 0) visit(i - nx * ny);
      if (z + 1 < nz) visit(i + nx * ny);
    }
    // Strictly larger: ties keep the component found first in scan order.
    if (size > best_size) {
      best_size = size;
      best_id = id;
      best_box = box;
    }
  }
  if (best_id == 0) fail(ErrorKind::Invalid, "empty body region");

  const Dims out_dims = best_box.extent();
  std::vector<float> out;
  out.reserve(voxel_count(out_dims));
  for (std::size_t z = best_box.lo[0]; z < best_box.hi[0]; ++z)
    for (std::size_t y = best_box.lo[1]; y < best_box.hi[1]; ++y) {
      const auto row = vox.subspan(vol.index(z, y, best_box.lo[2]), out_dims[2]);
      out.insert(out.end(), row.begin(), row.end());
    }
  return {Volume3D(out_dims, vol.spacing(), std::move(out), Domain::HU), best_box};
}

// ---------------------------------------------------------------------------
// Cubic B-spline resampling

namespace {

constexpr double kPole = -0.26794919243112270;  // sqrt(3) - 2
constexpr double kPrefilterTol = 1e-14;

// Whole-sample symmetric extension: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
std::ptrdiff_t mirror_index(std::ptrdiff_t k, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  k %= period;
  if (k < 0) k += period;
  return k > n - 1 ? period - k : k;
}

double initial_causal(const double* c, std::size_t n, std::size_t stride) {
  const auto horizon = static_cast<std::size_t>(std::ceil(std::log(kPrefilterTol) / std::log(std::abs(kPole))));
  if (horizon < n) {
    double zn = kPole;
    double sum = c[0];
    for (std::size_t k = 1; k < horizon; ++k) {
      sum += zn * c[k * stride];
      zn *= kPole;
    }
    return sum;
  }
  double zn = kPole;
  const double iz = 1.0 / kPole;
  double z2n = std::pow(kPole, static_cast<double>(n - 1));
  double sum = c[0] + z2n * c[(n - 1) * stride];
  z2n *= z2n * iz;
  for (std::size_t k = 1; k + 1 < n; ++k) {
    sum += (zn + z2n) * c[k * stride];
    zn *= kPole;
    z2n *= iz;
  }
  return sum / (1.0 - zn * zn);
}

double initial_anticausal(const double* c, std::size_t n, std::size_t stride) {
  return (kPole / (kPole * kPole - 1.0)) * (kPole * c[(n - 2) * stride] + c[(n - 1) * stride]);
}

// In-place conversion of samples to cubic B-spline coefficients along a line.
void prefilter_line(double* c, std::size_t n, std::size_t stride) {
  if (n < 2) return;
  constexpr double gain = (1.0 - kPole) * (1.0 - 1.0 / kPole);
  for (std::size_t k = 0; k < n; ++k) c[k * stride] *= gain;
  c[0] = initial_causal(c, n, stride);
  for (std::size_t k = 1; k < n; ++k) c[k * stride] += kPole * c[(k - 1) * stride];
  c[(n - 1) * stride] = initial_anticausal(c, n, stride);
  for (std::size_t k = n - 1; k-- > 0;) c[k * stride] = kPole * (c[(k + 1) * stride] - c[k * stride]);
}

struct Tap {
  std::array<std::ptrdiff_t, 4> index;
  std::array<double, 4> weight;
};

// Interpolation taps for every output position along one axis.
std::vector<Tap> make_taps(std::size_t n_in, std::size_t n_out, double step) {
  std::vector<Tap> taps(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double t = static_cast<double>(i) * step;
    const double fl = std::floor(t);
    const double u = t - fl;
    const auto base = static_cast<std::ptrdiff_t>(fl) - 1;
    const double u2 = u * u, u3 = u2 * u;
    taps[i].weight = {(1.0 - u) * (1.0 - u) * (1.0 - u) / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
                      (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0};
    for (int k = 0; k < 4; ++k) taps[i].index[k] = mirror_index(base + k, static_cast<std::ptrdiff_t>(n_in));
  }
  return taps;
}

}  // namespace

Volume3D resample_bspline(const Volume3D& vol, const Spacing& target_spacing) {
  for (auto s : target_spacing)
    require(std::isfinite(s) && s > 0.0, "target spacing must be finite and > 0");
  const Dims in = vol.dims();
  Dims out{};
  std::array<double, 3> step{};
  for (int a = 0; a < 3; ++a) {
    const double extent = static_cast<double>(in[a]) * vol.spacing()[a] / target_spacing[a];
    out[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(extent)));
    step[a] = target_spacing[a] / vol.spacing()[a];
  }

  std::vector<double> coef(vol.voxels().begin(), vol.voxels().end());
  const std::size_t sx = 1, sy = in[2], sz = in[1] * in[2];
  for (std::size_t z = 0; z < in[0]; ++z)
    for (std::size_t y = 0; y < in[1]; ++y) prefilter_line(&coef[z * sz + y * sy], in[2], sx);
  for (std::size_t z = 0; z < in[0]; ++z)
    for (std::size_t x = 0; x < in[2]; ++x) prefilter_line(&coef[z * sz + x], in[1], sy);
  for (std::size_t y = 0; y < in[1]; ++y)
    for (std::size_t x = 0; x < in[2]; ++x) prefilter_line(&coef[y * sy + x], in[0], sz);

  // Tensor-product evaluation, contracting x, then y, then z.
  const auto tx = make_taps(in[2], out[2], step[2]);
  const auto ty = make_taps(in[1], out[1], step[1]);
  const auto tz = make_taps(in[0], out[0], step[0]);

  std::vector<double> ax(in[0] * in[1] * out[2]);
  for (std::size_t r = 0; r < in[0] * in[1]; ++r) {
    const double* src = &coef[r * in[2]];
    double* dst = &ax[r * out[2]];
    for (std::size_t i = 0; i < out[2]; ++i) {
      const auto& t = tx[i];
      dst[i] = t.weight[0] * src[t.index[0]] + t.weight[1] * src[t.index[1]] + t.weight[2] * src[t.index[2]] +
               t.weight[3] * src[t.index[3]];
    }
  }
  std::vector<double> ay(in[0] * out[1] * out[2], 0.0);
  for (std::size_t z = 0; z < in[0]; ++z)
    for (std::size_t j = 0; j < out[1]; ++j) {
      double* dst = &ay[(z * out[1] + j) * out[2]];
      for (int k = 0; k < 4; ++k) {
        const double w = ty[j].weight[k];
        const double* src = &ax[(z * in[1] + static_cast<std::size_t>(ty[j].index[k])) * out[2]];
        for (std::size_t x = 0; x < out[2]; ++x) dst[x] += w * src[x];
      }
    }
  std::vector<double> az(voxel_count(out), 0.0);
  const std::size_t plane = out[1] * out[2];
  for (std::size_t i = 0; i < out[0]; ++i) {
    double* dst = &az[i * plane];
    for (int k = 0; k < 4; ++k) {
      const double w = tz[i].weight[k];
      const double* src = &ay[static_cast<std::size_t>(tz[i].index[k]) * plane];
      for (std::size_t p = 0; p < plane; ++p) dst[p] += w * src[p];
    }
  }

  std::vector<float> result(az.size());
  for (std::size_t i = 0; i < az.size(); ++i) {
    float v = static_cast<float>(az[i]);
    // Cubic B-splines overshoot slightly at edges; unit volumes stay in range.
    if (vol.domain() == Domain::Unit) v = std::clamp(v, 0.0f, 1.0f);
    result[i] = v;
  }
  return Volume3D(out, target_spacing, std::move(result), vol.domain());
}

// ---------------------------------------------------------------------------
// Intensity mapping and patches

Volume3D clip_hu(const Volume3D& vol, double lo, double hi) {
  require(vol.domain() == Domain::HU, "clip_hu expects an HU volume");
  require(lo < hi, "clip bounds must satisfy lo < hi");
  std::vector<float> out(vol.voxels().begin(), vol.voxels().end());
  const auto flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
  for (auto& v : out) v = std::clamp(v, flo, fhi);
  return Volume3D(vol.dims(), vol.spacing(), std::move(out), Domain::HU);
}

Volume3D normalize_unit(const Volume3D& vol, double lo, double hi) {
  require(vol.domain() == Domain::HU, "normalize_unit expects an HU volume");
  require(lo < hi, "normalization bounds must satisfy lo < hi");
  const double scale = 1.0 / (hi - lo);
  std::vector<float> out(vol.size());
  const auto in = vol.voxels();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    if (!(v >= static_cast<float>(lo) && v <= static_cast<float>(hi)))
      fail(ErrorKind::Invalid, "voxel outside normalization range; clip first");
    out[i] = static_cast<float>(std::clamp((v - lo) * scale, 0.0, 1.0));
  }
  return Volume3D(vol.dims(), vol.spacing(), std::move(out), Domain::Unit);
}

Volume3D extract_patch(const Volume3D& vol, const Dims& size, std::optional<float> pad_value) {
  for (auto s : size) require(s >= 1, "patch size components must be >= 1");
  const float pad = pad_value.value_or(vol.domain() == Domain::HU ? static_cast<float>(kClipLoHu) : 0.0f);
  const Dims in = vol.dims();

  // Offset of the patch origin in source coordinates (floor of half the difference).
  std::array<std::ptrdiff_t, 3> start{};
  for (int a = 0; a < 3; ++a) {
    const auto diff = static_cast<std::ptrdiff_t>(in[a]) - static_cast<std::ptrdiff_t>(size[a]);
    start[a] = diff >= 0 ? diff / 2 : -((-diff + 1) / 2);
  }

  std::vector<float> out(voxel_count(size), pad);
  for (std::size_t z = 0; z < size[0]; ++z) {
    const auto sz = start[0] + static_cast<std::ptrdiff_t>(z);
    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(in[0])) continue;
    for (std::size_t y = 0; y < size[1]; ++y) {
      const auto sy = start[1] + static_cast<std::ptrdiff_t>(y);
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(in[1])) continue;
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -start[2]);
      const std::ptrdiff_t x1 =
          std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(size[2]), static_cast<std::ptrdiff_t>(in[2]) - start[2]);
      for (std::ptrdiff_t x = x0; x < x1; ++x)
        out[(z * size[1] + y) * size[2] + static_cast<std::size_t>(x)] =
            vol.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy), static_cast<std::size_t>(start[2] + x));
    }
  }
  return Volume3D(size, vol.spacing(), std::move(out), vol.domain());
}

Volume3D preprocess(const Volume3D& vol, const Preprocessing& pp) {
  const Volume3D* current = &vol;
  std::optional<Volume3D> cropped, resampled;
  if (pp.crop_body) {
    cropped.emplace(crop_to_body(vol).volume);
    current = &*cropped;
  }
  if (pp.target_spacing && *pp.target_spacing != current->spacing()) {
    resampled.emplace(resample_bspline(*current, *pp.target_spacing));
    current = &*resampled;
  }
  Volume3D clipped = clip_hu(*current, pp.clip_lo, pp.clip_hi);
  if (!pp.normalize) return extract_patch(clipped, pp.patch);
  return extract_patch(normalize_unit(clipped, pp.clip_lo, pp.clip_hi), pp.patch);
}

// ---------------------------------------------------------------------------
// File I/O

namespace {

constexpr char kMagic[8] = {'V', 'I', 'T', 'V', 'O', 'L', '0', '1'};

void put_u32le(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_container(const std::filesystem::path& path, const Dims& dims, const Spacing& spacing,
                     const std::string& domain, std::span<const float> values) {
  nlohmann::ordered_json header;
  header["dims"] = {dims[0], dims[1], dims[2]};
  header["spacing_mm"] = {spacing[0], spacing[1], spacing[2]};
  header["domain"] = domain;
  const std::string text = header.dump();

  std::string buf(kMagic, sizeof(kMagic));
  put_u32le(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  buf.reserve(buf.size() + 4 * values.size());
  for (float v : values) put_u32le(buf, std::bit_cast<std::uint32_t>(v));

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) fail(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

struct Container {
  Dims dims;
  Spacing spacing;
  std::string domain;
  std::vector<float> values;
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";

  if (bytes.size() < 12 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    fail(ErrorKind::Io, "malformed header: bad magic" + where);
  const std::uint32_t header_len = get_u32le(bytes.data() + 8);
  if (bytes.size() - 12 < header_len) fail(ErrorKind::Io, "malformed header: truncated" + where);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::Io, "malformed header: invalid JSON" + where);
  }

  Container c;
  try {
    const auto& d = header.at("dims");
    const auto& s = header.at("spacing_mm");
    if (!d.is_array() || d.size() != 3 || !s.is_array() || s.size() != 3) throw std::runtime_error("shape");
    for (int a = 0; a < 3; ++a) {
      if (!d[a].is_number_integer() || d[a].get<std::int64_t>() <= 0) fail(ErrorKind::Io, "invalid dims" + where);
      c.dims[a] = d[a].get<std::size_t>();
      c.spacing[a] = s[a].get<double>();
    }
    c.domain = header.at("domain").get<std::string>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail(ErrorKind::Io, "malformed header: missing or mistyped fields" + where);
  }

  const std::size_t payload = bytes.size() - 12 - header_len;
  const std::size_t count = voxel_count(c.dims);
  if (count > std::numeric_limits<std::size_t>::max() / 4 || payload != 4 * count)
    fail(ErrorKind::Io, "payload length mismatch" + where);
  c.values.resize(count);
  const unsigned char* p = bytes.data() + 12 + header_len;
  for (std::size_t i = 0; i < count; ++i) c.values[i] = std::bit_cast<float>(get_u32le(p + 4 * i));
  return c;
}

}  // namespace

void write_volume(const Volume3D& vol, const std::filesystem::path& path) {
  write_container(path, vol.dims(), vol.spacing(), to_string(vol.domain()), vol.voxels());
}

Volume3D read_volume(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.domain != "HU" && c.domain != "Unit")
    fail(ErrorKind::Io, "malformed header: domain '" + c.domain + "' is not a volume domain");
  try {
    return Volume3D(c.dims, c.spacing, std::move(c.values), domain_from_string(c.domain));
  } catch (const Error& e) {
    fail(ErrorKind::Io, std::string(e.what()) + " in '" + path.string() + "'");
  }
}

void write_mask(const Mask3D& mask, const Spacing& spacing, const std::filesystem::path& path) {
  check_spacing(spacing);
  std::vector<float> values(mask.bits().begin(), mask.bits().end());
  write_container(path, mask.dims(), spacing, "Mask", values);
}

Mask3D read_mask(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.domain != "Mask") fail(ErrorKind::Io, "malformed header: expected Mask domain in '" + path.string() + "'");
  std::vector<std::uint8_t> bits(c.values.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (c.values[i] != 0.0f && c.values[i] != 1.0f)
      fail(ErrorKind::Io, "mask value not in {0, 1} in '" + path.string() + "'");
    bits[i] = c.values[i] == 1.0f ? 1 : 0;
  }
  return Mask3D(c.dims, std::move(bits));
}

}  // namespace vitbench
