#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vitbench {

// (z, y, x) voxel counts and (dz, dy, dx) spacing in mm. Storage is z-major:
// index = (z * ny + y) * nx + x.
using Dims = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;

enum class Domain { HU, Unit };

// Default resampling target used by the 3D pipeline.
inline constexpr Spacing kTargetSpacingMm{5.0, 2.0, 2.0};
inline constexpr double kClipLoHu = -1000.0;
inline constexpr double kClipHiHu = 800.0;
inline constexpr Dims kPatchSize{96, 160, 160};
inline constexpr double kBodyThresholdHu = -500.0;

inline std::size_t voxel_count(const Dims& d) { return d[0] * d[1] * d[2]; }

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

class Volume3D {
 public:
  // Validates every invariant; throws Error(Invalid) on violation.
  Volume3D(Dims dims, Spacing spacing, std::vector<float> voxels, Domain domain);

  // Constant-valued volume.
  static Volume3D filled(Dims dims, Spacing spacing, float value, Domain domain);

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  Domain domain() const noexcept { return domain_; }
  std::span<const float> voxels() const noexcept { return voxels_; }
  std::size_t size() const noexcept { return voxels_.size(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * dims_[1] + y) * dims_[2] + x;
  }
  float at(std::size_t z, std::size_t y, std::size_t x) const noexcept { return voxels_[index(z, y, x)]; }

  // Hands the buffer back so callers can build a modified copy without an
  // extra allocation.
  std::vector<float> release() && { return std::move(voxels_); }

  friend bool operator==(const Volume3D&, const Volume3D&) = default;

 private:
  Dims dims_;
  Spacing spacing_;
  std::vector<float> voxels_;
  Domain domain_;
};

class Mask3D {
 public:
  Mask3D(Dims dims, std::vector<std::uint8_t> bits);
  static Mask3D empty(Dims dims);

  const Dims& dims() const noexcept { return dims_; }
  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  std::size_t size() const noexcept { return bits_.size(); }
  std::size_t count() const noexcept;
  bool at(std::size_t i) const noexcept { return bits_[i] != 0; }

  std::vector<std::uint8_t> release() && { return std::move(bits_); }

  friend bool operator==(const Mask3D&, const Mask3D&) = default;

 private:
  Dims dims_;
  std::vector<std::uint8_t> bits_;
};

// Lower bound inclusive, upper bound exclusive, both (z, y, x).
struct BoundingBox {
  Dims lo;
  Dims hi;
  Dims extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct CropResult {
  Volume3D volume;
  BoundingBox box;
};

// Tight box around the largest 6-connected component of voxels > threshold.
CropResult crop_to_body(const Volume3D& vol, double threshold_hu = kBodyThresholdHu);

// Cubic B-spline resampling (prefiltered, mirror boundaries). The first voxel
// center is kept fixed; output voxel i sits at input coordinate
// i * target / input along each axis.
Volume3D resample_bspline(const Volume3D& vol, const Spacing& target_spacing);

Volume3D clip_hu(const Volume3D& vol, double lo = kClipLoHu, double hi = kClipHiHu);
Volume3D normalize_unit(const Volume3D& vol, double lo = kClipLoHu, double hi = kClipHiHu);

// Center patch; voxels outside the source take pad_value, which defaults to
// air: -1000 for HU volumes, 0 for unit volumes.
Volume3D extract_patch(const Volume3D& vol, const Dims& size = kPatchSize,
                       std::optional<float> pad_value = std::nullopt);

// The [crop ->] resample -> clip -> normalize -> patch chain applied before
// the network. The body crop belongs to the slice pipeline, so it is off by
// default for volumes.
struct Preprocessing {
  bool crop_body = false;
  std::optional<Spacing> target_spacing = kTargetSpacingMm;  // nullopt: no resampling
  double clip_lo = kClipLoHu;
  double clip_hi = kClipHiHu;
  bool normalize = true;
  Dims patch = kPatchSize;
};

Volume3D preprocess(const Volume3D& vol, const Preprocessing& pp);

// .vvol container: "VITVOL01", u32 LE header length, JSON header, then
// little-endian float32 payload in z-major order.
void write_volume(const Volume3D& vol, const std::filesystem::path& path);
Volume3D read_volume(const std::filesystem::path& path);
void write_mask(const Mask3D& mask, const Spacing& spacing, const std::filesystem::path& path);
Mask3D read_mask(const std::filesystem::path& path);

}  // namespace vitbench
