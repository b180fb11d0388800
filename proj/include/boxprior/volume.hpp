#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "boxprior/error.hpp"
#include "boxprior/rng.hpp"

namespace boxprior {

/// Integer lattice position, (z, y, x) order.
struct Index3 {
  int z = 0;
  int y = 0;
  int x = 0;

  friend bool operator==(const Index3&, const Index3&) = default;
};

/// Grid extent (slices, rows, columns).
struct Dims3 {
  int s = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(s) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool contains(int z, int y, int x) const noexcept {
    return z >= 0 && y >= 0 && x >= 0 && z < s && y < h && x < w;
  }
  std::size_t linear(int z, int y, int x) const noexcept {
    return (static_cast<std::size_t>(z) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x);
  }
  Index3 unravel(std::size_t i) const noexcept {
    const auto ww = static_cast<std::size_t>(w);
    const auto hh = static_cast<std::size_t>(h);
    return {static_cast<int>(i / (hh * ww)), static_cast<int>((i / ww) % hh), static_cast<int>(i % ww)};
  }

  friend bool operator==(const Dims3&, const Dims3&) = default;
};

/// Millimeters per voxel along (z, y, x).
using Spacing3 = std::array<double, 3>;

enum class FieldKind { Scalar, Probability, Binary };

/// Dense row-major (z, y, x) scalar field. Immutable once constructed; the
/// constructor validates length, finiteness and the value range implied by
/// the kind tag.
class VoxelGrid {
 public:
  VoxelGrid() = default;

  VoxelGrid(Dims3 dims, std::vector<double> data, FieldKind kind = FieldKind::Scalar,
            Spacing3 spacing = {1.0, 1.0, 1.0})
      : dims_(dims), spacing_(spacing), kind_(kind), data_(std::move(data)) {
    if (dims_.s <= 0 || dims_.h <= 0 || dims_.w <= 0) {
      throw Error(ErrorCode::InvalidArgument, "grid dims must be positive");
    }
    if (data_.size() != dims_.count()) {
      throw Error(ErrorCode::DimensionMismatch, "data length " + std::to_string(data_.size()) +
                                                    " != S*H*W " + std::to_string(dims_.count()));
    }
    for (double sp : spacing_) {
      if (!(sp > 0.0) || !std::isfinite(sp)) throw Error(ErrorCode::InvalidArgument, "spacing must be positive");
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite voxel value");
      if (kind_ == FieldKind::Probability && (v < 0.0 || v > 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "probability field value outside [0,1]");
      }
      if (kind_ == FieldKind::Binary && v != 0.0 && v != 1.0) {
        throw Error(ErrorCode::InvalidArgument, "binary mask value outside {0,1}");
      }
    }
  }

  static VoxelGrid filled(Dims3 dims, double value, FieldKind kind = FieldKind::Scalar,
                          Spacing3 spacing = {1.0, 1.0, 1.0}) {
    return VoxelGrid(dims, std::vector<double>(dims.count(), value), kind, spacing);
  }

  const Dims3& dims() const noexcept { return dims_; }
  const Spacing3& spacing() const noexcept { return spacing_; }
  FieldKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const double> values() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double at(int z, int y, int x) const noexcept { return data_[dims_.linear(z, y, x)]; }

  /// Same geometry, new values and kind.
  VoxelGrid with_values(std::vector<double> data, FieldKind kind) const {
    return VoxelGrid(dims_, std::move(data), kind, spacing_);
  }

 private:
  Dims3 dims_{};
  Spacing3 spacing_{1.0, 1.0, 1.0};
  FieldKind kind_ = FieldKind::Scalar;
  std::vector<double> data_;
};

/// Axis-aligned box, lo inclusive, hi exclusive.
struct Box3 {
  Index3 lo;
  Index3 hi;

  Dims3 extent() const noexcept { return {hi.z - lo.z, hi.y - lo.y, hi.x - lo.x}; }
  std::size_t volume() const noexcept { return extent().count(); }
  bool contains(int z, int y, int x) const noexcept {
    return z >= lo.z && z < hi.z && y >= lo.y && y < hi.y && x >= lo.x && x < hi.x;
  }
  bool valid_in(const Dims3& d) const noexcept {
    return lo.z >= 0 && lo.y >= 0 && lo.x >= 0 && lo.z < hi.z && lo.y < hi.y && lo.x < hi.x &&
           hi.z <= d.s && hi.y <= d.h && hi.x <= d.w;
  }

  friend bool operator==(const Box3&, const Box3&) = default;
};

inline void require_box_in(const Box3& box, const Dims3& dims) {
  if (!box.valid_in(dims)) throw Error(ErrorCode::OutOfBounds, "box does not lie inside grid");
}

struct PatchSpec {
  Index3 origin;
  Dims3 dims;
  Index3 stride{1, 1, 1};

  bool fits_in(const Dims3& parent) const noexcept {
    return origin.z >= 0 && origin.y >= 0 && origin.x >= 0 && dims.s > 0 && dims.h > 0 && dims.w > 0 &&
           origin.z + dims.s <= parent.s && origin.y + dims.h <= parent.h && origin.x + dims.w <= parent.w;
  }
};

inline bool is_foreground(double v) noexcept { return v != 0.0; }

/// Tight bound of all nonzero voxels.
inline Box3 box_from_mask(const VoxelGrid& mask) {
  const Dims3& d = mask.dims();
  Index3 lo{d.s, d.h, d.w};
  Index3 hi{-1, -1, -1};
  for (int z = 0; z < d.s; ++z) {
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        if (!is_foreground(mask.at(z, y, x))) continue;
        lo = {std::min(lo.z, z), std::min(lo.y, y), std::min(lo.x, x)};
        hi = {std::max(hi.z, z), std::max(hi.y, y), std::max(hi.x, x)};
      }
    }
  }
  if (hi.z < 0) throw Error(ErrorCode::EmptyMask, "mask has no foreground voxel");
  return {lo, {hi.z + 1, hi.y + 1, hi.x + 1}};
}

inline VoxelGrid crop_patch(const VoxelGrid& grid, const PatchSpec& patch) {
  if (!patch.fits_in(grid.dims())) throw Error(ErrorCode::OutOfBounds, "patch exceeds grid extent");
  std::vector<double> out;
  out.reserve(patch.dims.count());
  for (int z = 0; z < patch.dims.s; ++z) {
    for (int y = 0; y < patch.dims.h; ++y) {
      const std::size_t row = grid.dims().linear(patch.origin.z + z, patch.origin.y + y, patch.origin.x);
      const auto src = grid.values().subspan(row, static_cast<std::size_t>(patch.dims.w));
      out.insert(out.end(), src.begin(), src.end());
    }
  }
  return VoxelGrid(patch.dims, std::move(out), grid.kind(), grid.spacing());
}

/// Inverse of crop_patch: returns `parent` with `block` written at `origin`.
inline VoxelGrid paste_patch(const VoxelGrid& parent, const VoxelGrid& block, Index3 origin) {
  const PatchSpec spec{origin, block.dims(), {1, 1, 1}};
  if (!spec.fits_in(parent.dims())) throw Error(ErrorCode::OutOfBounds, "block exceeds parent extent");
  std::vector<double> out(parent.values().begin(), parent.values().end());
  const Dims3& bd = block.dims();
  for (int z = 0; z < bd.s; ++z) {
    for (int y = 0; y < bd.h; ++y) {
      for (int x = 0; x < bd.w; ++x) {
        out[parent.dims().linear(origin.z + z, origin.y + y, origin.x + x)] = block.at(z, y, x);
      }
    }
  }
  const FieldKind kind = parent.kind() == block.kind() ? parent.kind() : FieldKind::Scalar;
  return parent.with_values(std::move(out), kind);
}

/// Box translated into patch-local coordinates and clipped to the patch.
/// Returns false when the intersection is empty.
inline bool clip_box_to_patch(const Box3& box, const PatchSpec& patch, Box3& out) {
  Box3 b{{std::max(box.lo.z, patch.origin.z) - patch.origin.z, std::max(box.lo.y, patch.origin.y) - patch.origin.y,
          std::max(box.lo.x, patch.origin.x) - patch.origin.x},
         {std::min(box.hi.z, patch.origin.z + patch.dims.s) - patch.origin.z,
          std::min(box.hi.y, patch.origin.y + patch.dims.h) - patch.origin.y,
          std::min(box.hi.x, patch.origin.x + patch.dims.w) - patch.origin.x}};
  if (!b.valid_in(patch.dims)) return false;
  out = b;
  return true;
}

namespace detail {
inline std::vector<int> tile_origins(int full, int size, int stride) {
  std::vector<int> origins;
  if (size >= full) return {0};
  for (int o = 0;; o += stride) {
    if (o + size >= full) {
      origins.push_back(full - size);
      break;
    }
    origins.push_back(o);
  }
  return origins;
}
}  // namespace detail

/// Sliding-window tiling covering `full`; the last window on each axis is
/// shifted back so it ends flush with the grid.
inline std::vector<PatchSpec> tile_patches(const Dims3& full, const Dims3& patch, const Index3& stride) {
  if (stride.z <= 0 || stride.y <= 0 || stride.x <= 0) throw Error(ErrorCode::InvalidArgument, "stride must be positive");
  const Dims3 clipped{std::min(patch.s, full.s), std::min(patch.h, full.h), std::min(patch.w, full.w)};
  std::vector<PatchSpec> out;
  for (int z : detail::tile_origins(full.s, clipped.s, stride.z)) {
    for (int y : detail::tile_origins(full.h, clipped.h, stride.y)) {
      for (int x : detail::tile_origins(full.w, clipped.w, stride.x)) {
        out.push_back({{z, y, x}, clipped, stride});
      }
    }
  }
  return out;
}

/// Uniformly random valid origin for a patch of the given dims.
inline PatchSpec random_patch(const Dims3& full, const Dims3& patch, Rng& rng) {
  if (patch.s > full.s || patch.h > full.h || patch.w > full.w) throw Error(ErrorCode::OutOfBounds, "patch larger than grid");
  auto pick = [&rng](int range) { return std::uniform_int_distribution<int>(0, range)(rng); };
  return {{pick(full.s - patch.s), pick(full.h - patch.h), pick(full.w - patch.w)}, patch, {1, 1, 1}};
}

inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline VoxelGrid sigmoid_field(const VoxelGrid& logits) {
  std::vector<double> out(logits.size());
  std::transform(logits.values().begin(), logits.values().end(), out.begin(), sigmoid);
  return logits.with_values(std::move(out), FieldKind::Probability);
}

inline constexpr double kProbEpsilon = 1e-7;

/// One relaxed Bernoulli draw per voxel plus the local derivative used for
/// the straight-through backward pass.
struct GumbelSample {
  VoxelGrid sample;
  /// d(soft sample)/dp per voxel; zero where p was clamped.
  std::vector<double> dsample_dprob;
  bool hard = true;

  /// Chains an upstream gradient on the sample into a gradient on p.
  std::vector<double> backprop(std::span<const double> grad_sample) const {
    if (grad_sample.size() != dsample_dprob.size()) throw Error(ErrorCode::DimensionMismatch, "gradient length");
    std::vector<double> out(grad_sample.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = grad_sample[i] * dsample_dprob[i];
    return out;
  }
};

/// Two-class Gumbel-Softmax per voxel. With `hard`, the forward value is the
/// thresholded soft sample and the backward rule is the soft derivative.
inline GumbelSample gumbel_binarize(const VoxelGrid& probs, double temperature, bool hard, Rng& rng) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::InvalidTemperature, "temperature must be > 0");
  std::uniform_real_distribution<double> unif(std::numeric_limits<double>::min(), 1.0);
  auto gumbel = [&] { return -std::log(-std::log(unif(rng))); };

  std::vector<double> value(probs.size());
  std::vector<double> deriv(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double raw = probs[i];
    const double p = std::clamp(raw, kProbEpsilon, 1.0 - kProbEpsilon);
    const double g1 = gumbel();
    const double g0 = gumbel();
    const double z = (std::log(p) + g1 - (std::log1p(-p) + g0)) / temperature;
    const double soft = sigmoid(z);
    const bool clamped = raw < kProbEpsilon || raw > 1.0 - kProbEpsilon;
    deriv[i] = clamped ? 0.0 : soft * (1.0 - soft) / temperature * (1.0 / p + 1.0 / (1.0 - p));
    value[i] = hard ? (soft >= 0.5 ? 1.0 : 0.0) : soft;
  }
  return {probs.with_values(std::move(value), hard ? FieldKind::Binary : FieldKind::Probability), std::move(deriv),
          hard};
}

/// Binary mask from a probability field (p >= threshold is foreground).
inline VoxelGrid binarize(const VoxelGrid& probs, double threshold = 0.5) {
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return probs.with_values(std::move(out), FieldKind::Binary);
}

}  // namespace boxprior
