#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <nlohmann/json.hpp>

#include "boxprior/error.hpp"
#include "boxprior/kdtree.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

struct VoxelCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct MetricReport {
  double dice = 0.0;
  double hd95 = 0.0;  // millimeters
  VoxelCounts counts;
};

inline VoxelCounts confusion(const VoxelGrid& pred, const VoxelGrid& gt) {
  if (!(pred.dims() == gt.dims())) throw Error(ErrorCode::DimensionMismatch, "pred/gt dims differ");
  VoxelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = is_foreground(pred[i]);
    const bool g = is_foreground(gt[i]);
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2|A n B| / (|A| + |B|); 1 when both masks are empty.
inline double dice(const VoxelGrid& pred, const VoxelGrid& gt) {
  const VoxelCounts c = confusion(pred, gt);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// Foreground voxels with a background 6-neighbor or touching the grid border.
inline std::vector<Index3> boundary_voxels(const VoxelGrid& mask) {
  const Dims3& d = mask.dims();
  std::vector<Index3> out;
  static constexpr int kOffsets[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < d.s; ++z) {
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        if (!is_foreground(mask.at(z, y, x))) continue;
        bool edge = false;
        for (const auto& o : kOffsets) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (!d.contains(nz, ny, nx) || !is_foreground(mask.at(nz, ny, nx))) {
            edge = true;
            break;
          }
        }
        if (edge) out.push_back({z, y, x});
      }
    }
  }
  return out;
}

/// Linear interpolation between order statistics; q in [0, 1].
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

enum class HdMode { Pooled, MaxOfDirected };

/// Spacing-scaled distance from each boundary voxel of `from` to the
/// nearest boundary voxel of `to`.
inline std::vector<double> directed_surface_distances(const std::vector<Index3>& from, const std::vector<Index3>& to,
                                                      const Spacing3& spacing) {
  auto scaled = [&spacing](const Index3& i) {
    return Point3{i.x * spacing[2], i.y * spacing[1], i.z * spacing[0]};
  };
  std::vector<Point3> target;
  target.reserve(to.size());
  for (const Index3& i : to) target.push_back(scaled(i));
  const KdTree tree(target);
  std::vector<double> out;
  out.reserve(from.size());
  for (const Index3& i : from) out.push_back(std::sqrt(tree.nearest(scaled(i)).squared_distance));
  return out;
}

inline double hd95(const VoxelGrid& pred, const VoxelGrid& gt, const Spacing3& spacing,
                   HdMode mode = HdMode::Pooled) {
  if (!(pred.dims() == gt.dims())) throw Error(ErrorCode::DimensionMismatch, "pred/gt dims differ");
  const auto a = boundary_voxels(pred);
  const auto b = boundary_voxels(gt);
  if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyMask, "hd95 needs two nonempty masks");
  auto ab = directed_surface_distances(a, b, spacing);
  auto ba = directed_surface_distances(b, a, spacing);
  if (mode == HdMode::MaxOfDirected) return std::max(percentile(ab, 0.95), percentile(ba, 0.95));
  ab.insert(ab.end(), ba.begin(), ba.end());
  return percentile(std::move(ab), 0.95);
}

/// Dice and counts always; hd95 only when both masks are nonempty (else -1).
inline MetricReport evaluate(const VoxelGrid& pred, const VoxelGrid& gt, const Spacing3& spacing,
                             HdMode mode = HdMode::Pooled) {
  MetricReport r;
  r.counts = confusion(pred, gt);
  r.dice = dice(pred, gt);
  const bool both = (r.counts.tp + r.counts.fp) > 0 && (r.counts.tp + r.counts.fn) > 0;
  r.hd95 = both ? hd95(pred, gt, spacing, mode) : -1.0;
  return r;
}

// hd95 is null when it is undefined (an empty mask).
inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = {{"dice", r.dice},
                      {"hd95", nullptr},
                      {"voxel_counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}}};
  if (r.hd95 >= 0.0) j["hd95"] = r.hd95;
  return j;
}

}  // namespace boxprior
