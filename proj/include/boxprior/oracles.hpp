#pragma once

// Slow, independent reference implementations used by the check suite and
// the tests. They share no code paths with the accelerated versions beyond
// the basic value types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "boxprior/metrics.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/registration.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/trainer.hpp"
#include "boxprior/volume.hpp"

namespace boxprior::oracle {

/// |a - b| / max(|a|, |b|); 0 when both are 0.
inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

/// Linear scan; the first minimizer wins.
inline std::size_t nearest_index(const std::vector<Point3>& pts, const Point3& q) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1], dz = pts[i][2] - q[2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// O(|S||T|) Chamfer with the same summation order as the accelerated one.
inline ChamferResult chamfer_brute(const PointCloud& s, const PointCloud& t, bool squared = false) {
  ChamferResult r;
  r.grad_points.assign(s.size(), Point3{0.0, 0.0, 0.0});
  auto dist = [squared](const Point3& a, const Point3& b) {
    const double d2 = squared_distance(a, b);
    return squared ? d2 : std::sqrt(d2);
  };
  auto add = [squared](Point3& g, const Point3& x, const Point3& y, double scale) {
    const double d2 = squared_distance(x, y);
    if (d2 == 0.0) return;
    const double f = squared ? 2.0 * scale : scale / std::sqrt(d2);
    for (int a = 0; a < 3; ++a) g[a] += f * (x[a] - y[a]);
  };
  const double inv_s = 1.0 / static_cast<double>(s.size());
  const double inv_t = 1.0 / static_cast<double>(t.size());
  double sum_s = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t j = nearest_index(t.points, s.points[i]);
    sum_s += dist(s.points[i], t.points[j]);
    add(r.grad_points[i], s.points[i], t.points[j], inv_s);
  }
  double sum_t = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j) {
    const std::size_t i = nearest_index(s.points, t.points[j]);
    sum_t += dist(t.points[j], s.points[i]);
    add(r.grad_points[i], s.points[i], t.points[j], inv_t);
  }
  r.forward_term = sum_s * inv_s;
  r.backward_term = sum_t * inv_t;
  r.value = r.forward_term + r.backward_term;
  return r;
}

/// Per-cell reference for gridding reverse: explicit corner offset table,
/// points in cell scan order.
inline std::vector<Point3> gridding_reference(const VoxelGrid& probs, double threshold) {
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1},
                                        {1, 0, 0}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}};
  const Dims3& d = probs.dims();
  std::vector<Point3> out;
  for (int z = 0; z + 1 < d.s; ++z) {
    for (int y = 0; y + 1 < d.h; ++y) {
      for (int x = 0; x + 1 < d.w; ++x) {
        double mass = 0.0, px = 0.0, py = 0.0, pz = 0.0;
        for (const auto& c : kCorner) {
          const double v = probs.at(z + c[0], y + c[1], x + c[2]);
          mass += v;
          px += v * (x + c[2]);
          py += v * (y + c[1]);
          pz += v * (z + c[0]);
        }
        if (mass / 8.0 > threshold) out.push_back({px / mass, py / mass, pz / mass});
      }
    }
  }
  return out;
}

inline std::size_t active_cell_count(const VoxelGrid& probs, double threshold) {
  return gridding_reference(probs, threshold).size();
}

inline VoxelCounts count_voxels(const VoxelGrid& pred, const VoxelGrid& gt) {
  VoxelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0.0;
    const bool g = gt[i] != 0.0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

inline double dice_count(const VoxelGrid& pred, const VoxelGrid& gt) {
  const VoxelCounts c = count_voxels(pred, gt);
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 1.0 : 2.0 * c.tp / denom;
}

/// All-pairs surface distances; boundary = foreground with a background or
/// out-of-grid 6-neighbor.
inline double hd95_brute(const VoxelGrid& pred, const VoxelGrid& gt, const Spacing3& spacing) {
  auto surface = [&spacing](const VoxelGrid& m) {
    const Dims3& d = m.dims();
    std::vector<Point3> pts;
    for (int z = 0; z < d.s; ++z) {
      for (int y = 0; y < d.h; ++y) {
        for (int x = 0; x < d.w; ++x) {
          if (m.at(z, y, x) == 0.0) continue;
          auto bg = [&](int zz, int yy, int xx) { return !d.contains(zz, yy, xx) || m.at(zz, yy, xx) == 0.0; };
          if (bg(z - 1, y, x) || bg(z + 1, y, x) || bg(z, y - 1, x) || bg(z, y + 1, x) || bg(z, y, x - 1) ||
              bg(z, y, x + 1)) {
            pts.push_back({x * spacing[2], y * spacing[1], z * spacing[0]});
          }
        }
      }
    }
    return pts;
  };
  const auto a = surface(pred);
  const auto b = surface(gt);
  std::vector<double> all;
  auto directed = [&all](const std::vector<Point3>& from, const std::vector<Point3>& to) {
    for (const Point3& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const Point3& q : to) best = std::min(best, squared_distance(p, q));
      all.push_back(std::sqrt(best));
    }
  };
  directed(a, b);
  directed(b, a);
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * static_cast<double>(all.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, all.size() - 1);
  return all[lo] + (pos - static_cast<double>(lo)) * (all[hi] - all[lo]);
}

/// Value of a probed function plus a fingerprint of its discrete state
/// (nearest-neighbor assignments, argmax choices, active cells). A probe
/// whose fingerprint differs from the base point straddles a kink.
struct Probe {
  double value = 0.0;
  std::uint64_t signature = 0;
};

inline std::uint64_t fold(std::uint64_t h, std::uint64_t v) { return mix_seed(h, v); }

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t probed = 0;
  std::size_t skipped = 0;
};

/// Central differences against `analytic` at every coordinate. The per-
/// coordinate error is |fd - an| / max(|fd|, |an|, 1e-3 * max|an|) so that
/// coordinates with a vanishing gradient are judged against the gradient's
/// scale rather than against rounding noise.
template <typename F>
GradCheck finite_difference_check(std::vector<double> x, const std::vector<double>& analytic, F&& f,
                                  double h = 1e-5) {
  GradCheck out;
  const std::uint64_t base = f(x).signature;
  double scale = 0.0;
  for (double g : analytic) scale = std::max(scale, std::abs(g));
  const double floor = 1e-3 * scale;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const Probe plus = f(x);
    x[i] = x0 - h;
    const Probe minus = f(x);
    x[i] = x0;
    if (plus.signature != base || minus.signature != base) {
      ++out.skipped;
      continue;
    }
    const double fd = (plus.value - minus.value) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor});
    const double err = denom == 0.0 ? 0.0 : std::abs(fd - analytic[i]) / denom;
    ++out.probed;
    if (err > out.max_rel_error) {
      out.max_rel_error = err;
      out.worst_index = i;
    }
  }
  return out;
}

/// Fingerprint of the Chamfer nearest-neighbor structure between two clouds.
inline std::uint64_t chamfer_signature(const PointCloud& s, const PointCloud& t) {
  std::uint64_t h = fold(s.size(), t.size());
  for (const Point3& p : s.points) h = fold(h, nearest_index(t.points, p));
  for (const Point3& p : t.points) h = fold(h, nearest_index(s.points, p));
  return h;
}

/// Fingerprint of the argmax voxel of every projection line.
inline std::uint64_t projection_signature(const VoxelGrid& probs) {
  const Dims3& d = probs.dims();
  std::uint64_t h = 0;
  auto line = [&](int n, auto index) {
    std::size_t best = index(0);
    for (int k = 1; k < n; ++k) {
      if (probs[index(k)] > probs[best]) best = index(k);
    }
    h = fold(h, best);
  };
  for (int y = 0; y < d.h; ++y) {
    for (int x = 0; x < d.w; ++x) line(d.s, [&](int k) { return d.linear(k, y, x); });
  }
  for (int z = 0; z < d.s; ++z) {
    for (int x = 0; x < d.w; ++x) line(d.h, [&](int k) { return d.linear(z, k, x); });
  }
  for (int z = 0; z < d.s; ++z) {
    for (int y = 0; y < d.h; ++y) line(d.w, [&](int k) { return d.linear(z, y, k); });
  }
  return h;
}

/// Fingerprint of the discrete choices mask_loss makes for the given logits
/// when its rng is make_rng(seed) and registration is fixed to `pose`.
inline std::uint64_t mask_loss_signature(const VoxelGrid& logits, const PointCloud& templ, const Box3& box,
                                         const LossConfig& cfg, std::uint64_t seed, const RigidTransform& pose) {
  const VoxelGrid probs = sigmoid_field(logits);
  std::uint64_t h = cfg.weights.ori != 0.0 ? projection_signature(probs) : 0;
  if (cfg.weights.geo != 0.0) {
    Rng rng = make_rng(seed);
    const GumbelSample sample = gumbel_binarize(probs, cfg.gumbel_temperature, cfg.gumbel_hard, rng);
    const PointCloud proposal =
        gridding_reverse(sample.sample, cfg.gridding_threshold, dilate(box, cfg.geo_margin, logits.dims()));
    for (const auto& prov : *proposal.provenance) h = fold(h, prov.nodes[0]);
    if (!proposal.empty()) h = fold(h, chamfer_signature(proposal, apply_transform(templ, pose)));
  }
  return h;
}

}  // namespace boxprior::oracle
