#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "boxprior/error.hpp"
#include "boxprior/kdtree.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

/// The eight lattice nodes that produced a gridding-reverse point together
/// with their normalized blend weights c_i / sum(c) and the cell mass sum(c).
struct CellProvenance {
  std::array<std::size_t, 8> nodes{};
  std::array<double, 8> weights{};
  double mass = 0.0;
};

/// Points are (x, y, z) in voxel-index units: x is the column, z the slice.
struct PointCloud {
  std::vector<Point3> points;
  std::optional<std::vector<CellProvenance>> provenance;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool has_provenance() const noexcept { return provenance.has_value(); }
};

inline Point3 node_point(const Index3& node) noexcept {
  return {static_cast<double>(node.x), static_cast<double>(node.y), static_cast<double>(node.z)};
}

/// Gridding reverse on a vertex-valued lattice: each unit cell whose mean
/// corner value exceeds `threshold` emits the corner-value-weighted centroid
/// of its eight nodes. With `region`, only cells whose eight nodes all lie
/// inside it are considered.
inline PointCloud gridding_reverse(const VoxelGrid& probs, double threshold,
                                   const std::optional<Box3>& region = std::nullopt) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorCode::InvalidArgument, "threshold must be in (0,1)");
  const Dims3& d = probs.dims();
  const Box3 nodes = region.value_or(Box3{{0, 0, 0}, {d.s, d.h, d.w}});
  require_box_in(nodes, d);
  PointCloud cloud;
  cloud.provenance.emplace();
  const auto values = probs.values();
  for (int z = nodes.lo.z; z + 1 < nodes.hi.z; ++z) {
    for (int y = nodes.lo.y; y + 1 < nodes.hi.y; ++y) {
      for (int x = nodes.lo.x; x + 1 < nodes.hi.x; ++x) {
        CellProvenance prov;
        std::array<double, 8> c{};
        double sum = 0.0;
        for (int k = 0; k < 8; ++k) {
          const std::size_t node = d.linear(z + (k >> 2), y + ((k >> 1) & 1), x + (k & 1));
          prov.nodes[k] = node;
          c[k] = values[node];
          sum += c[k];
        }
        if (!(sum / 8.0 > threshold)) continue;
        Point3 p{0.0, 0.0, 0.0};
        for (int k = 0; k < 8; ++k) {
          prov.weights[k] = c[k] / sum;
          p[0] += c[k] * (x + (k & 1));
          p[1] += c[k] * (y + ((k >> 1) & 1));
          p[2] += c[k] * (z + (k >> 2));
        }
        for (double& v : p) v /= sum;
        prov.mass = sum;
        cloud.points.push_back(p);
        cloud.provenance->push_back(prov);
      }
    }
  }
  return cloud;
}

/// Keeps ceil(fraction * N) points chosen uniformly without replacement.
/// Input order is preserved among the retained points.
inline PointCloud subsample_uniform(const PointCloud& cloud, double fraction, Rng& rng) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "cannot subsample an empty cloud");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::InvalidArgument, "fraction must be in (0,1]");
  const auto n = cloud.size();
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> picked;
  picked.reserve(keep);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), keep, rng);

  PointCloud out;
  out.points.reserve(keep);
  if (cloud.has_provenance()) out.provenance.emplace().reserve(keep);
  for (std::size_t i : picked) {
    out.points.push_back(cloud.points[i]);
    if (cloud.has_provenance()) out.provenance->push_back((*cloud.provenance)[i]);
  }
  return out;
}

struct ChamferResult {
  double value = 0.0;
  double forward_term = 0.0;   // mean over S of distance to nearest T
  double backward_term = 0.0;  // mean over T of distance to nearest S
  /// d(value)/d(point) for every point of the first cloud, T held constant.
  std::vector<Point3> grad_points;
};

struct ChamferOptions {
  /// Use squared Euclidean distances instead of the plain norm.
  bool squared = false;
};

namespace detail {
// Gradient of ||x - y|| (or ||x - y||^2) with respect to x, scaled.
inline void add_distance_grad(Point3& g, const Point3& x, const Point3& y, double scale, bool squared) {
  const double d2 = squared_distance(x, y);
  if (d2 == 0.0) return;
#ifdef BOXPRIOR_INJECT_CHAMFER_SIGN_ERROR
  scale = -scale;
#endif
  const double f = squared ? 2.0 * scale : scale / std::sqrt(d2);
  for (int a = 0; a < 3; ++a) g[a] += f * (x[a] - y[a]);
}
}  // namespace detail

/// Symmetric Chamfer distance with mean nearest-neighbor terms in both
/// directions, plus its gradient with respect to the points of `s`.
/// Nearest-neighbor ties go to the lowest index.
inline ChamferResult chamfer(const PointCloud& s, const PointCloud& t, ChamferOptions opts = {}) {
  if (s.empty() || t.empty()) throw Error(ErrorCode::EmptyCloud, "chamfer needs two nonempty clouds");
  const KdTree tree_t(t.points);
  const KdTree tree_s(s.points);
  const double inv_s = 1.0 / static_cast<double>(s.size());
  const double inv_t = 1.0 / static_cast<double>(t.size());
  auto dist = [&](const Point3& a, const Point3& b) {
    return opts.squared ? squared_distance(a, b) : distance(a, b);
  };

  ChamferResult r;
  r.grad_points.assign(s.size(), Point3{0.0, 0.0, 0.0});
  double sum_s = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Neighbor nn = tree_t.nearest(s.points[i]);
    sum_s += dist(s.points[i], t.points[nn.index]);
    detail::add_distance_grad(r.grad_points[i], s.points[i], t.points[nn.index], inv_s, opts.squared);
  }
  double sum_t = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j) {
    const Neighbor nn = tree_s.nearest(t.points[j]);
    sum_t += dist(t.points[j], s.points[nn.index]);
    detail::add_distance_grad(r.grad_points[nn.index], s.points[nn.index], t.points[j], inv_t, opts.squared);
  }
  r.forward_term = sum_s * inv_s;
  r.backward_term = sum_t * inv_t;
  r.value = r.forward_term + r.backward_term;
  return r;
}

/// Chains Chamfer point gradients back onto the lattice that produced the
/// cloud via gridding_reverse. The emit/skip decision is not differentiated.
inline VoxelGrid chamfer_grad_to_grid(const ChamferResult& result, const PointCloud& cloud, const Dims3& dims) {
  if (!cloud.has_provenance()) throw Error(ErrorCode::MissingProvenance, "cloud has no gridding provenance");
  if (result.grad_points.size() != cloud.size() || cloud.provenance->size() != cloud.size()) {
    throw Error(ErrorCode::DimensionMismatch, "gradient and cloud sizes differ");
  }
  std::vector<double> grad(dims.count(), 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Point3& g = result.grad_points[i];
    if (g[0] == 0.0 && g[1] == 0.0 && g[2] == 0.0) continue;
    const CellProvenance& prov = (*cloud.provenance)[i];
    const Point3& p = cloud.points[i];
    // d(point)/d(c_k) = (v_k - point) / sum(c)
    for (int k = 0; k < 8; ++k) {
      if (prov.nodes[k] >= grad.size()) throw Error(ErrorCode::OutOfBounds, "provenance node outside grid");
      const Point3 v = node_point(dims.unravel(prov.nodes[k]));
      double dot = 0.0;
      for (int a = 0; a < 3; ++a) dot += g[a] * (v[a] - p[a]);
      grad[prov.nodes[k]] += dot / prov.mass;
    }
  }
  return VoxelGrid(dims, std::move(grad));
}

inline PointCloud translate(const PointCloud& cloud, const Point3& t) {
  PointCloud out{cloud.points, std::nullopt};
  for (Point3& p : out.points) {
    for (int a = 0; a < 3; ++a) p[a] += t[a];
  }
  return out;
}

inline Point3 centroid(const PointCloud& cloud) {
  if (cloud.empty()) throw Error(ErrorCode::EmptyCloud, "centroid of empty cloud");
  Point3 c{0.0, 0.0, 0.0};
  for (const Point3& p : cloud.points) {
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  }
  for (double& v : c) v /= static_cast<double>(cloud.size());
  return c;
}

// CSV with header "x,y,z"; values written with 17 significant digits.

inline void save_cloud_csv(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "x,y,z\n";
  char buf[96];
  for (const Point3& p : cloud.points) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
}

inline PointCloud load_cloud_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("x,y,z", 0) != 0) {
    throw Error(ErrorCode::Io, path.string() + ": missing x,y,z header");
  }
  PointCloud cloud;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    Point3 p{};
    char c1 = 0;
    char c2 = 0;
    if (!(row >> p[0] >> c1 >> p[1] >> c2 >> p[2]) || c1 != ',' || c2 != ',' || !std::isfinite(p[0]) ||
        !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw Error(ErrorCode::Io, path.string() + ":" + std::to_string(lineno) + ": malformed point");
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

}  // namespace boxprior
