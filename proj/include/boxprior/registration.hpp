#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "boxprior/error.hpp"
#include "boxprior/kdtree.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/rng.hpp"

namespace boxprior {

/// x -> rotation * x + translation, acting on (x, y, z) points.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Point3 apply(const Point3& p) const {
    const Eigen::Vector3d q = rotation * Eigen::Vector3d(p[0], p[1], p[2]) + translation;
    return {q.x(), q.y(), q.z()};
  }

  /// (*this) after `first`: x -> this(first(x)).
  RigidTransform compose(const RigidTransform& first) const {
    return {rotation * first.rotation, rotation * first.translation + translation};
  }

  RigidTransform inverse() const {
    const Eigen::Matrix3d rt = rotation.transpose();
    return {rt, -rt * translation};
  }

  /// max |R^T R - I| entry.
  double orthonormality_error() const {
    return (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  }
};

/// Angle of the relative rotation a^T b, radians.
inline double geodesic_angle(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

inline Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out;
  out.points.reserve(cloud.size());
  for (const Point3& p : cloud.points) out.points.push_back(t.apply(p));
  return out;
}

inline nlohmann::json to_json(const RigidTransform& t) {
  nlohmann::json rot = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rot.push_back({t.rotation(r, 0), t.rotation(r, 1), t.rotation(r, 2)});
  return {{"rotation", rot}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

inline RigidTransform transform_from_json(const nlohmann::json& j) {
  RigidTransform t;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) t.rotation(r, c) = j.at("rotation").at(r).at(c).get<double>();
  }
  for (int a = 0; a < 3; ++a) t.translation(a) = j.at("translation").at(a).get<double>();
  return t;
}

/// Least-squares rigid fit of source[i] onto target[target_index[i]] via the
/// cross-covariance SVD, with reflection repair.
inline RigidTransform kabsch(const PointCloud& source, const PointCloud& target,
                             const std::vector<std::size_t>& target_index) {
  const std::size_t n = source.size();
  if (target_index.size() != n) throw Error(ErrorCode::DimensionMismatch, "one correspondence per source point");
  if (n < 3) throw Error(ErrorCode::DegenerateConfiguration, "kabsch needs at least 3 correspondences");

  Eigen::Vector3d mean_s = Eigen::Vector3d::Zero();
  Eigen::Vector3d mean_t = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    if (target_index[i] >= target.size()) throw Error(ErrorCode::OutOfBounds, "correspondence index");
    const Point3& s = source.points[i];
    const Point3& t = target.points[target_index[i]];
    mean_s += Eigen::Vector3d(s[0], s[1], s[2]);
    mean_t += Eigen::Vector3d(t[0], t[1], t[2]);
  }
  mean_s /= static_cast<double>(n);
  mean_t /= static_cast<double>(n);

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const Point3& s = source.points[i];
    const Point3& t = target.points[target_index[i]];
    const Eigen::Vector3d ds = Eigen::Vector3d(s[0], s[1], s[2]) - mean_s;
    const Eigen::Vector3d dt = Eigen::Vector3d(t[0], t[1], t[2]) - mean_t;
    cov += ds * dt.transpose();
    scatter += ds * ds.transpose();
  }

  // Collinear (or coincident) sources leave rotation about their axis undetermined.
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  const auto ev = eig.eigenvalues();  // ascending
  if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2)) {
    throw Error(ErrorCode::DegenerateConfiguration, "source correspondences are collinear");
  }

  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  Eigen::Matrix3d fix = Eigen::Matrix3d::Identity();
  if ((v * u.transpose()).determinant() < 0.0) fix(2, 2) = -1.0;

  RigidTransform out;
  out.rotation = v * fix * u.transpose();
  out.translation = mean_t - out.rotation * mean_s;
  return out;
}

struct IcpParams {
  int max_iterations = 50;
  double convergence_eps = 1e-6;
  double sample_fraction = 0.2;
  /// Iterations spent on the full clouds after the subsampled stage.
  int refine_iterations = 20;

  friend bool operator==(const IcpParams&, const IcpParams&) = default;
};

struct IcpResult {
  RigidTransform transform;
  /// Mean squared correspondence distance per iteration of each stage.
  std::vector<double> coarse_objective;
  std::vector<double> refine_objective;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

// Runs point-to-point ICP from `start`; appends the objective per iteration.
inline RigidTransform icp_stage(const PointCloud& source, const PointCloud& target, RigidTransform start,
                                int max_iterations, double eps, std::vector<double>& trace, IcpResult& log) {
  const KdTree tree(target.points);
  std::vector<std::size_t> match(source.size());
  RigidTransform current = start;
  double previous_rms = -1.0;
  for (int it = 0; it < max_iterations; ++it) {
    double sum = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const Neighbor nn = tree.nearest(current.apply(source.points[i]));
      match[i] = nn.index;
      sum += nn.squared_distance;
    }
    const double mse = sum / static_cast<double>(source.size());
    trace.push_back(mse);
    ++log.iterations;
    const double rms = std::sqrt(mse);
    if (previous_rms >= 0.0 && std::abs(previous_rms - rms) < eps) {
      log.converged = true;
      break;
    }
    previous_rms = rms;
    current = kabsch(source, target, match);
  }
  return current;
}

}  // namespace detail

/// Registers `templ` onto `proposal`: returns T with T(template) ~ proposal.
/// A coarse stage runs on uniformly subsampled clouds, then a refine stage
/// continues on the full clouds. Without `initial`, the coarse stage starts
/// from the centroid-aligning translation.
inline IcpResult icp_register(const PointCloud& templ, const PointCloud& proposal, const IcpParams& params, Rng& rng,
                              const std::optional<RigidTransform>& initial = std::nullopt) {
  if (templ.empty() || proposal.empty()) throw Error(ErrorCode::EmptyCloud, "icp needs two nonempty clouds");
  if (params.max_iterations <= 0 || !(params.convergence_eps > 0.0) || !(params.sample_fraction > 0.0) ||
      params.sample_fraction > 1.0 || params.refine_iterations < 0) {
    throw Error(ErrorCode::InvalidArgument, "invalid ICP parameters");
  }
  const PointCloud sub_t = subsample_uniform(templ, params.sample_fraction, rng);
  const PointCloud sub_p = subsample_uniform(proposal, params.sample_fraction, rng);
  if (sub_t.size() < 3 || sub_p.size() < 3) {
    throw Error(ErrorCode::DegenerateConfiguration, "fewer than 3 points after subsampling");
  }

  IcpResult result;
  RigidTransform start;
  if (initial) {
    start = *initial;
  } else {
    const Point3 ct = centroid(sub_t);
    const Point3 cp = centroid(sub_p);
    start.translation = Eigen::Vector3d(cp[0] - ct[0], cp[1] - ct[1], cp[2] - ct[2]);
  }

  RigidTransform t = detail::icp_stage(sub_t, sub_p, start, params.max_iterations, params.convergence_eps,
                                      result.coarse_objective, result);
  if (params.refine_iterations > 0) {
    result.converged = false;
    t = detail::icp_stage(templ, proposal, t, params.refine_iterations, params.convergence_eps,
                          result.refine_objective, result);
  }
  result.transform = t;
  return result;
}

}  // namespace boxprior
