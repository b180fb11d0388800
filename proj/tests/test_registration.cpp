#include <numbers>

#include <gtest/gtest.h>

#include "boxprior/registration.hpp"

using namespace boxprior;

namespace {

PointCloud blob_cloud(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointCloud c;
  while (c.size() < n) {
    const double x = u(rng) * 10, y = u(rng) * 6, z = u(rng) * 4;
    const bool a = x * x / 100 + y * y / 36 + z * z / 16 <= 1.0;
    const bool b = ((x - 6) * (x - 6) + (y - 3) * (y - 3) + z * z) / 9 <= 1.0;
    if (a || b) c.points.push_back({x, y, z});
  }
  return c;
}

RigidTransform random_pose(double max_deg, double max_shift, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  RigidTransform t;
  t.rotation = axis_angle(Eigen::Vector3d(u(rng), u(rng), u(rng)), std::abs(u(rng)) * max_deg * std::numbers::pi / 180);
  t.translation = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized() * std::abs(u(rng)) * max_shift;
  return t;
}

std::vector<std::size_t> identity_index(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

TEST(ApplyTransform, Identity) {
  Rng rng = make_rng(41);
  const PointCloud c = blob_cloud(20, rng);
  EXPECT_EQ(apply_transform(c, RigidTransform::identity()).points, c.points);
}

TEST(ApplyTransform, PureTranslation) {
  RigidTransform t;
  t.translation = {1, 2, 3};
  const PointCloud r = apply_transform({{{0, 0, 0}}, std::nullopt}, t);
  EXPECT_EQ(r.points[0], (Point3{1, 2, 3}));
}

TEST(ApplyTransform, CompositionMatchesComposedMatrix) {
  Rng rng = make_rng(42);
  const PointCloud c = blob_cloud(50, rng);
  const RigidTransform t1 = random_pose(40, 5, rng), t2 = random_pose(40, 5, rng);
  const PointCloud a = apply_transform(apply_transform(c, t1), t2);
  const PointCloud b = apply_transform(c, t2.compose(t1));
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(a.points[i][k], b.points[i][k], 1e-12);
  }
}

TEST(Kabsch, SelfAlignmentIsIdentity) {
  Rng rng = make_rng(43);
  const PointCloud c = blob_cloud(30, rng);
  const RigidTransform t = kabsch(c, c, identity_index(c.size()));
  EXPECT_LT((t.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(t.translation.norm(), 1e-12);
}

TEST(Kabsch, RecoversKnownPose) {
  Rng rng = make_rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    const PointCloud c = blob_cloud(40, rng);
    const RigidTransform truth = random_pose(170, 10, rng);
    const RigidTransform t = kabsch(c, apply_transform(c, truth), identity_index(c.size()));
    EXPECT_LT((t.rotation - truth.rotation).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((t.translation - truth.translation).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(t.orthonormality_error(), 1e-9);
    EXPECT_NEAR(t.rotation.determinant(), 1.0, 1e-9);
  }
}

TEST(Kabsch, CollinearIsDegenerate) {
  const PointCloud line{{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}}, std::nullopt};
  try {
    kabsch(line, line, identity_index(3));
    FAIL() << "expected DegenerateConfiguration";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateConfiguration);
  }
}

TEST(Kabsch, TooFewPointsIsDegenerate) {
  const PointCloud two{{{0, 0, 0}, {1, 0, 0}}, std::nullopt};
  EXPECT_THROW(kabsch(two, two, identity_index(2)), Error);
}

TEST(Icp, ExactCopyGivesIdentity) {
  Rng rng = make_rng(45);
  const PointCloud c = blob_cloud(500, rng);
  const IcpResult r = icp_register(c, c, IcpParams{}, rng);
  EXPECT_LT((r.transform.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT(r.transform.translation.norm(), 1e-9);
}

TEST(Icp, RecoversSmallPerturbation) {
  Rng rng = make_rng(46);
  for (int trial = 0; trial < 10; ++trial) {
    const PointCloud c = blob_cloud(500, rng);
    const RigidTransform truth = random_pose(15, 2, rng);
    const IcpResult r = icp_register(c, apply_transform(c, truth), IcpParams{}, rng);
    EXPECT_LT(geodesic_angle(r.transform.rotation, truth.rotation) * 180 / std::numbers::pi, 1.0);
    EXPECT_LT((r.transform.translation - truth.translation).norm(), 0.05);
    EXPECT_LE(r.iterations, 50);
    EXPECT_LT(r.transform.orthonormality_error(), 1e-9);
  }
}

TEST(Icp, NoisyCopyConvergesToNoiseFloor) {
  Rng rng = make_rng(47);
  const double sigma = 0.05;
  const PointCloud c = blob_cloud(500, rng);
  std::normal_distribution<double> g(0.0, sigma);
  PointCloud noisy = c;
  for (auto& p : noisy.points) {
    for (double& v : p) v += g(rng);
  }
  const IcpResult r = icp_register(c, noisy, IcpParams{}, rng);
  const PointCloud moved = apply_transform(c, r.transform);
  double mean = 0.0;
  for (const auto& p : moved.points) {
    double best = 1e300;
    for (const auto& q : noisy.points) best = std::min(best, squared_distance(p, q));
    mean += std::sqrt(best);
  }
  mean /= static_cast<double>(moved.size());
  EXPECT_LE(mean, 3 * sigma);
}

TEST(Icp, ObjectiveNeverIncreases) {
  Rng rng = make_rng(48);
  for (int trial = 0; trial < 10; ++trial) {
    const PointCloud c = blob_cloud(300, rng);
    const IcpResult r = icp_register(c, apply_transform(c, random_pose(15, 2, rng)), IcpParams{}, rng);
    for (const auto* trace : {&r.coarse_objective, &r.refine_objective}) {
      for (std::size_t i = 1; i < trace->size(); ++i) EXPECT_LE((*trace)[i], (*trace)[i - 1] * (1 + 1e-12));
    }
  }
}

TEST(Icp, EmptyCloudThrows) {
  Rng rng = make_rng(49);
  EXPECT_THROW(icp_register(PointCloud{}, blob_cloud(10, rng), IcpParams{}, rng), Error);
}

TEST(TransformJson, RoundTrip) {
  Rng rng = make_rng(50);
  const RigidTransform t = random_pose(30, 3, rng);
  const RigidTransform r = transform_from_json(to_json(t));
  EXPECT_EQ(r.rotation, t.rotation);
  EXPECT_EQ(r.translation, t.translation);
}
