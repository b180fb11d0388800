#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "boxprior/checks.hpp"
#include "boxprior/pipeline.hpp"

using namespace boxprior;

namespace {

EmbeddingField unit_embeddings(const Dims3& d) {
  EmbeddingField e{d, 2, std::vector<double>(d.count() * 2, 0.0), 0};
  for (std::size_t v = 0; v < d.count(); ++v) e.data[v * 2] = 1.0;
  return e;
}

VoxelGrid box_indicator(const Dims3& d, const Box3& b, double in, double out, FieldKind kind) {
  std::vector<double> v(d.count(), out);
  for (int z = b.lo.z; z < b.hi.z; ++z) {
    for (int y = b.lo.y; y < b.hi.y; ++y) {
      for (int x = b.lo.x; x < b.hi.x; ++x) v[d.linear(z, y, x)] = in;
    }
  }
  return VoxelGrid(d, std::move(v), kind);
}

}  // namespace

TEST(Completeness, CenteredBlobIsComplete) {
  const CompletenessResult r =
      completeness_gate(box_indicator({12, 12, 12}, {{4, 4, 4}, {8, 8, 8}}, 0.9, 0.0, FieldKind::Probability), 0.6, 2);
  EXPECT_EQ(r.score, 1.0);
  EXPECT_TRUE(r.complete);
}

TEST(Completeness, SlicedBlobIsIncomplete) {
  // Half of the blob's mass lies inside the 2-voxel border band.
  const CompletenessResult r =
      completeness_gate(box_indicator({12, 12, 12}, {{0, 4, 4}, {4, 8, 8}}, 0.9, 0.0, FieldKind::Probability), 0.6, 2);
  EXPECT_DOUBLE_EQ(r.score, 0.5);
  EXPECT_FALSE(r.complete);
}

TEST(Completeness, EmptyFieldIsIncomplete) {
  const CompletenessResult r = completeness_gate(VoxelGrid::filled({8, 8, 8}, 0.0, FieldKind::Probability), 0.6, 2);
  EXPECT_EQ(r.score, 0.0);
  EXPECT_FALSE(r.complete);
}

TEST(BoxLoss, PerfectProjectionsAreZero) {
  const Dims3 d{6, 7, 8};
  const Box3 b{{1, 2, 3}, {4, 6, 7}};
  EXPECT_EQ(box_projection_loss(box_indicator(d, b, 1.0, 0.0, FieldKind::Probability), b, 1e-6).value, 0.0);
}

TEST(BoxLoss, EmptyFieldIsClampedBce) {
  const Dims3 d{6, 7, 8};
  const Box3 b{{1, 2, 3}, {4, 6, 7}};
  const Dims3 e = b.extent();
  const double positive = e.h * e.w + e.s * e.w + e.s * e.h;
  const double cells = d.h * d.w + d.s * d.w + d.s * d.h;
  const double v = box_projection_loss(VoxelGrid::filled(d, 0.0, FieldKind::Probability), b, 1e-6).value;
  EXPECT_NEAR(v, -std::log(1e-6) * positive / cells, 1e-12);
  EXPECT_GT(v, 0.0);
}

TEST(BoxLoss, GradientMatchesFiniteDifferences) {
  const CheckResult r = check_box_gradient();
  EXPECT_TRUE(r.passed) << format_check(r);
}

TEST(MaskLoss, BoxOnlyReducesToProjectionLoss) {
  Rng rng = make_rng(101);
  const Dims3 d{8, 8, 8};
  const Box3 box{{2, 2, 2}, {6, 6, 6}};
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(d.count());
  for (double& v : x) v = g(rng);
  const VoxelGrid logits(d, x);
  LossConfig cfg;
  cfg.weights = {1.5, 0.0, 0.0};
  const PointCloud templ{{{1, 1, 1}}, std::nullopt};
  const MaskLossResult r =
      mask_loss(logits, templ, unit_embeddings(d), build_edge_graph(d, Neighborhood::Six), box, cfg, rng);
  const VoxelGrid p = sigmoid_field(logits);
  const LossGrad ref = box_projection_loss(p, box, cfg.prob_floor);
  EXPECT_EQ(r.total, 1.5 * ref.value);
  EXPECT_EQ(r.components.geo, 0.0);
  EXPECT_EQ(r.components.cons, 0.0);
  for (std::size_t i = 0; i < d.count(); ++i) EXPECT_DOUBLE_EQ(r.grad[i], 1.5 * ref.grad[i] * p[i] * (1 - p[i]));
}

TEST(MaskLoss, CoincidentProposalHasZeroGeometricTerm) {
  const Dims3 d{16, 16, 16};
  const Box3 box{{4, 4, 4}, {12, 12, 12}};
  LossConfig cfg;
  cfg.weights = {0.0, 1.0, 0.0};
  const VoxelGrid mask = box_indicator(d, {{5, 5, 5}, {11, 11, 11}}, 1.0, 0.0, FieldKind::Binary);
  const PointCloud templ = gridding_reverse(mask, cfg.gridding_threshold, dilate(box, cfg.geo_margin, d));
  const VoxelGrid logits = box_indicator(d, {{5, 5, 5}, {11, 11, 11}}, 40.0, -40.0, FieldKind::Scalar);
  RegistrationHint hint;
  hint.fixed = RigidTransform{};
  Rng rng = make_rng(102);
  const MaskLossResult r =
      mask_loss(logits, templ, unit_embeddings(d), build_edge_graph(d, Neighborhood::Six), box, cfg, rng, hint);
  EXPECT_TRUE(r.geo_active);
  EXPECT_EQ(r.components.geo, 0.0);
  EXPECT_EQ(r.proposal_points, templ.size());
}

TEST(MaskLoss, GradientMatchesFiniteDifferences) {
  const CheckResult r = check_mask_loss_gradient();
  EXPECT_TRUE(r.passed) << format_check(r);
  EXPECT_LT(r.measured, 5e-3);
}

TEST(MaskLoss, GateSkipsGeometricTermForCroppedObject) {
  const Dims3 d{16, 16, 16};
  const Box3 box{{0, 4, 4}, {4, 12, 12}};
  LossConfig cfg;
  cfg.weights = {0.0, 1.0, 0.0};
  const VoxelGrid logits = box_indicator(d, box, 40.0, -40.0, FieldKind::Scalar);
  const PointCloud templ = gridding_reverse(box_indicator(d, box, 1.0, 0.0, FieldKind::Binary), 0.125);
  Rng a = make_rng(103), b = make_rng(103);
  const auto graph = build_edge_graph(d, Neighborhood::Six);
  const MaskLossResult gated = mask_loss(logits, templ, unit_embeddings(d), graph, box, cfg, a);
  EXPECT_FALSE(gated.geo_active);
  EXPECT_EQ(gated.components.geo, 0.0);
  cfg.completeness_gate = false;
  const MaskLossResult open = mask_loss(logits, templ, unit_embeddings(d), graph, box, cfg, b);
  EXPECT_TRUE(open.geo_active);
}

TEST(Optimize, ZeroStepsReturnsInit) {
  const Dims3 d{6, 6, 6};
  Rng rng = make_rng(104);
  std::vector<double> x(d.count());
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : x) v = g(rng);
  LossConfig cfg;
  cfg.steps = 0;
  const OptimizeResult r = optimize_mask(VoxelGrid(d, x), {{{1, 1, 1}}, std::nullopt}, unit_embeddings(d),
                                         build_edge_graph(d, Neighborhood::Six), {{1, 1, 1}, {5, 5, 5}}, cfg);
  for (std::size_t i = 0; i < d.count(); ++i) EXPECT_EQ(r.logits[i], x[i]);
  EXPECT_EQ(r.trace.size(), 0u);
}

TEST(Optimize, SmoothedLossDecreasesOnSyntheticTask) {
  Rng rng = make_rng(105);
  const SynthCase sc = synth_volume(ShapeKind::HollowSphere, {24, 24, 24}, 0.3, 1.0, rng);
  TrainSettings s;
  s.loss.steps = 60;
  s.loss.register_every = 5;
  s.pretrain.coarse_steps = s.pretrain.refine_steps = 40;
  s.pretrain.k = 32;
  const TrainOutcome out = train_volume(sc.image, sc.box, sc.templ, s, &sc.gt_mask);
  const RunTrace& t = out.patches.at(0).trace;
  ASSERT_EQ(t.size(), 60u);
  auto window = [&](std::size_t begin) {
    double sum = 0;
    for (std::size_t i = begin; i < begin + 20; ++i) sum += t.total[i];
    return sum / 20;
  };
  EXPECT_LT(window(40), window(0));
  EXPECT_LT(t.total.back(), t.total.front());
  ASSERT_TRUE(out.metrics.has_value());
  EXPECT_GT(out.metrics->dice, 0.5);
}

TEST(PatchNms, SinglePatchIsIdentity) {
  Rng rng = make_rng(106);
  const Dims3 d{5, 6, 7};
  const VoxelGrid p(d, detail::uniform_values(d.count(), 0, 1, rng), FieldKind::Probability);
  const VoxelGrid r = patch_nms({{PatchSpec{{0, 0, 0}, d}, p}}, d);
  for (std::size_t i = 0; i < d.count(); ++i) EXPECT_EQ(r[i], p[i]);
}

TEST(PatchNms, OverlapTakesMostConfident) {
  const Dims3 full{4, 4, 6};
  const Dims3 pd{4, 4, 4};
  const VoxelGrid a = VoxelGrid::filled(pd, 0.9, FieldKind::Probability);
  const VoxelGrid b = VoxelGrid::filled(pd, 0.6, FieldKind::Probability);
  for (const bool swap : {false, true}) {
    std::vector<std::pair<PatchSpec, VoxelGrid>> in = {{PatchSpec{{0, 0, 0}, pd}, swap ? b : a},
                                                       {PatchSpec{{0, 0, 2}, pd}, swap ? a : b}};
    const VoxelGrid r = patch_nms(in, full);
    EXPECT_EQ(r.at(1, 1, 2), 0.9);
    EXPECT_EQ(r.at(1, 1, 3), 0.9);
  }
}

TEST(PatchNms, MatchesPerVoxelOracle) {
  Rng rng = make_rng(107);
  const Dims3 full{32, 32, 32};
  const Dims3 pd{16, 16, 16};
  std::vector<std::pair<PatchSpec, VoxelGrid>> in;
  for (const PatchSpec& s : tile_patches(full, pd, {8, 8, 8})) {
    in.emplace_back(s, VoxelGrid(pd, detail::uniform_values(pd.count(), 0, 1, rng), FieldKind::Probability));
  }
  const VoxelGrid r = patch_nms(in, full);
  for (std::size_t v = 0; v < full.count(); v += 7) {
    const Index3 i = full.unravel(v);
    double best = -1, value = 0;
    for (const auto& [s, p] : in) {
      const int z = i.z - s.origin.z, y = i.y - s.origin.y, x = i.x - s.origin.x;
      if (!pd.contains(z, y, x)) continue;
      const double c = std::abs(p.at(z, y, x) - 0.5);
      if (c > best) best = c, value = p.at(z, y, x);
    }
    EXPECT_EQ(r[v], value);
  }
}

TEST(PatchNms, UncoveredVoxelIsAnError) {
  const Dims3 pd{2, 2, 2};
  try {
    patch_nms({{PatchSpec{{0, 0, 0}, pd}, VoxelGrid::filled(pd, 0.5, FieldKind::Probability)}}, {3, 2, 2});
    FAIL() << "expected CoverageGap";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CoverageGap);
  }
}

TEST(Synth, NoiselessSphereHasTwoValues) {
  Rng rng = make_rng(108);
  const SynthCase sc = synth_volume(ShapeKind::Sphere, {24, 24, 24}, 0.0, 2.5, rng);
  for (std::size_t i = 0; i < sc.image.size(); ++i) EXPECT_EQ(sc.image[i], 2.5 * sc.gt_mask[i]);
  EXPECT_EQ(sc.box, box_from_mask(sc.gt_mask));
}

TEST(Synth, HollowSphereCavityFraction) {
  Rng rng = make_rng(109);
  const SynthCase sc = synth_volume(ShapeKind::HollowSphere, {48, 48, 48}, 0.0, 1.0, rng);
  const ShapeModel& s = sc.shape;
  std::size_t shell = 0, cavity = 0;
  for (std::size_t v = 0; v < sc.gt_mask.size(); ++v) {
    const Index3 i = sc.gt_mask.dims().unravel(v);
    const Point3 p{static_cast<double>(i.x), static_cast<double>(i.y), static_cast<double>(i.z)};
    shell += sc.gt_mask[v] != 0.0;
    if (s.inside(p, true) && !s.inside(p, false)) {
      ++cavity;
      EXPECT_EQ(sc.gt_mask[v], 0.0);
    }
  }
  const double measured = static_cast<double>(cavity) / static_cast<double>(cavity + shell);
  const double analytic = std::pow(s.inner_radius / s.radius, 3);
  // One voxel shell of slack on each radius.
  const double lo = std::pow((s.inner_radius - 1) / (s.radius + 1), 3);
  const double hi = std::pow((s.inner_radius + 1) / (s.radius - 1), 3);
  EXPECT_GT(measured, lo);
  EXPECT_LT(measured, hi);
  EXPECT_NEAR(measured, analytic, hi - analytic);
}

TEST(Synth, SameSeedIsBitIdentical) {
  Rng a = make_rng(110), b = make_rng(110);
  const SynthCase x = synth_volume(ShapeKind::TwoLobes, {20, 20, 20}, 0.3, 1.0, a);
  const SynthCase y = synth_volume(ShapeKind::TwoLobes, {20, 20, 20}, 0.3, 1.0, b);
  for (std::size_t i = 0; i < x.image.size(); ++i) EXPECT_EQ(x.image[i], y.image[i]);
  EXPECT_EQ(x.templ.points, y.templ.points);
}

TEST(Synth, TemplateFollowsStoredPose) {
  for (const ShapeKind kind : {ShapeKind::HollowSphere, ShapeKind::TwoLobes}) {
    Rng rng = make_rng(111);
    const SynthCase sc = synth_volume(kind, {32, 32, 32}, 0.3, 1.0, rng);
    const double deg = geodesic_angle(sc.template_pose.rotation, Eigen::Matrix3d::Identity()) * 180 / std::numbers::pi;
    EXPECT_LE(deg, 10.0 + 1e-9);
    const PointCloud posed = gridding_reverse(rasterize(sc.shape, {32, 32, 32}, sc.template_pose), 0.125);
    EXPECT_EQ(posed.points, sc.templ.points);
  }
}

TEST(Synth, SmallDimsRejected) {
  Rng rng = make_rng(112);
  EXPECT_THROW(synth_volume(ShapeKind::Sphere, {8, 8, 8}, 0.0, 1.0, rng), Error);
}
