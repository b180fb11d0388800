#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "boxprior/contrastive.hpp"
#include "boxprior/metrics.hpp"
#include "boxprior/oracles.hpp"
#include "boxprior/pairwise.hpp"
#include "boxprior/parallel.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/registration.hpp"
#include "boxprior/trainer.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

struct CheckResult {
  std::string name;
  /// The library operation under test.
  std::string operation;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

inline std::vector<double> uniform_values(std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline PointCloud random_cloud(std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  PointCloud c;
  c.points.resize(n);
  for (Point3& p : c.points) p = {u(rng), u(rng), u(rng)};
  return c;
}

/// Unit vectors scattered around two orthogonal directions, so that a
/// similarity gate at 0.6 keeps some edges and drops others.
inline EmbeddingField clustered_embeddings(const Dims3& dims, int dim, Rng& rng) {
  std::normal_distribution<double> g(0.0, 0.35);
  std::bernoulli_distribution pick(0.5);
  EmbeddingField e{dims, dim, std::vector<double>(dims.count() * dim), 0};
  for (std::size_t v = 0; v < dims.count(); ++v) {
    const int axis = pick(rng) ? 0 : 1;
    double norm = 0.0;
    for (int k = 0; k < dim; ++k) {
      double& x = e.data[v * dim + k];
      x = (k == axis ? 1.0 : 0.0) + g(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (int k = 0; k < dim; ++k) e.data[v * dim + k] /= norm;
  }
  return e;
}

/// Union of a few random balls; never empty.
inline VoxelGrid random_blobs(const Dims3& d, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> m(d.count(), 0.0);
  const int balls = 1 + static_cast<int>(u(rng) * 3);
  for (int b = 0; b < balls; ++b) {
    const double cz = u(rng) * (d.s - 1), cy = u(rng) * (d.h - 1), cx = u(rng) * (d.w - 1);
    const double r = 2.0 + u(rng) * 6.0;
    for (int z = 0; z < d.s; ++z) {
      for (int y = 0; y < d.h; ++y) {
        for (int x = 0; x < d.w; ++x) {
          if ((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) m[d.linear(z, y, x)] = 1.0;
        }
      }
    }
  }
  m[d.linear(static_cast<int>(u(rng) * d.s), static_cast<int>(u(rng) * d.h), static_cast<int>(u(rng) * d.w))] = 1.0;
  return VoxelGrid(d, std::move(m), FieldKind::Binary);
}

inline CheckResult gradient_result(std::string name, std::string op, const oracle::GradCheck& g, double tol) {
  CheckResult r{std::move(name), std::move(op), g.max_rel_error, tol, g.max_rel_error < tol && g.probed > 0, ""};
  r.detail = std::to_string(g.probed) + " coordinates probed, " + std::to_string(g.skipped) + " skipped at kinks";
  return r;
}

}  // namespace detail

/// 100 random cloud pairs (up to 512 points, coordinates in [0,32]^3):
/// k-d tree Chamfer value and point gradients against the double loop.
inline CheckResult check_chamfer_oracle(std::uint64_t seed = 1) {
  Rng rng = make_rng(seed, 101);
  std::uniform_int_distribution<std::size_t> size(1, 512);
  const auto start = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const PointCloud s = detail::random_cloud(size(rng), 0.0, 32.0, rng);
    const PointCloud t = detail::random_cloud(size(rng), 0.0, 32.0, rng);
    const ChamferResult fast = chamfer(s, t);
    const ChamferResult slow = oracle::chamfer_brute(s, t);
    worst = std::max(worst, oracle::relative_error(fast.value, slow.value));
    for (std::size_t i = 0; i < s.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        worst = std::max(worst, oracle::relative_error(fast.grad_points[i][a], slow.grad_points[i][a]));
      }
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CheckResult r{"chamfer.oracle", "chamfer", worst, 1e-12, worst < 1e-12 && seconds < 10.0, ""};
  r.detail = "100 pairs in " + detail::fmt("%.2f s (limit 10 s)", seconds);
  return r;
}

/// grid -> gridding_reverse -> chamfer -> chamfer_grad_to_grid on a 6^3 grid.
inline CheckResult check_chamfer_gradient(std::uint64_t seed = 2) {
  Rng rng = make_rng(seed, 102);
  const Dims3 d{6, 6, 6};
  const std::vector<double> x0 = detail::uniform_values(d.count(), 0.05, 0.95, rng);
  const PointCloud target = detail::random_cloud(40, 0.0, 5.0, rng);
  const double thr = 0.125;
  auto eval = [&](const std::vector<double>& x) {
    const PointCloud prop = gridding_reverse(VoxelGrid(d, x, FieldKind::Probability), thr);
    std::uint64_t sig = oracle::chamfer_signature(prop, target);
    for (const auto& p : *prop.provenance) sig = oracle::fold(sig, p.nodes[0]);
    return oracle::Probe{chamfer(prop, target).value, sig};
  };
  const PointCloud prop = gridding_reverse(VoxelGrid(d, x0, FieldKind::Probability), thr);
  const VoxelGrid g = chamfer_grad_to_grid(chamfer(prop, target), prop, d);
  const std::vector<double> analytic(g.values().begin(), g.values().end());
  return detail::gradient_result("chamfer.gradient", "chamfer_grad_to_grid",
                                 oracle::finite_difference_check(x0, analytic, eval), 1e-4);
}

/// Constant-valued grids: every cell emits its exact center.
inline CheckResult check_gridding_centers(std::uint64_t seed = 3) {
  Rng rng = make_rng(seed, 103);
  std::uniform_int_distribution<int> extent(2, 6);
  std::uniform_real_distribution<double> level(0.2, 1.0);
  double worst = 0.0;
  bool counts_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Dims3 d{extent(rng), extent(rng), extent(rng)};
    const VoxelGrid g = VoxelGrid::filled(d, level(rng), FieldKind::Probability);
    const PointCloud c = gridding_reverse(g, 0.125);
    counts_ok &= c.size() == static_cast<std::size_t>((d.s - 1) * (d.h - 1) * (d.w - 1));
    std::size_t k = 0;
    for (int z = 0; z + 1 < d.s; ++z) {
      for (int y = 0; y + 1 < d.h; ++y) {
        for (int x = 0; x + 1 < d.w && k < c.size(); ++x, ++k) {
          const Point3 center{x + 0.5, y + 0.5, z + 0.5};
          for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(c.points[k][a] - center[a]));
        }
      }
    }
  }
  CheckResult r{"gridding.centers", "gridding_reverse", worst, 1e-12, counts_ok && worst < 1e-12, ""};
  r.detail = counts_ok ? "100 constant grids" : "emitted point count differs from cell count";
  return r;
}

/// 100 random 8^3 grids: point count and coordinates against a per-cell scan.
inline CheckResult check_gridding_count(std::uint64_t seed = 4) {
  Rng rng = make_rng(seed, 104);
  const Dims3 d{8, 8, 8};
  std::size_t mismatched = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const VoxelGrid g(d, detail::uniform_values(d.count(), 0.0, 0.3, rng), FieldKind::Probability);
    const PointCloud c = gridding_reverse(g, 0.125);
    const std::vector<Point3> ref = oracle::gridding_reference(g, 0.125);
    if (c.size() != ref.size()) {
      ++mismatched;
      continue;
    }
    for (std::size_t i = 0; i < ref.size(); ++i) {
      for (int a = 0; a < 3; ++a) worst = std::max(worst, std::abs(c.points[i][a] - ref[i][a]));
    }
  }
  CheckResult r{"gridding.count", "gridding_reverse", static_cast<double>(mismatched), 0.0,
                mismatched == 0 && worst < 1e-12, ""};
  r.detail = "grids with a count mismatch; max coordinate deviation " + detail::fmt("%.3g", worst);
  return r;
}

/// Hard-sample foreground frequency over 1e5 draws at p in {0.1, 0.5, 0.9}.
inline CheckResult check_gumbel_frequency(std::uint64_t seed = 5) {
  Rng rng = make_rng(seed, 105);
  const Dims3 d{10, 100, 100};
  double worst = 0.0;
  std::string detail;
  for (double p : {0.1, 0.5, 0.9}) {
    const GumbelSample s = gumbel_binarize(VoxelGrid::filled(d, p, FieldKind::Probability), 1.0, true, rng);
    double on = 0.0;
    for (double v : s.sample.values()) on += v;
    const double freq = on / static_cast<double>(d.count());
    worst = std::max(worst, std::abs(freq - p));
    detail += detail::fmt("p=%.1f:", p) + detail::fmt("%.4f ", freq);
  }
  return {"gumbel.frequency", "gumbel_binarize", worst, 0.01, worst <= 0.01, detail};
}

/// InfoNCE gradient with respect to the embedding vectors, 4^3 grid, D = 4.
inline CheckResult check_info_nce_gradient(std::uint64_t seed = 6) {
  Rng rng = make_rng(seed, 106);
  const Dims3 d{4, 4, 4};
  const int dim = 4;
  const EmbeddingField e = detail::clustered_embeddings(d, dim, rng);
  std::bernoulli_distribution positive(0.4);
  std::vector<Label> labels(d.count());
  for (Label& l : labels) l = positive(rng) ? Label::Positive : Label::Negative;
  labels[0] = Label::Positive;
  labels[1] = Label::Negative;
  const double tau = 0.1;
  auto eval = [&](const std::vector<double>& x) {
    return oracle::Probe{info_nce_on_vectors(x, labels, dim, tau).value, 0};
  };
  const InfoNceResult r = info_nce_on_vectors(e.data, labels, dim, tau);
  return detail::gradient_result("contrastive.info_nce_gradient", "info_nce_loss",
                                 oracle::finite_difference_check(e.data, r.grad, eval), 1e-4);
}

/// Pairwise loss gradient with respect to the probabilities, 5^3 grid.
inline CheckResult check_pairwise_gradient(std::uint64_t seed = 7) {
  Rng rng = make_rng(seed, 107);
  const Dims3 d{5, 5, 5};
  const EmbeddingField e = detail::clustered_embeddings(d, 4, rng);
  const EdgeGraph graph = build_edge_graph(d, Neighborhood::Six);
  const std::vector<double> x0 = detail::uniform_values(d.count(), 0.05, 0.95, rng);
  auto eval = [&](const std::vector<double>& x) {
    return oracle::Probe{pairwise_loss(VoxelGrid(d, x, FieldKind::Probability), e, graph, 0.6, 1e-6).value, 0};
  };
  const PairwiseResult r = pairwise_loss(VoxelGrid(d, x0, FieldKind::Probability), e, graph, 0.6, 1e-6);
  CheckResult out = detail::gradient_result("pairwise.gradient", "pairwise_loss",
                                            oracle::finite_difference_check(x0, r.grad, eval), 1e-4);
  out.detail += ", " + std::to_string(r.gated_edges) + " gated edges";
  return out;
}

/// same_label_prob: exact corner cases and the [0,1] range over 1e6 pairs.
inline CheckResult check_pairwise_algebra(std::uint64_t seed = 8) {
  bool exact = same_label_prob(1.0, 1.0) == 1.0 && same_label_prob(1.0, 0.0) == 0.0;
  for (double p : {0.0, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 1.0}) exact &= same_label_prob(0.5, p) == 0.5;
  Rng rng = make_rng(seed, 108);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t outside = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double v = same_label_prob(u(rng), u(rng));
    outside += !(v >= 0.0 && v <= 1.0);
  }
  CheckResult r{"pairwise.algebra", "same_label_prob", static_cast<double>(outside), 0.0, exact && outside == 0, ""};
  r.detail = std::string(exact ? "corner cases exact" : "corner case failed") + "; values outside [0,1] over 1e6 pairs";
  return r;
}

/// Box projection loss gradient, 4^3 grid.
inline CheckResult check_box_gradient(std::uint64_t seed = 9) {
  Rng rng = make_rng(seed, 109);
  const Dims3 d{4, 4, 4};
  const Box3 box{{1, 1, 0}, {3, 4, 2}};
  const std::vector<double> x0 = detail::uniform_values(d.count(), 0.05, 0.95, rng);
  auto eval = [&](const std::vector<double>& x) {
    const VoxelGrid g(d, x, FieldKind::Probability);
    return oracle::Probe{box_projection_loss(g, box, 1e-6).value, oracle::projection_signature(g)};
  };
  const LossGrad r = box_projection_loss(VoxelGrid(d, x0, FieldKind::Probability), box, 1e-6);
  return detail::gradient_result("trainer.box_gradient", "box_projection_loss",
                                 oracle::finite_difference_check(x0, r.grad, eval), 1e-4);
}

/// Full mask_loss gradient with respect to the logits on a 6^3 patch. The
/// rng is replayed from the same seed for every probe, the relaxed (soft)
/// sample is used and the template pose is held fixed.
inline CheckResult check_mask_loss_gradient(std::uint64_t seed = 10) {
  Rng rng = make_rng(seed, 110);
  const Dims3 d{6, 6, 6};
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x0(d.count());
  for (double& v : x0) v = g(rng);
  const PointCloud templ = detail::random_cloud(60, 0.5, 4.5, rng);
  const EmbeddingField e = detail::clustered_embeddings(d, 4, rng);
  const Box3 box{{1, 1, 1}, {5, 5, 4}};
  const EdgeGraph graph = build_edge_graph(d, Neighborhood::Six, box, 1);
  LossConfig cfg;
  cfg.gumbel_hard = false;
  cfg.border_margin = 0;
  RegistrationHint hint;
  hint.fixed = RigidTransform{};
  const std::uint64_t stream = 77;
  auto eval = [&](const std::vector<double>& x) {
    const VoxelGrid logits(d, x);
    Rng r = make_rng(stream);
    const double v = mask_loss(logits, templ, e, graph, box, cfg, r, hint).total;
    return oracle::Probe{v, oracle::mask_loss_signature(logits, templ, box, cfg, stream, *hint.fixed)};
  };
  Rng r = make_rng(stream);
  const MaskLossResult res = mask_loss(VoxelGrid(d, x0), templ, e, graph, box, cfg, r, hint);
  CheckResult out = detail::gradient_result("trainer.mask_loss_gradient", "mask_loss",
                                            oracle::finite_difference_check(x0, res.grad, eval), 5e-3);
  if (!res.geo_active) {
    out.passed = false;
    out.detail += ", geometric term inactive";
  }
  return out;
}

/// 50 trials: 500-point clouds, rotations up to 15 degrees, translations up
/// to 2 voxels. Rotation within 1 degree, translation within 0.05, at most
/// 50 iterations, objective non-increasing within each stage.
inline CheckResult check_icp_recovery(std::uint64_t seed = 11) {
  Rng rng = make_rng(seed, 111);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst_angle = 0.0, worst_shift = 0.0;
  int worst_iterations = 0;
  bool monotone = true;
  for (int trial = 0; trial < 50; ++trial) {
    // Two overlapping ellipsoids around the origin: asymmetric, so the pose is unique.
    PointCloud c;
    while (c.size() < 500) {
      const double x = u(rng) * 10, y = u(rng) * 6, z = u(rng) * 4;
      const bool a = x * x / 100 + y * y / 36 + z * z / 16 <= 1.0;
      const bool b = ((x - 6) * (x - 6) + (y - 3) * (y - 3) + z * z) / 9 <= 1.0;
      if (a || b) c.points.push_back({x, y, z});
    }
    const Eigen::Vector3d axis(u(rng), u(rng), u(rng));
    RigidTransform truth;
    truth.rotation = axis_angle(axis, std::abs(u(rng)) * 15.0 * std::numbers::pi / 180.0);
    truth.translation = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized() * std::abs(u(rng)) * 2.0;
    const IcpResult res = icp_register(c, apply_transform(c, truth), IcpParams{}, rng);
    worst_angle = std::max(worst_angle, geodesic_angle(res.transform.rotation, truth.rotation) * 180.0 / std::numbers::pi);
    worst_shift = std::max(worst_shift, (res.transform.translation - truth.translation).norm());
    worst_iterations = std::max(worst_iterations, res.iterations);
    for (const auto* trace : {&res.coarse_objective, &res.refine_objective}) {
      for (std::size_t i = 1; i < trace->size(); ++i) {
        monotone &= (*trace)[i] <= (*trace)[i - 1] * (1.0 + 1e-12);
      }
    }
  }
  const bool ok = worst_angle < 1.0 && worst_shift < 0.05 && worst_iterations <= 50 && monotone;
  CheckResult r{"icp.recovery", "icp_register", worst_angle, 1.0, ok, ""};
  r.detail = "worst rotation error (deg); translation " + detail::fmt("%.3g", worst_shift) + " (limit 0.05), " +
             std::to_string(worst_iterations) + " iterations (limit 50), objective " +
             (monotone ? "non-increasing" : "INCREASED");
  return r;
}

/// 50 random mask pairs with extents in [24,32]: dice against voxel counting
/// (exact) and hd95 against all-pairs surface distances.
inline CheckResult check_metric_oracles(std::uint64_t seed = 12) {
  Rng rng = make_rng(seed, 112);
  std::uniform_int_distribution<int> extent(24, 32);
  bool dice_exact = true;
  double worst_hd = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Dims3 d{extent(rng), extent(rng), extent(rng)};
    const VoxelGrid a = detail::random_blobs(d, rng);
    const VoxelGrid b = detail::random_blobs(d, rng);
    dice_exact &= dice(a, b) == oracle::dice_count(a, b);
    worst_hd = std::max(worst_hd, std::abs(hd95(a, b, {1.0, 1.0, 1.0}) - oracle::hd95_brute(a, b, {1.0, 1.0, 1.0})));
  }
  CheckResult r{"metrics.oracle", "dice/hd95", worst_hd, 1e-9, dice_exact && worst_hd < 1e-9, ""};
  r.detail = std::string("max |hd95 - all-pairs|; dice ") + (dice_exact ? "exact" : "MISMATCH");
  return r;
}

/// Two single-voxel cubes 5 voxels apart along x at unit spacing: hd95 = 5.
inline CheckResult check_metric_two_cubes() {
  const Dims3 d{12, 12, 16};
  std::vector<double> a(d.count(), 0.0), b(d.count(), 0.0);
  a[d.linear(6, 6, 4)] = 1.0;
  b[d.linear(6, 6, 9)] = 1.0;
  const double v = hd95(VoxelGrid(d, a, FieldKind::Binary), VoxelGrid(d, b, FieldKind::Binary), {1.0, 1.0, 1.0});
  return {"metrics.two_cubes", "hd95", v, 5.0, v == 5.0, "expected exactly 5"};
}

struct CheckSpec {
  std::string name;
  std::function<CheckResult()> run;
};

inline std::vector<CheckSpec> check_suite() {
  return {
      {"chamfer.oracle", [] { return check_chamfer_oracle(); }},
      {"chamfer.gradient", [] { return check_chamfer_gradient(); }},
      {"gridding.centers", [] { return check_gridding_centers(); }},
      {"gridding.count", [] { return check_gridding_count(); }},
      {"gumbel.frequency", [] { return check_gumbel_frequency(); }},
      {"contrastive.info_nce_gradient", [] { return check_info_nce_gradient(); }},
      {"pairwise.gradient", [] { return check_pairwise_gradient(); }},
      {"pairwise.algebra", [] { return check_pairwise_algebra(); }},
      {"trainer.box_gradient", [] { return check_box_gradient(); }},
      {"trainer.mask_loss_gradient", [] { return check_mask_loss_gradient(); }},
      {"icp.recovery", [] { return check_icp_recovery(); }},
      {"metrics.oracle", [] { return check_metric_oracles(); }},
      {"metrics.two_cubes", [] { return check_metric_two_cubes(); }},
  };
}

/// Runs every check whose name contains `filter` (all when empty), in
/// parallel; results come back in suite order. An exception inside a check
/// is reported as a failure of that check.
inline std::vector<CheckResult> run_checks(const std::string& filter = {}, unsigned workers = worker_count()) {
  std::vector<CheckSpec> selected;
  for (auto& c : check_suite()) {
    if (filter.empty() || c.name.find(filter) != std::string::npos) selected.push_back(std::move(c));
  }
  std::vector<CheckResult> results(selected.size());
  parallel_for(
      selected.size(),
      [&](std::size_t i) {
        try {
          results[i] = selected[i].run();
        } catch (const std::exception& e) {
          results[i] = {selected[i].name, "", 0.0, 0.0, false, std::string("threw: ") + e.what()};
        }
      },
      workers);
  return results;
}

inline std::string format_check(const CheckResult& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%s  %-30s %-22s measured=%-11.4g tol=%-9.3g %s", r.passed ? "PASS" : "FAIL",
                r.name.c_str(), r.operation.c_str(), r.measured, r.tolerance, r.detail.c_str());
  return buf;
}

}  // namespace boxprior
