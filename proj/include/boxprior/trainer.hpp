#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "boxprior/contrastive.hpp"
#include "boxprior/error.hpp"
#include "boxprior/metrics.hpp"
#include "boxprior/pairwise.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/registration.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

struct LossWeights {
  double ori = 1.0;
  double geo = 1.0;
  double cons = 1.0;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossConfig {
  LossWeights weights;
  double gumbel_temperature = 1.0;
  bool gumbel_hard = true;
  double gridding_threshold = 0.125;
  bool chamfer_squared = false;
  /// The proposal cloud is gridded inside the box grown by this many voxels.
  int geo_margin = 2;
  IcpParams icp;
  /// Run ICP every N steps; in between the last transform is reused.
  int register_every = 1;
  double tau_sim = 0.6;
  double prob_floor = 1e-6;
  bool completeness_gate = true;
  double completeness_threshold = 0.6;
  int border_margin = 2;
  int steps = 200;
  double lr = 40000.0;
  std::uint64_t seed = 0;

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

inline void validate(const LossConfig& c) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, what); };
  if (c.weights.ori < 0.0 || c.weights.geo < 0.0 || c.weights.cons < 0.0) fail("loss weights must be nonnegative");
  if (!(c.gumbel_temperature > 0.0)) fail("gumbel_temperature must be positive");
  if (!(c.gridding_threshold > 0.0 && c.gridding_threshold < 1.0)) fail("gridding_threshold must be in (0,1)");
  if (!(c.completeness_threshold > 0.0 && c.completeness_threshold < 1.0)) fail("completeness_threshold must be in (0,1)");
  if (!(c.prob_floor > 0.0 && c.prob_floor < 1.0)) fail("prob_floor must be in (0,1)");
  if (c.register_every < 1) fail("register_every must be >= 1");
  if (c.border_margin < 0) fail("border_margin must be nonnegative");
  if (c.geo_margin < 0) fail("geo_margin must be nonnegative");
  if (c.steps < 0) fail("steps must be nonnegative");
  if (!(c.lr > 0.0)) fail("lr must be positive");
}

struct CompletenessResult {
  bool complete = false;
  double score = 0.0;
};

/// Share of foreground mass away from the patch faces. A stand-in for a
/// learned completeness head: an object cut by the patch leaves mass near a face.
inline CompletenessResult completeness_gate(const VoxelGrid& prob_field, double threshold, int border_margin) {
  const Dims3& d = prob_field.dims();
  double total = 0.0;
  double border = 0.0;
  for (int z = 0; z < d.s; ++z) {
    const bool bz = z < border_margin || z >= d.s - border_margin;
    for (int y = 0; y < d.h; ++y) {
      const bool by = bz || y < border_margin || y >= d.h - border_margin;
      for (int x = 0; x < d.w; ++x) {
        const double v = prob_field.at(z, y, x);
        total += v;
        if (by || x < border_margin || x >= d.w - border_margin) border += v;
      }
    }
  }
  CompletenessResult r;
  r.score = total < 1e-9 ? 0.0 : 1.0 - border / total;
  r.complete = r.score >= threshold;
  return r;
}

struct LossGrad {
  double value = 0.0;
  std::vector<double> grad;
};

/// Box supervision via max projections: along each axis, the max of the
/// probability field is compared (clamped BCE) with the max projection of
/// the box indicator. The value is the mean over all projected cells of the
/// three projections; each cell's gradient goes to its argmax voxel (lowest
/// index on ties).
inline LossGrad box_projection_loss(const VoxelGrid& prob_field, const Box3& box, double prob_floor) {
  const Dims3& d = prob_field.dims();
  require_box_in(box, d);
  LossGrad r;
  r.grad.assign(d.count(), 0.0);
  double sum = 0.0;
  std::size_t cells = 0;

  auto bce = [&](double q, bool target, std::size_t argmax) {
    ++cells;
    if (target) {
      if (q > prob_floor) {
        sum -= std::log(q);
        r.grad[argmax] -= 1.0 / q;
      } else {
        sum -= std::log(prob_floor);
      }
    } else {
      if (1.0 - q > prob_floor) {
        sum -= std::log1p(-q);
        r.grad[argmax] += 1.0 / (1.0 - q);
      } else {
        sum -= std::log(prob_floor);
      }
    }
  };
  auto in = [](int v, int lo, int hi) { return v >= lo && v < hi; };

  // Project along z onto (y, x).
  for (int y = 0; y < d.h; ++y) {
    for (int x = 0; x < d.w; ++x) {
      std::size_t best = d.linear(0, y, x);
      for (int z = 1; z < d.s; ++z) {
        const std::size_t i = d.linear(z, y, x);
        if (prob_field[i] > prob_field[best]) best = i;
      }
      bce(prob_field[best], in(y, box.lo.y, box.hi.y) && in(x, box.lo.x, box.hi.x), best);
    }
  }
  // Along y onto (z, x).
  for (int z = 0; z < d.s; ++z) {
    for (int x = 0; x < d.w; ++x) {
      std::size_t best = d.linear(z, 0, x);
      for (int y = 1; y < d.h; ++y) {
        const std::size_t i = d.linear(z, y, x);
        if (prob_field[i] > prob_field[best]) best = i;
      }
      bce(prob_field[best], in(z, box.lo.z, box.hi.z) && in(x, box.lo.x, box.hi.x), best);
    }
  }
  // Along x onto (z, y).
  for (int z = 0; z < d.s; ++z) {
    for (int y = 0; y < d.h; ++y) {
      std::size_t best = d.linear(z, y, 0);
      for (int x = 1; x < d.w; ++x) {
        const std::size_t i = d.linear(z, y, x);
        if (prob_field[i] > prob_field[best]) best = i;
      }
      bce(prob_field[best], in(z, box.lo.z, box.hi.z) && in(y, box.lo.y, box.hi.y), best);
    }
  }
  const double inv = 1.0 / static_cast<double>(cells);
  r.value = sum * inv;
  for (double& g : r.grad) g *= inv;
  return r;
}

inline Box3 dilate(const Box3& box, int margin, const Dims3& d) {
  return {{std::max(0, box.lo.z - margin), std::max(0, box.lo.y - margin), std::max(0, box.lo.x - margin)},
          {std::min(d.s, box.hi.z + margin), std::min(d.h, box.hi.y + margin), std::min(d.w, box.hi.x + margin)}};
}

struct LossComponents {
  double ori = 0.0;
  double geo = 0.0;
  double cons = 0.0;
};

/// How the geometric term obtains its template pose.
struct RegistrationHint {
  /// Use this transform and skip ICP.
  std::optional<RigidTransform> fixed;
  /// Start ICP here instead of at the centroid alignment.
  std::optional<RigidTransform> warm_start;
};

struct MaskLossResult {
  double total = 0.0;
  /// d(total)/d(logit) per voxel.
  std::vector<double> grad;
  /// Unweighted component values; a component with zero weight is not
  /// evaluated and reads 0.
  LossComponents components;
  bool geo_active = false;
  double completeness = 0.0;
  std::size_t proposal_points = 0;
  std::optional<RigidTransform> registration;
};

/// Minimum proposal size for registration: the 20% subsample must keep 3 points.
inline std::size_t min_points_for_icp(const IcpParams& icp) {
  return static_cast<std::size_t>(std::ceil(3.0 / icp.sample_fraction));
}

/// total = w_ori * L_box + w_geo * L_geo + w_cons * L_cons with the gradient
/// taken with respect to the logits. L_geo runs on a Gumbel-Softmax sample
/// of sigmoid(logits) and is skipped (0) when the completeness gate fails
/// or the proposal is too small to register.
inline MaskLossResult mask_loss(const VoxelGrid& logits, const PointCloud& templ, const EmbeddingField& embeddings,
                                const EdgeGraph& graph, const Box3& box, const LossConfig& cfg, Rng& rng,
                                const RegistrationHint& hint = {}) {
  const Dims3& d = logits.dims();
  if (!(embeddings.dims == d) || !(graph.dims() == d)) throw Error(ErrorCode::DimensionMismatch, "mask_loss inputs");
  if (templ.empty()) throw Error(ErrorCode::EmptyCloud, "template cloud is empty");
  require_box_in(box, d);

  const VoxelGrid probs = sigmoid_field(logits);
  MaskLossResult r;
  std::vector<double> grad_p(d.count(), 0.0);
  auto accumulate = [&grad_p](double w, const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) grad_p[i] += w * g[i];
  };

  if (cfg.weights.ori != 0.0) {
    const LossGrad ori = box_projection_loss(probs, box, cfg.prob_floor);
    r.components.ori = ori.value;
    accumulate(cfg.weights.ori, ori.grad);
  }
  if (cfg.weights.cons != 0.0) {
    const PairwiseResult cons = pairwise_loss(probs, embeddings, graph, cfg.tau_sim, cfg.prob_floor);
    r.components.cons = cons.value;
    accumulate(cfg.weights.cons, cons.grad);
  }
  if (cfg.weights.geo != 0.0) {
    const CompletenessResult gate = completeness_gate(probs, cfg.completeness_threshold, cfg.border_margin);
    r.completeness = gate.score;
    const GumbelSample sample = gumbel_binarize(probs, cfg.gumbel_temperature, cfg.gumbel_hard, rng);
    if (gate.complete || !cfg.completeness_gate) {
      const PointCloud proposal = gridding_reverse(sample.sample, cfg.gridding_threshold, dilate(box, cfg.geo_margin, d));
      r.proposal_points = proposal.size();
      if (proposal.size() >= min_points_for_icp(cfg.icp)) {
        RigidTransform pose;
        if (hint.fixed) {
          pose = *hint.fixed;
        } else {
          pose = icp_register(templ, proposal, cfg.icp, rng, hint.warm_start).transform;
        }
        r.registration = pose;
        const PointCloud target = apply_transform(templ, pose);
        const ChamferResult ch = chamfer(proposal, target, {cfg.chamfer_squared});
        r.components.geo = ch.value;
        r.geo_active = true;
        const VoxelGrid grid_grad = chamfer_grad_to_grid(ch, proposal, d);
        accumulate(cfg.weights.geo, sample.backprop(grid_grad.values()));
      }
    }
  }

  r.total = cfg.weights.ori * r.components.ori + cfg.weights.geo * r.components.geo +
            cfg.weights.cons * r.components.cons;
  r.grad.resize(d.count());
  for (std::size_t i = 0; i < d.count(); ++i) r.grad[i] = grad_p[i] * probs[i] * (1.0 - probs[i]);
  return r;
}

struct RunTrace {
  std::vector<double> total, ori, geo, cons, completeness;
  std::vector<int> geo_active;

  std::size_t size() const noexcept { return total.size(); }
};

struct OptimizeResult {
  VoxelGrid logits;
  RunTrace trace;
};

/// Fixed-step gradient descent on the logit field. Step k draws from the
/// stream make_rng(seed, k + 1).
inline OptimizeResult optimize_mask(const VoxelGrid& init, const PointCloud& templ, const EmbeddingField& embeddings,
                                    const EdgeGraph& graph, const Box3& box, const LossConfig& cfg) {
  validate(cfg);
  std::vector<double> logits(init.values().begin(), init.values().end());
  RunTrace trace;
  std::optional<RigidTransform> last_pose;
  int last_registered = -1;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(step) + 1);
    RegistrationHint hint;
    if (last_pose && step - last_registered < cfg.register_every) {
      hint.fixed = last_pose;
    } else {
      hint.warm_start = last_pose;
    }
    const VoxelGrid current = init.with_values(logits, FieldKind::Scalar);
    const MaskLossResult r = mask_loss(current, templ, embeddings, graph, box, cfg, rng, hint);
    if (r.registration && !hint.fixed) {
      last_pose = r.registration;
      last_registered = step;
    }
    trace.total.push_back(r.total);
    trace.ori.push_back(r.components.ori);
    trace.geo.push_back(r.components.geo);
    trace.cons.push_back(r.components.cons);
    trace.completeness.push_back(r.completeness);
    trace.geo_active.push_back(r.geo_active ? 1 : 0);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] -= cfg.lr * r.grad[i];
  }
  return {init.with_values(std::move(logits), FieldKind::Scalar), std::move(trace)};
}

/// Voxelwise NMS across overlapping patches: each voxel takes the value of
/// the covering patch with the largest |p - 0.5| (earlier patch on ties).
inline VoxelGrid patch_nms(const std::vector<std::pair<PatchSpec, VoxelGrid>>& patch_probs, const Dims3& full_dims,
                           Spacing3 spacing = {1.0, 1.0, 1.0}) {
  std::vector<double> out(full_dims.count(), 0.0);
  std::vector<double> confidence(full_dims.count(), -1.0);
  for (const auto& [spec, probs] : patch_probs) {
    if (!(probs.dims() == spec.dims)) throw Error(ErrorCode::DimensionMismatch, "patch grid dims != spec dims");
    if (!spec.fits_in(full_dims)) throw Error(ErrorCode::OutOfBounds, "patch outside the full grid");
    for (int z = 0; z < spec.dims.s; ++z) {
      for (int y = 0; y < spec.dims.h; ++y) {
        for (int x = 0; x < spec.dims.w; ++x) {
          const double p = probs.at(z, y, x);
          const double c = std::abs(p - 0.5);
          const std::size_t i = full_dims.linear(spec.origin.z + z, spec.origin.y + y, spec.origin.x + x);
          if (c > confidence[i]) {
            confidence[i] = c;
            out[i] = p;
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    if (confidence[i] < 0.0) {
      const Index3 v = full_dims.unravel(i);
      throw Error(ErrorCode::CoverageGap, "voxel (" + std::to_string(v.z) + "," + std::to_string(v.y) + "," +
                                              std::to_string(v.x) + ") not covered by any patch");
    }
  }
  return VoxelGrid(full_dims, std::move(out), FieldKind::Probability, spacing);
}

enum class ShapeKind { Sphere, HollowSphere, TwoLobes };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Sphere: return "sphere";
    case ShapeKind::HollowSphere: return "hollow_sphere";
    case ShapeKind::TwoLobes: return "two_lobes";
  }
  return "?";
}

inline std::optional<ShapeKind> shape_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::Sphere;
  if (s == "hollow_sphere") return ShapeKind::HollowSphere;
  if (s == "two_lobes") return ShapeKind::TwoLobes;
  return std::nullopt;
}

struct SynthOptions {
  /// Template is built from the shape with its cavity filled.
  bool fill_template_cavity = false;
  double max_rotation_deg = 10.0;
  double max_translation = 2.0;
  /// Outer radius as a fraction of the smallest dimension.
  double radius_fraction = 0.3;
  /// Cavity radius as a fraction of the outer radius.
  double inner_fraction = 0.5;
};

/// Analytic shape in (x, y, z) voxel coordinates.
struct ShapeModel {
  ShapeKind kind = ShapeKind::Sphere;
  Point3 center{};
  double radius = 1.0;
  double inner_radius = 0.0;

  bool inside(const Point3& p, bool fill_cavity = false) const {
    auto r2 = [&](const Point3& c, double ax, double ay, double az) {
      const double dx = (p[0] - c[0]) / ax, dy = (p[1] - c[1]) / ay, dz = (p[2] - c[2]) / az;
      return dx * dx + dy * dy + dz * dz;
    };
    switch (kind) {
      case ShapeKind::Sphere: return r2(center, radius, radius, radius) <= 1.0;
      case ShapeKind::HollowSphere: {
        if (r2(center, radius, radius, radius) > 1.0) return false;
        return fill_cavity || r2(center, inner_radius, inner_radius, inner_radius) > 1.0;
      }
      case ShapeKind::TwoLobes: {
        const double off = 0.45 * radius;
        const Point3 a{center[0] - off, center[1], center[2]};
        const Point3 b{center[0] + off, center[1] + 0.15 * radius, center[2]};
        return r2(a, 0.6 * radius, 0.5 * radius, 0.5 * radius) <= 1.0 ||
               r2(b, 0.55 * radius, 0.45 * radius, 0.45 * radius) <= 1.0;
      }
    }
    return false;
  }
};

struct SynthCase {
  VoxelGrid image;
  VoxelGrid gt_mask;
  Box3 box;
  PointCloud templ;
  /// Pose of the template shape relative to the ground-truth shape.
  RigidTransform template_pose;
  ShapeModel shape;
};

/// Rasterizes `shape` mapped through `pose` (voxel centers at integer coordinates).
inline VoxelGrid rasterize(const ShapeModel& shape, const Dims3& dims, const RigidTransform& pose = {},
                           bool fill_cavity = false) {
  const RigidTransform inv = pose.inverse();
  std::vector<double> out(dims.count(), 0.0);
  for (int z = 0; z < dims.s; ++z) {
    for (int y = 0; y < dims.h; ++y) {
      for (int x = 0; x < dims.w; ++x) {
        const Point3 p = inv.apply({static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)});
        if (shape.inside(p, fill_cavity)) out[dims.linear(z, y, x)] = 1.0;
      }
    }
  }
  return VoxelGrid(dims, std::move(out), FieldKind::Binary);
}

inline SynthCase synth_volume(ShapeKind kind, const Dims3& dims, double noise_sigma, double contrast, Rng& rng,
                              const SynthOptions& opts = {}) {
  if (dims.s < 16 || dims.h < 16 || dims.w < 16) throw Error(ErrorCode::InvalidArgument, "synth dims must be >= 16^3");
  if (noise_sigma < 0.0) throw Error(ErrorCode::InvalidArgument, "noise_sigma must be nonnegative");
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ShapeModel shape;
  shape.kind = kind;
  shape.radius = opts.radius_fraction * std::min({dims.s, dims.h, dims.w});
  shape.inner_radius = opts.inner_fraction * shape.radius;
  shape.center = {0.5 * (dims.w - 1) + jitter(rng), 0.5 * (dims.h - 1) + jitter(rng), 0.5 * (dims.s - 1) + jitter(rng)};

  SynthCase out;
  out.shape = shape;
  out.gt_mask = rasterize(shape, dims);
  out.box = box_from_mask(out.gt_mask);

  std::vector<double> img(dims.count());
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = contrast * out.gt_mask[i] + (noise_sigma > 0.0 ? noise_sigma * gauss(rng) : 0.0);
  }
  out.image = VoxelGrid(dims, std::move(img));

  // Template: the same shape under a small rigid perturbation about its center.
  const Eigen::Vector3d axis(gauss(rng), gauss(rng), gauss(rng));
  const double angle = std::abs(jitter(rng)) * opts.max_rotation_deg * std::numbers::pi / 180.0;
  Eigen::Vector3d shift(gauss(rng), gauss(rng), gauss(rng));
  shift = shift.normalized() * std::abs(jitter(rng)) * opts.max_translation;
  const Eigen::Vector3d c(shape.center[0], shape.center[1], shape.center[2]);
  out.template_pose.rotation = axis_angle(axis, angle);
  out.template_pose.translation = c - out.template_pose.rotation * c + shift;
  const VoxelGrid template_mask = rasterize(shape, dims, out.template_pose, opts.fill_template_cavity);
  out.templ = gridding_reverse(template_mask, LossConfig{}.gridding_threshold);
  out.templ.provenance.reset();
  return out;
}

}  // namespace boxprior
