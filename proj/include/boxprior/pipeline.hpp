#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "boxprior/contrastive.hpp"
#include "boxprior/metrics.hpp"
#include "boxprior/pairwise.hpp"
#include "boxprior/parallel.hpp"
#include "boxprior/pointcloud.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/trainer.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

struct TrainSettings {
  LossConfig loss;
  PretrainConfig pretrain;
  /// Patch extent; zero components mean "the whole volume".
  Dims3 patch{0, 0, 0};
  Index3 stride{0, 0, 0};
  Neighborhood neighborhood = Neighborhood::Six;
  int box_dilation = 2;
  double mask_threshold = 0.5;
  /// Initial logits inside the (patch-clipped) box and elsewhere.
  double init_box_logit = 0.0;
  double init_background_logit = -2.0;

  friend bool operator==(const TrainSettings&, const TrainSettings&) = default;
};

inline VoxelGrid initial_logits(const Dims3& dims, const Box3& box, double inside, double outside) {
  require_box_in(box, dims);
  std::vector<double> v(dims.count(), outside);
  for (int z = box.lo.z; z < box.hi.z; ++z) {
    for (int y = box.lo.y; y < box.hi.y; ++y) {
      for (int x = box.lo.x; x < box.hi.x; ++x) v[dims.linear(z, y, x)] = inside;
    }
  }
  return VoxelGrid(dims, std::move(v));
}

struct PatchRun {
  PatchSpec spec;
  /// False when the box does not reach this patch (prediction is all background).
  bool has_object = false;
  RunTrace trace;
};

struct TrainOutcome {
  VoxelGrid probs;
  VoxelGrid mask;
  std::optional<MetricReport> metrics;
  std::vector<PatchRun> patches;
  double wall_seconds = 0.0;
};

/// Contrastive-head embeddings for one patch, cached so ablation runs on the
/// same seed can share one pre-training.
struct PatchEmbedding {
  PatchSpec spec;
  std::optional<EmbeddingField> embeddings;
  std::optional<HeadParams> head;
  std::vector<double> pretrain_trace;
};

inline std::vector<PatchSpec> training_patches(const Dims3& full, const TrainSettings& s) {
  const Dims3 patch{s.patch.s > 0 ? s.patch.s : full.s, s.patch.h > 0 ? s.patch.h : full.h,
                    s.patch.w > 0 ? s.patch.w : full.w};
  const Index3 stride{s.stride.z > 0 ? s.stride.z : patch.s, s.stride.y > 0 ? s.stride.y : patch.h,
                      s.stride.x > 0 ? s.stride.x : patch.w};
  return tile_patches(full, patch, stride);
}

inline std::vector<PatchEmbedding> pretrain_patches(const VoxelGrid& image, const Box3& box,
                                                    const TrainSettings& s) {
  const std::vector<PatchSpec> specs = training_patches(image.dims(), s);
  std::vector<PatchEmbedding> out(specs.size());
  parallel_for(specs.size(), [&](std::size_t index) {
    PatchEmbedding& pe = out[index];
    pe.spec = specs[index];
    Box3 local;
    if (clip_box_to_patch(box, pe.spec, local)) {
      const FeatureField features = make_features(crop_patch(image, pe.spec));
      Rng rng = make_rng(s.loss.seed ^ 0xC0FFEEULL, index);
      PretrainResult pre = pretrain_head(features, local, s.pretrain, rng);
      pe.embeddings = embed(features, pre.params);
      pe.head = std::move(pre.params);
      pe.pretrain_trace = std::move(pre.loss_trace);
    }
  });
  return out;
}

/// Per patch: mask optimization against the box, the shifted template and
/// the patch embeddings; then patch-NMS assembly and thresholding.
inline TrainOutcome train_volume(const VoxelGrid& image, const Box3& box, const PointCloud& templ,
                                 const TrainSettings& s, const std::vector<PatchEmbedding>& embeddings,
                                 const VoxelGrid* gt = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  require_box_in(box, image.dims());
  TrainOutcome out;
  out.patches.resize(embeddings.size());
  std::vector<std::pair<PatchSpec, VoxelGrid>> predictions(embeddings.size());
  parallel_for(embeddings.size(), [&](std::size_t index) {
    const PatchEmbedding& pe = embeddings[index];
    const PatchSpec& spec = pe.spec;
    PatchRun& run = out.patches[index];
    run.spec = spec;
    Box3 local;
    if (pe.embeddings && clip_box_to_patch(box, spec, local)) {
      run.has_object = true;
      LossConfig cfg = s.loss;
      cfg.seed = mix_seed(s.loss.seed, index);
      const PointCloud shifted =
          translate(templ, {-static_cast<double>(spec.origin.x), -static_cast<double>(spec.origin.y),
                            -static_cast<double>(spec.origin.z)});
      const EdgeGraph graph = build_edge_graph(spec.dims, s.neighborhood, local, s.box_dilation);
      const VoxelGrid init = initial_logits(spec.dims, local, s.init_box_logit, s.init_background_logit);
      OptimizeResult opt = optimize_mask(init, shifted, *pe.embeddings, graph, local, cfg);
      run.trace = std::move(opt.trace);
      predictions[index] = {spec, sigmoid_field(opt.logits)};
    } else {
      predictions[index] = {spec, VoxelGrid::filled(spec.dims, 0.0, FieldKind::Probability)};
    }
  });
  out.probs = patch_nms(predictions, image.dims(), image.spacing());
  out.mask = binarize(out.probs, s.mask_threshold);
  if (gt != nullptr) out.metrics = evaluate(out.mask, *gt, image.spacing());
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline TrainOutcome train_volume(const VoxelGrid& image, const Box3& box, const PointCloud& templ,
                                 const TrainSettings& s, const VoxelGrid* gt = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  TrainOutcome out = train_volume(image, box, templ, s, pretrain_patches(image, box, s), gt);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace boxprior
