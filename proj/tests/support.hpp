#pragma once

// Shared fixtures for the unit tests and the acceptance run.

#include <cmath>
#include <cstdint>
#include <vector>

#include "boxprior/contrastive.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/volume.hpp"

namespace boxprior::fixtures {

/// Linearly separable features: organ voxels carry +mu, background -mu,
/// plus small Gaussian noise. The organ is a ball and the box its tight
/// bound, so about half of the box is background.
struct SeparableTask {
  FeatureField features;
  Box3 box;
  std::vector<bool> organ;
};

inline SeparableTask separable_task(std::uint64_t seed, int n = 20, int channels = 4, double mu = 1.0,
                                    double noise = 0.1) {
  Rng rng = make_rng(seed, 801);
  std::normal_distribution<double> g(0.0, noise);
  const Dims3 d{n, n, n};
  SeparableTask t;
  t.features = {d, channels, std::vector<double>(d.count() * static_cast<std::size_t>(channels))};
  t.organ.assign(d.count(), false);
  const double c = 0.5 * (n - 1);
  const double r = 0.3 * n;
  for (std::size_t v = 0; v < d.count(); ++v) {
    const Index3 i = d.unravel(v);
    const double dz = i.z - c, dy = i.y - c, dx = i.x - c;
    t.organ[v] = dz * dz + dy * dy + dx * dx <= r * r;
    for (int k = 0; k < channels; ++k) {
      t.features.data[v * static_cast<std::size_t>(channels) + static_cast<std::size_t>(k)] =
          (t.organ[v] ? mu : -mu) + g(rng);
    }
  }
  std::vector<double> mask(d.count());
  for (std::size_t v = 0; v < d.count(); ++v) mask[v] = t.organ[v] ? 1.0 : 0.0;
  t.box = box_from_mask(VoxelGrid(d, std::move(mask), FieldKind::Binary));
  return t;
}

/// Fraction of in-box voxels whose label agrees with the organ mask.
inline double in_box_accuracy(const LabelField& labels, const SeparableTask& t) {
  const Dims3& d = t.features.dims;
  std::size_t agree = 0;
  for (int z = t.box.lo.z; z < t.box.hi.z; ++z) {
    for (int y = t.box.lo.y; y < t.box.hi.y; ++y) {
      for (int x = t.box.lo.x; x < t.box.hi.x; ++x) {
        const std::size_t v = d.linear(z, y, x);
        agree += (labels.labels[v] == Label::Positive) == t.organ[v];
      }
    }
  }
  return static_cast<double>(agree) / static_cast<double>(t.box.volume());
}

inline double in_box_background_fraction(const SeparableTask& t) {
  const Dims3& d = t.features.dims;
  std::size_t bg = 0;
  for (int z = t.box.lo.z; z < t.box.hi.z; ++z) {
    for (int y = t.box.lo.y; y < t.box.hi.y; ++y) {
      for (int x = t.box.lo.x; x < t.box.hi.x; ++x) bg += !t.organ[d.linear(z, y, x)];
    }
  }
  return static_cast<double>(bg) / static_cast<double>(t.box.volume());
}

struct RefineEfficacy {
  double refine_accuracy = 0.0;
  double coarse_accuracy = 0.0;
  double background_fraction = 0.0;
};

/// Pre-trains a head on the separable task, then compares refine_labels on
/// the learned embeddings with the box labels.
inline RefineEfficacy refine_efficacy(std::uint64_t seed, const PretrainConfig& cfg = {}) {
  const SeparableTask t = separable_task(seed);
  Rng rng = make_rng(seed, 802);
  const PretrainResult pre = pretrain_head(t.features, t.box, cfg, rng);
  const LabelField refined = refine_labels(embed(t.features, pre.params), t.box, cfg.k, cfg.tau_sim, rng,
                                           cfg.invert_vote);
  return {in_box_accuracy(refined, t), in_box_accuracy(coarse_labels(t.box, t.features.dims), t),
          in_box_background_fraction(t)};
}

}  // namespace boxprior::fixtures
