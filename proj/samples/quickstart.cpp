// Synthesizes a hollow sphere, trains with and without the template losses,
// and prints Dice for both.

#include <cstdio>

#include "boxprior/pipeline.hpp"

using namespace boxprior;

int main() {
  Rng rng = make_rng(1);
  const SynthCase sc = synth_volume(ShapeKind::HollowSphere, {32, 32, 32}, 0.3, 1.0, rng);

  TrainSettings s;
  s.loss.seed = 1;
  s.loss.steps = 60;
  s.loss.register_every = 5;
  const auto heads = pretrain_patches(sc.image, sc.box, s);

  for (const LossWeights w : {LossWeights{1, 0, 0}, LossWeights{1, 1, 1}}) {
    TrainSettings t = s;
    t.loss.weights = w;
    const TrainOutcome out = train_volume(sc.image, sc.box, sc.templ, t, heads, &sc.gt_mask);
    std::printf("weights %g,%g,%g  dice %.4f  %.1fs\n", w.ori, w.geo, w.cons, out.metrics->dice, out.wall_seconds);
  }
}
