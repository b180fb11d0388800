#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "boxprior/checks.hpp"
#include "boxprior/pairwise.hpp"

using namespace boxprior;

namespace {

EmbeddingField constant_embeddings(const Dims3& d) {
  EmbeddingField e{d, 2, std::vector<double>(d.count() * 2, 0.0), 0};
  for (std::size_t v = 0; v < d.count(); ++v) e.data[v * 2] = 1.0;
  return e;
}

std::size_t lattice_edges(const Dims3& d) {
  const auto s = static_cast<std::size_t>(d.s), h = static_cast<std::size_t>(d.h), w = static_cast<std::size_t>(d.w);
  return (s - 1) * h * w + s * (h - 1) * w + s * h * (w - 1);
}

}  // namespace

TEST(EdgeGraph, SixNeighborhoodCounts) {
  EXPECT_EQ(build_edge_graph({2, 2, 2}, Neighborhood::Six).edge_count(), 12u);
  EXPECT_EQ(build_edge_graph({3, 3, 3}, Neighborhood::Six).edge_count(), 54u);
  for (const Dims3 d : {Dims3{4, 5, 6}, Dims3{1, 7, 3}, Dims3{9, 2, 2}}) {
    EXPECT_EQ(build_edge_graph(d, Neighborhood::Six).edge_count(), lattice_edges(d));
  }
}

TEST(EdgeGraph, TwentySixNeighborhoodCount) {
  // Every voxel pair at Chebyshev distance 1, counted once.
  const Dims3 d{3, 4, 5};
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < d.count(); ++a) {
    for (std::size_t b = a + 1; b < d.count(); ++b) {
      const Index3 i = d.unravel(a), j = d.unravel(b);
      pairs += std::max({std::abs(i.z - j.z), std::abs(i.y - j.y), std::abs(i.x - j.x)}) == 1;
    }
  }
  EXPECT_EQ(build_edge_graph(d, Neighborhood::TwentySix).edge_count(), pairs);
}

TEST(EdgeGraph, NoSelfOrDuplicateEdges) {
  const EdgeGraph g = build_edge_graph({4, 4, 4}, Neighborhood::TwentySix);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  g.for_each_edge([&](std::size_t a, std::size_t b) {
    EXPECT_LT(a, b);
    EXPECT_TRUE(seen.insert({a, b}).second);
  });
}

TEST(EdgeGraph, SingleVoxelBoxHasNoEdges) {
  EXPECT_EQ(build_edge_graph({5, 5, 5}, Neighborhood::Six, Box3{{2, 2, 2}, {3, 3, 3}}, 0).edge_count(), 0u);
  EXPECT_EQ(build_edge_graph({5, 5, 5}, Neighborhood::Six, Box3{{2, 2, 2}, {3, 3, 3}}, 1).edge_count(), 54u);
}

TEST(SameLabelProb, Cases) {
  EXPECT_EQ(same_label_prob(1, 1), 1.0);
  EXPECT_EQ(same_label_prob(1, 0), 0.0);
  for (double p : {0.0, 0.2, 0.5, 0.8, 1.0}) EXPECT_EQ(same_label_prob(0.5, p), 0.5);
}

TEST(SameLabelProb, AlgebraCheckPasses) {
  const CheckResult r = check_pairwise_algebra();
  EXPECT_TRUE(r.passed) << format_check(r);
}

TEST(PairwiseLoss, AllForegroundIsFlat) {
  const Dims3 d{4, 4, 4};
  const PairwiseResult r = pairwise_loss(VoxelGrid::filled(d, 1.0, FieldKind::Probability), constant_embeddings(d),
                                         build_edge_graph(d, Neighborhood::Six), 0.5, 1e-6);
  EXPECT_EQ(r.value, 0.0);
  // dL/dp is -deg(v)/N at p = 1; through the sigmoid the factor p(1-p) = 0
  // makes the logit gradient vanish.
  std::vector<double> degree(d.count(), 0.0);
  build_edge_graph(d, Neighborhood::Six).for_each_edge([&](std::size_t a, std::size_t b) {
    degree[a] += 1;
    degree[b] += 1;
  });
  const double n = static_cast<double>(r.gated_edges);
  const double p = sigmoid(40.0);
  ASSERT_EQ(p, 1.0);
  for (std::size_t v = 0; v < d.count(); ++v) {
    EXPECT_DOUBLE_EQ(r.grad[v], -degree[v] / n);
    EXPECT_EQ(r.grad[v] * p * (1.0 - p), 0.0);
  }
}

TEST(PairwiseLoss, TwoVoxelsHalfProbability) {
  const Dims3 d{1, 1, 2};
  const PairwiseResult r = pairwise_loss(VoxelGrid::filled(d, 0.5, FieldKind::Probability), constant_embeddings(d),
                                         build_edge_graph(d, Neighborhood::Six), 0.5, 1e-6);
  EXPECT_EQ(r.gated_edges, 1u);
  EXPECT_NEAR(r.value, 0.69314718055994531, 1e-15);
}

TEST(PairwiseLoss, NoGatedEdgesIsZero) {
  const Dims3 d{1, 1, 2};
  EmbeddingField e{d, 2, {1, 0, 0, 1}, 0};
  const PairwiseResult r = pairwise_loss(VoxelGrid::filled(d, 0.3, FieldKind::Probability), e,
                                         build_edge_graph(d, Neighborhood::Six), 0.5, 1e-6);
  EXPECT_EQ(r.gated_edges, 0u);
  EXPECT_EQ(r.value, 0.0);
}

TEST(PairwiseLoss, MatchesEdgeByEdgeOracle) {
  Rng rng = make_rng(81);
  const Dims3 d{5, 5, 5};
  const EmbeddingField e = detail::clustered_embeddings(d, 4, rng);
  const auto p = detail::uniform_values(d.count(), 0.0, 1.0, rng);
  for (const Neighborhood nb : {Neighborhood::Six, Neighborhood::TwentySix}) {
    const EdgeGraph graph = build_edge_graph(d, nb);
    const PairwiseResult r = pairwise_loss(VoxelGrid(d, p, FieldKind::Probability), e, graph, 0.6, 1e-6);
    double sum = 0.0;
    std::size_t n = 0;
    std::vector<double> grad(d.count(), 0.0);
    for (std::size_t a = 0; a < d.count(); ++a) {
      for (std::size_t b = a + 1; b < d.count(); ++b) {
        const Index3 i = d.unravel(a), j = d.unravel(b);
        const int dz = std::abs(i.z - j.z), dy = std::abs(i.y - j.y), dx = std::abs(i.x - j.x);
        const bool adjacent = nb == Neighborhood::Six ? dz + dy + dx == 1 : std::max({dz, dy, dx}) == 1;
        if (!adjacent) continue;
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += e.data[a * 4 + static_cast<std::size_t>(k)] * e.data[b * 4 + static_cast<std::size_t>(k)];
        if (s < 0.6) continue;
        ++n;
        const double q = p[a] * p[b] + (1 - p[a]) * (1 - p[b]);
        sum += -std::log(std::max(q, 1e-6));
        if (q > 1e-6) {
          grad[a] += -(2 * p[b] - 1) / q;
          grad[b] += -(2 * p[a] - 1) / q;
        }
      }
    }
    ASSERT_EQ(r.gated_edges, n);
    EXPECT_NEAR(r.value, sum / static_cast<double>(n), 1e-12);
    for (std::size_t v = 0; v < d.count(); ++v) EXPECT_NEAR(r.grad[v], grad[v] / static_cast<double>(n), 1e-12);
  }
}

TEST(PairwiseLoss, GradientMatchesFiniteDifferences) {
  const CheckResult r = check_pairwise_gradient();
  EXPECT_TRUE(r.passed) << format_check(r);
}

TEST(PairwiseLoss, OppositeSignsAcrossConfidentDisagreement) {
  // For a gated edge with p1 > 0.5 > p2 the loss pushes the two probabilities toward each other.
  const Dims3 d{1, 1, 2};
  const PairwiseResult r = pairwise_loss(VoxelGrid(d, {0.8, 0.3}, FieldKind::Probability), constant_embeddings(d),
                                         build_edge_graph(d, Neighborhood::Six), 0.5, 1e-6);
  EXPECT_GT(r.grad[0], 0.0);
  EXPECT_LT(r.grad[1], 0.0);
}
