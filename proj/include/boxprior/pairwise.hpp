#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "boxprior/contrastive.hpp"
#include "boxprior/error.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

enum class Neighborhood { Six = 6, TwentySix = 26 };

/// Undirected lattice graph. Edges are implicit: each voxel links to its
/// "forward" neighbors so every edge is visited once. When a region mask is
/// present, only edges with both endpoints marked belong to E_in.
class EdgeGraph {
 public:
  EdgeGraph(Dims3 dims, Neighborhood nb, std::vector<std::uint8_t> region = {})
      : dims_(dims), nb_(nb), region_(std::move(region)) {
    if (!region_.empty() && region_.size() != dims_.count()) {
      throw Error(ErrorCode::DimensionMismatch, "region mask length");
    }
    if (nb_ == Neighborhood::Six) {
      offsets_ = {Index3{1, 0, 0}, Index3{0, 1, 0}, Index3{0, 0, 1}};
    } else {
      // The 13 lexicographically positive offsets of the 26-neighborhood.
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dz > 0 || (dz == 0 && (dy > 0 || (dy == 0 && dx > 0)))) offsets_.push_back({dz, dy, dx});
          }
        }
      }
    }
  }

  const Dims3& dims() const noexcept { return dims_; }
  Neighborhood neighborhood() const noexcept { return nb_; }
  bool restricted() const noexcept { return !region_.empty(); }
  bool in_region(std::size_t v) const noexcept { return region_.empty() || region_[v] != 0; }

  /// Calls f(a, b) for every edge of E_in, a < b in linear order.
  template <typename F>
  void for_each_edge(F&& f) const {
    for (int z = 0; z < dims_.s; ++z) {
      for (int y = 0; y < dims_.h; ++y) {
        for (int x = 0; x < dims_.w; ++x) {
          const std::size_t a = dims_.linear(z, y, x);
          if (!in_region(a)) continue;
          for (const Index3& o : offsets_) {
            if (!dims_.contains(z + o.z, y + o.y, x + o.x)) continue;
            const std::size_t b = dims_.linear(z + o.z, y + o.y, x + o.x);
            if (in_region(b)) f(a, b);
          }
        }
      }
    }
  }

  std::size_t edge_count() const {
    std::size_t n = 0;
    for_each_edge([&n](std::size_t, std::size_t) { ++n; });
    return n;
  }

 private:
  Dims3 dims_;
  Neighborhood nb_;
  std::vector<std::uint8_t> region_;
  std::vector<Index3> offsets_;
};

/// With a box, E_in is restricted to the box grown by `dilation` voxels per
/// face (clipped to the grid).
inline EdgeGraph build_edge_graph(const Dims3& dims, Neighborhood nb, const std::optional<Box3>& box = std::nullopt,
                                  int dilation = 0) {
  if (dims.s <= 0 || dims.h <= 0 || dims.w <= 0) throw Error(ErrorCode::InvalidArgument, "dims must be positive");
  if (!box) return EdgeGraph(dims, nb);
  require_box_in(*box, dims);
  if (dilation < 0) throw Error(ErrorCode::InvalidArgument, "dilation must be nonnegative");
  std::vector<std::uint8_t> region(dims.count(), 0);
  const Index3 lo{std::max(0, box->lo.z - dilation), std::max(0, box->lo.y - dilation),
                  std::max(0, box->lo.x - dilation)};
  const Index3 hi{std::min(dims.s, box->hi.z + dilation), std::min(dims.h, box->hi.y + dilation),
                  std::min(dims.w, box->hi.x + dilation)};
  for (int z = lo.z; z < hi.z; ++z) {
    for (int y = lo.y; y < hi.y; ++y) {
      for (int x = lo.x; x < hi.x; ++x) region[dims.linear(z, y, x)] = 1;
    }
  }
  return EdgeGraph(dims, nb, std::move(region));
}

/// Probability that two voxels share a label.
inline double same_label_prob(double p1, double p2) noexcept { return p1 * p2 + (1.0 - p1) * (1.0 - p2); }

struct PairwiseResult {
  double value = 0.0;
  /// d(value)/dp per voxel; the similarity gate is held constant.
  std::vector<double> grad;
  std::size_t gated_edges = 0;
};

/// Mean of -log(max(P_same, prob_floor)) over edges of E_in whose endpoint
/// embeddings have similarity >= tau_sim.
inline PairwiseResult pairwise_loss(const VoxelGrid& prob_field, const EmbeddingField& embeddings,
                                    const EdgeGraph& graph, double tau_sim, double prob_floor) {
  const Dims3& d = prob_field.dims();
  if (!(embeddings.dims == d) || !(graph.dims() == d)) throw Error(ErrorCode::DimensionMismatch, "pairwise inputs");
  if (embeddings.data.size() != d.count() * static_cast<std::size_t>(embeddings.dim)) {
    throw Error(ErrorCode::DimensionMismatch, "embedding data length");
  }
  const auto p = prob_field.values();
  PairwiseResult r;
  r.grad.assign(d.count(), 0.0);
  double sum = 0.0;
  graph.for_each_edge([&](std::size_t a, std::size_t b) {
    if (similarity(embeddings.voxel(a), embeddings.voxel(b)) < tau_sim) return;
    ++r.gated_edges;
    const double prob = same_label_prob(p[a], p[b]);
    if (prob > prob_floor) {
      sum -= std::log(prob);
      // dP/dp_a = 2 p_b - 1
      r.grad[a] -= (2.0 * p[b] - 1.0) / prob;
      r.grad[b] -= (2.0 * p[a] - 1.0) / prob;
    } else {
      sum -= std::log(prob_floor);
    }
  });
  if (r.gated_edges == 0) return r;
  const double inv_n = 1.0 / static_cast<double>(r.gated_edges);
  r.value = sum * inv_n;
  for (double& g : r.grad) g *= inv_n;
  return r;
}

}  // namespace boxprior
