#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "boxprior/error.hpp"
#include "boxprior/rng.hpp"
#include "boxprior/volume.hpp"

namespace boxprior {

/// Per-voxel feature vectors, voxel-major: data[v * channels + c].
struct FeatureField {
  Dims3 dims;
  int channels = 0;
  std::vector<double> data;

  std::span<const double> voxel(std::size_t v) const {
    return std::span<const double>(data).subspan(v * static_cast<std::size_t>(channels),
                                                 static_cast<std::size_t>(channels));
  }
};

/// Unit-norm per-voxel embeddings, voxel-major.
struct EmbeddingField {
  Dims3 dims;
  int dim = 0;
  std::vector<double> data;
  /// Voxels whose pre-normalization vector vanished and were assigned e_0.
  std::size_t zero_vectors = 0;

  std::span<const double> voxel(std::size_t v) const {
    return std::span<const double>(data).subspan(v * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
  }
};

/// Two-layer pointwise head: e = normalize(W2 relu(W1 f + b1) + b2).
/// Weights are row-major: w1 is hidden x in, w2 is out x hidden.
struct HeadParams {
  int in = 0;
  int hidden = 0;
  int out = 0;
  std::vector<double> w1, b1, w2, b2;

  static HeadParams zeros(int in, int hidden, int out) {
    HeadParams p{in, hidden, out, {}, {}, {}, {}};
    p.w1.assign(static_cast<std::size_t>(hidden) * in, 0.0);
    p.b1.assign(static_cast<std::size_t>(hidden), 0.0);
    p.w2.assign(static_cast<std::size_t>(out) * hidden, 0.0);
    p.b2.assign(static_cast<std::size_t>(out), 0.0);
    return p;
  }

  /// Weights uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases.
  static HeadParams glorot(int in, int hidden, int out, Rng& rng) {
    HeadParams p = zeros(in, hidden, out);
    std::uniform_real_distribution<double> u1(-1.0, 1.0);
    const double a1 = std::sqrt(6.0 / (in + hidden));
    const double a2 = std::sqrt(6.0 / (hidden + out));
    for (double& w : p.w1) w = a1 * u1(rng);
    for (double& w : p.w2) w = a2 * u1(rng);
    return p;
  }

  /// Visits every parameter block in a fixed order.
  template <typename F>
  void for_each_block(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }
  template <typename F>
  void for_each_block(F&& f) const {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }

  /// this += alpha * other
  void axpy(double alpha, const HeadParams& other) {
    auto add = [alpha](std::vector<double>& dst, const std::vector<double>& src) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
    };
    add(w1, other.w1);
    add(b1, other.b1);
    add(w2, other.w2);
    add(b2, other.b2);
  }

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

inline nlohmann::json to_json(const HeadParams& p) {
  auto matrix = [](const std::vector<double>& w, int rows, int cols) {
    nlohmann::json m = nlohmann::json::array();
    for (int r = 0; r < rows; ++r) {
      m.push_back(std::vector<double>(w.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                                      w.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols));
    }
    return m;
  };
  return {{"in", p.in},
          {"hidden", p.hidden},
          {"out", p.out},
          {"layer1", {{"weight", matrix(p.w1, p.hidden, p.in)}, {"bias", p.b1}}},
          {"layer2", {{"weight", matrix(p.w2, p.out, p.hidden)}, {"bias", p.b2}}}};
}

inline HeadParams head_from_json(const nlohmann::json& j) {
  HeadParams p = HeadParams::zeros(j.at("in").get<int>(), j.at("hidden").get<int>(), j.at("out").get<int>());
  auto read = [](const nlohmann::json& m, std::vector<double>& w, int rows, int cols) {
    if (static_cast<int>(m.size()) != rows) throw Error(ErrorCode::DimensionMismatch, "head weight rows");
    for (int r = 0; r < rows; ++r) {
      const auto row = m.at(r).get<std::vector<double>>();
      if (static_cast<int>(row.size()) != cols) throw Error(ErrorCode::DimensionMismatch, "head weight cols");
      std::copy(row.begin(), row.end(), w.begin() + static_cast<std::ptrdiff_t>(r) * cols);
    }
  };
  read(j.at("layer1").at("weight"), p.w1, p.hidden, p.in);
  read(j.at("layer2").at("weight"), p.w2, p.out, p.hidden);
  p.b1 = j.at("layer1").at("bias").get<std::vector<double>>();
  p.b2 = j.at("layer2").at("bias").get<std::vector<double>>();
  if (static_cast<int>(p.b1.size()) != p.hidden || static_cast<int>(p.b2.size()) != p.out) {
    throw Error(ErrorCode::DimensionMismatch, "head bias length");
  }
  return p;
}

enum class Label : std::uint8_t { Negative = 0, Positive = 1 };

struct LabelField {
  Dims3 dims;
  std::vector<Label> labels;

  std::size_t count(Label l) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), l)); }
};

inline constexpr double kZeroVectorNorm = 1e-12;


inline void require_head_matches(const FeatureField& features, const HeadParams& params) {
  if (features.channels != params.in) {
    throw Error(ErrorCode::DimensionMismatch, "feature channels " + std::to_string(features.channels) +
                                                  " != head input " + std::to_string(params.in));
  }
  if (features.data.size() != features.dims.count() * static_cast<std::size_t>(features.channels)) {
    throw Error(ErrorCode::DimensionMismatch, "feature data length");
  }
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

struct BatchActivation {
  RowMatrix features;  // m x in
  RowMatrix hidden;    // m x hidden, post-relu
  RowMatrix raw;       // m x out, pre-normalization
  Eigen::VectorXd norm;
};

inline BatchActivation head_forward_batch(const FeatureField& features, const HeadParams& p,
                                          std::span<const std::size_t> voxels) {
  const auto m = static_cast<Eigen::Index>(voxels.size());
  BatchActivation act;
  act.features.resize(m, p.in);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto f = features.voxel(voxels[static_cast<std::size_t>(i)]);
    for (int c = 0; c < p.in; ++c) act.features(i, c) = f[c];
  }
  const Eigen::Map<const RowMatrix> w1(p.w1.data(), p.hidden, p.in);
  const Eigen::Map<const RowMatrix> w2(p.w2.data(), p.out, p.hidden);
  const Eigen::Map<const Eigen::RowVectorXd> b1(p.b1.data(), p.hidden);
  const Eigen::Map<const Eigen::RowVectorXd> b2(p.b2.data(), p.out);
  act.hidden = ((act.features * w1.transpose()).rowwise() + b1).cwiseMax(0.0);
  act.raw = (act.hidden * w2.transpose()).rowwise() + b2;
  act.norm = act.raw.rowwise().norm();
  return act;
}

}  // namespace detail

/// Embeds the listed voxels only (row i of the result is voxels[i]).
inline std::vector<double> embed_voxels(const FeatureField& features, const HeadParams& params,
                                        std::span<const std::size_t> voxels, std::size_t* zero_vectors = nullptr) {
  require_head_matches(features, params);
  const detail::BatchActivation act = detail::head_forward_batch(features, params, voxels);
  std::vector<double> out(voxels.size() * static_cast<std::size_t>(params.out));
  Eigen::Map<RowMatrix> e(out.data(), static_cast<Eigen::Index>(voxels.size()), params.out);
  std::size_t zeros = 0;
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    if (act.norm(i) < kZeroVectorNorm) {
      e.row(i).setZero();
      e(i, 0) = 1.0;
      ++zeros;
    } else {
      e.row(i) = act.raw.row(i) / act.norm(i);
    }
  }
  if (zero_vectors != nullptr) *zero_vectors = zeros;
  return out;
}

inline EmbeddingField embed(const FeatureField& features, const HeadParams& params) {
  std::vector<std::size_t> all(features.dims.count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EmbeddingField e{features.dims, params.out, {}, 0};
  e.data = embed_voxels(features, params, all, &e.zero_vectors);
  return e;
}

/// Backpropagates dL/d(embedding) of the listed voxels into head parameters.
inline HeadParams head_gradient(const FeatureField& features, const HeadParams& params,
                                std::span<const std::size_t> voxels, std::span<const double> grad_embeddings) {
  require_head_matches(features, params);
  if (grad_embeddings.size() != voxels.size() * static_cast<std::size_t>(params.out)) {
    throw Error(ErrorCode::DimensionMismatch, "embedding gradient length");
  }
  const detail::BatchActivation act = detail::head_forward_batch(features, params, voxels);
  const auto m = static_cast<Eigen::Index>(voxels.size());
  const Eigen::Map<const RowMatrix> ge(grad_embeddings.data(), m, params.out);

  // e = u / |u|  =>  dL/du = (ge - e (e . ge)) / |u|; vanished rows get none.
  RowMatrix gu(m, params.out);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (act.norm(i) < kZeroVectorNorm) {
      gu.row(i).setZero();
      continue;
    }
    const Eigen::RowVectorXd e = act.raw.row(i) / act.norm(i);
    gu.row(i) = (ge.row(i) - e * e.dot(ge.row(i))) / act.norm(i);
  }
  const Eigen::Map<const RowMatrix> w2(params.w2.data(), params.out, params.hidden);
  const RowMatrix gh = (gu * w2).cwiseProduct((act.hidden.array() > 0.0).cast<double>().matrix());

  HeadParams g = HeadParams::zeros(params.in, params.hidden, params.out);
  Eigen::Map<RowMatrix>(g.w2.data(), params.out, params.hidden) = gu.transpose() * act.hidden;
  Eigen::Map<Eigen::RowVectorXd>(g.b2.data(), params.out) = gu.colwise().sum();
  Eigen::Map<RowMatrix>(g.w1.data(), params.hidden, params.in) = gh.transpose() * act.features;
  Eigen::Map<Eigen::RowVectorXd>(g.b1.data(), params.hidden) = gh.colwise().sum();
  return g;
}

inline double similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "embedding dims differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline LabelField coarse_labels(const Box3& box, const Dims3& dims) {
  require_box_in(box, dims);
  LabelField out{dims, std::vector<Label>(dims.count(), Label::Negative)};
  for (int z = box.lo.z; z < box.hi.z; ++z) {
    for (int y = box.lo.y; y < box.hi.y; ++y) {
      for (int x = box.lo.x; x < box.hi.x; ++x) out.labels[dims.linear(z, y, x)] = Label::Positive;
    }
  }
  return out;
}

/// Draws K distinct voxels uniformly from outside the box.
inline std::vector<std::size_t> draw_referring_voxels(const Box3& box, const Dims3& dims, int k, Rng& rng) {
  std::vector<std::size_t> outside;
  for (std::size_t v = 0; v < dims.count(); ++v) {
    const Index3 i = dims.unravel(v);
    if (!box.contains(i.z, i.y, i.x)) outside.push_back(v);
  }
  if (k <= 0) throw Error(ErrorCode::InvalidArgument, "K must be positive");
  if (outside.size() < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::InsufficientBackground,
                std::to_string(outside.size()) + " voxels outside box, K = " + std::to_string(k));
  }
  std::vector<std::size_t> picked;
  picked.reserve(static_cast<std::size_t>(k));
  std::sample(outside.begin(), outside.end(), std::back_inserter(picked), k, rng);
  return picked;
}

/// Majority vote of an in-box voxel against background referring voxels.
/// D counts referring voxels with similarity >= tau_sim. By default a voxel
/// stays positive iff D <= K/2; `invert_vote` makes it positive iff D > K/2.
inline LabelField refine_labels_with(const EmbeddingField& embeddings, const Box3& box,
                                     std::span<const std::size_t> referring, double tau_sim,
                                     bool invert_vote = false) {
  const Dims3& dims = embeddings.dims;
  require_box_in(box, dims);
  const double half = static_cast<double>(referring.size()) / 2.0;
  LabelField out{dims, std::vector<Label>(dims.count(), Label::Negative)};
  for (int z = box.lo.z; z < box.hi.z; ++z) {
    for (int y = box.lo.y; y < box.hi.y; ++y) {
      for (int x = box.lo.x; x < box.hi.x; ++x) {
        const std::size_t v = dims.linear(z, y, x);
        int count = 0;
        for (std::size_t r : referring) {
          if (similarity(embeddings.voxel(v), embeddings.voxel(r)) >= tau_sim) ++count;
        }
        const bool majority = count > half;
        out.labels[v] = (majority == invert_vote) ? Label::Positive : Label::Negative;
      }
    }
  }
  return out;
}

inline LabelField refine_labels(const EmbeddingField& embeddings, const Box3& box, int k, double tau_sim, Rng& rng,
                                bool invert_vote = false) {
  require_box_in(box, embeddings.dims);
  const auto referring = draw_referring_voxels(box, embeddings.dims, k, rng);
  return refine_labels_with(embeddings, box, referring, tau_sim, invert_vote);
}

struct InfoNceResult {
  double value = 0.0;
  /// Voxel indices of the sampled set; every member acts as an anchor.
  std::vector<std::size_t> sample;
  /// dL/d(vector), row i belongs to sample[i].
  std::vector<double> grad;
  /// Anchors that had at least one same-label partner.
  std::size_t anchors = 0;
};

/// Supervised InfoNCE over a set of vectors (n x dim, row-major):
///   L = -(1/|A|) sum_a (1/|P(a)|) log( sum_{p in P(a)} exp(s_ap/tau) / sum_{n in N(a)} exp(s_an/tau) )
/// P(a) excludes a itself; anchors with empty P(a) are skipped and |A|
/// counts the remaining anchors.
inline InfoNceResult info_nce_on_vectors(std::span<const double> vectors, std::span<const Label> labels, int dim,
                                         double tau) {
  const std::size_t n = labels.size();
  if (vectors.size() != n * static_cast<std::size_t>(dim)) throw Error(ErrorCode::DimensionMismatch, "vectors");
  if (!(tau > 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be positive");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), Label::Positive));
  if (positives == 0 || positives == n) throw Error(ErrorCode::SingleClass, "sample holds a single label");

  const auto rows = static_cast<Eigen::Index>(n);
  const Eigen::Map<const RowMatrix> e(vectors.data(), rows, dim);
  const RowMatrix logits = (e * e.transpose()) / tau;
  // coeff(a, j) = d(anchor a's term)/d(s_aj), s_aj = e_a . e_j
  RowMatrix coeff = RowMatrix::Zero(rows, rows);

  InfoNceResult r;
  double total = 0.0;
  std::vector<double> weight(n);
  for (Eigen::Index a = 0; a < rows; ++a) {
    const Label la = labels[static_cast<std::size_t>(a)];
    double max_p = -std::numeric_limits<double>::infinity();
    double max_n = -std::numeric_limits<double>::infinity();
    std::size_t count_p = 0;
    for (Eigen::Index j = 0; j < rows; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == la) {
        max_p = std::max(max_p, logits(a, j));
        ++count_p;
      } else {
        max_n = std::max(max_n, logits(a, j));
      }
    }
    if (count_p == 0) continue;
    double sum_p = 0.0;
    double sum_n = 0.0;
    for (Eigen::Index j = 0; j < rows; ++j) {
      if (j == a) continue;
      const bool same = labels[static_cast<std::size_t>(j)] == la;
      weight[static_cast<std::size_t>(j)] = std::exp(logits(a, j) - (same ? max_p : max_n));
      (same ? sum_p : sum_n) += weight[static_cast<std::size_t>(j)];
    }
    const double inv_p = 1.0 / static_cast<double>(count_p);
    total += -inv_p * ((max_p + std::log(sum_p)) - (max_n + std::log(sum_n)));
    ++r.anchors;
    // -(1/|P|) softmax_P(j) / tau on positives, +(1/|P|) softmax_N(j) / tau on negatives.
    for (Eigen::Index j = 0; j < rows; ++j) {
      if (j == a) continue;
      const bool same = labels[static_cast<std::size_t>(j)] == la;
      const double w = weight[static_cast<std::size_t>(j)] / (same ? sum_p : sum_n);
      coeff(a, j) = (same ? -inv_p : inv_p) * w / tau;
    }
  }
  r.grad.assign(vectors.size(), 0.0);
  if (r.anchors == 0) return r;
  const double inv_a = 1.0 / static_cast<double>(r.anchors);
  r.value = total * inv_a;
  Eigen::Map<RowMatrix> g(r.grad.data(), rows, dim);
  g = inv_a * ((coeff + coeff.transpose()) * e);
  return r;
}

/// Draws `sample_size` voxels without replacement (the whole grid if smaller).
inline std::vector<std::size_t> sample_voxels(const Dims3& dims, std::size_t sample_size, Rng& rng) {
  std::vector<std::size_t> all(dims.count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (sample_size >= all.size()) return all;
  std::vector<std::size_t> picked;
  picked.reserve(sample_size);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), sample_size, rng);
  return picked;
}

inline InfoNceResult info_nce_loss(const EmbeddingField& embeddings, const LabelField& labels, double tau_temp,
                                   std::size_t sample_size, Rng& rng) {
  if (!(embeddings.dims == labels.dims)) throw Error(ErrorCode::DimensionMismatch, "embedding/label dims");
  auto sample = sample_voxels(embeddings.dims, sample_size, rng);
  std::vector<double> vecs;
  vecs.reserve(sample.size() * static_cast<std::size_t>(embeddings.dim));
  std::vector<Label> lab;
  lab.reserve(sample.size());
  for (std::size_t v : sample) {
    const auto e = embeddings.voxel(v);
    vecs.insert(vecs.end(), e.begin(), e.end());
    lab.push_back(labels.labels[v]);
  }
  InfoNceResult r = info_nce_on_vectors(vecs, lab, embeddings.dim, tau_temp);
  r.sample = std::move(sample);
  return r;
}

struct PretrainConfig {
  int k = 64;
  double tau_sim = 0.6;
  double tau_temp = 0.1;
  int coarse_steps = 200;
  int refine_steps = 200;
  double lr = 3.0;
  std::size_t sample_size = 512;
  int hidden = 64;
  int dim = 32;
  bool invert_vote = false;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct PretrainResult {
  HeadParams params;
  /// InfoNCE value per step, coarse stage first.
  std::vector<double> loss_trace;
  LabelField refined;
};

namespace detail {
// One gradient-descent step on a freshly sampled anchor set.
inline double pretrain_step(const FeatureField& features, const LabelField& labels, const PretrainConfig& cfg,
                            HeadParams& params, Rng& rng) {
  const auto sample = sample_voxels(features.dims, cfg.sample_size, rng);
  const auto vecs = embed_voxels(features, params, sample);
  std::vector<Label> lab;
  lab.reserve(sample.size());
  for (std::size_t v : sample) lab.push_back(labels.labels[v]);
  const InfoNceResult r = info_nce_on_vectors(vecs, lab, params.out, cfg.tau_temp);
  params.axpy(-cfg.lr, head_gradient(features, params, sample, r.grad));
  return r.value;
}
}  // namespace detail

/// Coarse stage on box labels, then refine stage on labels re-derived from
/// the current embeddings.
inline PretrainResult pretrain_head(const FeatureField& features, const Box3& box, const PretrainConfig& cfg,
                                    HeadParams init, Rng& rng) {
  require_box_in(box, features.dims);
  require_head_matches(features, init);
  PretrainResult out{std::move(init), {}, {}};
  const LabelField coarse = coarse_labels(box, features.dims);
  for (int step = 0; step < cfg.coarse_steps; ++step) {
    out.loss_trace.push_back(detail::pretrain_step(features, coarse, cfg, out.params, rng));
  }
  if (cfg.refine_steps > 0) {
    out.refined = refine_labels(embed(features, out.params), box, cfg.k, cfg.tau_sim, rng, cfg.invert_vote);
    for (int step = 0; step < cfg.refine_steps; ++step) {
      out.loss_trace.push_back(detail::pretrain_step(features, out.refined, cfg, out.params, rng));
    }
  } else {
    out.refined = coarse;
  }
  return out;
}

inline PretrainResult pretrain_head(const FeatureField& features, const Box3& box, const PretrainConfig& cfg,
                                    Rng& rng) {
  HeadParams init = HeadParams::glorot(features.channels, cfg.hidden, cfg.dim, rng);
  return pretrain_head(features, box, cfg, std::move(init), rng);
}

/// Hand-crafted desk-scale features, standardized per channel:
/// intensity, 3x3x3 mean, 3x3x3 variance, and z/y/x coordinates in [-1, 1].
inline FeatureField make_features(const VoxelGrid& image) {
  const Dims3& d = image.dims();
  constexpr int kChannels = 6;
  FeatureField f{d, kChannels, std::vector<double>(d.count() * kChannels)};
  auto norm_coord = [](int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
  for (int z = 0; z < d.s; ++z) {
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        double sum = 0.0;
        double sum2 = 0.0;
        int count = 0;
        for (int dz = -1; dz <= 1; ++dz) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              if (!d.contains(z + dz, y + dy, x + dx)) continue;
              const double v = image.at(z + dz, y + dy, x + dx);
              sum += v;
              sum2 += v * v;
              ++count;
            }
          }
        }
        const double mean = sum / count;
        double* out = &f.data[d.linear(z, y, x) * kChannels];
        out[0] = image.at(z, y, x);
        out[1] = mean;
        out[2] = std::max(0.0, sum2 / count - mean * mean);
        out[3] = norm_coord(z, d.s);
        out[4] = norm_coord(y, d.h);
        out[5] = norm_coord(x, d.w);
      }
    }
  }
  const std::size_t n = d.count();
  for (int c = 0; c < kChannels; ++c) {
    double mean = 0.0;
    for (std::size_t v = 0; v < n; ++v) mean += f.data[v * kChannels + c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t v = 0; v < n; ++v) var += (f.data[v * kChannels + c] - mean) * (f.data[v * kChannels + c] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (std::size_t v = 0; v < n; ++v) {
      double& x = f.data[v * kChannels + c];
      x = sd > 0.0 ? (x - mean) / sd : 0.0;
    }
  }
  return f;
}

}  // namespace boxprior
