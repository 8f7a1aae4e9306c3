#pragma once

#include <Eigen/SVD>
#include <cmath>
#include <numbers>
#include <variant>

#include "dbgan/dpp.hpp"

namespace dbgan {

struct PcaResult {
  Matrix projected;       // m x q
  Matrix components;      // d x q, right singular directions
  Vector singular_values; // all min(m,d) values, descending
  Vector column_means;    // d

  //! Fraction of variance captured by the q kept directions.
  double explained_variance(int q) const {
    double total = singular_values.squaredNorm();
    if (total <= 0) return 0.0;
    return singular_values.head(q).squaredNorm() / total;
  }
};

//! Column-center and project onto the top-q right singular directions.
//! Sign convention: the largest-magnitude entry of each direction is positive.
inline PcaResult pca_project(const Matrix& x, int q) {
  if (q < 1 || q > std::min(x.rows(), x.cols()))
    throw ShapeError("pca_project: q must be in [1, min(m,d)]");
  PcaResult res;
  res.column_means = x.colwise().mean();
  Matrix centered = x.rowwise() - res.column_means.transpose();
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix v = svd.matrixV().leftCols(q);
  for (int c = 0; c < q; ++c) {
    int idx = 0;
    v.col(c).cwiseAbs().maxCoeff(&idx);
    if (v(idx, c) < 0) v.col(c) = -v.col(c);
  }
  res.components = v;
  res.singular_values = svd.singularValues();
  res.projected = centered * v;
  return res;
}

//! Isotropic Gaussian KDE over prototype embeddings: the estimated prior.
struct PriorKDE {
  Matrix centers;       // m x q
  double bandwidth = 1.0;

  int dim() const { return static_cast<int>(centers.cols()); }
  int count() const { return static_cast<int>(centers.rows()); }
};

struct BandwidthRule {
  enum class Kind { scott, fixed } kind = Kind::scott;
  double value = 1.0;  // for fixed

  static BandwidthRule scott() { return {Kind::scott, 0.0}; }
  static BandwidthRule fixed(double b) { return {Kind::fixed, b}; }
};

//! Scott's rule: b = mean per-dimension std * m^{-1/(q+4)}.
inline PriorKDE fit_kde(const Matrix& centers, BandwidthRule rule) {
  PriorKDE kde;
  kde.centers = centers;
  if (rule.kind == BandwidthRule::Kind::fixed) {
    if (rule.value <= 0) throw ShapeError("fixed bandwidth must be positive");
    kde.bandwidth = rule.value;
    return kde;
  }
  int m = static_cast<int>(centers.rows());
  int q = static_cast<int>(centers.cols());
  if (m < 2) throw ShapeError("scott bandwidth needs at least 2 centers");
  Vector means = centers.colwise().mean();
  Matrix centered = centers.rowwise() - means.transpose();
  double sbar = 0.0;
  for (int c = 0; c < q; ++c)
    sbar += std::sqrt(centered.col(c).squaredNorm() / (m - 1));
  sbar /= q;
  if (sbar <= 0)
    throw DomainError("degenerate centers: zero spread, use a fixed bandwidth");
  kde.bandwidth = sbar * std::pow(static_cast<double>(m), -1.0 / (q + 4));
  return kde;
}

//! (1/m) sum_i (2 pi b^2)^{-q/2} exp(-||z - h_i||^2 / (2 b^2)).
//! Underflows to 0 far from every center, never NaN.
inline double kde_density(const PriorKDE& kde, const Vector& z) {
  if (z.size() != kde.dim()) throw ShapeError("kde_density: dimension mismatch");
  double b2 = kde.bandwidth * kde.bandwidth;
  double lognorm = -0.5 * kde.dim() * std::log(2.0 * std::numbers::pi * b2);
  double acc = 0.0;
  for (int i = 0; i < kde.count(); ++i) {
    double d2 = (kde.centers.row(i).transpose() - z).squaredNorm();
    acc += std::exp(lognorm - d2 / (2.0 * b2));
  }
  return acc / kde.count();
}

//! Mixture draw: uniform center plus isotropic Gaussian noise of std b.
inline Matrix kde_sample(const PriorKDE& kde, int count, std::uint64_t seed) {
  if (count < 1) throw ShapeError("kde_sample: count must be positive");
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, kde.count() - 1);
  Matrix z(count, kde.dim());
  for (int r = 0; r < count; ++r) {
    int c = pick(rng);
    for (int j = 0; j < kde.dim(); ++j)
      z(r, j) = kde.centers(c, j) + kde.bandwidth * normal01(rng);
  }
  return z;
}

// ---- prior assembly ----

enum class PriorMode { pde, standard_normal, x_only };

//! Either the estimated KDE prior or the N(0,1) ablation prior.
class Prior {
 public:
  static Prior standard_normal(int q) {
    Prior p;
    p.q_ = q;
    return p;
  }
  static Prior from_kde(PriorKDE kde) {
    Prior p;
    p.q_ = kde.dim();
    p.kde_ = std::move(kde);
    return p;
  }

  bool is_standard_normal() const { return !kde_.has_value(); }
  const PriorKDE& kde() const {
    if (!kde_) throw ShapeError("standard-normal prior has no KDE");
    return *kde_;
  }
  int dim() const { return q_; }

  Matrix sample(int count, std::uint64_t seed) const {
    if (kde_) return kde_sample(*kde_, count, seed);
    Rng rng(seed);
    Matrix z(count, q_);
    for (int i = 0; i < count; ++i)
      for (int j = 0; j < q_; ++j) z(i, j) = normal01(rng);
    return z;
  }

 private:
  int q_ = 0;
  std::optional<PriorKDE> kde_;
};

struct PriorEstimate {
  Prior prior;
  std::vector<int> prototype_indices;  // empty for standard-normal / x-only
};

//! Prototype selection (exact k-DPP below the threshold, greedy MAP above),
//! PCA projection, KDE fit. x_only skips prototypes and fits KDE over the
//! PCA of every node; standard_normal returns the N(0,1) ablation prior.
inline PriorEstimate estimate_prior(const Graph& g, int q, int m,
                                    std::uint64_t seed, PriorMode mode,
                                    BandwidthRule rule = BandwidthRule::scott(),
                                    int exact_threshold = 3000) {
  if (mode == PriorMode::standard_normal)
    return {Prior::standard_normal(q), {}};
  if (q > g.features.cols())
    throw ShapeError("latent dim exceeds feature dim; PCA impossible");

  if (mode == PriorMode::x_only) {
    auto pca = pca_project(g.features, q);
    return {Prior::from_kde(fit_kde(pca.projected, rule)), {}};
  }

  auto adj = normalize_adjacency(g, /*self_loops=*/false);
  auto kern = build_dpp_kernel(adj);
  PrototypeSet protos = g.n <= exact_threshold
                            ? sample_kdpp(kern, m, seed, exact_threshold)
                            : greedy_map_dpp(kern, m);
  Matrix xp(protos.indices.size(), g.features.cols());
  for (std::size_t r = 0; r < protos.indices.size(); ++r)
    xp.row(static_cast<Eigen::Index>(r)) = g.features.row(protos.indices[r]);
  auto pca = pca_project(xp, q);
  return {Prior::from_kde(fit_kde(pca.projected, rule)), protos.indices};
}

}  // namespace dbgan
