#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "dbgan/graph.hpp"
#include "dbgan/nn.hpp"

namespace dbgan {

struct LinkPredResult {
  double auc = 0.0;
  double ap = 0.0;
  std::vector<double> pos_scores, neg_scores;
};

struct ClusterResult {
  std::vector<int> assignments;
  double acc = 0.0, nmi = 0.0, ari = 0.0;
};

inline double edge_score(const Matrix& h, int i, int j) {
  if (i < 0 || j < 0 || i >= h.rows() || j >= h.rows())
    throw ShapeError("edge_score: node index out of range");
  double dot = h.row(i).dot(h.row(j));
  return 1.0 / (1.0 + std::exp(-dot));
}

//! AUC by rank statistics (ties count one half); AP by step interpolation
//! over descending scores, tied negatives ranked ahead of tied positives.
inline std::pair<double, double> compute_auc_ap(
    const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty())
    throw ShapeError("compute_auc_ap: empty score list");

  struct Item { double s; int label; };
  std::vector<Item> items;
  items.reserve(pos.size() + neg.size());
  for (double s : pos) items.push_back({s, 1});
  for (double s : neg) items.push_back({s, 0});

  // AUC via midranks on ascending order
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.s < b.s; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < items.size()) {
    std::size_t j = i;
    while (j < items.size() && items[j].s == items[i].s) ++j;
    double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (items[k].label == 1) rank_sum_pos += midrank;
    i = j;
  }
  double np = static_cast<double>(pos.size());
  double nn = static_cast<double>(neg.size());
  double auc = (rank_sum_pos - np * (np + 1) / 2.0) / (np * nn);

  // AP: descending; on ties place negatives first (pessimistic, deterministic)
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
    if (a.s != b.s) return a.s > b.s;
    return a.label < b.label;
  });
  double tp = 0.0, seen = 0.0, ap = 0.0;
  for (const auto& it : items) {
    seen += 1.0;
    if (it.label == 1) {
      tp += 1.0;
      ap += tp / seen;
    }
  }
  ap /= np;
  return {auc, ap};
}

//! k-means++ seeding then Lloyd to fixpoint; empty clusters re-seeded to the
//! farthest point.
inline std::vector<int> kmeans(const Matrix& points, int k, std::uint64_t seed,
                               int max_iter = 300) {
  int n = static_cast<int>(points.rows());
  if (k < 1 || k > n) throw ShapeError("kmeans: need 1 <= k <= n");
  if (max_iter < 1) throw ShapeError("kmeans: max_iter must be >= 1");
  Rng rng(seed);

  Matrix centers(k, points.cols());
  {
    std::uniform_int_distribution<int> pick(0, n - 1);
    centers.row(0) = points.row(pick(rng));
    Vector d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      double total = d2.sum();
      int chosen = 0;
      if (total > 0) {
        double r = uniform01(rng) * total;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
          acc += d2[i];
          if (r <= acc) { chosen = i; break; }
        }
      } else {
        chosen = pick(rng);
      }
      centers.row(c) = points.row(chosen);
      d2 = d2.cwiseMin(
          (points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }
  }

  std::vector<int> assign(n, 0), prev(n, -1);
  for (int iter = 0; iter < max_iter && assign != prev; ++iter) {
    prev = assign;
    for (int i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (int c = 0; c < k; ++c) {
        double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < best) { best = d; assign[i] = c; }
      }
    }
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++counts[assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        centers.row(c) = sums.row(c) / counts[c];
      } else {
        // farthest point from its center takes over the empty cluster
        int far = 0;
        double best = -1.0;
        for (int i = 0; i < n; ++i) {
          double d = (points.row(i) - centers.row(assign[i])).squaredNorm();
          if (d > best) { best = d; far = i; }
        }
        centers.row(c) = points.row(far);
        assign[far] = c;
      }
    }
  }
  return assign;
}

namespace detail {

//! Max-sum assignment on a rectangular matrix (rows <= padded square),
//! classic Hungarian with potentials, O(s^3).
inline std::vector<int> hungarian_max(const Matrix& score) {
  int s = static_cast<int>(std::max(score.rows(), score.cols()));
  Matrix cost = Matrix::Zero(s, s);
  double top = score.size() ? score.maxCoeff() : 0.0;
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j)
      cost(i, j) = (i < score.rows() && j < score.cols()) ? top - score(i, j) : top;

  std::vector<double> u(s + 1, 0), v(s + 1, 0);
  std::vector<int> p(s + 1, 0), way(s + 1, 0);
  for (int i = 1; i <= s; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(s + 1, std::numeric_limits<double>::max());
    std::vector<char> used(s + 1, false);
    do {
      used[j0] = true;
      int i0 = p[j0], j1 = -1;
      double delta = std::numeric_limits<double>::max();
      for (int j = 1; j <= s; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) { minv[j] = cur; way[j] = j0; }
        if (minv[j] < delta) { delta = minv[j]; j1 = j; }
      }
      for (int j = 0; j <= s; ++j) {
        if (used[j]) { u[p[j]] += delta; v[j] -= delta; }
        else minv[j] -= delta;
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(score.rows(), -1);
  for (int j = 1; j <= s; ++j)
    if (p[j] >= 1 && p[j] <= score.rows() && j <= score.cols())
      row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double log2_safe(double x) { return x > 0 ? std::log2(x) : 0.0; }

inline double comb2(double x) { return x * (x - 1.0) / 2.0; }

}  // namespace detail

//! ACC via exact Hungarian matching of clusters to labels, NMI with
//! arithmetic-mean normalization, ARI with the expected-index correction.
inline ClusterResult clustering_metrics(const std::vector<int>& assignments,
                                        const std::vector<int>& labels) {
  if (assignments.size() != labels.size())
    throw ShapeError("clustering_metrics: length mismatch");
  int n = static_cast<int>(assignments.size());
  int k = 1 + *std::max_element(assignments.begin(), assignments.end());
  int c = 1 + *std::max_element(labels.begin(), labels.end());

  Matrix cont = Matrix::Zero(k, c);
  for (int i = 0; i < n; ++i) cont(assignments[i], labels[i]) += 1.0;

  auto row_to_col = detail::hungarian_max(cont);
  double matched = 0.0;
  for (int r = 0; r < k; ++r)
    if (row_to_col[r] >= 0) matched += cont(r, row_to_col[r]);
  double acc = matched / n;

  Vector a = cont.rowwise().sum(), b = cont.colwise().sum();
  double mi = 0.0, hu = 0.0, hv = 0.0;
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < c; ++j) {
      double nij = cont(r, j);
      if (nij > 0)
        mi += (nij / n) * detail::log2_safe(n * nij / (a[r] * b[j]));
    }
  for (int r = 0; r < k; ++r) hu -= (a[r] / n) * detail::log2_safe(a[r] / n);
  for (int j = 0; j < c; ++j) hv -= (b[j] / n) * detail::log2_safe(b[j] / n);
  double denom = 0.5 * (hu + hv);
  double nmi = denom > 0 ? mi / denom : 1.0;

  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (int r = 0; r < k; ++r)
    for (int j = 0; j < c; ++j) sum_ij += detail::comb2(cont(r, j));
  for (int r = 0; r < k; ++r) sum_a += detail::comb2(a[r]);
  for (int j = 0; j < c; ++j) sum_b += detail::comb2(b[j]);
  double total = detail::comb2(static_cast<double>(n));
  double expected = sum_a * sum_b / total;
  double maxi = 0.5 * (sum_a + sum_b);
  double ari = (maxi - expected) != 0 ? (sum_ij - expected) / (maxi - expected)
                                      : 0.0;

  ClusterResult res;
  res.assignments = assignments;
  res.acc = acc;
  res.nmi = nmi;
  res.ari = ari;
  return res;
}

//! Encode with the (self-loop normalized) training adjacency, values only.
inline Matrix encode_embeddings(const ModelParams& params, const Matrix& x,
                                const NormalizedAdjacency& adj) {
  auto sp = std::make_shared<const SparseMatrix>(adj.mat);
  Var h = encoder_forward(ad::constant(x), sp, as_constants(params.encoder));
  return h->value;
}

inline LinkPredResult link_prediction(const Matrix& h, const EdgeSplit& split,
                                      bool use_test = true) {
  LinkPredResult res;
  const auto& pos = use_test ? split.test_pos : split.val_pos;
  const auto& neg = use_test ? split.test_neg : split.val_neg;
  for (auto [i, j] : pos) res.pos_scores.push_back(edge_score(h, i, j));
  for (auto [i, j] : neg) res.neg_scores.push_back(edge_score(h, i, j));
  std::tie(res.auc, res.ap) = compute_auc_ap(res.pos_scores, res.neg_scores);
  return res;
}

inline ClusterResult node_clustering(const Matrix& h,
                                     const std::vector<int>& labels, int k,
                                     std::uint64_t seed) {
  auto assign = kmeans(h, k, seed);
  return clustering_metrics(assign, labels);
}

}  // namespace dbgan
