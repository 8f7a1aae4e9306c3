#pragma once

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <optional>
#include <vector>

#include "dbgan/graph.hpp"

namespace dbgan {

//! PSD measure matrix L = I + A_hat (A_hat symmetric-normalized, no self
//! loops). The shift keeps every principal-minor determinant non-negative
//! while preserving the graph-structure measure.
struct DppKernel {
  SparseMatrix L;  // sparse: unit diagonal plus normalized adjacency
  mutable std::optional<Vector> eigvals;
  mutable std::optional<Matrix> eigvecs;

  int n() const { return static_cast<int>(L.rows()); }

  Matrix dense() const { return Matrix(L); }

  void ensure_eig() const {
    if (eigvals) return;
    Eigen::SelfAdjointEigenSolver<Matrix> es(dense());
    if (es.info() != Eigen::Success) throw DomainError("eigendecomposition failed");
    eigvals = es.eigenvalues();
    eigvecs = es.eigenvectors();
  }
};

struct PrototypeSet {
  std::vector<int> indices;  // distinct, sorted
  enum class Method { exact_kdpp, greedy_map } method = Method::exact_kdpp;
};

inline DppKernel build_dpp_kernel(const NormalizedAdjacency& adj,
                                  double sym_tol = 1e-10) {
  if (adj.self_loops)
    throw ShapeError("DPP kernel expects the no-self-loop normalization");
  SparseMatrix diff = SparseMatrix(adj.mat.transpose()) - adj.mat;
  for (int k = 0; k < diff.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(diff, k); it; ++it)
      if (std::abs(it.value()) > sym_tol)
        throw ShapeError("adjacency asymmetric beyond tolerance");
  SparseMatrix ident(adj.mat.rows(), adj.mat.cols());
  ident.setIdentity();
  DppKernel kern;
  kern.L = ident + adj.mat;
  kern.L.makeCompressed();
  return kern;
}

//! e_0..e_kmax of the given values; E(k, i) uses the first i values.
inline Matrix elementary_symmetric_table(const Vector& vals, int kmax) {
  int n = static_cast<int>(vals.size());
  Matrix e = Matrix::Zero(kmax + 1, n + 1);
  e.row(0).setOnes();
  for (int k = 1; k <= kmax; ++k)
    for (int i = 1; i <= n; ++i)
      e(k, i) = e(k, i - 1) + vals[i - 1] * e(k - 1, i - 1);
  return e;
}

//! det(L_S) / e_k(eigenvalues), the fixed-size subset probability.
inline double kdpp_subset_probability(const DppKernel& kern,
                                      const std::vector<int>& subset, int k) {
  if (static_cast<int>(subset.size()) != k)
    throw ShapeError("subset size must equal k");
  kern.ensure_eig();
  Matrix dense = kern.dense();
  Matrix sub(k, k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) sub(a, b) = dense(subset[a], subset[b]);
  double det = k == 0 ? 1.0 : sub.determinant();
  Matrix e = elementary_symmetric_table(*kern.eigvals, k);
  double norm = e(k, kern.n());
  if (norm <= 0) throw DomainError("degenerate k-DPP normalizer");
  return std::max(det, 0.0) / norm;
}

//! Exact k-DPP sample: eigenvector selection by the elementary-symmetric
//! recursion, then item-by-item projection sampling.
inline PrototypeSet sample_kdpp(const DppKernel& kern, int m, std::uint64_t seed,
                                int exact_threshold = 3000) {
  int n = kern.n();
  if (n > exact_threshold)
    throw ShapeError("graph too large for exact k-DPP; use greedy_map_dpp");
  if (m < 1 || m > n) throw ShapeError("invalid prototype count");
  kern.ensure_eig();
  const Vector& lam = *kern.eigvals;
  int effective_rank = 0;
  for (int i = 0; i < n; ++i)
    if (lam[i] > 1e-10) ++effective_rank;
  if (m > effective_rank)
    throw ShapeError("m exceeds effective rank of the DPP kernel");

  Rng rng(seed);
  Matrix e = elementary_symmetric_table(lam, m);

  // pick m eigenvector indices
  std::vector<int> vidx;
  int remaining = m;
  for (int i = n; i >= 1 && remaining > 0; --i) {
    double marg;
    if (i == remaining) {
      marg = 1.0;
    } else {
      double denom = e(remaining, i);
      if (denom <= 0.0) continue;
      marg = lam[i - 1] * e(remaining - 1, i - 1) / denom;
    }
    if (uniform01(rng) < marg) {
      vidx.push_back(i - 1);
      --remaining;
    }
  }

  Matrix v(n, m);
  for (int c = 0; c < m; ++c) v.col(c) = kern.eigvecs->col(vidx[c]);

  std::vector<int> chosen;
  int k = m;
  while (k > 0) {
    Vector p = v.leftCols(k).rowwise().squaredNorm() / static_cast<double>(k);
    double r = uniform01(rng);
    double acc = 0.0;
    int item = n - 1;
    for (int i = 0; i < n; ++i) {
      acc += p[i];
      if (r < acc) {
        item = i;
        break;
      }
    }
    chosen.push_back(item);

    if (k == 1) break;
    // eliminate the item coordinate from the spanned subspace
    int pivot = 0;
    v.leftCols(k).row(item).cwiseAbs().maxCoeff(&pivot);
    Vector pcol = v.col(pivot);
    v.col(pivot) = v.col(k - 1);
    double piv = pcol[item];
    for (int c = 0; c < k - 1; ++c) v.col(c) -= pcol * (v(item, c) / piv);
    // re-orthonormalize the remaining k-1 columns (modified Gram-Schmidt)
    for (int c = 0; c < k - 1; ++c) {
      for (int prev = 0; prev < c; ++prev)
        v.col(c) -= v.col(prev) * v.col(prev).dot(v.col(c));
      double norm = v.col(c).norm();
      if (norm < 1e-12) throw DomainError("k-DPP subspace collapsed");
      v.col(c) /= norm;
    }
    --k;
  }

  std::sort(chosen.begin(), chosen.end());
  chosen.erase(std::unique(chosen.begin(), chosen.end()), chosen.end());
  if (static_cast<int>(chosen.size()) != m)
    throw DomainError("k-DPP sampler produced duplicate items");
  return PrototypeSet{std::move(chosen), PrototypeSet::Method::exact_kdpp};
}

//! Greedy log-det MAP via incremental Cholesky. Deterministic, lowest index
//! wins ties; stops early once every remaining incremental determinant
//! factor is non-positive (rank deficiency).
inline PrototypeSet greedy_map_dpp(const DppKernel& kern, int m,
                                   double tol = 1e-12) {
  int n = kern.n();
  if (m < 1 || m > n) throw ShapeError("invalid prototype count");
  Vector d2(n);
  for (int i = 0; i < n; ++i) d2[i] = kern.L.coeff(i, i);
  Matrix c(n, m);  // Cholesky coefficient rows, grows one column per pick
  std::vector<bool> taken(n, false);
  std::vector<int> chosen;

  for (int step = 0; step < m; ++step) {
    int best = -1;
    double best_gain = tol;
    for (int i = 0; i < n; ++i)
      if (!taken[i] && d2[i] > best_gain) {
        best_gain = d2[i];
        best = i;
      }
    if (best < 0) break;  // rank deficient: report actual size
    taken[best] = true;
    chosen.push_back(best);
    if (step + 1 == m) break;

    Vector lcol = Vector::Zero(n);
    for (SparseMatrix::InnerIterator it(kern.L, best); it; ++it)
      lcol[it.row()] = it.value();
    double dj = std::sqrt(d2[best]);
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double e = lcol[i];
      if (step > 0)
        e -= c.row(i).head(step).dot(c.row(best).head(step));
      e /= dj;
      c(i, step) = e;
      d2[i] -= e * e;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  return PrototypeSet{std::move(chosen), PrototypeSet::Method::greedy_map};
}

}  // namespace dbgan
