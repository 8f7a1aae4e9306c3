#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dbgan/common.hpp"

namespace dbgan {

using Edge = std::pair<int, int>;  // always stored with first < second

//! Undirected graph with dense node features and optional class labels.
struct Graph {
  int n = 0;
  std::vector<Edge> edges;  // sorted, deduplicated, no self-loops
  Matrix features;          // n x d
  std::optional<std::vector<int>> labels;

  int num_classes() const {
    if (!labels) return 0;
    int c = 0;
    for (int l : *labels) c = std::max(c, l + 1);
    return c;
  }
};

//! Symmetric-normalized adjacency D^{-1/2} A D^{-1/2}, optionally of A+I.
struct NormalizedAdjacency {
  SparseMatrix mat;
  bool self_loops = false;
};

struct EdgeSplit {
  std::vector<Edge> train_pos, val_pos, test_pos;
  std::vector<Edge> val_neg, test_neg;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::int64_t edge_key(int i, int j, int n) {
  if (i > j) std::swap(i, j);
  return static_cast<std::int64_t>(i) * n + j;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

inline std::vector<Edge> canonical_edges(const std::vector<Edge>& raw, int n) {
  std::vector<Edge> out;
  out.reserve(raw.size());
  for (auto [i, j] : raw) {
    if (i == j) continue;
    if (i > j) std::swap(i, j);
    out.emplace_back(i, j);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (!out.empty() && out.back().second >= n)
    throw IoError("edge endpoint " + std::to_string(out.back().second) +
                  " out of range for n=" + std::to_string(n));
  return out;
}

//! Parse edge list, feature CSV and optional label file into a Graph.
//! Node count is the feature row count; edge endpoints must stay below it.
inline Graph load_graph(const std::string& edges_path,
                        const std::string& features_path,
                        const std::optional<std::string>& labels_path = {}) {
  std::ifstream ef(edges_path);
  if (!ef) throw IoError("cannot open edges file: " + edges_path);
  std::vector<Edge> raw;
  std::string line;
  int lineno = 0;
  int max_idx = -1;
  while (std::getline(ef, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    long a, b;
    if (!(ss >> a >> b))
      throw IoError(edges_path + ":" + std::to_string(lineno) +
                    ": expected two integers");
    std::string rest;
    if (ss >> rest)
      throw IoError(edges_path + ":" + std::to_string(lineno) +
                    ": trailing tokens");
    if (a < 0 || b < 0)
      throw IoError(edges_path + ":" + std::to_string(lineno) +
                    ": negative node index");
    raw.emplace_back(static_cast<int>(a), static_cast<int>(b));
    max_idx = std::max<long>(max_idx, std::max(a, b));
  }

  std::ifstream ff(features_path);
  if (!ff) throw IoError("cannot open features file: " + features_path);
  std::vector<std::vector<double>> rows;
  lineno = 0;
  while (std::getline(ff, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    std::vector<double> row;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      std::string tok = line.substr(
          pos, comma == std::string::npos ? std::string::npos : comma - pos);
      try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        while (used < tok.size() && std::isspace(static_cast<unsigned char>(tok[used]))) ++used;
        if (used != tok.size()) throw std::invalid_argument(tok);
        row.push_back(v);
      } catch (const std::exception&) {
        throw IoError(features_path + ":" + std::to_string(lineno) +
                      ": bad feature value '" + tok + "'");
      }
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError(features_path + ":" + std::to_string(lineno) +
                    ": inconsistent column count");
    if (!std::all_of(row.begin(), row.end(),
                     [](double v) { return std::isfinite(v); }))
      throw IoError(features_path + ":" + std::to_string(lineno) +
                    ": non-finite feature value");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError(features_path + ": no feature rows");

  Graph g;
  g.n = static_cast<int>(rows.size());
  if (max_idx >= g.n)
    throw IoError(edges_path + ": node index " + std::to_string(max_idx) +
                  " but only " + std::to_string(g.n) + " feature rows");
  g.features.resize(g.n, static_cast<Eigen::Index>(rows.front().size()));
  for (int i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      g.features(i, static_cast<Eigen::Index>(j)) = rows[i][j];
  g.edges = canonical_edges(raw, g.n);

  if (labels_path) {
    std::ifstream lf(*labels_path);
    if (!lf) throw IoError("cannot open labels file: " + *labels_path);
    std::vector<int> labels;
    lineno = 0;
    while (std::getline(lf, line)) {
      ++lineno;
      detail::strip_cr(line);
      if (line.empty()) continue;
      try {
        std::size_t used = 0;
        int v = std::stoi(line, &used);
        if (used != line.size() || v < 0) throw std::invalid_argument(line);
        labels.push_back(v);
      } catch (const std::exception&) {
        throw IoError(*labels_path + ":" + std::to_string(lineno) +
                      ": bad label '" + line + "'");
      }
    }
    if (static_cast<int>(labels.size()) != g.n)
      throw IoError(*labels_path + ": " + std::to_string(labels.size()) +
                    " labels for " + std::to_string(g.n) + " nodes");
    g.labels = std::move(labels);
  }
  return g;
}

//! D~^{-1/2} A~ D~^{-1/2} with A~ = A or A+I; zero-degree rows stay zero.
inline NormalizedAdjacency normalize_adjacency(int n,
                                               const std::vector<Edge>& edges,
                                               bool self_loops) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(edges.size() * 2 + (self_loops ? n : 0));
  Vector deg = Vector::Zero(n);
  for (auto [i, j] : edges) {
    trips.emplace_back(i, j, 1.0);
    trips.emplace_back(j, i, 1.0);
    deg[i] += 1.0;
    deg[j] += 1.0;
  }
  if (self_loops) {
    for (int i = 0; i < n; ++i) {
      trips.emplace_back(i, i, 1.0);
      deg[i] += 1.0;
    }
  }
  Vector dinv(n);
  for (int i = 0; i < n; ++i) dinv[i] = deg[i] > 0 ? 1.0 / std::sqrt(deg[i]) : 0.0;
  SparseMatrix a(n, n);
  a.setFromTriplets(trips.begin(), trips.end());
  SparseMatrix norm = dinv.asDiagonal() * a * dinv.asDiagonal();
  norm.makeCompressed();
  return NormalizedAdjacency{std::move(norm), self_loops};
}

inline NormalizedAdjacency normalize_adjacency(const Graph& g, bool self_loops) {
  return normalize_adjacency(g.n, g.edges, self_loops);
}

//! Reproducible 85:5:10-style split with uniformly sampled negatives.
//! Held-out negatives avoid the full original edge set and each other.
inline EdgeSplit split_edges(const Graph& g, double train_ratio,
                             double val_ratio, double test_ratio,
                             std::uint64_t seed) {
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
    throw ShapeError("split ratios must sum to 1");
  const auto E = static_cast<std::int64_t>(g.edges.size());
  if (E < 20) throw ShapeError("graph has fewer than 20 edges");

  Rng rng(seed);
  std::vector<Edge> shuffled = g.edges;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);

  const auto n_val = static_cast<std::int64_t>(std::llround(val_ratio * E));
  const auto n_test = static_cast<std::int64_t>(std::llround(test_ratio * E));
  if (n_val + n_test >= E) throw ShapeError("val+test ratios leave no training edges");

  EdgeSplit split;
  split.seed = seed;
  split.val_pos.assign(shuffled.begin(), shuffled.begin() + n_val);
  split.test_pos.assign(shuffled.begin() + n_val, shuffled.begin() + n_val + n_test);
  split.train_pos.assign(shuffled.begin() + n_val + n_test, shuffled.end());

  std::unordered_set<std::int64_t> forbidden;
  forbidden.reserve(g.edges.size() * 2);
  for (auto [i, j] : g.edges) forbidden.insert(detail::edge_key(i, j, g.n));

  const std::int64_t total_pairs =
      static_cast<std::int64_t>(g.n) * (g.n - 1) / 2;
  const std::int64_t available = total_pairs - E;
  const std::int64_t needed = n_val + n_test;
  if (needed > available)
    throw ShapeError("requested " + std::to_string(needed) +
                     " negative edges but only " + std::to_string(available) +
                     " non-edges exist");

  std::vector<Edge> negs;
  negs.reserve(needed);
  if (available < 2 * needed) {
    // dense graph: enumerate non-edges and shuffle
    std::vector<Edge> pool;
    pool.reserve(available);
    for (int i = 0; i < g.n; ++i)
      for (int j = i + 1; j < g.n; ++j)
        if (!forbidden.count(detail::edge_key(i, j, g.n))) pool.emplace_back(i, j);
    std::shuffle(pool.begin(), pool.end(), rng);
    negs.assign(pool.begin(), pool.begin() + needed);
  } else {
    std::uniform_int_distribution<int> pick(0, g.n - 1);
    while (static_cast<std::int64_t>(negs.size()) < needed) {
      int i = pick(rng), j = pick(rng);
      if (i == j) continue;
      if (i > j) std::swap(i, j);
      auto key = detail::edge_key(i, j, g.n);
      if (forbidden.count(key)) continue;
      forbidden.insert(key);
      negs.emplace_back(i, j);
    }
  }
  split.val_neg.assign(negs.begin(), negs.begin() + n_val);
  split.test_neg.assign(negs.begin() + n_val, negs.end());
  return split;
}

}  // namespace dbgan
