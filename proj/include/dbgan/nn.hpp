#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dbgan/graph.hpp"
#include "dbgan/tensor.hpp"

namespace dbgan {

using ad::Var;

enum class Activation { relu, linear, sigmoid };

//! Per-node MLP: relu hidden layers, linear scalar output (Wasserstein critic).
struct MlpParams {
  std::vector<Matrix> weights;  // in x out
  std::vector<Matrix> biases;   // 1 x out
};

//! Weights for E, G, D_z, D_x. GCN layers carry no bias.
struct ModelParams {
  std::vector<Matrix> encoder;    // GCN weight per layer
  std::vector<Matrix> generator;  // GCN weight per layer
  MlpParams d_z;
  MlpParams d_x;

  int latent_dim() const {
    return encoder.empty() ? 0 : static_cast<int>(encoder.back().cols());
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    int i = 0;
    for (auto& w : encoder) fn("encoder.W" + std::to_string(i++), w);
    i = 0;
    for (auto& w : generator) fn("generator.W" + std::to_string(i++), w);
    for (std::size_t l = 0; l < d_z.weights.size(); ++l) {
      fn("d_z.W" + std::to_string(l), d_z.weights[l]);
      fn("d_z.b" + std::to_string(l), d_z.biases[l]);
    }
    for (std::size_t l = 0; l < d_x.weights.size(); ++l) {
      fn("d_x.W" + std::to_string(l), d_x.weights[l]);
      fn("d_x.b" + std::to_string(l), d_x.biases[l]);
    }
  }
};

//! Uniform in +-sqrt(6/(fan_in+fan_out)).
inline Matrix glorot_init(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  if (rows <= 0 || cols <= 0) throw ShapeError("glorot_init: positive dims required");
  double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix w(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = dist(rng);
  return w;
}

//! dims = {in, hidden..., out}; weights only.
inline std::vector<Matrix> init_gcn_stack(const std::vector<int>& dims, Rng& rng) {
  std::vector<Matrix> ws;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    ws.push_back(glorot_init(dims[i], dims[i + 1], rng()));
  return ws;
}

inline MlpParams init_mlp(const std::vector<int>& dims, Rng& rng) {
  MlpParams p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    p.weights.push_back(glorot_init(dims[i], dims[i + 1], rng()));
    p.biases.push_back(Matrix::Zero(1, dims[i + 1]));
  }
  return p;
}

inline Var apply_activation(const Var& v, Activation act) {
  switch (act) {
    case Activation::relu: return ad::relu(v);
    case Activation::sigmoid: return ad::sigmoid(v);
    case Activation::linear: return v;
  }
  throw ShapeError("unknown activation");
}

//! activation(A_hat * H * W), sparse-dense product first.
inline Var gcn_layer(const std::shared_ptr<const SparseMatrix>& adj, const Var& h,
                     const Var& w, Activation act) {
  return apply_activation(ad::matmul(ad::spmm(adj, h), w), act);
}

//! Stacked GCN, relu hidden, given output activation.
inline Var gcn_forward(const Var& x, const std::shared_ptr<const SparseMatrix>& adj,
                       const std::vector<Var>& weights, Activation out_act) {
  Var h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    bool last = (i + 1 == weights.size());
    h = gcn_layer(adj, h, weights[i], last ? out_act : Activation::relu);
  }
  return h;
}

inline Var encoder_forward(const Var& x, const std::shared_ptr<const SparseMatrix>& adj,
                           const std::vector<Var>& weights) {
  return gcn_forward(x, adj, weights, Activation::linear);
}

//! Generator ends in sigmoid: features modeled in [0,1].
inline Var generator_forward(const Var& z, const std::shared_ptr<const SparseMatrix>& adj,
                             const std::vector<Var>& weights) {
  return gcn_forward(z, adj, weights, Activation::sigmoid);
}

//! Per-row critic score, no output nonlinearity.
inline Var discriminator_forward(const Var& input, const std::vector<Var>& weights,
                                 const std::vector<Var>& biases) {
  if (weights.size() != biases.size())
    throw ShapeError("discriminator: weight/bias count mismatch");
  Var h = input;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = ad::add(ad::matmul(h, weights[i]),
                ad::broadcast_rows(biases[i], h->rows()));
    if (i + 1 < weights.size()) h = ad::relu(h);
  }
  if (h->cols() != 1) throw ShapeError("discriminator output must be n x 1");
  return h;
}

// ---- Adam ----

struct AdamState {
  std::vector<Matrix> m, v;
  std::int64_t t = 0;
};

inline AdamState init_adam(const std::vector<Matrix*>& params) {
  AdamState s;
  for (auto* p : params) {
    s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

//! Bias-corrected Adam, eps = 1e-8. Null gradients leave the parameter
//! untouched apart from moment decay.
inline void adam_step(const std::vector<Matrix*>& params,
                      const std::vector<const Matrix*>& grads, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: param/grad/state count mismatch");
  state.t += 1;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = *grads[i];
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i].array().matrix() +
                 (1.0 - beta2) * g.cwiseProduct(g);
    Matrix mhat = state.m[i] / bc1;
    Matrix vhat = state.v[i] / bc2;
    params[i]->array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
  }
}

// ---- checkpoint io ----
// Flat binary layout: magic "DBGANCK1", u32 entry count, then per entry
// u32 name length, name bytes, u64 rows, u64 cols, rows*cols little-endian f64.

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write("DBGANCK1", 8);
  std::uint32_t count = 0;
  params.for_each([&](const std::string&, Matrix&) { ++count; });
  detail::write_pod(os, count);
  params.for_each([&](const std::string& name, Matrix& m) {
    detail::write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<std::uint64_t>(m.rows()));
    detail::write_pod(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::write_pod(os, m(i, j));
  });
  if (!os) throw IoError("checkpoint write failed: " + path);
}

inline std::vector<std::pair<std::string, Matrix>> load_checkpoint_raw(
    const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "DBGANCK1", 8) != 0)
    throw IoError("bad checkpoint header: " + path);
  auto count = detail::read_pod<std::uint32_t>(is);
  std::vector<std::pair<std::string, Matrix>> entries;
  for (std::uint32_t e = 0; e < count; ++e) {
    auto len = detail::read_pod<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    auto rows = detail::read_pod<std::uint64_t>(is);
    auto cols = detail::read_pod<std::uint64_t>(is);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        m(i, j) = detail::read_pod<double>(is);
    entries.emplace_back(std::move(name), std::move(m));
  }
  return entries;
}

//! Rebuild ModelParams from a checkpoint written by save_checkpoint.
inline ModelParams load_checkpoint(const std::string& path) {
  auto entries = load_checkpoint_raw(path);
  ModelParams p;
  for (auto& [name, m] : entries) {
    auto dot = name.find('.');
    if (dot == std::string::npos) throw IoError("bad entry name: " + name);
    std::string group = name.substr(0, dot);
    char kind = name[dot + 1];
    if (group == "encoder") p.encoder.push_back(std::move(m));
    else if (group == "generator") p.generator.push_back(std::move(m));
    else if (group == "d_z" && kind == 'W') p.d_z.weights.push_back(std::move(m));
    else if (group == "d_z" && kind == 'b') p.d_z.biases.push_back(std::move(m));
    else if (group == "d_x" && kind == 'W') p.d_x.weights.push_back(std::move(m));
    else if (group == "d_x" && kind == 'b') p.d_x.biases.push_back(std::move(m));
    else throw IoError("unknown checkpoint entry: " + name);
  }
  return p;
}

// helpers for hooking parameter matrices into a differentiation graph
inline std::vector<Var> as_variables(const std::vector<Matrix>& ms) {
  std::vector<Var> vs;
  vs.reserve(ms.size());
  for (const auto& m : ms) vs.push_back(ad::variable(m));
  return vs;
}

inline std::vector<Var> as_constants(const std::vector<Matrix>& ms) {
  std::vector<Var> vs;
  vs.reserve(ms.size());
  for (const auto& m : ms) vs.push_back(ad::constant(m));
  return vs;
}

}  // namespace dbgan
