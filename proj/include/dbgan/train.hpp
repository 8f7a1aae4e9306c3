#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dbgan/kde.hpp"
#include "dbgan/metrics.hpp"
#include "dbgan/nn.hpp"

namespace dbgan {

enum class FeatureLoss { bce, mse };

struct TrainConfig {
  double alpha = 1.0;      // reconstruction weight
  double lambda_gp = 1.0;  // gradient penalty coefficient
  double lr = 0.001;
  int epochs = 200;
  int critic_steps = 5;  // D_x updates per G update
  int q = 32;            // latent dimension
  int m = 500;           // prototype count
  std::uint64_t seed = 1;
  bool use_pde = true;
  bool use_bal = true;
  bool strict_gae = false;  // w/o-BAL variant without the feature term
  FeatureLoss feature_loss = FeatureLoss::bce;
  std::vector<int> enc_hidden{32};
  std::vector<int> gen_hidden{256, 512};
  std::vector<int> dz_hidden{64, 32};
  std::vector<int> dx_hidden{512, 256};
  int exact_threshold = 3000;
  int checkpoint_every = 0;  // 0 = only final

  void validate() const {
    if (alpha < 0 || lambda_gp < 0) throw ShapeError("alpha/lambda must be >= 0");
    if (lr <= 0) throw ShapeError("lr must be positive");
    if (epochs < 1) throw ShapeError("epochs must be >= 1");
    if (critic_steps < 1) throw ShapeError("critic_steps must be >= 1");
    if (q < 1 || m < 1) throw ShapeError("q and m must be positive");
  }
};

struct EpochRecord {
  int epoch = 0;
  double loss_dz = 0, loss_ea = 0, loss_dx = 0, loss_g = 0, loss_rec = 0;
  double val_auc = 0, val_ap = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  ModelParams params;       // final
  ModelParams best_params;  // highest validation AUC
  int best_epoch = -1;
  TrainHistory history;
};

//! Training produced a non-finite loss; carries the progress so far.
struct TrainingDiverged : std::runtime_error {
  int epoch;
  TrainHistory history;
  TrainingDiverged(int ep, TrainHistory h)
      : std::runtime_error("training diverged at epoch " + std::to_string(ep)),
        epoch(ep),
        history(std::move(h)) {}
};

// ---- losses ----

//! Per-row critic closure over fixed parameter vars.
struct Critic {
  std::vector<Var> weights, biases;
  Var operator()(const Var& input) const {
    return discriminator_forward(input, weights, biases);
  }
};

//! Two-sided WGAN-GP penalty at per-row random interpolates, differentiable
//! w.r.t. the critic parameters through the recorded input-gradient.
inline Var gradient_penalty(const Critic& critic, const Matrix& real,
                            const Matrix& fake, Rng& rng) {
  if (real.rows() != fake.rows() || real.cols() != fake.cols())
    throw ShapeError("gradient_penalty: real/fake shape mismatch");
  Matrix interp(real.rows(), real.cols());
  for (Eigen::Index i = 0; i < real.rows(); ++i) {
    double u = uniform01(rng);
    interp.row(i) = u * real.row(i) + (1.0 - u) * fake.row(i);
  }
  Var xhat = ad::variable(std::move(interp));
  Var total = ad::sum(critic(xhat));
  Var grad = ad::input_gradient(total, xhat);  // rows independent per node
  Var norms = ad::rowwise_l2_norm(grad);
  Var ones = ad::constant(Matrix::Ones(norms->rows(), 1));
  return ad::mean(ad::square(ad::sub(norms, ones)));
}

//! -E[D_z(Z)] + E[D_z(H)] + lambda * GP. H enters as a constant.
inline Var loss_dz(const Matrix& z, const Matrix& h, const Critic& d_z,
                   double lambda_gp, Rng& rng) {
  Var term = ad::sub(ad::mean(d_z(ad::constant(h))),
                     ad::mean(d_z(ad::constant(z))));
  if (lambda_gp == 0.0) return term;
  return ad::add(term, ad::scalar_mul(gradient_penalty(d_z, z, h, rng), lambda_gp));
}

//! -E[D_z(E(x))]; critic parameters frozen by the caller (constants).
inline Var loss_ea(const Var& h, const Critic& d_z_frozen) {
  return ad::neg(ad::mean(d_z_frozen(h)));
}

//! Mirror of loss_dz with the roles of P_r and P_z switched.
inline Var loss_dx(const Matrix& x_real, const Matrix& x_fake, const Critic& d_x,
                   double lambda_gp, Rng& rng) {
  Var term = ad::sub(ad::mean(d_x(ad::constant(x_fake))),
                     ad::mean(d_x(ad::constant(x_real))));
  if (lambda_gp == 0.0) return term;
  return ad::add(term,
                 ad::scalar_mul(gradient_penalty(d_x, x_real, x_fake, rng), lambda_gp));
}

inline Var loss_g(const Var& x_generated, const Critic& d_x_frozen) {
  return ad::neg(ad::mean(d_x_frozen(x_generated)));
}

//! Weighted BCE between sigmoid(H H^T) and the binary training adjacency
//! (self-loops positive), positive class weighted #neg/#pos, normalized by
//! total weight. Streams over row blocks; gradient w.r.t. H is precomputed,
//! so this term is first-order only.
inline Var adjacency_recon_bce(const Var& h, const SparseMatrix& target,
                               double clamp = 1e-7, int block = 512) {
  const auto n = h->rows();
  if (target.rows() != n || target.cols() != n)
    throw ShapeError("adjacency_recon_bce: target shape mismatch");
  double n2 = static_cast<double>(n) * static_cast<double>(n);
  double npos = static_cast<double>(target.nonZeros());
  double nneg = n2 - npos;
  double pos_weight = (npos > 0 && nneg > 0) ? nneg / npos : 1.0;
  double total_weight = pos_weight * npos + nneg;

  const Matrix& hv = h->value;
  Matrix grad = Matrix::Zero(n, h->cols());
  double loss = 0.0;
  for (Eigen::Index r0 = 0; r0 < n; r0 += block) {
    Eigen::Index rows = std::min<Eigen::Index>(block, n - r0);
    Matrix t = Matrix::Zero(rows, n);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (SparseMatrix::InnerIterator it(target, r0 + r); it; ++it)
        t(r, it.row()) = 1.0;  // symmetric target, column view is fine
    Eigen::ArrayXXd s = (hv.middleRows(r0, rows) * hv.transpose()).array();
    Eigen::ArrayXXd p = (1.0 / (1.0 + (-s).exp())).max(clamp).min(1.0 - clamp);
    Eigen::ArrayXXd w = t.array() * (pos_weight - 1.0) + 1.0;
    loss -= (w * (t.array() * p.log() + (1.0 - t.array()) * (1.0 - p).log())).sum();
    Matrix g_block = (w * (p - t.array()) / total_weight).matrix();
    grad.middleRows(r0, rows) += g_block * hv;
    grad += g_block.transpose() * hv.middleRows(r0, rows);
  }
  loss /= total_weight;
  Matrix v(1, 1);
  v(0, 0) = loss;
  return ad::detail::make_op(
      std::move(v), {h},
      [grad = std::move(grad)](const Var&, const Var& g) -> std::vector<Var> {
        return {ad::mul(ad::broadcast_full(g, grad.rows(), grad.cols()),
                        ad::constant(grad))};
      });
}

inline Var feature_recon_loss(const Var& x_rec, const Matrix& x,
                              FeatureLoss kind) {
  if (kind == FeatureLoss::bce) {
    if ((x.array() < 0.0).any() || (x.array() > 1.0).any())
      throw DomainError("bce feature loss requires features in [0,1]");
    return ad::bce_mean(x_rec, x);
  }
  return ad::mean(ad::square(ad::sub(x_rec, ad::constant(x))));
}

//! Feature BCE (negated log-likelihood) plus weighted adjacency BCE.
inline Var reconstruction_loss(const Var& x_rec, const Matrix& x, const Var& h,
                               const SparseMatrix& a_target, FeatureLoss kind) {
  return ad::add(feature_recon_loss(x_rec, x, kind),
                 adjacency_recon_bce(h, a_target));
}

inline Var loss_encoder_total(const Var& adversarial, const Var& rec, double alpha) {
  return ad::add(adversarial, ad::scalar_mul(rec, alpha));
}

// ---- training loop ----

namespace detail {

inline std::vector<int> stack_dims(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

inline SparseMatrix binary_adjacency_with_self_loops(int n,
                                                     const std::vector<Edge>& edges) {
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(edges.size() * 2 + n);
  for (auto [i, j] : edges) {
    trips.emplace_back(i, j, 1.0);
    trips.emplace_back(j, i, 1.0);
  }
  for (int i = 0; i < n; ++i) trips.emplace_back(i, i, 1.0);
  SparseMatrix a(n, n);
  a.setFromTriplets(trips.begin(), trips.end(),
                    [](double, double) { return 1.0; });
  a.makeCompressed();
  return a;
}

//! Column min-max into [0,1]; identity when already in range.
inline Matrix normalize_features_01(const Matrix& x) {
  if ((x.array() >= 0.0).all() && (x.array() <= 1.0).all()) return x;
  Matrix out = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    double lo = x.col(c).minCoeff(), hi = x.col(c).maxCoeff();
    if (hi > lo)
      out.col(c) = (x.col(c).array() - lo) / (hi - lo);
    else
      out.col(c).setZero();
  }
  return out;
}

struct Group {
  std::vector<Matrix>* weights = nullptr;
  std::vector<Matrix>* biases = nullptr;  // null for GCN stacks
  AdamState adam;

  std::vector<Matrix*> param_ptrs() {
    std::vector<Matrix*> ps;
    for (auto& w : *weights) ps.push_back(&w);
    if (biases)
      for (auto& b : *biases) ps.push_back(&b);
    return ps;
  }
};

inline void apply_grads(Group& group, const std::vector<Var>& vars,
                        const std::unordered_map<const ad::Node*, Matrix>& grads,
                        double lr) {
  auto params = group.param_ptrs();
  std::vector<Matrix> gm(params.size());
  std::vector<const Matrix*> gp(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = grads.find(vars[i].get());
    gm[i] = it != grads.end() ? it->second
                              : Matrix::Zero(params[i]->rows(), params[i]->cols());
    gp[i] = &gm[i];
  }
  adam_step(params, gp, group.adam, lr);
}

inline std::vector<Var> group_vars(const Group& g) {
  std::vector<Var> vs;
  for (const auto& w : *g.weights) vs.push_back(ad::variable(w));
  if (g.biases)
    for (const auto& b : *g.biases) vs.push_back(ad::variable(b));
  return vs;
}

inline Critic critic_from_vars(const std::vector<Var>& vars, std::size_t layers) {
  Critic c;
  c.weights.assign(vars.begin(), vars.begin() + layers);
  c.biases.assign(vars.begin() + layers, vars.end());
  return c;
}

inline Critic critic_constant(const MlpParams& p) {
  Critic c;
  c.weights = as_constants(p.weights);
  c.biases = as_constants(p.biases);
  return c;
}

}  // namespace detail

inline ModelParams init_model(const TrainConfig& cfg, int feature_dim, Rng& rng) {
  ModelParams p;
  p.encoder = init_gcn_stack(detail::stack_dims(feature_dim, cfg.enc_hidden, cfg.q), rng);
  p.generator = init_gcn_stack(detail::stack_dims(cfg.q, cfg.gen_hidden, feature_dim), rng);
  p.d_z = init_mlp(detail::stack_dims(cfg.q, cfg.dz_hidden, 1), rng);
  p.d_x = init_mlp(detail::stack_dims(feature_dim, cfg.dx_hidden, 1), rng);
  return p;
}

using EpochCallback = std::function<void(const EpochRecord&, ModelParams&)>;

//! Full training loop. Per epoch: critic_steps D_x updates, one G update,
//! one D_z update, one encoder update (generator shares the reconstruction
//! gradient). Ablations: use_bal=false drops the adversarial steps,
//! strict_gae additionally drops the generator/feature path; use_pde=false
//! replaces the estimated prior with N(0,1).
inline TrainResult train(const Graph& g, const EdgeSplit& split,
                         const TrainConfig& cfg,
                         const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  Rng rng(cfg.seed);

  Matrix x = cfg.feature_loss == FeatureLoss::bce
                 ? detail::normalize_features_01(g.features)
                 : g.features;
  const int n = g.n;
  const int d = static_cast<int>(x.cols());

  auto adj_train = normalize_adjacency(n, split.train_pos, /*self_loops=*/true);
  auto adj = std::make_shared<const SparseMatrix>(adj_train.mat);
  SparseMatrix a_target =
      detail::binary_adjacency_with_self_loops(n, split.train_pos);

  // prior is fixed before training: prototypes depend only on A and X
  Graph train_view;
  train_view.n = n;
  train_view.edges = split.train_pos;
  std::sort(train_view.edges.begin(), train_view.edges.end());
  train_view.features = x;
  int m_eff = std::min(cfg.m, n);  // prototype count cannot exceed nodes
  PriorEstimate prior_est =
      cfg.use_pde
          ? estimate_prior(train_view, cfg.q, m_eff, rng(), PriorMode::pde,
                           BandwidthRule::scott(), cfg.exact_threshold)
          : PriorEstimate{Prior::standard_normal(cfg.q), {}};
  const Prior& prior = prior_est.prior;

  ModelParams params = init_model(cfg, d, rng);
  detail::Group enc{&params.encoder, nullptr, {}};
  detail::Group gen{&params.generator, nullptr, {}};
  detail::Group dz{&params.d_z.weights, &params.d_z.biases, {}};
  detail::Group dx{&params.d_x.weights, &params.d_x.biases, {}};
  for (auto* grp : {&enc, &gen, &dz, &dx}) grp->adam = init_adam(grp->param_ptrs());

  TrainResult result;
  double best_auc = -1.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;

    if (cfg.use_bal) {
      // (1) D_x critic steps
      for (int s = 0; s < cfg.critic_steps; ++s) {
        Matrix z = prior.sample(n, rng());
        Matrix x_fake;
        {
          Var xf = generator_forward(ad::constant(z), adj,
                                     as_constants(params.generator));
          x_fake = xf->value;
        }
        auto dx_vars = detail::group_vars(dx);
        Critic critic = detail::critic_from_vars(dx_vars, params.d_x.weights.size());
        Var loss = loss_dx(x, x_fake, critic, cfg.lambda_gp, rng);
        rec.loss_dx = loss->value(0, 0);
        detail::apply_grads(dx, dx_vars, ad::backward(loss), cfg.lr);
      }

      // (2) generator step
      {
        Matrix z = prior.sample(n, rng());
        auto gen_vars = detail::group_vars(gen);
        Var xf = generator_forward(ad::constant(z), adj, gen_vars);
        Var loss = loss_g(xf, detail::critic_constant(params.d_x));
        rec.loss_g = loss->value(0, 0);
        detail::apply_grads(gen, gen_vars, ad::backward(loss), cfg.lr);
      }

      // (3) D_z step
      {
        Matrix z = prior.sample(n, rng());
        Matrix h;
        {
          Var hv = encoder_forward(ad::constant(x), adj,
                                   as_constants(params.encoder));
          h = hv->value;
        }
        auto dz_vars = detail::group_vars(dz);
        Critic critic = detail::critic_from_vars(dz_vars, params.d_z.weights.size());
        Var loss = loss_dz(z, h, critic, cfg.lambda_gp, rng);
        rec.loss_dz = loss->value(0, 0);
        detail::apply_grads(dz, dz_vars, ad::backward(loss), cfg.lr);
      }
    }

    // (4) encoder step (and generator through the reconstruction term)
    {
      auto enc_vars = detail::group_vars(enc);
      Var h = encoder_forward(ad::constant(x), adj, enc_vars);
      Var total;
      std::vector<Var> gen_vars;
      if (cfg.strict_gae && !cfg.use_bal) {
        total = adjacency_recon_bce(h, a_target);
        rec.loss_rec = total->value(0, 0);
      } else {
        gen_vars = detail::group_vars(gen);
        Var x_rec = generator_forward(h, adj, gen_vars);
        Var l_rec = reconstruction_loss(x_rec, x, h, a_target, cfg.feature_loss);
        rec.loss_rec = l_rec->value(0, 0);
        if (cfg.use_bal) {
          Var l_ea = loss_ea(h, detail::critic_constant(params.d_z));
          rec.loss_ea = l_ea->value(0, 0);
          total = loss_encoder_total(l_ea, l_rec, cfg.alpha);
        } else {
          total = l_rec;
        }
      }
      auto grads = ad::backward(total);
      detail::apply_grads(enc, enc_vars, grads, cfg.lr);
      if (!gen_vars.empty()) detail::apply_grads(gen, gen_vars, grads, cfg.lr);
    }

    bool losses_finite = std::isfinite(rec.loss_dz) && std::isfinite(rec.loss_ea) &&
                         std::isfinite(rec.loss_dx) && std::isfinite(rec.loss_g) &&
                         std::isfinite(rec.loss_rec);
    if (!losses_finite) {
      result.history.epochs.push_back(rec);
      throw TrainingDiverged(epoch, result.history);
    }

    Matrix h_eval = encode_embeddings(params, x, adj_train);
    if (!h_eval.allFinite()) {
      result.history.epochs.push_back(rec);
      throw TrainingDiverged(epoch, result.history);
    }
    auto val = link_prediction(h_eval, split, /*use_test=*/false);
    rec.val_auc = val.auc;
    rec.val_ap = val.ap;
    result.history.epochs.push_back(rec);
    if (!std::isfinite(rec.val_auc)) throw TrainingDiverged(epoch, result.history);

    if (rec.val_auc > best_auc) {
      best_auc = rec.val_auc;
      result.best_params = params;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec, params);
  }
  result.params = params;
  if (result.best_epoch < 0) {
    result.best_params = result.params;
    result.best_epoch = cfg.epochs - 1;
  }
  return result;
}

// ---- config file (flat key=value) ----

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    dbgan::detail::strip_cr(line);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t");
      auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw IoError("bad boolean value: " + v);
}

//! Apply key=value overrides; unknown keys are rejected. Returns the set of
//! keys that are not TrainConfig fields (dataset paths, output dir) untouched.
inline std::map<std::string, std::string> apply_config(
    TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
  std::map<std::string, std::string> rest;
  for (const auto& [k, v] : kv) {
    if (k == "alpha") cfg.alpha = std::stod(v);
    else if (k == "lambda_gp" || k == "lambda") cfg.lambda_gp = std::stod(v);
    else if (k == "lr") cfg.lr = std::stod(v);
    else if (k == "epochs") cfg.epochs = std::stoi(v);
    else if (k == "critic_steps") cfg.critic_steps = std::stoi(v);
    else if (k == "q") cfg.q = std::stoi(v);
    else if (k == "m") cfg.m = std::stoi(v);
    else if (k == "seed") cfg.seed = std::stoull(v);
    else if (k == "use_pde") cfg.use_pde = parse_bool(v);
    else if (k == "use_bal") cfg.use_bal = parse_bool(v);
    else if (k == "strict_gae") cfg.strict_gae = parse_bool(v);
    else if (k == "feature_loss") {
      if (v == "bce") cfg.feature_loss = FeatureLoss::bce;
      else if (v == "mse") cfg.feature_loss = FeatureLoss::mse;
      else throw IoError("feature_loss must be bce or mse");
    }
    else if (k == "enc_hidden") cfg.enc_hidden = parse_int_list(v);
    else if (k == "gen_hidden") cfg.gen_hidden = parse_int_list(v);
    else if (k == "dz_hidden") cfg.dz_hidden = parse_int_list(v);
    else if (k == "dx_hidden") cfg.dx_hidden = parse_int_list(v);
    else if (k == "exact_threshold") cfg.exact_threshold = std::stoi(v);
    else if (k == "checkpoint_every") cfg.checkpoint_every = std::stoi(v);
    else rest[k] = v;
  }
  return rest;
}

inline void write_history_csv(const std::string& path, const TrainHistory& h) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write history: " + path);
  f << "epoch,loss_dz,loss_ea,loss_dx,loss_g,loss_rec,val_auc,val_ap\n";
  f.precision(10);
  for (const auto& r : h.epochs)
    f << r.epoch << ',' << r.loss_dz << ',' << r.loss_ea << ',' << r.loss_dx
      << ',' << r.loss_g << ',' << r.loss_rec << ',' << r.val_auc << ','
      << r.val_ap << '\n';
}

}  // namespace dbgan
