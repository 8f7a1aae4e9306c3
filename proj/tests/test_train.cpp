#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dbgan/train.hpp"

using namespace dbgan;

namespace {

//! Two-block stochastic graph with block-indicating features in [0,1].
Graph sbm_graph(int n, double p_in, double p_out, std::uint64_t seed, int d = 6) {
  Graph g;
  g.n = n;
  Rng rng(seed);
  auto block = [&](int i) { return i < n / 2 ? 0 : 1; };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double p = block(i) == block(j) ? p_in : p_out;
      if (uniform01(rng) < p) g.edges.emplace_back(i, j);
    }
  g.features = Matrix(n, d);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      bool on = (c < d / 2) == (block(i) == 0);
      g.features(i, c) = on ? 0.7 + 0.3 * uniform01(rng) : 0.3 * uniform01(rng);
    }
  g.labels = std::vector<int>(n);
  for (int i = 0; i < n; ++i) (*g.labels)[i] = block(i);
  return g;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.q = 4;
  cfg.m = 12;
  cfg.enc_hidden = {8};
  cfg.gen_hidden = {8};
  cfg.dz_hidden = {8};
  cfg.dx_hidden = {8};
  cfg.epochs = 20;
  cfg.critic_steps = 2;
  cfg.lr = 0.01;
  cfg.seed = 3;
  return cfg;
}

Critic linear_critic(const Matrix& w) {
  Critic c;
  c.weights = {ad::constant(w)};
  c.biases = {ad::constant(Matrix::Zero(1, 1))};
  return c;
}

//! Dense reference for the weighted adjacency cross entropy.
double dense_adj_bce(const Matrix& h, const SparseMatrix& target,
                     double clamp = 1e-7) {
  int n = static_cast<int>(h.rows());
  Matrix t = Matrix(target);
  double npos = t.sum(), nneg = n * n - npos;
  double pw = npos > 0 ? nneg / npos : 1.0;
  Matrix s = h * h.transpose();
  double loss = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double p = 1.0 / (1.0 + std::exp(-s(i, j)));
      p = std::min(std::max(p, clamp), 1.0 - clamp);
      double w = t(i, j) > 0 ? pw : 1.0;
      loss -= w * (t(i, j) * std::log(p) + (1 - t(i, j)) * std::log(1 - p));
    }
  return loss / (pw * npos + nneg);
}

}  // namespace

TEST_CASE("gradient penalty of a linear critic depends only on the weight norm") {
  Rng rng(1);
  Matrix real = Matrix::Random(6, 3), fake = Matrix::Random(6, 3);

  // unit-norm weight: gradient norm is exactly 1 everywhere, penalty 0
  Matrix w = Matrix::Zero(3, 1);
  w(0, 0) = 1.0;
  Var p0 = gradient_penalty(linear_critic(w), real, fake, rng);
  CHECK(p0->value(0, 0) == Catch::Approx(0.0).margin(1e-12));

  // norm 3: penalty (3 - 1)^2 = 4 at every interpolate
  Var p4 = gradient_penalty(linear_critic(3.0 * w), real, fake, rng);
  CHECK(p4->value(0, 0) == Catch::Approx(4.0));

  CHECK_THROWS_AS(
      gradient_penalty(linear_critic(w), real, Matrix::Random(5, 3), rng),
      ShapeError);
}

TEST_CASE("loss_dz on a zero critic is exactly lambda") {
  Rng rng(2);
  Matrix z = Matrix::Random(5, 2), h = Matrix::Random(5, 2);
  Critic zero = linear_critic(Matrix::Zero(2, 1));
  // both expectations vanish; gradient norm 0 gives penalty (0-1)^2 = 1
  CHECK(loss_dz(z, h, zero, 2.0, rng)->value(0, 0) == Catch::Approx(2.0));
  CHECK(loss_dz(z, h, zero, 0.0, rng)->value(0, 0) == Catch::Approx(0.0));
}

TEST_CASE("loss_dz separates the two expectations") {
  Rng rng(3);
  Matrix z = Matrix::Constant(4, 1, 2.0), h = Matrix::Constant(4, 1, 5.0);
  Matrix w = Matrix::Ones(1, 1);
  // E[D(h)] - E[D(z)] = 5 - 2 with lambda 0
  CHECK(loss_dz(z, h, linear_critic(w), 0.0, rng)->value(0, 0) ==
        Catch::Approx(3.0));
}

TEST_CASE("loss_ea value and encoder gradient") {
  Matrix w(2, 1);
  w << 1.0, -2.0;
  Matrix hm(3, 2);
  hm << 1, 0, 0, 1, 2, 2;
  Var h = ad::variable(hm);
  Var l = loss_ea(h, linear_critic(w));
  // scores: 1, -2, -2; loss = -mean = 1
  CHECK(l->value(0, 0) == Catch::Approx(1.0));
  auto grads = ad::backward(l);
  Matrix gh = grads.at(h.get());
  // d/dh of -(1/3) sum h w = -(1/3) 1 w^T
  for (int i = 0; i < 3; ++i) {
    CHECK(gh(i, 0) == Catch::Approx(-1.0 / 3));
    CHECK(gh(i, 1) == Catch::Approx(2.0 / 3));
  }
}

TEST_CASE("loss_dx and loss_g on a fixed linear critic") {
  Rng rng(4);
  Matrix w = Matrix::Ones(2, 1);
  Matrix x_real = Matrix::Constant(4, 2, 1.0);  // score 2 per row
  Matrix x_fake = Matrix::Constant(4, 2, 0.25);  // score 0.5 per row
  CHECK(loss_dx(x_real, x_fake, linear_critic(w), 0.0, rng)->value(0, 0) ==
        Catch::Approx(0.5 - 2.0));
  CHECK(loss_g(ad::constant(x_fake), linear_critic(w))->value(0, 0) ==
        Catch::Approx(-0.5));
}

TEST_CASE("adjacency reconstruction at h = 0 is ln 2") {
  SparseMatrix target =
      detail::binary_adjacency_with_self_loops(4, {{0, 1}, {2, 3}});
  Var h = ad::constant(Matrix::Zero(4, 3));
  CHECK(adjacency_recon_bce(h, target)->value(0, 0) ==
        Catch::Approx(std::log(2.0)));
}

TEST_CASE("adjacency reconstruction matches the dense reference") {
  Rng rng(5);
  SparseMatrix target =
      detail::binary_adjacency_with_self_loops(6, {{0, 1}, {1, 2}, {3, 4}, {4, 5}});
  Matrix hm(6, 3);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j) hm(i, j) = normal01(rng);
  Var h = ad::constant(hm);
  CHECK(adjacency_recon_bce(h, target)->value(0, 0) ==
        Catch::Approx(dense_adj_bce(hm, target)).epsilon(1e-12));

  // streaming block size must not change the result
  CHECK(adjacency_recon_bce(h, target, 1e-7, 2)->value(0, 0) ==
        Catch::Approx(adjacency_recon_bce(h, target, 1e-7, 512)->value(0, 0)));

  CHECK_THROWS_AS(
      adjacency_recon_bce(ad::constant(Matrix::Zero(5, 3)), target), ShapeError);
}

TEST_CASE("adjacency reconstruction gradient agrees with finite differences") {
  Rng rng(6);
  SparseMatrix target =
      detail::binary_adjacency_with_self_loops(5, {{0, 1}, {1, 2}, {2, 3}, {3, 4}});
  Matrix hm(5, 2);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 2; ++j) hm(i, j) = 0.5 * normal01(rng);
  Var h = ad::variable(hm);
  auto grads = ad::backward(adjacency_recon_bce(h, target));
  Matrix gh = grads.at(h.get());

  double step = 1e-6;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 2; ++j) {
      Matrix hp = hm, hmn = hm;
      hp(i, j) += step;
      hmn(i, j) -= step;
      double fd = (dense_adj_bce(hp, target) - dense_adj_bce(hmn, target)) /
                  (2 * step);
      CHECK(gh(i, j) == Catch::Approx(fd).epsilon(1e-5).margin(1e-9));
    }
}

TEST_CASE("feature reconstruction losses") {
  Matrix x(2, 2);
  x << 0, 1, 1, 0;
  // exact reconstruction: only the clamp keeps the value positive
  CHECK(feature_recon_loss(ad::constant(x), x, FeatureLoss::bce)->value(0, 0) <
        1e-5);
  // indifferent reconstruction at 0.5 costs ln 2
  CHECK(feature_recon_loss(ad::constant(Matrix::Constant(2, 2, 0.5)), x,
                           FeatureLoss::bce)
            ->value(0, 0) == Catch::Approx(std::log(2.0)));
  Matrix bad(1, 1);
  bad << 1.5;
  CHECK_THROWS_AS(
      feature_recon_loss(ad::constant(Matrix::Zero(1, 1)), bad, FeatureLoss::bce),
      DomainError);
  // mse
  Matrix rec(2, 2);
  rec << 0.5, 1, 1, 0;
  CHECK(feature_recon_loss(ad::constant(rec), x, FeatureLoss::mse)->value(0, 0) ==
        Catch::Approx(0.25 / 4));
}

TEST_CASE("combined reconstruction and encoder total") {
  SparseMatrix target = detail::binary_adjacency_with_self_loops(3, {{0, 1}});
  Matrix x = Matrix::Constant(3, 2, 0.5);
  Var h = ad::constant(Matrix::Zero(3, 2));
  Var x_rec = ad::constant(Matrix::Constant(3, 2, 0.5));
  Var rec = reconstruction_loss(x_rec, x, h, target, FeatureLoss::bce);
  CHECK(rec->value(0, 0) == Catch::Approx(2.0 * std::log(2.0)));

  Var adv = ad::constant(Matrix::Constant(1, 1, 0.3));
  CHECK(loss_encoder_total(adv, rec, 2.0)->value(0, 0) ==
        Catch::Approx(0.3 + 4.0 * std::log(2.0)));
}

TEST_CASE("config validation rejects bad values") {
  TrainConfig cfg;
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = TrainConfig{};
  cfg.alpha = -1;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  cfg = TrainConfig{};
  cfg.critic_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeError);
  TrainConfig{}.validate();
}

TEST_CASE("one epoch produces one record with finite losses") {
  Graph g = sbm_graph(40, 0.3, 0.02, 7);
  auto split = split_edges(g, 0.85, 0.05, 0.10, 7);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  int callbacks = 0;
  auto res = train(g, split, cfg, [&](const EpochRecord& r, ModelParams&) {
    ++callbacks;
    CHECK(r.epoch == 0);
  });
  CHECK(callbacks == 1);
  REQUIRE(res.history.epochs.size() == 1);
  const auto& r = res.history.epochs[0];
  CHECK(std::isfinite(r.loss_dz));
  CHECK(std::isfinite(r.loss_dx));
  CHECK(std::isfinite(r.loss_g));
  CHECK(std::isfinite(r.loss_ea));
  CHECK(std::isfinite(r.loss_rec));
  CHECK(r.val_auc >= 0.0);
  CHECK(r.val_auc <= 1.0);
  CHECK(res.best_epoch == 0);
}

TEST_CASE("training is deterministic per seed") {
  Graph g = sbm_graph(40, 0.3, 0.02, 9);
  auto split = split_edges(g, 0.85, 0.05, 0.10, 9);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  auto a = train(g, split, cfg);
  auto b = train(g, split, cfg);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
    CHECK(a.history.epochs[i].loss_rec == b.history.epochs[i].loss_rec);
    CHECK(a.history.epochs[i].val_auc == b.history.epochs[i].val_auc);
  }
  std::vector<std::pair<std::string, Matrix>> pa, pb;
  a.params.for_each([&](const std::string& nm, Matrix& m) { pa.emplace_back(nm, m); });
  b.params.for_each([&](const std::string& nm, Matrix& m) { pb.emplace_back(nm, m); });
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK((pa[i].second - pb[i].second).cwiseAbs().maxCoeff() == 0.0);
  }

  cfg.seed = 99;
  auto c = train(g, split, cfg);
  CHECK(c.history.epochs.back().loss_rec != a.history.epochs.back().loss_rec);
}

TEST_CASE("training on a two-community graph learns the structure") {
  Graph g = sbm_graph(60, 0.3, 0.015, 11);
  auto split = split_edges(g, 0.85, 0.05, 0.10, 11);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 25;
  auto res = train(g, split, cfg);

  // pure autoencoder run: reconstruction must improve monotonically enough
  TrainConfig gae = cfg;
  gae.use_bal = false;
  auto res_gae = train(g, split, gae);
  CHECK(res_gae.history.epochs.back().loss_rec <
        res_gae.history.epochs.front().loss_rec);

  double best_auc = 0;
  for (const auto& r : res.history.epochs) best_auc = std::max(best_auc, r.val_auc);
  CHECK(best_auc > 0.7);

  // test-set evaluation with the best parameters
  Matrix x = detail::normalize_features_01(g.features);
  auto adj = normalize_adjacency(g.n, split.train_pos, true);
  Matrix h = encode_embeddings(res.best_params, x, adj);
  auto lp = link_prediction(h, split, true);
  CHECK(lp.auc > 0.6);
  auto cl = node_clustering(h, *g.labels, 2, 5);
  CHECK(cl.acc >= 0.5);
}

TEST_CASE("ablations switch off the corresponding steps") {
  Graph g = sbm_graph(40, 0.3, 0.02, 13);
  auto split = split_edges(g, 0.85, 0.05, 0.10, 13);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 2;

  cfg.use_bal = false;
  auto gae = train(g, split, cfg);
  for (const auto& r : gae.history.epochs) {
    CHECK(r.loss_dz == 0.0);
    CHECK(r.loss_dx == 0.0);
    CHECK(r.loss_g == 0.0);
    CHECK(r.loss_ea == 0.0);
    CHECK(r.loss_rec > 0.0);
  }

  cfg.strict_gae = true;
  auto strict = train(g, split, cfg);
  // only the adjacency term remains; h = 0 at init would give ln 2
  for (const auto& r : strict.history.epochs) CHECK(r.loss_rec < 2.0);

  cfg = tiny_config();
  cfg.epochs = 2;
  cfg.use_pde = false;
  auto no_pde = train(g, split, cfg);
  CHECK(no_pde.history.epochs.size() == 2);
}

TEST_CASE("divergence raises with the history so far") {
  Graph g = sbm_graph(40, 0.3, 0.02, 17);
  auto split = split_edges(g, 0.85, 0.05, 0.10, 17);
  TrainConfig cfg = tiny_config();
  cfg.epochs = 5;
  cfg.lr = 1e150;
  try {
    train(g, split, cfg);
    FAIL("expected TrainingDiverged");
  } catch (const TrainingDiverged& e) {
    CHECK(e.epoch >= 0);
    CHECK(e.history.epochs.size() == static_cast<std::size_t>(e.epoch) + 1);
  }
}

TEST_CASE("config file parsing") {
  namespace fs = std::filesystem;
  auto path = fs::temp_directory_path() / "dbgan_cfg_test.cfg";
  {
    std::ofstream f(path);
    f << "# comment\n";
    f << "lr = 0.005\r\n";
    f << "epochs=7\n";
    f << "enc_hidden = 16,8\n";
    f << "use_pde = false\n";
    f << "feature_loss = mse\n";
    f << "edges = /tmp/e.txt\n";
  }
  auto kv = parse_config_file(path.string());
  TrainConfig cfg;
  auto rest = apply_config(cfg, kv);
  fs::remove(path);
  CHECK(cfg.lr == Catch::Approx(0.005));
  CHECK(cfg.epochs == 7);
  CHECK(cfg.enc_hidden == std::vector<int>{16, 8});
  CHECK(cfg.use_pde == false);
  CHECK(cfg.feature_loss == FeatureLoss::mse);
  REQUIRE(rest.size() == 1);
  CHECK(rest.at("edges") == "/tmp/e.txt");

  auto bad = fs::temp_directory_path() / "dbgan_cfg_bad.cfg";
  std::ofstream(bad) << "lr 0.1\n";
  CHECK_THROWS_WITH(parse_config_file(bad.string()),
                    Catch::Matchers::ContainsSubstring(":1"));
  fs::remove(bad);

  CHECK(parse_bool("yes"));
  CHECK(!parse_bool("0"));
  CHECK_THROWS_AS(parse_bool("maybe"), IoError);
  CHECK(parse_int_list("1,2,3") == std::vector<int>{1, 2, 3});
  CHECK(parse_int_list("") == std::vector<int>{});
}

TEST_CASE("history csv round trip") {
  TrainHistory h;
  EpochRecord r;
  r.epoch = 0;
  r.loss_rec = 1.25;
  r.val_auc = 0.5;
  h.epochs.push_back(r);
  namespace fs = std::filesystem;
  auto path = fs::temp_directory_path() / "dbgan_hist_test.csv";
  write_history_csv(path.string(), h);
  std::ifstream f(path);
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  fs::remove(path);
  CHECK(header == "epoch,loss_dz,loss_ea,loss_dx,loss_g,loss_rec,val_auc,val_ap");
  CHECK(line == "0,0,0,0,0,1.25,0.5,0");
}
