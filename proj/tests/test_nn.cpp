#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "dbgan/nn.hpp"

using namespace dbgan;

namespace {

std::shared_ptr<const SparseMatrix> sparse_from(const Matrix& m) {
  SparseMatrix s = m.sparseView();
  return std::make_shared<const SparseMatrix>(std::move(s));
}

}  // namespace

TEST_CASE("gcn_layer composes propagation, weights and activation") {
  auto id = sparse_from(Matrix::Identity(3, 3));
  Matrix h = Matrix::Random(3, 2).cwiseAbs();
  Var out = gcn_layer(id, ad::constant(h), ad::constant(Matrix::Identity(2, 2)),
                      Activation::relu);
  CHECK((out->value - h).cwiseAbs().maxCoeff() < 1e-14);

  Matrix swap(2, 2);
  swap << 0, 1, 1, 0;
  Matrix h2 = Matrix::Random(2, 3);
  Var swapped = gcn_layer(sparse_from(swap), ad::constant(h2),
                          ad::constant(Matrix::Identity(3, 3)), Activation::linear);
  CHECK((swapped->value.row(0) - h2.row(1)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((swapped->value.row(1) - h2.row(0)).cwiseAbs().maxCoeff() < 1e-14);

  Matrix half = Matrix::Constant(2, 2, 0.5);
  Matrix col(2, 1);
  col << 2, 0;
  Var avg = gcn_layer(sparse_from(half), ad::constant(col),
                      ad::constant(Matrix::Ones(1, 1)), Activation::linear);
  CHECK(avg->value(0, 0) == Catch::Approx(1.0));
  CHECK(avg->value(1, 0) == Catch::Approx(1.0));
}

TEST_CASE("encoder with zero weights outputs zero") {
  auto id = sparse_from(Matrix::Identity(4, 4));
  std::vector<Var> ws{ad::constant(Matrix::Zero(3, 5)),
                      ad::constant(Matrix::Zero(5, 2))};
  Var h = encoder_forward(ad::constant(Matrix::Random(4, 3)), id, ws);
  CHECK(h->value.cwiseAbs().maxCoeff() == 0.0);
  CHECK(h->rows() == 4);
  CHECK(h->cols() == 2);
}

TEST_CASE("generator with zero weights outputs all 0.5") {
  auto id = sparse_from(Matrix::Identity(3, 3));
  std::vector<Var> ws{ad::constant(Matrix::Zero(2, 4)),
                      ad::constant(Matrix::Zero(4, 6))};
  Var x = generator_forward(ad::constant(Matrix::Random(3, 2)), id, ws);
  CHECK((x->value.array() - 0.5).abs().maxCoeff() < 1e-14);
}

TEST_CASE("node-permutation equivariance of the GCN stacks") {
  Rng rng(21);
  int n = 8;
  Matrix adj = Matrix::Zero(n, n);
  for (int i = 0; i + 1 < n; ++i) adj(i, i + 1) = adj(i + 1, i) = 0.4;
  Matrix x = Matrix::Random(n, 5);
  std::vector<Matrix> wm{glorot_init(5, 4, rng()), glorot_init(4, 3, rng())};

  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix p = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) p(i, perm[i]) = 1.0;

  Var h = encoder_forward(ad::constant(x), sparse_from(adj), as_constants(wm));
  Matrix adj_p = p * adj * p.transpose();
  Var hp =
      encoder_forward(ad::constant(p * x), sparse_from(adj_p), as_constants(wm));
  CHECK((hp->value - p * h->value).cwiseAbs().maxCoeff() == 0.0);

  // generator permutes identically
  std::vector<Matrix> gm{glorot_init(3, 6, rng()), glorot_init(6, 5, rng())};
  Var g1 = generator_forward(ad::constant(x.leftCols(3)), sparse_from(adj),
                             as_constants(gm));
  Var g2 = generator_forward(ad::constant(p * x.leftCols(3)), sparse_from(adj_p),
                             as_constants(gm));
  CHECK((g2->value - p * g1->value).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("discriminator is a per-row critic") {
  Matrix w(3, 1);
  w << 1, 2, 3;
  Matrix b = Matrix::Zero(1, 1);
  Matrix in = Matrix::Random(5, 3);
  Var out = discriminator_forward(ad::constant(in), {ad::constant(w)},
                                  {ad::constant(b)});
  CHECK((out->value - in * w).cwiseAbs().maxCoeff() < 1e-14);

  // zero weights: all scores equal the bias
  Matrix b2(1, 1);
  b2 << 0.7;
  Var out2 = discriminator_forward(ad::constant(in),
                                   {ad::constant(Matrix::Zero(3, 1))},
                                   {ad::constant(b2)});
  CHECK((out2->value.array() - 0.7).abs().maxCoeff() < 1e-14);

  // shuffling input rows shuffles output rows identically
  Rng rng(4);
  std::vector<Matrix> dims{glorot_init(3, 4, rng()), glorot_init(4, 1, rng())};
  std::vector<Matrix> biases{Matrix::Zero(1, 4), Matrix::Zero(1, 1)};
  Matrix rev = in.colwise().reverse();
  Var a = discriminator_forward(ad::constant(in), as_constants(dims),
                                as_constants(biases));
  Var b3 = discriminator_forward(ad::constant(rev), as_constants(dims),
                                 as_constants(biases));
  CHECK((b3->value - a->value.colwise().reverse()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("glorot_init bounds, determinism, near-zero mean") {
  Matrix w = glorot_init(100, 100, 17);
  double bound = std::sqrt(6.0 / 200.0);
  CHECK(w.cwiseAbs().maxCoeff() <= bound);
  CHECK((glorot_init(100, 100, 17) - w).cwiseAbs().maxCoeff() == 0.0);
  Matrix big = glorot_init(256, 512, 3);
  CHECK(std::abs(big.mean()) < 0.005);
  CHECK_THROWS_AS(glorot_init(0, 4, 1), ShapeError);
}

TEST_CASE("adam first step is approximately -lr") {
  Matrix p(1, 1), g(1, 1);
  p << 5.0;
  g << 1.0;
  AdamState st = init_adam({&p});
  adam_step({&p}, {&g}, st, 0.01);
  CHECK(p(0, 0) == Catch::Approx(5.0 - 0.01).epsilon(1e-5));

  // first-step magnitude is ~lr regardless of gradient scale
  Matrix p2(1, 1), g2(1, 1);
  p2 << 5.0;
  g2 << 2.0;
  AdamState st2 = init_adam({&p2});
  adam_step({&p2}, {&g2}, st2, 0.01);
  CHECK(p2(0, 0) == Catch::Approx(5.0 - 0.01).epsilon(1e-5));
}

TEST_CASE("adam zero gradient and zero lr leave parameters unchanged") {
  Matrix p = Matrix::Random(3, 2);
  Matrix orig = p;
  Matrix z = Matrix::Zero(3, 2);
  AdamState st = init_adam({&p});
  adam_step({&p}, {&z}, st, 0.5);
  CHECK((p - orig).cwiseAbs().maxCoeff() == 0.0);

  Matrix g = Matrix::Random(3, 2);
  adam_step({&p}, {&g}, st, 0.0);
  CHECK((p - orig).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoint round trip preserves every matrix bit for bit") {
  Rng rng(9);
  ModelParams p;
  p.encoder = {glorot_init(6, 4, rng()), glorot_init(4, 2, rng())};
  p.generator = {glorot_init(2, 5, rng()), glorot_init(5, 6, rng())};
  p.d_z = init_mlp({2, 3, 1}, rng);
  p.d_x = init_mlp({6, 4, 1}, rng);

  auto path = std::filesystem::temp_directory_path() / "dbgan_ckpt_test.bin";
  save_checkpoint(path.string(), p);
  ModelParams q = load_checkpoint(path.string());
  std::filesystem::remove(path);

  REQUIRE(q.encoder.size() == 2);
  REQUIRE(q.d_x.weights.size() == 2);
  CHECK((q.encoder[0] - p.encoder[0]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((q.generator[1] - p.generator[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((q.d_z.weights[1] - p.d_z.weights[1]).cwiseAbs().maxCoeff() == 0.0);
  CHECK((q.d_x.biases[0] - p.d_x.biases[0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoint loader rejects garbage") {
  auto path = std::filesystem::temp_directory_path() / "dbgan_bad_ckpt.bin";
  std::ofstream(path) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(path.string()), IoError);
  std::filesystem::remove(path);
}
