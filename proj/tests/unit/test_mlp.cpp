#include <cmath>
#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "kgrag/error.hpp"
#include "kgrag/mlp.hpp"
#include "testing.hpp"

using namespace kgrag;

namespace {

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

std::vector<double> random_labels(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> y(n);
  for (double& v : y) v = double(rng() & 1);
  return y;
}

std::vector<double> flatten(const Mlp& m) {
  std::vector<double> out(m.parameter_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.parameter(i);
  return out;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

}  // namespace

TEST(Mlp, ZeroParamsGiveHalf) {
  std::vector<std::size_t> hidden = {4};
  Mlp m = Mlp::zeros(3, hidden, 1, Activation::Relu);
  std::vector<double> x = {1, -2, 3};
  EXPECT_EQ(mlp_forward(m, x), 0.5);
}

TEST(Mlp, LargeLogitsStayFinite) {
  std::vector<std::size_t> none;
  Mlp m = Mlp::zeros(1, none, 1, Activation::Relu);
  m.layers()[0].weights(0, 0) = 1.0;
  for (double v : {1e6, -1e6, 800.0, -800.0}) {
    std::vector<double> x = {v};
    double p = mlp_forward(m, x);
    EXPECT_TRUE(std::isfinite(p));
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  EXPECT_EQ(stable_sigmoid(-1e6), 0.0);
  EXPECT_EQ(stable_sigmoid(1e6), 1.0);
}

TEST(Mlp, DimensionMismatch) {
  std::vector<std::size_t> hidden = {2};
  Mlp m = Mlp::random(3, hidden, 1, Activation::Relu, 1);
  std::vector<double> x = {1, 2};
  EXPECT_THROW(mlp_forward(m, x), ShapeError);
  Eigen::MatrixXd f(2, 3);
  std::vector<double> y = {1};
  EXPECT_THROW(loss_and_grad(m, f, y), ShapeError);
}

TEST(Mlp, MatchesStraightLineImplementation) {
  std::mt19937_64 rng(41);
  for (Activation act : {Activation::Relu, Activation::Tanh}) {
    for (int i = 0; i < 20; ++i) {
      std::vector<std::size_t> hidden = {7, 5};
      Mlp m = Mlp::random(6, hidden, 1, act, rng());
      for (std::size_t p = 0; p < m.parameter_count(); p += 3) m.parameter(p) += 0.1;  // nonzero biases too
      Eigen::MatrixXd x = random_matrix(rng, 1, 6);
      std::vector<double> xv(x.data(), x.data() + 6);
      EXPECT_NEAR(mlp_logit(m, xv), kgrag::testing::straight_line_logit(m, xv), 1e-9);
    }
  }
}

TEST(Loss, ZeroParamsGiveLn2) {
  std::mt19937_64 rng(42);
  std::vector<std::size_t> hidden = {4};
  Mlp m = Mlp::zeros(5, hidden, 1, Activation::Relu);
  Eigen::MatrixXd x = random_matrix(rng, 9, 5);
  auto y = random_labels(rng, 9);
  EXPECT_NEAR(loss_and_grad(m, x, y).loss, std::log(2.0), 1e-15);
}

TEST(Loss, EqualsExplicitProduct) {
  std::mt19937_64 rng(43);
  std::vector<std::size_t> hidden = {6};
  Mlp m = Mlp::random(4, hidden, 1, Activation::Tanh, 5);
  Eigen::MatrixXd x = random_matrix(rng, 5, 4);
  std::vector<double> y = {1, 0, 0, 1, 0};
  double q = 1.0;
  for (int i = 0; i < 5; ++i) {
    Eigen::RowVectorXd r = x.row(i);
    double p = mlp_forward(m, std::span<const double>(r.data(), 4));
    q *= y[i] == 1 ? p : 1 - p;
  }
  EXPECT_NEAR(loss_and_grad(m, x, y).loss, -std::log(q) / 5.0, 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(44);
  struct Arch {
    std::vector<std::size_t> hidden;
    Activation act;
  };
  std::vector<Arch> archs = {{{}, Activation::Relu}, {{8}, Activation::Tanh}, {{6, 4}, Activation::Relu}};
  for (const Arch& a : archs) {
    for (int point = 0; point < 5; ++point) {
      Mlp m = Mlp::random(5, a.hidden, 1, a.act, rng());
      Eigen::MatrixXd x = random_matrix(rng, 12, 5);
      auto y = random_labels(rng, 12);
      double w = 1.0 + double(point);
      auto analytic = flatten(loss_and_grad(m, x, y, w).grad);
      auto numeric = kgrag::testing::numeric_gradient(m, [&] { return loss_and_grad(m, x, y, w).loss; }, 1e-5);
      EXPECT_LT(rel_error(analytic, numeric), 1e-4);
    }
  }
}

TEST(Train, SeparableSetFits) {
  std::mt19937_64 rng(45);
  TrainingSet data;
  data.dim = 4;
  for (int s = 0; s < 20; ++s) {
    Eigen::MatrixXd x = random_matrix(rng, 10, 4);
    std::vector<double> y(10);
    for (int i = 0; i < 10; ++i) y[i] = x(i, 0) + 0.5 * x(i, 2) > 0 ? 1.0 : 0.0;
    data.append(x, y);
  }
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.hidden = {16};
  auto result = train(data, cfg);
  ASSERT_EQ(result.epoch_loss.size(), 50u);
  EXPECT_LT(result.epoch_loss.back(), 0.1);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
  std::mt19937_64 rng(46);
  TrainingSet data;
  data.dim = 3;
  std::vector<double> y = {1, 0};
  data.append(random_matrix(rng, 2, 3), y);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.hidden = {4};
  cfg.seed = 17;
  auto result = train(data, cfg);
  EXPECT_EQ(flatten(result.params), flatten(Mlp::random(3, cfg.hidden, 1, cfg.activation, 17)));
  EXPECT_TRUE(result.epoch_loss.empty());
}

TEST(Train, DeterministicForSeedAndThreadCount) {
  std::mt19937_64 rng(47);
  TrainingSet data;
  data.dim = 6;
  for (int s = 0; s < 8; ++s) {
    Eigen::MatrixXd x = random_matrix(rng, 30, 6);
    data.append(x, random_labels(rng, 30));
  }
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 64;
  cfg.hidden = {8, 8};
  auto a = train(data, cfg);
  auto b = train(data, cfg);
  EXPECT_EQ(flatten(a.params), flatten(b.params));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  cfg.threads = 4;
  auto c = train(data, cfg);
  auto d = train(data, cfg);
  EXPECT_EQ(flatten(c.params), flatten(d.params));
  EXPECT_LT(rel_error(flatten(a.params), flatten(c.params)), 1e-9);
}

TEST(Train, HoldoutPicksBestEpoch) {
  std::mt19937_64 rng(48);
  TrainingSet data;
  data.dim = 3;
  for (int s = 0; s < 10; ++s) data.append(random_matrix(rng, 5, 3), random_labels(rng, 5));
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.hidden = {4};
  cfg.holdout_fraction = 0.3;
  std::size_t calls = 0;
  auto r = train(data, cfg, [&](std::size_t, double, std::optional<double> v) {
    ++calls;
    EXPECT_TRUE(v.has_value());
  });
  EXPECT_EQ(calls, 6u);
  ASSERT_EQ(r.validation_loss.size(), 6u);
  auto best = std::min_element(r.validation_loss.begin(), r.validation_loss.end());
  EXPECT_EQ(r.best_epoch, std::size_t(best - r.validation_loss.begin()) + 1);
}

TEST(Train, EmptySetAndNaNAbort) {
  TrainingSet empty;
  empty.dim = 2;
  EXPECT_THROW(train(empty, TrainConfig{}), TrainingError);

  TrainingSet data;
  data.dim = 1;
  Eigen::MatrixXd x(2, 1);
  x << std::nan(""), 1.0;
  std::vector<double> y = {1, 0};
  data.append(x, y);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.hidden = {};
  EXPECT_THROW(train(data, cfg), TrainingError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<std::size_t> none;
  Mlp p = Mlp::zeros(2, none, 1, Activation::Relu);
  Mlp g = p.zeros_like();
  g.layers()[0].weights(0, 0) = 3.0;
  g.layers()[0].weights(0, 1) = -0.01;
  AdamState st;
  AdamOptions opt;
  opt.learning_rate = 0.1;
  adam_update(p, g, st, opt);
  EXPECT_NEAR(p.layers()[0].weights(0, 0), -0.1, 1e-6);
  EXPECT_NEAR(p.layers()[0].weights(0, 1), 0.1, 1e-4);
  EXPECT_EQ(p.layers()[0].bias(0), 0.0);
}

TEST(Params, SaveLoadRoundTrip) {
  kgrag::testing::TempDir dir;
  std::vector<std::size_t> hidden = {3};
  Mlp m = Mlp::random(4, hidden, 1, Activation::Tanh, 9);
  std::uint64_t fp = params_fingerprint(4, 2);
  save_params(m, fp, dir / "p.mlps");
  LoadedParams back = load_params(dir / "p.mlps", Activation::Tanh);
  EXPECT_EQ(back.fingerprint, fp);
  ASSERT_EQ(back.params.parameter_count(), m.parameter_count());
  for (std::size_t i = 0; i < m.parameter_count(); ++i)
    EXPECT_EQ(back.params.parameter(i), double(float(m.parameter(i))));
  EXPECT_NE(params_fingerprint(4, 2), params_fingerprint(4, 3));
  EXPECT_NE(params_fingerprint(4, 2), params_fingerprint(5, 2));

  std::string bytes = kgrag::testing::read_text(dir / "p.mlps");
  EXPECT_EQ(bytes.substr(0, 4), "MLPS");
  kgrag::testing::write_text(dir / "bad.mlps", bytes.substr(0, bytes.size() - 1));
  EXPECT_THROW(load_params(dir / "bad.mlps", Activation::Tanh), ParseError);
  bytes[0] = 'X';
  kgrag::testing::write_text(dir / "bad.mlps", bytes);
  EXPECT_THROW(load_params(dir / "bad.mlps", Activation::Tanh), ParseError);
}
