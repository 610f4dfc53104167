#include <gtest/gtest.h>

#include <cmath>

#include "coocdyn/model.hpp"
#include "coocdyn/rng.hpp"
#include "coocdyn/trainer.hpp"
#include "oracles.hpp"

using namespace coocdyn;

namespace {

Eigen::MatrixXd gaussian(Rng& rng, int r, int c, double s) {
  std::normal_distribution<double> N(0.0, s);
  Eigen::MatrixXd M(r, c);
  for (int j = 0; j < c; ++j) {
    for (int i = 0; i < r; ++i) M(i, j) = N(rng);
  }
  return M;
}

ModelParams random_params(Rng& rng, int m, int m1, int d, double s = 0.5) {
  ModelParams p = ModelParams::zeros(m, m1, d);
  p.W = gaussian(rng, m1, m, s);
  p.W_V = gaussian(rng, m, d, s);
  p.W_K = gaussian(rng, m, d, s);
  p.W_Q = gaussian(rng, m, d, s);
  std::bernoulli_distribution coin(0.5);
  for (int j = 0; j < m1; ++j) p.a(j) = coin(rng) ? 1.0 : -1.0;
  return p;
}

Sample sample_of(std::vector<TokenId> tokens, Group g) {
  Sample s;
  s.tokens = std::move(tokens);
  s.group = g;
  s.label = label_of(g);
  return s;
}

}  // namespace

TEST(Attention, ZeroKeysGiveUniformColumns) {
  Rng rng = make_stream(1, "t");
  ModelParams p = random_params(rng, 6, 3, 8);
  p.W_K.setZero();
  const Vocabulary v = build_vocabulary(8, EmbeddingMode::canonical, 0);
  const auto att = attention(p, sample_of({3, 1, 2, 5, 7}, Group::I1), v);
  EXPECT_EQ(att.S, Eigen::MatrixXd::Zero(5, 5));
  EXPECT_LE((att.P.array() - 0.2).abs().maxCoeff(), 1e-15);
}

TEST(Attention, SoftmaxByHand) {
  Eigen::MatrixXd S(2, 1);
  S << std::log(2.0), 0.0;
  const Eigen::MatrixXd P = detail::softmax_columns(S);
  EXPECT_NEAR(P(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(P(1, 0), 1.0 / 3.0, 1e-15);
}

TEST(Attention, ColumnsAreProbabilityVectorsUnderLargeScores) {
  const Vocabulary v = build_vocabulary(10, EmbeddingMode::canonical, 0);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    Rng rng = make_stream(seed, "fuzz");
    const double scale = 0.2 + 0.2 * seed;  // late seeds push scores far past 50
    ModelParams p = random_params(rng, 5, 2, 10, scale);
    const auto att = attention(p, sample_of({1, 3, 2, 9, 4}, Group::I1), v);
    for (int l = 0; l < 5; ++l) {
      EXPECT_NEAR(att.P.col(l).sum(), 1.0, 1e-12);
      EXPECT_GE(att.P.col(l).minCoeff(), 0.0);
      EXPECT_LE(att.P.col(l).maxCoeff(), 1.0);
    }
  }
}

TEST(Attention, ScoresIncludeInverseSqrtM) {
  Rng rng = make_stream(2, "t");
  const ModelParams p = random_params(rng, 9, 2, 6);
  const Vocabulary v = build_vocabulary(6, EmbeddingMode::canonical, 0);
  const Sample s = sample_of({3, 4}, Group::I4);
  const auto att = attention(p, s, v);
  EXPECT_NEAR(att.S(1, 0), p.W_K.col(3).dot(p.W_Q.col(2)) / 3.0, 1e-14);
}

TEST(Attention, NonFiniteParametersAreNumericErrors) {
  Rng rng = make_stream(3, "t");
  ModelParams p = random_params(rng, 4, 2, 6);
  p.W_K(0, 2) = std::numeric_limits<double>::infinity();
  const Vocabulary v = build_vocabulary(6, EmbeddingMode::canonical, 0);
  EXPECT_THROW(attention(p, sample_of({3, 4, 5}, Group::I4), v), NumericError);
}

TEST(MlpHead, ZeroNeuronsGiveZero) {
  Rng rng = make_stream(4, "t");
  ModelParams p = random_params(rng, 4, 3, 6);
  p.W.setZero();
  const Vocabulary v = build_vocabulary(6, EmbeddingMode::canonical, 0);
  for (TokenId id = 1; id <= 6; ++id) EXPECT_EQ(mlp_head(p, id, v), 0.0);
}

TEST(MlpHead, CanonicalIsColumnSelection) {
  Rng rng = make_stream(5, "t");
  ModelParams p = random_params(rng, 6, 3, 6);
  p.W_V = Eigen::MatrixXd::Identity(6, 6);
  const Vocabulary v = build_vocabulary(6, EmbeddingMode::canonical, 0);
  const Eigen::RowVectorXd aW = p.a.transpose() * p.W;
  for (TokenId id = 1; id <= 6; ++id) EXPECT_NEAR(mlp_head(p, id, v), aW(id - 1), 1e-14);
}

TEST(MlpHead, MatchesDoubleLoop) {
  for (auto mode : {EmbeddingMode::canonical, EmbeddingMode::random_orthonormal}) {
    Rng rng = make_stream(6, "t");
    const ModelParams p = random_params(rng, 7, 5, 9);
    const Vocabulary v = build_vocabulary(9, mode, 3);
    for (TokenId id = 1; id <= 9; ++id) {
      const Eigen::VectorXd wv = p.W_V * v.mu(id);
      double brute = 0.0;
      for (int j = 0; j < p.m1(); ++j) {
        for (int r = 0; r < p.m(); ++r) brute += p.a(j) * p.W(j, r) * wv(r);
      }
      EXPECT_LE(oracle::rel_error(mlp_head(p, id, v), brute), 1e-10);
    }
  }
}

TEST(Forward, UniformAttentionCollapsesToTokenSum) {
  const Vocabulary v = build_vocabulary(10, EmbeddingMode::canonical, 0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng = make_stream(seed, "uniform");
    ModelParams p = random_params(rng, 6, 4, 10);
    p.W_K.setZero();
    if (seed % 2) p.W_Q.setZero();
    const Sample s = sample_of({5, 3, 1, 8}, Group::I2);
    double sum = 0.0;
    for (TokenId id : s.tokens) sum += mlp_head(p, id, v);
    EXPECT_LE(oracle::rel_error(forward(p, s, v).F, sum), 1e-10);
  }
}

TEST(Forward, ZeroNeuronsGiveZeroOutputAndHalfWeight) {
  Rng rng = make_stream(7, "t");
  ModelParams p = random_params(rng, 4, 3, 8);
  p.W.setZero();
  const Vocabulary v = build_vocabulary(8, EmbeddingMode::canonical, 0);
  const ForwardCache c = forward(p, sample_of({1, 2, 3}, Group::I1), v);
  EXPECT_EQ(c.F, 0.0);
  EXPECT_EQ(c.g, 0.5);
}

TEST(Forward, MatchesNaiveLoops) {
  Rng rng = make_stream(8, "t");
  const ModelParams p = random_params(rng, 6, 3, 8);
  const Vocabulary v = build_vocabulary(8, EmbeddingMode::canonical, 0);
  const Sample s = sample_of({4, 1, 3, 2}, Group::I1);
  EXPECT_LE(oracle::rel_error(forward(p, s, v).F, oracle::forward(p, s, v).F), 1e-10);
}

TEST(Forward, MatchesNaiveLoopsExhaustivelyOnSmallShapes) {
  int cases = 0;
  for (int L = 3; L <= 8; ++L) {
    for (int m = 1; m <= 8; m += 3) {
      for (int m1 = 1; m1 <= 8; m1 += 3) {
        for (int d = 4; d <= 8; d += 2) {
          for (auto mode : {EmbeddingMode::canonical, EmbeddingMode::random_orthonormal}) {
            Rng rng = make_stream(L * 1000 + m * 100 + m1 * 10 + d, "small");
            const ModelParams p = random_params(rng, m, m1, d);
            const Vocabulary v = build_vocabulary(d, mode, L + d);
            TokenPool pool = TokenPool::sampled(kFirstPool, d);
            const Sample s = generate_sample(rng, v, L, Group::I1, pool);
            const ForwardCache c = forward(p, s, v);
            const auto ref = oracle::forward(p, s, v);
            ASSERT_LE(oracle::rel_error(c.F, ref.F), 1e-10) << "L=" << L << " m=" << m;
            for (int l = 0; l < L; ++l) {
              for (int h = 0; h < L; ++h) ASSERT_NEAR(c.P(h, l), ref.p[l][h], 1e-12);
            }
            ++cases;
          }
        }
      }
    }
  }
  EXPECT_GT(cases, 200);
}

TEST(Loss, AtZero) {
  const LossValue lv = loss(0.0, +1);
  EXPECT_NEAR(lv.loss, std::log(2.0), 1e-15);
  EXPECT_EQ(lv.g, 0.5);
}

TEST(Loss, FarTail) {
  const LossValue lv = loss(50.0, +1);
  EXPECT_LE(lv.loss, 2e-22);
  EXPECT_GT(lv.loss, 0.0);
  EXPECT_LE(lv.g, 2e-22);
}

TEST(Loss, WrongSign) {
  const LossValue lv = loss(3.0, -1);
  EXPECT_NEAR(lv.loss, 3.048587351573742, 1e-12);
  EXPECT_NEAR(lv.g, 0.9525741268224334, 1e-12);
}

TEST(Loss, NoOverflowAtLargeNegativeMargin) {
  const LossValue lv = loss(800.0, -1);
  EXPECT_NEAR(lv.loss, 800.0, 1e-9);
  EXPECT_EQ(lv.g, 1.0);
}

TEST(Loss, DerivativeIsMinusYG) {
  Rng rng = make_stream(9, "t");
  std::uniform_real_distribution<double> U(-8, 8);
  for (int k = 0; k < 200; ++k) {
    const double F = U(rng);
    const int y = k % 2 ? 1 : -1;
    const double h = 1e-5;
    const double fd = (loss(F + h, y).loss - loss(F - h, y).loss) / (2 * h);
    EXPECT_LE(oracle::rel_error(fd, -y * loss(F, y).g), 1e-6) << "F=" << F;
  }
}

TEST(DatasetLoss, ZeroNeuronsGiveLogTwo) {
  Rng rng = make_stream(10, "data");
  TrainingSetOptions opt;
  opt.n = 12;
  opt.L = 5;
  const auto [v, ds] = generate_training_set(rng, opt);
  Rng prng = make_stream(10, "p");
  ModelParams p = random_params(prng, 4, 3, v.d);
  p.W.setZero();
  const DatasetLoss dl = dataset_loss(p, ds, v);
  EXPECT_EQ(dl.mean, std::log(2.0));
  EXPECT_EQ(dl.group_gsum[0], 3.0);
  EXPECT_EQ(dl.group_gsum[1], 1.0);
  EXPECT_EQ(dl.group_gsum[2], 1.0);
  EXPECT_EQ(dl.group_gsum[3], 1.0);
  EXPECT_EQ(dl.min_margin, 0.0);
}

TEST(DatasetLoss, SingleSampleAtMarginLogTwo) {
  // One neuron, one value row: F = G(mu_3) * 1 with L = 1.
  ModelParams p = ModelParams::zeros(1, 1, 4);
  p.W(0, 0) = 1.0;
  p.W_V(0, 2) = -std::log(2.0);  // y = -1, so yF = log 2
  const Vocabulary v = build_vocabulary(4, EmbeddingMode::canonical, 0);
  Dataset ds;
  ds.samples.push_back(sample_of({3}, Group::I4));
  ds.L = 1;
  ds.d = 4;
  rebuild_partition(ds);
  const DatasetLoss dl = dataset_loss(p, ds, v);
  EXPECT_NEAR(dl.mean, std::log(1.5), 1e-15);
  EXPECT_NEAR(dl.min_margin, std::log(2.0), 1e-15);
}

TEST(DatasetLoss, EmptyIsInputError) {
  const ModelParams p = ModelParams::zeros(2, 2, 4);
  const Vocabulary v = build_vocabulary(4, EmbeddingMode::canonical, 0);
  EXPECT_THROW(dataset_loss(p, Dataset{}, v), InputError);
}

TEST(ModelParams, ValidateCatchesShapesSignsAndNaN) {
  ModelParams p = ModelParams::zeros(3, 2, 5);
  EXPECT_NO_THROW(p.validate());
  p.a(0) = 0.5;
  EXPECT_THROW(p.validate(), ConfigError);
  p.a(0) = 1.0;
  p.W_Q = Eigen::MatrixXd::Zero(3, 4);
  EXPECT_THROW(p.validate(), ConfigError);
  p.W_Q = Eigen::MatrixXd::Zero(3, 5);
  p.W_V(1, 1) = std::nan("");
  EXPECT_THROW(p.validate(), NumericError);
}

TEST(TokenView, MismatchedWidthIsConfigError) {
  const ModelParams p = ModelParams::zeros(2, 2, 5);
  const Vocabulary v = build_vocabulary(6, EmbeddingMode::canonical, 0);
  EXPECT_THROW(TokenView(p, v), ConfigError);
}
