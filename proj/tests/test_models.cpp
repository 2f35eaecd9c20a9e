#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <vector>

#include "grad_check.hpp"
#include "multifair/models.hpp"

namespace mf = multifair;
namespace diff = multifair::diff;
using mf::Matrix;
using mf::testing::random_matrix;

namespace {

mf::ModelConfig small_config() {
  mf::ModelConfig c;
  c.input_dims = {5, 3};
  c.hidden_dims = {6};
  c.feature_dim = 4;
  c.heads = 2;
  c.seed = 3;
  return c;
}

void zero_all(mf::ModelState& s) {
  for (const auto& p : s.parameters()) s.at(p.name).setZero();
}

std::vector<Matrix> random_inputs(const mf::ModelConfig& c, int n, std::mt19937_64& rng) {
  std::vector<Matrix> in;
  for (int d : c.input_dims) in.push_back(random_matrix(n, d, rng, -2, 2));
  return in;
}

/// Training-style scalar: task cross-entropy plus each classifier's.
double model_loss(const mf::ModelState& state, const std::vector<Matrix>& inputs, const std::vector<int>& labels,
                  mf::diff::GradientMap* grads = nullptr) {
  diff::Tape t;
  mf::BoundModel model(t, state);
  auto pass = mf::forward(model, inputs, 1.0);
  diff::Value loss = diff::cross_entropy(pass.probs, labels);
  for (const auto& p : pass.modality_probs) loss = diff::add(loss, diff::cross_entropy(p, labels));
  const double v = loss.item();
  if (grads) *grads = t.backward(loss);
  return v;
}

}  // namespace

TEST(ModelConfig, Validation) {
  mf::ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.input_dims = {4};
  EXPECT_THROW(c.validate(), mf::ConfigError);
  c = {};
  c.feature_dim = 10;
  c.heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const mf::ConfigError& e) {
    EXPECT_EQ(e.key(), "heads");
  }
}

TEST(ModelState, GroupsAndNames) {
  auto s = mf::ModelState::initialize(small_config());
  std::vector<std::string> names;
  for (const auto& g : s.groups()) names.push_back(g.name);
  EXPECT_EQ(names, (std::vector<std::string>{"encoder:0", "encoder:1", "classifier:0", "classifier:1", "fusion", "head"}));
  EXPECT_TRUE(s.has("encoder:1/layer1/weight"));
  EXPECT_TRUE(s.has("fusion/query"));
  EXPECT_FALSE(s.has("fusion/query/bias"));
  EXPECT_EQ(s.at("head/weight").rows(), 4);
  EXPECT_THROW(s.group("missing"), mf::InputError);
}

TEST(ModelState, InitializationIsDeterministic) {
  auto a = mf::ModelState::initialize(small_config());
  auto b = mf::ModelState::initialize(small_config());
  for (const auto& p : a.parameters()) EXPECT_EQ(p.value, b.at(p.name)) << p.name;
  auto c = small_config();
  c.seed = 4;
  auto d = mf::ModelState::initialize(c);
  EXPECT_NE(a.at("fusion/key"), d.at("fusion/key"));
  EXPECT_TRUE(a.at("head/bias").isZero());
}

TEST(Encoder, ZeroWeightsGiveZeroFeatures) {
  auto s = mf::ModelState::initialize(small_config());
  zero_all(s);
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(1);
  auto h = mf::encode(model, 0, random_matrix(5, 5, rng));
  EXPECT_EQ(h.rows(), 5);
  EXPECT_EQ(h.cols(), 4);
  EXPECT_TRUE(h.data().isZero());
}

TEST(Encoder, IdentityLayerPassesInputThrough) {
  mf::ModelConfig c;
  c.input_dims = {4, 4};
  c.hidden_dims = {};
  c.feature_dim = 4;
  auto s = mf::ModelState::initialize(c);
  s.at("encoder:0/layer0/weight") = Matrix::Identity(4, 4);
  s.at("encoder:0/layer0/bias").setZero();
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(3, 4, rng);
  EXPECT_EQ(mf::encode(model, 0, x).data(), x);
}

TEST(Encoder, Errors) {
  auto s = mf::ModelState::initialize(small_config());
  diff::Tape t;
  mf::BoundModel model(t, s);
  EXPECT_THROW(mf::encode(model, 2, Matrix::Zero(1, 5)), mf::InputError);
  EXPECT_THROW(mf::encode(model, 0, Matrix::Zero(1, 4)), mf::ShapeError);
}

TEST(Classifiers, ZeroWeightsGiveUniformProbabilities) {
  auto s = mf::ModelState::initialize(small_config());
  zero_all(s);
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(3);
  auto p = mf::classify_modality(model, 1, t.constant(random_matrix(4, 4, rng)));
  EXPECT_EQ(p.rows(), 4);
  EXPECT_EQ(p.cols(), 2);
  EXPECT_TRUE((p.data().array() == 0.5).all());
  auto q = mf::predict(model, t.constant(random_matrix(3, 4, rng)));
  EXPECT_EQ(q.rows(), 3);
  EXPECT_TRUE((q.data().array() == 0.5).all());
}

TEST(Classifiers, RowsSumToOne) {
  auto s = mf::ModelState::initialize(small_config());
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(4);
  auto inputs = random_inputs(s.config(), 7, rng);
  auto pass = mf::forward(model, inputs, 1.0);
  for (Eigen::Index i = 0; i < 7; ++i) {
    EXPECT_NEAR(pass.probs.data().row(i).sum(), 1.0, 1e-12);
    for (const auto& p : pass.modality_probs) EXPECT_NEAR(p.data().row(i).sum(), 1.0, 1e-12);
  }
  EXPECT_EQ(pass.modality_scores[0].cols(), 1);
  EXPECT_EQ(pass.modality_scores[1].data().col(0), pass.modality_probs[1].data().col(1));
}

TEST(Fusion, AttentionRowsSumToOne) {
  auto s = mf::ModelState::initialize(small_config());
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(5);
  std::vector<diff::Value> h{t.constant(random_matrix(6, 4, rng, -3, 3)), t.constant(random_matrix(6, 4, rng, -3, 3))};
  auto trace = mf::fuse_traced(model, h);
  ASSERT_EQ(trace.weights.size(), 2u);
  for (const auto& head : trace.weights) {
    ASSERT_EQ(head.size(), 2u);
    for (const auto& w : head) {
      EXPECT_EQ(w.cols(), 2);
      for (Eigen::Index i = 0; i < w.rows(); ++i) EXPECT_NEAR(w.data().row(i).sum(), 1.0, 1e-12);
    }
  }
  EXPECT_EQ(trace.fused.rows(), 6);
  EXPECT_EQ(trace.fused.cols(), 4);
}

TEST(Fusion, IdenticalTokensPoolToEitherToken) {
  auto s = mf::ModelState::initialize(small_config());
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::mt19937_64 rng(6);
  diff::Value h = t.constant(random_matrix(3, 4, rng));
  std::vector<diff::Value> same{h, h};
  auto fused = mf::fuse(model, same).data();
  // With equal tokens attention averages identical values, so every token's
  // output equals output(value(h)).
  Matrix v = h.data() * s.at("fusion/value");
  Matrix expected = (v * s.at("fusion/output/weight")).rowwise() + s.at("fusion/output/bias").row(0);
  EXPECT_LT((fused - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, SampleOrderEquivariance) {
  auto s = mf::ModelState::initialize(small_config());
  std::mt19937_64 rng(7);
  auto inputs = random_inputs(s.config(), 5, rng);
  std::vector<Eigen::Index> perm{3, 0, 4, 1, 2};
  std::vector<Matrix> permuted;
  for (const auto& m : inputs) {
    Matrix p(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < 5; ++i) p.row(i) = m.row(perm[static_cast<std::size_t>(i)]);
    permuted.push_back(p);
  }
  diff::Tape t1, t2;
  mf::BoundModel m1(t1, s), m2(t2, s);
  auto a = mf::forward(m1, inputs, 1.0).probs.data();
  auto b = mf::forward(m2, permuted, 1.0).probs.data();
  for (Eigen::Index i = 0; i < 5; ++i) {
    EXPECT_LT((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Fusion, GradientMatchesFiniteDifferences) {
  mf::ModelConfig c;
  c.input_dims = {8, 8};
  c.hidden_dims = {};
  c.feature_dim = 8;
  c.heads = 2;
  auto s = mf::ModelState::initialize(c);
  std::mt19937_64 rng(8);
  auto res = mf::testing::check_gradients(
      [&](diff::Tape& t, const std::vector<diff::Value>& in) {
        mf::BoundModel model(t, s);
        return mf::testing::weighted_sum(t, mf::fuse(model, in));
      },
      {random_matrix(3, 8, rng), random_matrix(3, 8, rng)});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Fusion, Errors) {
  auto s = mf::ModelState::initialize(small_config());
  diff::Tape t;
  mf::BoundModel model(t, s);
  std::vector<diff::Value> one{t.constant(Matrix::Zero(2, 4))};
  EXPECT_THROW(mf::fuse(model, one), mf::ContractError);
  std::vector<diff::Value> ragged{t.constant(Matrix::Zero(2, 4)), t.constant(Matrix::Zero(3, 4))};
  EXPECT_THROW(mf::fuse(model, ragged), mf::InputError);
  std::vector<diff::Value> wide{t.constant(Matrix::Zero(2, 5)), t.constant(Matrix::Zero(2, 5))};
  EXPECT_THROW(mf::fuse(model, wide), mf::ShapeError);
}

TEST(ModelGradients, EndToEndMatchesFiniteDifferences) {
  auto s = mf::ModelState::initialize(small_config());
  std::mt19937_64 rng(9);
  auto inputs = random_inputs(s.config(), 4, rng);
  std::vector<int> labels{0, 1, 1, 0};
  diff::GradientMap grads;
  model_loss(s, inputs, labels, &grads);

  // 20 random (parameter, entry) probes.
  const auto& params = s.parameters();
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  const double h = 1e-5;
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    const auto& p = params[pick(rng)];
    std::uniform_int_distribution<Eigen::Index> entry(0, p.value.size() - 1);
    const Eigen::Index i = entry(rng);
    auto probe = s;
    const double saved = probe.at(p.name).data()[i];
    probe.at(p.name).data()[i] = saved + h;
    const double up = model_loss(probe, inputs, labels);
    probe.at(p.name).data()[i] = saved - h;
    const double down = model_loss(probe, inputs, labels);
    worst = std::max(worst, mf::testing::relative_error(grads.at(p.name).data()[i], (up - down) / (2 * h)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(ModelGradients, LambdaAuxScalesClassifierSignalIntoEncoders) {
  auto s = mf::ModelState::initialize(small_config());
  std::mt19937_64 rng(10);
  auto inputs = random_inputs(s.config(), 4, rng);
  std::vector<int> labels{0, 1, 1, 0};
  auto encoder_grad = [&](double aux) {
    diff::Tape t;
    mf::BoundModel model(t, s);
    auto pass = mf::forward(model, inputs, aux);
    return t.backward(diff::cross_entropy(pass.modality_probs[0], labels)).at("encoder:0/layer0/weight");
  };
  EXPECT_TRUE(encoder_grad(0.0).isZero());
  EXPECT_LT((encoder_grad(0.3) - 0.3 * encoder_grad(1.0)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Checkpoint, RoundTripIsExact) {
  auto s = mf::ModelState::initialize(small_config());
  std::mt19937_64 rng(11);
  s.at("head/bias") = random_matrix(1, 2, rng);
  std::stringstream buf;
  s.save(buf);
  auto r = mf::ModelState::load(buf);
  EXPECT_EQ(r.config().input_dims, s.config().input_dims);
  EXPECT_EQ(r.config().hidden_dims, s.config().hidden_dims);
  EXPECT_EQ(r.config().heads, s.config().heads);
  for (const auto& p : s.parameters()) EXPECT_EQ(p.value, r.at(p.name)) << p.name;
}

TEST(Checkpoint, RejectsMalformedInput) {
  std::stringstream bad("not-a-checkpoint 1\n");
  EXPECT_THROW(mf::ModelState::load(bad), mf::InputError);
  auto s = mf::ModelState::initialize(small_config());
  std::stringstream buf;
  s.save(buf);
  std::string text = buf.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  EXPECT_THROW(mf::ModelState::load(truncated), mf::InputError);
}
