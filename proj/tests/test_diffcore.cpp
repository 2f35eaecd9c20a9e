#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <random>
#include <vector>

#include "grad_check.hpp"
#include "multifair/diffcore.hpp"

namespace mf = multifair;
namespace diff = multifair::diff;
using mf::Matrix;
using mf::testing::check_gradients;
using mf::testing::random_away_from_zero;
using mf::testing::random_matrix;
using mf::testing::weighted_sum;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

constexpr double kTol = 1e-6;

const std::array<std::pair<int, int>, 3> kShapes{{{2, 3}, {4, 1}, {3, 5}}};

struct UnaryCase {
  const char* name;
  bool positive_input;  // draw from (0.2, 1.5)
  bool away_from_zero;
  std::function<diff::Value(const diff::Value&)> op;
};

std::vector<UnaryCase> unary_cases() {
  return {
      {"scale", false, false, [](const diff::Value& a) { return diff::scale(a, -1.7); }},
      {"shift", false, false, [](const diff::Value& a) { return diff::shift(a, 0.4); }},
      {"transpose", false, false, [](const diff::Value& a) { return diff::transpose(a); }},
      {"row_sum", false, false, [](const diff::Value& a) { return diff::row_sum(a); }},
      {"col_sum", false, false, [](const diff::Value& a) { return diff::col_sum(a); }},
      {"sum", false, false, [](const diff::Value& a) { return diff::sum(a); }},
      {"mean", false, false, [](const diff::Value& a) { return diff::mean(a); }},
      {"relu", false, true, [](const diff::Value& a) { return diff::relu(a); }},
      {"sigmoid", false, false, [](const diff::Value& a) { return diff::sigmoid(diff::scale(a, 3.0)); }},
      {"log", true, false, [](const diff::Value& a) { return diff::log(a); }},
      {"reciprocal", true, false, [](const diff::Value& a) { return diff::reciprocal(a); }},
      {"sqrt", true, false, [](const diff::Value& a) { return diff::sqrt(a); }},
      {"abs", false, true, [](const diff::Value& a) { return diff::abs(a); }},
      {"clamp_min", false, true, [](const diff::Value& a) { return diff::clamp_min(a, 0.0); }},
      {"softmax_rows", false, false, [](const diff::Value& a) { return diff::softmax_rows(diff::scale(a, 2.0)); }},
      {"slice_cols", false, false,
       [](const diff::Value& a) { return diff::slice_cols(a, a.cols() > 1 ? 1 : 0, a.cols() > 1 ? a.cols() - 1 : 1); }},
      {"pad_cols", false, false, [](const diff::Value& a) { return diff::pad_cols(a, 1, a.cols() + 3); }},
      {"gather_rows", false, false,
       [](const diff::Value& a) {
         std::vector<std::size_t> rows{0, static_cast<std::size_t>(a.rows() - 1), 0};
         return diff::gather_rows(a, rows);
       }},
      {"scatter_rows", false, false,
       [](const diff::Value& a) {
         std::vector<std::size_t> rows;
         for (Eigen::Index i = 0; i < a.rows(); ++i) rows.push_back(static_cast<std::size_t>(a.rows() - 1 - i));
         return diff::scatter_rows(a, rows, a.rows() + 2);
       }},
  };
}

Matrix draw(const UnaryCase& c, int r, int k, std::mt19937_64& rng) {
  if (c.positive_input) return random_matrix(r, k, rng, 0.2, 1.5);
  if (c.away_from_zero) return random_away_from_zero(r, k, rng);
  return random_matrix(r, k, rng);
}

}  // namespace

TEST(DiffcoreGradients, UnaryOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (const auto& c : unary_cases()) {
    for (auto [r, k] : kShapes) {
      Matrix x = draw(c, r, k, rng);
      auto res = check_gradients(
          [&](diff::Tape& t, const std::vector<diff::Value>& in) { return weighted_sum(t, c.op(in[0])); }, {x});
      EXPECT_LT(res.max_rel_error, kTol) << c.name << " on " << r << "x" << k;
    }
  }
}

TEST(DiffcoreGradients, BinaryOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  using Op = std::function<diff::Value(const diff::Value&, const diff::Value&)>;
  const std::vector<std::pair<const char*, Op>> ops{
      {"add", [](const auto& a, const auto& b) { return diff::add(a, b); }},
      {"sub", [](const auto& a, const auto& b) { return diff::sub(a, b); }},
      {"mul", [](const auto& a, const auto& b) { return diff::mul(a, b); }},
      {"flat_cosine", [](const auto& a, const auto& b) { return diff::flat_cosine(a, b); }},
  };
  for (const auto& [name, op] : ops) {
    for (auto [r, k] : kShapes) {
      Matrix a = random_matrix(r, k, rng), b = random_matrix(r, k, rng);
      auto res = check_gradients(
          [&](diff::Tape& t, const std::vector<diff::Value>& in) { return weighted_sum(t, op(in[0], in[1])); }, {a, b});
      EXPECT_LT(res.max_rel_error, kTol) << name << " on " << r << "x" << k;
    }
  }
}

TEST(DiffcoreGradients, MatmulMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  const std::array<std::array<int, 3>, 3> dims{{{3, 4, 2}, {1, 5, 3}, {4, 2, 4}}};
  for (auto [n, k, m] : dims) {
    Matrix a = random_matrix(n, k, rng), b = random_matrix(k, m, rng);
    auto res = check_gradients(
        [](diff::Tape& t, const std::vector<diff::Value>& in) { return weighted_sum(t, diff::matmul(in[0], in[1])); },
        {a, b});
    EXPECT_LT(res.max_rel_error, kTol) << n << "x" << k << " * " << k << "x" << m;
  }
}

TEST(DiffcoreGradients, BroadcastAndRowColumnOps) {
  std::mt19937_64 rng(14);
  for (auto [r, k] : kShapes) {
    Matrix a = random_matrix(r, k, rng);
    Matrix row = random_matrix(1, k, rng), col = random_matrix(r, 1, rng), s = random_matrix(1, 1, rng);
    auto fn = [&](diff::Tape& t, const std::vector<diff::Value>& in) {
      diff::Value x = diff::add_row(in[0], in[1]);
      x = diff::mul_col(x, in[2]);
      x = diff::add(x, diff::broadcast(in[3], in[0].rows(), in[0].cols()));
      x = diff::add(x, diff::broadcast_cols(in[2], in[0].cols()));
      x = diff::mul(x, diff::broadcast_rows(in[1], in[0].rows()));
      return weighted_sum(t, x);
    };
    auto res = check_gradients(fn, {a, row, col, s});
    EXPECT_LT(res.max_rel_error, kTol) << r << "x" << k;
  }
}

TEST(DiffcoreGradients, ConcatColsRoutesEachPart) {
  std::mt19937_64 rng(15);
  for (auto [r, k] : kShapes) {
    Matrix a = random_matrix(r, k, rng), b = random_matrix(r, 2, rng), c = random_matrix(r, 1, rng);
    auto res = check_gradients(
        [](diff::Tape& t, const std::vector<diff::Value>& in) {
          std::vector<diff::Value> parts{in[0], in[1], in[2]};
          return weighted_sum(t, diff::concat_cols(parts));
        },
        {a, b, c});
    EXPECT_LT(res.max_rel_error, kTol);
  }
}

TEST(DiffcoreGradients, CrossEntropyOverSoftmax) {
  std::mt19937_64 rng(16);
  for (auto [n, c] : std::array<std::pair<int, int>, 3>{{{4, 2}, {3, 3}, {6, 5}}}) {
    Matrix z = random_matrix(n, c, rng, -2, 2);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(i % c);
    auto res = check_gradients(
        [&](diff::Tape&, const std::vector<diff::Value>& in) {
          return diff::cross_entropy(diff::softmax_rows(in[0]), labels);
        },
        {z});
    EXPECT_LT(res.max_rel_error, kTol);
  }
}

TEST(DiffcoreGradients, CrossEntropyLogitGradientIsProbsMinusOnehot) {
  std::mt19937_64 rng(17);
  Matrix z = random_matrix(5, 3, rng, -2, 2);
  std::vector<int> labels{0, 2, 1, 1, 0};
  diff::Tape t;
  diff::Value x = t.parameter("z", z);
  diff::Value p = diff::softmax_rows(x);
  auto grads = t.backward(diff::cross_entropy(p, labels));
  Matrix expected = p.data();
  for (std::size_t i = 0; i < labels.size(); ++i) expected(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
  expected /= 5.0;
  EXPECT_LT((grads.at("z") - expected).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(DiffcoreGradients, ComposedNetworkMatchesFiniteDifferences) {
  std::mt19937_64 rng(18);
  Matrix x = random_matrix(4, 3, rng), w1 = random_matrix(3, 5, rng), b1 = random_matrix(1, 5, rng);
  Matrix w2 = random_matrix(5, 2, rng);
  std::vector<int> labels{1, 0, 0, 1};
  auto res = check_gradients(
      [&](diff::Tape& t, const std::vector<diff::Value>& in) {
        diff::Value h = diff::sigmoid(diff::add_row(diff::matmul(t.constant(x), in[0]), in[1]));
        return diff::cross_entropy(diff::softmax_rows(diff::matmul(h, in[2])), labels);
      },
      {w1, b1, w2});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(DiffcoreGradients, SecondOrderThroughGradients) {
  // g(x) = || d/dx f(x) ||^2 where f mixes the nonlinear ops; its gradient
  // needs every backward rule to be differentiable itself.
  std::mt19937_64 rng(19);
  for (auto [r, k] : kShapes) {
    Matrix x0 = random_matrix(r, k, rng, 0.3, 1.2);
    Matrix w = random_matrix(k, 3, rng);
    auto fn = [&](diff::Tape& t, const std::vector<diff::Value>& in) {
      diff::Value z = diff::matmul(in[0], t.constant(w));
      diff::Value f = diff::add(weighted_sum(t, diff::softmax_rows(z)), weighted_sum(t, diff::sigmoid(z)));
      f = diff::add(f, diff::sum(diff::log(diff::shift(diff::mul(in[0], in[0]), 1.0))));
      f = diff::add(f, diff::sum(diff::mul(diff::sqrt(in[0]), diff::reciprocal(diff::shift(in[0], 1.0)))));
      f = diff::add(f, weighted_sum(t, diff::abs(diff::shift(in[0], -2.0))));
      diff::Value g = t.gradients(f, std::span<const diff::Value>(&in[0], 1)).front();
      return diff::sum(diff::mul(g, g));
    };
    auto res = check_gradients(fn, {x0});
    EXPECT_LT(res.max_rel_error, 1e-5) << r << "x" << k;
  }
}

TEST(DiffcoreGradients, SecondOrderThroughCosine) {
  std::mt19937_64 rng(20);
  Matrix x = random_matrix(3, 4, rng), a = random_matrix(4, 2, rng), b = random_matrix(4, 2, rng);
  auto fn = [&](diff::Tape& t, const std::vector<diff::Value>& in) {
    diff::Value h = diff::sigmoid(diff::matmul(t.constant(x), in[0]));
    diff::Value l1 = weighted_sum(t, diff::softmax_rows(diff::matmul(h, t.constant(a.transpose() * a))));
    diff::Value l2 = diff::sum(diff::mul(diff::matmul(h, t.constant(b.transpose() * b)), h));
    auto g1 = t.gradients(l1, std::span<const diff::Value>(&h, 1)).front();
    auto g2 = t.gradients(l2, std::span<const diff::Value>(&h, 1)).front();
    return diff::flat_cosine(g1, g2);
  };
  auto res = check_gradients(fn, {random_matrix(4, 2, rng)});
  EXPECT_LT(res.max_rel_error, 1e-5);
}

TEST(DiffcoreGradients, GradScaleScalesOnlyTheBackwardPass) {
  diff::Tape t;
  diff::Value x = t.parameter("x", mat({{1.5, -2.0}}));
  diff::Value y = diff::grad_scale(x, 0.25);
  EXPECT_EQ(y.data(), x.data());
  auto g = t.backward(diff::sum(diff::mul(y, y)));
  EXPECT_DOUBLE_EQ(g.at("x")(0, 0), 0.25 * 3.0);
  EXPECT_DOUBLE_EQ(g.at("x")(0, 1), 0.25 * -4.0);
}

TEST(DiffcoreGradients, StopGradientBlocksFlow) {
  diff::Tape t;
  diff::Value x = t.parameter("x", mat({{2.0}}));
  auto g = t.backward(diff::mul(diff::stop_gradient(x), x));
  EXPECT_DOUBLE_EQ(g.at("x")(0, 0), 2.0);
}

TEST(DiffcoreGradients, LinearityOfReversePass) {
  std::mt19937_64 rng(21);
  Matrix x0 = random_matrix(3, 3, rng);
  auto grad_of = [&](double a, double b) {
    diff::Tape t;
    diff::Value x = t.parameter("x", x0);
    diff::Value f = diff::sum(diff::sigmoid(x));
    diff::Value g = diff::sum(diff::mul(x, x));
    return t.backward(diff::add(diff::scale(f, a), diff::scale(g, b))).at("x");
  };
  Matrix combined = grad_of(2.0, -0.5);
  Matrix separate = 2.0 * grad_of(1.0, 0.0) - 0.5 * grad_of(0.0, 1.0);
  EXPECT_LT((combined - separate).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DiffcoreOps, MatmulWorkedCases) {
  diff::Tape t;
  auto id = diff::matmul(t.constant(Matrix::Identity(2, 2)), t.constant(mat({{1, 2}, {3, 4}})));
  EXPECT_EQ(id.data(), mat({{1, 2}, {3, 4}}));
  auto sel = diff::matmul(t.constant(mat({{1, 0}})), t.constant(mat({{5}, {7}})));
  EXPECT_EQ(sel.data(), mat({{5}}));
  EXPECT_THROW(diff::matmul(t.constant(Matrix::Ones(2, 3)), t.constant(Matrix::Ones(2, 3))), mf::ShapeError);
}

TEST(DiffcoreOps, ElementwiseWorkedCases) {
  diff::Tape t;
  EXPECT_DOUBLE_EQ(diff::sigmoid(t.constant(mat({{0.0}}))).item(), 0.5);
  diff::Value x = t.parameter("x", mat({{-3.0}}));
  diff::Value y = diff::relu(x);
  EXPECT_EQ(y.item(), 0.0);
  auto g = t.backward(y);
  EXPECT_EQ(g.at("x")(0, 0), 0.0);
  EXPECT_THROW(diff::add(t.constant(Matrix::Ones(1, 2)), t.constant(Matrix::Ones(2, 1))), mf::ShapeError);
}

TEST(DiffcoreOps, ElementwiseDispatch) {
  diff::Tape t;
  std::array<diff::Value, 2> in{t.constant(mat({{1, -2}})), t.constant(mat({{3, 4}}))};
  EXPECT_EQ(diff::elementwise(diff::Elementwise::add, in).data(), mat({{4, 2}}));
  EXPECT_EQ(diff::elementwise(diff::Elementwise::mul, in).data(), mat({{3, -8}}));
  std::span<const diff::Value> one(in.data(), 1);
  EXPECT_EQ(diff::elementwise(diff::Elementwise::relu, one).data(), mat({{1, 0}}));
  EXPECT_EQ(diff::elementwise(diff::Elementwise::scale, one, 2.0).data(), mat({{2, -4}}));
  EXPECT_THROW(diff::elementwise(diff::Elementwise::add, one), mf::ContractError);
}

TEST(DiffcoreOps, SoftmaxRows) {
  diff::Tape t;
  auto u = diff::softmax_rows(t.constant(mat({{0, 0, 0}})));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(u.data()(0, c), 1.0 / 3.0, 1e-15);
  auto big = diff::softmax_rows(t.constant(mat({{1000, 0}})));
  EXPECT_TRUE(big.data().allFinite());
  EXPECT_NEAR(big.data()(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(big.data()(0, 1), 0.0, 1e-15);
  std::mt19937_64 rng(3);
  auto r = diff::softmax_rows(t.constant(random_matrix(4, 5, rng, -5, 5)));
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(r.data().row(i).sum(), 1.0, 1e-12);
  EXPECT_THROW(diff::softmax_rows(t.constant(mat({{std::nan(""), 0}}))), mf::NumericError);
}

TEST(DiffcoreOps, CrossEntropyWorkedCases) {
  diff::Tape t;
  std::vector<int> zero{0};
  EXPECT_DOUBLE_EQ(diff::cross_entropy(t.constant(mat({{1, 0}})), zero).item(), 0.0);
  EXPECT_NEAR(diff::cross_entropy(t.constant(mat({{0.5, 0.5}})), zero).item(), 0.693147, 1e-6);
  EXPECT_TRUE(std::isfinite(diff::cross_entropy(t.constant(mat({{0, 1}})), zero).item()));
  std::vector<int> bad{2};
  EXPECT_THROW(diff::cross_entropy(t.constant(mat({{0.5, 0.5}})), bad), mf::InputError);
  std::vector<int> two{0, 1};
  EXPECT_THROW(diff::cross_entropy(t.constant(mat({{0.5, 0.5}})), two), mf::ShapeError);
}

TEST(DiffcoreTape, QuadraticAndUnreachableLeaf) {
  diff::Tape t;
  diff::Value x = t.parameter("x", mat({{3.0}}));
  diff::Value y = t.parameter("y", mat({{5.0}}));
  auto g = t.backward(diff::mul(x, x));
  EXPECT_DOUBLE_EQ(g.at("x")(0, 0), 6.0);
  EXPECT_DOUBLE_EQ(g.at("y")(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(y.grad()(0, 0), 0.0);
}

TEST(DiffcoreTape, ReverseTwiceIsAStateError) {
  diff::Tape t;
  diff::Value x = t.parameter("x", mat({{1.0}}));
  diff::Value loss = diff::mul(x, x);
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), mf::StateError);
}

TEST(DiffcoreTape, ContractViolations) {
  diff::Tape t;
  diff::Value x = t.parameter("x", Matrix::Ones(2, 2));
  EXPECT_THROW(t.parameter("x", Matrix::Ones(1, 1)), mf::ContractError);
  EXPECT_THROW(t.backward(x), mf::ContractError);
  EXPECT_THROW(x.grad(), mf::StateError);
  diff::Tape other;
  EXPECT_THROW(diff::add(x, other.constant(Matrix::Ones(2, 2))), mf::ContractError);
}

TEST(DiffcoreCosine, WorkedCases) {
  std::vector<double> g{1.0, -2.0, 0.5}, neg{-1.0, 2.0, -0.5}, a{1, 0}, b{0, 1}, z{0, 0};
  EXPECT_DOUBLE_EQ(diff::flat_cosine(g, g), 1.0);
  EXPECT_DOUBLE_EQ(diff::flat_cosine(g, neg), 0.0);
  EXPECT_DOUBLE_EQ(diff::flat_cosine(a, b), 0.5);
  EXPECT_DOUBLE_EQ(diff::flat_cosine(a, z), 0.5);
  std::vector<double> short_vec{1.0};
  EXPECT_THROW(diff::flat_cosine(g, short_vec), mf::ShapeError);

  diff::Tape t;
  diff::Value va = t.constant(mat({{1, -2, 0.5}}));
  EXPECT_NEAR(diff::flat_cosine(va, va).item(), 1.0, 1e-15);
  EXPECT_NEAR(diff::flat_cosine(va, diff::scale(va, -1)).item(), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(diff::flat_cosine(va, t.constant(Matrix::Zero(1, 3))).item(), 0.5);
}

TEST(DiffcoreCosine, FlattenGroup) {
  diff::GradientMap g{{"a", mat({{1, 2}, {3, 4}})}, {"b", mat({{5}})}};
  diff::ParamGroup group{"grp", {"b", "a"}};
  EXPECT_EQ(diff::flatten_group(g, group), (std::vector<double>{5, 1, 2, 3, 4}));
  diff::ParamGroup missing{"grp", {"c"}};
  EXPECT_THROW(diff::flatten_group(g, missing), mf::ContractError);
}
