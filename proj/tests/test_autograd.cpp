#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>

#include "gdream/autograd.hpp"
#include "gdream/error.hpp"
#include "gdream/rng.hpp"

using namespace gdream;
using namespace gdream::ag;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double spread = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * spread;
  }
  return m;
}

// Reduces any output to a scalar with fixed random weights so that every
// output entry contributes a distinct amount.
Var reduce(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix w = random_matrix(rng, y.rows(), y.cols());
  return weighted_squared_error(y, Matrix::Zero(y.rows(), y.cols()), w.cwiseAbs() + Matrix::Ones(y.rows(), y.cols()));
}

// Largest relative gap between analytic and central-difference gradients of
// `build` over all entries of all leaves.
double gradient_gap(std::vector<Matrix> leaves, const std::function<Var(const std::vector<Var>&)>& build,
                    double h = 1e-6) {
  std::vector<Var> params;
  for (const auto& m : leaves) params.push_back(parameter(m));
  const Var root = build(params);
  backward(root);
  double worst = 0.0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    const Matrix analytic = params[p].grad();
    const double scale = std::max(analytic.cwiseAbs().maxCoeff(), 1e-3);
    for (Eigen::Index k = 0; k < leaves[p].size(); ++k) {
      auto eval = [&](double delta) {
        NoGradGuard guard;
        std::vector<Var> shifted;
        for (std::size_t q = 0; q < leaves.size(); ++q) {
          Matrix m = leaves[q];
          if (q == p) m.data()[k] += delta;
          shifted.push_back(constant(m));
        }
        return build(shifted).scalar();
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      const double a = analytic.data()[k];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4 * scale}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and linear ops") {
  Rng rng(1);
  const Matrix x = random_matrix(rng, 4, 3);
  const Matrix w = random_matrix(rng, 3, 5);
  const Matrix b = random_matrix(rng, 1, 5);
  const Matrix m = random_matrix(rng, 4, 3);

  CHECK(gradient_gap({x, w}, [](const auto& v) { return reduce(matmul(v[0], v[1]), 2); }) < 1e-6);
  CHECK(gradient_gap({x, w, b}, [](const auto& v) { return reduce(linear(v[0], v[1], v[2]), 3); }) < 1e-6);
  CHECK(gradient_gap({x, m}, [](const auto& v) { return reduce(add(v[0], v[1]), 4); }) < 1e-6);
  CHECK(gradient_gap({x, m}, [](const auto& v) { return reduce(sub(v[0], v[1]), 5); }) < 1e-6);
  CHECK(gradient_gap({x}, [](const auto& v) { return reduce(scale(v[0], -1.7), 6); }) < 1e-6);
  CHECK(gradient_gap({x, Matrix(b.leftCols(3))}, [](const auto& v) { return reduce(add_row(v[0], v[1]), 7); }) <
        1e-6);
  CHECK(gradient_gap({x}, [&](const auto& v) { return reduce(mul_const(v[0], m), 8); }) < 1e-6);
  CHECK(gradient_gap({x}, [&](const auto& v) { return reduce(add_const(v[0], m), 9); }) < 1e-6);
  CHECK(gradient_gap({x}, [](const auto& v) { return reduce(mask_rows(v[0], {1, 0, 1, 1}), 10); }) < 1e-6);
  CHECK(gradient_gap({x}, [](const auto& v) { return reduce(gelu(v[0]), 11); }) < 1e-6);
  CHECK(gradient_gap({x}, [](const auto& v) { return reduce(silu(v[0]), 12); }) < 1e-6);
  CHECK(gradient_gap({x, m}, [](const auto& v) { return reduce(concat_cols({v[0], v[1], v[0]}), 13); }) < 1e-6);
}

TEST_CASE("layer norm") {
  Rng rng(2);
  const Matrix x = random_matrix(rng, 5, 6, 2.0);
  const Matrix g = random_matrix(rng, 1, 6);
  const Matrix b = random_matrix(rng, 1, 6);
  CHECK(gradient_gap({x, g, b}, [](const auto& v) { return reduce(layer_norm(v[0], v[1], v[2]), 14); }) < 1e-5);

  const Var y = layer_norm(constant(x), constant(Matrix::Ones(1, 6)), constant(Matrix::Zero(1, 6)), 0.0);
  for (Eigen::Index r = 0; r < 5; ++r) {
    CHECK(std::abs(y.value().row(r).mean()) < 1e-12);
    CHECK(std::abs(y.value().row(r).squaredNorm() / 6.0 - 1.0) < 1e-12);
  }
}

TEST_CASE("scalar heads") {
  Rng rng(3);
  const Matrix x = random_matrix(rng, 3, 4);
  const Matrix target = random_matrix(rng, 3, 4);
  const Matrix weight = random_matrix(rng, 3, 4).cwiseAbs();
  CHECK(gradient_gap({x}, [&](const auto& v) { return weighted_squared_error(v[0], target, weight); }) < 1e-6);

  const Var p = parameter(x);
  const Matrix fixed = random_matrix(rng, 3, 4);
  const Var total = add_scalars({external(p, 2.5, fixed), scale(weighted_squared_error(p, target, weight), 3.0)});
  CHECK(total.scalar() == doctest::Approx(2.5 + 3.0 * (weight.array() * (x - target).array().square()).sum()));
  backward(total);
  const Matrix expected = fixed + 6.0 * weight.cwiseProduct(x - target);
  CHECK((p.grad() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("shared subexpressions accumulate") {
  const Var a = parameter(Matrix::Constant(1, 1, 3.0));
  const Var b = add(a, a);
  const Var c = matmul(b, b);  // 4 a^2
  backward(c);
  CHECK(c.scalar() == 36.0);
  CHECK(a.grad()(0, 0) == 24.0);
}

TEST_CASE("no-grad guard skips the tape") {
  const Var a = parameter(Matrix::Ones(2, 2));
  {
    NoGradGuard guard;
    const Var b = scale(a, 2.0);
    CHECK_FALSE(b.requires_grad());
    CHECK(b.node()->inputs.empty());
  }
  CHECK(scale(a, 2.0).requires_grad());
}

TEST_CASE("dropout") {
  Rng rng(4);
  const Var x = constant(Matrix::Ones(200, 50));
  CHECK(dropout(x, 0.0, rng).node() == x.node());
  const Var y = dropout(x, 0.25, rng);
  const double zeros = (y.value().array() == 0.0).cast<double>().sum() / 10000.0;
  CHECK(zeros == doctest::Approx(0.25).epsilon(0.1));
  CHECK(y.value().sum() / 10000.0 == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ConfigError);
}

TEST_CASE("grouped attention gradients") {
  Rng rng(5);
  const int heads = 2;
  const Matrix q = random_matrix(rng, 6, 4);
  const Matrix k = random_matrix(rng, 5, 4);
  const Matrix v = random_matrix(rng, 5, 4);
  const Matrix eq = random_matrix(rng, 4, 4);
  const Matrix ek = random_matrix(rng, 4, 4);
  auto groups = std::make_shared<std::vector<AttentionGroup>>();
  AttentionGroup first{{0, 1, 2}, {0, 1, 2}, {}, {}};
  for (int i = 0; i < 9; ++i) first.codes.push_back(static_cast<std::uint8_t>(rng.index(4)));
  // Row 2 sees only key 4; row 3 sees nothing.
  AttentionGroup second{{2, 3, 4}, {3, 4, 1}, {1, 0, 1, 0, 1, 0, 0, 0, 0}, {}};
  for (int i = 0; i < 9; ++i) second.codes.push_back(static_cast<std::uint8_t>(rng.index(4)));
  second.allowed = {1, 1, 0, 0, 0, 0, 1, 1, 1};
  groups->push_back(first);
  groups->push_back(second);

  auto build = [&](const std::vector<Var>& p) {
    AttentionInputs in{p[0], p[1], p[2], heads, p[3], p[4]};
    return reduce(grouped_attention(in, groups), 15);
  };
  CHECK(gradient_gap({q, k, v, eq, ek}, build) < 1e-6);

  AttentionTrace trace;
  const Var out = grouped_attention({constant(q), constant(k), constant(v), heads, constant(eq), constant(ek)},
                                    groups, &trace);
  REQUIRE(trace.blocks.size() == 4);
  for (const auto& block : trace.blocks) {
    for (Eigen::Index i = 0; i < block.weights.rows(); ++i) {
      const double sum = block.weights.row(i).sum();
      if (block.group == 1 && i == 1) {
        CHECK(sum == 0.0);
      } else {
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
  // Row 5 is in no group.
  CHECK(out.value().row(5).isZero(0.0));
  // Row 3 sees no key.
  CHECK(out.value().row(3).isZero(0.0));
}

TEST_CASE("grouped attention argument checks") {
  const Var q = constant(Matrix::Ones(2, 4));
  auto groups = std::make_shared<std::vector<AttentionGroup>>();
  groups->push_back({{0, 1}, {0, 1}, {}, {0, 1, 2, 9}});
  const Var e = constant(Matrix::Zero(4, 4));
  CHECK_THROWS_AS(grouped_attention({q, q, q, 2, e, e}, groups), DomainError);
  CHECK_THROWS_AS(grouped_attention({q, q, q, 3}, groups), ConfigError);
  auto bad_rows = std::make_shared<std::vector<AttentionGroup>>();
  bad_rows->push_back({{0, 7}, {0}, {}, {}});
  CHECK_THROWS_AS(grouped_attention({q, q, q, 2}, bad_rows), ShapeError);
}
