#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "scriptgen/autograd.hpp"

using namespace scriptgen::autograd;

namespace {

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Reduces any output to a scalar with fixed random weights, then compares
// tape gradients with central differences.
double check(ParameterSet& params, const Build& build, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Matrix probe;
  auto loss = [&](Tape& tape) {
    std::vector<Var> leaves;
    for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.parameter(params, i));
    const Var out = build(tape, leaves);
    if (probe.size() == 0) probe = random_matrix(rng, tape.rows(out), tape.cols(out));
    const Var weighted = tape.mul_constant(out, probe);
    const Var col = tape.matmul(tape.constant(Matrix::Ones(1, tape.rows(out))), weighted);
    return tape.matmul(col, tape.constant(Matrix::Ones(tape.cols(out), 1)));
  };
  auto grads = params.zeros_like();
  {
    Tape tape;
    const Var l = loss(tape);
    tape.backward(l, grads);
  }
  double worst = 0.0;
  const double eps = 1e-6;
  for (std::size_t s = 0; s < params.size(); ++s) {
    for (Eigen::Index i = 0; i < params.value(s).size(); ++i) {
      double& x = params.value(s).data()[i];
      const double saved = x;
      x = saved + eps;
      Tape t1;
      const double up = t1.scalar_value(loss(t1));
      x = saved - eps;
      Tape t2;
      const double down = t2.scalar_value(loss(t2));
      x = saved;
      const double fd = (up - down) / (2 * eps);
      const double g = grads[s].data()[i];
      worst = std::max(worst, std::abs(fd - g) / std::max(1.0, std::abs(fd) + std::abs(g)));
    }
  }
  return worst;
}

ParameterSet make(std::initializer_list<std::pair<Eigen::Index, Eigen::Index>> shapes, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  ParameterSet p;
  int i = 0;
  for (auto [r, c] : shapes) p.add("p" + std::to_string(i++), random_matrix(rng, r, c));
  return p;
}

}  // namespace

TEST_CASE("parameter set basics") {
  ParameterSet p;
  CHECK(p.add("a", Matrix::Zero(2, 3)) == 0);
  CHECK(p.add("b", Matrix::Zero(1, 1)) == 1);
  CHECK(p.scalar_count() == 7);
  CHECK(p.slot("b") == 1);
  CHECK_THROWS(p.slot("c"));
  const auto z = p.zeros_like();
  CHECK(z[0].rows() == 2);
  CHECK(z[0].cols() == 3);
}

TEST_CASE("elementwise and matrix ops") {
  auto p = make({{3, 4}, {4, 2}, {3, 4}, {1, 4}});
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.matmul_nt(v[0], v[2]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.sub(t.add(v[0], v[2]), t.scale(v[0], 0.3)); }) <
        1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.add_row(v[0], v[3]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.gelu(v[0]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.sigmoid(v[2]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.mean_rows(v[0]); }) < 1e-8);
}

TEST_CASE("layer norm and softmax") {
  auto p = make({{3, 5}, {1, 5}, {1, 5}, {4, 4}});
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.layer_norm(v[0], v[1], v[2]); }) < 1e-7);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.softmax_rows(v[3]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.softmax_rows(v[3], true); }) < 1e-8);
  Tape tape;
  const Var s = tape.softmax_rows(tape.parameter(p, 3), true);
  const Matrix& m = tape.value(s);
  for (Eigen::Index r = 0; r < 4; ++r) {
    CHECK(m.row(r).sum() == doctest::Approx(1.0));
    for (Eigen::Index c = r + 1; c < 4; ++c) CHECK(m(r, c) == 0.0);
  }
}

TEST_CASE("slicing, concatenation and gathers") {
  auto p = make({{4, 6}, {2, 6}, {4, 1}, {5, 3}});
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.slice_rows(v[0], 1, 2); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.slice_cols(v[0], 2, 3); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.concat_rows({v[0], v[1], v[0]}); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.concat_cols({v[0], v[2]}); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.gather_rows(v[3], {4, 0, 4, 2}); }) < 1e-8);
}

TEST_CASE("gating blends") {
  auto p = make({{1, 1}, {1, 3}, {4, 3}, {4, 1}, {4, 3}});
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.blend(t.sigmoid(v[0]), v[1], v[2]); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.row_blend(t.sigmoid(v[3]), v[2], v[4]); }) <
        1e-8);
  Tape tape;
  const Var b = tape.blend(tape.scalar(0.0), tape.parameter(p, 1), tape.parameter(p, 2));
  CHECK(tape.value(b) == p.value(2));
}

TEST_CASE("losses") {
  auto p = make({{3, 5}, {1, 6}});
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.cross_entropy(v[0], {1, 0, 4}, -1); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.cross_entropy(v[0], {1, 0, 4}, 0); }) < 1e-8);
  CHECK(check(p, [](Tape& t, const std::vector<Var>& v) { return t.info_nce(v[1], 0.7); }) < 1e-8);
  Tape tape;
  CHECK(tape.scalar_value(tape.info_nce(tape.constant(Matrix::Zero(1, 6)), 1.0)) ==
        doctest::Approx(std::log(6.0)).epsilon(1e-14));
}

TEST_CASE("gradients accumulate across shared uses") {
  ParameterSet p;
  p.add("x", Matrix::Constant(1, 1, 3.0));
  Tape tape;
  const Var x = tape.parameter(p, 0);
  CHECK(tape.parameter(p, 0).id == x.id);
  const Var y = tape.add(tape.matmul(x, x), x);  // x^2 + x
  auto grads = p.zeros_like();
  tape.backward(y, grads);
  CHECK(grads[0](0, 0) == doctest::Approx(7.0));
}
