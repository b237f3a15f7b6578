#include <doctest.h>

#include <cmath>
#include <vector>

#include "core/diffmath.hpp"
#include "core/matrix.hpp"
#include "core/rng.hpp"
#include "core/tape.hpp"

using ima::Matrix;
using ima::ad::Tape;
using ima::ad::Var;

namespace {

// Numeric oracles: central differences, independent of the tape engine.

Matrix numeric_jacobian(const std::function<std::vector<double>(const std::vector<double>&)>& fn,
                        std::vector<double> point, double step) {
  const int n = static_cast<int>(point.size());
  const int m = static_cast<int>(fn(point).size());
  Matrix jac(m, n);
  for (int j = 0; j < n; ++j) {
    const double saved = point[j];
    point[j] = saved + step;
    const std::vector<double> up = fn(point);
    point[j] = saved - step;
    const std::vector<double> down = fn(point);
    point[j] = saved;
    for (int i = 0; i < m; ++i) jac(i, j) = (up[i] - down[i]) / (2.0 * step);
  }
  return jac;
}

std::vector<double> numeric_grad(const std::function<double(const std::vector<double>&)>& fn,
                                 std::vector<double> params, double step) {
  std::vector<double> g(params.size());
  for (std::size_t j = 0; j < params.size(); ++j) {
    const double saved = params[j];
    params[j] = saved + step;
    const double up = fn(params);
    params[j] = saved - step;
    const double down = fn(params);
    params[j] = saved;
    g[j] = (up - down) / (2.0 * step);
  }
  return g;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) worst = std::max(worst, std::abs(a(i, j) - b(i, j)));
  return worst;
}

Matrix random_well_conditioned(int n, std::uint64_t seed) {
  ima::Rng rng(seed);
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = 0.4 * rng.normal() + (i == j ? 3.0 : 0.0);
  return m;
}

}  // namespace

TEST_CASE("jacobian: identity map gives identity matrix") {
  ima::diffmath::VectorFn id = [](std::span<const Var> in, std::span<Var> out) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i];
  };
  const std::vector<double> point = {0.3, -1.7, 4.0};
  const Matrix jac = ima::diffmath::jacobian(id, point);
  CHECK(max_abs_diff(jac, Matrix::identity(3)) == 0.0);
}

TEST_CASE("jacobian: hand-differentiated square/identity pair") {
  ima::diffmath::VectorFn fn = [](std::span<const Var> in, std::span<Var> out) {
    out[0] = in[0] * in[0];
    out[1] = in[1];
  };
  const std::vector<double> point = {3.0, 1.0};
  const Matrix jac = ima::diffmath::jacobian(fn, point);
  CHECK(jac(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
  CHECK(jac(0, 1) == 0.0);
  CHECK(jac(1, 0) == 0.0);
  CHECK(jac(1, 1) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("jacobian: linear map reproduces its matrix exactly") {
  const Matrix a = random_well_conditioned(4, 11);
  ima::diffmath::VectorFn fn = [&a](std::span<const Var> in, std::span<Var> out) {
    for (int i = 0; i < a.rows(); ++i) {
      Var acc = 0.0;
      for (int j = 0; j < a.cols(); ++j) acc = acc + a(i, j) * in[j];
      out[i] = acc;
    }
  };
  const std::vector<double> point = {1.0, -2.0, 0.5, 3.0};
  CHECK(max_abs_diff(ima::diffmath::jacobian(fn, point), a) == 0.0);
}

TEST_CASE("jacobian: random 2-layer MLP matches central finite differences") {
  const int n = 3;
  ima::Rng rng(42);
  Matrix w1(n, n), w2(n, n);
  std::vector<double> b1(n), b2(n);
  for (int i = 0; i < n; ++i) {
    b1[i] = 0.3 * rng.normal();
    b2[i] = 0.3 * rng.normal();
    for (int j = 0; j < n; ++j) {
      w1(i, j) = rng.normal();
      w2(i, j) = rng.normal();
    }
  }

  auto mlp_values = [&](const std::vector<double>& x) {
    std::vector<double> h(n), y(n);
    for (int i = 0; i < n; ++i) {
      double acc = b1[i];
      for (int j = 0; j < n; ++j) acc += w1(i, j) * x[j];
      h[i] = std::tanh(acc);
    }
    for (int i = 0; i < n; ++i) {
      double acc = b2[i];
      for (int j = 0; j < n; ++j) acc += w2(i, j) * h[j];
      y[i] = std::tanh(acc);
    }
    return y;
  };
  ima::diffmath::VectorFn mlp_vars = [&](std::span<const Var> x, std::span<Var> out) {
    std::vector<Var> h(n);
    for (int i = 0; i < n; ++i) {
      Var acc = b1[i];
      for (int j = 0; j < n; ++j) acc = acc + w1(i, j) * x[j];
      h[i] = tanh(acc);
    }
    for (int i = 0; i < n; ++i) {
      Var acc = b2[i];
      for (int j = 0; j < n; ++j) acc = acc + w2(i, j) * h[j];
      out[i] = tanh(acc);
    }
  };

  const std::vector<double> point = {0.2, -0.5, 0.9};
  const Matrix exact = ima::diffmath::jacobian(mlp_vars, point);
  const Matrix numeric = numeric_jacobian(mlp_values, point, 1e-5);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double denom = std::max(std::abs(numeric(i, j)), 1e-6);
      CHECK(std::abs(exact(i, j) - numeric(i, j)) / denom < 1e-5);
    }
}

TEST_CASE("jacobian: non-finite output names the offending coordinate") {
  ima::diffmath::VectorFn fn = [](std::span<const Var> in, std::span<Var> out) {
    out[0] = in[0];
    out[1] = log(in[1]);  // -inf at 0
  };
  const std::vector<double> point = {1.0, 0.0};
  CHECK_THROWS_WITH_AS(ima::diffmath::jacobian(fn, point),
                       doctest::Contains("coordinate 1"), ima::DomainError);
}

TEST_CASE("logabsdet: closed forms") {
  Tape tape;
  SUBCASE("identity is zero") {
    ima::ADMatrix m(3, 3, Var(0.0));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m(i, j) = tape.leaf(i == j ? 1.0 : 0.0);
    CHECK(ima::logabsdet(m).value() == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("diag(2,3) gives log 6") {
    Matrix m(2, 2);
    m(0, 0) = 2.0;
    m(1, 1) = 3.0;
    CHECK(ima::logabsdet(m) == doctest::Approx(std::log(6.0)).epsilon(1e-14));
    CHECK(ima::logabsdet(m) == doctest::Approx(1.7918).epsilon(1e-4));
  }
}

TEST_CASE("logabsdet: gradient equals inverse transpose and matches finite differences") {
  const Matrix m = random_well_conditioned(3, 7);
  std::vector<double> params(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) params[3 * i + j] = m(i, j);

  ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) {
    ima::ADMatrix mat(3, 3, Var(0.0));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mat(i, j) = p[3 * i + j];
    return ima::logabsdet(mat);
  };

  const std::vector<double> g = ima::diffmath::grad(loss, params);
  const Matrix inv = ima::matinv(m);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(g[3 * i + j] == doctest::Approx(inv(j, i)).epsilon(1e-9));

  const auto report = ima::diffmath::finite_diff_check(loss, params, 1e-5, 1e-4);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("logabsdet: singular matrix raises with a condition estimate") {
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 2.0;
  m(1, 0) = 2.0;
  m(1, 1) = 4.0;
  try {
    ima::logabsdet(m);
    FAIL("expected SingularJacobian");
  } catch (const ima::SingularJacobian& e) {
    CHECK(e.condition_estimate() > 1e6);
  }
}

TEST_CASE("logabsdet: additive over products") {
  const Matrix a = random_well_conditioned(4, 21);
  const Matrix b = random_well_conditioned(4, 22);
  const double lhs = ima::logabsdet(ima::matmul(a, b));
  const double rhs = ima::logabsdet(a) + ima::logabsdet(b);
  CHECK(std::abs(lhs - rhs) < 1e-10);
}

TEST_CASE("matinv: closed forms and inverse property") {
  SUBCASE("identity") {
    const Matrix inv = ima::matinv(Matrix::identity(3));
    CHECK(max_abs_diff(inv, Matrix::identity(3)) < 1e-14);
  }
  SUBCASE("diag(2,4)") {
    Matrix m(2, 2);
    m(0, 0) = 2.0;
    m(1, 1) = 4.0;
    const Matrix inv = ima::matinv(m);
    CHECK(inv(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(inv(1, 1) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(inv(0, 1) == 0.0);
    CHECK(inv(1, 0) == 0.0);
  }
  SUBCASE("m times matinv(m) is identity within 1e-10") {
    const Matrix m = random_well_conditioned(5, 33);
    CHECK(max_abs_diff(ima::matmul(m, ima::matinv(m)), Matrix::identity(5)) < 1e-10);
  }
  SUBCASE("double inverse returns the original within 1e-8") {
    const Matrix m = random_well_conditioned(4, 44);
    CHECK(max_abs_diff(ima::matinv(ima::matinv(m)), m) < 1e-8);
  }
  SUBCASE("singular raises") {
    Matrix m(2, 2);
    m(0, 0) = 1.0;
    m(0, 1) = 1.0;
    m(1, 0) = 1.0;
    m(1, 1) = 1.0;
    CHECK_THROWS_AS(ima::matinv(m), ima::SingularJacobian);
  }
}

TEST_CASE("matinv: gradient of a scalar function of the inverse matches finite differences") {
  const Matrix m = random_well_conditioned(3, 55);
  const Matrix c = random_well_conditioned(3, 56);
  std::vector<double> params(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) params[3 * i + j] = m(i, j);

  ima::diffmath::LossFn loss = [&c](Tape&, std::span<const Var> p) {
    ima::ADMatrix mat(3, 3, Var(0.0));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) mat(i, j) = p[3 * i + j];
    const ima::ADMatrix inv = ima::matinv(mat);
    Var acc = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) acc = acc + c(i, j) * inv(i, j);
    return acc;
  };

  const auto report = ima::diffmath::finite_diff_check(loss, params, 1e-5, 1e-4);
  INFO("max rel error ", report.max_rel_error, " at coordinate ", report.worst_coordinate);
  CHECK(report.pass);
}

TEST_CASE("grad: scalar closed forms") {
  SUBCASE("x squared at 3") {
    ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) { return p[0] * p[0]; };
    const std::vector<double> params = {3.0};
    const auto g = ima::diffmath::grad(loss, params);
    CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-14));
  }
  SUBCASE("logabsdet of a parameter matrix at identity has identity gradient") {
    ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) {
      ima::ADMatrix mat(3, 3, Var(0.0));
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) mat(i, j) = p[3 * i + j];
      return ima::logabsdet(mat);
    };
    std::vector<double> params(9, 0.0);
    params[0] = params[4] = params[8] = 1.0;
    const auto g = ima::diffmath::grad(loss, params);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(g[3 * i + j] == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
  }
}

TEST_CASE("grad: column-norm vs log-determinant contrast of a parameter Jacobian") {
  // sum_j log ||col_j|| - log|det J|, the local objective the engine must
  // differentiate end to end.
  ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) {
    ima::ADMatrix jac(2, 2, Var(0.0));
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) jac(i, j) = p[2 * i + j];
    Var acc = 0.0;
    for (int j = 0; j < 2; ++j) acc = acc + log(ima::column_norm(jac, j));
    return acc - ima::logabsdet(jac);
  };
  const std::vector<double> params = {1.2, 0.3, -0.4, 0.9};
  const auto report = ima::diffmath::finite_diff_check(loss, params, 1e-5, 1e-4);
  INFO("max rel error ", report.max_rel_error, " at coordinate ", report.worst_coordinate);
  CHECK(report.pass);
}

TEST_CASE("finite_diff_check: quadratic loss passes tightly") {
  ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) {
    Var acc = 0.0;
    for (const Var& x : p) acc = acc + x * x;
    return acc;
  };
  const std::vector<double> params = {1.0, -2.0, 0.5};
  const auto report = ima::diffmath::finite_diff_check(loss, params, 1e-5, 1e-8);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("finite_diff_check: broken gradient fails and names the worst coordinate") {
  // Coordinate 0 contributes to the value through an untracked constant, so
  // its recorded derivative is zero while the numeric one is not.
  ima::diffmath::LossFn loss = [](Tape&, std::span<const Var> p) {
    const Var detached(ima::ad::value_of(p[0]) * ima::ad::value_of(p[0]));
    return detached + p[1] * p[1];
  };
  const std::vector<double> params = {2.0, 1.0};
  const auto report = ima::diffmath::finite_diff_check(loss, params, 1e-5, 1e-4);
  CHECK_FALSE(report.pass);
  CHECK(report.worst_coordinate == 0);
  CHECK(report.analytic_at_worst == 0.0);
  CHECK(report.numeric_at_worst == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("tape: fused dot agrees with unfused accumulation") {
  Tape tape;
  std::vector<Var> a, b;
  ima::Rng rng(99);
  std::vector<double> av(6), bv(6);
  for (int i = 0; i < 6; ++i) {
    av[i] = rng.normal();
    bv[i] = rng.normal();
    a.push_back(tape.leaf(av[i]));
    b.push_back(tape.leaf(bv[i]));
  }
  const Var fused = ima::ad::dot(std::span<const Var>(a), std::span<const Var>(b));
  double manual = 0.0;
  for (int i = 0; i < 6; ++i) manual += av[i] * bv[i];
  CHECK(fused.value() == doctest::Approx(manual).epsilon(1e-14));

  tape.backward(fused.index());
  for (int i = 0; i < 6; ++i) {
    CHECK(tape.adjoint(a[i]) == doctest::Approx(bv[i]).epsilon(1e-14));
    CHECK(tape.adjoint(b[i]) == doctest::Approx(av[i]).epsilon(1e-14));
  }
}

TEST_CASE("tape: constants fold without allocating nodes") {
  Tape tape;
  const Var x = tape.leaf(2.0);
  const std::size_t before = tape.node_count();
  const Var c = Var(3.0) * Var(4.0) + Var(1.0);  // pure constants
  CHECK(c.value() == 13.0);
  CHECK(tape.node_count() == before);
  const Var y = x * 2.0 + 1.0;
  CHECK(y.value() == 5.0);
  tape.backward(y.index());
  CHECK(tape.adjoint(x) == 2.0);
}
