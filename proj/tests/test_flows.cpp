#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "core/diffmath.hpp"
#include "core/flows.hpp"
#include "core/rng.hpp"

using namespace ima;
using flows::BaseKind;
using flows::FlowKind;
using flows::FlowModel;

namespace {

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Fresh build whose weights are replaced by larger random draws and then
/// re-normalized, standing in for a mid-training model.
FlowModel randomized_flow(int n, int blocks, int w, FlowKind kind, BaseKind base,
                          std::uint64_t seed, double weight_scale, double bias_scale) {
  FlowModel m = flows::build_flow(n, blocks, w, kind, base, seed);
  Rng rng(mix_seed(seed, 77));
  const double s1 = weight_scale / std::sqrt(static_cast<double>(n));
  const double sw = weight_scale / std::sqrt(static_cast<double>(w));
  for (flows::ResidualBlock& b : m.blocks) {
    rng.fill_uniform(b.w1.data(), -s1, s1);
    rng.fill_uniform(b.w2.data(), -sw, sw);
    rng.fill_uniform(b.w3.data(), -sw, sw);
    rng.fill_uniform(b.b1, -bias_scale, bias_scale);
    rng.fill_uniform(b.b2, -bias_scale, bias_scale);
    rng.fill_uniform(b.b3, -bias_scale, bias_scale);
  }
  // two passes so the warm-started norm estimates are sharp before use
  m.normalize_blocks();
  m.normalize_blocks();
  return m;
}

Matrix numeric_jacobian(const FlowModel& m, std::span<const double> x, double h) {
  const int n = m.cfg.n;
  Matrix jac(n, n);
  std::vector<double> xp(x.begin(), x.end());
  for (int j = 0; j < n; ++j) {
    xp[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] + h;
    const flows::ForwardEval fp = flows::flow_forward(m, xp);
    xp[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)] - h;
    const flows::ForwardEval fm = flows::flow_forward(m, xp);
    xp[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(j)];
    for (int i = 0; i < n; ++i)
      jac(i, j) = (fp.y[static_cast<std::size_t>(i)] - fm.y[static_cast<std::size_t>(i)]) / (2.0 * h);
  }
  return jac;
}

double quadrature_mass_2d(const FlowModel& m, double lo, double hi, int nodes) {
  const std::vector<double> flat = m.flatten();
  const double h = (hi - lo) / (nodes - 1);
  flows::detail::FlowScratch<double> scratch;
  double mass = 0.0;
  double x[2];
  for (int i = 0; i < nodes; ++i) {
    x[0] = lo + i * h;
    const double wi = i == 0 || i == nodes - 1 ? 0.5 : 1.0;
    double row = 0.0;
    for (int j = 0; j < nodes; ++j) {
      x[1] = lo + j * h;
      const double wj = j == 0 || j == nodes - 1 ? 0.5 : 1.0;
      const flows::FlowEval<double> ev =
          flows::flow_eval<double>(m.cfg, flat, std::span<const double>(x, 2), &scratch);
      row += wj * std::exp(flows::base_log_density(m.cfg.base, std::span<const double>(ev.y)) +
                           ev.log_det);
    }
    mass += wi * row;
  }
  return mass * h * h;
}

/// Smallest |g(x)| over the boundary of the square [lo,hi]^2; used to confirm
/// the quadrature box pushes forward past the base density's support.
double min_boundary_image_norm(const FlowModel& m, double lo, double hi, int nodes) {
  const double h = (hi - lo) / (nodes - 1);
  double lowest = INFINITY;
  double x[2];
  for (int i = 0; i < nodes; ++i) {
    const double t = lo + i * h;
    const double edges[4][2] = {{t, lo}, {t, hi}, {lo, t}, {hi, t}};
    for (const double* e : edges) {
      x[0] = e[0];
      x[1] = e[1];
      const flows::ForwardEval ev = flows::flow_forward(m, std::span<const double>(x, 2));
      lowest = std::min(lowest, norm2(ev.y));
    }
  }
  return lowest;
}

void zero_output_layers(FlowModel& m) {
  for (flows::ResidualBlock& b : m.blocks) {
    std::fill(b.w3.data().begin(), b.w3.data().end(), 0.0);
    std::fill(b.b3.begin(), b.b3.end(), 0.0);
  }
}

}  // namespace

TEST_CASE("fresh flows stay near the identity") {
  for (const int n : {2, 5}) {
    const FlowModel m = flows::build_flow(n, 10, 64, FlowKind::full, BaseKind::gaussian, 42);
    Rng rng(mix_seed(9001, static_cast<std::uint64_t>(n)));
    std::vector<double> x(static_cast<std::size_t>(n)), diff(static_cast<std::size_t>(n));
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      rng.fill_normal(x);
      const double r = norm2(x);
      // half the points on the sphere of radius 3, half strictly inside
      const double scale = (rep % 2 == 0 ? 3.0 : 3.0 * rng.uniform01()) / r;
      for (double& xi : x) xi *= scale;
      const flows::ForwardEval ev = flows::flow_forward(m, x);
      for (int i = 0; i < n; ++i)
        diff[static_cast<std::size_t>(i)] = ev.y[static_cast<std::size_t>(i)] - x[static_cast<std::size_t>(i)];
      worst = std::max(worst, norm2(diff));
    }
    INFO("n = ", n, ", worst deviation = ", worst);
    CHECK(worst < 0.5);
  }
}

TEST_CASE("same seed rebuilds identical parameters") {
  const FlowModel a = flows::build_flow(3, 4, 8, FlowKind::triangular, BaseKind::logistic, 7);
  const FlowModel b = flows::build_flow(3, 4, 8, FlowKind::triangular, BaseKind::logistic, 7);
  const FlowModel c = flows::build_flow(3, 4, 8, FlowKind::triangular, BaseKind::logistic, 8);
  CHECK(a.flatten() == b.flatten());
  CHECK(flows::flow_to_json(a) == flows::flow_to_json(b));
  CHECK(a.flatten() != c.flatten());
}

TEST_CASE("build_flow rejects bad configurations") {
  CHECK_THROWS_AS(flows::build_flow(3, 0, 8, FlowKind::full, BaseKind::gaussian, 1), ConfigError);
  CHECK_THROWS_AS(flows::build_flow(3, 2, 2, FlowKind::full, BaseKind::gaussian, 1), ConfigError);
  flows::FlowConfig cfg;
  cfg.n = 2;
  cfg.block_count = 1;
  cfg.hidden_width = 4;
  cfg.lipschitz = 1.0;
  CHECK_THROWS_AS(flows::build_flow(cfg), ConfigError);
}

TEST_CASE("triangular jacobians are lower-triangular exactly") {
  const FlowModel fresh = flows::build_flow(4, 3, 8, FlowKind::triangular, BaseKind::gaussian, 11);
  const FlowModel big =
      randomized_flow(4, 3, 8, FlowKind::triangular, BaseKind::gaussian, 12, 1.0, 0.4);
  Rng rng(555);
  std::vector<double> x(4);
  for (const FlowModel* m : {&fresh, &big}) {
    for (int rep = 0; rep < 20; ++rep) {
      rng.fill_normal(x);
      const flows::ForwardEval ev = flows::flow_forward(*m, x);
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) CHECK(ev.jac(i, j) == 0.0);
    }
  }
}

TEST_CASE("masked weight slots survive normalization as exact zeros") {
  const FlowModel m = randomized_flow(3, 2, 6, FlowKind::triangular, BaseKind::gaussian, 4, 1.0, 0.3);
  const std::vector<double> flat = m.flatten();
  const std::vector<std::uint8_t> slots = m.weight_slots();
  REQUIRE(flat.size() == slots.size());
  int masked_zeros = 0;
  std::size_t offset = 0;
  for (const flows::ResidualBlock& b : m.blocks) {
    const auto nn = static_cast<std::size_t>(b.n), ww = static_cast<std::size_t>(b.w);
    // weight entries with slot 0 are masked out; bias slots are also 0 but live
    // in the bias segments, which we skip here
    for (std::size_t u = 0; u < ww * nn; ++u)
      if (slots[offset + u] == 0) {
        CHECK(flat[offset + u] == 0.0);
        ++masked_zeros;
      }
    offset += ww * nn + ww;
    for (std::size_t v = 0; v < ww * ww; ++v)
      if (slots[offset + v] == 0) {
        CHECK(flat[offset + v] == 0.0);
        ++masked_zeros;
      }
    offset += ww * ww + ww;
    for (std::size_t i = 0; i < nn * ww; ++i)
      if (slots[offset + i] == 0) {
        CHECK(flat[offset + i] == 0.0);
        ++masked_zeros;
      }
    offset += nn * ww + nn;
  }
  CHECK(masked_zeros > 20);  // the mask is actually doing something
}

TEST_CASE("spectral rescale matches closed forms on scaled identities") {
  SUBCASE("oversized identity is brought to the target norm") {
    Matrix w = Matrix::identity(4);
    for (double& x : w.data()) x *= 2.0;
    flows::SpectralState st;
    const double est = flows::spectral_rescale(w, st, 0.9, 5);
    CHECK(est == doctest::Approx(2.0).epsilon(1e-9));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(w(i, j) == doctest::Approx(i == j ? 0.9 : 0.0).epsilon(1e-6));
    CHECK(st.sigma == doctest::Approx(0.9));
  }
  SUBCASE("compliant weight is untouched bitwise") {
    Matrix w = Matrix::identity(4);
    for (double& x : w.data()) x *= 0.5;
    const Matrix before = w;
    flows::SpectralState st;
    const double est = flows::spectral_rescale(w, st, 0.9, 5);
    CHECK(est == doctest::Approx(0.5).epsilon(1e-9));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(w(i, j) == before(i, j));
  }
  SUBCASE("block-level pass uses the per-matrix budget c^(1/3)") {
    // c = 0.729 so each of the three weights gets target 0.9
    flows::FlowConfig cfg;
    cfg.n = 4;
    cfg.block_count = 1;
    cfg.hidden_width = 4;
    cfg.lipschitz = 0.729;
    cfg.seed = 3;
    FlowModel m = flows::build_flow(cfg);
    flows::ResidualBlock& b = m.blocks[0];
    b.w1 = Matrix::identity(4);
    for (double& x : b.w1.data()) x *= 2.0;
    b.w2 = Matrix::identity(4);
    for (double& x : b.w2.data()) x *= 0.5;
    const flows::SpectralEstimates est = flows::spectral_normalize(b, 5);
    CHECK(est.s1 == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(est.s2 == doctest::Approx(0.5).epsilon(1e-9));
    for (int i = 0; i < 4; ++i) CHECK(b.w1(i, i) == doctest::Approx(0.9).epsilon(1e-6));
    for (int i = 0; i < 4; ++i) CHECK(b.w2(i, i) == doctest::Approx(0.5).epsilon(1e-12));
  }
}

TEST_CASE("normalized residual branches are empirically contractive") {
  for (const FlowKind kind : {FlowKind::full, FlowKind::triangular}) {
    const FlowModel m = randomized_flow(3, 1, 8, kind, BaseKind::gaussian, 21, 1.5, 0.5);
    Rng rng(mix_seed(88, kind == FlowKind::full ? 0 : 1));
    std::vector<double> u(3), v(3), du(3), dv(3);
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
      rng.fill_uniform(u, -4.0, 4.0);
      rng.fill_uniform(v, -4.0, 4.0);
      const flows::ForwardEval fu = flows::flow_forward(m, u);
      const flows::ForwardEval fv = flows::flow_forward(m, v);
      for (int i = 0; i < 3; ++i) {
        // h = g - x isolates the residual branch
        du[static_cast<std::size_t>(i)] =
            (fu.y[static_cast<std::size_t>(i)] - u[static_cast<std::size_t>(i)]) -
            (fv.y[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)]);
        dv[static_cast<std::size_t>(i)] = u[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(i)];
      }
      const double gap = norm2(dv);
      if (gap > 1e-9) worst = std::max(worst, norm2(du) / gap);
    }
    INFO("kind = ", flows::to_string(kind), ", worst pairwise ratio = ", worst);
    CHECK(worst < 1.0);
  }
}

TEST_CASE("zeroed output layers give the exact identity") {
  FlowModel m = flows::build_flow(3, 2, 4, FlowKind::full, BaseKind::gaussian, 5);
  zero_output_layers(m);
  const std::vector<double> x = {0.3, -1.2, 0.8};
  const flows::ForwardEval ev = flows::flow_forward(m, x);
  for (int i = 0; i < 3; ++i) {
    CHECK(ev.y[static_cast<std::size_t>(i)] == x[static_cast<std::size_t>(i)]);
    for (int j = 0; j < 3; ++j) CHECK(ev.jac(i, j) == (i == j ? 1.0 : 0.0));
  }
  CHECK(ev.log_det == 0.0);
}

TEST_CASE("analytic jacobian matches finite differences") {
  Rng rng(31415);
  for (const FlowKind kind : {FlowKind::full, FlowKind::triangular}) {
    const FlowModel m = randomized_flow(3, 2, 6, kind, BaseKind::gaussian,
                                        kind == FlowKind::full ? 101 : 102, 1.0, 0.4);
    std::vector<double> x(3);
    for (int rep = 0; rep < 5; ++rep) {
      rng.fill_normal(x);
      const flows::ForwardEval ev = flows::flow_forward(m, x);
      const Matrix num = numeric_jacobian(m, x, 1e-6);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const double rel =
              std::fabs(ev.jac(i, j) - num(i, j)) / (1.0 + std::fabs(ev.jac(i, j)));
          CHECK(rel < 1e-5);
        }
    }
  }
}

TEST_CASE("taped evaluation reproduces the plain path") {
  const FlowModel m = randomized_flow(3, 2, 5, FlowKind::full, BaseKind::logistic, 64, 0.8, 0.3);
  const std::vector<double> flat = m.flatten();
  const std::vector<double> x = {0.4, -0.9, 1.3};
  const flows::FlowEval<double> plain = flows::flow_eval<double>(m.cfg, flat, x);

  ad::Tape tape;
  std::vector<ad::Var> leaves;
  leaves.reserve(flat.size());
  for (const double p : flat) leaves.push_back(tape.leaf(p));
  const flows::FlowEval<ad::Var> taped =
      flows::flow_eval<ad::Var>(m.cfg, std::span<const ad::Var>(leaves), x);

  for (int i = 0; i < 3; ++i) {
    CHECK(taped.y[static_cast<std::size_t>(i)].value() ==
          doctest::Approx(plain.y[static_cast<std::size_t>(i)]).epsilon(1e-13));
    for (int j = 0; j < 3; ++j)
      CHECK(taped.jac(i, j).value() == doctest::Approx(plain.jac(i, j)).epsilon(1e-13));
  }
  CHECK(taped.log_det.value() == doctest::Approx(plain.log_det).epsilon(1e-13));
}

TEST_CASE("triangular log-determinant is the diagonal sum") {
  const FlowModel m =
      randomized_flow(4, 3, 8, FlowKind::triangular, BaseKind::gaussian, 3001, 1.0, 0.5);
  Rng rng(271);
  std::vector<double> x(4);
  for (int rep = 0; rep < 20; ++rep) {
    rng.fill_normal(x);
    const flows::ForwardEval ev = flows::flow_forward(m, x);
    double diag_sum = 0.0;
    for (int i = 0; i < 4; ++i) diag_sum += std::log(std::fabs(ev.jac(i, i)));
    CHECK(ev.log_det == doctest::Approx(diag_sum).epsilon(1e-10));
  }
}

TEST_CASE("fixed-point inverse round trips") {
  SUBCASE("identity model inverts exactly") {
    FlowModel m = flows::build_flow(3, 3, 4, FlowKind::full, BaseKind::gaussian, 17);
    zero_output_layers(m);
    const std::vector<double> y = {1.0, -2.0, 0.5};
    const std::vector<double> x = flows::flow_inverse(m, y);
    CHECK(x == y);
  }
  SUBCASE("random compliant model round trips below 1e-8") {
    const FlowModel m = randomized_flow(3, 4, 8, FlowKind::full, BaseKind::gaussian, 905, 1.0, 0.4);
    Rng rng(606);
    std::vector<double> y(3), diff(3);
    flows::InverseStats stats;
    double worst = 0.0;
    int deepest = 0;
    for (int rep = 0; rep < 100; ++rep) {
      rng.fill_normal(y);
      for (double& v : y) v *= 2.0;
      const std::vector<double> x = flows::flow_inverse(m, y, 1e-10, 500, &stats);
      const flows::ForwardEval ev = flows::flow_forward(m, x);
      for (int i = 0; i < 3; ++i)
        diff[static_cast<std::size_t>(i)] = ev.y[static_cast<std::size_t>(i)] - y[static_cast<std::size_t>(i)];
      worst = std::max(worst, norm2(diff));
      deepest = std::max(deepest, stats.max_block_iterations);
    }
    INFO("worst residual = ", worst, ", deepest block iteration count = ", deepest);
    CHECK(worst < 1e-8);
    // Banach bound: contraction at rate c from an O(1) start reaches the
    // stopping band within log(tol)/log(c) steps plus a fixed margin
    CHECK(deepest <= static_cast<int>(std::log(1e-10) / std::log(0.9)) + 100);
  }
  SUBCASE("iteration starvation raises with the residual") {
    const FlowModel m = randomized_flow(3, 2, 6, FlowKind::full, BaseKind::gaussian, 33, 1.5, 1.0);
    const std::vector<double> y = {2.0, -1.0, 1.5};
    CHECK_THROWS_WITH_AS(flows::flow_inverse(m, y, 1e-14, 2),
                         doctest::Contains("did not contract"), NoConvergence);
  }
}

TEST_CASE("log-likelihood closed forms at the identity") {
  FlowModel gauss = flows::build_flow(2, 2, 4, FlowKind::full, BaseKind::gaussian, 1);
  zero_output_layers(gauss);
  FlowModel logi = flows::build_flow(2, 2, 4, FlowKind::full, BaseKind::logistic, 1);
  zero_output_layers(logi);
  const std::vector<double> origin = {0.0, 0.0};
  CHECK(flows::model_log_likelihood(gauss, origin) ==
        doctest::Approx(-std::log(2.0 * M_PI)).epsilon(1e-12));
  CHECK(flows::model_log_likelihood(logi, origin) ==
        doctest::Approx(2.0 * std::log(0.25)).epsilon(1e-12));
  const std::vector<double> x = {0.7, -1.1};
  CHECK(flows::model_log_likelihood(gauss, x) ==
        doctest::Approx(-0.5 * (0.49 + 1.21) - std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("model density integrates to one in 2d") {
  SUBCASE("gaussian base, full kind") {
    const FlowModel m = randomized_flow(2, 2, 4, FlowKind::full, BaseKind::gaussian, 77, 0.5, 0.4);
    REQUIRE(min_boundary_image_norm(m, -20.0, 20.0, 200) > 7.0);
    const double mass = quadrature_mass_2d(m, -20.0, 20.0, 1001);
    INFO("mass = ", mass);
    CHECK(std::fabs(mass - 1.0) < 1e-2);
  }
  SUBCASE("logistic base, triangular kind") {
    const FlowModel m =
        randomized_flow(2, 2, 4, FlowKind::triangular, BaseKind::logistic, 78, 0.5, 0.4);
    REQUIRE(min_boundary_image_norm(m, -28.0, 28.0, 200) > 12.0);
    const double mass = quadrature_mass_2d(m, -28.0, 28.0, 1401);
    INFO("mass = ", mass);
    CHECK(std::fabs(mass - 1.0) < 1e-2);
  }
}

TEST_CASE("cima term vanishes for identity and orthogonal-scalar jacobians") {
  SUBCASE("identity") {
    FlowModel m = flows::build_flow(2, 1, 4, FlowKind::full, BaseKind::gaussian, 2);
    zero_output_layers(m);
    CHECK(flows::model_cima_term(m, std::vector<double>{0.0, 0.0}) == 0.0);
    CHECK(flows::model_cima_term(m, std::vector<double>{1.0, -2.0}) == 0.0);
  }
  SUBCASE("rotation times scalar at the origin") {
    // With zero biases the activations sit at slope one at x = 0, so
    // J_g(0) = I + W3 W2 W1 exactly; choose the product to make 0.5 R(theta).
    for (const double theta : {0.3, -0.8}) {
      FlowModel m = flows::build_flow(2, 1, 2, FlowKind::full, BaseKind::gaussian, 6);
      flows::ResidualBlock& b = m.blocks[0];
      const double s = 0.96;
      b.w1 = Matrix::identity(2);
      for (double& v : b.w1.data()) v *= s;
      b.w2 = Matrix::identity(2);
      for (double& v : b.w2.data()) v *= s;
      const double ct = 0.5 * std::cos(theta), st = 0.5 * std::sin(theta);
      b.w3 = Matrix(2, 2);
      b.w3(0, 0) = (ct - 1.0) / (s * s);
      b.w3(0, 1) = -st / (s * s);
      b.w3(1, 0) = st / (s * s);
      b.w3(1, 1) = (ct - 1.0) / (s * s);
      std::fill(b.b1.begin(), b.b1.end(), 0.0);
      std::fill(b.b2.begin(), b.b2.end(), 0.0);
      std::fill(b.b3.begin(), b.b3.end(), 0.0);
      const std::vector<double> origin = {0.0, 0.0};
      const flows::ForwardEval ev = flows::flow_forward(m, origin);
      CHECK(ev.jac(0, 0) == doctest::Approx(ct).epsilon(1e-12));
      CHECK(ev.jac(1, 0) == doctest::Approx(st).epsilon(1e-12));
      CHECK(std::fabs(flows::model_cima_term(m, origin)) < 1e-10);
      CHECK(ev.log_det == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-9));
    }
  }
}

TEST_CASE("parameter gradients match finite differences") {
  for (const int n : {2, 5}) {
    const int w = n + 1;
    const FlowModel m = randomized_flow(n, 2, w, FlowKind::full, BaseKind::logistic,
                                        static_cast<std::uint64_t>(400 + n), 0.8, 0.3);
    const std::vector<double> flat = m.flatten();
    Rng rng(mix_seed(12, static_cast<std::uint64_t>(n)));
    std::vector<double> x(static_cast<std::size_t>(n));
    rng.fill_normal(x);
    const flows::FlowConfig cfg = m.cfg;

    const diffmath::LossFn ll = [&](ad::Tape&, std::span<const ad::Var> p) {
      return flows::model_log_likelihood_at<ad::Var>(cfg, p, x);
    };
    const diffmath::CheckReport rep_ll = diffmath::finite_diff_check(ll, flat, 1e-5, 1e-4);
    INFO("log-likelihood gradient, n = ", n, ", max rel err = ", rep_ll.max_rel_error);
    CHECK(rep_ll.pass);

    const diffmath::LossFn cima = [&](ad::Tape&, std::span<const ad::Var> p) {
      return flows::model_cima_term_at<ad::Var>(cfg, p, x);
    };
    const diffmath::CheckReport rep_ci = diffmath::finite_diff_check(cima, flat, 1e-5, 1e-4);
    INFO("cima-term gradient, n = ", n, ", max rel err = ", rep_ci.max_rel_error);
    CHECK(rep_ci.pass);
  }
}

TEST_CASE("checkpoints round trip and reject corruption") {
  FlowModel m = randomized_flow(3, 2, 6, FlowKind::triangular, BaseKind::logistic, 99, 1.0, 0.4);
  m.training_config_hash = "a1b2c3";
  const auto path = temp_path("ima_flow_checkpoint.json");
  flows::save_flow(m, path.string());
  const FlowModel back = flows::load_flow(path.string());
  std::filesystem::remove(path);
  CHECK(back.flatten() == m.flatten());
  CHECK(back.training_config_hash == "a1b2c3");
  CHECK(back.cfg.n == 3);
  CHECK(back.cfg.kind == FlowKind::triangular);
  CHECK(back.cfg.base == BaseKind::logistic);
  REQUIRE(back.blocks.size() == 2);
  CHECK(back.blocks[0].s2.u == m.blocks[0].s2.u);
  CHECK(back.blocks[1].s3.sigma == m.blocks[1].s3.sigma);

  const std::string good = flows::flow_to_json(m);
  using nlohmann::json;
  {
    json doc = json::parse(good);
    doc["config"]["kind"] = "banana";
    CHECK_THROWS_AS(flows::flow_from_json(doc.dump()), ConfigError);
  }
  {
    json doc = json::parse(good);
    doc["blocks"][0]["w1"].erase(0);
    CHECK_THROWS_WITH_AS(flows::flow_from_json(doc.dump()), doctest::Contains("element count"),
                         ConfigError);
  }
  {
    json doc = json::parse(good);
    // poke a masked slot of w1: the highest input index feeding a degree-0 unit
    doc["blocks"][0]["w1"][2] = 0.5;
    CHECK_THROWS_WITH_AS(flows::flow_from_json(doc.dump()), doctest::Contains("masked"),
                         ConfigError);
  }
  {
    json doc = json::parse(good);
    doc.erase("blocks");
    CHECK_THROWS_AS(flows::flow_from_json(doc.dump()), ConfigError);
  }
  CHECK_THROWS_WITH_AS(flows::flow_from_json("not json at all"), doctest::Contains("invalid JSON"),
                       ConfigError);
}

TEST_CASE("logistic base sampler matches its distribution") {
  Rng rng(2024);
  const int count = 20000;
  std::vector<double> draws(count);
  flows::base_sample(BaseKind::logistic, rng, draws);
  std::vector<double> u(count);
  for (int i = 0; i < count; ++i) u[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-draws[static_cast<std::size_t>(i)]));
  std::sort(u.begin(), u.end());
  double ks = 0.0;
  for (int i = 0; i < count; ++i) {
    const double lo = static_cast<double>(i) / count, hi = static_cast<double>(i + 1) / count;
    const double v = u[static_cast<std::size_t>(i)];
    ks = std::max(ks, std::max(std::fabs(v - lo), std::fabs(v - hi)));
  }
  INFO("ks statistic = ", ks);
  CHECK(ks < 0.015);
}
