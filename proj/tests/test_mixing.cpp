#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "core/darmois2d.hpp"
#include "core/diffmath.hpp"
#include "core/mixing.hpp"

using namespace ima::mixing;
using ima::Matrix;

namespace {

// Empirical Kolmogorov-Smirnov distance to uniform(0,1).
double ks_uniform(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    d = std::max(d, std::abs((i + 1) / n - v[i]));
    d = std::max(d, std::abs(v[i] - i / n));
  }
  return d;
}

MixingFunction identity_mixing(int n, double alpha = 0.1) {
  MixingFunction m;
  m.n = n;
  m.L = 1;
  m.alpha = alpha;
  m.layers.push_back({Matrix::identity(n), std::vector<double>(n, 0.0)});
  return m;
}

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("leaky_tanh: closed forms and scalar inverse") {
  CHECK(leaky_tanh(0.0, 0.1) == 0.0);
  CHECK(leaky_tanh(1.0, 0.1) == doctest::Approx(std::tanh(1.0) + 0.1).epsilon(1e-14));
  CHECK(leaky_tanh(1.0, 0.1) == doctest::Approx(0.86159).epsilon(1e-5));

  SUBCASE("inverse of the tabulated forward value") {
    const double y = leaky_tanh(1.0, 0.1);
    CHECK(leaky_tanh_inverse(y, 0.1) == doctest::Approx(1.0).epsilon(1e-10));
  }
  SUBCASE("round trip across [-5,5]") {
    for (int i = 0; i <= 1000; ++i) {
      const double x = -5.0 + 0.01 * i;
      const double back = leaky_tanh_inverse(leaky_tanh(x, 0.1), 0.1);
      CHECK(std::abs(back - x) < 1e-10);
    }
  }
  SUBCASE("far tail") {
    for (const double y : {-400.0, -37.5, 55.0, 1e6}) {
      const double x = leaky_tanh_inverse(y, 0.1);
      CHECK(std::abs(leaky_tanh(x, 0.1) - y) < 1e-9 * std::max(1.0, std::abs(y)));
    }
  }
  SUBCASE("alpha must be positive") {
    CHECK_THROWS_AS(leaky_tanh_inverse(1.0, 0.0), ima::DomainError);
  }
}

TEST_CASE("sample_mixing: orthogonal init") {
  const MixingFunction m = sample_mixing(4, 3, InitKind::orthogonal, 123);
  REQUIRE(m.layers.size() == 3);
  for (const Layer& layer : m.layers) {
    const Matrix wtw = ima::matmul(ima::transpose(layer.weight), layer.weight);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        CHECK(std::abs(wtw(i, j) - (i == j ? 1.0 : 0.0)) < 1e-10);
  }
  bool any_bias = false;
  for (const Layer& layer : m.layers)
    for (const double b : layer.bias) any_bias = any_bias || b != 0.0;
  CHECK(any_bias);
}

TEST_CASE("sample_mixing: uniform init") {
  const MixingFunction m = sample_mixing(5, 2, InitKind::uniform, 99);
  const double half = 1.0 / std::sqrt(5.0);
  for (const Layer& layer : m.layers) {
    for (const double w : layer.weight.data()) {
      CHECK(w >= -half);
      CHECK(w <= half);
    }
    for (const double b : layer.bias) CHECK(b == 0.0);
    CHECK(std::abs(ima::det(layer.weight)) > 1e-8);
  }
}

TEST_CASE("sample_mixing: determinism and preconditions") {
  const MixingFunction a = sample_mixing(3, 4, InitKind::orthogonal, 7);
  const MixingFunction b = sample_mixing(3, 4, InitKind::orthogonal, 7);
  for (int k = 0; k < 4; ++k) {
    for (int i = 0; i < 3; ++i) {
      CHECK(a.layers[k].bias[i] == b.layers[k].bias[i]);
      for (int j = 0; j < 3; ++j) CHECK(a.layers[k].weight(i, j) == b.layers[k].weight(i, j));
    }
  }
  const MixingFunction c = sample_mixing(3, 4, InitKind::orthogonal, 8);
  bool differs = false;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) differs = differs || a.layers[0].weight(i, j) != c.layers[0].weight(i, j);
  CHECK(differs);

  CHECK_THROWS_AS(sample_mixing(1, 1, InitKind::orthogonal, 0), ima::DomainError);
  CHECK_THROWS_AS(sample_mixing(2, 0, InitKind::orthogonal, 0), ima::DomainError);
  CHECK_THROWS_AS(sample_mixing(2, 1, InitKind::orthogonal, 0, -0.5), ima::DomainError);
}

TEST_CASE("mix_forward: identity cases") {
  const std::vector<double> s = {0.7, -1.2};
  SUBCASE("single unactivated identity layer") {
    const MixingFunction m = identity_mixing(2);
    const std::vector<double> x = mix_forward(m, s);
    CHECK(x[0] == s[0]);
    CHECK(x[1] == s[1]);
  }
  SUBCASE("stacked identity layers fix the origin") {
    MixingFunction m = identity_mixing(2);
    m.L = 2;
    m.layers.push_back(m.layers[0]);
    const std::vector<double> zero = {0.0, 0.0};
    const std::vector<double> x = mix_forward(m, zero);
    CHECK(x[0] == 0.0);
    CHECK(x[1] == 0.0);
  }
}

TEST_CASE("mix_inverse: identity and round trips across widths and depths") {
  const MixingFunction id = identity_mixing(3);
  const std::vector<double> x = {1.0, -2.0, 0.25};
  const std::vector<double> s = mix_inverse(id, x);
  for (int i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(x[i]).epsilon(1e-14));

  // Source-side round trips f_inv(f(s)) = s. The attainable accuracy is
  // kappa(J_f) * eps: the observation vector is a double, and deep
  // compositions condition like exp(c L), so the 1e-8 bound is asserted where
  // double precision can reach it and a looser ceiling guards great depth.
  for (const int n : {2, 5}) {
    for (int L = 1; L <= 20; ++L) {
      for (const InitKind kind : {InitKind::orthogonal, InitKind::uniform}) {
        const MixingFunction m = sample_mixing(n, L, kind, 1000 + n * 31 + L);
        ima::Rng rng(500 + L);
        std::vector<double> src(n);
        double worst_src = 0.0;
        double worst_obs = 0.0;
        // Orthogonal layers have unit singular values, so only activation
        // saturation conditions the inverse; uniform layers compound
        // 1/sigma_min per layer and leave double territory around L=6.
        const int tight_depth = kind == InitKind::orthogonal ? 12 : 5;
        const int reps = L <= tight_depth ? 1000 : 250;
        for (int rep = 0; rep < reps; ++rep) {
          rng.fill_normal(src);
          const std::vector<double> fwd = mix_forward(m, src);
          const std::vector<double> back = mix_inverse(m, fwd);
          for (int i = 0; i < n; ++i)
            worst_src = std::max(worst_src, std::abs(back[i] - src[i]));
          const std::vector<double> fwd2 = mix_forward(m, back);
          for (int i = 0; i < n; ++i)
            worst_obs = std::max(worst_obs, std::abs(fwd2[i] - fwd[i]));
        }
        INFO("n=", n, " L=", L, " kind=", std::string(to_string(kind)),
             " src=", worst_src, " obs=", worst_obs);
        if (L <= tight_depth) CHECK(worst_src < 1e-8);
        CHECK(std::isfinite(worst_src));
        // Observation-side round trips stay near machine precision at every
        // depth: inversion errors lie along the directions the forward map
        // contracts back down.
        CHECK(worst_obs < 1e-8);
      }
    }
  }
}

TEST_CASE("mix_jacobian: agrees with the tape engine and finite differences") {
  const MixingFunction m = sample_mixing(3, 4, InitKind::orthogonal, 11);
  const std::vector<double> s = {0.4, -0.2, 1.1};

  const Matrix analytic = mix_jacobian(m, s);
  ima::diffmath::VectorFn fn = [&m](std::span<const ima::ad::Var> in,
                                    std::span<ima::ad::Var> out) {
    mix_forward<ima::ad::Var>(m, in, out);
  };
  const Matrix taped = ima::diffmath::jacobian(fn, s);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(analytic(i, j) - taped(i, j)) < 1e-12);

  for (int j = 0; j < 3; ++j) {
    std::vector<double> up = s, dn = s;
    up[j] += 1e-6;
    dn[j] -= 1e-6;
    const std::vector<double> fu = mix_forward(m, up);
    const std::vector<double> fd = mix_forward(m, dn);
    for (int i = 0; i < 3; ++i) {
      const double numeric = (fu[i] - fd[i]) / 2e-6;
      CHECK(analytic(i, j) == doctest::Approx(numeric).epsilon(1e-4));
    }
  }
}

TEST_CASE("true_log_density: closed forms") {
  const SourcePrior prior{PriorKind::standard_normal, 2};
  SUBCASE("identity mixing at the origin") {
    const MixingFunction m = identity_mixing(2);
    const std::vector<double> x = {0.0, 0.0};
    CHECK(true_log_density(m, prior, x) ==
          doctest::Approx(-std::log(2.0 * M_PI)).epsilon(1e-12));
    CHECK(true_log_density(m, prior, x) == doctest::Approx(-1.8379).epsilon(1e-4));
  }
  SUBCASE("pure rotations preserve the normal density") {
    ima::Rng rng(3);
    Matrix g(2, 2);
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) g(i, j) = rng.normal();
    MixingFunction m;
    m.n = 2;
    m.L = 1;
    m.alpha = 0.1;
    m.layers.push_back({ima::qr_orthogonal(g), {0.0, 0.0}});
    std::vector<double> x(2);
    for (int rep = 0; rep < 20; ++rep) {
      rng.fill_normal(x);
      const double expect = -0.5 * (x[0] * x[0] + x[1] * x[1]) - std::log(2.0 * M_PI);
      CHECK(true_log_density(m, prior, x) == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("true_log_density: evaluator path matches the composed definition") {
  const MixingFunction m = sample_mixing(2, 3, InitKind::orthogonal, 77);
  const SourcePrior prior{PriorKind::standard_normal, 2};
  const MixingEvaluator eval(m);
  ima::Rng rng(9);
  std::vector<double> x(2);
  for (int rep = 0; rep < 25; ++rep) {
    rng.fill_normal(x);
    x[0] *= 2.0;
    const std::vector<double> s = mix_inverse(m, x);
    const double composed =
        prior.log_density(s) - ima::logabsdet(mix_jacobian(m, s));
    CHECK(eval.log_density(prior, x) == doctest::Approx(composed).epsilon(1e-9));
    CHECK(true_log_density(m, prior, x) == doctest::Approx(composed).epsilon(1e-9));
  }
}

TEST_CASE("true_log_density: pushforward integrates to one") {
  const MixingFunction m = sample_mixing(2, 3, InitKind::orthogonal, 2024);
  const SourcePrior prior{PriorKind::standard_normal, 2};
  const MixingEvaluator eval(m);

  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  std::vector<double> x(2);
  for (int i = 0; i <= 40; ++i)
    for (int j = 0; j <= 40; ++j) {
      const std::vector<double> s = {-6.0 + 12.0 * i / 40.0, -6.0 + 12.0 * j / 40.0};
      const std::vector<double> fwd = mix_forward(m, s);
      for (int c = 0; c < 2; ++c) {
        lo[c] = std::min(lo[c], fwd[c]);
        hi[c] = std::max(hi[c], fwd[c]);
      }
    }
  const int grid = 401;
  double mass = 0.0;
  for (int i = 0; i < grid; ++i) {
    x[0] = lo[0] + (hi[0] - lo[0]) * i / (grid - 1.0);
    const double wi = (i == 0 || i == grid - 1) ? 0.5 : 1.0;
    for (int j = 0; j < grid; ++j) {
      x[1] = lo[1] + (hi[1] - lo[1]) * j / (grid - 1.0);
      const double wj = (j == 0 || j == grid - 1) ? 0.5 : 1.0;
      mass += wi * wj * std::exp(eval.log_density(prior, x));
    }
  }
  mass *= (hi[0] - lo[0]) * (hi[1] - lo[1]) / ((grid - 1.0) * (grid - 1.0));
  CHECK(std::abs(mass - 1.0) < 1e-2);
}

TEST_CASE("sample_dataset: determinism, exact pairing, and source statistics") {
  const MixingFunction m = sample_mixing(2, 2, InitKind::orthogonal, 5);
  const SourcePrior prior{PriorKind::standard_normal, 2};

  CHECK_THROWS_AS(sample_dataset(m, prior, 0, 1), ima::DomainError);

  const Dataset a = sample_dataset(m, prior, 64, 17);
  const Dataset b = sample_dataset(m, prior, 64, 17);
  for (int k = 0; k < 64; ++k)
    for (int j = 0; j < 2; ++j) {
      CHECK(a.sources(k, j) == b.sources(k, j));
      CHECK(a.observations(k, j) == b.observations(k, j));
    }

  for (int k = 0; k < 64; ++k) {
    const std::vector<double> fwd = mix_forward(m, a.sources.row(k));
    for (int j = 0; j < 2; ++j) CHECK(a.observations(k, j) == fwd[j]);
  }

  const Dataset big = sample_dataset(m, prior, 100000, 29);
  for (int j = 0; j < 2; ++j) {
    double mean = 0.0;
    for (int k = 0; k < big.sources.rows(); ++k) mean += big.sources(k, j);
    mean /= big.sources.rows();
    CHECK(std::abs(mean) < 0.02);
  }
}

TEST_CASE("mixing serialization: JSON round trip and validation") {
  const MixingFunction m = sample_mixing(3, 2, InitKind::uniform, 41, 0.2);
  const std::string text = mixing_to_json(m);
  const MixingFunction back = mixing_from_json(text);
  CHECK(back.n == m.n);
  CHECK(back.L == m.L);
  CHECK(back.alpha == m.alpha);
  CHECK(back.init_kind == m.init_kind);
  CHECK(back.seed == m.seed);
  for (int k = 0; k < m.L; ++k)
    for (int i = 0; i < 3; ++i) {
      CHECK(back.layers[k].bias[i] == m.layers[k].bias[i]);
      for (int j = 0; j < 3; ++j)
        CHECK(back.layers[k].weight(i, j) == m.layers[k].weight(i, j));
    }

  const auto path = temp_path("ima_mixing_roundtrip.json");
  save_mixing(m, path.string());
  const MixingFunction loaded = load_mixing(path.string());
  CHECK(loaded.layers[1].weight(2, 1) == m.layers[1].weight(2, 1));
  std::filesystem::remove(path);

  SUBCASE("singular weights are rejected on load") {
    nlohmann::json j = nlohmann::json::parse(text);
    for (auto& w : j["layers"][0]["weight"]) w = 1.0;
    CHECK_THROWS_AS(mixing_from_json(j.dump()), ima::ConfigError);
  }
  SUBCASE("missing fields are rejected") {
    nlohmann::json j = nlohmann::json::parse(text);
    j.erase("alpha");
    CHECK_THROWS_AS(mixing_from_json(j.dump()), ima::ConfigError);
  }
}

TEST_CASE("dataset CSV: header and bit-exact round trip") {
  const MixingFunction m = sample_mixing(3, 2, InitKind::orthogonal, 13);
  const SourcePrior prior{PriorKind::standard_normal, 3};
  const Dataset d = sample_dataset(m, prior, 37, 101);
  const auto path = temp_path("ima_dataset_roundtrip.csv");
  write_dataset_csv(d, path.string());

  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "s1,s2,s3,x1,x2,x3");
  f.close();

  const Dataset back = read_dataset_csv(path.string());
  REQUIRE(back.sources.rows() == 37);
  REQUIRE(back.sources.cols() == 3);
  for (int k = 0; k < 37; ++k)
    for (int j = 0; j < 3; ++j) {
      CHECK(back.sources(k, j) == d.sources(k, j));
      CHECK(back.observations(k, j) == d.observations(k, j));
    }
  std::filesystem::remove(path);
}

TEST_CASE("MixingEvaluator: fused inverse matches the layer-by-layer path") {
  const MixingFunction m = sample_mixing(2, 4, InitKind::orthogonal, 404);
  const MixingEvaluator eval(m);
  ima::Rng rng(4);
  std::vector<double> s(2), x(2);
  for (int rep = 0; rep < 30; ++rep) {
    rng.fill_normal(s);
    mix_forward<double>(m, s, x);
    const auto res = eval.inverse_with_logdet(x);
    const std::vector<double> plain = mix_inverse(m, x);
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(res.s[i] - plain[i]) < 1e-10);
      CHECK(std::abs(res.s[i] - s[i]) < 1e-8);
    }
    const double ld = ima::logabsdet(mix_jacobian(m, res.s));
    CHECK(res.log_abs_det_jacobian == doctest::Approx(ld).epsilon(1e-9));
  }
}

TEST_CASE("darmois_2d: identity mixing closed forms") {
  SUBCASE("uniform prior gives the identity transform") {
    const MixingFunction m = identity_mixing(2);
    const SourcePrior prior{PriorKind::uniform01, 2};
    const Darmois2d oracle(m, prior, QuadratureSpec{4096, 6.0, 0.05});
    CHECK(std::abs(oracle.total_mass() - 1.0) < 1e-3);
    for (const double a : {0.2, 0.5, 0.8}) {
      for (const double b : {0.3, 0.7}) {
        const std::vector<double> x = {a, b};
        const auto y = oracle.transform(x);
        CHECK(std::abs(y[0] - a) < 5e-3);
        CHECK(std::abs(y[1] - b) < 5e-3);
      }
    }
  }
  SUBCASE("normal prior maps the origin to (0.5, 0.5)") {
    const MixingFunction m = identity_mixing(2);
    const SourcePrior prior{PriorKind::standard_normal, 2};
    const Darmois2d oracle(m, prior, QuadratureSpec{512, 6.0, 0.05});
    const std::vector<double> x = {0.0, 0.0};
    const auto y = oracle.transform(x);
    CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-3));
    CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-3));
  }
}

TEST_CASE("darmois_2d: pushforward of observations is uniform per coordinate") {
  const MixingFunction m = sample_mixing(2, 3, InitKind::orthogonal, 314);
  const SourcePrior prior{PriorKind::standard_normal, 2};
  const Darmois2d oracle(m, prior, QuadratureSpec{512, 6.0, 0.05});
  CHECK(std::abs(oracle.total_mass() - 1.0) < 1e-2);

  const Dataset d = sample_dataset(m, prior, 10000, 271);
  std::vector<double> u1, u2;
  u1.reserve(10000);
  u2.reserve(10000);
  for (int k = 0; k < d.observations.rows(); ++k) {
    const auto y = oracle.transform(d.observations.row(k));
    u1.push_back(y[0]);
    u2.push_back(y[1]);
  }
  CHECK(ks_uniform(u1) < 0.03);
  CHECK(ks_uniform(u2) < 0.03);
}

TEST_CASE("darmois_2d: convenience wrapper and dimension guard") {
  const MixingFunction m = identity_mixing(2);
  const SourcePrior prior{PriorKind::standard_normal, 2};
  const std::vector<double> x = {0.0, 0.0};
  const auto y = darmois_2d(m, prior, x, QuadratureSpec{128, 6.0, 0.05});
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-2));

  const MixingFunction m3 = identity_mixing(3);
  const SourcePrior prior3{PriorKind::standard_normal, 3};
  CHECK_THROWS_AS(Darmois2d(m3, prior3, QuadratureSpec{128, 6.0, 0.05}), ima::DomainError);
}
