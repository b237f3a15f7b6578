#include "mixing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace ima::mixing {

namespace {

constexpr double kWeightDetFloor = 1e-8;
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2*pi)/2

// Safeguarded Newton on tanh(x) + a x = y, run in extended precision and to
// stagnation: errors here are magnified by every later layer of a deep
// inversion, so stopping at the nominal 1e-12 would leak into round trips.
long double lt_inverse_ext(long double y, long double a) {
  long double lo = (y - 1.0L) / a;  // |leaky_tanh(x) - a x| <= 1 brackets the root
  long double hi = (y + 1.0L) / a;
  long double x = std::abs(y) < 2.0L ? y / (1.0L + a) : (y - (y > 0 ? 1.0L : -1.0L)) / a;
  x = std::clamp(x, lo, hi);
  long double best = x;
  long double best_f = std::numeric_limits<long double>::infinity();
  for (int iter = 0; iter < 100; ++iter) {
    const long double t = std::tanh(x);
    const long double f = t + a * x - y;
    if (std::abs(f) < best_f) {
      best_f = std::abs(f);
      best = x;
    }
    if (f == 0.0L) return x;
    if (f > 0.0L) {
      hi = x;
    } else {
      lo = x;
    }
    long double next = x - f / (1.0L - t * t + a);
    if (!(next > lo && next < hi)) next = 0.5L * (lo + hi);
    if (next == x) return best;  // stagnated at float resolution
    x = next;
  }
  if (best_f < 1e-12L * std::max(1.0L, std::abs(y))) return best;
  throw NoConvergence("leaky_tanh_inverse: no convergence after 100 iterations");
}

}  // namespace

const char* to_string(InitKind k) {
  return k == InitKind::orthogonal ? "orthogonal" : "uniform";
}

const char* to_string(PriorKind k) {
  return k == PriorKind::standard_normal ? "standard_normal" : "uniform01";
}

InitKind init_kind_from_string(const std::string& s) {
  if (s == "orthogonal") return InitKind::orthogonal;
  if (s == "uniform") return InitKind::uniform;
  throw ConfigError("unknown init kind '" + s + "' (expected orthogonal or uniform)");
}

PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "standard_normal") return PriorKind::standard_normal;
  if (s == "uniform01") return PriorKind::uniform01;
  throw ConfigError("unknown prior kind '" + s + "' (expected standard_normal or uniform01)");
}

double leaky_tanh(double x, double alpha) { return std::tanh(x) + alpha * x; }

ad::Var leaky_tanh(const ad::Var& x, double alpha) { return tanh(x) + alpha * x; }

double leaky_tanh_deriv(double x, double alpha) {
  const double t = std::tanh(x);
  return 1.0 - t * t + alpha;
}

double leaky_tanh_inverse(double y, double alpha) {
  if (alpha <= 0.0) throw DomainError("leaky_tanh_inverse requires alpha > 0");
  return static_cast<double>(lt_inverse_ext(y, alpha));
}

double SourcePrior::log_density(std::span<const double> s) const {
  if (static_cast<int>(s.size()) != n) throw DomainError("prior dimension mismatch");
  if (kind == PriorKind::standard_normal) {
    double q = 0.0;
    for (const double v : s) q += v * v;
    return -0.5 * q - n * kHalfLog2Pi;
  }
  for (const double v : s) {
    if (v < 0.0 || v > 1.0) return -std::numeric_limits<double>::infinity();
  }
  return 0.0;
}

void SourcePrior::sample(Rng& rng, std::span<double> out) const {
  if (kind == PriorKind::standard_normal) {
    rng.fill_normal(out);
  } else {
    rng.fill_uniform(out, 0.0, 1.0);
  }
}

MixingFunction sample_mixing(int n, int L, InitKind kind, std::uint64_t seed, double alpha) {
  if (n < 2) throw DomainError("sample_mixing requires n >= 2");
  if (L < 1) throw DomainError("sample_mixing requires L >= 1");
  if (alpha <= 0.0) throw DomainError("sample_mixing requires alpha > 0");

  MixingFunction m;
  m.n = n;
  m.L = L;
  m.alpha = alpha;
  m.init_kind = kind;
  m.seed = seed;
  m.layers.reserve(L);

  for (int k = 0; k < L; ++k) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    Layer layer{Matrix(n, n), std::vector<double>(n, 0.0)};
    if (kind == InitKind::orthogonal) {
      Matrix g(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
      layer.weight = qr_orthogonal(g);
      for (int i = 0; i < n; ++i) layer.bias[i] = rng.normal();
    } else {
      const double half = 1.0 / std::sqrt(static_cast<double>(n));
      int attempts = 0;
      for (;;) {
        if (++attempts > 100)
          throw NoConvergence("sample_mixing: 100 singular uniform draws in a row");
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) layer.weight(i, j) = rng.uniform(-half, half);
        if (std::abs(det(layer.weight)) > kWeightDetFloor) break;
      }
    }
    m.layers.push_back(std::move(layer));
  }
  validate_mixing(m);
  return m;
}

void validate_mixing(const MixingFunction& m) {
  if (m.n < 2) throw ConfigError("mixing dimension must be >= 2");
  if (m.L < 1) throw ConfigError("mixing must have at least one layer");
  if (m.alpha <= 0.0) throw ConfigError("mixing activation slope must be > 0");
  if (static_cast<int>(m.layers.size()) != m.L)
    throw ConfigError("mixing layer count disagrees with L");
  for (int k = 0; k < m.L; ++k) {
    const Layer& layer = m.layers[k];
    if (layer.weight.rows() != m.n || layer.weight.cols() != m.n ||
        static_cast<int>(layer.bias.size()) != m.n)
      throw ConfigError("mixing layer " + std::to_string(k) + " has wrong shape");
    for (const double w : layer.weight.data())
      if (!std::isfinite(w)) throw ConfigError("mixing weight entry is not finite");
    for (const double b : layer.bias)
      if (!std::isfinite(b)) throw ConfigError("mixing bias entry is not finite");
    if (std::abs(det(layer.weight)) <= kWeightDetFloor)
      throw ConfigError("mixing layer " + std::to_string(k) + " is numerically singular");
  }
}

std::vector<double> mix_forward(const MixingFunction& m, std::span<const double> s) {
  std::vector<double> out(m.n);
  mix_forward<double>(m, s, out);
  return out;
}

namespace {

// Partial-pivoting elimination in extended precision; w is n x n row-major.
void solve_ext(const Matrix& w, std::vector<long double>& rhs) {
  const int n = w.rows();
  std::vector<long double> a(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[static_cast<std::size_t>(i) * n + j] = w(i, j);
  for (int k = 0; k < n; ++k) {
    int piv = k;
    for (int i = k + 1; i < n; ++i)
      if (std::abs(a[static_cast<std::size_t>(i) * n + k]) >
          std::abs(a[static_cast<std::size_t>(piv) * n + k]))
        piv = i;
    if (a[static_cast<std::size_t>(piv) * n + k] == 0.0L)
      throw SingularJacobian("mix_inverse: singular layer weight", 0.0);
    if (piv != k) {
      for (int j = k; j < n; ++j)
        std::swap(a[static_cast<std::size_t>(k) * n + j], a[static_cast<std::size_t>(piv) * n + j]);
      std::swap(rhs[k], rhs[piv]);
    }
    for (int i = k + 1; i < n; ++i) {
      const long double f = a[static_cast<std::size_t>(i) * n + k] / a[static_cast<std::size_t>(k) * n + k];
      for (int j = k; j < n; ++j)
        a[static_cast<std::size_t>(i) * n + j] -= f * a[static_cast<std::size_t>(k) * n + j];
      rhs[i] -= f * rhs[k];
    }
  }
  for (int i = n - 1; i >= 0; --i) {
    long double acc = rhs[i];
    for (int j = i + 1; j < n; ++j) acc -= a[static_cast<std::size_t>(i) * n + j] * rhs[j];
    rhs[i] = acc / a[static_cast<std::size_t>(i) * n + i];
  }
}

}  // namespace

std::vector<double> mix_inverse(const MixingFunction& m, std::span<const double> x) {
  // Whole pass in extended precision: each layer's rounding is magnified by
  // every remaining layer, which at depth 20 costs several digits.
  std::vector<long double> h(x.begin(), x.end());
  for (int k = m.L - 1; k >= 0; --k) {
    if (k < m.L - 1) {
      for (int i = 0; i < m.n; ++i) h[i] = lt_inverse_ext(h[i], m.alpha);
    }
    for (int i = 0; i < m.n; ++i) h[i] -= m.layers[k].bias[i];
    solve_ext(m.layers[k].weight, h);
  }
  return std::vector<double>(h.begin(), h.end());
}

Matrix mix_jacobian(const MixingFunction& m, std::span<const double> s) {
  std::vector<double> h(s.begin(), s.end());
  std::vector<double> z(m.n);
  Matrix jac = m.layers[0].weight;
  for (int k = 0; k < m.L; ++k) {
    const Layer& layer = m.layers[k];
    for (int i = 0; i < m.n; ++i) z[i] = ad::dot(layer.weight.row(i), std::span<const double>(h)) + layer.bias[i];
    if (k == m.L - 1) break;
    for (int i = 0; i < m.n; ++i) h[i] = leaky_tanh(z[i], m.alpha);
    // jac <- W_{k+1} * diag(act'(z_k)) * jac
    Matrix next(m.n, m.n);
    const Matrix& w = m.layers[k + 1].weight;
    for (int i = 0; i < m.n; ++i)
      for (int j = 0; j < m.n; ++j) {
        double acc = 0.0;
        for (int l = 0; l < m.n; ++l)
          acc += w(i, l) * leaky_tanh_deriv(z[l], m.alpha) * jac(l, j);
        next(i, j) = acc;
      }
    jac = std::move(next);
  }
  return jac;
}

double true_log_density(const MixingFunction& m, const SourcePrior& prior,
                        std::span<const double> x) {
  return MixingEvaluator(m).log_density(prior, x);
}

MixingEvaluator::MixingEvaluator(const MixingFunction& m) : m_(m) {
  weight_inv_.reserve(m_.L);
  for (const Layer& layer : m_.layers) {
    weight_inv_.push_back(matinv(layer.weight));
    sum_log_abs_det_w_ += std::log(std::abs(det(layer.weight)));
  }
}

MixingEvaluator::InverseResult MixingEvaluator::inverse_with_logdet(
    std::span<const double> x) const {
  const int n = m_.n;
  std::vector<double> h(x.begin(), x.end());
  std::vector<double> z(n);
  double log_act = 0.0;
  for (int k = m_.L - 1; k >= 0; --k) {
    if (k < m_.L - 1) {
      for (int i = 0; i < n; ++i) {
        const double pre = leaky_tanh_inverse(h[i], m_.alpha);
        log_act += std::log(leaky_tanh_deriv(pre, m_.alpha));
        h[i] = pre;
      }
    }
    for (int i = 0; i < n; ++i) z[i] = h[i] - m_.layers[k].bias[i];
    for (int i = 0; i < n; ++i)
      h[i] = ad::dot(weight_inv_[k].row(i), std::span<const double>(z));
  }
  return {std::move(h), sum_log_abs_det_w_ + log_act};
}

double MixingEvaluator::log_density(const SourcePrior& prior, std::span<const double> x) const {
  const InverseResult inv = inverse_with_logdet(x);
  const double prior_term = prior.log_density(inv.s);
  if (!std::isfinite(prior_term)) return prior_term;  // zero density outside support
  return prior_term - inv.log_abs_det_jacobian;
}

Dataset sample_dataset(const MixingFunction& m, const SourcePrior& prior, int count,
                       std::uint64_t seed) {
  if (count < 1) throw DomainError("sample_dataset requires count >= 1");
  if (prior.n != m.n) throw DomainError("prior dimension does not match mixing");
  Dataset d{Matrix(count, m.n), Matrix(count, m.n), m.seed, prior.kind};
  Rng rng(mix_seed(seed, 0x0da7a5e7ull));
  std::vector<double> x(m.n);
  for (int k = 0; k < count; ++k) {
    prior.sample(rng, d.sources.row(k));
    mix_forward<double>(m, d.sources.row(k), x);
    for (int j = 0; j < m.n; ++j) d.observations(k, j) = x[j];
  }
  return d;
}

std::string mixing_to_json(const MixingFunction& m) {
  nlohmann::json j;
  j["n"] = m.n;
  j["L"] = m.L;
  j["alpha"] = m.alpha;
  j["init_kind"] = to_string(m.init_kind);
  j["seed"] = m.seed;
  j["layers"] = nlohmann::json::array();
  for (const Layer& layer : m.layers) {
    nlohmann::json jl;
    jl["weight"] = std::vector<double>(layer.weight.data().begin(), layer.weight.data().end());
    jl["bias"] = layer.bias;
    j["layers"].push_back(std::move(jl));
  }
  return j.dump(2);
}

MixingFunction mixing_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mixing JSON parse failure: ") + e.what());
  }
  MixingFunction m;
  try {
    m.n = j.at("n").get<int>();
    m.L = j.at("L").get<int>();
    m.alpha = j.at("alpha").get<double>();
    m.init_kind = init_kind_from_string(j.at("init_kind").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& jl : j.at("layers")) {
      const auto flat = jl.at("weight").get<std::vector<double>>();
      if (static_cast<int>(flat.size()) != m.n * m.n)
        throw ConfigError("mixing layer weight has wrong length");
      Layer layer{Matrix(m.n, m.n), jl.at("bias").get<std::vector<double>>()};
      std::copy(flat.begin(), flat.end(), layer.weight.data().begin());
      m.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mixing JSON missing or mistyped field: ") + e.what());
  }
  validate_mixing(m);
  return m;
}

void save_mixing(const MixingFunction& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << mixing_to_json(m) << '\n';
}

MixingFunction load_mixing(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return mixing_from_json(buf.str());
}

void write_dataset_csv(const Dataset& d, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  const int n = d.sources.cols();
  for (int j = 0; j < n; ++j) f << 's' << (j + 1) << ',';
  for (int j = 0; j < n; ++j) f << 'x' << (j + 1) << (j + 1 < n ? ',' : '\n');
  char buf[32];
  for (int k = 0; k < d.sources.rows(); ++k) {
    for (int j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.sources(k, j));
      f << buf << ',';
    }
    for (int j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.observations(k, j));
      f << buf << (j + 1 < n ? ',' : '\n');
    }
  }
}

Dataset read_dataset_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw ConfigError("dataset CSV '" + path + "' is empty");
  const int columns = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 4 || columns % 2 != 0)
    throw ConfigError("dataset CSV '" + path + "' must have columns s1..sn,x1..xn");
  const int n = columns / 2;
  std::vector<double> values;
  int rows = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int got = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++got;
    }
    if (got != columns)
      throw ConfigError("dataset CSV row " + std::to_string(rows + 2) + " has wrong arity");
    ++rows;
  }
  if (rows == 0) throw ConfigError("dataset CSV '" + path + "' has no data rows");
  Dataset d{Matrix(rows, n), Matrix(rows, n), 0, PriorKind::standard_normal};
  for (int k = 0; k < rows; ++k)
    for (int j = 0; j < n; ++j) {
      d.sources(k, j) = values[static_cast<std::size_t>(k) * columns + j];
      d.observations(k, j) = values[static_cast<std::size_t>(k) * columns + n + j];
    }
  return d;
}

}  // namespace ima::mixing
