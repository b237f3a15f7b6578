#include "flows.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace ima::flows {

namespace {

using nlohmann::json;

constexpr int kWeightsPerBlock = 3;  // depth of h; the Lipschitz budget splits three ways

double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (int i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = ad::dot(m.row(i), x);
}

void matvec_t(const Matrix& m, std::span<const double> x, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (int i = 0; i < m.rows(); ++i) {
    const double xi = x[static_cast<std::size_t>(i)];
    const std::span<const double> row = m.row(i);
    for (int j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)] * xi;
  }
}

void seed_unit_vector(std::vector<double>& v, std::size_t dim, std::uint64_t stream) {
  Rng rng(mix_seed(0x5bd1e995u ^ 0x9e3779b97f4a7c15ull, stream));
  v.assign(dim, 0.0);
  double norm = 0.0;
  while (norm < 1e-12) {
    rng.fill_normal(v);
    norm = vec_norm(v);
  }
  for (double& x : v) x /= norm;
}

/// h(x) in plain double for one block; used by the fixed-point inverse.
void block_h(const ResidualBlock& b, std::span<const double> x, std::span<double> a1,
             std::span<double> a2, std::span<double> out) {
  const double inv1a = 1.0 / (1.0 + b.alpha);
  for (int u = 0; u < b.w; ++u) {
    const double z = ad::dot(b.w1.row(u), x) + b.b1[static_cast<std::size_t>(u)];
    a1[static_cast<std::size_t>(u)] = (std::tanh(z) + b.alpha * z) * inv1a;
  }
  for (int v = 0; v < b.w; ++v) {
    const double z = ad::dot(b.w2.row(v), a1) + b.b2[static_cast<std::size_t>(v)];
    a2[static_cast<std::size_t>(v)] = (std::tanh(z) + b.alpha * z) * inv1a;
  }
  for (int i = 0; i < b.n; ++i)
    out[static_cast<std::size_t>(i)] = ad::dot(b.w3.row(i), a2) + b.b3[static_cast<std::size_t>(i)];
}

void copy_out(const Matrix& m, std::span<double>& cursor) {
  const std::span<const double> d = m.data();
  std::copy(d.begin(), d.end(), cursor.begin());
  cursor = cursor.subspan(d.size());
}

void copy_out(const std::vector<double>& v, std::span<double>& cursor) {
  std::copy(v.begin(), v.end(), cursor.begin());
  cursor = cursor.subspan(v.size());
}

void copy_in(Matrix& m, std::span<const double>& cursor) {
  const std::span<double> d = m.data();
  std::copy(cursor.begin(), cursor.begin() + static_cast<std::ptrdiff_t>(d.size()), d.begin());
  cursor = cursor.subspan(d.size());
}

void copy_in(std::vector<double>& v, std::span<const double>& cursor) {
  std::copy(cursor.begin(), cursor.begin() + static_cast<std::ptrdiff_t>(v.size()), v.begin());
  cursor = cursor.subspan(v.size());
}

void validate_config(const FlowConfig& cfg) {
  if (cfg.n < 1) throw ConfigError("flow config: n must be >= 1");
  if (cfg.block_count < 1) throw ConfigError("flow config: block_count must be >= 1");
  if (cfg.hidden_width < cfg.n) throw ConfigError("flow config: hidden_width must be >= n");
  if (!(cfg.lipschitz > 0.0) || !(cfg.lipschitz < 1.0))
    throw ConfigError("flow config: lipschitz must lie in (0, 1)");
  if (cfg.alpha < 0.0) throw ConfigError("flow config: alpha must be >= 0");
  if (cfg.power_iters < 1) throw ConfigError("flow config: power_iters must be >= 1");
}

json spectral_to_json(const SpectralState& st) {
  return json{{"u", st.u}, {"v", st.v}, {"sigma", st.sigma}};
}

SpectralState spectral_from_json(const json& j, std::size_t rows, std::size_t cols,
                                 const std::string& where) {
  SpectralState st;
  st.u = j.at("u").get<std::vector<double>>();
  st.v = j.at("v").get<std::vector<double>>();
  st.sigma = j.at("sigma").get<double>();
  if (st.u.size() != rows || st.v.size() != cols)
    throw ConfigError("flow checkpoint: spectral state dimensions mismatch at " + where);
  return st;
}

json matrix_to_json(const Matrix& m) {
  const std::span<const double> d = m.data();
  return json(std::vector<double>(d.begin(), d.end()));
}

Matrix matrix_from_json(const json& j, int rows, int cols, const std::string& where) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
    throw ConfigError("flow checkpoint: wrong element count for " + where);
  Matrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

}  // namespace

std::string to_string(FlowKind k) { return k == FlowKind::full ? "full" : "triangular"; }
std::string to_string(BaseKind k) { return k == BaseKind::gaussian ? "gaussian" : "logistic"; }

FlowKind flow_kind_from_string(const std::string& s) {
  if (s == "full") return FlowKind::full;
  if (s == "triangular") return FlowKind::triangular;
  throw ConfigError("unknown flow kind: " + s);
}

BaseKind base_kind_from_string(const std::string& s) {
  if (s == "gaussian") return BaseKind::gaussian;
  if (s == "logistic") return BaseKind::logistic;
  throw ConfigError("unknown base kind: " + s);
}

int FlowModel::param_count() const {
  const BlockLayout lay{cfg.n, cfg.hidden_width};
  return static_cast<int>(lay.per_block() * static_cast<std::size_t>(cfg.block_count));
}

std::vector<double> FlowModel::flatten() const {
  std::vector<double> flat(static_cast<std::size_t>(param_count()));
  flatten_into(flat);
  return flat;
}

void FlowModel::flatten_into(std::span<double> out) const {
  std::span<double> cursor = out;
  for (const ResidualBlock& b : blocks) {
    copy_out(b.w1, cursor);
    copy_out(b.b1, cursor);
    copy_out(b.w2, cursor);
    copy_out(b.b2, cursor);
    copy_out(b.w3, cursor);
    copy_out(b.b3, cursor);
  }
}

void FlowModel::set_from_flat(std::span<const double> flat) {
  std::span<const double> cursor = flat;
  for (ResidualBlock& b : blocks) {
    copy_in(b.w1, cursor);
    copy_in(b.b1, cursor);
    copy_in(b.w2, cursor);
    copy_in(b.b2, cursor);
    copy_in(b.w3, cursor);
    copy_in(b.b3, cursor);
  }
}

std::vector<std::uint8_t> FlowModel::weight_slots() const {
  std::vector<std::uint8_t> slots(static_cast<std::size_t>(param_count()), 0);
  std::size_t o = 0;
  for (const ResidualBlock& b : blocks) {
    const auto nn = static_cast<std::size_t>(b.n), ww = static_cast<std::size_t>(b.w);
    for (std::size_t u = 0; u < ww; ++u)
      for (std::size_t j = 0; j < nn; ++j)
        slots[o + u * nn + j] = !b.masked || static_cast<std::size_t>(b.deg1[u]) >= j ? 1 : 0;
    o += ww * nn + ww;  // skip b1
    for (std::size_t v = 0; v < ww; ++v)
      for (std::size_t u = 0; u < ww; ++u)
        slots[o + v * ww + u] = !b.masked || b.deg2[v] >= b.deg1[u] ? 1 : 0;
    o += ww * ww + ww;  // skip b2
    for (std::size_t i = 0; i < nn; ++i)
      for (std::size_t u = 0; u < ww; ++u)
        slots[o + i * ww + u] = !b.masked || static_cast<std::size_t>(b.deg2[u]) <= i ? 1 : 0;
    o += nn * ww + nn;  // skip b3
  }
  return slots;
}

std::vector<std::uint8_t> FlowModel::masked_slots() const {
  std::vector<std::uint8_t> frozen(static_cast<std::size_t>(param_count()), 0);
  std::size_t o = 0;
  for (const ResidualBlock& b : blocks) {
    const auto nn = static_cast<std::size_t>(b.n), ww = static_cast<std::size_t>(b.w);
    if (b.masked) {
      for (std::size_t u = 0; u < ww; ++u)
        for (std::size_t j = 0; j < nn; ++j)
          if (static_cast<std::size_t>(b.deg1[u]) < j) frozen[o + u * nn + j] = 1;
    }
    o += ww * nn + ww;
    if (b.masked) {
      for (std::size_t v = 0; v < ww; ++v)
        for (std::size_t u = 0; u < ww; ++u)
          if (b.deg2[v] < b.deg1[u]) frozen[o + v * ww + u] = 1;
    }
    o += ww * ww + ww;
    if (b.masked) {
      for (std::size_t i = 0; i < nn; ++i)
        for (std::size_t u = 0; u < ww; ++u)
          if (static_cast<std::size_t>(b.deg2[u]) > i) frozen[o + i * ww + u] = 1;
    }
    o += nn * ww + nn;
  }
  return frozen;
}

void FlowModel::apply_masks() {
  for (ResidualBlock& b : blocks) {
    if (!b.masked) continue;
    for (int u = 0; u < b.w; ++u)
      for (int j = 0; j < b.n; ++j)
        if (b.deg1[static_cast<std::size_t>(u)] < j) b.w1(u, j) = 0.0;
    for (int v = 0; v < b.w; ++v)
      for (int u = 0; u < b.w; ++u)
        if (b.deg2[static_cast<std::size_t>(v)] < b.deg1[static_cast<std::size_t>(u)])
          b.w2(v, u) = 0.0;
    for (int i = 0; i < b.n; ++i)
      for (int u = 0; u < b.w; ++u)
        if (b.deg2[static_cast<std::size_t>(u)] > i) b.w3(i, u) = 0.0;
  }
}

void FlowModel::normalize_blocks() {
  apply_masks();
  for (ResidualBlock& b : blocks) spectral_normalize(b, cfg.power_iters);
}

double spectral_rescale(Matrix& w, SpectralState& st, double target, int power_iters) {
  const auto rows = static_cast<std::size_t>(w.rows()), cols = static_cast<std::size_t>(w.cols());
  if (st.u.size() != rows)
    seed_unit_vector(st.u, rows, rows * 1000003ull + cols);
  if (st.v.size() != cols) st.v.assign(cols, 0.0);
  std::vector<double> wv(rows);
  double sigma = 0.0;
  for (int it = 0; it < power_iters; ++it) {
    matvec_t(w, st.u, st.v);
    const double nv = vec_norm(st.v);
    if (nv < 1e-30) {
      st.sigma = 0.0;
      return 0.0;
    }
    for (double& x : st.v) x /= nv;
    matvec(w, st.v, wv);
    sigma = vec_norm(wv);
    if (sigma < 1e-30) {
      st.sigma = 0.0;
      return 0.0;
    }
    for (std::size_t i = 0; i < rows; ++i) st.u[i] = wv[i] / sigma;
  }
  if (sigma > target) {
    const double f = target / sigma;
    for (double& x : w.data()) x *= f;
    st.sigma = target;
  } else {
    st.sigma = sigma;
  }
  return sigma;
}

SpectralEstimates spectral_normalize(ResidualBlock& b, int power_iters) {
  if (power_iters < 1) throw DomainError("spectral_normalize: power_iters must be >= 1");
  const double target = std::pow(b.c, 1.0 / kWeightsPerBlock);
  SpectralEstimates est;
  est.s1 = spectral_rescale(b.w1, b.s1, target, power_iters);
  est.s2 = spectral_rescale(b.w2, b.s2, target, power_iters);
  est.s3 = spectral_rescale(b.w3, b.s3, target, power_iters);
  return est;
}

FlowModel build_flow(const FlowConfig& cfg) {
  validate_config(cfg);
  FlowModel m;
  m.cfg = cfg;
  const int n = cfg.n, w = cfg.hidden_width;
  const double bound1 = 1.0 / std::sqrt(static_cast<double>(n));
  const double boundw = 1.0 / std::sqrt(static_cast<double>(w));
  m.blocks.reserve(static_cast<std::size_t>(cfg.block_count));
  for (int k = 0; k < cfg.block_count; ++k) {
    ResidualBlock b;
    b.n = n;
    b.w = w;
    b.c = cfg.lipschitz;
    b.alpha = cfg.alpha;
    b.masked = cfg.kind == FlowKind::triangular;
    b.deg1.resize(static_cast<std::size_t>(w));
    b.deg2.resize(static_cast<std::size_t>(w));
    for (int u = 0; u < w; ++u) b.deg1[static_cast<std::size_t>(u)] = u % n;
    for (int v = 0; v < w; ++v) b.deg2[static_cast<std::size_t>(v)] = v % n;
    b.w1 = Matrix(w, n);
    b.w2 = Matrix(w, w);
    b.w3 = Matrix(n, w);
    b.b1.assign(static_cast<std::size_t>(w), 0.0);
    b.b2.assign(static_cast<std::size_t>(w), 0.0);
    b.b3.assign(static_cast<std::size_t>(n), 0.0);
    const std::uint64_t base = static_cast<std::uint64_t>(k) * 8ull;
    Rng r1(mix_seed(cfg.seed, base));
    r1.fill_uniform(b.w1.data(), -bound1, bound1);
    Rng r2(mix_seed(cfg.seed, base + 1));
    r2.fill_uniform(b.w2.data(), -boundw, boundw);
    Rng r3(mix_seed(cfg.seed, base + 2));
    // small output layer keeps the fresh model near the identity
    r3.fill_uniform(b.w3.data(), -1e-2 * boundw, 1e-2 * boundw);
    Rng rs(mix_seed(cfg.seed, base + 3));
    b.s1.u.resize(static_cast<std::size_t>(w));
    b.s2.u.resize(static_cast<std::size_t>(w));
    b.s3.u.resize(static_cast<std::size_t>(n));
    for (std::vector<double>* u : {&b.s1.u, &b.s2.u, &b.s3.u}) {
      double norm = 0.0;
      while (norm < 1e-12) {
        rs.fill_normal(*u);
        norm = vec_norm(*u);
      }
      for (double& x : *u) x /= norm;
    }
    m.blocks.push_back(std::move(b));
  }
  m.normalize_blocks();
  return m;
}

FlowModel build_flow(int n, int block_count, int hidden_width, FlowKind kind, BaseKind base,
                     std::uint64_t seed) {
  FlowConfig cfg;
  cfg.n = n;
  cfg.block_count = block_count;
  cfg.hidden_width = hidden_width;
  cfg.kind = kind;
  cfg.base = base;
  cfg.seed = seed;
  return build_flow(cfg);
}

void base_sample(BaseKind kind, Rng& rng, std::span<double> out) {
  if (kind == BaseKind::gaussian) {
    rng.fill_normal(out);
    return;
  }
  for (double& x : out) {
    double u = rng.uniform01();
    while (u <= 0.0) u = rng.uniform01();
    x = std::log(u) - std::log1p(-u);
  }
}

ForwardEval flow_forward(const FlowModel& m, std::span<const double> x) {
  const std::vector<double> flat = m.flatten();
  return flow_eval<double>(m.cfg, flat, x);
}

std::vector<double> flow_inverse(const FlowModel& m, std::span<const double> y, double tol,
                                 int max_iters, InverseStats* stats) {
  if (!(tol > 0.0)) throw DomainError("flow_inverse: tol must be > 0");
  if (max_iters < 1) throw DomainError("flow_inverse: max_iters must be >= 1");
  const int n = m.cfg.n, w = m.cfg.hidden_width;
  // stop once the contraction step is small enough that the block fixed-point
  // error c/(1-c) * step stays below tol
  const double step_tol = 0.5 * tol * (1.0 - m.cfg.lipschitz);
  std::vector<double> x(y.begin(), y.end()), xn(static_cast<std::size_t>(n));
  std::vector<double> a1(static_cast<std::size_t>(w)), a2(static_cast<std::size_t>(w));
  std::vector<double> h(static_cast<std::size_t>(n));
  InverseStats local;
  InverseStats& st = stats != nullptr ? *stats : local;
  st = InverseStats{};
  for (int k = m.cfg.block_count - 1; k >= 0; --k) {
    const ResidualBlock& b = m.blocks[static_cast<std::size_t>(k)];
    std::vector<double> target = x;
    int it = 0;
    double step = std::numeric_limits<double>::infinity();
    while (true) {
      block_h(b, x, a1, a2, h);
      step = 0.0;
      for (int i = 0; i < n; ++i) {
        xn[static_cast<std::size_t>(i)] =
            target[static_cast<std::size_t>(i)] - h[static_cast<std::size_t>(i)];
        step = std::max(step, std::fabs(xn[static_cast<std::size_t>(i)] -
                                        x[static_cast<std::size_t>(i)]));
      }
      std::swap(x, xn);
      ++it;
      if (step <= step_tol) break;
      if (it >= max_iters) {
        std::ostringstream msg;
        msg << "flow_inverse: block " << k << " did not contract below " << step_tol << " within "
            << max_iters << " iterations (last step " << step << ")";
        throw NoConvergence(msg.str());
      }
    }
    st.max_block_iterations = std::max(st.max_block_iterations, it);
    st.last_step = step;
  }
  return x;
}

double model_log_likelihood(const FlowModel& m, std::span<const double> x) {
  const std::vector<double> flat = m.flatten();
  return model_log_likelihood_at<double>(m.cfg, flat, x);
}

double model_cima_term(const FlowModel& m, std::span<const double> x) {
  const std::vector<double> flat = m.flatten();
  return model_cima_term_at<double>(m.cfg, flat, x);
}

std::string flow_to_json(const FlowModel& m) {
  json doc;
  doc["config"] = json{{"n", m.cfg.n},
                       {"block_count", m.cfg.block_count},
                       {"hidden_width", m.cfg.hidden_width},
                       {"kind", to_string(m.cfg.kind)},
                       {"base", to_string(m.cfg.base)},
                       {"seed", m.cfg.seed},
                       {"lipschitz", m.cfg.lipschitz},
                       {"alpha", m.cfg.alpha},
                       {"power_iters", m.cfg.power_iters}};
  doc["training_config_hash"] = m.training_config_hash;
  json blocks = json::array();
  for (const ResidualBlock& b : m.blocks) {
    json jb;
    jb["w1"] = matrix_to_json(b.w1);
    jb["b1"] = b.b1;
    jb["w2"] = matrix_to_json(b.w2);
    jb["b2"] = b.b2;
    jb["w3"] = matrix_to_json(b.w3);
    jb["b3"] = b.b3;
    jb["spectral"] = json{{"s1", spectral_to_json(b.s1)},
                          {"s2", spectral_to_json(b.s2)},
                          {"s3", spectral_to_json(b.s3)}};
    blocks.push_back(std::move(jb));
  }
  doc["blocks"] = std::move(blocks);
  return doc.dump(2);
}

FlowModel flow_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("flow checkpoint: invalid JSON: ") + e.what());
  }
  try {
    const json& jc = doc.at("config");
    FlowConfig cfg;
    cfg.n = jc.at("n").get<int>();
    cfg.block_count = jc.at("block_count").get<int>();
    cfg.hidden_width = jc.at("hidden_width").get<int>();
    cfg.kind = flow_kind_from_string(jc.at("kind").get<std::string>());
    cfg.base = base_kind_from_string(jc.at("base").get<std::string>());
    cfg.seed = jc.at("seed").get<std::uint64_t>();
    cfg.lipschitz = jc.at("lipschitz").get<double>();
    cfg.alpha = jc.at("alpha").get<double>();
    cfg.power_iters = jc.at("power_iters").get<int>();
    validate_config(cfg);
    const json& jbs = doc.at("blocks");
    if (!jbs.is_array() || jbs.size() != static_cast<std::size_t>(cfg.block_count))
      throw ConfigError("flow checkpoint: blocks array does not match block_count");
    FlowModel m;
    m.cfg = cfg;
    m.training_config_hash = doc.value("training_config_hash", std::string());
    const auto nn = static_cast<std::size_t>(cfg.n), ww = static_cast<std::size_t>(cfg.hidden_width);
    int index = 0;
    for (const json& jb : jbs) {
      ResidualBlock b;
      b.n = cfg.n;
      b.w = cfg.hidden_width;
      b.c = cfg.lipschitz;
      b.alpha = cfg.alpha;
      b.masked = cfg.kind == FlowKind::triangular;
      b.deg1.resize(ww);
      b.deg2.resize(ww);
      for (std::size_t u = 0; u < ww; ++u) b.deg1[u] = static_cast<int>(u % nn);
      for (std::size_t v = 0; v < ww; ++v) b.deg2[v] = static_cast<int>(v % nn);
      const std::string where = "block " + std::to_string(index);
      b.w1 = matrix_from_json(jb.at("w1"), cfg.hidden_width, cfg.n, where + " w1");
      b.b1 = jb.at("b1").get<std::vector<double>>();
      b.w2 = matrix_from_json(jb.at("w2"), cfg.hidden_width, cfg.hidden_width, where + " w2");
      b.b2 = jb.at("b2").get<std::vector<double>>();
      b.w3 = matrix_from_json(jb.at("w3"), cfg.n, cfg.hidden_width, where + " w3");
      b.b3 = jb.at("b3").get<std::vector<double>>();
      if (b.b1.size() != ww || b.b2.size() != ww || b.b3.size() != nn)
        throw ConfigError("flow checkpoint: bias length mismatch at " + where);
      const json& js = jb.at("spectral");
      b.s1 = spectral_from_json(js.at("s1"), ww, nn, where + " s1");
      b.s2 = spectral_from_json(js.at("s2"), ww, ww, where + " s2");
      b.s3 = spectral_from_json(js.at("s3"), nn, ww, where + " s3");
      m.blocks.push_back(std::move(b));
      ++index;
    }
    for (const ResidualBlock& b : m.blocks) {
      if (!all_finite(b.w1) || !all_finite(b.w2) || !all_finite(b.w3))
        throw ConfigError("flow checkpoint: non-finite weight");
      if (b.masked) {
        for (int u = 0; u < b.w; ++u)
          for (int j = 0; j < b.n; ++j)
            if (b.deg1[static_cast<std::size_t>(u)] < j && b.w1(u, j) != 0.0)
              throw ConfigError("flow checkpoint: masked entry of w1 is nonzero");
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("flow checkpoint: missing or mistyped field: ") + e.what());
  }
}

void save_flow(const FlowModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out << flow_to_json(m) << '\n';
}

FlowModel load_flow(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return flow_from_json(ss.str());
}

}  // namespace ima::flows
