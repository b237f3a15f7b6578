#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "contrast.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace ima::flows {

enum class FlowKind { full, triangular };
enum class BaseKind { gaussian, logistic };

std::string to_string(FlowKind k);
std::string to_string(BaseKind k);
FlowKind flow_kind_from_string(const std::string& s);
BaseKind base_kind_from_string(const std::string& s);

struct FlowConfig {
  int n = 0;
  int block_count = 10;
  int hidden_width = 64;
  FlowKind kind = FlowKind::full;
  BaseKind base = BaseKind::gaussian;
  std::uint64_t seed = 0;
  double lipschitz = 0.9;  // bound c on Lip(h) per block
  double alpha = 0.3;      // leaky_tanh slope inside blocks
  int power_iters = 5;
};

/// Warm-start vectors for the power iteration, kept across normalization
/// passes; sigma is the most recent norm estimate (post-rescale).
struct SpectralState {
  std::vector<double> u, v;
  double sigma = 0.0;
};

/// One invertible unit x + h(x) with h = W3 act(W2 act(W1 x + b1) + b2) + b3.
/// The activation is leaky_tanh scaled by 1/(1+alpha) so it is 1-Lipschitz;
/// the Lipschitz budget then lives entirely in the three weight norms.
struct ResidualBlock {
  int n = 0, w = 0;
  double c = 0.9;
  double alpha = 0.3;
  bool masked = false;
  std::vector<int> deg1, deg2;  // hidden-unit dependency degrees (masked kind)
  Matrix w1, w2, w3;            // w x n, w x w, n x w
  std::vector<double> b1, b2, b3;
  SpectralState s1, s2, s3;
};

struct FlowModel {
  FlowConfig cfg;
  std::vector<ResidualBlock> blocks;
  std::string training_config_hash;

  int param_count() const;
  std::vector<double> flatten() const;
  void flatten_into(std::span<double> out) const;
  void set_from_flat(std::span<const double> flat);
  /// 1 where the flat slot is a trainable weight (not a bias, not masked out).
  std::vector<std::uint8_t> weight_slots() const;
  /// 1 where the flat slot is structurally zero under the dependency mask.
  std::vector<std::uint8_t> masked_slots() const;

  void apply_masks();
  void normalize_blocks();  // masks first, then spectral rescale per weight
};

FlowModel build_flow(const FlowConfig& cfg);
FlowModel build_flow(int n, int block_count, int hidden_width, FlowKind kind, BaseKind base,
                     std::uint64_t seed);

/// Rescale w in place so its estimated spectral norm is <= target. Returns the
/// pre-rescale estimate; already-compliant matrices are left untouched.
double spectral_rescale(Matrix& w, SpectralState& st, double target, int power_iters);

struct SpectralEstimates {
  double s1 = 0.0, s2 = 0.0, s3 = 0.0;
};

SpectralEstimates spectral_normalize(ResidualBlock& b, int power_iters);

// Flat parameter layout per block: w1, b1, w2, b2, w3, b3, row-major.
struct BlockLayout {
  int n = 0, w = 0;
  std::size_t per_block() const {
    const auto nn = static_cast<std::size_t>(n), ww = static_cast<std::size_t>(w);
    return ww * nn + ww + ww * ww + ww + nn * ww + nn;
  }
};

template <class S>
struct BlockParams {
  std::span<const S> w1, b1, w2, b2, w3, b3;
};

template <class S>
BlockParams<S> block_params(const BlockLayout& lay, std::span<const S> flat, int block) {
  const auto nn = static_cast<std::size_t>(lay.n), ww = static_cast<std::size_t>(lay.w);
  std::size_t o = static_cast<std::size_t>(block) * lay.per_block();
  BlockParams<S> p;
  p.w1 = flat.subspan(o, ww * nn);
  o += ww * nn;
  p.b1 = flat.subspan(o, ww);
  o += ww;
  p.w2 = flat.subspan(o, ww * ww);
  o += ww * ww;
  p.b2 = flat.subspan(o, ww);
  o += ww;
  p.w3 = flat.subspan(o, nn * ww);
  o += nn * ww;
  p.b3 = flat.subspan(o, nn);
  return p;
}

template <class S>
struct FlowEval {
  std::vector<S> y;
  Mat<S> jac;
  S log_det;
};

namespace detail {

// a = (tanh z + alpha z) / (1 + alpha), d = da/dz; shares the tanh evaluation.
template <class S>
inline void act_pair(const S& z, double alpha, double inv1a, S& a, S& d) {
  using std::tanh;
  using ad::tanh;
  const S t = tanh(z);
  a = (t + z * S(alpha)) * S(inv1a);
  d = (S(1.0 + alpha) - t * t) * S(inv1a);
}

template <class S>
struct FlowScratch {
  std::vector<S> x, y, a1, d1, a2, d2, t1, t2, col;
  void ensure(int n, int w) {
    x.assign(static_cast<std::size_t>(n), S(0.0));
    y.assign(static_cast<std::size_t>(n), S(0.0));
    a1.assign(static_cast<std::size_t>(w), S(0.0));
    d1.assign(static_cast<std::size_t>(w), S(0.0));
    a2.assign(static_cast<std::size_t>(w), S(0.0));
    d2.assign(static_cast<std::size_t>(w), S(0.0));
    t1.assign(static_cast<std::size_t>(w), S(0.0));
    t2.assign(static_cast<std::size_t>(w), S(0.0));
    col.assign(static_cast<std::size_t>(n), S(0.0));
  }
};

}  // namespace detail

/// y = g(x) with the analytic Jacobian chained across blocks and its exact
/// log|det|. Works over double (evaluation) and ad::Var (parameter
/// gradients); `params` is the flattened parameter vector.
template <class S>
FlowEval<S> flow_eval(const FlowConfig& cfg, std::span<const S> params, std::span<const double> x0,
                      detail::FlowScratch<S>* scratch = nullptr) {
  const int n = cfg.n, w = cfg.hidden_width;
  const double inv1a = 1.0 / (1.0 + cfg.alpha);
  const BlockLayout lay{n, w};
  detail::FlowScratch<S> local;
  detail::FlowScratch<S>& sc = scratch != nullptr ? *scratch : local;
  sc.ensure(n, w);
  for (int i = 0; i < n; ++i) sc.x[static_cast<std::size_t>(i)] = S(x0[static_cast<std::size_t>(i)]);

  FlowEval<S> out{{}, Mat<S>(n, n), S(0.0)};
  Mat<S> jb(n, n), chained(n, n);
  const auto nn = static_cast<std::size_t>(n), ww = static_cast<std::size_t>(w);
  for (int k = 0; k < cfg.block_count; ++k) {
    const BlockParams<S> p = block_params<S>(lay, params, k);
    // forward through h, keeping activation derivatives for the Jacobian
    for (std::size_t u = 0; u < ww; ++u) {
      const S z = ad::dot(p.w1.subspan(u * nn, nn), std::span<const S>(sc.x)) + p.b1[u];
      detail::act_pair(z, cfg.alpha, inv1a, sc.a1[u], sc.d1[u]);
    }
    for (std::size_t v = 0; v < ww; ++v) {
      const S z = ad::dot(p.w2.subspan(v * ww, ww), std::span<const S>(sc.a1)) + p.b2[v];
      detail::act_pair(z, cfg.alpha, inv1a, sc.a2[v], sc.d2[v]);
    }
    for (std::size_t i = 0; i < nn; ++i) {
      const S h = ad::dot(p.w3.subspan(i * ww, ww), std::span<const S>(sc.a2)) + p.b3[i];
      sc.y[i] = sc.x[i] + h;
    }
    // block Jacobian I + W3 D2 W2 D1 W1, one input column at a time
    for (std::size_t j = 0; j < nn; ++j) {
      for (std::size_t u = 0; u < ww; ++u) sc.t1[u] = sc.d1[u] * p.w1[u * nn + j];
      for (std::size_t v = 0; v < ww; ++v)
        sc.t2[v] = sc.d2[v] * ad::dot(p.w2.subspan(v * ww, ww), std::span<const S>(sc.t1));
      for (std::size_t i = 0; i < nn; ++i) {
        const S cij = ad::dot(p.w3.subspan(i * ww, ww), std::span<const S>(sc.t2));
        jb(static_cast<int>(i), static_cast<int>(j)) = i == j ? cij + S(1.0) : cij;
      }
    }
    if (k == 0) {
      out.jac = jb;
    } else {
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < n; ++i) sc.col[static_cast<std::size_t>(i)] = out.jac(i, j);
        for (int i = 0; i < n; ++i)
          chained(i, j) = ad::dot(jb.row(i), std::span<const S>(sc.col));
      }
      std::swap(out.jac, chained);
    }
    std::swap(sc.x, sc.y);
  }
  out.y.assign(sc.x.begin(), sc.x.end());
  out.log_det = logabsdet(out.jac);
  return out;
}

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
using ad::softplus;

/// Factorized base log-density: standard normal or unit-scale logistic.
template <class S>
S base_log_density(BaseKind kind, std::span<const S> y) {
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  S acc(0.0);
  if (kind == BaseKind::gaussian) {
    for (const S& yi : y) acc += yi * yi * S(-0.5) - S(kHalfLog2Pi);
  } else {
    for (const S& yi : y) acc += -yi - S(2.0) * softplus(-yi);
  }
  return acc;
}

void base_sample(BaseKind kind, Rng& rng, std::span<double> out);

template <class S>
S model_log_likelihood_at(const FlowConfig& cfg, std::span<const S> params,
                          std::span<const double> x) {
  FlowEval<S> ev = flow_eval(cfg, params, x);
  return base_log_density(cfg.base, std::span<const S>(ev.y)) + ev.log_det;
}

/// Local orthogonality contrast of the inverse map at y = g(x):
/// cima_local of matinv(J_g).
template <class S>
S model_cima_term_at(const FlowConfig& cfg, std::span<const S> params, std::span<const double> x) {
  FlowEval<S> ev = flow_eval(cfg, params, x);
  return contrast::cima_local(matinv(ev.jac));
}

using ForwardEval = FlowEval<double>;

ForwardEval flow_forward(const FlowModel& m, std::span<const double> x);

struct InverseStats {
  int max_block_iterations = 0;
  double last_step = 0.0;
};

std::vector<double> flow_inverse(const FlowModel& m, std::span<const double> y, double tol = 1e-10,
                                 int max_iters = 500, InverseStats* stats = nullptr);

double model_log_likelihood(const FlowModel& m, std::span<const double> x);
double model_cima_term(const FlowModel& m, std::span<const double> x);

std::string flow_to_json(const FlowModel& m);
FlowModel flow_from_json(const std::string& text);
void save_flow(const FlowModel& m, const std::string& path);
FlowModel load_flow(const std::string& path);

}  // namespace ima::flows
