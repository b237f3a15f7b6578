#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace ima::mixing {

enum class InitKind { orthogonal, uniform };
enum class PriorKind { standard_normal, uniform01 };

const char* to_string(InitKind k);
const char* to_string(PriorKind k);
InitKind init_kind_from_string(const std::string& s);
PriorKind prior_kind_from_string(const std::string& s);

/// tanh(x) + alpha * x. Strictly increasing for alpha > 0.
double leaky_tanh(double x, double alpha);
ad::Var leaky_tanh(const ad::Var& x, double alpha);

/// 1 - tanh^2(x) + alpha.
double leaky_tanh_deriv(double x, double alpha);

/// Scalar inverse by safeguarded Newton (analytic derivative, bisection
/// fallback, bracket from |leaky_tanh(x) - alpha x| <= 1).
double leaky_tanh_inverse(double y, double alpha);

/// Factorized source distribution with closed-form density.
struct SourcePrior {
  PriorKind kind = PriorKind::standard_normal;
  int n = 2;

  double log_density(std::span<const double> s) const;
  void sample(Rng& rng, std::span<double> out) const;
};

struct Layer {
  Matrix weight;
  std::vector<double> bias;
};

/// Ground-truth MLP: layer k applies W_k h + b_k, then element-wise
/// leaky_tanh except after the final layer. Immutable once built.
struct MixingFunction {
  int n = 0;
  int L = 0;
  double alpha = 0.1;
  InitKind init_kind = InitKind::orthogonal;
  std::uint64_t seed = 0;
  std::vector<Layer> layers;
};

/// Orthogonal kind: weights from QR of seeded Gaussians (R diagonal made
/// positive), biases standard normal. Uniform kind: weights U[-1/sqrt(n),
/// 1/sqrt(n)] resampled while near-singular, biases zero. Deterministic.
MixingFunction sample_mixing(int n, int L, InitKind kind, std::uint64_t seed, double alpha = 0.1);

/// Rejects mixings violating construction invariants (used after load).
void validate_mixing(const MixingFunction& m);

template <class S>
void mix_forward(const MixingFunction& m, std::span<const S> s, std::span<S> out) {
  std::vector<S> h(s.begin(), s.end());
  std::vector<S> z(m.n, S(0.0));
  for (int k = 0; k < m.L; ++k) {
    const Layer& layer = m.layers[k];
    for (int i = 0; i < m.n; ++i)
      z[i] = ad::dot(layer.weight.row(i), std::span<const S>(h)) + layer.bias[i];
    const bool last = (k == m.L - 1);
    for (int i = 0; i < m.n; ++i) h[i] = last ? z[i] : leaky_tanh(z[i], m.alpha);
  }
  for (int i = 0; i < m.n; ++i) out[i] = h[i];
}

std::vector<double> mix_forward(const MixingFunction& m, std::span<const double> s);

/// Layer-by-layer inversion: linear solves and scalar Newton.
std::vector<double> mix_inverse(const MixingFunction& m, std::span<const double> x);

/// Exact Jacobian at a source point via the chain rule (W_{L-1} D ... D W_0).
Matrix mix_jacobian(const MixingFunction& m, std::span<const double> s);

/// log p_x(x) by change of variables through the exact inverse.
double true_log_density(const MixingFunction& m, const SourcePrior& prior,
                        std::span<const double> x);

/// Precomputed per-layer inverses and determinants for bulk density work.
class MixingEvaluator {
 public:
  explicit MixingEvaluator(const MixingFunction& m);

  struct InverseResult {
    std::vector<double> s;
    double log_abs_det_jacobian;  // of the forward map at s
  };
  InverseResult inverse_with_logdet(std::span<const double> x) const;
  double log_density(const SourcePrior& prior, std::span<const double> x) const;
  const MixingFunction& function() const { return m_; }

 private:
  MixingFunction m_;
  std::vector<Matrix> weight_inv_;
  double sum_log_abs_det_w_ = 0.0;
};

struct Dataset {
  Matrix sources;       // count x n
  Matrix observations;  // count x n, row k = mix_forward(sources row k)
  std::uint64_t mixing_seed = 0;
  PriorKind prior = PriorKind::standard_normal;
};

Dataset sample_dataset(const MixingFunction& m, const SourcePrior& prior, int count,
                       std::uint64_t seed);

std::string mixing_to_json(const MixingFunction& m);
MixingFunction mixing_from_json(const std::string& text);
void save_mixing(const MixingFunction& m, const std::string& path);
MixingFunction load_mixing(const std::string& path);

void write_dataset_csv(const Dataset& d, const std::string& path);
Dataset read_dataset_csv(const std::string& path);

}  // namespace ima::mixing
