#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace ima::ad {

class Tape;

/// A scalar whose derivatives can be traced back to tape leaves.
/// Untracked instances (no tape) behave as plain constants, so mixed
/// Var/double arithmetic folds constants without touching the tape.
class Var {
 public:
  Var() : v_(0.0), idx_(-1), tape_(nullptr) {}
  Var(double v) : v_(v), idx_(-1), tape_(nullptr) {}  // NOLINT: implicit by design
  Var(double v, std::int32_t idx, Tape* tape) : v_(v), idx_(idx), tape_(tape) {}

  double value() const { return v_; }
  bool tracked() const { return idx_ >= 0; }
  std::int32_t index() const { return idx_; }
  Tape* tape() const { return tape_; }

 private:
  double v_;
  std::int32_t idx_;
  Tape* tape_;
};

/// Reverse-mode recorder.
///
/// Nodes are stored structure-of-arrays: node i owns the payload slots
/// [end_[i-1], end_[i]) of (parent_, partial_). A leaf is a node with an
/// empty payload. Edges for a node are appended first, then commit()
/// assigns the node index, so parents always precede children.
class Tape {
 public:
  Var leaf(double v) { return Var(v, commit(), this); }

  void edge(std::int32_t parent, double partial) {
    parent_.push_back(static_cast<std::uint32_t>(parent));
    partial_.push_back(partial);
  }

  std::int32_t commit() {
    end_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return static_cast<std::int32_t>(end_.size()) - 1;
  }

  std::size_t node_count() const { return end_.size(); }
  std::size_t payload_count() const { return parent_.size(); }

  void clear() {
    end_.clear();
    parent_.clear();
    partial_.clear();
  }

  void reserve(std::size_t nodes, std::size_t payload) {
    end_.reserve(nodes);
    parent_.reserve(payload);
    partial_.reserve(payload);
  }

  /// Accumulate adjoints of every node with respect to `out`.
  /// Results are read back through adjoint().
  void backward(std::int32_t out) {
    adjoint_.assign(end_.size(), 0.0);
    if (out < 0) return;
    adjoint_[static_cast<std::size_t>(out)] = 1.0;
    const std::uint32_t* parents = parent_.data();
    const double* partials = partial_.data();
    for (std::int32_t i = out; i >= 0; --i) {
      const double a = adjoint_[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const std::uint32_t lo = i == 0 ? 0 : end_[static_cast<std::size_t>(i) - 1];
      const std::uint32_t hi = end_[static_cast<std::size_t>(i)];
      for (std::uint32_t k = lo; k < hi; ++k) {
        adjoint_[parents[k]] += partials[k] * a;
      }
    }
  }

  double adjoint(std::int32_t idx) const {
    return idx >= 0 && static_cast<std::size_t>(idx) < adjoint_.size()
               ? adjoint_[static_cast<std::size_t>(idx)]
               : 0.0;
  }

  double adjoint(const Var& v) const { return adjoint(v.index()); }

 private:
  std::vector<std::uint32_t> end_;
  std::vector<std::uint32_t> parent_;
  std::vector<double> partial_;
  std::vector<double> adjoint_;
};

namespace detail {

inline Tape* tape_of(const Var& a, const Var& b) {
  return a.tape() != nullptr ? a.tape() : b.tape();
}

inline Var node1(Tape* t, double v, const Var& a, double da) {
  t->edge(a.index(), da);
  return Var(v, t->commit(), t);
}

inline Var node2(Tape* t, double v, const Var& a, double da, const Var& b, double db) {
  if (a.tracked()) t->edge(a.index(), da);
  if (b.tracked()) t->edge(b.index(), db);
  return Var(v, t->commit(), t);
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (t == nullptr) return Var(a.value() + b.value());
  return detail::node2(t, a.value() + b.value(), a, 1.0, b, 1.0);
}

inline Var operator-(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (t == nullptr) return Var(a.value() - b.value());
  return detail::node2(t, a.value() - b.value(), a, 1.0, b, -1.0);
}

inline Var operator*(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (t == nullptr) return Var(a.value() * b.value());
  return detail::node2(t, a.value() * b.value(), a, b.value(), b, a.value());
}

inline Var operator/(const Var& a, const Var& b) {
  Tape* t = detail::tape_of(a, b);
  if (t == nullptr) return Var(a.value() / b.value());
  const double inv = 1.0 / b.value();
  return detail::node2(t, a.value() * inv, a, inv, b, -a.value() * inv * inv);
}

inline Var operator-(const Var& a) {
  if (!a.tracked()) return Var(-a.value());
  return detail::node1(a.tape(), -a.value(), a, -1.0);
}

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline Var tanh(const Var& a) {
  const double th = std::tanh(a.value());
  if (!a.tracked()) return Var(th);
  return detail::node1(a.tape(), th, a, 1.0 - th * th);
}

inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  if (!a.tracked()) return Var(e);
  return detail::node1(a.tape(), e, a, e);
}

inline Var log(const Var& a) {
  if (!a.tracked()) return Var(std::log(a.value()));
  return detail::node1(a.tape(), std::log(a.value()), a, 1.0 / a.value());
}

/// log|x|; the derivative 1/x is valid on either side of zero.
inline Var log_abs(const Var& a) {
  if (!a.tracked()) return Var(std::log(std::fabs(a.value())));
  return detail::node1(a.tape(), std::log(std::fabs(a.value())), a, 1.0 / a.value());
}

inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.value());
  if (!a.tracked()) return Var(s);
  return detail::node1(a.tape(), s, a, 0.5 / s);
}

inline Var abs(const Var& a) {
  if (!a.tracked()) return Var(std::fabs(a.value()));
  const double sg = a.value() < 0.0 ? -1.0 : (a.value() > 0.0 ? 1.0 : 0.0);
  return detail::node1(a.tape(), std::fabs(a.value()), a, sg);
}

inline Var square(const Var& a) {
  if (!a.tracked()) return Var(a.value() * a.value());
  return detail::node1(a.tape(), a.value() * a.value(), a, 2.0 * a.value());
}

/// log(1 + exp(x)), overflow-safe; derivative is the logistic sigmoid.
inline Var softplus(const Var& a) {
  const double x = a.value();
  const double v = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  if (!a.tracked()) return Var(v);
  const double sig = x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  return detail::node1(a.tape(), v, a, sig);
}

/// Fused inner product: one tape node with up to 2k edges.
inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  double v = 0.0;
  Tape* t = nullptr;
  for (std::size_t i = 0; i < a.size(); ++i) {
    v += a[i].value() * b[i].value();
    if (t == nullptr) t = detail::tape_of(a[i], b[i]);
  }
  if (t == nullptr) return Var(v);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tracked()) t->edge(a[i].index(), b[i].value());
    if (b[i].tracked()) t->edge(b[i].index(), a[i].value());
  }
  return Var(v, t->commit(), t);
}

inline Var dot(std::span<const double> a, std::span<const Var> b) {
  double v = 0.0;
  Tape* t = nullptr;
  for (std::size_t i = 0; i < a.size(); ++i) {
    v += a[i] * b[i].value();
    if (t == nullptr) t = b[i].tape();
  }
  if (t == nullptr) return Var(v);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i].tracked()) t->edge(b[i].index(), a[i]);
  }
  return Var(v, t->commit(), t);
}

/// Fused sum.
inline Var sum(std::span<const Var> xs) {
  double v = 0.0;
  Tape* t = nullptr;
  for (const Var& x : xs) {
    v += x.value();
    if (t == nullptr) t = x.tape();
  }
  if (t == nullptr) return Var(v);
  for (const Var& x : xs) {
    if (x.tracked()) t->edge(x.index(), 1.0);
  }
  return Var(v, t->commit(), t);
}

/// Plain-double overloads so generic code can call ad::dot/ad::sum with either
/// scalar type.
inline double dot(std::span<const double> a, std::span<const double> b) {
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) v += a[i] * b[i];
  return v;
}

inline double sum(std::span<const double> xs) {
  double v = 0.0;
  for (const double x : xs) v += x;
  return v;
}

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }

}  // namespace ima::ad
