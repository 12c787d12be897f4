#pragma once

// Scalar reverse-mode automatic differentiation.
//
// A Tape records every scalar operation as a node holding its value and the
// local partial derivatives with respect to its parents. Nodes are appended
// in evaluation order, so creation order is a topological order and backward
// is one reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/special_functions.hpp"

namespace tweedie_avb::ad {

enum class OpTag : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  exp,
  log,
  tanh,
  sigmoid,
  softplus,
  pow_const,
  log_gamma,
  log_sum_exp,
  affine,
  sum,
};

struct Edge {
  std::uint32_t parent;
  double partial;
};

struct TapeNode {
  double value = 0.0;
  double gradient = 0.0;
  std::uint32_t edge_begin = 0;
  std::uint32_t edge_count = 0;
  OpTag op = OpTag::constant;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid until the tape is
/// reset.
class Var {
 public:
  Var() = default;

  double value() const;
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id, std::uint32_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
  std::uint32_t generation_ = 0;
};

class Tape {
 public:
  Tape() {
    nodes_.reserve(1024);
    edges_.reserve(4096);
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (its gradient is what callers read back).
  Var variable(double value) { return push_node(OpTag::leaf, value, {}); }

  Var constant(double value) { return push_node(OpTag::constant, value, {}); }

  /// Appends a node whose parents and local partials are given by `edges`.
  Var push_node(OpTag op, double value, std::span<const Edge> edges) {
    if (backward_done_) {
      throw UsageError("tape already differentiated; reset() before reuse");
    }
    TapeNode node;
    node.value = value;
    node.op = op;
    node.edge_begin = static_cast<std::uint32_t>(edges_.size());
    node.edge_count = static_cast<std::uint32_t>(edges.size());
    edges_.insert(edges_.end(), edges.begin(), edges.end());
    nodes_.push_back(node);
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1),
               generation_);
  }

  Var push_node(OpTag op, double value, std::initializer_list<Edge> edges) {
    return push_node(op, value, std::span<const Edge>(edges.begin(), edges.size()));
  }

  /// Reverse sweep from `output`. May be called once per recording.
  void backward(Var output) {
    check(output);
    if (backward_done_) {
      throw UsageError("backward called twice on the same recording");
    }
    backward_done_ = true;
    nodes_[output.id_].gradient = 1.0;
    for (std::int64_t i = output.id_; i >= 0; --i) {
      const TapeNode& node = nodes_[static_cast<std::size_t>(i)];
      const double g = node.gradient;
      if (g == 0.0) continue;
      const Edge* e = edges_.data() + node.edge_begin;
      for (std::uint32_t k = 0; k < node.edge_count; ++k) {
        nodes_[e[k].parent].gradient += g * e[k].partial;
      }
    }
  }

  double value(Var v) const {
    check(v);
    return nodes_[v.id_].value;
  }

  /// Adjoint of `v` after backward(); always 0 for constants.
  double gradient(Var v) const {
    check(v);
    const TapeNode& n = nodes_[v.id_];
    return n.op == OpTag::constant ? 0.0 : n.gradient;
  }

  OpTag op(Var v) const {
    check(v);
    return nodes_[v.id_].op;
  }

  const TapeNode& node(Var v) const {
    check(v);
    return nodes_[v.id_];
  }

  std::span<const Edge> parents(Var v) const {
    const TapeNode& n = node(v);
    return {edges_.data() + n.edge_begin, n.edge_count};
  }

  /// Drops all nodes. Every outstanding Var becomes stale.
  void reset() {
    nodes_.clear();
    edges_.clear();
    backward_done_ = false;
    ++generation_;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool differentiated() const noexcept { return backward_done_; }

  void check(Var v) const {
    if (v.tape_ != this) {
      throw UsageError("variable belongs to a different tape");
    }
    if (v.generation_ != generation_ || v.id_ >= nodes_.size()) {
      throw UsageError("stale variable: tape was reset after it was recorded");
    }
  }

 private:
  std::vector<TapeNode> nodes_;
  std::vector<Edge> edges_;
  std::uint32_t generation_ = 0;
  bool backward_done_ = false;
};

inline double Var::value() const {
  if (tape_ == nullptr) throw UsageError("uninitialised variable");
  return tape_->value(*this);
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw UsageError("operands live on different tapes");
  }
  return *a.tape();
}

inline Tape& tape_of(Var a) {
  if (a.tape() == nullptr) throw UsageError("uninitialised variable");
  return *a.tape();
}

inline Tape& tape_of(std::span<const Var> xs) {
  if (xs.empty()) throw UsageError("empty operand list");
  Tape& t = tape_of(xs.front());
  for (const Var& x : xs) {
    if (x.tape() != &t) throw UsageError("operands live on different tapes");
  }
  return t;
}

}  // namespace detail

inline double value_of(double x) { return x; }
inline double value_of(Var x) { return x.value(); }

// Arithmetic ---------------------------------------------------------------

inline Var operator+(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.push_node(OpTag::add, a.value() + b.value(),
                     {{a.id(), 1.0}, {b.id(), 1.0}});
}
inline Var operator+(Var a, double b) {
  Tape& t = detail::tape_of(a);
  return t.push_node(OpTag::add, a.value() + b, {{a.id(), 1.0}});
}
inline Var operator+(double a, Var b) { return b + a; }

inline Var operator-(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  return t.push_node(OpTag::sub, a.value() - b.value(),
                     {{a.id(), 1.0}, {b.id(), -1.0}});
}
inline Var operator-(Var a, double b) {
  Tape& t = detail::tape_of(a);
  return t.push_node(OpTag::sub, a.value() - b, {{a.id(), 1.0}});
}
inline Var operator-(double a, Var b) {
  Tape& t = detail::tape_of(b);
  return t.push_node(OpTag::sub, a - b.value(), {{b.id(), -1.0}});
}
inline Var operator-(Var a) {
  Tape& t = detail::tape_of(a);
  return t.push_node(OpTag::neg, -a.value(), {{a.id(), -1.0}});
}

inline Var operator*(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const double av = a.value();
  const double bv = b.value();
  return t.push_node(OpTag::mul, av * bv, {{a.id(), bv}, {b.id(), av}});
}
inline Var operator*(Var a, double b) {
  Tape& t = detail::tape_of(a);
  return t.push_node(OpTag::mul, a.value() * b, {{a.id(), b}});
}
inline Var operator*(double a, Var b) { return b * a; }

inline Var operator/(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const double av = a.value();
  const double bv = b.value();
  if (bv == 0.0) throw DomainError("division by zero on tape");
  return t.push_node(OpTag::div, av / bv,
                     {{a.id(), 1.0 / bv}, {b.id(), -av / (bv * bv)}});
}
inline Var operator/(Var a, double b) {
  if (b == 0.0) throw DomainError("division by zero on tape");
  return a * (1.0 / b);
}
inline Var operator/(double a, Var b) {
  Tape& t = detail::tape_of(b);
  const double bv = b.value();
  if (bv == 0.0) throw DomainError("division by zero on tape");
  return t.push_node(OpTag::div, a / bv, {{b.id(), -a / (bv * bv)}});
}

inline Var& operator+=(Var& a, Var b) { return a = a + b; }
inline Var& operator+=(Var& a, double b) { return a = a + b; }
inline Var& operator-=(Var& a, Var b) { return a = a - b; }
inline Var& operator*=(Var& a, double b) { return a = a * b; }

// Elementary functions ------------------------------------------------------

inline Var exp(Var a) {
  Tape& t = detail::tape_of(a);
  const double v = std::exp(a.value());
  return t.push_node(OpTag::exp, v, {{a.id(), v}});
}

inline Var log(Var a) {
  Tape& t = detail::tape_of(a);
  const double av = a.value();
  if (!(av > 0.0)) {
    throw DomainError("log of non-positive value " + std::to_string(av));
  }
  return t.push_node(OpTag::log, std::log(av), {{a.id(), 1.0 / av}});
}

inline Var tanh(Var a) {
  Tape& t = detail::tape_of(a);
  const double v = std::tanh(a.value());
  return t.push_node(OpTag::tanh, v, {{a.id(), 1.0 - v * v}});
}

inline Var sigmoid(Var a) {
  Tape& t = detail::tape_of(a);
  const double v = tweedie_avb::sigmoid(a.value());
  return t.push_node(OpTag::sigmoid, v, {{a.id(), v * (1.0 - v)}});
}

inline Var softplus(Var a) {
  Tape& t = detail::tape_of(a);
  const double av = a.value();
  return t.push_node(OpTag::softplus, tweedie_avb::softplus(av),
                     {{a.id(), tweedie_avb::sigmoid(av)}});
}

/// a^c for a constant exponent c. Non-integer c needs a > 0.
inline Var pow(Var a, double c) {
  Tape& t = detail::tape_of(a);
  const double av = a.value();
  const bool integral = std::floor(c) == c;
  if (av < 0.0 && !integral) {
    throw DomainError("pow of negative base with non-integer exponent");
  }
  if (av == 0.0 && c < 1.0) {
    throw DomainError("pow at zero with exponent below one is not differentiable");
  }
  const double v = std::pow(av, c);
  return t.push_node(OpTag::pow_const, v, {{a.id(), c * std::pow(av, c - 1.0)}});
}

inline Var log_gamma(Var a) {
  Tape& t = detail::tape_of(a);
  const double av = a.value();
  if (!(av > 0.0)) {
    throw DomainError("log_gamma of non-positive value " + std::to_string(av));
  }
  return t.push_node(OpTag::log_gamma, tweedie_avb::log_gamma(av),
                     {{a.id(), tweedie_avb::digamma(av)}});
}

inline Var log_sum_exp(std::span<const Var> xs) {
  Tape& t = detail::tape_of(xs);
  double m = -std::numeric_limits<double>::infinity();
  for (const Var& x : xs) m = std::max(m, x.value());
  std::vector<Edge> edges(xs.size());
  if (std::isinf(m) && m < 0.0) {
    for (std::size_t i = 0; i < xs.size(); ++i) edges[i] = {xs[i].id(), 0.0};
    return t.push_node(OpTag::log_sum_exp, m, edges);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double e = std::exp(xs[i].value() - m);
    edges[i] = {xs[i].id(), e};
    s += e;
  }
  for (Edge& e : edges) e.partial /= s;
  return t.push_node(OpTag::log_sum_exp, m + std::log(s), edges);
}

inline Var sum(std::span<const Var> xs) {
  Tape& t = detail::tape_of(xs);
  std::vector<Edge> edges(xs.size());
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s += xs[i].value();
    edges[i] = {xs[i].id(), 1.0};
  }
  return t.push_node(OpTag::sum, s, edges);
}

/// bias + sum_i weights[i] * inputs[i] as one node.
inline Var affine(std::span<const Var> weights, std::span<const Var> inputs,
                  Var bias) {
  if (weights.size() != inputs.size()) {
    throw ShapeError("affine: weights and inputs differ in length");
  }
  Tape& t = detail::tape_of(bias);
  std::vector<Edge> edges;
  edges.reserve(2 * weights.size() + 1);
  double v = bias.value();
  edges.push_back({bias.id(), 1.0});
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double w = weights[i].value();
    const double x = inputs[i].value();
    v += w * x;
    if (t.op(weights[i]) != OpTag::constant) edges.push_back({weights[i].id(), x});
    if (t.op(inputs[i]) != OpTag::constant) edges.push_back({inputs[i].id(), w});
  }
  return t.push_node(OpTag::affine, v, edges);
}

/// Same as above for constant inputs (e.g. a design-matrix row).
inline Var affine(std::span<const Var> weights, std::span<const double> inputs,
                  Var bias) {
  if (weights.size() != inputs.size()) {
    throw ShapeError("affine: weights and inputs differ in length");
  }
  Tape& t = detail::tape_of(bias);
  std::vector<Edge> edges;
  edges.reserve(weights.size() + 1);
  double v = bias.value();
  edges.push_back({bias.id(), 1.0});
  for (std::size_t i = 0; i < weights.size(); ++i) {
    v += weights[i].value() * inputs[i];
    edges.push_back({weights[i].id(), inputs[i]});
  }
  return t.push_node(OpTag::affine, v, edges);
}

/// Same value, no gradient path.
inline Var detach(Var a) { return detail::tape_of(a).constant(a.value()); }

// Parameters ----------------------------------------------------------------

/// Flat storage for named trainable parameter blocks.
class ParamStore {
 public:
  struct Slot {
    std::size_t offset = 0;
    std::size_t length = 0;
  };

  std::span<double> add(const std::string& name, std::size_t length,
                        double init = 0.0) {
    if (slots_.contains(name)) {
      throw UsageError("parameter block '" + name + "' registered twice");
    }
    slots_[name] = Slot{values_.size(), length};
    order_.push_back(name);
    values_.resize(values_.size() + length, init);
    return block(name);
  }

  const Slot& slot(const std::string& name) const {
    auto it = slots_.find(name);
    if (it == slots_.end()) {
      throw UsageError("unknown parameter block '" + name + "'");
    }
    return it->second;
  }

  std::span<double> block(const std::string& name) {
    const Slot& s = slot(name);
    return {values_.data() + s.offset, s.length};
  }
  std::span<const double> block(const std::string& name) const {
    const Slot& s = slot(name);
    return {values_.data() + s.offset, s.length};
  }

  bool contains(const std::string& name) const { return slots_.contains(name); }

  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }

  /// Block names in registration order.
  const std::vector<std::string>& names() const noexcept { return order_; }

  /// Human-readable name of a flat coordinate, e.g. "hidden.weight[3]".
  std::string coordinate_name(std::size_t index) const {
    for (const auto& name : order_) {
      const Slot& s = slots_.at(name);
      if (index >= s.offset && index < s.offset + s.length) {
        return name + "[" + std::to_string(index - s.offset) + "]";
      }
    }
    return "#" + std::to_string(index);
  }

 private:
  std::vector<double> values_;
  std::map<std::string, Slot> slots_;
  std::vector<std::string> order_;
};

/// Leaf variables for every coordinate of `store`, same flat order.
inline std::vector<Var> bind(Tape& tape, const ParamStore& store) {
  std::vector<Var> vars;
  vars.reserve(store.size());
  for (double v : store.values()) vars.push_back(tape.variable(v));
  return vars;
}

inline std::vector<Var> bind_constants(Tape& tape, std::span<const double> xs) {
  std::vector<Var> vars;
  vars.reserve(xs.size());
  for (double v : xs) vars.push_back(tape.constant(v));
  return vars;
}

inline std::vector<double> gradients(const Tape& tape, std::span<const Var> vars) {
  std::vector<double> g;
  g.reserve(vars.size());
  for (const Var& v : vars) g.push_back(tape.gradient(v));
  return g;
}

/// Sub-view of a bound parameter vector matching a named block.
inline std::span<const Var> block_of(std::span<const Var> bound,
                                     const ParamStore& store,
                                     const std::string& name) {
  const auto& s = store.slot(name);
  if (bound.size() != store.size()) throw ShapeError("bound parameters do not match store");
  return bound.subspan(s.offset, s.length);
}

// Optimiser -----------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global-norm clipping threshold; <= 0 disables clipping.
  double clip_norm = 10.0;
};

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 10.0;

  AdamState() = default;
  AdamState(std::size_t n, const AdamConfig& cfg)
      : first_moment(n, 0.0),
        second_moment(n, 0.0),
        learning_rate(cfg.learning_rate),
        beta1(cfg.beta1),
        beta2(cfg.beta2),
        epsilon(cfg.epsilon),
        clip_norm(cfg.clip_norm) {}
};

/// Bias-corrected Adam update with optional global-norm clipping.
/// Throws NonFiniteGradient and leaves params/state untouched if any
/// gradient component is NaN or infinite.
inline void adam_step(ParamStore& params, std::span<const double> grad,
                      AdamState& state) {
  const std::size_t n = params.size();
  if (grad.size() != n || state.first_moment.size() != n ||
      state.second_moment.size() != n) {
    throw ShapeError("adam_step: gradient/state length does not match parameters");
  }
  double norm2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(grad[i])) {
      throw NonFiniteGradient(params.coordinate_name(i), grad[i]);
    }
    norm2 += grad[i] * grad[i];
  }
  double scale = 1.0;
  const double norm = std::sqrt(norm2);
  if (state.clip_norm > 0.0 && norm > state.clip_norm) {
    scale = state.clip_norm / norm;
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  auto& x = params.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i] * scale;
    state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
    state.second_moment[i] =
        state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.first_moment[i] / c1;
    const double v_hat = state.second_moment[i] / c2;
    x[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
}

// Gradient checking ---------------------------------------------------------

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
  /// Coordinates where f was not finite at x +/- h.
  std::vector<std::size_t> non_finite;
};

/// Compares tape gradients of `f` with central differences.
///
/// `f(tape, x)` must build a scalar on `tape` from the leaf variables `x`.
/// Error per coordinate is |g_analytic - g_fd| / max(1, |g_fd|).
template <class F>
FiniteDiffReport finite_diff_check(F&& f, std::span<const double> point, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ConfigError("finite_diff_check: step must lie in [1e-7, 1e-3]");
  }
  FiniteDiffReport report;
  {
    Tape tape;
    std::vector<Var> x;
    x.reserve(point.size());
    for (double v : point) x.push_back(tape.variable(v));
    Var out = f(tape, std::span<const Var>(x));
    tape.backward(out);
    report.analytic = gradients(tape, x);
  }
  std::vector<double> probe(point.begin(), point.end());
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> x;
    x.reserve(probe.size());
    for (double v : probe) x.push_back(tape.variable(v));
    return f(tape, std::span<const Var>(x)).value();
  };
  report.numeric.resize(point.size(), 0.0);
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + h;
    const double up = eval();
    probe[i] = point[i] - h;
    const double down = eval();
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      report.non_finite.push_back(i);
      continue;
    }
    const double fd = (up - down) / (2.0 * h);
    report.numeric[i] = fd;
    const double err =
        std::abs(report.analytic[i] - fd) / std::max(1.0, std::abs(fd));
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

template <class F>
FiniteDiffReport finite_diff_check(F&& f, const ParamStore& params, double h) {
  return finite_diff_check(std::forward<F>(f),
                           std::span<const double>(params.values()), h);
}

}  // namespace tweedie_avb::ad
