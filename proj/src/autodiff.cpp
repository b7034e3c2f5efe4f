#include "exitlab/autodiff.hpp"

#include <cassert>
#include <cmath>

#include "exitlab/error.hpp"

namespace exitlab::ad {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-wise log-softmax of m.
Matrix log_softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    const double lse = mx + std::log((m.row(i).array() - mx).exp().sum());
    out.row(i) = m.row(i).array() - lse;
  }
  return out;
}

}  // namespace

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(int index, const Matrix& value, bool requires_grad) {
  Node n;
  n.ref = &value;
  n.requires_grad = requires_grad;
  n.param_index = index;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::span<const Var> inputs, Backward back) {
  Node n;
  n.owned = std::move(value);
  for (Var in : inputs) n.requires_grad = n.requires_grad || node(in).requires_grad;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref != nullptr ? *n.ref : n.owned;
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1) throw ArgumentError("backward() needs a scalar loss");
  Node& root = node(loss);
  if (!root.requires_grad) return;
  root.grad = Matrix::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.back || n.grad.size() == 0) continue;
    n.back(*this, n.grad);
  }
}

void Tape::accumulate_param_grads(ParamGrads& grads, double scale) const {
  for (const Node& n : nodes_) {
    if (n.param_index < 0 || n.grad.size() == 0) continue;
    grads[static_cast<std::size_t>(n.param_index)] += scale * n.grad;
  }
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  assert(a.value().rows() == b.value().rows() && a.value().cols() == b.value().cols());
  Matrix out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = *a.tape;
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = s * a.value();
  return t.record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var mask_rows(Var a, std::vector<double> mask) {
  Tape& t = *a.tape;
  const Eigen::Map<const Vector> m(mask.data(), static_cast<Eigen::Index>(mask.size()));
  Matrix out = m.asDiagonal() * a.value();
  return t.record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& t, const Matrix& g) {
    const Eigen::Map<const Vector> m(mask.data(), static_cast<Eigen::Index>(mask.size()));
    t.accumulate(a, m.asDiagonal() * g);
  });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const auto n = static_cast<double>(xv.cols());
  Vector inv(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) inv(i) = 1.0 / std::sqrt(xv.row(i).squaredNorm() / n + eps);
  Matrix normed = inv.asDiagonal() * xv;
  Matrix out = normed.array().rowwise() * gain.value().row(0).array();
  return t.record(std::move(out), {x, gain},
                  [x, gain, inv, normed = std::move(normed), n](Tape& t, const Matrix& g) {
                    if (t.requires_grad(gain))
                      t.accumulate(gain, (g.array() * normed.array()).colwise().sum().matrix());
                    if (!t.requires_grad(x)) return;
                    const Matrix& xv = t.value(x);
                    Matrix u = g.array().rowwise() * t.value(gain).row(0).array();
                    Matrix dx(xv.rows(), xv.cols());
                    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
                      const double r = inv(i);
                      const double ux = u.row(i).dot(xv.row(i));
                      dx.row(i) = r * u.row(i) - (r * r * r / n) * ux * xv.row(i);
                    }
                    t.accumulate(x, dx);
                  });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

Var gelu(Var x) {
  Tape& t = *x.tape;
  constexpr double c = kGeluC;
  constexpr double k = kGeluK;
  const Matrix& xv = x.value();
  Matrix th = (c * (xv.array() + k * xv.array().cube())).tanh().matrix();
  Matrix out = (0.5 * xv.array() * (1.0 + th.array())).matrix();
  return t.record(std::move(out), {x}, [x, th = std::move(th)](Tape& t, const Matrix& g) {
    const auto xa = t.value(x).array();
    auto d = 0.5 * (1.0 + th.array()) +
             0.5 * xa * (1.0 - th.array().square()) * kGeluC * (1.0 + 3.0 * kGeluK * xa.square());
    t.accumulate(x, (g.array() * d).matrix());
  });
}

Var causal_attention(Var q, Var k, Var v, int n_heads) {
  Tape& t = *q.tape;
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Eigen::Index T = qv.rows();
  const Eigen::Index d = qv.cols();
  const Eigen::Index hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Matrix> probs(static_cast<std::size_t>(n_heads));
  Matrix out(T, d);
  for (int h = 0; h < n_heads; ++h) {
    Matrix s = inv_sqrt * qv.middleCols(h * hd, hd) * kv.middleCols(h * hd, hd).transpose();
    Matrix& p = probs[static_cast<std::size_t>(h)];
    p = Matrix::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i) {
      const double mx = s.row(i).head(i + 1).maxCoeff();
      auto e = (s.row(i).head(i + 1).array() - mx).exp();
      p.row(i).head(i + 1) = e / e.sum();
    }
    out.middleCols(h * hd, hd).noalias() = p * vv.middleCols(h * hd, hd);
  }
  return t.record(std::move(out), {q, k, v},
                  [q, k, v, n_heads, hd, inv_sqrt, probs = std::move(probs)](Tape& t, const Matrix& g) {
                    const Matrix& qv = t.value(q);
                    const Matrix& kv = t.value(k);
                    const Matrix& vv = t.value(v);
                    Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
                    Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
                    Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
                    for (int h = 0; h < n_heads; ++h) {
                      const Matrix& p = probs[static_cast<std::size_t>(h)];
                      const auto go = g.middleCols(h * hd, hd);
                      Matrix dp = go * vv.middleCols(h * hd, hd).transpose();
                      dv.middleCols(h * hd, hd).noalias() = p.transpose() * go;
                      Vector rowdot = (dp.array() * p.array()).rowwise().sum();
                      Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix();
                      dq.middleCols(h * hd, hd).noalias() = inv_sqrt * ds * kv.middleCols(h * hd, hd);
                      dk.middleCols(h * hd, hd).noalias() = inv_sqrt * ds.transpose() * qv.middleCols(h * hd, hd);
                    }
                    t.accumulate(q, dq);
                    t.accumulate(k, dk);
                    t.accumulate(v, dv);
                  });
}

Var gather_rows(Var table, std::vector<int> ids) {
  Tape& t = *table.tape;
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  return t.record(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, const Matrix& g) {
    const Matrix& tv = t.value(table);
    Matrix d = Matrix::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) d.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, d);
  });
}

Var leading_rows(Var table, int count) {
  Tape& t = *table.tape;
  Matrix out = table.value().topRows(count);
  return t.record(std::move(out), {table}, [table, count](Tape& t, const Matrix& g) {
    const Matrix& tv = t.value(table);
    Matrix d = Matrix::Zero(tv.rows(), tv.cols());
    d.topRows(count) = g;
    t.accumulate(table, d);
  });
}

Var select_rows(std::vector<Var> sources, std::vector<int> which) {
  Tape& t = *sources.front().tape;
  const Matrix& first = sources.front().value();
  Matrix out(first.rows(), first.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    out.row(i) = sources[static_cast<std::size_t>(which[static_cast<std::size_t>(i)])].value().row(i);
  std::vector<Var> inputs = sources;
  return t.record(std::move(out), inputs,
                  [sources = std::move(sources), which = std::move(which)](Tape& t, const Matrix& g) {
                    for (std::size_t s = 0; s < sources.size(); ++s) {
                      if (!t.requires_grad(sources[s])) continue;
                      Matrix d = Matrix::Zero(g.rows(), g.cols());
                      bool any = false;
                      for (Eigen::Index i = 0; i < g.rows(); ++i) {
                        if (which[static_cast<std::size_t>(i)] != static_cast<int>(s)) continue;
                        d.row(i) = g.row(i);
                        any = true;
                      }
                      if (any) t.accumulate(sources[s], d);
                    }
                  });
}

Var hcat(std::vector<Var> parts) {
  Tape& t = *parts.front().tape;
  Eigen::Index cols = 0;
  for (Var p : parts) cols += p.value().cols();
  Matrix out(parts.front().value().rows(), cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.value().cols()) = p.value();
    c += p.value().cols();
  }
  std::vector<Var> inputs = parts;
  return t.record(std::move(out), inputs, [parts = std::move(parts)](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Eigen::Index w = t.value(p).cols();
      if (t.requires_grad(p)) t.accumulate(p, g.middleCols(c, w));
      c += w;
    }
  });
}

Var token_logprob(Var logits, std::vector<int> targets, std::vector<double> weights, double temperature) {
  Tape& t = *logits.tape;
  Matrix lp = log_softmax_rows(logits.value() / temperature);
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    total += weights[i] * lp(static_cast<Eigen::Index>(i), targets[i]);
  return t.record(Matrix::Constant(1, 1, total), {logits},
                  [logits, lp = std::move(lp), targets = std::move(targets), weights = std::move(weights),
                   temperature](Tape& t, const Matrix& g) {
                    Matrix d = -lp.array().exp().matrix();
                    for (std::size_t i = 0; i < targets.size(); ++i) {
                      const auto r = static_cast<Eigen::Index>(i);
                      d(r, targets[i]) += 1.0;
                      d.row(r) *= weights[i] * g(0, 0) / temperature;
                    }
                    t.accumulate(logits, d);
                  });
}

Var kl_to_reference(Var logits, const Matrix& ref_log_probs, std::vector<double> weights) {
  Tape& t = *logits.tape;
  Matrix lp = log_softmax_rows(logits.value());
  Vector per_row(lp.rows());
  for (Eigen::Index i = 0; i < lp.rows(); ++i)
    per_row(i) = (lp.row(i).array().exp() * (lp.row(i) - ref_log_probs.row(i)).array()).sum();
  double total = 0.0;
  for (Eigen::Index i = 0; i < lp.rows(); ++i) total += weights[static_cast<std::size_t>(i)] * per_row(i);
  return t.record(Matrix::Constant(1, 1, total), {logits},
                  [logits, lp = std::move(lp), ref = Matrix(ref_log_probs), per_row,
                   weights = std::move(weights)](Tape& t, const Matrix& g) {
                    Matrix d(lp.rows(), lp.cols());
                    for (Eigen::Index i = 0; i < lp.rows(); ++i) {
                      const double w = weights[static_cast<std::size_t>(i)] * g(0, 0);
                      d.row(i) = w * (lp.row(i).array().exp() *
                                      (lp.row(i) - ref.row(i)).array() - per_row(i) * lp.row(i).array().exp())
                                         .matrix();
                    }
                    t.accumulate(logits, d);
                  });
}

Var exit_logprob(Var head_logits, std::vector<int> exits, double offset, std::vector<double> weights) {
  Tape& t = *head_logits.tape;
  const Matrix& z = head_logits.value();
  const Eigen::Index K = z.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int e = exits[static_cast<std::size_t>(i)];
    double lp = 0.0;
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(e, K); ++k) lp -= softplus(z(i, k) + offset);
    if (e < K) lp -= softplus(-(z(i, e) + offset));
    total += weights[static_cast<std::size_t>(i)] * lp;
  }
  return t.record(Matrix::Constant(1, 1, total), {head_logits},
                  [head_logits, exits = std::move(exits), offset, weights = std::move(weights)](Tape& t,
                                                                                               const Matrix& g) {
                    const Matrix& z = t.value(head_logits);
                    const Eigen::Index K = z.cols();
                    Matrix d = Matrix::Zero(z.rows(), K);
                    for (Eigen::Index i = 0; i < z.rows(); ++i) {
                      const int e = exits[static_cast<std::size_t>(i)];
                      const double w = weights[static_cast<std::size_t>(i)] * g(0, 0);
                      for (Eigen::Index k = 0; k < std::min<Eigen::Index>(e, K); ++k)
                        d(i, k) = -w * sigmoid(z(i, k) + offset);
                      if (e < K) d(i, e) = w * (1.0 - sigmoid(z(i, e) + offset));
                    }
                    t.accumulate(head_logits, d);
                  });
}

}  // namespace exitlab::ad
