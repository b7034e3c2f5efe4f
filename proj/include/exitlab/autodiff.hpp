#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records one forward computation as a list of nodes. Each op computes
// its value eagerly and stores a closure that maps the node's output gradient
// to gradients of its inputs. Calling backward() on a 1x1 node runs the
// closures in reverse recording order. Ops are coarse (fused attention, fused
// norm, fused losses) so a full transformer forward is a few hundred nodes.

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "exitlab/params.hpp"

namespace exitlab::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

  Var constant(Matrix value);
  // Leaf backed by `value` without copying; `value` must outlive the tape.
  Var parameter(int index, const Matrix& value, bool requires_grad);

  Var record(Matrix value, std::span<const Var> inputs, Backward back);
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward back) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(back));
  }

  const Matrix& value(Var v) const;
  // Empty matrix when no gradient reached the node.
  const Matrix& grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  template <class Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every node that requires grad.
  void backward(Var loss);

  // grads[i] += scale * d(loss)/d(param i) for every parameter leaf that received a gradient.
  void accumulate_param_grads(ParamGrads& grads, double scale = 1.0) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool requires_grad = false;
    int param_index = -1;
    Backward back;
  };
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

  std::deque<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
// a + row, with `row` (1 x cols) broadcast over every row of a.
Var add_row(Var a, Var row);
Var scale(Var a, double s);
// Row i multiplied by mask[i].
Var mask_rows(Var a, std::vector<double> mask);
// Per-row RMS normalization with learned gain (1 x cols).
Var rms_norm(Var x, Var gain, double eps = 1e-5);
Var gelu(Var x);
// Multi-head causal self-attention over already-projected q, k, v (T x d each).
Var causal_attention(Var q, Var k, Var v, int n_heads);
// Rows table[ids[i]].
Var gather_rows(Var table, std::vector<int> ids);
// The first `count` rows of table.
Var leading_rows(Var table, int count);
// Row i taken from sources[which[i]].
Var select_rows(std::vector<Var> sources, std::vector<int> which);
// Column-wise concatenation.
Var hcat(std::vector<Var> parts);

// Sum_i w_i * log softmax(logits_i / temperature)[targets_i]; 1x1.
Var token_logprob(Var logits, std::vector<int> targets, std::vector<double> weights, double temperature = 1.0);

// Sum_i w_i * KL(softmax(logits_i) || ref_i) where ref_log_probs holds log ref; 1x1.
Var kl_to_reference(Var logits, const Matrix& ref_log_probs, std::vector<double> weights);

// Sum_i w_i * log p_i(exit_i) under the stick-breaking exit distribution built
// from per-head logits (T x K) shifted by `offset`. exit_i ranges over 0..K where
// K is the catch-all (no head fired).
Var exit_logprob(Var head_logits, std::vector<int> exits, double offset, std::vector<double> weights);

}  // namespace exitlab::ad
