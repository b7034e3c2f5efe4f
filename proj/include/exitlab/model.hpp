#pragma once

#include <optional>
#include <random>
#include <span>
#include <vector>

#include "exitlab/autodiff.hpp"
#include "exitlab/params.hpp"

namespace exitlab {

using Rng = std::mt19937_64;

// Full-depth view of one sequence: residuals after every block, exit-head
// logits, and logit-lens next-token distributions at each exitable layer.
struct LayerTrace {
  std::vector<int> exit_layers;      // exitable layers, ascending (1-based)
  int n_layers = 0;
  std::vector<Matrix> residuals;     // n_layers + 1 entries: h_0 (embeddings) .. h_L, each T x d
  Matrix exit_logits;                // T x K, raw head logits (no offset)
  std::vector<Matrix> lens_probs;    // K + 1 entries: exitable layers then the final layer, each T x V

  int length() const { return static_cast<int>(exit_logits.rows()); }
  const Matrix& final_probs() const { return lens_probs.back(); }
};

// One token's exit event. exit_layer == n_layers means no head fired.
struct ExitDecision {
  int position = 0;
  int exit_layer = 0;
  std::vector<double> head_probs;   // sigma(logit + offset) of each visited head, ascending
  double exit_logprob = 0.0;        // log p(exit_layer)
  int token = -1;
  double token_logprob = 0.0;       // log p(token | exit_layer), 0 until a token is chosen

  double joint_logprob() const { return exit_logprob + token_logprob; }
};

// Tape-level forward. `exits` holds one layer per position (empty = full depth):
// a position exiting at layer e receives no residual writes from blocks above e,
// while its keys and values at those blocks are still projected from the frozen
// residual. `trainable` (may be null) selects which parameters get gradients.
struct ForwardGraph {
  std::vector<ad::Var> residuals;    // h_0 .. h_L
  std::vector<ad::Var> head_logits;  // per exitable layer, T x 1
  ad::Var logits;                    // unembed(final_norm(h_L)), T x V
};

class GraphBuilder {
 public:
  GraphBuilder(ad::Tape& tape, const ModelParams& params, const std::vector<bool>* trainable = nullptr);

  ForwardGraph forward(std::span<const int> tokens, std::span<const int> exits = {});

  // unembed(final_norm(h)) for any residual on the tape.
  ad::Var lens_logits(ad::Var residual);
  ad::Var head_logit(int exit_index, ad::Var residual);
  ad::Var head_matrix(const ForwardGraph& g);  // T x K

  ad::Var param(int index);
  ad::Tape& tape() { return tape_; }
  const ModelParams& params() const { return params_; }

 private:
  ad::Var linear(ad::Var x, int block, Proj proj);

  ad::Tape& tape_;
  const ModelParams& params_;
  const std::vector<bool>* trainable_;
  std::vector<ad::Var> leaves_;
};

void check_tokens(const ModelConfig& config, std::span<const int> tokens);
void check_exits(const ModelConfig& config, std::span<const int> exits, std::size_t length);

LayerTrace forward_full(const ModelParams& params, std::span<const int> tokens);

// Per-position next-token distributions (T x V) under forced exits.
Matrix forward_frozen(const ModelParams& params, std::span<const int> tokens, std::span<const int> forced_exits);

double sigmoid(double x);
double log_sigmoid(double x);

// p(exit at k) = s_k * prod_{j<k}(1 - s_j); returns K + 1 entries, the last being the catch-all.
std::vector<double> stick_breaking(std::span<const double> survivals);

// Ascending Bernoulli walk over the exit heads of one position.
ExitDecision sample_exit(std::span<const double> head_logits, std::span<const int> exit_layers, int n_layers,
                         double offset, Rng& rng);
ExitDecision sample_exit(const LayerTrace& trace, int position, double offset, Rng& rng);

// Distribution of `logits / temperature`; temperature 0 means argmax.
struct TokenSample {
  int token = 0;
  double logprob = 0.0;
};
TokenSample sample_token(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double temperature, Rng& rng);

Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits);

}  // namespace exitlab
