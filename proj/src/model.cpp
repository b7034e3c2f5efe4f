#include "exitlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "exitlab/error.hpp"

namespace exitlab {

GraphBuilder::GraphBuilder(ad::Tape& tape, const ModelParams& params, const std::vector<bool>* trainable)
    : tape_(tape), params_(params), trainable_(trainable), leaves_(params.size()) {}

ad::Var GraphBuilder::param(int index) {
  auto& leaf = leaves_[static_cast<std::size_t>(index)];
  if (leaf.id < 0) {
    const bool grad = trainable_ != nullptr && (*trainable_)[static_cast<std::size_t>(index)];
    leaf = tape_.parameter(index, params_[index], grad);
  }
  return leaf;
}

ad::Var GraphBuilder::linear(ad::Var x, int block, Proj proj) {
  const auto q = static_cast<std::size_t>(proj);
  const auto& b = params_.blocks[static_cast<std::size_t>(block)];
  ad::Var y = ad::matmul(x, param(b.proj[q]));
  const auto& a = params_.adapters[static_cast<std::size_t>(block)][q];
  if (a.present()) y = ad::add(y, ad::matmul(ad::matmul(x, param(a.a)), param(a.b)));
  return y;
}

ad::Var GraphBuilder::lens_logits(ad::Var residual) {
  return ad::matmul(ad::rms_norm(residual, param(params_.final_norm)), param(params_.unembed));
}

ad::Var GraphBuilder::head_logit(int exit_index, ad::Var residual) {
  const auto k = static_cast<std::size_t>(exit_index);
  ad::Var normed = ad::rms_norm(residual, param(params_.final_norm));
  return ad::add_row(ad::matmul(normed, param(params_.exit_w[k])), param(params_.exit_b[k]));
}

ad::Var GraphBuilder::head_matrix(const ForwardGraph& g) { return ad::hcat(g.head_logits); }

ForwardGraph GraphBuilder::forward(std::span<const int> tokens, std::span<const int> exits) {
  const auto& c = params_.config;
  check_tokens(c, tokens);
  if (!exits.empty()) check_exits(c, exits, tokens.size());
  const int T = static_cast<int>(tokens.size());

  ForwardGraph g;
  ad::Var h = ad::add(ad::gather_rows(param(params_.tok_emb), std::vector<int>(tokens.begin(), tokens.end())),
                      ad::leading_rows(param(params_.pos_emb), T));
  g.residuals.push_back(h);

  const auto exit_layers = c.exitable_layers();
  std::size_t next_head = 0;
  for (int l = 1; l <= c.n_layers; ++l) {
    const auto& b = params_.blocks[static_cast<std::size_t>(l - 1)];
    std::optional<std::vector<double>> mask;
    if (!exits.empty() && std::any_of(exits.begin(), exits.end(), [l](int e) { return e < l; })) {
      mask.emplace(static_cast<std::size_t>(T));
      for (int i = 0; i < T; ++i) (*mask)[static_cast<std::size_t>(i)] = exits[static_cast<std::size_t>(i)] >= l;
    }

    // Frozen rows still feed their keys and values from the unchanged residual.
    ad::Var x = ad::rms_norm(h, param(b.attn_norm));
    ad::Var att = ad::causal_attention(linear(x, l - 1, Proj::Q), linear(x, l - 1, Proj::K),
                                       linear(x, l - 1, Proj::V), c.n_heads);
    ad::Var upd = linear(att, l - 1, Proj::O);
    h = ad::add(h, mask ? ad::mask_rows(upd, *mask) : upd);

    ad::Var m = ad::rms_norm(h, param(b.mlp_norm));
    ad::Var mlp = linear(ad::gelu(linear(m, l - 1, Proj::Up)), l - 1, Proj::Down);
    h = ad::add(h, mask ? ad::mask_rows(mlp, *mask) : mlp);
    g.residuals.push_back(h);

    if (next_head < exit_layers.size() && exit_layers[next_head] == l) {
      g.head_logits.push_back(head_logit(static_cast<int>(next_head), h));
      ++next_head;
    }
  }
  g.logits = lens_logits(h);
  return g;
}

void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw LengthError("empty token sequence");
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw LengthError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(config.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= config.vocab_size) throw ArgumentError("token id out of range: " + std::to_string(t));
}

void check_exits(const ModelConfig& config, std::span<const int> exits, std::size_t length) {
  if (exits.size() != length) throw ArgumentError("need one exit layer per position");
  const auto layers = config.exitable_layers();
  for (int e : exits) {
    if (e == config.n_layers) continue;
    if (std::find(layers.begin(), layers.end(), e) == layers.end())
      throw ArgumentError("layer " + std::to_string(e) + " is not exitable");
  }
}

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) p.row(i) = softmax(logits.row(i));
  return p;
}

}  // namespace

LayerTrace forward_full(const ModelParams& params, std::span<const int> tokens) {
  ad::Tape tape;
  GraphBuilder gb(tape, params);
  ForwardGraph g = gb.forward(tokens);

  LayerTrace trace;
  trace.exit_layers = params.config.exitable_layers();
  trace.n_layers = params.config.n_layers;
  for (ad::Var r : g.residuals) trace.residuals.push_back(r.value());
  const auto T = static_cast<Eigen::Index>(tokens.size());
  trace.exit_logits.resize(T, static_cast<Eigen::Index>(trace.exit_layers.size()));
  for (std::size_t k = 0; k < trace.exit_layers.size(); ++k) {
    trace.exit_logits.col(static_cast<Eigen::Index>(k)) = g.head_logits[k].value().col(0);
    ad::Var lens = gb.lens_logits(g.residuals[static_cast<std::size_t>(trace.exit_layers[k])]);
    trace.lens_probs.push_back(softmax_rows(lens.value()));
  }
  trace.lens_probs.push_back(softmax_rows(g.logits.value()));
  return trace;
}

Matrix forward_frozen(const ModelParams& params, std::span<const int> tokens, std::span<const int> forced_exits) {
  check_exits(params.config, forced_exits, tokens.size());
  ad::Tape tape;
  GraphBuilder gb(tape, params);
  return softmax_rows(gb.forward(tokens, forced_exits).logits.value());
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x)); }

std::vector<double> stick_breaking(std::span<const double> survivals) {
  std::vector<double> p;
  p.reserve(survivals.size() + 1);
  double remaining = 1.0;
  for (double s : survivals) {
    p.push_back(remaining * s);
    remaining *= 1.0 - s;
  }
  p.push_back(remaining);
  return p;
}

ExitDecision sample_exit(std::span<const double> head_logits, std::span<const int> exit_layers, int n_layers,
                         double offset, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  ExitDecision d;
  d.exit_layer = n_layers;
  for (std::size_t k = 0; k < exit_layers.size(); ++k) {
    const double z = head_logits[k] + offset;
    const double p = sigmoid(z);
    d.head_probs.push_back(p);
    if (uniform(rng) < p) {
      d.exit_layer = exit_layers[k];
      d.exit_logprob += log_sigmoid(z);
      break;
    }
    d.exit_logprob += log_sigmoid(-z);
  }
  return d;
}

ExitDecision sample_exit(const LayerTrace& trace, int position, double offset, Rng& rng) {
  const Eigen::RowVectorXd row = trace.exit_logits.row(position);
  ExitDecision d = sample_exit(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())),
                               trace.exit_layers, trace.n_layers, offset, rng);
  d.position = position;
  return d;
}

Eigen::RowVectorXd softmax(const Eigen::Ref<const Eigen::RowVectorXd>& logits) {
  const double mx = logits.maxCoeff();
  Eigen::RowVectorXd e = (logits.array() - mx).exp();
  return e / e.sum();
}

TokenSample sample_token(const Eigen::Ref<const Eigen::RowVectorXd>& logits, double temperature, Rng& rng) {
  TokenSample s;
  if (temperature <= 0.0) {
    logits.maxCoeff(&s.token);
    const double mx = logits.maxCoeff();
    s.logprob = logits(s.token) - mx - std::log((logits.array() - mx).exp().sum());
    return s;
  }
  const Eigen::RowVectorXd scaled = logits / temperature;
  const Eigen::RowVectorXd p = softmax(scaled);
  const double mx = scaled.maxCoeff();
  const double lse = mx + std::log((scaled.array() - mx).exp().sum());
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  double u = uniform(rng);
  s.token = static_cast<int>(p.size()) - 1;
  for (Eigen::Index v = 0; v < p.size(); ++v) {
    u -= p(v);
    if (u < 0) {
      s.token = static_cast<int>(v);
      break;
    }
  }
  s.logprob = scaled(s.token) - lse;
  return s;
}

}  // namespace exitlab
