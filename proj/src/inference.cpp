#include "exitlab/inference.hpp"

#include <algorithm>
#include <cmath>

#include "exitlab/error.hpp"

namespace exitlab {

namespace {

using Row = Eigen::RowVectorXd;

Row rms_norm(const Row& x, const Matrix& gain) {
  const double inv = 1.0 / std::sqrt(x.squaredNorm() / static_cast<double>(x.size()) + 1e-5);
  return ((x * inv).array() * gain.row(0).array()).matrix();
}

Row gelu(const Row& x) {
  constexpr double c = 0.7978845608028654;
  return (0.5 * x.array() * (1.0 + (c * (x.array() + 0.044715 * x.array().cube())).tanh())).matrix();
}

}  // namespace

InferenceModel::InferenceModel(const ModelParams& params)
    : weights_(params.config.lora_rank > 0 ? apply_adapters(params, true) : params) {}

DecodeSession::DecodeSession(const InferenceModel& model)
    : model_(model), exit_layers_(model.config().exitable_layers()) {
  const auto& c = model.config();
  keys_.assign(static_cast<std::size_t>(c.n_layers), Matrix(c.max_seq_len, c.d_model));
  values_.assign(static_cast<std::size_t>(c.n_layers), Matrix(c.max_seq_len, c.d_model));
}

Eigen::RowVectorXd DecodeSession::step(int token, const ExitPolicy& policy, ExitDecision* decision) {
  const auto& w = model_.weights();
  const auto& c = w.config;
  if (pos_ >= c.max_seq_len) throw LengthError("decode position exceeds max_seq_len");
  if (token < 0 || token >= c.vocab_size) throw ArgumentError("token id out of range");
  if (policy.mode == ExitPolicy::Mode::Sampled && policy.rng == nullptr)
    throw ArgumentError("sampled exit policy needs an rng");
  if (policy.mode == ExitPolicy::Mode::Forced) {
    const int f = policy.forced_layer;
    if (f != c.n_layers && std::find(exit_layers_.begin(), exit_layers_.end(), f) == exit_layers_.end())
      throw ArgumentError("layer " + std::to_string(f) + " is not exitable");
  }

  ExitDecision d;
  d.position = pos_;
  d.exit_layer = c.n_layers;

  const int hd = c.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Row x = w[w.tok_emb].row(token) + w[w.pos_emb].row(pos_);
  bool exited = false;
  std::size_t next_head = 0;
  for (int l = 1; l <= c.n_layers; ++l) {
    const auto li = static_cast<std::size_t>(l - 1);
    const auto& b = w.blocks[li];
    const Row a = rms_norm(x, w[b.attn_norm]);
    keys_[li].row(pos_).noalias() = a * w[b.proj[static_cast<int>(Proj::K)]];
    values_[li].row(pos_).noalias() = a * w[b.proj[static_cast<int>(Proj::V)]];
    if (exited) continue;

    const Row q = a * w[b.proj[static_cast<int>(Proj::Q)]];
    Row att(c.d_model);
    for (int h = 0; h < c.n_heads; ++h) {
      const auto K = keys_[li].block(0, h * hd, pos_ + 1, hd);
      const auto V = values_[li].block(0, h * hd, pos_ + 1, hd);
      Row s = inv_sqrt * (K * q.segment(h * hd, hd).transpose()).transpose();
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      att.segment(h * hd, hd).noalias() = s * V;
    }
    x.noalias() += att * w[b.proj[static_cast<int>(Proj::O)]];
    const Row m = rms_norm(x, w[b.mlp_norm]);
    x.noalias() += gelu(m * w[b.proj[static_cast<int>(Proj::Up)]]) * w[b.proj[static_cast<int>(Proj::Down)]];

    if (next_head >= exit_layers_.size() || exit_layers_[next_head] != l) continue;
    const std::size_t k = next_head++;
    if (policy.mode == ExitPolicy::Mode::FullDepth) continue;
    const double z = (rms_norm(x, w[w.final_norm]) * w[w.exit_w[k]])(0) + w[w.exit_b[k]](0, 0) + policy.offset;
    d.head_probs.push_back(sigmoid(z));
    const bool fire = policy.mode == ExitPolicy::Mode::Forced ? policy.forced_layer == l
                                                               : uniform(*policy.rng) < d.head_probs.back();
    if (fire) {
      d.exit_logprob += log_sigmoid(z);
      d.exit_layer = l;
      exited = true;
    } else {
      d.exit_logprob += log_sigmoid(-z);
    }
  }
  ++pos_;
  if (decision != nullptr) *decision = std::move(d);
  return rms_norm(x, w[w.final_norm]) * w[w.unembed];
}

}  // namespace exitlab
