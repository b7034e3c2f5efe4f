#pragma once

#include <vector>

#include "exitlab/model.hpp"

namespace exitlab {

// Read-only weights for incremental decoding, with adapters folded in.
// Safe to share across threads.
class InferenceModel {
 public:
  explicit InferenceModel(const ModelParams& params);
  const ModelParams& weights() const { return weights_; }
  const ModelConfig& config() const { return weights_.config; }

 private:
  ModelParams weights_;
};

struct ExitPolicy {
  enum class Mode { FullDepth, Forced, Sampled };
  Mode mode = Mode::FullDepth;
  int forced_layer = 0;
  double offset = 0.0;
  Rng* rng = nullptr;

  static ExitPolicy full_depth() { return {}; }
  static ExitPolicy forced(int layer, double offset = 0.0) { return {Mode::Forced, layer, offset, nullptr}; }
  static ExitPolicy sampled(double offset, Rng& rng) { return {Mode::Sampled, 0, offset, &rng}; }
};

// Token-at-a-time decoder with a per-layer KV cache. When a token exits at
// layer e, its residual is frozen; for every later layer its key and value are
// projected from the frozen residual so subsequent tokens can attend to it.
class DecodeSession {
 public:
  explicit DecodeSession(const InferenceModel& model);

  // Runs `token` at the next position and returns the next-token logits.
  // `decision` (optional) receives the exit event with token fields unset.
  Eigen::RowVectorXd step(int token, const ExitPolicy& policy, ExitDecision* decision = nullptr);

  int position() const { return pos_; }

 private:
  const InferenceModel& model_;
  std::vector<int> exit_layers_;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
  int pos_ = 0;
};

}  // namespace exitlab
