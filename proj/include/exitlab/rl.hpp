#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "exitlab/inference.hpp"
#include "exitlab/optim.hpp"
#include "exitlab/tasks.hpp"

namespace exitlab {

struct DecodeSettings {
  double temperature = 1.0;  // 0 = greedy tokens
  int max_new_tokens = 128;
  int stop_token = CharTokenizer::kStopToken;
  double offset = 0.0;  // added to every exit-head logit; -inf disables exits
};

// One sampled completion. Exits are sampled for every generated token (the
// forward pass at the last prompt position onward); the prompt itself is
// prefilled at full depth.
struct Rollout {
  std::vector<int> prompt;
  std::vector<int> completion;           // includes the stop token when reached
  std::vector<ExitDecision> decisions;   // one per completion token
  double logprob = 0.0;                  // sum of per-token log p(exit) + log p(token | exit)
  std::vector<double> kl;                // per completion token, KL(policy || base) at full depth; empty if not measured
  bool terminal = false;                 // stop token generated
  std::uint64_t params_version = 0;

  double mean_exit_layer() const;
  double mean_kl() const;
};

// Generates `k` rollouts sharing one prompt prefill. When `base` is given, each
// completion token also gets its full-depth KL against the base model.
std::vector<Rollout> rollout_group(const InferenceModel& policy, const InferenceModel* base,
                                   std::span<const int> prompt, int k, const DecodeSettings& settings, Rng& rng);
Rollout rollout(const InferenceModel& policy, std::span<const int> prompt, const DecodeSettings& settings, Rng& rng);

struct RewardConfig {
  double lambda = 1.5;
  double beta = 0.25;
  bool depth_normalized = true;  // depth term is mean exit layer / n_layers
};

double depth_term(const Rollout& r, int n_layers, bool normalized);
// R_task - lambda * depth - beta * mean KL.
double total_reward(const Rollout& r, int task_reward, const RewardConfig& cfg, int n_layers);

// a_i = r_i - mean of the other rewards.
std::vector<double> rloo_advantages(std::span<const double> rewards);

struct RlooBatch {
  std::vector<Rollout> rollouts;
  std::vector<int> task_rewards;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

// Fills rewards and advantages from task_rewards.
void score_batch(RlooBatch& batch, const RewardConfig& cfg, int n_layers);

// Differentiable augmented log-probability of a rollout under `builder`'s params.
ad::Var augmented_logprob(GraphBuilder& builder, const Rollout& r, double temperature, double offset);

struct StepMetrics {
  double mean_reward = 0.0;
  double mean_exit_layer = 0.0;
  double accuracy = 0.0;
  double mean_kl = 0.0;
  double grad_norm = 0.0;
};

// Gradient of -mean_i(a_i * augmented logprob_i) over every rollout of every
// batch, applied with `adam`. Throws StalenessError if any rollout was drawn
// from a different params version.
StepMetrics rl_step(const std::vector<RlooBatch>& batches, ModelParams& params, Adam& adam,
                    const DecodeSettings& decode, int workers = 1);

// Same gradient without the update; exposed for estimator checks.
ParamGrads rl_gradient(const std::vector<RlooBatch>& batches, const ModelParams& params,
                       const std::vector<bool>& mask, const DecodeSettings& decode, int workers = 1);

struct EvalResult {
  double accuracy = 0.0;
  double avg_compute = 1.0;
  double total_compute = 0.0;  // mean completion tokens per prompt x avg_compute
  double exit_rate = 0.0;
  double als = 0.0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double mean_tokens = 0.0;
  std::vector<int> exit_layers;  // every completion token, prompt order
};

struct EvalSettings {
  double offset = 0.0;
  int max_new_tokens = 16;
  std::uint64_t seed = 0;
  int workers = 1;
  RewardConfig reward;
};

// Greedy tokens with sampled exits; exit randomness is seeded per prompt so
// repeated evaluations use common random numbers.
EvalResult evaluate(const ModelParams& policy, const ModelParams* base, const std::vector<TaskInstance>& prompts,
                    const EvalSettings& settings);

struct RlSettings {
  RewardConfig reward;
  DecodeSettings decode{.temperature = 1.0, .max_new_tokens = 128, .stop_token = CharTokenizer::kStopToken,
                        .offset = 0.0};
  AdamSettings adam{.lr = 1e-4, .beta1 = 0.0, .beta2 = 0.999, .eps = 1e-8, .clip_norm = 1.0};
  int k = 8;
  int steps = 300;
  int prompts_per_step = 4;
  int eval_every = 25;
  int eval_max_new_tokens = 16;
  int checkpoint_every = 0;  // 0 = no intermediate checkpoints
  std::filesystem::path checkpoint_dir;
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RlHistoryRow {
  int step = 0;
  double mean_reward = 0.0;
  double accuracy = 0.0;
  double avg_compute = 0.0;
  double total_compute = 0.0;
  double exit_rate = 0.0;
  double mean_kl = 0.0;
};

struct RlResult {
  ModelParams params;
  std::vector<RlHistoryRow> history;  // evaluation rows, step 0 first
  std::vector<StepMetrics> steps;     // training-batch metrics per step
};

RlResult run_rl(const std::vector<TaskInstance>& train, const std::vector<TaskInstance>& eval,
                const ModelParams& calibrated, const RlSettings& settings,
                const std::function<void(const RlHistoryRow&)>& on_eval = {});

}  // namespace exitlab
