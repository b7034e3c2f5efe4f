#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "exitlab/model.hpp"
#include "exitlab/optim.hpp"

namespace exitlab {

inline constexpr double kProbFloor = 1e-12;

// D(p || q) in nats with both distributions floored at kProbFloor before the log.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Per position, forward KL of the final-layer distribution against each
// exitable layer's logit-lens distribution: D(p_final || p_k). T x (K + 1),
// the last column being the final layer (identically zero).
struct LayerKL {
  Matrix values;
  int n_exitable() const { return static_cast<int>(values.cols()) - 1; }
};

// Throws ValidationError when a lens distribution does not sum to 1 within 1e-6.
LayerKL layerwise_kl(const LayerTrace& trace);

// s_k = 2 (1 - sigmoid(kl_factor * D_k)); T x K.
double survival_prob(double kl, double kl_factor);
Matrix survival_probs(const LayerKL& kl, double kl_factor);

struct TargetExitDistribution {
  Matrix survivals;  // T x K
  Matrix probs;      // T x (K + 1); the last column is the catch-all
  double kl_factor = 0.0;
};

TargetExitDistribution target_exit_distribution(const Matrix& survivals, double kl_factor = 0.0);

// Student stick-breaking exit distribution (K + 1 entries) at one position.
std::vector<double> exit_distribution(const LayerTrace& trace, int position, double offset = 0.0);

struct SftLossTerms {
  double token_kl = 0.0;  // KL(p_student(. | sampled exit) || p_teacher)
  double exit_ce = 0.0;   // -log p_student(sampled exit)
  double total() const { return token_kl + exit_ce; }
};

// Loss for a single token. `sampled_exit` is a layer (exitable or n_layers);
// `student_exit_probs` has K + 1 entries ordered like the exitable layers.
SftLossTerms sft_loss(const LayerTrace& student_trace, int position, std::span<const double> teacher_final,
                      int sampled_exit, std::span<const double> student_exit_probs);

// Teacher-side data for one sequence, computed once from the frozen teacher.
struct TeacherTargets {
  Eigen::MatrixXf log_probs;  // T x V, floored log of the teacher's final distribution
  Matrix exit_probs;          // T x (K + 1)
};
TeacherTargets teacher_targets(const ModelParams& teacher, std::span<const int> tokens, double kl_factor);

// Differentiable mean-style loss over one sequence: every position contributes
// weight * (token KL at its sampled exit - log p(sampled exit)). `exit_index`
// ranges over 0..K with K the catch-all.
struct SftGraph {
  ad::Var loss;
  double token_kl = 0.0;  // weighted sums, for logging
  double exit_ce = 0.0;
};
SftGraph build_sft_loss(GraphBuilder& builder, std::span<const int> tokens, const Matrix& teacher_log_probs,
                        const std::vector<int>& exit_index, double weight);

struct CalibrationSettings {
  double kl_factor = 1.0;
  int epochs = 4;
  int batch_size = 16;
  AdamSettings adam{.lr = 3e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .clip_norm = 1.0};
  std::uint64_t seed = 0;
  int workers = 1;
};

struct CalibrationEpoch {
  int epoch = 0;
  double token_kl = 0.0;
  double exit_ce = 0.0;
  double total = 0.0;
};

struct CalibrationResult {
  ModelParams params;
  std::vector<CalibrationEpoch> history;
};

// Trains adapters and exit heads (base weights frozen) to match the frozen
// teacher's tokens and KL-derived exit targets. Exits are resampled per token
// every epoch. `teacher` is never modified; the student starts as a copy.
CalibrationResult calibrate(const std::vector<std::vector<int>>& corpus, const ModelParams& teacher,
                            const CalibrationSettings& settings,
                            const std::function<void(const CalibrationEpoch&)>& on_epoch = {});

// Pooled exit-layer histograms over a corpus: the target distribution averaged
// over tokens, and the student's exits sampled once per token at full depth.
struct ExitHistograms {
  std::vector<int> layers;      // exitable layers then n_layers
  std::vector<double> target;
  std::vector<double> learned;
  double total_variation() const;
};
ExitHistograms compare_exit_histograms(const std::vector<std::vector<int>>& corpus, const ModelParams& teacher,
                                       const ModelParams& student, double kl_factor, std::uint64_t seed,
                                       int workers = 1);

// Deterministic per-item seed mixing.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

}  // namespace exitlab
