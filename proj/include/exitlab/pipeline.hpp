#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "exitlab/calibration.hpp"
#include "exitlab/rl.hpp"
#include "exitlab/tasks.hpp"

namespace exitlab {

struct TaskSettings {
  TaskFamily family = TaskFamily::Arithmetic;
  int operand_max = 99;
  int n_moves = 2;
  int n_train = 3000;
  int n_eval = 60;
};

struct PretrainSettings {
  int epochs = 60;
  int batch_size = 16;
  AdamSettings adam{.lr = 3e-3, .beta1 = 0.9, .beta2 = 0.99, .eps = 1e-8, .clip_norm = 1.0};
  double target_accuracy = 0.98;  // stop early once eval accuracy reaches this
};

// Everything a command needs. Loaded from an INI file with sections
// [model] [task] [run] [pretrain] [calibrate] [rl] [sweep]; unknown sections
// or keys are rejected.
struct RunConfig {
  ModelConfig model{.n_layers = 8, .d_model = 64, .n_heads = 4, .vocab_size = CharTokenizer::kVocabSize,
                    .max_seq_len = 256, .exit_stride = 2, .lora_rank = 1, .lora_targets = LoraTargets::Attention};
  TaskSettings task;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";
  int workers = 1;
  double offset = 0.0;
  int max_new_tokens = 16;  // evaluation and generation
  bool color = true;
  PretrainSettings pretrain;
  CalibrationSettings calibrate{.kl_factor = 1.0, .epochs = 6, .batch_size = 16,
                                .adam = {.lr = 3e-3, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .clip_norm = 1.0},
                                .seed = 0, .workers = 1};
  RlSettings rl;
  std::vector<double> sweep_factors = {0.25, 0.5, 1.0, 2.0, 4.0};
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
// Sets one "section.key" value; throws ConfigError on unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value);
// Canonical INI text of every key; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& config);
// Copies seed and workers into the stage settings.
void finalize_config(RunConfig& config);

struct TaskData {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
  std::vector<std::vector<int>> corpus;  // tokenized full texts of the training set
};
TaskData make_task_data(const RunConfig& config);

struct PretrainEpoch {
  int epoch = 0;
  double loss = 0.0;      // mean next-token cross-entropy, nats
  double accuracy = 0.0;  // greedy, full depth, on the eval set
};
struct PretrainResult {
  ModelParams params;
  std::vector<PretrainEpoch> history;
};

// Next-token cross-entropy over base weights at full depth (exits and adapters untouched).
PretrainResult pretrain(const ModelParams& init, const TaskData& data, const PretrainSettings& settings,
                        std::uint64_t seed, int workers, int eval_max_new_tokens,
                        const std::function<void(const PretrainEpoch&)>& on_epoch = {});

struct CalibrationReport {
  EvalResult eval;
  ExitHistograms histograms;
};
CalibrationReport calibration_report(const ModelParams& base, const ModelParams& calibrated, const TaskData& data,
                                     const RunConfig& config, std::size_t histogram_sequences = 500);

struct SweepRow {
  double kl_factor = 0.0;
  double exit_rate = 0.0;
  double als = 0.0;
  double accuracy = 0.0;
};
std::vector<SweepRow> kl_sweep(const ModelParams& base, const TaskData& data, const RunConfig& config,
                               const std::function<void(const SweepRow&)>& on_row = {});

}  // namespace exitlab
