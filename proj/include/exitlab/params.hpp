#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace exitlab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Which projections carry low-rank adapters.
enum class LoraTargets { Attention, All };

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 96;
  int max_seq_len = 256;
  int exit_stride = 2;
  int lora_rank = 4;
  LoraTargets lora_targets = LoraTargets::Attention;

  // Throws ConfigError on any violated invariant.
  void validate() const;

  // 1-based block indices that carry an exit head, ascending. The last block never does.
  std::vector<int> exitable_layers() const;
  int n_exits() const { return static_cast<int>(exitable_layers().size()); }
  int head_dim() const { return d_model / n_heads; }
  int mlp_dim() const { return 4 * d_model; }

  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup : std::uint8_t { Base, ExitHead, Adapter };

// Projections inside a block, in storage order. Weights are stored (in x out), so y = x W.
enum class Proj : int { Q = 0, K, V, O, Up, Down };
inline constexpr int kNumProj = 6;

struct BlockIndex {
  int attn_norm = -1;
  std::array<int, kNumProj> proj{};
  int mlp_norm = -1;
};

struct AdapterIndex {
  int a = -1;  // in x rank
  int b = -1;  // rank x out
  bool present() const { return a >= 0; }
};

// Every learnable tensor of the model in a flat, named list. The index fields
// locate tensors by role; gradients and optimizer state mirror `tensors`.
struct ModelParams {
  ModelConfig config;
  std::vector<Matrix> tensors;
  std::vector<std::string> names;
  std::vector<ParamGroup> groups;

  int tok_emb = -1;
  int pos_emb = -1;
  int final_norm = -1;
  int unembed = -1;
  std::vector<BlockIndex> blocks;
  std::vector<int> exit_w;  // per exitable layer, d_model x 1
  std::vector<int> exit_b;  // per exitable layer, 1 x 1
  std::vector<std::array<AdapterIndex, kNumProj>> adapters;

  // Bumped on every optimizer step; rollouts carry the version they were sampled under.
  std::uint64_t version = 0;

  const Matrix& operator[](int i) const { return tensors[static_cast<std::size_t>(i)]; }
  Matrix& operator[](int i) { return tensors[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return tensors.size(); }
  std::size_t scalar_count() const;
  int find(const std::string& name) const;
};

using ParamGrads = std::vector<Matrix>;

// Zero-valued tensors with the layout implied by `config`.
ModelParams make_layout(const ModelConfig& config);

// Deterministic for a fixed seed. Exit heads and adapter B factors start at
// zero, so the initial model is exactly the unadapted base transformer.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

// Gaussian fill for every tensor including heads and adapters; used by tests
// that need non-degenerate gradients everywhere.
void randomize_all(ModelParams& params, std::uint64_t seed, double scale);

ParamGrads zeros_like(const ModelParams& params);
// Zeros only for tensors selected by `mask`; the rest stay empty.
ParamGrads zeros_like(const ModelParams& params, const std::vector<bool>& mask);
std::vector<bool> trainable_mask(const ModelParams& params, std::initializer_list<ParamGroup> groups);

// merge=false returns the params untouched (adapters are applied on the fly);
// merge=true folds A*B into each adapted weight and zeroes B.
ModelParams apply_adapters(const ModelParams& params, bool merge);

// Binary checkpoint: see docs/checkpoint-format.md.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace exitlab
