#include "exitlab/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "exitlab/error.hpp"

namespace exitlab {

namespace {

constexpr char kMagic[8] = {'E', 'X', 'I', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

const char* proj_name(int p) {
  static constexpr const char* kNames[kNumProj] = {"wq", "wk", "wv", "wo", "w_up", "w_down"};
  return kNames[p];
}

bool proj_adapted(LoraTargets targets, int p) {
  return targets == LoraTargets::All || p <= static_cast<int>(Proj::O);
}

int add_tensor(ModelParams& params, std::string name, ParamGroup group, int rows, int cols) {
  params.tensors.emplace_back(Matrix::Zero(rows, cols));
  params.names.push_back(std::move(name));
  params.groups.push_back(group);
  return static_cast<int>(params.tensors.size()) - 1;
}

std::pair<int, int> proj_shape(const ModelConfig& c, int p) {
  if (p == static_cast<int>(Proj::Up)) return {c.d_model, c.mlp_dim()};
  if (p == static_cast<int>(Proj::Down)) return {c.mlp_dim(), c.d_model};
  return {c.d_model, c.d_model};
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string targets_name(LoraTargets t) { return t == LoraTargets::All ? "all" : "attention"; }

}  // namespace

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0 ||
      exit_stride <= 0)
    throw ConfigError("model dimensions must be positive");
  if (lora_rank < 0) throw ConfigError("lora_rank must be non-negative");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (exit_stride > n_layers) throw ConfigError("exit_stride must not exceed n_layers");
}

std::vector<int> ModelConfig::exitable_layers() const {
  std::vector<int> layers;
  for (int l = exit_stride; l <= n_layers - 1; l += exit_stride) layers.push_back(l);
  return layers;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

int ModelParams::find(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

ModelParams make_layout(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int d = config.d_model;
  p.tok_emb = add_tensor(p, "tok_emb", ParamGroup::Base, config.vocab_size, d);
  p.pos_emb = add_tensor(p, "pos_emb", ParamGroup::Base, config.max_seq_len, d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string prefix = "block" + std::to_string(l + 1) + ".";
    BlockIndex b;
    b.attn_norm = add_tensor(p, prefix + "attn_norm", ParamGroup::Base, 1, d);
    for (int q = 0; q < kNumProj; ++q) {
      auto [rows, cols] = proj_shape(config, q);
      b.proj[q] = add_tensor(p, prefix + proj_name(q), ParamGroup::Base, rows, cols);
      if (q == static_cast<int>(Proj::O))
        b.mlp_norm = add_tensor(p, prefix + "mlp_norm", ParamGroup::Base, 1, d);
    }
    p.blocks.push_back(b);
  }
  p.final_norm = add_tensor(p, "final_norm", ParamGroup::Base, 1, d);
  p.unembed = add_tensor(p, "unembed", ParamGroup::Base, d, config.vocab_size);
  for (int layer : config.exitable_layers()) {
    const std::string prefix = "exit" + std::to_string(layer) + ".";
    p.exit_w.push_back(add_tensor(p, prefix + "w", ParamGroup::ExitHead, d, 1));
    p.exit_b.push_back(add_tensor(p, prefix + "b", ParamGroup::ExitHead, 1, 1));
  }
  p.adapters.resize(static_cast<std::size_t>(config.n_layers));
  if (config.lora_rank > 0) {
    for (int l = 0; l < config.n_layers; ++l) {
      for (int q = 0; q < kNumProj; ++q) {
        if (!proj_adapted(config.lora_targets, q)) continue;
        auto [rows, cols] = proj_shape(config, q);
        const std::string prefix = "block" + std::to_string(l + 1) + "." + proj_name(q) + ".lora_";
        auto& a = p.adapters[static_cast<std::size_t>(l)][static_cast<std::size_t>(q)];
        a.a = add_tensor(p, prefix + "a", ParamGroup::Adapter, rows, config.lora_rank);
        a.b = add_tensor(p, prefix + "b", ParamGroup::Adapter, config.lora_rank, cols);
      }
    }
  }
  return p;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = make_layout(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](int idx, double stddev) {
    for (Eigen::Index i = 0; i < p[idx].size(); ++i) p[idx].data()[i] = stddev * normal(rng);
  };
  const double base_std = 0.02;
  const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);
  fill(p.tok_emb, 0.1);
  fill(p.pos_emb, 0.1);
  for (const auto& b : p.blocks) {
    p[b.attn_norm].setOnes();
    p[b.mlp_norm].setOnes();
    for (int q = 0; q < kNumProj; ++q) {
      const bool writes_residual = q == static_cast<int>(Proj::O) || q == static_cast<int>(Proj::Down);
      fill(b.proj[q], writes_residual ? resid_std : base_std);
    }
  }
  p[p.final_norm].setOnes();
  fill(p.unembed, base_std);
  for (const auto& layer : p.adapters)
    for (const auto& a : layer)
      if (a.present()) fill(a.a, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  return p;
}

void randomize_all(ModelParams& params, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& m = params.tensors[t];
    const bool is_norm = params.names[t].find("norm") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (is_norm ? 1.0 : 0.0) + normal(rng);
  }
}

ParamGrads zeros_like(const ModelParams& params) {
  ParamGrads g;
  g.reserve(params.size());
  for (const auto& t : params.tensors) g.emplace_back(Matrix::Zero(t.rows(), t.cols()));
  return g;
}

ParamGrads zeros_like(const ModelParams& params, const std::vector<bool>& mask) {
  ParamGrads g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    if (mask[i]) g[i] = Matrix::Zero(params.tensors[i].rows(), params.tensors[i].cols());
  return g;
}

std::vector<bool> trainable_mask(const ModelParams& params, std::initializer_list<ParamGroup> groups) {
  std::vector<bool> mask(params.size(), false);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (auto g : groups)
      if (params.groups[i] == g) mask[i] = true;
  return mask;
}

ModelParams apply_adapters(const ModelParams& params, bool merge) {
  if (params.config.lora_rank == 0) throw AdapterError("adapters are disabled (lora_rank = 0)");
  ModelParams out = params;
  if (!merge) return out;
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    for (int q = 0; q < kNumProj; ++q) {
      const auto& a = out.adapters[l][static_cast<std::size_t>(q)];
      if (!a.present()) continue;
      out[out.blocks[l].proj[q]].noalias() += out[a.a] * out[a.b];
      out[a.b].setZero();
    }
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  const auto& c = params.config;
  std::ostringstream header;
  header << "n_layers=" << c.n_layers << "\n"
         << "d_model=" << c.d_model << "\n"
         << "n_heads=" << c.n_heads << "\n"
         << "vocab_size=" << c.vocab_size << "\n"
         << "max_seq_len=" << c.max_seq_len << "\n"
         << "exit_stride=" << c.exit_stride << "\n"
         << "lora_rank=" << c.lora_rank << "\n"
         << "lora_targets=" << targets_name(c.lora_targets) << "\n";
  const std::string h = header.str();
  os.write(kMagic, sizeof(kMagic));
  write_u32(os, kFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& name = params.names[t];
    const auto& m = params.tensors[t];
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(m.rows()));
    write_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i)
      write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path.string());
  if (read_u32(is) != kFormatVersion) throw IoError("unsupported checkpoint version");
  std::string header(read_u32(is), '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(header.size())))
    throw IoError("checkpoint truncated");

  std::map<std::string, std::string> kv;
  std::istringstream hs(header);
  for (std::string line; std::getline(hs, line);) {
    auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get_int = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError(std::string("checkpoint header missing ") + key);
    return std::stoi(it->second);
  };
  ModelConfig c;
  c.n_layers = get_int("n_layers");
  c.d_model = get_int("d_model");
  c.n_heads = get_int("n_heads");
  c.vocab_size = get_int("vocab_size");
  c.max_seq_len = get_int("max_seq_len");
  c.exit_stride = get_int("exit_stride");
  c.lora_rank = get_int("lora_rank");
  c.lora_targets = kv["lora_targets"] == "all" ? LoraTargets::All : LoraTargets::Attention;

  ModelParams p = make_layout(c);
  const std::uint32_t count = read_u32(is);
  if (count != p.size()) throw IoError("checkpoint tensor count does not match its config");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name(read_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("checkpoint truncated");
    const int idx = p.find(name);
    if (idx < 0) throw IoError("unexpected tensor in checkpoint: " + name);
    const auto rows = read_u32(is);
    const auto cols = read_u32(is);
    auto& m = p[idx];
    if (rows != m.rows() || cols != m.cols()) throw IoError("shape mismatch for tensor " + name);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<double>(std::bit_cast<float>(read_u32(is)));
  }
  return p;
}

}  // namespace exitlab
