#include "exitlab/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "exitlab/error.hpp"

namespace exitlab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "+inf") return std::numeric_limits<double>::infinity();
  if (v == "-inf") return -std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || std::isnan(out))
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::istringstream is(v);
  for (std::string item; std::getline(is, item, ',');) {
    const std::string t = trim(item);
    if (!t.empty()) out.push_back(to_double(key, t));
  }
  return out;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_KEY(NAME, FIELD)                                                         \
  Key {                                                                              \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_int(NAME, v); },     \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                   \
  }
#define DOUBLE_KEY(NAME, FIELD)                                                      \
  Key {                                                                              \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_double(NAME, v); },  \
        [](const RunConfig& c) { return fmt(c.FIELD); }                              \
  }
#define BOOL_KEY(NAME, FIELD)                                                        \
  Key {                                                                              \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); },    \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }   \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      INT_KEY("model.n_layers", model.n_layers),
      INT_KEY("model.d_model", model.d_model),
      INT_KEY("model.n_heads", model.n_heads),
      INT_KEY("model.max_seq_len", model.max_seq_len),
      INT_KEY("model.exit_stride", model.exit_stride),
      INT_KEY("model.lora_rank", model.lora_rank),
      Key{"model.lora_targets",
          [](RunConfig& c, const std::string& v) {
            if (v == "attention")
              c.model.lora_targets = LoraTargets::Attention;
            else if (v == "all")
              c.model.lora_targets = LoraTargets::All;
            else
              throw ConfigError("model.lora_targets: expected attention or all, got '" + v + "'");
          },
          [](const RunConfig& c) {
            return std::string(c.model.lora_targets == LoraTargets::All ? "all" : "attention");
          }},
      Key{"task.family", [](RunConfig& c, const std::string& v) { c.task.family = parse_family(v); },
          [](const RunConfig& c) { return family_name(c.task.family); }},
      INT_KEY("task.operand_max", task.operand_max),
      INT_KEY("task.n_moves", task.n_moves),
      INT_KEY("task.n_train", task.n_train),
      INT_KEY("task.n_eval", task.n_eval),
      Key{"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64("run.seed", v); },
          [](const RunConfig& c) { return std::to_string(c.seed); }},
      Key{"run.out", [](RunConfig& c, const std::string& v) { c.out = v; },
          [](const RunConfig& c) { return c.out.string(); }},
      INT_KEY("run.workers", workers),
      DOUBLE_KEY("run.offset", offset),
      INT_KEY("run.max_new_tokens", max_new_tokens),
      BOOL_KEY("run.color", color),
      INT_KEY("pretrain.epochs", pretrain.epochs),
      INT_KEY("pretrain.batch_size", pretrain.batch_size),
      DOUBLE_KEY("pretrain.lr", pretrain.adam.lr),
      DOUBLE_KEY("pretrain.target_accuracy", pretrain.target_accuracy),
      DOUBLE_KEY("calibrate.kl_factor", calibrate.kl_factor),
      INT_KEY("calibrate.epochs", calibrate.epochs),
      INT_KEY("calibrate.batch_size", calibrate.batch_size),
      DOUBLE_KEY("calibrate.lr", calibrate.adam.lr),
      DOUBLE_KEY("rl.lambda", rl.reward.lambda),
      DOUBLE_KEY("rl.beta", rl.reward.beta),
      BOOL_KEY("rl.depth_normalized", rl.reward.depth_normalized),
      INT_KEY("rl.k", rl.k),
      INT_KEY("rl.steps", rl.steps),
      DOUBLE_KEY("rl.temperature", rl.decode.temperature),
      INT_KEY("rl.max_new_tokens", rl.decode.max_new_tokens),
      DOUBLE_KEY("rl.lr", rl.adam.lr),
      INT_KEY("rl.prompts_per_step", rl.prompts_per_step),
      INT_KEY("rl.eval_every", rl.eval_every),
      INT_KEY("rl.checkpoint_every", rl.checkpoint_every),
      Key{"sweep.kl_factors",
          [](RunConfig& c, const std::string& v) { c.sweep_factors = to_list("sweep.kl_factors", v); },
          [](const RunConfig& c) {
            std::string s;
            for (std::size_t i = 0; i < c.sweep_factors.size(); ++i) s += (i ? ", " : "") + fmt(c.sweep_factors[i]);
            return s;
          }},
  };
  return k;
}

#undef INT_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY

void check_ranges(const RunConfig& c) {
  c.model.validate();
  if (c.model.vocab_size != CharTokenizer::kVocabSize) throw ConfigError("vocab_size must match the tokenizer");
  if (c.task.operand_max < 1) throw ConfigError("task.operand_max must be at least 1");
  if (c.task.n_moves < 1) throw ConfigError("task.n_moves must be at least 1");
  if (c.task.n_train < 1 || c.task.n_eval < 1) throw ConfigError("task.n_train and task.n_eval must be positive");
  if (c.workers < 1) throw ConfigError("run.workers must be at least 1");
  if (c.max_new_tokens < 1) throw ConfigError("run.max_new_tokens must be positive");
  if (c.pretrain.epochs < 0 || c.pretrain.batch_size < 1) throw ConfigError("invalid pretrain settings");
  if (c.calibrate.kl_factor < 0) throw ConfigError("calibrate.kl_factor must be non-negative");
  if (c.calibrate.epochs < 0 || c.calibrate.batch_size < 1) throw ConfigError("invalid calibrate settings");
  if (c.rl.reward.lambda < 0 || c.rl.reward.beta < 0) throw ConfigError("rl.lambda and rl.beta must be non-negative");
  if (c.rl.k < 2) throw ConfigError("rl.k must be at least 2");
  if (c.rl.steps < 0 || c.rl.prompts_per_step < 1 || c.rl.eval_every < 1 || c.rl.decode.max_new_tokens < 1)
    throw ConfigError("invalid rl settings");
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) { return mix_seed(seed, stage, 0x57A6E); }

}  // namespace

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  for (const auto& k : keys()) {
    if (dotted_key == k.name) {
      k.set(config, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key: " + dotted_key);
}

void finalize_config(RunConfig& c) {
  check_ranges(c);
  c.calibrate.seed = stage_seed(c.seed, 2);
  c.calibrate.workers = c.workers;
  c.rl.seed = stage_seed(c.seed, 3);
  c.rl.workers = c.workers;
  c.rl.eval_max_new_tokens = c.max_new_tokens;
  c.rl.decode.offset = c.offset;
  c.rl.checkpoint_dir = c.out / "checkpoints";
}

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string section;
  int line_no = 0;
  for (std::string raw; std::getline(is, raw);) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find_first_of("#;"); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      static const std::vector<std::string> known = {"model", "task", "run", "pretrain", "calibrate", "rl", "sweep"};
      if (std::find(known.begin(), known.end(), section) == known.end())
        throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": key outside of a section");
    set_config_value(c, section + "." + trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  check_ranges(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : keys()) {
    const std::string name = k.name;
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << name.substr(dot + 1) << " = " << k.get(config) << "\n";
  }
  return os.str();
}

TaskData make_task_data(const RunConfig& config) {
  const auto& t = config.task;
  TaskData d;
  d.train = generate(t.family, stage_seed(config.seed, 10), t.n_train, t.operand_max, t.n_moves);
  // Evaluation prompts are held out: anything that also occurs in training is skipped.
  std::unordered_set<std::string> seen;
  for (const auto& inst : d.train) seen.insert(inst.prompt);
  const int pool = 20 * t.n_eval + 100;
  for (auto& inst : generate(t.family, stage_seed(config.seed, 11), pool, t.operand_max, t.n_moves)) {
    if (static_cast<int>(d.eval.size()) == t.n_eval) break;
    if (!seen.contains(inst.prompt)) d.eval.push_back(std::move(inst));
  }
  if (static_cast<int>(d.eval.size()) < t.n_eval)
    throw ConfigError("task space too small for " + std::to_string(t.n_eval) + " held-out evaluation prompts");
  for (const auto& inst : d.train) {
    auto ids = CharTokenizer::encode(inst.full_text());
    if (static_cast<int>(ids.size()) > config.model.max_seq_len)
      throw ConfigError("task text of " + std::to_string(ids.size()) + " characters exceeds model.max_seq_len");
    d.corpus.push_back(std::move(ids));
  }
  return d;
}

PretrainResult pretrain(const ModelParams& init, const TaskData& data, const PretrainSettings& settings,
                        std::uint64_t seed, int workers, int eval_max_new_tokens,
                        const std::function<void(const PretrainEpoch&)>& on_epoch) {
  if (data.corpus.empty()) throw ConfigError("pretraining corpus is empty");
  PretrainResult result{init, {}};
  ModelParams& params = result.params;
  const auto mask = trainable_mask(params, {ParamGroup::Base});
  Adam adam(params, settings.adam, mask);

  EvalSettings es;
  es.offset = -std::numeric_limits<double>::infinity();
  es.max_new_tokens = eval_max_new_tokens;
  es.seed = seed;
  es.workers = workers;

  std::vector<std::size_t> order(data.corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle(mix_seed(seed, 0x9E7A));
  const auto bs = static_cast<std::size_t>(settings.batch_size);

  for (int epoch = 1; epoch <= settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    double loss_sum = 0.0, tokens_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      double batch_tokens = 0.0;
      for (std::size_t b = start; b < end; ++b) batch_tokens += static_cast<double>(data.corpus[order[b]].size() - 1);
      std::vector<ParamGrads> slots(end - start);
      std::vector<double> losses(end - start, 0.0);
      parallel_for(end - start, workers, [&](std::size_t j) {
        const auto& seq = data.corpus[order[start + j]];
        if (seq.size() < 2) return;
        const std::vector<int> inputs(seq.begin(), seq.end() - 1);
        const std::vector<int> targets(seq.begin() + 1, seq.end());
        ad::Tape tape;
        GraphBuilder gb(tape, params, &mask);
        const ForwardGraph g = gb.forward(inputs);
        ad::Var lp = ad::token_logprob(g.logits, targets, std::vector<double>(targets.size(), 1.0 / batch_tokens));
        tape.backward(ad::scale(lp, -1.0));
        losses[j] = -lp.scalar() * batch_tokens;
        slots[j] = zeros_like(params, mask);
        tape.accumulate_param_grads(slots[j]);
      });
      ParamGrads grads = zeros_like(params, mask);
      for (std::size_t j = 0; j < slots.size(); ++j) {
        loss_sum += losses[j];
        if (slots[j].empty()) continue;
        for (std::size_t p = 0; p < grads.size(); ++p)
          if (mask[p]) grads[p] += slots[j][p];
      }
      tokens_sum += batch_tokens;
      adam.step(params, grads);
    }
    PretrainEpoch row{epoch, loss_sum / tokens_sum, evaluate(params, nullptr, data.eval, es).accuracy};
    result.history.push_back(row);
    if (on_epoch) on_epoch(row);
    if (row.accuracy >= settings.target_accuracy) break;
  }
  return result;
}

CalibrationReport calibration_report(const ModelParams& base, const ModelParams& calibrated, const TaskData& data,
                                     const RunConfig& config, std::size_t histogram_sequences) {
  EvalSettings es;
  es.offset = config.offset;
  es.max_new_tokens = config.max_new_tokens;
  es.seed = stage_seed(config.seed, 20);
  es.workers = config.workers;
  es.reward = config.rl.reward;
  CalibrationReport r;
  r.eval = evaluate(calibrated, &base, data.eval, es);
  const std::size_t n = std::min(histogram_sequences, data.corpus.size());
  const std::vector<std::vector<int>> subset(data.corpus.begin(), data.corpus.begin() + static_cast<long>(n));
  r.histograms =
      compare_exit_histograms(subset, base, calibrated, config.calibrate.kl_factor, stage_seed(config.seed, 21),
                              config.workers);
  return r;
}

std::vector<SweepRow> kl_sweep(const ModelParams& base, const TaskData& data, const RunConfig& config,
                               const std::function<void(const SweepRow&)>& on_row) {
  if (config.sweep_factors.empty()) throw ConfigError("KL-factor sweep needs at least one factor");
  EvalSettings es;
  es.offset = config.offset;
  es.max_new_tokens = config.max_new_tokens;
  es.seed = stage_seed(config.seed, 20);
  es.workers = config.workers;
  es.reward = config.rl.reward;
  std::vector<SweepRow> rows;
  for (double f : config.sweep_factors) {
    CalibrationSettings s = config.calibrate;
    s.kl_factor = f;
    const CalibrationResult cal = calibrate(data.corpus, base, s);
    const EvalResult e = evaluate(cal.params, &base, data.eval, es);
    rows.push_back({f, e.exit_rate, e.als, e.accuracy});
    if (on_row) on_row(rows.back());
  }
  return rows;
}

}  // namespace exitlab
