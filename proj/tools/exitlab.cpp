// exitlab: pretrain, calibrate, rl, generate, eval, sweep.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "exitlab/error.hpp"
#include "exitlab/metrics.hpp"
#include "exitlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace exitlab;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> kl_factor;
  std::optional<double> lambda;
  std::optional<double> beta;
  std::optional<int> k;
  std::optional<int> steps;
  std::optional<double> offset;
  std::optional<int> workers;
  bool no_color = false;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "INI config file (defaults apply when omitted)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--kl-factor", o.kl_factor, "calibration KL factor");
  cmd->add_option("--lambda", o.lambda, "RL depth penalty weight");
  cmd->add_option("--beta", o.beta, "RL KL penalty weight");
  cmd->add_option("--k", o.k, "rollouts per prompt");
  cmd->add_option("--steps", o.steps, "RL steps");
  cmd->add_option("--offset", o.offset, "exit-logit offset at inference");
  cmd->add_option("--workers", o.workers, "worker threads");
  cmd->add_flag("--no-color", o.no_color, "plain terminal output");
  cmd->add_option("--set", o.sets, "override any config key: section.key=value");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.config.empty()) c.workers = default_workers();
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.kl_factor) c.calibrate.kl_factor = *o.kl_factor;
  if (o.lambda) c.rl.reward.lambda = *o.lambda;
  if (o.beta) c.rl.reward.beta = *o.beta;
  if (o.k) c.rl.k = *o.k;
  if (o.steps) c.rl.steps = *o.steps;
  if (o.offset) c.offset = *o.offset;
  if (o.workers) c.workers = *o.workers;
  if (o.no_color) c.color = false;
  finalize_config(c);
  return c;
}

void prepare_out(const RunConfig& c, const std::string& command) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out.string() + ": " + ec.message());
  std::ofstream os(c.out / (command + ".config.ini"));
  if (!os) throw IoError("cannot write to output directory " + c.out.string());
  os << format_config(c);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

fs::path checkpoint_or(const std::string& given, const fs::path& fallback) {
  const fs::path p = given.empty() ? fallback : fs::path(given);
  if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
  return p;
}

void print_eval(const EvalResult& e) {
  std::printf("accuracy     %.4f\n", e.accuracy);
  std::printf("exit_rate    %.4f\n", e.exit_rate);
  std::printf("als          %.2f%%\n", e.als);
  std::printf("avg_compute  %.4f\n", e.avg_compute);
  std::printf("total_compute %.3f\n", e.total_compute);
  std::printf("mean_kl      %.5f\n", e.mean_kl);
}

int cmd_pretrain(const Overrides& o) {
  const RunConfig c = resolve(o);
  prepare_out(c, "pretrain");
  const TaskData data = make_task_data(c);
  save_dataset(c.out / "train.tsv", data.train);
  save_dataset(c.out / "eval.tsv", data.eval);
  const PretrainResult r =
      pretrain(init_model(c.model, c.seed), data, c.pretrain, c.seed, c.workers, c.max_new_tokens,
               [](const PretrainEpoch& e) {
                 std::printf("epoch %3d  loss %.4f  accuracy %.3f\n", e.epoch, e.loss, e.accuracy);
                 std::fflush(stdout);
               });
  CurveTable log{{"epoch", "loss", "accuracy"}, {}};
  for (const auto& e : r.history) log.rows.push_back({double(e.epoch), e.loss, e.accuracy});
  export_curves(c.out / "pretrain_log.csv", log);
  save_checkpoint(c.out / "base.ckpt", r.params);
  std::printf("wrote %s\n", (c.out / "base.ckpt").c_str());
  return 0;
}

int cmd_calibrate(const Overrides& o, const std::string& checkpoint, const std::string& corpus_path) {
  const RunConfig c = resolve(o);
  const ModelParams base = load_checkpoint(checkpoint_or(checkpoint, c.out / "base.ckpt"));
  if (!(base.config == c.model)) std::fprintf(stderr, "note: using the model shape stored in the checkpoint\n");
  prepare_out(c, "calibrate");
  TaskData data = make_task_data(c);
  if (!corpus_path.empty()) {
    data.corpus.clear();
    for (const auto& line : load_corpus(corpus_path)) data.corpus.push_back(CharTokenizer::encode(line + "\n"));
  }
  const CalibrationResult cal = calibrate(data.corpus, base, c.calibrate, [](const CalibrationEpoch& e) {
    std::printf("epoch %3d  token_kl %.5f  exit_ce %.5f  total %.5f\n", e.epoch, e.token_kl, e.exit_ce, e.total);
    std::fflush(stdout);
  });
  CurveTable loss{{"epoch", "token_kl", "exit_ce", "total"}, {}};
  for (const auto& e : cal.history) loss.rows.push_back({double(e.epoch), e.token_kl, e.exit_ce, e.total});
  export_curves(c.out / "calibration_loss.csv", loss);
  save_checkpoint(c.out / "calibrated.ckpt", cal.params);

  const CalibrationReport rep = calibration_report(base, cal.params, data, c);
  CurveTable hist{{"layer", "target", "learned"}, {}};
  for (std::size_t i = 0; i < rep.histograms.layers.size(); ++i)
    hist.rows.push_back({double(rep.histograms.layers[i]), rep.histograms.target[i], rep.histograms.learned[i]});
  export_curves(c.out / "exit_histogram.csv", hist);
  CurveTable summary{{"kl_factor", "exit_rate", "als", "accuracy", "avg_compute", "histogram_tv"},
                     {{c.calibrate.kl_factor, rep.eval.exit_rate, rep.eval.als, rep.eval.accuracy,
                       rep.eval.avg_compute, rep.histograms.total_variation()}}};
  export_curves(c.out / "calibration_report.csv", summary);
  print_eval(rep.eval);
  std::printf("histogram TV %.4f\n", rep.histograms.total_variation());
  std::printf("wrote %s\n", (c.out / "calibrated.ckpt").c_str());
  return 0;
}

int cmd_rl(const Overrides& o, const std::string& checkpoint) {
  const RunConfig c = resolve(o);
  const ModelParams cal = load_checkpoint(checkpoint_or(checkpoint, c.out / "calibrated.ckpt"));
  prepare_out(c, "rl");
  const TaskData data = make_task_data(c);
  const RlResult r = run_rl(data.train, data.eval, cal, c.rl, [](const RlHistoryRow& h) {
    std::printf("step %4d  reward %.4f  accuracy %.3f  avg_compute %.4f  exit_rate %.3f  kl %.5f\n", h.step,
                h.mean_reward, h.accuracy, h.avg_compute, h.exit_rate, h.mean_kl);
    std::fflush(stdout);
  });
  CurveTable hist{{"step", "mean_reward", "accuracy", "avg_compute", "total_compute", "exit_rate", "mean_kl"}, {}};
  for (const auto& h : r.history)
    hist.rows.push_back({double(h.step), h.mean_reward, h.accuracy, h.avg_compute, h.total_compute, h.exit_rate,
                         h.mean_kl});
  export_curves(c.out / "rl_history.csv", hist);
  save_checkpoint(c.out / "rl.ckpt", r.params);
  std::printf("wrote %s\n", (c.out / "rl.ckpt").c_str());
  return 0;
}

int cmd_generate(const Overrides& o, const std::string& checkpoint, const std::string& prompt, double temperature) {
  const RunConfig c = resolve(o);
  const ModelParams p = load_checkpoint(checkpoint_or(checkpoint, c.out / "rl.ckpt"));
  const std::vector<int> ids = CharTokenizer::encode(prompt);
  const InferenceModel im(p);
  Rng rng(c.seed);
  DecodeSettings ds;
  ds.temperature = temperature;
  ds.max_new_tokens = c.max_new_tokens;
  ds.offset = c.offset;
  const Rollout r = rollout(im, ids, ds, rng);

  std::vector<ExitRecord> records;
  for (const auto& d : r.decisions) records.push_back({CharTokenizer::token_text(d.token), d.exit_layer, d.position});
  const ExitMap map = render_exit_map(records, p.config.n_layers, Palette{.color = c.color});
  std::cout << prompt << map.terminal;
  if (!r.terminal) std::cout << "\n";
  if (!records.empty())
    std::printf("exit_rate %.3f  als %.2f%%\n", exit_rate(records, p.config.n_layers),
                als(records, p.config.n_layers));
  std::error_code ec;
  fs::create_directories(c.out, ec);
  write_text(c.out / "exit_map.html", map.html);
  std::printf("wrote %s\n", (c.out / "exit_map.html").c_str());
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& checkpoint, const std::string& base_path) {
  const RunConfig c = resolve(o);
  const ModelParams p = load_checkpoint(checkpoint_or(checkpoint, c.out / "rl.ckpt"));
  std::optional<ModelParams> base;
  if (!base_path.empty()) base = load_checkpoint(checkpoint_or(base_path, {}));
  prepare_out(c, "eval");
  const TaskData data = make_task_data(c);
  EvalSettings es;
  es.offset = c.offset;
  es.max_new_tokens = c.max_new_tokens;
  es.seed = c.seed;
  es.workers = c.workers;
  es.reward = c.rl.reward;
  const EvalResult e = evaluate(p, base ? &*base : nullptr, data.eval, es);
  print_eval(e);
  CurveTable t{{"accuracy", "exit_rate", "als", "avg_compute", "total_compute", "mean_kl"},
               {{e.accuracy, e.exit_rate, e.als, e.avg_compute, e.total_compute, e.mean_kl}}};
  export_curves(c.out / "eval.csv", t);
  return 0;
}

int cmd_sweep(const Overrides& o, const std::string& checkpoint, const std::vector<double>& factors) {
  RunConfig c = resolve(o);
  if (!factors.empty()) c.sweep_factors = factors;
  if (c.sweep_factors.empty()) throw ConfigError("KL-factor sweep needs at least one factor");
  const ModelParams base = load_checkpoint(checkpoint_or(checkpoint, c.out / "base.ckpt"));
  prepare_out(c, "sweep");
  const TaskData data = make_task_data(c);
  std::printf("%-10s %-10s %-8s %-8s\n", "kl_factor", "exit_rate", "als", "accuracy");
  const auto rows = kl_sweep(base, data, c, [](const SweepRow& r) {
    std::printf("%-10.3g %-10.3f %-8.2f %-8.3f\n", r.kl_factor, r.exit_rate, r.als, r.accuracy);
    std::fflush(stdout);
  });
  CurveTable t{{"kl_factor", "exit_rate", "als", "accuracy"}, {}};
  for (const auto& r : rows) t.rows.push_back({r.kl_factor, r.exit_rate, r.als, r.accuracy});
  export_curves(c.out / "sweep.csv", t);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Early-exit transformer toolkit"};
  app.require_subcommand(1);

  Overrides o;
  std::string checkpoint, corpus, prompt, base;
  double temperature = 0.0;
  std::vector<double> factors;

  auto* pre = app.add_subcommand("pretrain", "train the base model at full depth");
  auto* cal = app.add_subcommand("calibrate", "self-distil exit heads and adapters from the base model");
  auto* rl = app.add_subcommand("rl", "reinforce earlier exits with a depth-penalised reward");
  auto* gen = app.add_subcommand("generate", "generate with sampled exits and write an exit map");
  auto* ev = app.add_subcommand("eval", "accuracy and compute metrics on the evaluation prompts");
  auto* sw = app.add_subcommand("sweep", "calibrate once per KL factor and tabulate exit behaviour");
  for (auto* cmd : {pre, cal, rl, gen, ev, sw}) add_common(cmd, o);
  for (auto* cmd : {cal, rl, gen, ev, sw}) cmd->add_option("--checkpoint", checkpoint, "input checkpoint");
  cal->add_option("--corpus", corpus, "newline-delimited calibration corpus (default: task training texts)");
  gen->add_option("--prompt", prompt, "prompt text")->required();
  gen->add_option("--temperature", temperature, "token sampling temperature (0 = greedy)");
  ev->add_option("--base", base, "base checkpoint for KL-to-base");
  sw->add_option("--factors", factors, "KL factors (overrides sweep.kl_factors)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*pre) return cmd_pretrain(o);
    if (*cal) return cmd_calibrate(o, checkpoint, corpus);
    if (*rl) return cmd_rl(o, checkpoint);
    if (*gen) return cmd_generate(o, checkpoint, prompt, temperature);
    if (*ev) return cmd_eval(o, checkpoint, base);
    if (*sw) return cmd_sweep(o, checkpoint, factors);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
