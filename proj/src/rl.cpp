#include "exitlab/rl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "exitlab/calibration.hpp"
#include "exitlab/error.hpp"
#include "exitlab/metrics.hpp"

namespace exitlab {

namespace {

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& z) {
  const double mx = z.maxCoeff();
  return z.array() - mx - std::log((z.array() - mx).exp().sum());
}

double logits_kl(const Eigen::RowVectorXd& p_logits, const Eigen::RowVectorXd& q_logits) {
  const Eigen::RowVectorXd lp = log_softmax(p_logits);
  const Eigen::RowVectorXd lq = log_softmax(q_logits);
  return std::max(0.0, (lp.array().exp() * (lp - lq).array()).sum());
}

int exit_index(const std::vector<int>& layers, int n_layers, int layer) {
  if (layer == n_layers) return static_cast<int>(layers.size());
  const auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw ArgumentError("layer " + std::to_string(layer) + " is not an exit option");
  return static_cast<int>(it - layers.begin());
}

}  // namespace

double Rollout::mean_exit_layer() const {
  if (decisions.empty()) return 0.0;
  double s = 0;
  for (const auto& d : decisions) s += d.exit_layer;
  return s / static_cast<double>(decisions.size());
}

double Rollout::mean_kl() const {
  if (kl.empty()) return 0.0;
  return std::accumulate(kl.begin(), kl.end(), 0.0) / static_cast<double>(kl.size());
}

std::vector<Rollout> rollout_group(const InferenceModel& policy, const InferenceModel* base,
                                   std::span<const int> prompt, int k, const DecodeSettings& settings, Rng& rng) {
  const auto& c = policy.config();
  if (prompt.empty()) throw LengthError("prompt is empty");
  if (static_cast<int>(prompt.size()) > c.max_seq_len)
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds the context of " +
                      std::to_string(c.max_seq_len));
  check_tokens(c, prompt);

  DecodeSession prefix(policy);
  std::optional<DecodeSession> base_prefix;
  if (base != nullptr) base_prefix.emplace(*base);
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
    prefix.step(prompt[i], ExitPolicy::full_depth());
    if (base_prefix) base_prefix->step(prompt[i], ExitPolicy::full_depth());
  }

  std::vector<Rollout> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    Rollout r;
    r.prompt.assign(prompt.begin(), prompt.end());
    r.params_version = policy.weights().version;
    DecodeSession s = prefix;
    std::optional<DecodeSession> full, ref;
    if (base_prefix) {
      full.emplace(prefix);
      ref.emplace(*base_prefix);
    }
    int tok = prompt.back();
    while (static_cast<int>(r.completion.size()) < settings.max_new_tokens && s.position() < c.max_seq_len) {
      ExitDecision d;
      const Eigen::RowVectorXd logits = s.step(tok, ExitPolicy::sampled(settings.offset, rng), &d);
      const TokenSample ts = sample_token(logits, settings.temperature, rng);
      d.token = ts.token;
      d.token_logprob = ts.logprob;
      if (full) {
        const Eigen::RowVectorXd lp = full->step(tok, ExitPolicy::full_depth());
        const Eigen::RowVectorXd lb = ref->step(tok, ExitPolicy::full_depth());
        r.kl.push_back(logits_kl(lp, lb));
      }
      r.logprob += d.joint_logprob();
      r.decisions.push_back(std::move(d));
      r.completion.push_back(ts.token);
      tok = ts.token;
      if (tok == settings.stop_token) {
        r.terminal = true;
        break;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

Rollout rollout(const InferenceModel& policy, std::span<const int> prompt, const DecodeSettings& settings, Rng& rng) {
  return std::move(rollout_group(policy, nullptr, prompt, 1, settings, rng).front());
}

double depth_term(const Rollout& r, int n_layers, bool normalized) {
  const double m = r.mean_exit_layer();
  return normalized ? m / n_layers : m;
}

double total_reward(const Rollout& r, int task_reward, const RewardConfig& cfg, int n_layers) {
  if (r.completion.empty()) throw RewardError("cannot score an empty completion");
  if (cfg.lambda < 0 || cfg.beta < 0) throw ConfigError("lambda and beta must be non-negative");
  if (cfg.beta > 0 && r.kl.size() != r.completion.size())
    throw RewardError("KL penalty requested but the rollout has no KL measurements");
  return task_reward - cfg.lambda * depth_term(r, n_layers, cfg.depth_normalized) - cfg.beta * r.mean_kl();
}

std::vector<double> rloo_advantages(std::span<const double> rewards) {
  const std::size_t k = rewards.size();
  if (k < 2) throw ConfigError("leave-one-out baseline needs at least two rollouts");
  std::vector<double> a(k);
  for (std::size_t i = 0; i < k; ++i) {
    double others = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) others += rewards[j];
    a[i] = rewards[i] - others / static_cast<double>(k - 1);
  }
  return a;
}

void score_batch(RlooBatch& batch, const RewardConfig& cfg, int n_layers) {
  batch.rewards.clear();
  for (std::size_t i = 0; i < batch.rollouts.size(); ++i)
    batch.rewards.push_back(total_reward(batch.rollouts[i], batch.task_rewards[i], cfg, n_layers));
  batch.advantages = rloo_advantages(batch.rewards);
}

ad::Var augmented_logprob(GraphBuilder& builder, const Rollout& r, double temperature, double offset) {
  const auto& c = builder.params().config;
  const auto layers = c.exitable_layers();
  const std::size_t P = r.prompt.size();
  const std::size_t n = r.completion.size();
  if (n == 0) throw ArgumentError("rollout has no completion");
  if (r.decisions.size() != n) throw ArgumentError("rollout needs one exit decision per completion token");

  std::vector<int> tokens(r.prompt);
  tokens.insert(tokens.end(), r.completion.begin(), r.completion.end() - 1);
  const std::size_t T = tokens.size();
  std::vector<int> exits(T, c.n_layers);
  std::vector<int> targets(T, 0);
  std::vector<int> idx(T, static_cast<int>(layers.size()));
  std::vector<double> w(T, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t row = P - 1 + j;
    exits[row] = r.decisions[j].exit_layer;
    idx[row] = exit_index(layers, c.n_layers, exits[row]);
    targets[row] = r.completion[j];
    w[row] = 1.0;
  }
  const ForwardGraph g = builder.forward(tokens, exits);
  ad::Var tok = ad::token_logprob(g.logits, targets, w, temperature > 0 ? temperature : 1.0);
  if (layers.empty()) return tok;
  return ad::add(tok, ad::exit_logprob(builder.head_matrix(g), idx, offset, w));
}

ParamGrads rl_gradient(const std::vector<RlooBatch>& batches, const ModelParams& params,
                       const std::vector<bool>& mask, const DecodeSettings& decode, int workers) {
  std::vector<std::pair<const Rollout*, double>> items;
  for (const auto& b : batches) {
    if (b.advantages.size() != b.rollouts.size()) throw ArgumentError("batch is missing advantages");
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) items.emplace_back(&b.rollouts[i], b.advantages[i]);
  }
  ParamGrads grads = zeros_like(params, mask);
  if (items.empty()) return grads;
  const double inv_n = 1.0 / static_cast<double>(items.size());

  std::vector<ParamGrads> slots(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) {
    const auto [r, a] = items[i];
    if (a == 0.0) return;
    ad::Tape tape;
    GraphBuilder gb(tape, params, &mask);
    ad::Var lp = augmented_logprob(gb, *r, decode.temperature, decode.offset);
    tape.backward(ad::scale(lp, -a * inv_n));
    slots[i] = zeros_like(params, mask);
    tape.accumulate_param_grads(slots[i]);
  });
  for (const auto& s : slots) {
    if (s.empty()) continue;
    for (std::size_t p = 0; p < grads.size(); ++p)
      if (mask[p]) grads[p] += s[p];
  }
  return grads;
}

StepMetrics rl_step(const std::vector<RlooBatch>& batches, ModelParams& params, Adam& adam,
                    const DecodeSettings& decode, int workers) {
  StepMetrics m;
  double n = 0, tokens = 0;
  for (const auto& b : batches) {
    for (std::size_t i = 0; i < b.rollouts.size(); ++i) {
      const Rollout& r = b.rollouts[i];
      if (r.params_version != params.version)
        throw StalenessError("rollout drawn from params version " + std::to_string(r.params_version) +
                             ", current version is " + std::to_string(params.version));
      m.mean_reward += b.rewards[i];
      m.accuracy += b.task_rewards[i];
      m.mean_kl += r.mean_kl();
      for (const auto& d : r.decisions) m.mean_exit_layer += d.exit_layer;
      tokens += static_cast<double>(r.decisions.size());
      n += 1;
    }
  }
  if (n > 0) {
    m.mean_reward /= n;
    m.accuracy /= n;
    m.mean_kl /= n;
  }
  if (tokens > 0) m.mean_exit_layer /= tokens;
  const ParamGrads grads = rl_gradient(batches, params, adam.trainable(), decode, workers);
  m.grad_norm = adam.step(params, grads);
  return m;
}

EvalResult evaluate(const ModelParams& policy, const ModelParams* base, const std::vector<TaskInstance>& prompts,
                    const EvalSettings& settings) {
  if (prompts.empty()) throw ConfigError("evaluation set is empty");
  const InferenceModel pm(policy);
  std::optional<InferenceModel> bm;
  if (base != nullptr) bm.emplace(*base);
  const int L = policy.config.n_layers;
  DecodeSettings decode;
  decode.temperature = 0.0;
  decode.max_new_tokens = settings.max_new_tokens;
  decode.offset = settings.offset;

  std::vector<Rollout> rolls(prompts.size());
  std::vector<int> correct(prompts.size());
  parallel_for(prompts.size(), settings.workers, [&](std::size_t i) {
    Rng rng(mix_seed(settings.seed, 0xE7A1, i));
    const auto prompt = CharTokenizer::encode(prompts[i].prompt);
    rolls[i] = std::move(rollout_group(pm, bm ? &*bm : nullptr, prompt, 1, decode, rng).front());
    correct[i] = verify(prompts[i].prompt + CharTokenizer::decode(rolls[i].completion), prompts[i]);
  });

  EvalResult e;
  std::vector<ExitRecord> records;
  RewardConfig reward = settings.reward;
  if (base == nullptr) reward.beta = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Rollout& r = rolls[i];
    e.accuracy += correct[i];
    e.mean_kl += r.mean_kl();
    if (!r.completion.empty()) e.mean_reward += total_reward(r, correct[i], reward, L);
    for (const auto& d : r.decisions) {
      records.push_back({CharTokenizer::token_text(d.token), d.exit_layer, d.position});
      e.exit_layers.push_back(d.exit_layer);
    }
  }
  const auto n = static_cast<double>(prompts.size());
  e.accuracy /= n;
  e.mean_kl /= n;
  e.mean_reward /= n;
  e.mean_tokens = static_cast<double>(records.size()) / n;
  if (!records.empty()) {
    e.avg_compute = avg_compute(records, L);
    e.exit_rate = exit_rate(records, L);
    e.als = als(records, L);
  }
  e.total_compute = e.mean_tokens * e.avg_compute;
  return e;
}

RlResult run_rl(const std::vector<TaskInstance>& train, const std::vector<TaskInstance>& eval,
                const ModelParams& calibrated, const RlSettings& settings,
                const std::function<void(const RlHistoryRow&)>& on_eval) {
  if (train.empty()) throw ConfigError("RL training set is empty");
  if (settings.k < 2) throw ConfigError("k must be at least 2");
  if (settings.prompts_per_step < 1 || settings.steps < 0 || settings.eval_every < 1)
    throw ConfigError("invalid RL step settings");

  RlResult res{calibrated, {}, {}};
  ModelParams& params = res.params;
  const InferenceModel base(calibrated);
  const auto mask = trainable_mask(params, {ParamGroup::ExitHead, ParamGroup::Adapter});
  Adam adam(params, settings.adam, mask);
  const int L = params.config.n_layers;

  std::vector<std::vector<int>> encoded;
  for (const auto& t : train) encoded.push_back(CharTokenizer::encode(t.prompt));

  EvalSettings es;
  es.offset = settings.decode.offset;
  es.max_new_tokens = settings.eval_max_new_tokens;
  es.seed = settings.seed;
  es.workers = settings.workers;
  es.reward = settings.reward;
  auto record_eval = [&](int step) {
    if (eval.empty()) return;
    const EvalResult e = evaluate(params, &calibrated, eval, es);
    RlHistoryRow row{step, e.mean_reward, e.accuracy, e.avg_compute, e.total_compute, e.exit_rate, e.mean_kl};
    res.history.push_back(row);
    if (on_eval) on_eval(row);
  };
  record_eval(0);

  const bool need_kl = settings.reward.beta > 0;
  for (int step = 1; step <= settings.steps; ++step) {
    Rng pick(mix_seed(settings.seed, 0x5EED, static_cast<std::uint64_t>(step)));
    std::uniform_int_distribution<std::size_t> which(0, train.size() - 1);
    std::vector<std::size_t> chosen(static_cast<std::size_t>(settings.prompts_per_step));
    for (auto& c : chosen) c = which(pick);

    const InferenceModel policy(params);
    std::vector<RlooBatch> batches(chosen.size());
    parallel_for(chosen.size(), settings.workers, [&](std::size_t b) {
      Rng rng(mix_seed(settings.seed, static_cast<std::uint64_t>(step), b + 1));
      const TaskInstance& inst = train[chosen[b]];
      RlooBatch& batch = batches[b];
      batch.rollouts =
          rollout_group(policy, need_kl ? &base : nullptr, encoded[chosen[b]], settings.k, settings.decode, rng);
      for (const auto& r : batch.rollouts)
        batch.task_rewards.push_back(verify(inst.prompt + CharTokenizer::decode(r.completion), inst));
      score_batch(batch, settings.reward, L);
    });
    res.steps.push_back(rl_step(batches, params, adam, settings.decode, settings.workers));

    if (settings.checkpoint_every > 0 && step % settings.checkpoint_every == 0) {
      std::filesystem::create_directories(settings.checkpoint_dir);
      save_checkpoint(settings.checkpoint_dir / ("rl_step" + std::to_string(step) + ".ckpt"), params);
    }
    if (step % settings.eval_every == 0 || step == settings.steps) record_eval(step);
  }
  return res;
}

}  // namespace exitlab
