#include "exitlab/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "exitlab/error.hpp"

namespace exitlab {

namespace {

int exit_index_of(const std::vector<int>& layers, int n_layers, int layer) {
  if (layer == n_layers) return static_cast<int>(layers.size());
  auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) throw ArgumentError("layer " + std::to_string(layer) + " is not an exit option");
  return static_cast<int>(it - layers.begin());
}

Matrix floored_log(const Matrix& p) { return p.cwiseMax(kProbFloor).array().log().matrix(); }

int sample_index(const Eigen::Ref<const Eigen::RowVectorXd>& probs, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  double u = uniform(rng);
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    u -= probs(k);
    if (u < 0) return static_cast<int>(k);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  // splitmix64 finalizer over a simple combination
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b * 0xBF58476D1CE4E5B9ULL + c * 0x94D049BB133111EBULL + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] <= 0.0) continue;
    d += p[v] * (std::log(std::max(p[v], kProbFloor)) - std::log(std::max(q[v], kProbFloor)));
  }
  return std::max(d, 0.0);
}

LayerKL layerwise_kl(const LayerTrace& trace) {
  const int T = trace.length();
  const auto K = static_cast<Eigen::Index>(trace.exit_layers.size());
  if (static_cast<Eigen::Index>(trace.lens_probs.size()) != K + 1)
    throw ValidationError("trace must carry one lens distribution per exitable layer plus the final layer");
  for (const auto& p : trace.lens_probs)
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      if (std::abs(p.row(i).sum() - 1.0) > 1e-6) throw ValidationError("lens distribution is not normalized");

  LayerKL kl;
  kl.values = Matrix::Zero(T, K + 1);
  const Matrix& fin = trace.final_probs();
  for (Eigen::Index k = 0; k < K; ++k) {
    const Matrix& pk = trace.lens_probs[static_cast<std::size_t>(k)];
    for (int i = 0; i < T; ++i) {
      const Eigen::RowVectorXd a = fin.row(i);
      const Eigen::RowVectorXd b = pk.row(i);
      kl.values(i, k) = kl_divergence({a.data(), static_cast<std::size_t>(a.size())},
                                      {b.data(), static_cast<std::size_t>(b.size())});
    }
  }
  return kl;
}

double survival_prob(double kl, double kl_factor) {
  if (kl_factor < 0) throw ConfigError("kl_factor must be non-negative");
  return 2.0 * (1.0 - sigmoid(kl_factor * kl));
}

Matrix survival_probs(const LayerKL& kl, double kl_factor) {
  if (kl_factor < 0) throw ConfigError("kl_factor must be non-negative");
  const Eigen::Index K = kl.n_exitable();
  Matrix s(kl.values.rows(), K);
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    for (Eigen::Index k = 0; k < K; ++k) s(i, k) = survival_prob(kl.values(i, k), kl_factor);
  return s;
}

TargetExitDistribution target_exit_distribution(const Matrix& survivals, double kl_factor) {
  if ((survivals.array() < 0.0).any() || (survivals.array() > 1.0).any() || survivals.hasNaN())
    throw ValidationError("survival probabilities must lie in [0, 1]");
  TargetExitDistribution t;
  t.survivals = survivals;
  t.kl_factor = kl_factor;
  t.probs.resize(survivals.rows(), survivals.cols() + 1);
  for (Eigen::Index i = 0; i < survivals.rows(); ++i) {
    const Eigen::RowVectorXd row = survivals.row(i);
    const auto p = stick_breaking({row.data(), static_cast<std::size_t>(row.size())});
    for (std::size_t k = 0; k < p.size(); ++k) t.probs(i, static_cast<Eigen::Index>(k)) = p[k];
  }
  return t;
}

std::vector<double> exit_distribution(const LayerTrace& trace, int position, double offset) {
  std::vector<double> s;
  for (Eigen::Index k = 0; k < trace.exit_logits.cols(); ++k)
    s.push_back(sigmoid(trace.exit_logits(position, k) + offset));
  return stick_breaking(s);
}

SftLossTerms sft_loss(const LayerTrace& student_trace, int position, std::span<const double> teacher_final,
                      int sampled_exit, std::span<const double> student_exit_probs) {
  const int k = exit_index_of(student_trace.exit_layers, student_trace.n_layers, sampled_exit);
  const Eigen::RowVectorXd ps = student_trace.lens_probs[static_cast<std::size_t>(k)].row(position);
  SftLossTerms terms;
  terms.token_kl = kl_divergence({ps.data(), static_cast<std::size_t>(ps.size())}, teacher_final);
  terms.exit_ce = -std::log(std::max(student_exit_probs[static_cast<std::size_t>(k)], kProbFloor));
  return terms;
}

TeacherTargets teacher_targets(const ModelParams& teacher, std::span<const int> tokens, double kl_factor) {
  const LayerTrace trace = forward_full(teacher, tokens);
  TeacherTargets t;
  t.log_probs = floored_log(trace.final_probs()).cast<float>();
  t.exit_probs = target_exit_distribution(survival_probs(layerwise_kl(trace), kl_factor), kl_factor).probs;
  return t;
}

SftGraph build_sft_loss(GraphBuilder& builder, std::span<const int> tokens, const Matrix& teacher_log_probs,
                        const std::vector<int>& exit_index, double weight) {
  const auto& config = builder.params().config;
  const auto exit_layers = config.exitable_layers();
  ForwardGraph g = builder.forward(tokens);

  std::vector<ad::Var> sources;
  for (int layer : exit_layers) sources.push_back(g.residuals[static_cast<std::size_t>(layer)]);
  sources.push_back(g.residuals.back());
  ad::Var logits = builder.lens_logits(ad::select_rows(sources, exit_index));

  const std::vector<double> weights(tokens.size(), weight);
  ad::Var token_kl = ad::kl_to_reference(logits, teacher_log_probs, weights);
  ad::Var exit_lp = ad::exit_logprob(builder.head_matrix(g), exit_index, 0.0, weights);

  SftGraph out;
  out.loss = ad::add(token_kl, ad::scale(exit_lp, -1.0));
  out.token_kl = token_kl.scalar();
  out.exit_ce = -exit_lp.scalar();
  return out;
}

CalibrationResult calibrate(const std::vector<std::vector<int>>& corpus, const ModelParams& teacher,
                            const CalibrationSettings& settings,
                            const std::function<void(const CalibrationEpoch&)>& on_epoch) {
  if (corpus.empty()) throw ConfigError("calibration corpus is empty");
  if (settings.kl_factor < 0) throw ConfigError("kl_factor must be non-negative");
  if (settings.batch_size < 1 || settings.epochs < 0) throw ConfigError("invalid calibration batch size or epochs");

  std::vector<TeacherTargets> targets(corpus.size());
  parallel_for(corpus.size(), settings.workers,
               [&](std::size_t i) { targets[i] = teacher_targets(teacher, corpus[i], settings.kl_factor); });

  CalibrationResult result{teacher, {}};
  ModelParams& student = result.params;
  const auto mask = trainable_mask(student, {ParamGroup::ExitHead, ParamGroup::Adapter});
  Adam adam(student, settings.adam, mask);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(mix_seed(settings.seed, 0xCA11B));

  for (int epoch = 1; epoch <= settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    CalibrationEpoch stats{epoch, 0.0, 0.0, 0.0};
    std::size_t epoch_tokens = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(settings.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(settings.batch_size));
      std::size_t batch_tokens = 0;
      for (std::size_t b = start; b < end; ++b) batch_tokens += corpus[order[b]].size();
      const double weight = 1.0 / static_cast<double>(batch_tokens);

      std::vector<ParamGrads> slot_grads(end - start);
      std::vector<SftGraph> slot_terms(end - start);
      parallel_for(end - start, settings.workers, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        const auto& tokens = corpus[idx];
        const TeacherTargets& tt = targets[idx];
        Rng rng(mix_seed(settings.seed, static_cast<std::uint64_t>(epoch), idx));
        std::vector<int> exit_index(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i)
          exit_index[i] = sample_index(tt.exit_probs.row(static_cast<Eigen::Index>(i)), rng);

        ad::Tape tape;
        GraphBuilder gb(tape, student, &mask);
        SftGraph sg = build_sft_loss(gb, tokens, tt.log_probs.cast<double>(), exit_index, weight);
        tape.backward(sg.loss);
        slot_grads[j] = zeros_like(student, mask);
        tape.accumulate_param_grads(slot_grads[j]);
        slot_terms[j] = sg;
      });

      ParamGrads grads = zeros_like(student, mask);
      for (std::size_t j = 0; j < slot_grads.size(); ++j) {
        for (std::size_t p = 0; p < grads.size(); ++p)
          if (mask[p]) grads[p] += slot_grads[j][p];
        stats.token_kl += slot_terms[j].token_kl * static_cast<double>(batch_tokens);
        stats.exit_ce += slot_terms[j].exit_ce * static_cast<double>(batch_tokens);
      }
      epoch_tokens += batch_tokens;
      adam.step(student, grads);
    }
    stats.token_kl /= static_cast<double>(epoch_tokens);
    stats.exit_ce /= static_cast<double>(epoch_tokens);
    stats.total = stats.token_kl + stats.exit_ce;
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

double ExitHistograms::total_variation() const {
  double tv = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) tv += std::abs(target[k] - learned[k]);
  return 0.5 * tv;
}

ExitHistograms compare_exit_histograms(const std::vector<std::vector<int>>& corpus, const ModelParams& teacher,
                                       const ModelParams& student, double kl_factor, std::uint64_t seed,
                                       int workers) {
  const auto& config = student.config;
  const auto exit_layers = config.exitable_layers();
  const std::size_t K1 = exit_layers.size() + 1;

  std::vector<std::vector<double>> target_sum(corpus.size(), std::vector<double>(K1, 0.0));
  std::vector<std::vector<double>> learned_count(corpus.size(), std::vector<double>(K1, 0.0));
  parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const TeacherTargets tt = teacher_targets(teacher, corpus[i], kl_factor);
    const LayerTrace st = forward_full(student, corpus[i]);
    Rng rng(mix_seed(seed, 0x415, i));
    for (int pos = 0; pos < st.length(); ++pos) {
      for (std::size_t k = 0; k < K1; ++k) target_sum[i][k] += tt.exit_probs(pos, static_cast<Eigen::Index>(k));
      const ExitDecision d = sample_exit(st, pos, 0.0, rng);
      learned_count[i][static_cast<std::size_t>(exit_index_of(exit_layers, config.n_layers, d.exit_layer))] += 1.0;
    }
  });

  ExitHistograms h;
  h.layers = exit_layers;
  h.layers.push_back(config.n_layers);
  h.target.assign(K1, 0.0);
  h.learned.assign(K1, 0.0);
  double tokens = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    tokens += static_cast<double>(corpus[i].size());
    for (std::size_t k = 0; k < K1; ++k) {
      h.target[k] += target_sum[i][k];
      h.learned[k] += learned_count[i][k];
    }
  }
  for (std::size_t k = 0; k < K1; ++k) {
    h.target[k] /= tokens;
    h.learned[k] /= tokens;
  }
  return h;
}

}  // namespace exitlab
