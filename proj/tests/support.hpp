#pragma once

// Test-only oracles. Nothing here calls into the tape or the decode session:
// the reference forward below is a direct per-position transcription of the
// transformer so it can check both implementations independently.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "exitlab/params.hpp"

namespace exitlab::testing {

inline ModelConfig tiny_config(int n_layers = 4, int d_model = 16, int n_heads = 2, int stride = 1, int rank = 2) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.vocab_size = 13;
  c.max_seq_len = 12;
  c.exit_stride = stride;
  c.lora_rank = rank;
  return c;
}

inline std::vector<double> ref_softmax(const std::vector<double>& z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

inline std::vector<double> ref_rms(const std::vector<double>& x, const Matrix& gain) {
  double ss = 0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-5);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gain(0, static_cast<Eigen::Index>(i));
  return y;
}

// x (1 x in) times W (in x out), plus the adapter product when present.
inline std::vector<double> ref_linear(const ModelParams& p, const std::vector<double>& x, int block, Proj proj) {
  const auto q = static_cast<std::size_t>(proj);
  const Matrix& w = p[p.blocks[static_cast<std::size_t>(block)].proj[q]];
  std::vector<double> y(static_cast<std::size_t>(w.cols()), 0.0);
  for (Eigen::Index o = 0; o < w.cols(); ++o)
    for (Eigen::Index i = 0; i < w.rows(); ++i) y[static_cast<std::size_t>(o)] += x[static_cast<std::size_t>(i)] * w(i, o);
  const auto& ad = p.adapters[static_cast<std::size_t>(block)][q];
  if (ad.present()) {
    const Matrix& a = p[ad.a];
    const Matrix& b = p[ad.b];
    std::vector<double> mid(static_cast<std::size_t>(a.cols()), 0.0);
    for (Eigen::Index r = 0; r < a.cols(); ++r)
      for (Eigen::Index i = 0; i < a.rows(); ++i) mid[static_cast<std::size_t>(r)] += x[static_cast<std::size_t>(i)] * a(i, r);
    for (Eigen::Index o = 0; o < b.cols(); ++o)
      for (Eigen::Index r = 0; r < b.rows(); ++r) y[static_cast<std::size_t>(o)] += mid[static_cast<std::size_t>(r)] * b(r, o);
  }
  return y;
}

struct RefOutput {
  std::vector<std::vector<std::vector<double>>> hidden;  // [layer][pos][d]
  std::vector<std::vector<double>> probs;                // [pos][V], from the final residual
};

// Plain pre-norm transformer. When `exits` is non-empty, position i's residual
// is overwritten with a copy of h_{exits[i]} after every deeper block, which is
// the frozen-stream semantics stated as a data copy.
inline RefOutput reference_forward(const ModelParams& p, const std::vector<int>& tokens,
                                   const std::vector<int>& exits = {}) {
  const auto& c = p.config;
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  const int hd = c.head_dim();
  RefOutput out;
  std::vector<std::vector<double>> h(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j)
      h[t][j] = p[p.tok_emb](tokens[t], static_cast<Eigen::Index>(j)) + p[p.pos_emb](static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
  out.hidden.push_back(h);

  auto gelu = [](double x) { return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); };
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& b = p.blocks[static_cast<std::size_t>(l)];
    std::vector<std::vector<double>> q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      auto a = ref_rms(h[t], p[b.attn_norm]);
      q[t] = ref_linear(p, a, l, Proj::Q);
      k[t] = ref_linear(p, a, l, Proj::K);
      v[t] = ref_linear(p, a, l, Proj::V);
    }
    std::vector<std::vector<double>> next = h;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> att(d, 0.0);
      for (int head = 0; head < c.n_heads; ++head) {
        std::vector<double> s(t + 1);
        for (std::size_t j = 0; j <= t; ++j) {
          double dot = 0;
          for (int e = 0; e < hd; ++e) dot += q[t][static_cast<std::size_t>(head * hd + e)] * k[j][static_cast<std::size_t>(head * hd + e)];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
        }
        auto pr = ref_softmax(s);
        for (std::size_t j = 0; j <= t; ++j)
          for (int e = 0; e < hd; ++e) att[static_cast<std::size_t>(head * hd + e)] += pr[j] * v[j][static_cast<std::size_t>(head * hd + e)];
      }
      auto o = ref_linear(p, att, l, Proj::O);
      for (std::size_t j = 0; j < d; ++j) next[t][j] += o[j];
      auto m = ref_rms(next[t], p[b.mlp_norm]);
      auto up = ref_linear(p, m, l, Proj::Up);
      for (double& x : up) x = gelu(x);
      auto down = ref_linear(p, up, l, Proj::Down);
      for (std::size_t j = 0; j < d; ++j) next[t][j] += down[j];
    }
    if (!exits.empty())
      for (std::size_t t = 0; t < T; ++t)
        if (exits[t] <= l) next[t] = out.hidden[static_cast<std::size_t>(exits[t])][t];
    h = next;
    out.hidden.push_back(h);
  }
  for (std::size_t t = 0; t < T; ++t) {
    auto n = ref_rms(h[t], p[p.final_norm]);
    std::vector<double> z(static_cast<std::size_t>(c.vocab_size), 0.0);
    for (std::size_t vv = 0; vv < z.size(); ++vv)
      for (std::size_t j = 0; j < d; ++j) z[vv] += n[j] * p[p.unembed](static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(vv));
    out.probs.push_back(ref_softmax(z));
  }
  return out;
}

// Central finite differences over up to `max_entries` randomly chosen entries of
// tensor `index`; returns (analytic, numeric) pairs.
struct GradSample {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double relative_error() const {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double scale = std::max(std::sqrt(na), std::sqrt(nn));
    return scale < 1e-10 ? 0.0 : std::sqrt(diff) / scale;
  }
};

inline GradSample finite_difference(ModelParams& params, int index, const Matrix& analytic,
                                    const std::function<double(const ModelParams&)>& loss, int max_entries,
                                    std::mt19937_64& rng, double step = 1e-4) {
  Matrix& m = params.tensors[static_cast<std::size_t>(index)];
  std::vector<Eigen::Index> entries;
  if (m.size() <= max_entries) {
    for (Eigen::Index i = 0; i < m.size(); ++i) entries.push_back(i);
  } else {
    std::uniform_int_distribution<Eigen::Index> pick(0, m.size() - 1);
    for (int i = 0; i < max_entries; ++i) entries.push_back(pick(rng));
  }
  GradSample s;
  for (Eigen::Index e : entries) {
    const double orig = m.data()[e];
    m.data()[e] = orig + step;
    const double up = loss(params);
    m.data()[e] = orig - step;
    const double down = loss(params);
    m.data()[e] = orig;
    s.numeric.push_back((up - down) / (2 * step));
    s.analytic.push_back(analytic.size() == 0 ? 0.0 : analytic.data()[e]);
  }
  return s;
}

}  // namespace exitlab::testing
