#include <doctest.h>

#include <random>

#include "exitlab/calibration.hpp"
#include "exitlab/model.hpp"
#include "support.hpp"

using namespace exitlab;

namespace {

using LossFn = std::function<ad::Var(GraphBuilder&)>;

double loss_value(const ModelParams& p, const LossFn& fn) {
  ad::Tape tape;
  GraphBuilder gb(tape, p);
  return fn(gb).scalar();
}

void check_all_gradients(ModelParams p, const LossFn& fn, double tol = 1e-4) {
  ad::Tape tape;
  const std::vector<bool> all(p.size(), true);
  GraphBuilder gb(tape, p, &all);
  tape.backward(fn(gb));
  ParamGrads grads = zeros_like(p);
  tape.accumulate_param_grads(grads);

  std::mt19937_64 rng(3);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto s = testing::finite_difference(
        p, static_cast<int>(i), grads[i], [&](const ModelParams& q) { return loss_value(q, fn); }, 12, rng);
    INFO(p.names[i]);
    CHECK(s.relative_error() < tol);
  }
}

ModelParams model(std::uint64_t seed) {
  auto c = testing::tiny_config(6, 8, 2, 2, 2);
  c.lora_targets = LoraTargets::All;
  ModelParams p = init_model(c, seed);
  randomize_all(p, seed + 1, 0.4);
  return p;
}

const std::vector<int> kTokens = {3, 7, 1, 12, 5};

}  // namespace

TEST_CASE("gradient of next-token cross-entropy under frozen exits matches finite differences") {
  const std::vector<int> exits = {6, 2, 4, 6, 2};
  check_all_gradients(model(1), [&](GraphBuilder& gb) {
    auto g = gb.forward(kTokens, exits);
    return ad::scale(ad::token_logprob(g.logits, {7, 1, 12, 5, 0}, {1, 0.5, 1, 2, 1}, 0.8), -1.0);
  });
}

TEST_CASE("gradient of the distillation loss matches finite differences") {
  const ModelParams teacher = model(9);
  const Matrix teacher_lp = teacher_targets(teacher, kTokens, 1.0).log_probs.cast<double>();
  const std::vector<int> exit_index = {0, 2, 1, 2, 0};
  check_all_gradients(model(2), [&](GraphBuilder& gb) {
    return build_sft_loss(gb, kTokens, teacher_lp, exit_index, 0.2).loss;
  });
}

TEST_CASE("gradient of the stick-breaking exit log-probability with an offset matches finite differences") {
  check_all_gradients(model(4), [&](GraphBuilder& gb) {
    auto g = gb.forward(kTokens, std::vector<int>{2, 6, 4, 2, 6});
    return ad::exit_logprob(gb.head_matrix(g), {0, 2, 1, 0, 2}, 0.7, {1, 1, 1, 1, 1});
  });
}

TEST_CASE("each op in isolation") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  auto rnd = [&](int r, int c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
  };
  // Treat a small set of matrices as "parameters" so the finite-difference helper applies.
  ModelParams p;
  p.tensors = {rnd(4, 6), rnd(6, 6), rnd(1, 6), rnd(4, 6)};
  p.names = {"x", "w", "g", "r"};
  p.groups.assign(4, ParamGroup::Base);

  auto leaves = [&](ad::Tape& t, const ModelParams& q) {
    std::vector<ad::Var> v;
    for (std::size_t i = 0; i < q.size(); ++i) v.push_back(t.parameter(static_cast<int>(i), q.tensors[i], true));
    return v;
  };
  auto run = [&](const std::function<ad::Var(std::vector<ad::Var>&)>& f) {
    auto value = [&](const ModelParams& q) {
      ad::Tape t;
      auto v = leaves(t, q);
      return f(v).scalar();
    };
    ad::Tape t;
    auto v = leaves(t, p);
    t.backward(f(v));
    ParamGrads grads = zeros_like(p);
    t.accumulate_param_grads(grads);
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto s = testing::finite_difference(p, static_cast<int>(i), grads[i], value, 30, rng, 1e-5);
      CHECK(s.relative_error() < 1e-6);
    }
  };
  const std::vector<int> targets = {1, 0, 5, 3};
  auto reduce = [&](ad::Var x) { return ad::token_logprob(x, targets, {1, 1, 1, 1}); };

  SUBCASE("matmul, add, add_row, scale") {
    run([&](auto& v) { return reduce(ad::scale(ad::add_row(ad::add(ad::matmul(v[0], v[1]), v[3]), v[2]), 1.3)); });
  }
  SUBCASE("rms_norm and gelu") { run([&](auto& v) { return reduce(ad::gelu(ad::rms_norm(v[0], v[2]))); }); }
  SUBCASE("causal attention") {
    run([&](auto& v) { return reduce(ad::causal_attention(v[0], ad::matmul(v[3], v[1]), v[3], 2)); });
  }
  SUBCASE("row selection, masking, concatenation") {
    run([&](auto& v) {
      auto s = ad::select_rows({v[0], v[3]}, {1, 0, 0, 1});
      auto m = ad::mask_rows(s, {1, 0, 0.5, 1});
      auto h = ad::hcat({ad::leading_rows(ad::gather_rows(v[1], {2, 2, 0, 5}), 4), m});
      return ad::token_logprob(h, {7, 2, 11, 0}, {1, 2, 1, 1});
    });
  }
  SUBCASE("kl_to_reference") {
    Matrix ref = rnd(4, 6);
    for (Eigen::Index i = 0; i < 4; ++i) {
      const double lse = std::log(ref.row(i).array().exp().sum());
      ref.row(i).array() -= lse;
    }
    run([&](auto& v) { return ad::kl_to_reference(ad::matmul(v[0], v[1]), ref, {1, 0.3, 1, 2}); });
  }
}
