#include <doctest.h>

#include "exitlab/error.hpp"
#include "exitlab/pipeline.hpp"

using namespace exitlab;

namespace {

RunConfig tiny_run() {
  RunConfig c = parse_config(R"(
[model]
n_layers = 4
d_model = 16
n_heads = 2
max_seq_len = 24
exit_stride = 1
lora_rank = 2

[task]
operand_max = 30
n_train = 40
n_eval = 8

[pretrain]
epochs = 2
batch_size = 8

[calibrate]
epochs = 2
batch_size = 8
)");
  finalize_config(c);
  return c;
}

}  // namespace

TEST_CASE("config defaults and parsing") {
  const RunConfig d = parse_config("");
  CHECK(d.model.n_layers == 8);
  CHECK(d.calibrate.kl_factor == 1.0);
  CHECK(d.rl.reward.lambda == 1.5);
  CHECK(d.rl.reward.beta == 0.25);
  CHECK(d.rl.k == 8);
  CHECK(d.rl.decode.temperature == 1.0);
  CHECK(d.rl.decode.max_new_tokens == 128);
  CHECK(d.rl.reward.depth_normalized);
  CHECK(d.offset == 0.0);
  CHECK(d.task.n_eval == 60);

  const RunConfig c = parse_config("# comment\n[rl]\nlambda = 0.5 ; trailing\nk=4\n[run]\nseed = 17\noffset = -inf\n"
                                   "[sweep]\nkl_factors = 1, 2,3.5\n");
  CHECK(c.rl.reward.lambda == 0.5);
  CHECK(c.rl.k == 4);
  CHECK(c.seed == 17);
  CHECK(std::isinf(c.offset));
  CHECK(c.sweep_factors == std::vector<double>{1, 2, 3.5});

  CHECK_THROWS_AS(parse_config("[rl]\nlamda = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[nope]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("lambda = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[rl]\nk = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[rl]\nk = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[rl]\nbeta = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[model]\nn_heads = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("[run]\ncolor = maybe\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/exitlab.ini"), IoError);
}

TEST_CASE("formatted config parses back to the same values") {
  RunConfig c = parse_config("[rl]\nlambda = 0.3\nsteps = 12\n[task]\nfamily = belief\n[model]\nlora_targets = all\n");
  c.calibrate.adam.lr = 0.1 + 0.2;
  const RunConfig back = parse_config(format_config(c));
  CHECK(format_config(back) == format_config(c));
  CHECK(back.calibrate.adam.lr == c.calibrate.adam.lr);
  CHECK(back.task.family == TaskFamily::BeliefTracking);
  CHECK(back.model.lora_targets == LoraTargets::All);
}

TEST_CASE("task data") {
  const RunConfig c = tiny_run();
  const TaskData a = make_task_data(c);
  const TaskData b = make_task_data(c);
  CHECK(a.train.size() == 40);
  CHECK(a.eval.size() == 8);
  CHECK(a.corpus == b.corpus);
  CHECK(CharTokenizer::decode(a.corpus[0]) == a.train[0].full_text());

  for (const auto& e : a.eval)
    for (const auto& t : a.train) CHECK(e.prompt != t.prompt);

  RunConfig small = c;
  small.model.max_seq_len = 8;
  CHECK_THROWS_AS(make_task_data(small), ConfigError);

  RunConfig crowded = c;
  crowded.task.operand_max = 2;
  CHECK_THROWS_AS(make_task_data(crowded), ConfigError);
}

TEST_CASE("pretraining") {
  const RunConfig c = tiny_run();
  const TaskData data = make_task_data(c);
  const ModelParams init = init_model(c.model, c.seed);

  SUBCASE("zero epochs returns the initialization") {
    PretrainSettings s = c.pretrain;
    s.epochs = 0;
    const auto r = pretrain(init, data, s, c.seed, 1, 4);
    for (std::size_t i = 0; i < init.size(); ++i) CHECK(r.params.tensors[i] == init.tensors[i]);
    CHECK(r.history.empty());
  }
  SUBCASE("seeded reruns give identical losses and the loss falls") {
    PretrainSettings s = c.pretrain;
    s.epochs = 4;
    s.target_accuracy = 2.0;
    const auto r1 = pretrain(init, data, s, c.seed, 1, 4);
    const auto r2 = pretrain(init, data, s, c.seed, 2, 4);
    REQUIRE(r1.history.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r1.history[i].loss == r2.history[i].loss);
    CHECK(r1.history.back().loss < r1.history.front().loss);
    for (std::size_t i = 0; i < init.size(); ++i)
      if (init.groups[i] != ParamGroup::Base) CHECK(r1.params.tensors[i] == init.tensors[i]);
  }
}

TEST_CASE("sweep needs factors") {
  RunConfig c = tiny_run();
  c.sweep_factors.clear();
  const TaskData data = make_task_data(c);
  CHECK_THROWS_AS(kl_sweep(init_model(c.model, 0), data, c), ConfigError);
}
