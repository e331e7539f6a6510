#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <numeric>
#include <algorithm>

#include "doctest.h"
#include "scriptgen/training.hpp"
#include "synthetic.hpp"

using namespace scriptgen;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.d_model = 8;
  c.model.n_heads = 2;
  c.model.n_enc_layers = 1;
  c.model.n_dec_layers = 1;
  c.model.ffn_dim = 16;
  c.batch_size = 4;
  c.max_epochs = 2;
  c.lr_peak = 1e-3;
  c.warmup_steps = 2;
  c.restart_period = 10;
  c.k_retrieved = 3;
  c.n_self = 2;
  c.n_retrieved = 1;
  c.negative_pool = 5;
  c.seed = 5;
  return c;
}

struct Fixture {
  testing::SyntheticSplits splits = testing::synthetic_splits({12, 4, 5, 3});
  Tokenizer tok = build_vocab(splits.train);
  EmbeddingIndex index = EmbeddingIndex::build(splits.train);
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("learning-rate schedule endpoints") {
  TrainConfig c;
  c.lr_peak = 1e-3;
  c.lr_min = 0.0;
  c.warmup_steps = 100;
  c.restart_period = 1000;
  CHECK(lr_schedule(c, 0) == 0.0);
  CHECK(lr_schedule(c, 50) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_schedule(c, 100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_schedule(c, 600) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_schedule(c, 1099) < 1e-8);
  CHECK(lr_schedule(c, 1100) == doctest::Approx(1e-3).epsilon(1e-12));
  c.lr_min = 1e-4;
  CHECK(lr_schedule(c, 600) == doctest::Approx(5.5e-4).epsilon(1e-12));
  c.restart_mult = 2;
  CHECK(lr_schedule(c, 1100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_schedule(c, 2100) == doctest::Approx(5.5e-4).epsilon(1e-12));
  CHECK(lr_schedule(c, 3100) == doctest::Approx(1e-3).epsilon(1e-12));
  c.warmup_steps = 0;
  CHECK(lr_schedule(c, 0) == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("AdamW single step closed form") {
  autograd::ParameterSet p;
  p.add("w", Matrix::Constant(1, 2, 2.0));
  AdamState state;
  AdamHyper h;
  h.weight_decay = 0.1;
  Matrix g(1, 2);
  g << 0.5, -3.0;
  adamw_step(state, p, {g}, 0.01, h);
  // first step: m_hat = g, v_hat = g^2
  for (int j = 0; j < 2; ++j) {
    const double expected = 2.0 * (1 - 0.01 * 0.1) - 0.01 * g(0, j) / (std::abs(g(0, j)) + h.eps);
    CHECK(p.value(0)(0, j) == doctest::Approx(expected).epsilon(1e-14));
  }
  CHECK(state.step == 1);

  SUBCASE("second step follows the recurrences") {
    Matrix g2(1, 2);
    g2 << 1.0, 1.0;
    const Matrix before = p.value(0);
    adamw_step(state, p, {g2}, 0.01, h);
    for (int j = 0; j < 2; ++j) {
      const double m = 0.9 * 0.1 * g(0, j) + 0.1 * g2(0, j);
      const double v = 0.999 * 0.001 * g(0, j) * g(0, j) + 0.001 * g2(0, j) * g2(0, j);
      const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
      const double expected = before(0, j) * (1 - 0.001) - 0.01 * mh / (std::sqrt(vh) + h.eps);
      CHECK(p.value(0)(0, j) == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("AdamW zero gradient and decay") {
  autograd::ParameterSet p;
  p.add("w", Matrix::Constant(2, 2, 3.0));
  AdamState state;
  AdamHyper h;
  h.weight_decay = 0.0;
  adamw_step(state, p, {Matrix::Zero(2, 2)}, 0.1, h);
  CHECK(p.value(0).isApproxToConstant(3.0));
  h.weight_decay = 0.5;
  adamw_step(state, p, {Matrix::Zero(2, 2)}, 0.1, h);
  CHECK(p.value(0)(0, 0) == doctest::Approx(3.0 * 0.95).epsilon(1e-15));
  adamw_step(state, p, {Matrix::Zero(2, 2)}, 0.0, h);
  CHECK(p.value(0)(0, 0) == doctest::Approx(3.0 * 0.95).epsilon(1e-15));
}

TEST_CASE("AdamW rejects non-finite gradients") {
  autograd::ParameterSet p;
  p.add("enc.w", Matrix::Ones(1, 1));
  p.add("dec.w", Matrix::Ones(1, 1));
  AdamState state;
  Matrix bad(1, 1);
  bad(0, 0) = std::nan("");
  try {
    adamw_step(state, p, {Matrix::Zero(1, 1), bad}, 0.1, {});
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("dec.w") != std::string::npos);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  CHECK(p.value(0)(0, 0) == 1.0);
  bad(0, 0) = INFINITY;
  CHECK_THROWS_AS(adamw_step(state, p, {bad, Matrix::Zero(1, 1)}, 0.1, {}), NonFiniteError);
}

TEST_CASE("config parsing") {
  const auto c = parse_train_config(R"({"lr_peak": 0.002, "d_model": 16, "n_heads": 4, "lambda": 0.0, "seed": 9})");
  CHECK(c.lr_peak == 0.002);
  CHECK(c.model.d_model == 16);
  CHECK(c.model.n_heads == 4);
  CHECK(c.lambda == 0.0);
  CHECK(c.seed == 9);
  CHECK(c.batch_size == 16);
  CHECK_THROWS(parse_train_config(R"({"learning_rate": 0.1})"));
  CHECK_THROWS(parse_train_config(R"({"tau": 0})"));
  CHECK_THROWS(parse_train_config(R"({"d_model": 10, "n_heads": 4})"));
  const auto round = parse_train_config(to_json(c));
  CHECK(to_json(round) == to_json(c));
}

TEST_CASE("each epoch visits every example once") {
  Fixture f;
  Trainer t(tiny_config(), f.tok, &f.index, build_examples(f.splits.train), {});
  for (std::size_t e = 0; e < 3; ++e) {
    auto order = t.epoch_order(e);
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);
  }
  CHECK(t.epoch_order(0) != t.epoch_order(1));
  CHECK(t.epoch_order(1) == t.epoch_order(1));
}

TEST_CASE("zero learning rate and zero decay leave the loss unchanged") {
  Fixture f;
  auto c = tiny_config();
  c.lr_peak = 0.0;
  Trainer t(c, f.tok, &f.index, build_examples(f.splits.train), {});
  std::vector<Matrix> grads;
  std::vector<std::size_t> all(t.train_examples().size());
  std::iota(all.begin(), all.end(), 0);
  const double before = t.batch_gradients(all, 0, grads);
  t.run_epoch();
  const double after = t.batch_gradients(all, 0, grads);
  CHECK(after == before);
}

TEST_CASE("lambda 0 gives the contrastive head no gradient") {
  Fixture f;
  auto c = tiny_config();
  c.lambda = 0.0;
  Trainer t(c, f.tok, &f.index, build_examples(f.splits.train), {});
  std::vector<Matrix> grads;
  t.batch_gradients({0, 1, 2, 3}, 0, grads);
  const auto& layout = t.model().layout();
  CHECK(grads[layout.w_y].isZero(0.0));
  CHECK(grads[layout.b_y].isZero(0.0));
  CHECK(grads[layout.token_embedding].norm() > 0.0);

  c.lambda = 0.5;
  Trainer u(c, f.tok, &f.index, build_examples(f.splits.train), {});
  u.batch_gradients({0, 1, 2, 3}, 0, grads);
  CHECK(grads[layout.w_y].norm() > 0.0);
}

TEST_CASE("training loop writes a deterministic log and stops on patience") {
  Fixture f;
  auto c = tiny_config();
  c.lr_peak = 0.0;
  c.max_epochs = 6;
  c.patience = 2;
  c.max_valid_examples = 4;
  const auto dir = std::filesystem::temp_directory_path() / "scriptgen_train_test";
  std::filesystem::remove_all(dir);
  TrainInputs in{&f.splits.train, &f.splits.valid, &f.tok, &f.index, c};
  const auto r = train(in, (dir / "a").string());
  // epoch 1 sets the best; a frozen model cannot improve after that
  CHECK(r.epochs_run == 3);
  CHECK(r.stopped_early);
  CHECK(std::filesystem::exists(r.checkpoint_path));
  const auto log = slurp(r.log_path);
  CHECK(log.rfind("epoch\tL_gen\tL_cl\tL\tval_bleu4\tval_rougeL\tlr\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 4);

  c.lr_peak = 1e-3;
  c.max_epochs = 2;
  in.config = c;
  const auto b1 = train(in, (dir / "b1").string());
  const auto b2 = train(in, (dir / "b2").string());
  CHECK(slurp(b1.log_path) == slurp(b2.log_path));
  CHECK(slurp(b1.checkpoint_path) == slurp(b2.checkpoint_path));

  in.index = nullptr;
  CHECK_THROWS(train(in, (dir / "c").string()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("log row format") {
  EpochStats s{1.5, std::nan(""), 1.5, 2.5e-4};
  const auto row = format_log_row(3, s, {0.25, 0.5});
  CHECK(row.substr(0, 2) == "3\t");
  CHECK(row.find("\tnan\t") != std::string::npos);
  CHECK(row.find("1.500000") != std::string::npos);
}
