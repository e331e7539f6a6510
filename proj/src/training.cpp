#include "scriptgen/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "scriptgen/inference.hpp"
#include "scriptgen/metrics.hpp"

namespace scriptgen {

namespace {

using Json = nlohmann::ordered_json;

constexpr double kPi = 3.14159265358979323846;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

template <typename T>
void read_field(const Json& j, const char* key, T& field) {
  if (auto it = j.find(key); it != j.end()) field = it->get<T>();
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  if (!(lr_peak >= 0.0)) throw std::invalid_argument("lr_peak must be non-negative");
  positive(adam_eps, "adam_eps");
  positive(tau, "tau");
  if (lr_min < 0.0 || lr_min > lr_peak) throw std::invalid_argument("lr_min must lie in [0, lr_peak]");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  if (restart_period == 0 || restart_mult == 0) throw std::invalid_argument("restart_period and restart_mult must be positive");
  if (batch_size == 0 || max_epochs == 0 || patience == 0) {
    throw std::invalid_argument("batch_size, max_epochs and patience must be positive");
  }
  if (max_history == 0 || max_segment_tokens == 0 || max_target_tokens == 0) {
    throw std::invalid_argument("history and truncation limits must be positive");
  }
  ModelConfig shape = model;
  shape.vocab_size = std::max(shape.vocab_size, static_cast<int>(Tokenizer::kSpecialCount) + 1);
  shape.validate();
}

TrainConfig parse_train_config(const std::string& json_text) {
  static const std::vector<std::string> kKeys = {
      "lr_peak",        "lr_min",         "adam_beta1",      "adam_beta2",        "adam_eps",
      "weight_decay",   "warmup_steps",   "restart_period",  "restart_mult",      "batch_size",
      "max_epochs",     "patience",       "max_valid_examples", "lambda",           "tau",
      "n_self",         "n_retrieved",    "negative_pool",   "k_retrieved",       "exclude_own_task",
      "max_history",    "max_segment_tokens", "max_target_tokens", "min_freq",      "d_model",
      "n_heads",        "n_enc_layers",   "n_dec_layers",    "ffn_dim",           "max_positions",
      "dropout_rate",   "fuse_every_layer", "seed"};
  const Json j = Json::parse(json_text);
  if (!j.is_object()) throw std::invalid_argument("training config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw std::invalid_argument("unknown training config key: " + key);
    }
  }
  TrainConfig c;
  read_field(j, "lr_peak", c.lr_peak);
  read_field(j, "lr_min", c.lr_min);
  read_field(j, "adam_beta1", c.adam_beta1);
  read_field(j, "adam_beta2", c.adam_beta2);
  read_field(j, "adam_eps", c.adam_eps);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "warmup_steps", c.warmup_steps);
  read_field(j, "restart_period", c.restart_period);
  read_field(j, "restart_mult", c.restart_mult);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "max_epochs", c.max_epochs);
  read_field(j, "patience", c.patience);
  read_field(j, "max_valid_examples", c.max_valid_examples);
  read_field(j, "lambda", c.lambda);
  read_field(j, "tau", c.tau);
  read_field(j, "n_self", c.n_self);
  read_field(j, "n_retrieved", c.n_retrieved);
  read_field(j, "negative_pool", c.negative_pool);
  read_field(j, "k_retrieved", c.k_retrieved);
  read_field(j, "exclude_own_task", c.exclude_own_task);
  read_field(j, "max_history", c.max_history);
  read_field(j, "max_segment_tokens", c.max_segment_tokens);
  read_field(j, "max_target_tokens", c.max_target_tokens);
  read_field(j, "min_freq", c.min_freq);
  read_field(j, "d_model", c.model.d_model);
  read_field(j, "n_heads", c.model.n_heads);
  read_field(j, "n_enc_layers", c.model.n_enc_layers);
  read_field(j, "n_dec_layers", c.model.n_dec_layers);
  read_field(j, "ffn_dim", c.model.ffn_dim);
  read_field(j, "max_positions", c.model.max_positions);
  read_field(j, "dropout_rate", c.model.dropout_rate);
  read_field(j, "fuse_every_layer", c.model.fuse_every_layer);
  read_field(j, "seed", c.seed);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open training config: " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_train_config(buffer.str());
}

std::string to_json(const TrainConfig& c) {
  Json j;
  j["lr_peak"] = c.lr_peak;
  j["lr_min"] = c.lr_min;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["warmup_steps"] = c.warmup_steps;
  j["restart_period"] = c.restart_period;
  j["restart_mult"] = c.restart_mult;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["max_valid_examples"] = c.max_valid_examples;
  j["lambda"] = c.lambda;
  j["tau"] = c.tau;
  j["n_self"] = c.n_self;
  j["n_retrieved"] = c.n_retrieved;
  j["negative_pool"] = c.negative_pool;
  j["k_retrieved"] = c.k_retrieved;
  j["exclude_own_task"] = c.exclude_own_task;
  j["max_history"] = c.max_history;
  j["max_segment_tokens"] = c.max_segment_tokens;
  j["max_target_tokens"] = c.max_target_tokens;
  j["min_freq"] = c.min_freq;
  j["d_model"] = c.model.d_model;
  j["n_heads"] = c.model.n_heads;
  j["n_enc_layers"] = c.model.n_enc_layers;
  j["n_dec_layers"] = c.model.n_dec_layers;
  j["ffn_dim"] = c.model.ffn_dim;
  j["max_positions"] = c.model.max_positions;
  j["dropout_rate"] = c.model.dropout_rate;
  j["fuse_every_layer"] = c.model.fuse_every_layer;
  j["seed"] = c.seed;
  return j.dump(2);
}

double lr_schedule(const TrainConfig& config, std::uint64_t step) {
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return config.lr_peak * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  std::uint64_t t = step - config.warmup_steps;
  std::uint64_t period = config.restart_period;
  if (config.restart_mult == 1) {
    t %= period;
  } else {
    while (t >= period) {
      t -= period;
      period *= config.restart_mult;
    }
  }
  const double progress = static_cast<double>(t) / static_cast<double>(period);
  return config.lr_min + 0.5 * (config.lr_peak - config.lr_min) * (1.0 + std::cos(kPi * progress));
}

void adamw_step(AdamState& state, autograd::ParameterSet& params, const std::vector<Matrix>& grads, double lr,
                const AdamHyper& hyper) {
  if (grads.size() != params.size()) throw std::invalid_argument("gradient count does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].rows() != params.value(i).rows() || grads[i].cols() != params.value(i).cols()) {
      throw std::invalid_argument("gradient shape mismatch for " + params.name(i));
    }
    if (!grads[i].allFinite()) {
      throw NonFiniteError("non-finite gradient in parameter " + params.name(i) + " at step " +
                           std::to_string(state.step + 1));
    }
  }
  if (state.first.empty()) {
    state.first = params.zeros_like();
    state.second = params.zeros_like();
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Matrix& theta = params.value(i);
    Matrix& m = state.first[i];
    Matrix& v = state.second[i];
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * grads[i];
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * grads[i].cwiseProduct(grads[i]);
    theta *= 1.0 - lr * hyper.weight_decay;
    theta.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + hyper.eps);
  }
}

RetrievedSet retrieve_for_example(const EmbeddingIndex* index, const TrainingExample& example, std::size_t k,
                                  bool exclude_own_task) {
  if (k == 0 || !index || example.history.empty()) return {};
  RetrievalOptions options;
  options.k = k;
  if (exclude_own_task) options.exclude_task = example.task_id;
  return retrieve_next_steps(*index, example.history.back().first, options);
}

Trainer::Trainer(const TrainConfig& config, const Tokenizer& tokenizer, const EmbeddingIndex* index,
                 std::vector<TrainingExample> train, std::vector<TrainingExample> valid)
    : config_(config),
      tokenizer_(tokenizer),
      index_(index),
      train_(std::move(train)),
      valid_(std::move(valid)),
      model_([&] {
        ModelConfig mc = config.model;
        mc.vocab_size = static_cast<int>(tokenizer.size());
        return mc;
      }(), mix(config.seed, 0x6d6f64656cull)) {
  config_.validate();
  if (train_.empty()) throw std::invalid_argument("training set is empty");
  if (config_.k_retrieved > 0 && !index_) throw std::invalid_argument("retrieval requires an index");
  if (config_.max_valid_examples > 0 && valid_.size() > config_.max_valid_examples) {
    valid_.resize(config_.max_valid_examples);
  }
  for (const auto& ex : train_) {
    train_retrieved_.push_back(retrieve_for_example(index_, ex, config_.k_retrieved, config_.exclude_own_task));
    if (config_.lambda != 0.0) {
      NegativePools pools;
      if (index_) {
        pools = negative_pools(*index_, ex, config_.negative_pool);
      } else {
        pools = negative_pools(EmbeddingIndex{}, ex, 0);
      }
      pools_.push_back(std::move(pools));
    }
  }
  for (const auto& ex : valid_) {
    valid_retrieved_.push_back(retrieve_for_example(index_, ex, config_.k_retrieved, false));
  }
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix(config_.seed, 0x73687566ull, epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

ModelInput Trainer::input_for(std::size_t example, std::uint64_t negative_salt) const {
  const InputLimits limits{config_.max_segment_tokens, config_.max_target_tokens};
  if (config_.lambda == 0.0) return prepare_input(tokenizer_, train_[example], train_retrieved_[example], nullptr, limits);
  const NegativeConfig nc{config_.n_self, config_.n_retrieved, config_.negative_pool};
  const auto negatives = draw_negatives(pools_[example], nc, mix(config_.seed, negative_salt, example));
  return prepare_input(tokenizer_, train_[example], train_retrieved_[example], &negatives, limits);
}

double Trainer::batch_gradients(const std::vector<std::size_t>& examples, std::uint64_t negative_salt,
                                std::vector<Matrix>& grads, EpochStats* stats) const {
  grads = model_.parameters().zeros_like();
  if (examples.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(examples.size());
  double total = 0.0;
  for (auto i : examples) {
    autograd::Tape tape;
    ForwardOptions options;
    options.training = true;
    options.dropout_seed = mix(config_.seed, negative_salt ^ 0x64726f70ull, i);
    ForwardPass pass(model_, tape, options);
    const auto terms = pass.total_loss(input_for(i, negative_salt), config_.lambda, config_.tau);
    const double loss = tape.scalar_value(terms.total);
    if (!std::isfinite(loss)) {
      throw NonFiniteError("non-finite loss on training example " + std::to_string(i) + " (task " +
                           train_[i].task_id + ")");
    }
    tape.backward(tape.scale(terms.total, inv), grads);
    total += loss;
    if (stats) {
      stats->generation += tape.scalar_value(terms.generation);
      stats->total += loss;
      if (terms.contrastive.valid()) stats->contrastive += tape.scalar_value(terms.contrastive);
    }
  }
  return total * inv;
}

void Trainer::apply(const std::vector<Matrix>& grads, double lr) {
  const AdamHyper hyper{config_.adam_beta1, config_.adam_beta2, config_.adam_eps, config_.weight_decay};
  adamw_step(state_.adam, model_.parameters(), grads, lr, hyper);
}

EpochStats Trainer::run_epoch() {
  const auto order = epoch_order(state_.epoch);
  EpochStats stats;
  std::vector<Matrix> grads;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
    batch_gradients(batch, state_.epoch, grads, &stats);
    stats.lr = lr_schedule(config_, state_.adam.step);
    apply(grads, stats.lr);
  }
  const double n = static_cast<double>(order.size());
  stats.generation /= n;
  stats.total /= n;
  stats.contrastive = config_.lambda == 0.0 ? std::numeric_limits<double>::quiet_NaN() : stats.contrastive / n;
  ++state_.epoch;
  return stats;
}

ValidationScore Trainer::validate() const {
  ValidationScore score;
  if (valid_.empty()) return score;
  const NextStepGenerator generator(model_, tokenizer_, {config_.max_segment_tokens, config_.max_target_tokens});
  BeamOptions greedy;
  greedy.beam = 1;
  greedy.max_len = static_cast<int>(config_.max_target_tokens);
  std::vector<std::string> outputs, references;
  for (std::size_t i = 0; i < valid_.size(); ++i) {
    outputs.push_back(generator.generate(valid_[i], valid_retrieved_[i], greedy));
    references.push_back(valid_[i].target);
  }
  score.bleu4 = bleu(outputs, references, 4);
  double rouge = 0.0;
  for (std::size_t i = 0; i < outputs.size(); ++i) rouge += rouge_l(outputs[i], references[i]);
  score.rouge_l = rouge / static_cast<double>(outputs.size());
  return score;
}

bool Trainer::record_validation(const ValidationScore& score) {
  const bool better = score.bleu4 > state_.best_bleu4 ||
                      (score.bleu4 == state_.best_bleu4 && score.rouge_l > state_.best_rouge_l);
  if (better) {
    state_.best_bleu4 = score.bleu4;
    state_.best_rouge_l = score.rouge_l;
    state_.epochs_since_improvement = 0;
  } else {
    ++state_.epochs_since_improvement;
  }
  return better;
}

std::string format_log_row(std::size_t epoch, const EpochStats& stats, const ValidationScore& score) {
  std::ostringstream row;
  row << epoch << std::fixed << std::setprecision(6) << '\t' << stats.generation << '\t';
  if (std::isnan(stats.contrastive)) {
    row << "nan";
  } else {
    row << stats.contrastive;
  }
  row << '\t' << stats.total << '\t' << score.bleu4 << '\t' << score.rouge_l << '\t' << std::scientific
      << std::setprecision(6) << stats.lr;
  return row.str();
}

TrainResult train(const TrainInputs& inputs, const std::string& out_dir) {
  if (!inputs.train || !inputs.valid || !inputs.tokenizer) throw std::invalid_argument("train: missing inputs");
  const auto& config = inputs.config;
  config.validate();
  if (config.k_retrieved > 0 && !inputs.index) {
    throw std::invalid_argument("retrieval is enabled (k_retrieved > 0) but no index was given");
  }
  auto train_examples = build_examples(*inputs.train, config.max_history);
  if (train_examples.empty()) throw std::invalid_argument("training set is empty");
  auto valid_examples = build_examples(*inputs.valid, config.max_history);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_path = (std::filesystem::path(out_dir) / "model.ckpt").string();
  result.log_path = (std::filesystem::path(out_dir) / "train.log").string();
  std::ofstream log(result.log_path, std::ios::binary);
  if (!log) throw std::runtime_error("cannot write training log: " + result.log_path);
  log << "epoch\tL_gen\tL_cl\tL\tval_bleu4\tval_rougeL\tlr\n";

  Trainer trainer(config, *inputs.tokenizer, inputs.index, std::move(train_examples), std::move(valid_examples));
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto stats = trainer.run_epoch();
    const auto score = trainer.validate();
    log << format_log_row(epoch, stats, score) << '\n';
    log.flush();
    result.epochs_run = epoch;
    if (trainer.record_validation(score)) {
      save_checkpoint(result.checkpoint_path, trainer.model(), *inputs.tokenizer, trainer.state().adam.step);
      result.best = score;
    }
    if (trainer.state().epochs_since_improvement >= config.patience) {
      result.stopped_early = epoch < config.max_epochs;
      break;
    }
  }
  result.steps = trainer.state().adam.step;
  return result;
}

}  // namespace scriptgen
