#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "scriptgen/corpus.hpp"
#include "scriptgen/model.hpp"
#include "scriptgen/retrieval.hpp"

namespace scriptgen {

/// Flat key-value configuration; JSON keys match the field names.
struct TrainConfig {
  // optimizer and schedule
  double lr_peak = 1e-5;
  double lr_min = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-6;
  double weight_decay = 0.01;
  std::uint64_t warmup_steps = 2000;
  std::uint64_t restart_period = 2000;  // T_0, steps in the first cosine cycle
  std::uint64_t restart_mult = 1;       // T_mult
  // loop
  std::size_t batch_size = 16;
  std::size_t max_epochs = 30;
  std::size_t patience = 10;
  std::size_t max_valid_examples = 0;  // 0 = validate on every example
  // objective
  double lambda = 0.5;
  double tau = 1.0;
  std::size_t n_self = 4;
  std::size_t n_retrieved = 1;
  std::size_t negative_pool = 20;
  std::size_t k_retrieved = 5;
  bool exclude_own_task = false;
  // inputs
  std::size_t max_history = kDefaultMaxHistory;
  std::size_t max_segment_tokens = kDefaultMaxSegmentTokens;
  std::size_t max_target_tokens = kDefaultMaxTargetTokens;
  int min_freq = 1;
  ModelConfig model;
  std::uint64_t seed = 42;

  void validate() const;
};

TrainConfig load_train_config(const std::string& path);
TrainConfig parse_train_config(const std::string& json_text);
/// Pretty-printed JSON with every field.
std::string to_json(const TrainConfig& config);

/// Linear warmup from 0 to lr_peak, then cosine annealing with warm restarts.
double lr_schedule(const TrainConfig& config, std::uint64_t step);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Matrix> first;
  std::vector<Matrix> second;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam with decoupled weight decay. Throws NonFiniteError
/// naming the parameter when a gradient entry is NaN or infinite.
void adamw_step(AdamState& state, autograd::ParameterSet& params, const std::vector<Matrix>& grads, double lr,
                const AdamHyper& hyper);

struct TrainState {
  AdamState adam;
  double best_bleu4 = -1.0;
  double best_rouge_l = -1.0;
  std::size_t epochs_since_improvement = 0;
  std::size_t epoch = 0;
};

struct EpochStats {
  double generation = 0.0;
  double contrastive = 0.0;  // NaN when the contrastive term is disabled
  double total = 0.0;
  double lr = 0.0;
};

struct ValidationScore {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
};

/// Example-level preparation shared by training, validation and generation:
/// the retrieved set is computed from the last history step.
RetrievedSet retrieve_for_example(const EmbeddingIndex* index, const TrainingExample& example, std::size_t k,
                                  bool exclude_own_task);

class Trainer {
 public:
  Trainer(const TrainConfig& config, const Tokenizer& tokenizer, const EmbeddingIndex* index,
          std::vector<TrainingExample> train, std::vector<TrainingExample> valid);

  /// One pass over the training set in a seeded shuffled order.
  EpochStats run_epoch();
  ValidationScore validate() const;
  /// Records the score; true when it beats the best so far (BLEU-4, then ROUGE-L).
  bool record_validation(const ValidationScore& score);

  /// Mean total loss and gradients over the given examples without updating.
  double batch_gradients(const std::vector<std::size_t>& examples, std::uint64_t negative_salt,
                         std::vector<Matrix>& grads, EpochStats* stats = nullptr) const;
  /// Optimizer step with an explicit learning rate.
  void apply(const std::vector<Matrix>& grads, double lr);

  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  ModelInput input_for(std::size_t example, std::uint64_t negative_salt) const;

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }
  const std::vector<TrainingExample>& train_examples() const { return train_; }
  const std::vector<TrainingExample>& valid_examples() const { return valid_; }
  const RetrievedSet& train_retrieval(std::size_t i) const { return train_retrieved_[i]; }
  const RetrievedSet& valid_retrieval(std::size_t i) const { return valid_retrieved_[i]; }

 private:
  TrainConfig config_;
  const Tokenizer& tokenizer_;
  const EmbeddingIndex* index_;
  std::vector<TrainingExample> train_;
  std::vector<TrainingExample> valid_;
  std::vector<RetrievedSet> train_retrieved_;
  std::vector<RetrievedSet> valid_retrieved_;
  std::vector<NegativePools> pools_;
  Model model_;
  TrainState state_;
};

struct TrainInputs {
  const Corpus* train = nullptr;
  const Corpus* valid = nullptr;
  const Tokenizer* tokenizer = nullptr;
  const EmbeddingIndex* index = nullptr;  // may be null only when k_retrieved == 0
  TrainConfig config;
};

struct TrainResult {
  std::string checkpoint_path;
  std::string log_path;
  ValidationScore best;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  std::uint64_t steps = 0;
};

/// Full loop. Writes <out_dir>/model.ckpt (best validation epoch, plus its
/// manifest) and <out_dir>/train.log.
TrainResult train(const TrainInputs& inputs, const std::string& out_dir);

/// One tab-separated log row: epoch L_gen L_cl L val_bleu4 val_rougeL lr.
std::string format_log_row(std::size_t epoch, const EpochStats& stats, const ValidationScore& score);

}  // namespace scriptgen
