#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "scriptgen/model.hpp"

namespace scriptgen {

struct BeamHypothesis {
  std::vector<TokenId> tokens;  // generated tokens, <eos> last when finished
  double log_prob = 0.0;
  bool finished = false;
  std::size_t order = 0;  // creation order, used for tie-breaking

  /// log_prob / length^alpha, length counting every generated token.
  double normalized_score(double length_alpha) const;
};

struct BeamOptions {
  int beam = 5;
  int max_len = static_cast<int>(kDefaultMaxTargetTokens);
  double length_alpha = 1.0;
};

struct BeamResult {
  BeamHypothesis best;
  /// Finished hypotheses plus any still alive when max_len was reached.
  std::vector<BeamHypothesis> terminal;
};

/// Log-probabilities over the vocabulary for the token following `prefix`
/// (which starts with <bos>).
using StepScorer = std::function<Eigen::VectorXd(const std::vector<TokenId>& prefix)>;

/// Expansions are ranked by cumulative log-probability, ties by token id and
/// then by the parent's creation order. An expansion ending in <eos> becomes a
/// finished hypothesis; search stops once `beam` hypotheses have finished, no
/// live hypothesis remains, or max_len tokens have been generated.
BeamResult beam_search(const StepScorer& scorer, TokenId eos, const BeamOptions& options);

/// Encodes one example once, then scores decoder prefixes against it.
class NextStepGenerator {
 public:
  NextStepGenerator(const Model& model, const Tokenizer& tokenizer, InputLimits limits = {});

  BeamResult search(const TrainingExample& example, const RetrievedSet& retrieved, const BeamOptions& options) const;
  std::string generate(const TrainingExample& example, const RetrievedSet& retrieved,
                       const BeamOptions& options = {}) const;

  /// Scorer bound to a pre-encoded source; exposed for tests.
  StepScorer scorer(const SegmentedSequence& source, const std::vector<std::vector<TokenId>>& retrieved) const;

 private:
  const Model& model_;
  const Tokenizer& tokenizer_;
  InputLimits limits_;
};

/// Drops the trailing <eos> and joins with single spaces.
std::string detokenize(const Tokenizer& tokenizer, const std::vector<TokenId>& generated);

std::string generate(const Checkpoint& checkpoint, const TrainingExample& example, const RetrievedSet& retrieved,
                     const BeamOptions& options = {});

}  // namespace scriptgen
