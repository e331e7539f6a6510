#include "scriptgen/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "scriptgen/corpus.hpp"
#include "scriptgen/retrieval.hpp"

namespace scriptgen {

double BeamHypothesis::normalized_score(double length_alpha) const {
  const double len = static_cast<double>(std::max<std::size_t>(tokens.size(), 1));
  return log_prob / std::pow(len, length_alpha);
}

BeamResult beam_search(const StepScorer& scorer, TokenId eos, const BeamOptions& options) {
  if (options.beam <= 0) throw std::invalid_argument("beam must be positive");
  if (options.max_len <= 0) throw std::invalid_argument("max_len must be positive");
  const auto beam = static_cast<std::size_t>(options.beam);

  struct Candidate {
    double log_prob;
    TokenId token;
    std::size_t parent;
  };

  std::size_t next_order = 0;
  std::vector<BeamHypothesis> live{BeamHypothesis{{}, 0.0, false, next_order++}};
  BeamResult result;

  for (int step = 0; step < options.max_len && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < live.size(); ++i) {
      std::vector<TokenId> prefix{token_id(SpecialToken::Bos)};
      prefix.insert(prefix.end(), live[i].tokens.begin(), live[i].tokens.end());
      const Eigen::VectorXd lp = scorer(prefix);
      for (Eigen::Index t = 0; t < lp.size(); ++t) {
        candidates.push_back({live[i].log_prob + lp(t), static_cast<TokenId>(t), i});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [&live](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.token != b.token) return a.token < b.token;
      return live[a.parent].order < live[b.parent].order;
    });
    std::vector<BeamHypothesis> next;
    for (const auto& c : candidates) {
      if (next.size() >= beam) break;
      BeamHypothesis h;
      h.tokens = live[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      h.order = next_order++;
      if (c.token == eos) {
        h.finished = true;
        result.terminal.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    std::size_t finished = 0;
    for (const auto& h : result.terminal) finished += h.finished ? 1 : 0;
    if (finished >= beam) {
      live.clear();
      break;
    }
  }
  for (auto& h : live) result.terminal.push_back(std::move(h));

  const BeamHypothesis* best = nullptr;
  for (const auto& h : result.terminal) {
    if (!best) {
      best = &h;
      continue;
    }
    const double s = h.normalized_score(options.length_alpha);
    const double b = best->normalized_score(options.length_alpha);
    if (s > b || (s == b && h.order < best->order)) best = &h;
  }
  if (best) result.best = *best;
  return result;
}

NextStepGenerator::NextStepGenerator(const Model& model, const Tokenizer& tokenizer, InputLimits limits)
    : model_(model), tokenizer_(tokenizer), limits_(limits) {
  if (static_cast<std::size_t>(model.config().vocab_size) != tokenizer.size()) {
    throw std::invalid_argument("checkpoint vocabulary does not match the tokenizer");
  }
}

StepScorer NextStepGenerator::scorer(const SegmentedSequence& source,
                                     const std::vector<std::vector<TokenId>>& retrieved) const {
  autograd::Tape tape;
  ForwardPass pass(model_, tape);
  const auto enc = pass.encode_selective(source);
  const auto retr = pass.encode_retrieved(enc.cls, retrieved);
  Matrix memory = tape.value(enc.hidden);
  Matrix retrieved_memory = retr.empty() ? Matrix() : tape.value(retr.hidden);
  const Model* model = &model_;
  return [model, memory = std::move(memory), retrieved_memory = std::move(retrieved_memory)](
             const std::vector<TokenId>& prefix) -> Eigen::VectorXd {
    autograd::Tape step_tape;
    ForwardPass step(*model, step_tape);
    EncoderOutput enc_out;
    enc_out.hidden = step_tape.constant(memory);
    RetrievedEncoding retr_out;
    if (retrieved_memory.size() > 0) retr_out.hidden = step_tape.constant(retrieved_memory);
    const auto dec = step.decode(prefix, enc_out, retr_out);
    const Matrix& logits = step_tape.value(dec.logits);
    const Eigen::VectorXd last = logits.row(logits.rows() - 1).transpose();
    const double mx = last.maxCoeff();
    const double lse = mx + std::log((last.array() - mx).exp().sum());
    return (last.array() - lse).matrix();
  };
}

BeamResult NextStepGenerator::search(const TrainingExample& example, const RetrievedSet& retrieved,
                                     const BeamOptions& options) const {
  if (options.max_len + 1 > model_.config().max_positions) {
    throw std::invalid_argument("max_len exceeds the model's max_positions");
  }
  const auto source = assemble_input(tokenizer_, example, limits_.max_segment_tokens);
  const auto retrieved_ids = tokenize_retrieved(tokenizer_, retrieved, limits_.max_segment_tokens);
  return beam_search(scorer(source, retrieved_ids), token_id(SpecialToken::Eos), options);
}

std::string NextStepGenerator::generate(const TrainingExample& example, const RetrievedSet& retrieved,
                                        const BeamOptions& options) const {
  return detokenize(tokenizer_, search(example, retrieved, options).best.tokens);
}

std::string detokenize(const Tokenizer& tokenizer, const std::vector<TokenId>& generated) {
  std::vector<TokenId> ids = generated;
  if (!ids.empty() && ids.back() == token_id(SpecialToken::Eos)) ids.pop_back();
  return tokenizer.decode(ids);
}

std::string generate(const Checkpoint& checkpoint, const TrainingExample& example, const RetrievedSet& retrieved,
                     const BeamOptions& options) {
  return NextStepGenerator(checkpoint.model, checkpoint.tokenizer).generate(example, retrieved, options);
}

}  // namespace scriptgen
