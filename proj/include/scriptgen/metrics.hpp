#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace scriptgen {

class SentenceEmbedder;

using Words = std::vector<std::string>;

struct BleuOptions {
  /// Add-one smoothing of the n > 1 precisions (diagnostics only).
  bool smoothing = false;
};

/// Corpus BLEU with uniform weights over 1..n, clipped n-gram counts summed
/// over the corpus, and a brevity penalty against the closest reference
/// length (shorter wins ties).
double bleu(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references, int n,
            const BleuOptions& options = {});
/// Convenience overload: one reference per candidate, raw text.
double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references, int n,
            const BleuOptions& options = {});
/// Sentence-level BLEU against several references.
double sentence_bleu(const Words& candidate, const std::vector<Words>& references, int n,
                     const BleuOptions& options = {});

inline constexpr double kRougeBeta = 1.2;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

std::size_t lcs_length(const Words& a, const Words& b);
RougeScore rouge_l(const Words& candidate, const Words& reference, double beta = kRougeBeta);
double rouge_l(const std::string& candidate, const std::string& reference, double beta = kRougeBeta);

/// Mean over outputs of sentence BLEU-n with every other output as a reference.
double self_bleu(const std::vector<Words>& outputs, int n, const BleuOptions& options = {});

struct DistinctResult {
  double value = 0.0;
  std::size_t types = 0;
  std::size_t tokens = 0;
  /// True when no output has n tokens; value is then 0.
  bool degenerate = false;
};

/// Distinct n-gram types over total n-gram tokens across all outputs.
DistinctResult distinct_n(const std::vector<Words>& outputs, int n);

struct OverlapCount {
  std::size_t matched = 0;
  std::size_t total = 0;

  double value() const { return total == 0 ? 0.0 : static_cast<double>(matched) / static_cast<double>(total); }
  OverlapCount& operator+=(const OverlapCount& o) {
    matched += o.matched;
    total += o.total;
    return *this;
  }
};

/// n-gram tokens of the generated step that also occur in any history step.
OverlapCount history_overlap(const Words& generated, const std::vector<Words>& history, int n);

/// Index of the pool member most similar to `generated` (ties: lowest index).
std::size_t text_top1(const SentenceEmbedder& embedder, const std::string& generated,
                      const std::vector<std::string>& pool);
/// HIT@1: the top-ranked pool member is one of the future steps.
bool text_at_1(const SentenceEmbedder& embedder, const std::string& generated, const std::vector<std::string>& pool,
               const std::vector<std::size_t>& future);

/// Generated text for one example plus everything needed to score it.
struct EvalItem {
  std::string task_id;
  std::size_t position = 0;
  std::string generated;
  std::string reference;
  std::vector<std::string> history;  // step texts, oldest first
  std::vector<std::string> pool;     // Text@1 candidate pool
  std::vector<std::size_t> future;   // indices into pool
};

/// Fractions in [0, 1]; metrics that were not requested are absent.
struct MetricReport {
  std::map<std::string, double> values;
  std::size_t examples = 0;
  std::vector<std::string> warnings;
};

/// Metric names: bleu, rouge, self_bleu, distinct, overlap, text_at_1 (or "all").
MetricReport evaluate(const std::vector<EvalItem>& items, const std::vector<std::string>& metrics,
                      const SentenceEmbedder* embedder, const BleuOptions& options = {});

struct ExampleScores {
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double overlap1 = 0.0;
  std::optional<bool> text_hit;
};

ExampleScores score_example(const EvalItem& item, const SentenceEmbedder* embedder);

}  // namespace scriptgen
