#pragma once

#include <string>
#include <vector>

#include "scriptgen/retrieval.hpp"

// Straight-line reference implementations used to cross-check the library.
namespace scriptgen::testing {

using Sentence = std::vector<std::string>;

Sentence split_ws(const std::string& text);

/// Full dense cosine scan: successors of the top-k entries that have one,
/// ordered by score then entry position.
std::vector<std::size_t> oracle_retrieve(const EmbeddingIndex& index, const std::string& query, std::size_t k);

/// Corpus BLEU by explicit enumeration of candidate n-grams and per-reference counts.
double oracle_bleu(const std::vector<Sentence>& candidates, const std::vector<std::vector<Sentence>>& references,
                   int n);
/// Modified n-gram precision numerator and denominator summed over the corpus.
std::pair<long, long> oracle_clipped_counts(const std::vector<Sentence>& candidates,
                                            const std::vector<std::vector<Sentence>>& references, int n);

/// O(nm) table LCS and ROUGE-L F with recall weight beta.
std::size_t oracle_lcs(const Sentence& a, const Sentence& b);
double oracle_rouge_l(const Sentence& candidate, const Sentence& reference, double beta);

/// Mean over i of BLEU-n(output_i, all other outputs), recomputed from scratch each time.
double oracle_self_bleu(const std::vector<Sentence>& outputs, int n);

double oracle_distinct(const std::vector<Sentence>& outputs, int n);

/// Index of the pool member with the highest cosine, first on ties.
std::size_t oracle_top1(const SentenceEmbedder& embedder, const std::string& generated,
                        const std::vector<std::string>& pool);

}  // namespace scriptgen::testing
