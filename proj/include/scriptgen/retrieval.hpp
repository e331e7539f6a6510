#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace scriptgen {

struct Corpus;
struct TrainingExample;

inline constexpr std::size_t kDefaultEmbeddingDim = 512;

/// Dense, L2-normalized. A text without any feature maps to the zero vector.
struct SentenceVector {
  std::vector<double> values;
  bool featureless = false;

  double dot(const SentenceVector& other) const;
};

/// TF-IDF weighted bag of word unigrams and bigrams, hashed into a fixed
/// number of buckets. IDF is fitted per bucket: ln((1 + N) / (1 + df)) + 1.
class SentenceEmbedder {
 public:
  SentenceEmbedder() = default;
  explicit SentenceEmbedder(std::size_t dimension);

  void fit(const std::vector<std::string>& documents);
  SentenceVector embed(std::string_view text) const;

  std::size_t dimension() const { return idf_.size(); }
  const std::vector<double>& idf() const { return idf_; }
  void set_idf(std::vector<double> idf) { idf_ = std::move(idf); }

  /// Sorted (bucket, weight) pairs before normalization; exposed for tests.
  std::vector<std::pair<std::uint32_t, double>> features(std::string_view text) const;

 private:
  std::vector<double> idf_;
};

double cosine(const SentenceVector& a, const SentenceVector& b);

inline constexpr std::uint32_t kNoSuccessor = 0xFFFFFFFFu;

struct IndexEntry {
  std::string step_text;
  std::string task_id;
  std::uint32_t successor = kNoSuccessor;  // entry offset of the next step in the same task
  std::vector<std::pair<std::uint32_t, double>> vector;  // sparse, L2-normalized
};

struct RetrievedSet {
  std::vector<std::string> steps;
  std::vector<double> scores;  // non-increasing
  std::vector<std::string> task_ids;

  std::size_t size() const { return steps.size(); }
  bool empty() const { return steps.empty(); }
};

struct NegativeSet {
  std::vector<std::string> self_negatives;
  std::vector<std::string> retrieved_negatives;
  std::size_t self_shortfall = 0;
  std::size_t retrieved_shortfall = 0;

  std::size_t total() const { return self_negatives.size() + retrieved_negatives.size(); }
};

struct NegativeConfig {
  std::size_t n_self = 4;
  std::size_t n_retrieved = 1;
  std::size_t pool = 20;
};

/// Exact-scan nearest-neighbour index over training steps. Entries are stored
/// in (task order, step index) order; that order breaks every score tie.
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;

  static EmbeddingIndex build(const Corpus& train, std::size_t dimension = kDefaultEmbeddingDim);

  static EmbeddingIndex load(std::istream& in);
  static EmbeddingIndex load_file(const std::string& path);
  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;

  const SentenceEmbedder& embedder() const { return embedder_; }
  const std::vector<IndexEntry>& entries() const { return entries_; }
  std::size_t dimension() const { return embedder_.dimension(); }
  std::size_t size() const { return entries_.size(); }

  double score(const SentenceVector& query, std::size_t entry) const;

  /// Entries ranked by cosine to the query, best first, ties by entry order.
  /// Only entries passing `keep` are ranked; at most `limit` are returned.
  std::vector<std::pair<std::size_t, double>> rank(
      const SentenceVector& query, std::size_t limit,
      const std::function<bool(const IndexEntry&)>& keep) const;

 private:
  SentenceEmbedder embedder_;
  std::vector<IndexEntry> entries_;
};

struct RetrievalOptions {
  std::size_t k = 5;
  /// Skip entries from this task (the example's own task at training time).
  std::optional<std::string> exclude_task;
};

/// Successors of the k training steps most similar to prev_step.
RetrievedSet retrieve_next_steps(const EmbeddingIndex& index, std::string_view prev_step,
                                 const RetrievalOptions& options);
RetrievedSet retrieve_next_steps(const EmbeddingIndex& index, std::string_view prev_step,
                                 std::size_t k = 5);

/// Deduplicated candidate pools for one example; independent of the seed, so
/// they can be computed once and redrawn every epoch.
struct NegativePools {
  std::vector<std::string> self_pool;
  std::vector<std::string> retrieved_pool;
};

NegativePools negative_pools(const EmbeddingIndex& index, const TrainingExample& example,
                             std::size_t pool);
NegativeSet draw_negatives(const NegativePools& pools, const NegativeConfig& config,
                           std::uint64_t seed);

/// Self pool: goal, subgoal, history steps and captions. Retrieved pool: the
/// `pool` training steps most similar to the last history step. Candidates
/// equal to the target (after normalization) are never drawn.
NegativeSet sample_negatives(const EmbeddingIndex& index, const TrainingExample& example,
                             const NegativeConfig& config, std::uint64_t seed);

}  // namespace scriptgen
