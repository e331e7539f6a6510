#include "scriptgen/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "scriptgen/corpus.hpp"
#include "scriptgen/text_pipeline.hpp"

namespace scriptgen {

namespace {

constexpr char kIndexMagic[8] = {'S', 'G', 'I', 'D', 'X', '0', '0', '1'};

std::uint64_t fnv1a(std::string_view a, std::string_view b = {}) {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  mix(a);
  mix(b);
  return h;
}

/// Bucket-level term counts: unigrams and adjacent-word bigrams.
std::map<std::uint32_t, double> term_counts(std::string_view text, std::size_t dim) {
  std::map<std::uint32_t, double> counts;
  const auto words = normalize_words(text);
  for (std::size_t i = 0; i < words.size(); ++i) {
    counts[static_cast<std::uint32_t>(fnv1a("u\x1f", words[i]) % dim)] += 1.0;
    if (i + 1 < words.size()) {
      counts[static_cast<std::uint32_t>(fnv1a("b\x1f", words[i] + ' ' + words[i + 1]) % dim)] += 1.0;
    }
  }
  return counts;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated index file");
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated index file");
  return s;
}

}  // namespace

double SentenceVector::dot(const SentenceVector& other) const {
  if (values.size() != other.values.size()) throw std::invalid_argument("vector dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += values[i] * other.values[i];
  return s;
}

double cosine(const SentenceVector& a, const SentenceVector& b) {
  // Both sides are unit-norm (or zero), so the dot product is the cosine.
  return a.dot(b);
}

SentenceEmbedder::SentenceEmbedder(std::size_t dimension) : idf_(dimension, 1.0) {
  if (dimension == 0) throw std::invalid_argument("embedding dimension must be positive");
}

void SentenceEmbedder::fit(const std::vector<std::string>& documents) {
  const std::size_t dim = dimension();
  std::vector<std::size_t> df(dim, 0);
  for (const auto& doc : documents) {
    for (const auto& [bucket, count] : term_counts(doc, dim)) ++df[bucket];
  }
  const double n = static_cast<double>(documents.size());
  for (std::size_t b = 0; b < dim; ++b) {
    idf_[b] = std::log((1.0 + n) / (1.0 + static_cast<double>(df[b]))) + 1.0;
  }
}

std::vector<std::pair<std::uint32_t, double>> SentenceEmbedder::features(std::string_view text) const {
  if (idf_.empty()) throw std::logic_error("embedder is not fitted");
  std::vector<std::pair<std::uint32_t, double>> out;
  for (const auto& [bucket, count] : term_counts(text, dimension())) out.emplace_back(bucket, count * idf_[bucket]);
  return out;
}

SentenceVector SentenceEmbedder::embed(std::string_view text) const {
  SentenceVector v;
  v.values.assign(dimension(), 0.0);
  double norm2 = 0.0;
  for (const auto& [bucket, w] : features(text)) {
    v.values[bucket] = w;
    norm2 += w * w;
  }
  if (norm2 == 0.0) {
    v.featureless = true;
    return v;
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v.values) x *= inv;
  return v;
}

EmbeddingIndex EmbeddingIndex::build(const Corpus& train, std::size_t dimension) {
  if (train.tasks.empty()) throw std::invalid_argument("cannot build an index from an empty corpus");
  EmbeddingIndex index;
  index.embedder_ = SentenceEmbedder(dimension);
  std::vector<std::string> docs;
  for (const auto& task : train.tasks) {
    for (const auto& s : task.steps) docs.push_back(s.step_text);
  }
  index.embedder_.fit(docs);
  for (const auto& task : train.tasks) {
    for (std::size_t i = 0; i < task.steps.size(); ++i) {
      IndexEntry e;
      e.step_text = task.steps[i].step_text;
      e.task_id = task.id;
      if (i + 1 < task.steps.size()) e.successor = static_cast<std::uint32_t>(index.entries_.size() + 1);
      const auto dense = index.embedder_.embed(e.step_text);
      for (std::size_t b = 0; b < dense.values.size(); ++b) {
        if (dense.values[b] != 0.0) e.vector.emplace_back(static_cast<std::uint32_t>(b), dense.values[b]);
      }
      index.entries_.push_back(std::move(e));
    }
  }
  return index;
}

double EmbeddingIndex::score(const SentenceVector& query, std::size_t entry) const {
  double s = 0.0;
  for (const auto& [bucket, w] : entries_[entry].vector) s += query.values[bucket] * w;
  return s;
}

std::vector<std::pair<std::size_t, double>> EmbeddingIndex::rank(
    const SentenceVector& query, std::size_t limit,
    const std::function<bool(const IndexEntry&)>& keep) const {
  if (query.values.size() != dimension()) throw std::invalid_argument("query dimension mismatch");
  std::vector<std::pair<std::size_t, double>> scored;
  scored.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (keep(entries_[i])) scored.emplace_back(i, score(query, i));
  }
  auto better = [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  };
  const auto n = std::min(limit, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), better);
  scored.resize(n);
  return scored;
}

void EmbeddingIndex::save(std::ostream& out) const {
  out.write(kIndexMagic, sizeof(kIndexMagic));
  write_pod(out, static_cast<std::uint32_t>(dimension()));
  write_pod(out, static_cast<std::uint64_t>(entries_.size()));
  for (double w : embedder_.idf()) write_pod(out, w);
  for (const auto& e : entries_) {
    write_string(out, e.step_text);
    write_string(out, e.task_id);
    write_pod(out, static_cast<std::uint32_t>(e.vector.size()));
    for (const auto& [bucket, w] : e.vector) {
      write_pod(out, bucket);
      write_pod(out, w);
    }
    write_pod(out, e.successor);
  }
}

void EmbeddingIndex::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index file: " + path);
  save(out);
}

EmbeddingIndex EmbeddingIndex::load(std::istream& in) {
  char magic[sizeof(kIndexMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kIndexMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not an index file (bad magic)");
  }
  const auto dim = read_pod<std::uint32_t>(in);
  const auto count = read_pod<std::uint64_t>(in);
  EmbeddingIndex index;
  index.embedder_ = SentenceEmbedder(dim);
  std::vector<double> idf(dim);
  for (auto& w : idf) w = read_pod<double>(in);
  index.embedder_.set_idf(std::move(idf));
  index.entries_.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.step_text = read_string(in);
    e.task_id = read_string(in);
    const auto nnz = read_pod<std::uint32_t>(in);
    for (std::uint32_t j = 0; j < nnz; ++j) {
      const auto bucket = read_pod<std::uint32_t>(in);
      const auto w = read_pod<double>(in);
      if (bucket >= dim) throw std::runtime_error("index entry bucket out of range");
      e.vector.emplace_back(bucket, w);
    }
    e.successor = read_pod<std::uint32_t>(in);
    if (e.successor != kNoSuccessor && e.successor >= count) {
      throw std::runtime_error("index successor offset out of range");
    }
    index.entries_.push_back(std::move(e));
  }
  return index;
}

EmbeddingIndex EmbeddingIndex::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index file: " + path);
  return load(in);
}

RetrievedSet retrieve_next_steps(const EmbeddingIndex& index, std::string_view prev_step,
                                 const RetrievalOptions& options) {
  if (options.k == 0) throw std::invalid_argument("k must be positive");
  const auto query = index.embedder().embed(prev_step);
  const auto ranked = index.rank(query, options.k, [&](const IndexEntry& e) {
    return e.successor != kNoSuccessor && (!options.exclude_task || e.task_id != *options.exclude_task);
  });
  RetrievedSet out;
  for (const auto& [entry, score] : ranked) {
    const auto& next = index.entries()[index.entries()[entry].successor];
    out.steps.push_back(next.step_text);
    out.scores.push_back(score);
    out.task_ids.push_back(next.task_id);
  }
  return out;
}

RetrievedSet retrieve_next_steps(const EmbeddingIndex& index, std::string_view prev_step, std::size_t k) {
  return retrieve_next_steps(index, prev_step, RetrievalOptions{k, std::nullopt});
}

NegativePools negative_pools(const EmbeddingIndex& index, const TrainingExample& example,
                             std::size_t pool) {
  const std::string target = normalize_text(example.target);
  auto collect = [&target](std::vector<std::string>& pool, std::unordered_set<std::string>& seen,
                           const std::string& text) {
    auto key = normalize_text(text);
    if (key.empty() || key == target) return;
    if (seen.insert(std::move(key)).second) pool.push_back(text);
  };

  NegativePools pools;
  auto& self_pool = pools.self_pool;
  std::unordered_set<std::string> self_seen;
  collect(self_pool, self_seen, example.goal);
  if (example.subgoal) collect(self_pool, self_seen, *example.subgoal);
  for (const auto& [step, caption] : example.history) {
    collect(self_pool, self_seen, step);
    collect(self_pool, self_seen, caption);
  }

  auto& retrieved_pool = pools.retrieved_pool;
  if (!example.history.empty() && index.size() > 0 && pool > 0) {
    const auto query = index.embedder().embed(example.history.back().first);
    std::unordered_set<std::string> seen;
    for (const auto& [entry, score] : index.rank(query, index.size(), [](const IndexEntry&) { return true; })) {
      collect(retrieved_pool, seen, index.entries()[entry].step_text);
      if (retrieved_pool.size() >= pool) break;
    }
  }
  return pools;
}

NegativeSet draw_negatives(const NegativePools& pools, const NegativeConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NegativeSet out;
  auto draw = [&rng](const std::vector<std::string>& pool, std::size_t n, std::vector<std::string>& dst,
                     std::size_t& shortfall) {
    if (pool.size() <= n) {
      dst = pool;
      shortfall = n - pool.size();
      return;
    }
    std::sample(pool.begin(), pool.end(), std::back_inserter(dst), n, rng);
  };
  draw(pools.self_pool, config.n_self, out.self_negatives, out.self_shortfall);
  draw(pools.retrieved_pool, config.n_retrieved, out.retrieved_negatives, out.retrieved_shortfall);
  return out;
}

NegativeSet sample_negatives(const EmbeddingIndex& index, const TrainingExample& example,
                             const NegativeConfig& config, std::uint64_t seed) {
  return draw_negatives(negative_pools(index, example, config.pool), config, seed);
}

}  // namespace scriptgen
