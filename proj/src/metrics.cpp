#include "scriptgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "scriptgen/retrieval.hpp"
#include "scriptgen/text_pipeline.hpp"

namespace scriptgen {

namespace {

using NgramCounts = std::unordered_map<std::string, std::size_t>;

std::string ngram_key(const Words& words, std::size_t start, int n) {
  std::string key = words[start];
  for (int k = 1; k < n; ++k) {
    key.push_back('\x1f');
    key += words[start + static_cast<std::size_t>(k)];
  }
  return key;
}

NgramCounts ngram_counts(const Words& words, int n) {
  NgramCounts counts;
  if (words.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) ++counts[ngram_key(words, i, n)];
  return counts;
}

std::size_t ngram_total(const Words& words, int n) {
  return words.size() >= static_cast<std::size_t>(n) ? words.size() - static_cast<std::size_t>(n) + 1 : 0;
}

std::size_t closest_length(std::size_t candidate, const std::vector<std::size_t>& lengths) {
  std::size_t best = lengths.front();
  for (auto len : lengths) {
    const auto d = len > candidate ? len - candidate : candidate - len;
    const auto bd = best > candidate ? best - candidate : candidate - best;
    if (d < bd || (d == bd && len < best)) best = len;
  }
  return best;
}

/// Combines clipped/total counts per order into BLEU.
double combine(const std::vector<double>& clipped, const std::vector<double>& totals, double cand_len,
               double ref_len, const BleuOptions& options) {
  if (cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  const auto n = clipped.size();
  for (std::size_t k = 0; k < n; ++k) {
    double num = clipped[k];
    double den = totals[k];
    if (options.smoothing && k > 0) {
      num += 1.0;
      den += 1.0;
    }
    if (den == 0.0 || num == 0.0) return 0.0;
    log_sum += std::log(num / den) / static_cast<double>(n);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum);
}

void check_order(int n) {
  if (n < 1) throw std::invalid_argument("n-gram order must be at least 1");
}

std::vector<Words> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<Words> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(normalize_words(t));
  return out;
}

}  // namespace

double bleu(const std::vector<Words>& candidates, const std::vector<std::vector<Words>>& references, int n,
            const BleuOptions& options) {
  check_order(n);
  if (candidates.empty() || candidates.size() != references.size()) {
    throw std::invalid_argument("bleu needs equally many candidates and references (at least one)");
  }
  std::vector<double> clipped(static_cast<std::size_t>(n), 0.0), totals(static_cast<std::size_t>(n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw std::invalid_argument("every candidate needs at least one reference");
    for (int k = 1; k <= n; ++k) {
      NgramCounts max_ref;
      for (const auto& r : refs) {
        for (const auto& [g, c] : ngram_counts(r, k)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : ngram_counts(cand, k)) {
        auto it = max_ref.find(g);
        clipped[static_cast<std::size_t>(k - 1)] += static_cast<double>(std::min(c, it == max_ref.end() ? 0 : it->second));
      }
      totals[static_cast<std::size_t>(k - 1)] += static_cast<double>(ngram_total(cand, k));
    }
    std::vector<std::size_t> lengths;
    for (const auto& r : refs) lengths.push_back(r.size());
    cand_len += static_cast<double>(cand.size());
    ref_len += static_cast<double>(closest_length(cand.size(), lengths));
  }
  return combine(clipped, totals, cand_len, ref_len, options);
}

double bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references, int n,
            const BleuOptions& options) {
  std::vector<std::vector<Words>> refs;
  for (const auto& r : references) refs.push_back({normalize_words(r)});
  return bleu(tokenize_all(candidates), refs, n, options);
}

double sentence_bleu(const Words& candidate, const std::vector<Words>& references, int n,
                     const BleuOptions& options) {
  return bleu(std::vector<Words>{candidate}, std::vector<std::vector<Words>>{references}, n, options);
}

std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const Words& candidate, const Words& reference, double beta) {
  RougeScore s;
  if (candidate.empty() || reference.empty()) return s;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return s;
  s.precision = lcs / static_cast<double>(candidate.size());
  s.recall = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  s.f = (1.0 + b2) * s.precision * s.recall / (s.recall + b2 * s.precision);
  return s;
}

double rouge_l(const std::string& candidate, const std::string& reference, double beta) {
  return rouge_l(normalize_words(candidate), normalize_words(reference), beta).f;
}

double self_bleu(const std::vector<Words>& outputs, int n, const BleuOptions& options) {
  check_order(n);
  if (outputs.size() < 2) throw std::invalid_argument("self-BLEU needs at least two outputs");
  const std::size_t m = outputs.size();

  // For each n-gram: the largest count over outputs, which output holds it,
  // and the runner-up count over the remaining outputs. Leaving output i out
  // then clips against `second` when i holds the maximum, else against `max`.
  struct Top2 {
    std::size_t max = 0;
    std::size_t owner = std::numeric_limits<std::size_t>::max();
    std::size_t second = 0;
  };
  std::vector<std::vector<NgramCounts>> counts(m);
  std::vector<std::unordered_map<std::string, Top2>> tops(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < m; ++i) {
    for (int k = 1; k <= n; ++k) {
      counts[i].push_back(ngram_counts(outputs[i], k));
      auto& top = tops[static_cast<std::size_t>(k - 1)];
      for (const auto& [g, c] : counts[i].back()) {
        auto& t = top[g];
        if (c > t.max) {
          t.second = t.max;
          t.max = c;
          t.owner = i;
        } else if (c > t.second) {
          t.second = c;
        }
      }
    }
  }
  std::map<std::size_t, std::size_t> length_counts;
  for (const auto& o : outputs) ++length_counts[o.size()];

  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> clipped(static_cast<std::size_t>(n), 0.0), totals(static_cast<std::size_t>(n), 0.0);
    for (int k = 1; k <= n; ++k) {
      const auto& top = tops[static_cast<std::size_t>(k - 1)];
      for (const auto& [g, c] : counts[i][static_cast<std::size_t>(k - 1)]) {
        const auto& t = top.at(g);
        const std::size_t ref_max = t.owner == i ? t.second : t.max;
        clipped[static_cast<std::size_t>(k - 1)] += static_cast<double>(std::min(c, ref_max));
      }
      totals[static_cast<std::size_t>(k - 1)] = static_cast<double>(ngram_total(outputs[i], k));
    }
    std::vector<std::size_t> lengths;
    for (const auto& [len, cnt] : length_counts) {
      if (len == outputs[i].size() && cnt == 1) continue;
      lengths.push_back(len);
    }
    const double ref_len = static_cast<double>(closest_length(outputs[i].size(), lengths));
    total += combine(clipped, totals, static_cast<double>(outputs[i].size()), ref_len, options);
  }
  return total / static_cast<double>(m);
}

DistinctResult distinct_n(const std::vector<Words>& outputs, int n) {
  check_order(n);
  if (outputs.empty()) throw std::invalid_argument("distinct-n needs at least one output");
  DistinctResult r;
  std::unordered_set<std::string> types;
  for (const auto& o : outputs) {
    for (const auto& [g, c] : ngram_counts(o, n)) {
      types.insert(g);
      r.tokens += c;
    }
  }
  r.types = types.size();
  r.degenerate = r.tokens == 0;
  r.value = r.degenerate ? 0.0 : static_cast<double>(r.types) / static_cast<double>(r.tokens);
  return r;
}

OverlapCount history_overlap(const Words& generated, const std::vector<Words>& history, int n) {
  check_order(n);
  std::unordered_set<std::string> seen;
  for (const auto& h : history) {
    for (const auto& [g, c] : ngram_counts(h, n)) seen.insert(g);
  }
  OverlapCount out;
  for (const auto& [g, c] : ngram_counts(generated, n)) {
    out.total += c;
    if (seen.count(g)) out.matched += c;
  }
  return out;
}

std::size_t text_top1(const SentenceEmbedder& embedder, const std::string& generated,
                      const std::vector<std::string>& pool) {
  if (pool.empty()) throw std::invalid_argument("Text@1 needs a non-empty candidate pool");
  const auto query = embedder.embed(generated);
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const double s = cosine(query, embedder.embed(pool[i]));
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return best;
}

bool text_at_1(const SentenceEmbedder& embedder, const std::string& generated, const std::vector<std::string>& pool,
               const std::vector<std::size_t>& future) {
  const auto top = text_top1(embedder, generated, pool);
  return std::find(future.begin(), future.end(), top) != future.end();
}

ExampleScores score_example(const EvalItem& item, const SentenceEmbedder* embedder) {
  ExampleScores s;
  const auto gen = normalize_words(item.generated);
  const auto ref = normalize_words(item.reference);
  s.bleu4 = sentence_bleu(gen, {ref}, 4);
  s.rouge_l = rouge_l(gen, ref).f;
  std::vector<Words> history;
  for (const auto& h : item.history) history.push_back(normalize_words(h));
  s.overlap1 = history_overlap(gen, history, 1).value();
  if (embedder && !item.pool.empty()) s.text_hit = text_at_1(*embedder, item.generated, item.pool, item.future);
  return s;
}

MetricReport evaluate(const std::vector<EvalItem>& items, const std::vector<std::string>& metrics,
                      const SentenceEmbedder* embedder, const BleuOptions& options) {
  static const std::vector<std::string> kAll = {"bleu", "rouge", "self_bleu", "distinct", "overlap", "text_at_1"};
  std::vector<std::string> wanted;
  for (const auto& m : metrics) {
    if (m == "all") {
      wanted = kAll;
      break;
    }
    if (std::find(kAll.begin(), kAll.end(), m) == kAll.end()) throw std::invalid_argument("unknown metric: " + m);
    wanted.push_back(m);
  }
  auto want = [&wanted](const char* m) { return std::find(wanted.begin(), wanted.end(), m) != wanted.end(); };

  MetricReport report;
  report.examples = items.size();
  if (items.empty()) throw std::invalid_argument("nothing to evaluate");
  std::vector<Words> generated, references;
  for (const auto& it : items) {
    generated.push_back(normalize_words(it.generated));
    references.push_back(normalize_words(it.reference));
  }

  if (want("bleu")) {
    std::vector<std::vector<Words>> refs;
    for (const auto& r : references) refs.push_back({r});
    for (int n = 1; n <= 4; ++n) report.values["bleu_" + std::to_string(n)] = bleu(generated, refs, n, options);
  }
  if (want("rouge")) {
    double sum = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) sum += rouge_l(generated[i], references[i]).f;
    report.values["rouge_l"] = sum / static_cast<double>(items.size());
  }
  if (want("self_bleu")) {
    if (generated.size() < 2) {
      report.warnings.push_back("self-BLEU skipped: fewer than two outputs");
    } else {
      for (int n = 1; n <= 4; ++n) report.values["self_bleu_" + std::to_string(n)] = self_bleu(generated, n, options);
    }
  }
  if (want("distinct")) {
    for (int n = 1; n <= 4; ++n) {
      const auto d = distinct_n(generated, n);
      if (d.degenerate) report.warnings.push_back("distinct-" + std::to_string(n) + ": every output is shorter than n");
      report.values["distinct_" + std::to_string(n)] = d.value;
    }
  }
  if (want("overlap")) {
    for (int n = 1; n <= 4; ++n) {
      OverlapCount total;
      for (std::size_t i = 0; i < items.size(); ++i) {
        std::vector<Words> history;
        for (const auto& h : items[i].history) history.push_back(normalize_words(h));
        total += history_overlap(generated[i], history, n);
      }
      report.values["history_overlap_" + std::to_string(n)] = total.value();
    }
  }
  if (want("text_at_1")) {
    if (!embedder) {
      report.warnings.push_back("Text@1 skipped: no fitted embedder");
    } else {
      std::size_t hits = 0, scored = 0;
      for (const auto& it : items) {
        if (it.pool.empty()) continue;
        ++scored;
        hits += text_at_1(*embedder, it.generated, it.pool, it.future) ? 1 : 0;
      }
      if (scored == 0) {
        report.warnings.push_back("Text@1 skipped: no example has a candidate pool");
      } else {
        report.values["text_at_1"] = static_cast<double>(hits) / static_cast<double>(scored);
      }
    }
  }
  return report;
}

}  // namespace scriptgen
