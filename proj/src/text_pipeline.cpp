#include "scriptgen/text_pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "scriptgen/corpus.hpp"

namespace scriptgen {

namespace {

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c >= 0x80;
}

char lower(unsigned char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : static_cast<char>(c);
}

void append_truncated(std::vector<TokenId>& out, const std::vector<TokenId>& ids, std::size_t limit) {
  const auto n = std::min(ids.size(), limit);
  out.insert(out.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
}

}  // namespace

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_word_byte(c)) {
      current.push_back(lower(c));
    } else if (c == '\'' && !current.empty() && i + 1 < text.size() &&
               is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
      current.push_back('\'');
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : normalize_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Tokenizer::Tokenizer(std::vector<std::string> words, int min_freq) : min_freq_(min_freq) {
  tokens_.reserve(kSpecialTokenNames.size() + words.size());
  for (auto name : kSpecialTokenNames) tokens_.emplace_back(name);
  for (auto& w : words) tokens_.push_back(std::move(w));
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = ids_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw std::invalid_argument("duplicate vocabulary token: " + tokens_[i]);
  }
}

Tokenizer Tokenizer::load(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kSpecialTokenNames.size()) {
    throw std::runtime_error("vocabulary file is missing special tokens");
  }
  for (std::size_t i = 0; i < kSpecialTokenNames.size(); ++i) {
    if (lines[i] != kSpecialTokenNames[i]) {
      throw std::runtime_error("vocabulary line " + std::to_string(i + 1) + ": expected " +
                               std::string(kSpecialTokenNames[i]));
    }
  }
  return Tokenizer(std::vector<std::string>(lines.begin() + kSpecialCount, lines.end()));
}

Tokenizer Tokenizer::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
  return load(in);
}

void Tokenizer::save(std::ostream& out) const {
  for (const auto& t : tokens_) out << t << '\n';
}

void Tokenizer::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
  save(out);
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : normalize_words(text)) ids.push_back(id_of(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (auto id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

TokenId Tokenizer::id_of(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? token_id(SpecialToken::Unk) : it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Tokenizer::fingerprint() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= '\n';
    h *= 1099511628211ull;
  }
  return h;
}

Tokenizer build_vocab(const Corpus& corpus, int min_freq) {
  if (corpus.tasks.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  auto count = [&](std::string_view text) {
    for (auto& w : normalize_words(text)) ++counts[w];
  };
  for (const auto& task : corpus.tasks) {
    count(task.goal);
    if (task.subgoal) count(*task.subgoal);
    for (const auto& s : task.steps) {
      count(s.step_text);
      count(s.caption_text);
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [w, c] : counts) {
    if (c >= static_cast<std::size_t>(std::max(min_freq, 1))) ranked.emplace_back(w, c);
  }
  // std::map iteration is already lexicographic, so a stable sort on count suffices.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, c] : ranked) words.push_back(w);
  return Tokenizer(std::move(words), min_freq);
}

SegmentedSequence assemble_input(const Tokenizer& tokenizer, const TrainingExample& example,
                                 std::size_t max_seg_tokens) {
  SegmentedSequence seq;
  auto& ids = seq.token_ids;
  auto open = [&](SegmentLabel label) { seq.segments.push_back({label, ids.size(), ids.size()}); };
  auto close = [&] { seq.segments.back().end = ids.size(); };

  open(SegmentLabel::Cls);
  ids.push_back(token_id(SpecialToken::Cls));
  close();

  open(SegmentLabel::GoalSubgoal);
  ids.push_back(token_id(SpecialToken::Title));
  append_truncated(ids, tokenizer.encode(example.goal), max_seg_tokens);
  if (example.subgoal) {
    ids.push_back(token_id(SpecialToken::Method));
    append_truncated(ids, tokenizer.encode(*example.subgoal), max_seg_tokens);
  }
  close();

  for (const auto& [step, caption] : example.history) {
    open(SegmentLabel::Step);
    ids.push_back(token_id(SpecialToken::Step));
    append_truncated(ids, tokenizer.encode(step), max_seg_tokens);
    close();
    open(SegmentLabel::Caption);
    ids.push_back(token_id(SpecialToken::Caption));
    append_truncated(ids, tokenizer.encode(caption), max_seg_tokens);
    close();
  }
  return seq;
}

std::vector<TokenId> encode_target(const Tokenizer& tokenizer, std::string_view target,
                                   std::size_t max_target) {
  std::vector<TokenId> ids{token_id(SpecialToken::Bos)};
  append_truncated(ids, tokenizer.encode(target), max_target);
  ids.push_back(token_id(SpecialToken::Eos));
  return ids;
}

std::vector<TokenId> encode_retrieved_step(const Tokenizer& tokenizer, std::string_view step,
                                           std::size_t max_tokens) {
  std::vector<TokenId> ids{token_id(SpecialToken::Template)};
  append_truncated(ids, tokenizer.encode(step), max_tokens);
  return ids;
}

}  // namespace scriptgen
