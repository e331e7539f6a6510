#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace scriptgen {

struct Corpus;
struct TrainingExample;

using TokenId = std::int32_t;

/// Lowercases and splits on whitespace and punctuation. Apostrophes inside a
/// word are kept ("don't" stays one token); every other ASCII punctuation
/// character is a separator. Bytes >= 0x80 are treated as letters so UTF-8
/// words survive intact.
std::vector<std::string> normalize_words(std::string_view text);

/// Single-space join of normalize_words().
std::string normalize_text(std::string_view text);

enum class SpecialToken : TokenId {
  Pad = 0,
  Unk,
  Bos,
  Eos,
  Cls,
  Mask,
  Title,
  Method,
  Step,
  Caption,
  Template,
};

inline constexpr std::array<std::string_view, 11> kSpecialTokenNames = {
    "<pad>", "<unk>",    "<bos>",  "<eos>",     "<cls>",     "<mask>",
    "<title>", "<method>", "<step>", "<caption>", "<template>",
};

inline constexpr TokenId token_id(SpecialToken t) { return static_cast<TokenId>(t); }

class Tokenizer {
 public:
  /// Builds a tokenizer from the ordered non-special vocabulary.
  explicit Tokenizer(std::vector<std::string> words = {}, int min_freq = 1);

  static Tokenizer load(std::istream& in);
  static Tokenizer load_file(const std::string& path);
  /// One token per line, line number = id, special tokens first.
  void save(std::ostream& out) const;
  void save_file(const std::string& path) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  TokenId id_of(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool is_special(TokenId id) const { return id >= 0 && id < kSpecialCount; }
  std::size_t size() const { return tokens_.size(); }
  int min_freq() const { return min_freq_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// FNV-1a over the serialized vocabulary.
  std::uint64_t fingerprint() const;

  static constexpr TokenId kSpecialCount = static_cast<TokenId>(kSpecialTokenNames.size());

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  int min_freq_ = 1;
};

/// Counts every normalized word of goals, subgoals, steps and captions.
/// Ids are assigned by descending frequency, then lexicographically.
Tokenizer build_vocab(const Corpus& corpus, int min_freq = 1);

enum class SegmentLabel { Cls, GoalSubgoal, Step, Caption };

struct Segment {
  SegmentLabel label;
  std::size_t start = 0;  // half-open [start, end)
  std::size_t end = 0;

  std::size_t size() const { return end - start; }
};

struct SegmentedSequence {
  std::vector<TokenId> token_ids;
  std::vector<Segment> segments;  // segments[0] is the single <cls> token

  /// Segments after <cls>: X_0 .. X_2n.
  std::size_t segment_count() const { return segments.empty() ? 0 : segments.size() - 1; }
};

inline constexpr std::size_t kDefaultMaxSegmentTokens = 30;
inline constexpr std::size_t kDefaultMaxTargetTokens = 40;

/// <cls> <title> goal [<method> subgoal] then (<step> s_i)(<caption> c_i) per
/// history pair. Each text field keeps at most max_seg_tokens content tokens.
SegmentedSequence assemble_input(const Tokenizer& tokenizer, const TrainingExample& example,
                                 std::size_t max_seg_tokens = kDefaultMaxSegmentTokens);

/// <bos> tokens(<= max_target) <eos>
std::vector<TokenId> encode_target(const Tokenizer& tokenizer, std::string_view target,
                                   std::size_t max_target = kDefaultMaxTargetTokens);

/// <template> tokens(<= max_tokens), the encoder input for a retrieved step.
std::vector<TokenId> encode_retrieved_step(const Tokenizer& tokenizer, std::string_view step,
                                           std::size_t max_tokens = kDefaultMaxSegmentTokens);

}  // namespace scriptgen
