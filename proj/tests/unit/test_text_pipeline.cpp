#include <sstream>

#include "doctest.h"
#include "scriptgen/corpus.hpp"
#include "scriptgen/text_pipeline.hpp"
#include "synthetic.hpp"

using namespace scriptgen;

namespace {

Corpus one_task(std::vector<std::pair<std::string, std::string>> steps, std::string goal = "Sew a Button") {
  Corpus c;
  Task t;
  t.id = "t1";
  t.goal = std::move(goal);
  int i = 0;
  for (auto& [s, cap] : steps) t.steps.push_back({++i, s, cap});
  c.tasks.push_back(t);
  return c;
}

std::vector<std::string> words_of(const Tokenizer& tok, const std::vector<TokenId>& ids) {
  std::vector<std::string> out;
  for (auto id : ids) out.push_back(tok.token(id));
  return out;
}

}  // namespace

TEST_CASE("normalization lowercases and splits on punctuation") {
  CHECK(normalize_words("Cut The Thread") == std::vector<std::string>{"cut", "the", "thread"});
  CHECK(normalize_words("Don't  stop, now!") == std::vector<std::string>{"don't", "stop", "now"});
  CHECK(normalize_words("").empty());
  CHECK(normalize_text("  A-B\tc ") == "a b c");
  CHECK(normalize_words("café au lait") == std::vector<std::string>{"café", "au", "lait"});
}

TEST_CASE("special tokens have fixed distinct ids") {
  Tokenizer tok({"cut", "the"});
  CHECK(tok.size() == kSpecialTokenNames.size() + 2);
  for (std::size_t i = 0; i < kSpecialTokenNames.size(); ++i) {
    CHECK(tok.id_of(kSpecialTokenNames[i]) == static_cast<TokenId>(i));
    CHECK(tok.is_special(static_cast<TokenId>(i)));
  }
  CHECK(tok.id_of("<pad>") == token_id(SpecialToken::Pad));
  CHECK(tok.id_of("<template>") == token_id(SpecialToken::Template));
  CHECK_FALSE(tok.is_special(tok.id_of("cut")));
}

TEST_CASE("build_vocab orders by frequency then lexicographically") {
  auto corpus = one_task({{"cut the thread", "the thread"}, {"cut the thread", "a b"}});
  const auto tok = build_vocab(corpus);
  // the:3 thread:3 a:2 cut:2 b:1 button:1 sew:1
  const auto& t = tok.tokens();
  const std::size_t s = Tokenizer::kSpecialCount;
  CHECK(t[s] == "the");
  CHECK(t[s + 1] == "thread");
  CHECK(t[s + 2] == "a");
  CHECK(t[s + 3] == "cut");
  CHECK(t[s + 4] == "b");
  CHECK(t[s + 5] == "button");
  CHECK(t[s + 6] == "sew");
  CHECK(build_vocab(corpus).tokens() == tok.tokens());
}

TEST_CASE("min_freq sends rare words to unk") {
  auto corpus = one_task({{"cut the thread", "cut"}, {"the end", "x"}});
  const auto tok = build_vocab(corpus, 2);
  CHECK(tok.encode("end") == std::vector<TokenId>{token_id(SpecialToken::Unk)});
  CHECK(tok.encode("cut the")[0] != token_id(SpecialToken::Unk));
}

TEST_CASE("build_vocab rejects an empty corpus") { CHECK_THROWS(build_vocab(Corpus{})); }

TEST_CASE("encode and decode") {
  auto corpus = one_task({{"cut the thread", "thread the bobbin"}, {"x", "y"}});
  const auto tok = build_vocab(corpus);
  CHECK(words_of(tok, tok.encode("Cut The Thread")) == std::vector<std::string>{"cut", "the", "thread"});
  CHECK(tok.encode("").empty());
  CHECK(tok.encode("zyzzyva") == std::vector<TokenId>{token_id(SpecialToken::Unk)});
  const auto ids = tok.encode("thread the bobbin");
  CHECK(tok.decode(ids) == "thread the bobbin");
  CHECK(tok.encode(tok.decode(ids)) == ids);
}

TEST_CASE("vocabulary file round trip") {
  const auto tok = build_vocab(testing::synthetic_corpus({}));
  std::stringstream buffer;
  tok.save(buffer);
  const auto back = Tokenizer::load(buffer);
  CHECK(back.tokens() == tok.tokens());
  CHECK(back.fingerprint() == tok.fingerprint());
  std::stringstream again(buffer.str());
  std::string first;
  std::getline(again, first);
  CHECK(first == "<pad>");
}

TEST_CASE("assemble_input segments") {
  auto corpus = one_task({{"cut the thread", "a spool of thread"}, {"tie a knot", "a knot"}});
  const auto tok = build_vocab(corpus);
  auto examples = build_examples(corpus);
  REQUIRE(examples.size() == 1);
  const auto seq = assemble_input(tok, examples[0]);
  REQUIRE(seq.segments.size() == 4);
  CHECK(seq.segment_count() == 3);
  CHECK(seq.segments[0].label == SegmentLabel::Cls);
  CHECK(seq.segments[0].size() == 1);
  CHECK(seq.segments[1].label == SegmentLabel::GoalSubgoal);
  CHECK(seq.segments[2].label == SegmentLabel::Step);
  CHECK(seq.segments[3].label == SegmentLabel::Caption);
  CHECK(seq.token_ids[0] == token_id(SpecialToken::Cls));
  // subgoal absent: <title> sew a button
  CHECK(seq.segments[1].size() == 4);
  CHECK(seq.token_ids[seq.segments[1].start] == token_id(SpecialToken::Title));
  CHECK(seq.token_ids[seq.segments[2].start] == token_id(SpecialToken::Step));
  CHECK(seq.token_ids[seq.segments[3].start] == token_id(SpecialToken::Caption));
  // contiguous partition
  std::size_t expect = 0;
  for (const auto& s : seq.segments) {
    CHECK(s.start == expect);
    expect = s.end;
  }
  CHECK(expect == seq.token_ids.size());
}

TEST_CASE("assemble_input with subgoal and truncation") {
  TrainingExample ex;
  ex.goal = "grow roses";
  ex.subgoal = "prepare soil";
  std::string long_caption;
  for (int i = 0; i < 35; ++i) long_caption += "w" + std::to_string(i) + " ";
  ex.history = {{"dig a hole", long_caption}};
  ex.target = "plant";
  Corpus c = one_task({{long_caption, "grow roses prepare soil dig a hole"}, {"plant", "x"}});
  const auto tok = build_vocab(c);
  const auto seq = assemble_input(tok, ex);
  CHECK(seq.segments[1].size() == 1 + 2 + 1 + 2);
  CHECK(seq.token_ids[seq.segments[1].start + 3] == token_id(SpecialToken::Method));
  CHECK(seq.segments[3].size() == 31);
  // idempotent: truncated text assembles to the same sequence
  TrainingExample truncated = ex;
  std::string cut;
  for (int i = 0; i < 30; ++i) cut += "w" + std::to_string(i) + " ";
  truncated.history[0].second = cut;
  CHECK(assemble_input(tok, truncated).token_ids == seq.token_ids);
}

TEST_CASE("segment count is 2n+1 for random histories") {
  const auto corpus = testing::synthetic_corpus({});
  const auto tok = build_vocab(corpus);
  for (const auto& ex : build_examples(corpus)) {
    const auto seq = assemble_input(tok, ex);
    CHECK(seq.segment_count() == 2 * ex.history.size() + 1);
    for (auto id : seq.token_ids) CHECK(id < static_cast<TokenId>(tok.size()));
  }
}

TEST_CASE("encode_target and retrieved steps") {
  auto corpus = one_task({{"thread the bobbin", "x"}, {"y", "z"}});
  const auto tok = build_vocab(corpus);
  const auto ids = encode_target(tok, "thread the bobbin");
  CHECK(ids.size() == 5);
  CHECK(ids.front() == token_id(SpecialToken::Bos));
  CHECK(ids.back() == token_id(SpecialToken::Eos));
  std::string long_target;
  for (int i = 0; i < 45; ++i) long_target += "thread ";
  CHECK(encode_target(tok, long_target).size() == 42);
  const auto r = encode_retrieved_step(tok, "thread the bobbin");
  CHECK(r.size() == 4);
  CHECK(r.front() == token_id(SpecialToken::Template));
}
