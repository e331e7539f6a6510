#include <random>
#include <sstream>

#include "doctest.h"
#include "scriptgen/corpus.hpp"
#include "scriptgen/text_pipeline.hpp"
#include "synthetic.hpp"

using namespace scriptgen;

namespace {

Corpus parse(const std::string& text, bool drop = false, ParseReport* report = nullptr) {
  std::istringstream in(text);
  ParseOptions options;
  options.drop_incomplete = drop;
  options.report = report;
  return parse_dataset(in, options);
}

Corpus random_corpus(std::mt19937_64& rng, std::size_t tasks) {
  Corpus c;
  for (std::size_t t = 0; t < tasks; ++t) {
    Task task;
    task.id = "r" + std::to_string(t);
    task.goal = "goal " + std::to_string(rng() % 5);
    if (rng() % 2) task.subgoal = "sub " + std::to_string(rng() % 3);
    const std::size_t m = 2 + rng() % 14;
    for (std::size_t i = 0; i < m; ++i) {
      task.steps.push_back({static_cast<int>(i + 1), "step " + std::to_string(t) + " " + std::to_string(i),
                            "caption " + std::to_string(rng() % 100)});
    }
    c.tasks.push_back(task);
  }
  return c;
}

}  // namespace

TEST_CASE("parse a complete task") {
  const auto c = parse(
      R"({"id":"a","goal":"Sew","subgoal":null,"steps":[{"text":"one","caption":"c1"},{"text":"two","caption":"c2"},{"text":"three","caption":"c3"}]})"
      "\n");
  REQUIRE(c.tasks.size() == 1);
  CHECK(c.tasks[0].steps.size() == 3);
  CHECK_FALSE(c.tasks[0].subgoal.has_value());
  CHECK(c.tasks[0].steps[2].index == 3);
}

TEST_CASE("drop_incomplete removes caption-less steps and short tasks") {
  const std::string text =
      R"({"id":"a","goal":"g","steps":[{"text":"one","caption":"c"},{"text":"two","caption":null},{"text":"three","caption":"c"}]})"
      "\n"
      R"({"id":"b","goal":"g","steps":[{"text":"one","caption":"c"},{"text":"two"}]})"
      "\n";
  ParseReport report;
  const auto c = parse(text, true, &report);
  REQUIRE(c.tasks.size() == 1);
  CHECK(c.tasks[0].steps.size() == 2);
  CHECK(c.tasks[0].steps[1].step_text == "three");
  CHECK(c.tasks[0].steps[1].index == 2);
  CHECK(report.dropped_steps == 2);
  CHECK(report.removed_tasks == 1);
  CHECK(report.records == 2);
  CHECK_THROWS_AS(parse(text, false), DatasetError);
}

TEST_CASE("single-step task is removed") {
  const auto c = parse(R"({"id":"a","goal":"g","steps":[{"text":"one","caption":"c"}]})"
                       "\n"
                       R"({"id":"b","goal":"g","steps":[{"text":"x","caption":"c"},{"text":"y","caption":"c"}]})");
  REQUIRE(c.tasks.size() == 1);
  CHECK(c.tasks[0].id == "b");
}

TEST_CASE("parse errors report line numbers") {
  std::string text;
  for (int i = 0; i < 6; ++i) {
    text += R"({"id":"t)" + std::to_string(i) + R"(","goal":"g","steps":[{"text":"a","caption":"b"},{"text":"c","caption":"d"}]})" + "\n";
  }
  const std::string malformed = text + "{\"id\": \"broken\", \n";
  try {
    parse(malformed);
    FAIL("expected an error");
  } catch (const DatasetError& e) {
    CHECK(e.line() == 7);
    CHECK(std::string(e.what()).find("line 7") != std::string::npos);
  }
  const std::string dup = text + R"({"id":"t0","goal":"g","steps":[{"text":"a","caption":"b"},{"text":"c","caption":"d"}]})";
  CHECK_THROWS_WITH_AS(parse(dup), doctest::Contains("duplicate"), DatasetError);
  CHECK_THROWS_AS(parse(""), DatasetError);
  CHECK_THROWS_AS(parse(R"({"goal":"g","steps":[]})"), DatasetError);
}

TEST_CASE("build_examples windows") {
  Corpus c;
  Task t;
  t.id = "t";
  t.goal = "g";
  for (int i = 1; i <= 3; ++i) t.steps.push_back({i, "s" + std::to_string(i), "c" + std::to_string(i)});
  c.tasks.push_back(t);
  auto ex = build_examples(c);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].history.size() == 1);
  CHECK(ex[0].target == "s2");
  CHECK(ex[0].position == 1);
  CHECK(ex[1].history.size() == 2);
  CHECK(ex[1].history[1].first == "s2");
  CHECK(ex[1].target == "s3");

  for (int i = 4; i <= 12; ++i) c.tasks[0].steps.push_back({i, "s" + std::to_string(i), "c"});
  ex = build_examples(c);
  const auto& last = ex.back();
  CHECK(last.target == "s12");
  REQUIRE(last.history.size() == 10);
  CHECK(last.history.front().first == "s2");
  CHECK(last.history.back().first == "s11");
  CHECK(build_examples(Corpus{}).empty());
}

TEST_CASE("build_examples count and contiguity on random corpora") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = random_corpus(rng, 1 + rng() % 10);
    const auto ex = build_examples(c);
    std::size_t expected = 0;
    for (const auto& t : c.tasks) expected += t.steps.size() - 1;
    CHECK(ex.size() == expected);
    std::size_t k = 0;
    for (const auto& t : c.tasks) {
      for (std::size_t target = 1; target < t.steps.size(); ++target, ++k) {
        const auto& e = ex[k];
        CHECK(e.task_id == t.id);
        CHECK(e.target == t.steps[target].step_text);
        const std::size_t start = target - e.history.size();
        CHECK(e.history.size() == std::min<std::size_t>(target, 10));
        for (std::size_t h = 0; h < e.history.size(); ++h) {
          CHECK(e.history[h].first == t.steps[start + h].step_text);
          CHECK(e.history[h].second == t.steps[start + h].caption_text);
        }
      }
    }
  }
}

TEST_CASE("serialize round trip") {
  std::mt19937_64 rng(5);
  const auto c = random_corpus(rng, 8);
  std::stringstream buffer;
  write_dataset(c, buffer);
  const auto back = parse_dataset(buffer);
  REQUIRE(back.tasks.size() == c.tasks.size());
  for (std::size_t i = 0; i < c.tasks.size(); ++i) {
    CHECK(back.tasks[i].id == c.tasks[i].id);
    CHECK(back.tasks[i].goal == c.tasks[i].goal);
    CHECK(back.tasks[i].subgoal == c.tasks[i].subgoal);
    REQUIRE(back.tasks[i].steps.size() == c.tasks[i].steps.size());
    for (std::size_t j = 0; j < c.tasks[i].steps.size(); ++j) {
      CHECK(back.tasks[i].steps[j].step_text == c.tasks[i].steps[j].step_text);
      CHECK(back.tasks[i].steps[j].caption_text == c.tasks[i].steps[j].caption_text);
      CHECK(back.tasks[i].steps[j].index == c.tasks[i].steps[j].index);
    }
  }
}

TEST_CASE("corpus_stats arithmetic") {
  Corpus c;
  for (int n : {3, 5}) {
    Task t;
    t.id = "t" + std::to_string(n);
    t.goal = n == 3 ? "grow roses" : "Grow Roses";
    for (int i = 1; i <= n; ++i) t.steps.push_back({i, "water the roses", "c"});
    c.tasks.push_back(t);
  }
  const auto stats = corpus_stats(c, build_vocab(c));
  CHECK(stats.task_count == 2);
  CHECK(stats.pair_count == 8);
  CHECK(stats.mean_steps_per_sample == doctest::Approx(4.0));
  CHECK(stats.mean_tokens_per_step == doctest::Approx(3.0));
  CHECK(stats.goal_count == 1);
}
