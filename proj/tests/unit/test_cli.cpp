#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "scriptgen/cli.hpp"
#include "scriptgen/corpus.hpp"
#include "synthetic.hpp"

using namespace scriptgen;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path dir;
  explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / name) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::vector<std::string>& args, std::string* out = nullptr, std::string* err = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str();
  if (err) *err = e.str();
  return code;
}

void write_splits(const Workspace& ws) {
  const auto splits = testing::synthetic_splits({12, 4, 5, 3});
  write_dataset(splits.train, ws.path("train.jsonl"));
  write_dataset(splits.valid, ws.path("valid.jsonl"));
  write_dataset(splits.test, ws.path("test.jsonl"));
}

void write_tiny_config(const std::string& path, int k) {
  std::ofstream(path) << R"({"d_model": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "ffn_dim": 16,
    "batch_size": 4, "max_epochs": 1, "lr_peak": 0.001, "warmup_steps": 2, "restart_period": 10,
    "negative_pool": 5, "n_self": 2, "max_valid_examples": 3, "k_retrieved": )"
                      << k << "}";
}

}  // namespace

TEST_CASE("ingest prints statistics and writes a manifest") {
  Workspace ws("scriptgen_cli_ingest");
  write_splits(ws);
  std::string out;
  REQUIRE(run({"ingest", "--data", ws.path("train.jsonl"), "--out", ws.path("c.jsonl")}, &out) == 0);
  CHECK(out.find("tasks") != std::string::npos);
  CHECK(out.find("step-caption pairs") != std::string::npos);
  CHECK(slurp(ws.path("c.jsonl")) == slurp(ws.path("train.jsonl")));
  const auto manifest = nlohmann::json::parse(slurp(ws.path("c.jsonl.run.json")));
  CHECK(manifest["command"] == "ingest");
  CHECK(manifest["version"] == kVersion);
  CHECK(manifest["inputs"].size() == 1);
}

TEST_CASE("ingest reports the malformed line") {
  Workspace ws("scriptgen_cli_badline");
  std::ofstream bad(ws.path("bad.jsonl"));
  for (int i = 0; i < 6; ++i) {
    bad << R"({"id":"t)" << i << R"(","goal":"g","steps":[{"text":"a","caption":"b"},{"text":"c","caption":"d"}]})"
        << '\n';
  }
  bad << "{\"id\": \"broken\", \n";
  bad.close();
  std::string err;
  CHECK(run({"ingest", "--data", ws.path("bad.jsonl"), "--out", ws.path("o.jsonl")}, nullptr, &err) != 0);
  CHECK(err.find("line 7") != std::string::npos);
}

TEST_CASE("index rebuild is byte-identical and query prints ranks") {
  Workspace ws("scriptgen_cli_index");
  write_splits(ws);
  REQUIRE(run({"index", "--train", ws.path("train.jsonl"), "--out", ws.path("a.idx")}) == 0);
  REQUIRE(run({"index", "--train", ws.path("train.jsonl"), "--out", ws.path("b.idx")}) == 0);
  CHECK(slurp(ws.path("a.idx")) == slurp(ws.path("b.idx")));
  std::string out;
  REQUIRE(run({"query", "--index", ws.path("a.idx"), "--query", "water the tomato deeply", "--k", "3"}, &out) == 0);
  CHECK(std::count(out.begin(), out.end(), '\n') == 4);
  CHECK(out.rfind("rank\tscore\ttask_id\tstep\n", 0) == 0);

  std::ofstream(ws.path("empty.jsonl")).close();
  CHECK(run({"index", "--train", ws.path("empty.jsonl"), "--out", ws.path("e.idx")}) != 0);
}

TEST_CASE("train, generate and eval round trip") {
  Workspace ws("scriptgen_cli_pipeline");
  write_splits(ws);
  write_tiny_config(ws.path("cfg.json"), 3);
  std::string err;
  CHECK(run({"train", "--config", ws.path("cfg.json"), "--train", ws.path("train.jsonl"), "--valid",
             ws.path("valid.jsonl"), "--out", ws.path("run")},
            nullptr, &err) != 0);
  CHECK(err.find("scriptgen index") != std::string::npos);

  REQUIRE(run({"index", "--train", ws.path("train.jsonl"), "--out", ws.path("t.idx")}) == 0);
  REQUIRE(run({"train", "--config", ws.path("cfg.json"), "--train", ws.path("train.jsonl"), "--valid",
               ws.path("valid.jsonl"), "--index", ws.path("t.idx"), "--out", ws.path("run"), "--seed", "3"}) == 0);
  CHECK(fs::exists(ws.path("run/model.ckpt")));
  CHECK(fs::exists(ws.path("run/train.log")));
  CHECK(fs::exists(ws.path("run/train_config.json")));
  const auto manifest = nlohmann::json::parse(slurp(ws.path("run/run.json")));
  CHECK(manifest["seed"] == 3);

  const std::vector<std::string> gen = {"generate", "--ckpt", ws.path("run/model.ckpt"), "--corpus",
                                        ws.path("test.jsonl"), "--index", ws.path("t.idx"), "--max-len", "6"};
  std::string a, b;
  REQUIRE(run(gen, &a) == 0);
  REQUIRE(run(gen, &b) == 0);
  CHECK(a == b);
  const auto test_examples = build_examples(parse_dataset(ws.path("test.jsonl")));
  CHECK(static_cast<std::size_t>(std::count(a.begin(), a.end(), '\n')) == test_examples.size());

  SUBCASE("eval of the references scores 1") {
    std::ofstream gold(ws.path("gold.tsv"));
    for (const auto& ex : test_examples) gold << ex.task_id << '\t' << ex.position << '\t' << ex.target << '\n';
    gold.close();
    std::string out;
    REQUIRE(run({"eval", "--generations", ws.path("gold.tsv"), "--corpus", ws.path("test.jsonl"), "--metrics",
                 "bleu,rouge", "--report", ws.path("r.json"), "--per-example"},
                &out) == 0);
    const auto report = nlohmann::json::parse(slurp(ws.path("r.json")));
    CHECK(report["metrics"]["bleu_4"].get<double>() == doctest::Approx(1.0));
    CHECK(report["metrics"]["rouge_l"].get<double>() == doctest::Approx(1.0));
    CHECK_FALSE(report["metrics"].contains("distinct_2"));
    CHECK(report["examples"] == test_examples.size());
    CHECK(out.find("task_id\tposition\tbleu4") != std::string::npos);
    CHECK(fs::exists(ws.path("r.json.run.json")));
  }

  SUBCASE("generate writes to a file with a manifest") {
    auto with_out = gen;
    with_out.insert(with_out.end(), {"--out", ws.path("gen.tsv")});
    REQUIRE(run(with_out) == 0);
    CHECK(slurp(ws.path("gen.tsv")) == a);
    const auto m = nlohmann::json::parse(slurp(ws.path("gen.tsv.run.json")));
    CHECK(m["config"]["beam"] == "5");
  }
}

TEST_CASE("unknown subcommands and flags fail") {
  CHECK(run({"frobnicate"}) != 0);
  CHECK(run({"index", "--nope"}) != 0);
  std::string out;
  CHECK(run({"--version"}, &out) == 0);
}
