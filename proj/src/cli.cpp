#include "scriptgen/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "scriptgen/corpus.hpp"
#include "scriptgen/inference.hpp"
#include "scriptgen/metrics.hpp"
#include "scriptgen/retrieval.hpp"
#include "scriptgen/text_pipeline.hpp"
#include "scriptgen/training.hpp"

namespace scriptgen {

namespace {

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

class ManifestScope {
 public:
  ManifestScope(std::string command, std::string path) : path_(std::move(path)) {
    manifest_.command = std::move(command);
    manifest_.started = now_utc();
  }
  void config(const std::string& key, const std::string& value) { manifest_.config.emplace_back(key, value); }
  void input(const std::string& path) {
    if (!path.empty()) manifest_.inputs.emplace_back(path, hash_file(path));
  }
  void seed(std::uint64_t s) { manifest_.seed = s; }
  void write() {
    manifest_.finished = now_utc();
    write_run_manifest(path_, manifest_);
  }

 private:
  std::string path_;
  RunManifest manifest_;
};

std::ofstream open_output(const std::string& path) {
  if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
    std::filesystem::create_directories(parent);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

struct Generation {
  std::string task_id;
  std::size_t position = 0;
  std::string text;
};

std::vector<Generation> read_generations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open generations file: " + path);
  std::vector<Generation> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) {
      throw std::runtime_error(path + ": line " + std::to_string(number) + ": expected task_id<TAB>position<TAB>text");
    }
    Generation g;
    g.task_id = line.substr(0, a);
    try {
      g.position = std::stoul(line.substr(a + 1, b - a - 1));
    } catch (const std::exception&) {
      throw std::runtime_error(path + ": line " + std::to_string(number) + ": bad position");
    }
    g.text = line.substr(b + 1);
    rows.push_back(std::move(g));
  }
  return rows;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::stringstream s(text);
  std::string item;
  while (std::getline(s, item, ',')) {
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

}  // namespace

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buffer[1 << 14];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buffer[i]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void write_run_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::ordered_json j;
  j["command"] = manifest.command;
  j["version"] = kVersion;
  j["config"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : manifest.config) j["config"][k] = v;
  j["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : manifest.inputs) j["inputs"][k] = v;
  if (manifest.seed) {
    j["seed"] = *manifest.seed;
  } else {
    j["seed"] = nullptr;
  }
  j["started"] = manifest.started;
  j["finished"] = manifest.finished;
  auto out = open_output(path);
  out << j.dump(2) << '\n';
}

int cmd_ingest(const IngestArgs& args, std::ostream& out) {
  ManifestScope manifest("ingest", args.out + ".run.json");
  manifest.config("data", args.data);
  manifest.config("out", args.out);
  manifest.config("drop_incomplete", args.drop_incomplete ? "true" : "false");
  manifest.config("split", args.split);
  manifest.input(args.data);

  ParseReport report;
  ParseOptions options;
  options.drop_incomplete = args.drop_incomplete;
  options.split = split_from_string(args.split);
  options.report = &report;
  const Corpus corpus = parse_dataset(args.data, options);
  write_dataset(corpus, args.out);
  const auto stats = corpus_stats(corpus, build_vocab(corpus));

  out << "split                 " << to_string(corpus.split) << '\n'
      << "records               " << report.records << '\n'
      << "tasks                 " << stats.task_count << '\n'
      << "goals                 " << stats.goal_count << '\n'
      << "step-caption pairs    " << stats.pair_count << '\n'
      << "mean steps/sample     " << fmt(stats.mean_steps_per_sample, 2) << '\n'
      << "mean tokens/step      " << fmt(stats.mean_tokens_per_step, 2) << '\n'
      << "dropped steps         " << report.dropped_steps << '\n'
      << "removed tasks         " << report.removed_tasks << '\n';
  manifest.write();
  return 0;
}

int cmd_index(const IndexArgs& args, std::ostream& out) {
  ManifestScope manifest("index", args.out + ".run.json");
  manifest.config("train", args.train);
  manifest.config("out", args.out);
  manifest.input(args.train);
  const auto index = EmbeddingIndex::build(parse_dataset(args.train));
  index.save_file(args.out);
  out << "index entries         " << index.size() << '\n'
      << "dimension             " << index.dimension() << '\n';
  manifest.write();
  return 0;
}

int cmd_query(const QueryArgs& args, std::ostream& out) {
  const auto index = EmbeddingIndex::load_file(args.index);
  const auto set = retrieve_next_steps(index, args.query, args.k);
  out << "rank\tscore\ttask_id\tstep\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << i + 1 << '\t' << fmt(set.scores[i], 6) << '\t' << set.task_ids[i] << '\t' << set.steps[i] << '\n';
  }
  return 0;
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
  TrainConfig config = load_train_config(args.config);
  if (args.seed) config.seed = *args.seed;
  if (config.k_retrieved > 0 && args.index.empty()) {
    throw std::invalid_argument(
        "k_retrieved > 0 requires a retrieval index; build one first with `scriptgen index --train <corpus> --out "
        "<index>` and pass it via --index");
  }
  std::filesystem::create_directories(args.out);
  ManifestScope manifest("train", (std::filesystem::path(args.out) / "run.json").string());
  manifest.config("config", args.config);
  manifest.config("train", args.train);
  manifest.config("valid", args.valid);
  manifest.config("index", args.index);
  manifest.config("out", args.out);
  manifest.input(args.config);
  manifest.input(args.train);
  manifest.input(args.valid);
  manifest.input(args.index);
  manifest.seed(config.seed);

  const Corpus train_corpus = parse_dataset(args.train);
  ParseOptions valid_options;
  valid_options.split = Split::Valid;
  const Corpus valid_corpus = parse_dataset(args.valid, valid_options);
  const Tokenizer tokenizer = build_vocab(train_corpus, config.min_freq);
  std::optional<EmbeddingIndex> index;
  if (!args.index.empty()) index = EmbeddingIndex::load_file(args.index);

  {
    auto echo = open_output((std::filesystem::path(args.out) / "train_config.json").string());
    echo << to_json(config) << '\n';
  }
  TrainInputs inputs;
  inputs.train = &train_corpus;
  inputs.valid = &valid_corpus;
  inputs.tokenizer = &tokenizer;
  inputs.index = index ? &*index : nullptr;
  inputs.config = config;
  const auto result = train(inputs, args.out);

  out << "epochs run            " << result.epochs_run << (result.stopped_early ? " (early stop)" : "") << '\n'
      << "optimizer steps       " << result.steps << '\n'
      << "best val BLEU-4       " << fmt(result.best.bleu4) << '\n'
      << "best val ROUGE-L      " << fmt(result.best.rouge_l) << '\n'
      << "checkpoint            " << result.checkpoint_path << '\n'
      << "log                   " << result.log_path << '\n';
  manifest.write();
  return 0;
}

int cmd_generate(const GenerateArgs& args, std::ostream& out) {
  if (args.k > 0 && args.index.empty()) {
    throw std::invalid_argument("retrieval needs --index (build one with `scriptgen index`), or pass --k 0");
  }
  const std::string manifest_path = args.out.empty() ? std::string() : args.out + ".run.json";
  ManifestScope manifest("generate", manifest_path);
  manifest.config("ckpt", args.ckpt);
  manifest.config("corpus", args.corpus);
  manifest.config("index", args.index);
  manifest.config("beam", std::to_string(args.beam));
  manifest.config("max_len", std::to_string(args.max_len));
  manifest.config("k", std::to_string(args.k));
  manifest.config("max_history", std::to_string(args.max_history));
  manifest.config("out", args.out);
  manifest.input(args.ckpt);
  manifest.input(args.corpus);
  manifest.input(args.index);
  if (args.seed) manifest.seed(*args.seed);

  const auto checkpoint = load_checkpoint(args.ckpt);
  std::optional<EmbeddingIndex> index;
  if (!args.index.empty()) index = EmbeddingIndex::load_file(args.index);
  const auto examples = build_examples(parse_dataset(args.corpus), args.max_history);
  const NextStepGenerator generator(checkpoint.model, checkpoint.tokenizer);
  BeamOptions options;
  options.beam = args.beam;
  options.max_len = args.max_len;

  std::ofstream file;
  if (!args.out.empty()) file = open_output(args.out);
  std::ostream& sink = args.out.empty() ? out : file;
  for (const auto& ex : examples) {
    const auto retrieved = retrieve_for_example(index ? &*index : nullptr, ex, args.k, false);
    sink << ex.task_id << '\t' << ex.position << '\t' << generator.generate(ex, retrieved, options) << '\n';
  }
  if (!args.out.empty()) {
    out << "generations           " << examples.size() << '\n' << "written to            " << args.out << '\n';
    file.close();
    manifest.write();
  }
  return 0;
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  const std::string manifest_path = (args.report.empty() ? args.generations + ".eval" : args.report) + ".run.json";
  ManifestScope manifest("eval", manifest_path);
  manifest.config("generations", args.generations);
  manifest.config("corpus", args.corpus);
  manifest.config("metrics", args.metrics);
  manifest.config("per_example", args.per_example ? "true" : "false");
  manifest.config("index", args.index);
  manifest.config("report", args.report);
  manifest.config("exclude_history_pool", args.exclude_history_pool ? "true" : "false");
  manifest.input(args.generations);
  manifest.input(args.corpus);
  manifest.input(args.index);

  const Corpus corpus = parse_dataset(args.corpus);
  std::map<std::string, const Task*> by_id;
  std::map<std::string, std::vector<const Task*>> by_goal;
  for (const auto& task : corpus.tasks) {
    by_id[task.id] = &task;
    by_goal[normalize_text(task.goal)].push_back(&task);
  }
  std::vector<EvalItem> items;
  for (const auto& g : read_generations(args.generations)) {
    const auto it = by_id.find(g.task_id);
    if (it == by_id.end()) throw std::runtime_error("generation refers to unknown task: " + g.task_id);
    const Task& task = *it->second;
    if (g.position == 0 || g.position >= task.steps.size()) {
      throw std::runtime_error("generation position out of range for task " + g.task_id);
    }
    EvalItem item;
    item.task_id = g.task_id;
    item.position = g.position;
    item.generated = g.text;
    item.reference = task.steps[g.position].step_text;
    for (std::size_t i = 0; i < g.position; ++i) item.history.push_back(task.steps[i].step_text);
    for (const Task* other : by_goal[normalize_text(task.goal)]) {
      for (std::size_t i = 0; i < other->steps.size(); ++i) {
        const bool own = other == &task;
        if (own && i < g.position && args.exclude_history_pool) continue;
        if (own && i >= g.position) item.future.push_back(item.pool.size());
        item.pool.push_back(other->steps[i].step_text);
      }
    }
    items.push_back(std::move(item));
  }

  SentenceEmbedder embedder;
  if (!args.index.empty()) {
    embedder = EmbeddingIndex::load_file(args.index).embedder();
  } else {
    std::vector<std::string> documents;
    for (const auto& task : corpus.tasks) {
      for (const auto& s : task.steps) documents.push_back(s.step_text);
    }
    embedder = SentenceEmbedder(kDefaultEmbeddingDim);
    embedder.fit(documents);
  }

  const auto report = evaluate(items, split_list(args.metrics), &embedder);
  out << "metric                value (%)\n";
  for (const auto& [key, value] : report.values) out << std::left << std::setw(22) << key << fmt(100.0 * value, 2) << '\n';
  out << std::left << std::setw(22) << "examples" << report.examples << '\n';
  for (const auto& w : report.warnings) out << "warning: " << w << '\n';
  if (args.per_example) {
    out << "task_id\tposition\tbleu4\trouge_l\toverlap1\ttext_hit\n";
    for (const auto& item : items) {
      const auto s = score_example(item, &embedder);
      out << item.task_id << '\t' << item.position << '\t' << fmt(s.bleu4) << '\t' << fmt(s.rouge_l) << '\t'
          << fmt(s.overlap1) << '\t' << (s.text_hit ? (*s.text_hit ? "1" : "0") : "-") << '\n';
    }
  }
  if (!args.report.empty()) {
    nlohmann::ordered_json j;
    j["examples"] = report.examples;
    for (const auto& [key, value] : report.values) j["metrics"][key] = value;
    j["warnings"] = report.warnings;
    auto file = open_output(args.report);
    file << j.dump(2) << '\n';
  }
  manifest.write();
  return 0;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimedia generative script learning: next-step generation with retrieval"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Validate a JSONL dataset and write a corpus file");
  c_ingest->add_option("--data", ingest.data, "Input JSONL")->required();
  c_ingest->add_option("--out", ingest.out, "Output corpus")->required();
  c_ingest->add_flag("--drop-incomplete", ingest.drop_incomplete, "Drop steps missing text or caption");
  c_ingest->add_option("--split", ingest.split, "train | valid | test")->check(CLI::IsMember({"train", "valid", "test"}));

  IndexArgs index;
  auto* c_index = app.add_subcommand("index", "Build the retrieval index from a training corpus");
  c_index->add_option("--train", index.train)->required();
  c_index->add_option("--out", index.out)->required();

  QueryArgs query;
  auto* c_query = app.add_subcommand("query", "Print the top-k retrieved next steps for a query step");
  c_query->add_option("--index", query.index)->required();
  c_query->add_option("--query", query.query)->required();
  c_query->add_option("--k", query.k)->check(CLI::PositiveNumber);

  TrainArgs train_args;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--config", train_args.config, "JSON training config")->required();
  c_train->add_option("--train", train_args.train)->required();
  c_train->add_option("--valid", train_args.valid)->required();
  c_train->add_option("--index", train_args.index);
  c_train->add_option("--out", train_args.out, "Output directory")->required();
  c_train->add_option("--seed", train_args.seed);

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Generate next steps with beam search");
  c_gen->add_option("--ckpt", gen.ckpt)->required();
  c_gen->add_option("--corpus", gen.corpus)->required();
  c_gen->add_option("--index", gen.index);
  c_gen->add_option("--beam", gen.beam, "Beam size")->check(CLI::PositiveNumber)->capture_default_str();
  c_gen->add_option("--max-len", gen.max_len)->check(CLI::PositiveNumber)->capture_default_str();
  c_gen->add_option("--k", gen.k, "Retrieved steps")->capture_default_str();
  c_gen->add_option("--max-history", gen.max_history)->check(CLI::PositiveNumber)->capture_default_str();
  c_gen->add_option("--out", gen.out, "Generations TSV (stdout when omitted)");
  c_gen->add_option("--seed", gen.seed);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Score generations against a corpus");
  c_eval->add_option("--generations", eval.generations)->required();
  c_eval->add_option("--corpus", eval.corpus)->required();
  c_eval->add_option("--metrics", eval.metrics, "Comma list: bleu,rouge,self_bleu,distinct,overlap,text_at_1,all");
  c_eval->add_flag("--per-example", eval.per_example);
  c_eval->add_option("--index", eval.index, "Index whose embedder scores Text@1");
  c_eval->add_option("--report", eval.report, "Write the key-value report as JSON");
  c_eval->add_flag("--exclude-history-pool", eval.exclude_history_pool,
                   "Drop the example's own history steps from the Text@1 pool");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    if (*c_ingest) return cmd_ingest(ingest, out);
    if (*c_index) return cmd_index(index, out);
    if (*c_query) return cmd_query(query, out);
    if (*c_train) return cmd_train(train_args, out);
    if (*c_gen) return cmd_generate(gen, out);
    if (*c_eval) return cmd_eval(eval, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace scriptgen
