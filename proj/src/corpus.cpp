#include "scriptgen/corpus.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "scriptgen/text_pipeline.hpp"

namespace scriptgen {

namespace {

using Json = nlohmann::ordered_json;

std::optional<std::string> optional_string(const Json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DatasetError(std::string("field \"") + key + "\" must be a string or null", line);
  return it->get<std::string>();
}

std::string required_string(const Json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw DatasetError(std::string("missing string field \"") + key + "\"", line);
  }
  return it->get<std::string>();
}

bool has_content(const std::optional<std::string>& text) {
  return text && !normalize_words(*text).empty();
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "valid" || name == "validation") return Split::Valid;
  if (name == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + std::string(name));
}

DatasetError::DatasetError(const std::string& message, std::size_t line)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
      line_(line) {}

Corpus parse_dataset(std::istream& in, const ParseOptions& options) {
  Corpus corpus;
  corpus.split = options.split;
  ParseReport report;
  std::unordered_set<std::string> seen_ids;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json record;
    try {
      record = Json::parse(text);
    } catch (const Json::parse_error& e) {
      throw DatasetError(std::string("malformed record: ") + e.what(), line);
    }
    if (!record.is_object()) throw DatasetError("record must be an object", line);
    ++report.records;

    Task task;
    task.id = required_string(record, "id", line);
    if (task.id.empty()) throw DatasetError("empty task id", line);
    if (!seen_ids.insert(task.id).second) throw DatasetError("duplicate task id \"" + task.id + "\"", line);
    task.goal = required_string(record, "goal", line);
    if (normalize_words(task.goal).empty()) throw DatasetError("empty goal", line);
    task.subgoal = optional_string(record, "subgoal", line);
    if (task.subgoal && normalize_words(*task.subgoal).empty()) task.subgoal.reset();

    auto steps = record.find("steps");
    if (steps == record.end() || !steps->is_array()) throw DatasetError("missing array field \"steps\"", line);
    for (std::size_t i = 0; i < steps->size(); ++i) {
      const auto& step = (*steps)[i];
      if (!step.is_object()) throw DatasetError("step " + std::to_string(i + 1) + " must be an object", line);
      auto step_text = optional_string(step, "text", line);
      auto caption = optional_string(step, "caption", line);
      if (!has_content(step_text) || !has_content(caption)) {
        if (!options.drop_incomplete) {
          throw DatasetError("step " + std::to_string(i + 1) + " of task \"" + task.id +
                                 "\" lacks " + (has_content(step_text) ? "a caption" : "text"),
                             line);
        }
        ++report.dropped_steps;
        continue;
      }
      task.steps.push_back({static_cast<int>(task.steps.size()) + 1, *step_text, *caption});
    }
    if (task.steps.size() < 2) {
      ++report.removed_tasks;
      continue;
    }
    corpus.tasks.push_back(std::move(task));
  }
  if (report.records == 0) throw DatasetError("dataset is empty", 0);
  if (options.report) *options.report = report;
  return corpus;
}

Corpus parse_dataset(const std::string& path, const ParseOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset file: " + path, 0);
  return parse_dataset(in, options);
}

void write_dataset(const Corpus& corpus, std::ostream& out) {
  for (const auto& task : corpus.tasks) {
    Json record;
    record["id"] = task.id;
    record["goal"] = task.goal;
    record["subgoal"] = task.subgoal ? Json(*task.subgoal) : Json(nullptr);
    Json steps = Json::array();
    for (const auto& s : task.steps) steps.push_back({{"text", s.step_text}, {"caption", s.caption_text}});
    record["steps"] = std::move(steps);
    out << record.dump() << '\n';
  }
}

void write_dataset(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  write_dataset(corpus, out);
}

std::vector<TrainingExample> build_examples(const Corpus& corpus, std::size_t max_history) {
  if (max_history == 0) throw std::invalid_argument("max_history must be positive");
  std::vector<TrainingExample> examples;
  for (const auto& task : corpus.tasks) {
    for (std::size_t target = 1; target < task.steps.size(); ++target) {
      TrainingExample ex;
      ex.goal = task.goal;
      ex.subgoal = task.subgoal;
      ex.task_id = task.id;
      ex.position = target;
      ex.target = task.steps[target].step_text;
      const std::size_t first = target > max_history ? target - max_history : 0;
      for (std::size_t i = first; i < target; ++i) {
        ex.history.emplace_back(task.steps[i].step_text, task.steps[i].caption_text);
      }
      examples.push_back(std::move(ex));
    }
  }
  return examples;
}

CorpusStats corpus_stats(const Corpus& corpus, const Tokenizer& tokenizer) {
  CorpusStats stats;
  stats.task_count = corpus.tasks.size();
  std::size_t tokens = 0;
  std::set<std::string> goals;
  for (const auto& task : corpus.tasks) {
    goals.insert(normalize_text(task.goal));
    stats.pair_count += task.steps.size();
    for (const auto& s : task.steps) tokens += tokenizer.encode(s.step_text).size();
  }
  stats.goal_count = goals.size();
  if (stats.task_count > 0) {
    stats.mean_steps_per_sample = static_cast<double>(stats.pair_count) / static_cast<double>(stats.task_count);
  }
  if (stats.pair_count > 0) {
    stats.mean_tokens_per_step = static_cast<double>(tokens) / static_cast<double>(stats.pair_count);
  }
  return stats;
}

}  // namespace scriptgen
