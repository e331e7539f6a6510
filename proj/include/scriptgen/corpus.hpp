#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scriptgen {

class Tokenizer;

struct StepPair {
  int index = 0;  // 1-based position within the task
  std::string step_text;
  std::string caption_text;
};

struct Task {
  std::string id;
  std::string goal;
  std::optional<std::string> subgoal;
  std::vector<StepPair> steps;
};

enum class Split { Train, Valid, Test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

struct Corpus {
  Split split = Split::Train;
  std::vector<Task> tasks;
};

struct TrainingExample {
  std::string goal;
  std::optional<std::string> subgoal;
  std::vector<std::pair<std::string, std::string>> history;  // (step, caption), most recent last
  std::string target;
  std::string task_id;
  std::size_t position = 0;  // number of steps before the target in the full task
};

struct CorpusStats {
  std::size_t task_count = 0;
  std::size_t pair_count = 0;
  double mean_steps_per_sample = 0.0;
  double mean_tokens_per_step = 0.0;
  /// Distinct goals. Equals task_count when each record is a whole article;
  /// smaller when records are per-subgoal step sequences.
  std::size_t goal_count = 0;
};

/// Raised for any rejected dataset. line() is 1-based, 0 when not tied to a line.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& message, std::size_t line);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct ParseReport {
  std::size_t records = 0;
  std::size_t dropped_steps = 0;   // caption-less or text-less steps removed
  std::size_t removed_tasks = 0;   // tasks left with fewer than two steps
};

struct ParseOptions {
  /// Drop steps lacking text or caption instead of rejecting the file.
  bool drop_incomplete = false;
  Split split = Split::Train;
  ParseReport* report = nullptr;
};

Corpus parse_dataset(const std::string& path, const ParseOptions& options = {});
Corpus parse_dataset(std::istream& in, const ParseOptions& options = {});

/// JSON Lines, the same schema parse_dataset reads.
void write_dataset(const Corpus& corpus, std::ostream& out);
void write_dataset(const Corpus& corpus, const std::string& path);

inline constexpr std::size_t kDefaultMaxHistory = 10;

std::vector<TrainingExample> build_examples(const Corpus& corpus,
                                            std::size_t max_history = kDefaultMaxHistory);

CorpusStats corpus_stats(const Corpus& corpus, const Tokenizer& tokenizer);

}  // namespace scriptgen
