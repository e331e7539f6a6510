#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace scriptgen {

inline constexpr const char* kVersion = "0.1.0";

struct RunManifest {
  std::string command;
  std::vector<std::pair<std::string, std::string>> config;  // flag echo, in declaration order
  std::vector<std::pair<std::string, std::string>> inputs;  // path -> fnv1a-64 hex
  std::optional<std::uint64_t> seed;
  std::string started;
  std::string finished;
};

std::string hash_file(const std::string& path);
void write_run_manifest(const std::string& path, const RunManifest& manifest);

struct IngestArgs {
  std::string data;
  std::string out;
  bool drop_incomplete = false;
  std::string split = "train";
};

struct IndexArgs {
  std::string train;
  std::string out;
};

struct QueryArgs {
  std::string index;
  std::string query;
  std::size_t k = 5;
};

struct TrainArgs {
  std::string config;
  std::string train;
  std::string valid;
  std::string index;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct GenerateArgs {
  std::string ckpt;
  std::string corpus;
  std::string index;
  int beam = 5;
  int max_len = 40;
  std::size_t k = 5;
  std::size_t max_history = 10;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string generations;
  std::string corpus;
  std::string metrics = "all";
  bool per_example = false;
  std::string index;
  std::string report;
  bool exclude_history_pool = false;
};

int cmd_ingest(const IngestArgs& args, std::ostream& out);
int cmd_index(const IndexArgs& args, std::ostream& out);
int cmd_query(const QueryArgs& args, std::ostream& out);
int cmd_train(const TrainArgs& args, std::ostream& out);
int cmd_generate(const GenerateArgs& args, std::ostream& out);
int cmd_eval(const EvalArgs& args, std::ostream& out);

/// Parses argv and dispatches. Errors go to `err`; returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace scriptgen
