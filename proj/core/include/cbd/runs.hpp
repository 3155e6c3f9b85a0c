#pragma once

// Declarative run and training jobs: configuration documents, run
// directories, and the data-preparation step. Configs are validated in
// full before any file is written.

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbd/backend.hpp"
#include "cbd/corpus.hpp"
#include "cbd/evalkit.hpp"
#include "cbd/pipeline.hpp"
#include "cbd/tuning.hpp"

namespace cbd {

// ---------------------------------------------------------------------------
// Backend descriptors as JSON
// ---------------------------------------------------------------------------

/// Throws ConfigError with key paths.
BackendDescriptor parse_backend_descriptor(std::string_view json_text,
                                           const std::filesystem::path& base_dir = {});
std::string backend_descriptor_to_json(const BackendDescriptor& d);

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct PrepareResult {
  std::size_t rows_read = 0;
  std::size_t rejected = 0;
  SplitSizes sizes;
  std::filesystem::path out_dir;
};

/// Loads `input` with `schema`, splits it and writes train.jsonl,
/// validation.jsonl, test.jsonl and rejects.jsonl under out_dir.
PrepareResult prepare_data(const std::filesystem::path& input, const SchemaMapping& schema,
                           const SplitSpec& split, const std::filesystem::path& out_dir);

/// Concatenates record files; ids must be unique across them.
std::vector<LabeledPost> read_record_files(std::span<const std::filesystem::path> files);

// ---------------------------------------------------------------------------
// Experiment runs
// ---------------------------------------------------------------------------

struct RunConfig {
  ExperimentSpec spec;
  std::vector<std::filesystem::path> corpus;         // records to classify
  std::vector<std::filesystem::path> exemplar_pool;  // few_shot
  std::filesystem::path gold_aggression;             // gold_diagnostic: {post_id: label}
  std::vector<std::filesystem::path> template_files;
  std::filesystem::path synonyms;
  std::filesystem::path output_dir;
  FailurePolicy policy = FailurePolicy::exclude_and_report;
};

/// Relative paths resolve against base_dir. Throws ConfigError listing
/// every invalid field by key path.
RunConfig parse_run_config(std::string_view json_text, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& file);

/// Canonical JSON with absolute paths; re-parses to the same config.
std::string run_config_to_json(const RunConfig& config);

/// Content hash of the canonical config (output_dir excluded) and the
/// bytes of every referenced input file.
std::string run_id_for(const RunConfig& config);

struct RunResult {
  std::string run_id;
  std::filesystem::path dir;
  std::vector<Prediction> predictions;
  EvalReport report;
};

/// Writes output_dir/<run_id>/{manifest.json, predictions.jsonl,
/// responses.jsonl, report.json}. The manifest is itself a valid run config.
RunResult execute_run(const RunConfig& config);

struct StoredRun {
  GridKey key;
  EvalReport report;
  std::filesystem::path dir;
};

/// Reads manifest.json and report.json from a run directory.
StoredRun load_run(const std::filesystem::path& dir);

/// Each argument is a run directory or a directory holding run directories.
/// Throws when nothing is found.
std::vector<std::filesystem::path> find_runs(std::span<const std::filesystem::path> roots);

// ---------------------------------------------------------------------------
// Training jobs
// ---------------------------------------------------------------------------

struct TrainConfig {
  TuneMethod method = TuneMethod::lora_sft;
  Task task = Task::aggression;                     // lora_sft
  std::vector<std::filesystem::path> train;         // lora_sft
  std::vector<std::filesystem::path> aggression_train;     // mtl
  std::vector<std::filesystem::path> cyberbullying_train;  // mtl
  // lora_sft on cyberbullying: aggression checkpoint whose predictions
  // enrich every training input.
  std::filesystem::path enrich_with;
  NetworkConfig network;
  TuneConfig tune;
  bool learning_rate_defaulted = false;
  std::filesystem::path output_dir;
  std::vector<std::string> warnings;
};

TrainConfig parse_train_config(std::string_view json_text, const std::filesystem::path& base_dir);
TrainConfig load_train_config(const std::filesystem::path& file);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::filesystem::path manifest;
  std::size_t steps = 0;
  std::vector<std::string> warnings;
};

/// Writes checkpoint.cbd, metrics.jsonl (one line per optimizer step) and
/// manifest.json under output_dir.
TrainResult execute_train(const TrainConfig& config);

}  // namespace cbd
