#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "cbd/labels.hpp"

namespace cbd {

enum class DatasetId { D1, D2, D3, D4, D5, D6 };
enum class Split { train, validation, test };

std::string_view dataset_name(DatasetId id);
std::optional<DatasetId> dataset_from_name(std::string_view name);
std::string_view split_name(Split split);
std::optional<Split> split_from_name(std::string_view name);

// One normalized text record. The task is carried by the label variant, so a
// post can never disagree with its own task. Text is stored exactly as read.
struct LabeledPost {
  std::string id;
  std::string text;
  Label label;
  DatasetId dataset = DatasetId::D1;
  Split split = Split::train;  // overwritten by split_corpus
  std::string language_tag;

  Task task() const { return task_of(label); }
  bool operator==(const LabeledPost&) const = default;
};

// Column and label mapping for one raw dataset layout. Raw label values are
// matched case-insensitively after trimming.
struct SchemaMapping {
  DatasetId dataset = DatasetId::D1;
  int version = 1;
  Task task = Task::aggression;
  std::string text_column;
  std::string label_column;
  std::string id_column;  // empty: ids are synthesized as "<dataset>-<row>"
  std::string language_tag;
  char delimiter = ',';
  std::vector<std::pair<std::string, Label>> label_map;
  // Raw categories known to exist in the source but outside the label space.
  std::vector<std::string> excluded_categories;

  /// Normalized label for a raw value, if the mapping covers it.
  std::optional<Label> map_label(std::string_view raw) const;
  bool is_excluded(std::string_view raw) const;
};

/// Built-in mapping for each dataset; mirrors config/schemas/<id>.json.
const SchemaMapping& builtin_schema(DatasetId id);

SchemaMapping parse_schema(std::string_view json_text);
SchemaMapping load_schema_file(const std::filesystem::path& path);
std::string schema_to_json(const SchemaMapping& schema);

struct RejectedRow {
  std::size_t row = 0;  // 1-based data row, header excluded
  std::string reason;   // empty_text, unknown_label, unmapped_category, ...
  std::string detail;
  bool operator==(const RejectedRow&) const = default;
};

struct LoadResult {
  std::vector<LabeledPost> posts;
  std::vector<RejectedRow> rejects;
  std::size_t rows_read = 0;
};

/// Reads a delimited raw dataset with a header row. Rows that cannot become
/// a LabeledPost are reported in `rejects`; accepted + rejected == rows_read.
LoadResult load_dataset(const std::filesystem::path& path,
                        const SchemaMapping& schema);
LoadResult load_dataset(const std::filesystem::path& path, DatasetId id);

// Validation share is either a fraction of the corpus or an absolute count.
// When test_fraction is set, validation and test sizes are floored and the
// remainder goes to train; otherwise train is floored and test takes the
// remainder (the D6 policy).
struct SplitSpec {
  double train_fraction = 0.8;
  std::variant<double, std::size_t> validation = 0.1;
  std::optional<double> test_fraction = 0.1;
  std::uint64_t seed = 0;

  static SplitSpec aggression_default(std::uint64_t seed = 0);
  static SplitSpec d6_default(std::uint64_t seed = 0);
  static SplitSpec default_for(DatasetId id, std::uint64_t seed = 0);

  /// Parses "train=0.8,validation=0.1,test=0.1" style specs; a validation
  /// value without a decimal point is an absolute count.
  static SplitSpec parse(std::string_view text, std::uint64_t seed = 0);

  void validate() const;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
  bool operator==(const SplitSizes&) const = default;
};

SplitSizes split_sizes(std::size_t n, const SplitSpec& spec);

struct CorpusSplits {
  std::vector<LabeledPost> train;
  std::vector<LabeledPost> validation;
  std::vector<LabeledPost> test;

  const std::vector<LabeledPost>& operator[](Split split) const;
  SplitSizes sizes() const { return {train.size(), validation.size(), test.size()}; }
};

/// Deterministic partition: assignment depends only on the post ids and the
/// seed, never on input order. Each split keeps the input order.
CorpusSplits split_corpus(std::span<const LabeledPost> posts,
                          const SplitSpec& spec);

/// Templated posts, n_per_class per class, each embedding its class display
/// name so that a rule-based stub can classify it.
std::vector<LabeledPost> synth_fixture(std::size_t n_per_class, Task task,
                                       std::uint64_t seed);

std::map<Label, std::size_t> class_distribution(
    std::span<const LabeledPost> posts);

// Canonical record files: one JSON object per line with the fields
// id, text, task, label, dataset_id, split, language_tag.
std::string record_to_line(const LabeledPost& post);
LabeledPost record_from_line(std::string_view line);
void write_records(const std::filesystem::path& path,
                   std::span<const LabeledPost> posts);
std::vector<LabeledPost> read_records(const std::filesystem::path& path);

void write_rejects(const std::filesystem::path& path,
                   std::span<const RejectedRow> rejects);

}  // namespace cbd
