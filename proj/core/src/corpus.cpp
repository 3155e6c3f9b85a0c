#include "cbd/corpus.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_set>

#include "cbd/error.hpp"
#include "cbd/random.hpp"
#include "detail/csv.hpp"
#include "detail/strings.hpp"
#include "json.hpp"

namespace cbd {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 6> kDatasetNames{"D1", "D2", "D3",
                                                        "D4", "D5", "D6"};

// Guards floor() against representation error, e.g. 0.29 * 100.
constexpr double kFloorSlack = 1e-9;

std::size_t floor_share(double fraction, std::size_t n) {
  return static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(n) + kFloorSlack));
}

SchemaMapping aggression_schema(DatasetId id, std::string text_column,
                                std::string label_column, std::string id_column,
                                std::string language) {
  SchemaMapping s;
  s.dataset = id;
  s.task = Task::aggression;
  s.text_column = std::move(text_column);
  s.label_column = std::move(label_column);
  s.id_column = std::move(id_column);
  s.language_tag = std::move(language);
  s.label_map = {
      {"0", AggressionLabel::NAG}, {"1", AggressionLabel::CAG},
      {"2", AggressionLabel::OAG}, {"NAG", AggressionLabel::NAG},
      {"CAG", AggressionLabel::CAG}, {"OAG", AggressionLabel::OAG},
  };
  return s;
}

std::array<SchemaMapping, 6> make_builtin_schemas() {
  SchemaMapping d6;
  d6.dataset = DatasetId::D6;
  d6.task = Task::cyberbullying;
  d6.text_column = "tweet_text";
  d6.label_column = "cyberbullying_type";
  d6.language_tag = "en";
  d6.label_map = {
      {"ethnicity", CyberbullyingLabel::ethnicity_race},
      {"religion", CyberbullyingLabel::religion},
      {"gender", CyberbullyingLabel::gender_sexual},
      {"not_cyberbullying", CyberbullyingLabel::not_cyberbullying},
  };
  d6.excluded_categories = {"age", "other_cyberbullying"};
  return {
      aggression_schema(DatasetId::D1, "text", "label", "", "en"),
      aggression_schema(DatasetId::D2, "Text", "Sub-task A", "ID", "hi-en"),
      aggression_schema(DatasetId::D3, "text", "label", "id", "en-hi"),
      aggression_schema(DatasetId::D4, "Text", "Sub-task A", "ID", "en-hi-bn"),
      aggression_schema(DatasetId::D5, "text", "label", "", "en"),
      d6,
  };
}

json label_to_json(const Label& l) { return std::string(label_key(l)); }

}  // namespace

std::string_view dataset_name(DatasetId id) {
  return kDatasetNames.at(static_cast<std::size_t>(id));
}

std::optional<DatasetId> dataset_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kDatasetNames.size(); ++i) {
    if (kDatasetNames[i] == name) return static_cast<DatasetId>(i);
  }
  return std::nullopt;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

std::optional<Split> split_from_name(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "validation") return Split::validation;
  if (name == "test") return Split::test;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

std::optional<Label> SchemaMapping::map_label(std::string_view raw) const {
  auto key = detail::trim(raw);
  for (const auto& [from, to] : label_map) {
    if (detail::iequals(from, key)) return to;
  }
  return std::nullopt;
}

bool SchemaMapping::is_excluded(std::string_view raw) const {
  auto key = detail::trim(raw);
  return std::any_of(excluded_categories.begin(), excluded_categories.end(),
                     [&](const std::string& c) { return detail::iequals(c, key); });
}

const SchemaMapping& builtin_schema(DatasetId id) {
  static const std::array<SchemaMapping, 6> schemas = make_builtin_schemas();
  return schemas.at(static_cast<std::size_t>(id));
}

SchemaMapping parse_schema(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("schema: ") + e.what());
  }
  auto need = [&](const char* key) -> const json& {
    if (!j.contains(key)) throw InvalidArgument(std::string("schema: missing key ") + key);
    return j.at(key);
  };

  SchemaMapping s;
  try {
    auto ds = dataset_from_name(need("dataset_id").get<std::string>());
    if (!ds) throw InvalidArgument("schema: unknown dataset_id");
    s.dataset = *ds;
    s.version = need("version").get<int>();
    auto task = task_from_name(need("task").get<std::string>());
    if (!task) throw InvalidArgument("schema: unknown task");
    s.task = *task;
    s.text_column = need("text_column").get<std::string>();
    s.label_column = need("label_column").get<std::string>();
    s.id_column = j.value("id_column", "");
    s.language_tag = need("language_tag").get<std::string>();
    auto delim = j.value("delimiter", std::string(","));
    if (delim == "\\t" || delim == "\t") delim = "\t";
    if (delim.size() != 1) throw InvalidArgument("schema: delimiter must be one character");
    s.delimiter = delim[0];

    std::set<std::string> seen;
    for (const auto& [raw, target] : need("label_map").items()) {
      auto lowered = detail::ascii_lower(detail::trim(raw));
      if (!seen.insert(lowered).second) {
        throw InvalidArgument("schema: raw label '" + raw + "' mapped twice");
      }
      auto label = label_from_key(s.task, target.get<std::string>());
      if (!label) {
        throw InvalidArgument("schema: raw label '" + raw +
                              "' maps to unknown label '" +
                              target.get<std::string>() + "'");
      }
      s.label_map.emplace_back(raw, *label);
    }
    for (const auto& c : j.value("excluded_categories", json::array())) {
      auto name = c.get<std::string>();
      if (seen.count(detail::ascii_lower(name))) {
        throw InvalidArgument("schema: '" + name + "' is both mapped and excluded");
      }
      s.excluded_categories.push_back(std::move(name));
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("schema: ") + e.what());
  }
  if (s.label_map.empty()) throw InvalidArgument("schema: empty label_map");
  return s;
}

SchemaMapping load_schema_file(const std::filesystem::path& path) {
  return parse_schema(detail::read_file(path));
}

std::string schema_to_json(const SchemaMapping& s) {
  json j;
  j["dataset_id"] = dataset_name(s.dataset);
  j["version"] = s.version;
  j["task"] = task_name(s.task);
  j["text_column"] = s.text_column;
  j["label_column"] = s.label_column;
  j["id_column"] = s.id_column;
  j["language_tag"] = s.language_tag;
  j["delimiter"] = s.delimiter == '\t' ? std::string("\\t") : std::string(1, s.delimiter);
  json map = json::object();
  for (const auto& [raw, label] : s.label_map) map[raw] = label_to_json(label);
  j["label_map"] = map;
  j["excluded_categories"] = s.excluded_categories;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

LoadResult load_dataset(const std::filesystem::path& path,
                        const SchemaMapping& schema) {
  const std::string data = detail::read_file(path);
  auto records = detail::parse_delimited(data, schema.delimiter);
  if (records.empty()) throw IoError(path.string() + ": missing header row");

  const auto& header = records.front().fields;
  auto column = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (detail::trim(header[i]) == name) return i;
    }
    return std::nullopt;
  };
  auto text_col = column(schema.text_column);
  auto label_col = column(schema.label_column);
  if (!text_col || !label_col) {
    throw IoError(path.string() + ": header lacks column '" +
                  (!text_col ? schema.text_column : schema.label_column) + "'");
  }
  std::optional<std::size_t> id_col;
  if (!schema.id_column.empty()) {
    id_col = column(schema.id_column);
    if (!id_col) {
      throw IoError(path.string() + ": header lacks column '" + schema.id_column + "'");
    }
  }

  LoadResult result;
  std::unordered_set<std::string> ids;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::size_t row = r;
    ++result.rows_read;
    auto reject = [&](std::string reason, std::string detail_text) {
      result.rejects.push_back({row, std::move(reason), std::move(detail_text)});
    };

    if (rec.malformed || rec.fields.size() != header.size()) {
      reject("malformed_row", "expected " + std::to_string(header.size()) +
                                  " fields, got " + std::to_string(rec.fields.size()));
      continue;
    }
    const std::string& text = rec.fields[*text_col];
    if (detail::trim(text).empty()) {
      reject("empty_text", "");
      continue;
    }
    if (!detail::valid_utf8(text)) {
      reject("invalid_utf8", "");
      continue;
    }
    const std::string& raw_label = rec.fields[*label_col];
    auto label = schema.map_label(raw_label);
    if (!label) {
      reject(schema.is_excluded(raw_label) ? "unmapped_category" : "unknown_label",
             std::string(detail::trim(raw_label)));
      continue;
    }
    std::string id;
    if (id_col) {
      id = std::string(detail::trim(rec.fields[*id_col]));
      if (id.empty()) {
        reject("missing_id", "");
        continue;
      }
    } else {
      id = std::string(dataset_name(schema.dataset)) + "-" + std::to_string(row);
    }
    if (!ids.insert(id).second) {
      reject("duplicate_id", id);
      continue;
    }
    result.posts.push_back(LabeledPost{std::move(id), text, *label,
                                       schema.dataset, Split::train,
                                       schema.language_tag});
  }
  return result;
}

LoadResult load_dataset(const std::filesystem::path& path, DatasetId id) {
  return load_dataset(path, builtin_schema(id));
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

SplitSpec SplitSpec::aggression_default(std::uint64_t seed) {
  return SplitSpec{0.8, 0.1, 0.1, seed};
}

SplitSpec SplitSpec::d6_default(std::uint64_t seed) {
  return SplitSpec{0.75, std::size_t{2000}, std::nullopt, seed};
}

SplitSpec SplitSpec::default_for(DatasetId id, std::uint64_t seed) {
  return id == DatasetId::D6 ? d6_default(seed) : aggression_default(seed);
}

SplitSpec SplitSpec::parse(std::string_view text, std::uint64_t seed) {
  SplitSpec spec;
  spec.seed = seed;
  spec.test_fraction.reset();
  bool have_train = false;
  bool have_validation = false;
  for (const auto& part : detail::split(text, ',')) {
    auto eq = part.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("split spec: expected key=value, got '" + part + "'");
    }
    auto key = std::string(detail::trim(std::string_view(part).substr(0, eq)));
    auto value = std::string(detail::trim(std::string_view(part).substr(eq + 1)));
    double number = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), number);
    if (ec != std::errc{} || ptr != value.data() + value.size()) {
      throw InvalidArgument("split spec: bad number '" + value + "' for " + key);
    }
    if (key == "train") {
      spec.train_fraction = number;
      have_train = true;
    } else if (key == "validation") {
      if (value.find('.') == std::string::npos && number >= 1) {
        spec.validation = static_cast<std::size_t>(number);
      } else {
        spec.validation = number;
      }
      have_validation = true;
    } else if (key == "test") {
      spec.test_fraction = number;
    } else {
      throw InvalidArgument("split spec: unknown key '" + key + "'");
    }
  }
  if (!have_train || !have_validation) {
    throw InvalidArgument("split spec: train and validation are required");
  }
  spec.validate();
  return spec;
}

void SplitSpec::validate() const {
  auto in_unit = [](double f) { return f >= 0.0 && f <= 1.0; };
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("split spec: train fraction must lie in (0,1)");
  }
  if (const auto* f = std::get_if<double>(&validation); f && !in_unit(*f)) {
    throw InvalidArgument("split spec: validation fraction must lie in [0,1]");
  }
  if (test_fraction && !in_unit(*test_fraction)) {
    throw InvalidArgument("split spec: test fraction must lie in [0,1]");
  }
  if (const auto* f = std::get_if<double>(&validation); f && test_fraction) {
    if (std::abs(train_fraction + *f + *test_fraction - 1.0) > 1e-9) {
      throw InvalidArgument("split spec: fractions must sum to 1");
    }
  } else if (f == nullptr && test_fraction &&
             train_fraction + *test_fraction > 1.0 + 1e-9) {
    throw InvalidArgument("split spec: train + test fractions exceed 1");
  } else if (f && !test_fraction && train_fraction + *f > 1.0 + 1e-9) {
    throw InvalidArgument("split spec: train + validation fractions exceed 1");
  }
}

SplitSizes split_sizes(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n_validation = std::visit(
      [n](auto v) -> std::size_t {
        if constexpr (std::is_same_v<decltype(v), double>) {
          return floor_share(v, n);
        } else {
          return v;
        }
      },
      spec.validation);

  SplitSizes sizes;
  sizes.validation = n_validation;
  if (spec.test_fraction) {
    sizes.test = floor_share(*spec.test_fraction, n);
    if (sizes.validation + sizes.test > n) {
      throw InvalidArgument("split spec demands " + std::to_string(n_validation) +
                            " validation records but only " +
                            std::to_string(n - sizes.test) + " are available");
    }
    sizes.train = n - sizes.validation - sizes.test;
  } else {
    sizes.train = floor_share(spec.train_fraction, n);
    if (sizes.train + sizes.validation > n) {
      throw InvalidArgument("split spec demands " + std::to_string(n_validation) +
                            " validation records but only " +
                            std::to_string(n - sizes.train) + " are available");
    }
    sizes.test = n - sizes.train - sizes.validation;
  }
  return sizes;
}

const std::vector<LabeledPost>& CorpusSplits::operator[](Split split) const {
  switch (split) {
    case Split::train: return train;
    case Split::validation: return validation;
    case Split::test: return test;
  }
  return train;
}

CorpusSplits split_corpus(std::span<const LabeledPost> posts,
                          const SplitSpec& spec) {
  if (posts.empty()) throw InvalidArgument("split_corpus: no posts");
  const SplitSizes sizes = split_sizes(posts.size(), spec);

  std::vector<std::size_t> order(posts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return posts[a].id < posts[b].id;
  });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (posts[order[i]].id == posts[order[i - 1]].id) {
      throw InvalidArgument("split_corpus: duplicate id " + posts[order[i]].id);
    }
  }
  Rng rng(spec.seed);
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<Split> assignment(posts.size());
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    Split s = rank < sizes.train ? Split::train
              : rank < sizes.train + sizes.validation ? Split::validation
                                                      : Split::test;
    assignment[order[rank]] = s;
  }

  CorpusSplits out;
  out.train.reserve(sizes.train);
  out.validation.reserve(sizes.validation);
  out.test.reserve(sizes.test);
  for (std::size_t i = 0; i < posts.size(); ++i) {
    LabeledPost p = posts[i];
    p.split = assignment[i];
    switch (p.split) {
      case Split::train: out.train.push_back(std::move(p)); break;
      case Split::validation: out.validation.push_back(std::move(p)); break;
      case Split::test: out.test.push_back(std::move(p)); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixtures and diagnostics
// ---------------------------------------------------------------------------

std::vector<LabeledPost> synth_fixture(std::size_t n_per_class, Task task,
                                       std::uint64_t seed) {
  if (n_per_class == 0) throw InvalidArgument("synth_fixture: n_per_class must be >= 1");
  static constexpr std::array<std::string_view, 8> kFiller{
      "honestly", "today", "again", "online", "lol", "seriously", "whatever", "fr"};

  Rng rng(seed);
  std::vector<LabeledPost> posts;
  for (std::size_t c = 0; c < class_count(task); ++c) {
    Label label = label_at(task, c);
    for (std::size_t k = 0; k < n_per_class; ++k) {
      std::string id = "synth-" + std::string(task_name(task)) + "-" +
                       std::to_string(seed) + "-" + std::to_string(c) + "-" +
                       std::to_string(k);
      std::string text = "post " + std::to_string(k + 1) + " " +
                         std::string(kFiller[rng.below(kFiller.size())]) +
                         " about " + std::string(display_name(label)) + " " +
                         std::string(kFiller[rng.below(kFiller.size())]);
      posts.push_back(LabeledPost{
          std::move(id), std::move(text), label,
          task == Task::aggression ? DatasetId::D1 : DatasetId::D6,
          Split::train, "en"});
    }
  }
  rng.shuffle(std::span<LabeledPost>(posts));
  return posts;
}

std::map<Label, std::size_t> class_distribution(
    std::span<const LabeledPost> posts) {
  std::map<Label, std::size_t> counts;
  if (posts.empty()) return counts;
  const Task task = posts.front().task();
  for (const auto& p : posts) {
    if (p.task() != task) {
      throw InvalidArgument("class_distribution: mixed tasks (post " + p.id + ")");
    }
    ++counts[p.label];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Record files
// ---------------------------------------------------------------------------

std::string record_to_line(const LabeledPost& p) {
  json j;
  j["id"] = p.id;
  j["text"] = p.text;
  j["task"] = task_name(p.task());
  j["label"] = label_key(p.label);
  j["dataset_id"] = dataset_name(p.dataset);
  j["split"] = split_name(p.split);
  j["language_tag"] = p.language_tag;
  return j.dump();
}

LabeledPost record_from_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
    auto task = task_from_name(j.at("task").get<std::string>());
    if (!task) throw InvalidArgument("record: unknown task");
    auto label = label_from_key(*task, j.at("label").get<std::string>());
    if (!label) throw InvalidArgument("record: label does not belong to task");
    auto ds = dataset_from_name(j.at("dataset_id").get<std::string>());
    if (!ds) throw InvalidArgument("record: unknown dataset_id");
    auto split = split_from_name(j.at("split").get<std::string>());
    if (!split) throw InvalidArgument("record: unknown split");
    LabeledPost p{j.at("id").get<std::string>(), j.at("text").get<std::string>(),
                  *label, *ds, *split, j.at("language_tag").get<std::string>()};
    if (p.id.empty()) throw InvalidArgument("record: empty id");
    if (detail::trim(p.text).empty()) throw InvalidArgument("record: empty text");
    return p;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("record: ") + e.what());
  }
}

void write_records(const std::filesystem::path& path,
                   std::span<const LabeledPost> posts) {
  std::string out;
  for (const auto& p : posts) {
    out += record_to_line(p);
    out += '\n';
  }
  detail::write_file(path, out);
}

std::vector<LabeledPost> read_records(const std::filesystem::path& path) {
  const std::string data = detail::read_file(path);
  std::vector<LabeledPost> posts;
  std::unordered_set<std::string> ids;
  std::size_t lineno = 0;
  for (auto line : detail::lines(data)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      posts.push_back(record_from_line(line));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!ids.insert(posts.back().id).second) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) +
                            ": duplicate id " + posts.back().id);
    }
  }
  return posts;
}

void write_rejects(const std::filesystem::path& path,
                   std::span<const RejectedRow> rejects) {
  std::string out;
  for (const auto& r : rejects) {
    json j;
    j["row"] = r.row;
    j["reason"] = r.reason;
    j["detail"] = r.detail;
    out += j.dump();
    out += '\n';
  }
  detail::write_file(path, out);
}

}  // namespace cbd
