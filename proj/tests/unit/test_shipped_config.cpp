// The files under config/ must stay identical to the compiled-in defaults.

#include <gtest/gtest.h>

#include <filesystem>

#include "cbd/backend.hpp"
#include "cbd/corpus.hpp"
#include "cbd/prompting.hpp"
#include "test_util.hpp"

using namespace cbd;

namespace {
const std::filesystem::path kConfig = CBD_CONFIG_DIR;
}

TEST(ShippedConfig, SchemasMatchBuiltins) {
  for (DatasetId id : {DatasetId::D1, DatasetId::D2, DatasetId::D3, DatasetId::D4, DatasetId::D5,
                       DatasetId::D6}) {
    const auto path = kConfig / "schemas" / (std::string(dataset_name(id)) + ".json");
    ASSERT_TRUE(std::filesystem::is_regular_file(path)) << path;
    EXPECT_EQ(schema_to_json(load_schema_file(path)), schema_to_json(builtin_schema(id))) << path;
  }
}

TEST(ShippedConfig, TemplatesMatchBuiltins) {
  const std::pair<PromptMode, Task> all[] = {
      {PromptMode::zero_shot, Task::aggression}, {PromptMode::zero_shot, Task::cyberbullying},
      {PromptMode::few_shot, Task::aggression},  {PromptMode::few_shot, Task::cyberbullying},
      {PromptMode::enriched, Task::cyberbullying}};
  for (const auto& [mode, task] : all) {
    const auto& builtin = default_template(mode, task);
    const auto path = kConfig / "templates" / (builtin.template_id + ".tmpl");
    ASSERT_TRUE(std::filesystem::is_regular_file(path)) << path;
    EXPECT_EQ(test::slurp(path), builtin.serialize()) << path;
  }
}

TEST(ShippedConfig, SynonymsMatchBuiltins) {
  const auto path = kConfig / "synonyms.json";
  EXPECT_EQ(SynonymTable::load(path).to_json(), SynonymTable::builtin().to_json());
}
