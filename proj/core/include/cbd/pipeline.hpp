#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cbd/backend.hpp"
#include "cbd/corpus.hpp"
#include "cbd/labels.hpp"
#include "cbd/prompting.hpp"

namespace cbd {

enum class Method { zero_shot, few_shot, lora_sft, mtl, epp };

std::string_view method_name(Method m);
std::optional<Method> method_from_name(std::string_view name);
/// Column heading used in comparison grids ("Zero-shot", "LoRA", ...).
std::string_view method_heading(Method m);

enum class AggressionSource {
  predicted,        // stage-1 output, the normal pipeline
  gold_diagnostic,  // annotated aggression labels; diagnostic runs only
};

std::string_view aggression_source_name(AggressionSource s);
std::optional<AggressionSource> aggression_source_from_name(std::string_view name);

struct ExperimentSpec {
  std::string model = "model";  // row label in comparison grids
  Method method = Method::zero_shot;
  Task task = Task::cyberbullying;
  // One backend; for epp the aggression stage then the cyberbullying stage.
  std::vector<BackendDescriptor> backends;
  // Per stage, same order as backends. Empty: built-in templates.
  std::vector<PromptTemplate> templates;
  std::size_t exemplars_per_class = 3;
  std::uint64_t seed = 0;
  // Enrichment used when stage 1 yields no label.
  AggressionLabel stage1_fallback = AggressionLabel::NAG;
  AggressionSource aggression_source = AggressionSource::predicted;

  void validate() const;
  std::size_t stage_count() const { return method == Method::epp ? 2 : 1; }
  /// Template for a stage: the configured one or the built-in default.
  const PromptTemplate& stage_template(std::size_t stage) const;
};

enum class Outcome { labeled, parse_failure, backend_error };
std::string_view outcome_name(Outcome o);

struct StageOutcome {
  Task task = Task::aggression;
  std::string backend_id;
  std::optional<std::string> raw_text;  // absent when the backend failed
  bool truncated = false;
  std::optional<Label> parsed;
  std::optional<MatchKind> match_kind;
  std::string error;

  bool operator==(const StageOutcome&) const = default;
};

struct Prediction {
  std::string post_id;
  Label gold;
  Outcome outcome = Outcome::labeled;
  std::optional<Label> label;  // set iff outcome == labeled
  std::optional<AggressionLabel> aggression_annotation;
  bool stage1_fallback = false;
  PromptProvenance provenance;      // of the final-stage prompt
  std::vector<StageOutcome> stages;  // raw responses, one per stage
  std::string final_prompt;         // in memory only; the audit log keeps prompts

  bool operator==(const Prediction& o) const {
    return post_id == o.post_id && gold == o.gold && outcome == o.outcome && label == o.label &&
           aggression_annotation == o.aggression_annotation &&
           stage1_fallback == o.stage1_fallback && provenance == o.provenance &&
           stages == o.stages;
  }
};

/// One JSON line; latency is left out so stub runs are byte-reproducible.
std::string prediction_to_line(const Prediction& p);
Prediction prediction_from_line(std::string_view line);
void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

struct RunOptions {
  // Labelled pool exemplars are drawn from (few_shot).
  std::span<const LabeledPost> exemplar_pool;
  // post_id -> annotated aggression label (gold_diagnostic).
  const std::map<std::string, AggressionLabel>* gold_aggression = nullptr;
  // Pre-built backends, one per stage; otherwise opened from spec.backends.
  std::vector<std::shared_ptr<Backend>> backends;
  const SynonymTable* synonyms = nullptr;
  ResponseAuditLog* audit = nullptr;
};

/// Zero-shot, few-shot, lora_sft and mtl runs. One prediction per record in
/// input order; backend failures become failure outcomes. Exemplar and
/// template problems are raised before any backend call.
std::vector<Prediction> run_baseline(std::span<const LabeledPost> records,
                                     const ExperimentSpec& spec,
                                     const RunOptions& options = {});

/// Aggression stage on the raw post, enriched prompt carrying the stage-1
/// label, cyberbullying stage on that prompt. A stage-1 failure enriches
/// with spec.stage1_fallback and sets stage1_fallback.
std::vector<Prediction> run_epp(std::span<const LabeledPost> records,
                                const ExperimentSpec& spec,
                                const RunOptions& options = {});

/// Dispatches on spec.method.
std::vector<Prediction> run_experiment(std::span<const LabeledPost> records,
                                       const ExperimentSpec& spec,
                                       const RunOptions& options = {});

}  // namespace cbd
