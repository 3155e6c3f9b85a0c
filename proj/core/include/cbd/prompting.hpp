#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cbd/corpus.hpp"
#include "cbd/labels.hpp"

namespace cbd {

enum class PromptMode { zero_shot, few_shot, enriched };

std::string_view mode_name(PromptMode mode);
std::optional<PromptMode> mode_from_name(std::string_view name);

// Versioned prompt text with {{name}} placeholders. Recognised names are
// labels, post, exemplars and aggression; which ones must appear depends on
// the mode. Templates are plain-text files:
//
//   template_id: zero_shot.cyberbullying
//   version: 1
//   mode: zero_shot
//   task: cyberbullying
//   ---
//   <body>
struct PromptTemplate {
  std::string template_id;
  int version = 1;
  PromptMode mode = PromptMode::zero_shot;
  Task task = Task::cyberbullying;
  std::string body;

  /// Throws InvalidArgument if the body is inconsistent with the mode.
  void validate() const;

  static PromptTemplate parse(std::string_view text);
  static PromptTemplate load(const std::filesystem::path& path);
  std::string serialize() const;
};

/// The shipped templates; config/templates/*.tmpl hold identical copies.
const PromptTemplate& default_template(PromptMode mode, Task task);

/// Opening sentence of every enriched prompt, with the aggression display
/// name substituted.
std::string enrichment_sentence(AggressionLabel predicted);

struct ExemplarSet {
  Task task = Task::aggression;
  std::size_t k = 0;
  // Class-interleaved: class 0 #1, class 1 #1, ..., class 0 #2, ...
  std::vector<std::pair<std::string, Label>> exemplars;
  std::vector<std::string> source_ids;
  std::uint64_t seed = 0;
};

struct PromptProvenance {
  std::string template_id;
  int template_version = 0;
  PromptMode mode = PromptMode::zero_shot;
  std::vector<std::string> exemplar_ids;
  std::optional<AggressionLabel> aggression_label;
  std::string post_id;
  bool operator==(const PromptProvenance&) const = default;
};

struct Prompt {
  std::string rendered_text;
  Task label_space = Task::aggression;
  // The post text exactly as it appears inside rendered_text.
  std::string query_text;
  PromptProvenance provenance;
};

Prompt render_zero_shot(const LabeledPost& post, const PromptTemplate& tmpl);

/// Seeded uniform sampling without replacement, k per class. The result
/// depends on the set of training records, not their order.
ExemplarSet select_exemplars(std::span<const LabeledPost> train, std::size_t k,
                             std::uint64_t seed);

Prompt render_few_shot(const LabeledPost& post, const PromptTemplate& tmpl,
                       const ExemplarSet& exemplars);

Prompt render_enriched(const LabeledPost& post, AggressionLabel predicted,
                       const PromptTemplate& tmpl);

std::string prompt_to_json(const Prompt& prompt);

// Append-only JSONL log of rendered prompts and their provenance. Safe to
// share between threads.
class PromptAuditLog {
 public:
  explicit PromptAuditLog(const std::filesystem::path& path);
  void append(const Prompt& prompt);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

}  // namespace cbd
