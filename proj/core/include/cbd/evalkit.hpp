#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cbd/labels.hpp"
#include "cbd/pipeline.hpp"

namespace cbd {

enum class FailurePolicy {
  exclude_and_report,    // unscored records leave the metrics, counts are reported
  count_as_error_class,  // unscored records count as misses for their gold class
};

std::string_view failure_policy_name(FailurePolicy p);
std::optional<FailurePolicy> failure_policy_from_name(std::string_view name);

// Rows are gold classes, columns predicted classes. Records without a label
// are tallied per gold class instead.
struct ConfusionMatrix {
  Task task = Task::aggression;
  std::vector<std::vector<std::size_t>> counts;
  std::size_t n_parse_failures = 0;
  std::size_t n_backend_errors = 0;
  std::vector<std::size_t> unscored_by_gold;

  static ConfusionMatrix empty(Task task);
  std::size_t classes() const { return counts.size(); }
  std::size_t scored() const;
  /// scored() + n_parse_failures + n_backend_errors.
  std::size_t total() const { return scored() + n_parse_failures + n_backend_errors; }
  void add(const Label& gold, const Label& predicted);
  void add_unscored(const Label& gold, Outcome outcome);
};

/// Throws on mixed tasks.
ConfusionMatrix build_confusion(std::span<const Prediction> predictions, Task label_space);

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::size_t support = 0;
};

struct EvalReport {
  Task task = Task::aggression;
  std::vector<ClassMetrics> per_class;  // label-space order
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  std::size_t evaluated = 0;
  std::size_t n_parse_failures = 0;
  std::size_t n_backend_errors = 0;
  FailurePolicy policy = FailurePolicy::exclude_and_report;
  std::string run_id;
};

/// Zero denominators give 0; macro means run over every class of the label
/// space. Throws when nothing is left to score.
EvalReport compute_metrics(const ConfusionMatrix& cm,
                           FailurePolicy policy = FailurePolicy::exclude_and_report);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(std::string_view text);

struct GridKey {
  std::string model;
  Method method = Method::zero_shot;
  Task task = Task::aggression;
  bool operator==(const GridKey&) const = default;
};

struct GridOptions {
  // Fill a model's empty EPP aggression cell from its LoRA aggression cell
  // when it has an EPP cyberbullying result; EPP reuses the tuned
  // aggression model unchanged.
  bool mirror_epp_aggression = true;
  std::string emphasis_marker = "*";
};

struct Grid {
  std::string text;  // aligned plain-text table
  std::string csv;   // comma-separated
};

/// Rows are models in first-seen order; column groups are tasks
/// (aggression first) and, within a group, methods in the canonical order.
/// Only methods that occur get a column. The best macro-F1 per row and task
/// group is marked when the group has more than one filled cell. Throws on
/// an empty input or a duplicate key.
Grid render_grid(std::span<const std::pair<GridKey, EvalReport>> reports,
                 const GridOptions& options = {});

}  // namespace cbd
