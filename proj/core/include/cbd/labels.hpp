#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace cbd {

enum class Task { aggression, cyberbullying };

// Integer codes match the raw dataset encoding and must never be reordered.
enum class AggressionLabel : int { NAG = 0, CAG = 1, OAG = 2 };

enum class CyberbullyingLabel : int {
  ethnicity_race = 0,
  religion = 1,
  gender_sexual = 2,
  not_cyberbullying = 3,
};

using Label = std::variant<AggressionLabel, CyberbullyingLabel>;

/// Number of classes in the label space of `task` (3 or 4).
std::size_t class_count(Task task);

/// Labels of `task` in canonical order (ascending integer code).
std::vector<Label> label_space(Task task);

Task task_of(const Label& label);

/// Position of `label` within its label space.
std::size_t class_index(const Label& label);

/// Inverse of class_index; throws std::out_of_range for a bad index.
Label label_at(Task task, std::size_t index);

/// Human-readable name used in prompts and parsed back from responses,
/// e.g. "Covertly Aggressive" or "Gender/Sexual".
std::string_view display_name(const Label& label);
std::string_view display_name(AggressionLabel label);

/// Stable identifier used in record files ("NAG", "religion", ...).
std::string_view label_key(const Label& label);
std::optional<Label> label_from_key(Task task, std::string_view key);

std::string_view task_name(Task task);
std::optional<Task> task_from_name(std::string_view name);

}  // namespace cbd
