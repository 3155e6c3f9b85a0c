#include "cbd/labels.hpp"

#include <array>
#include <stdexcept>

namespace cbd {

namespace {

struct LabelInfo {
  std::string_view key;
  std::string_view display;
};

constexpr std::array<LabelInfo, 3> kAggression{{
    {"NAG", "Not-Aggressive"},
    {"CAG", "Covertly Aggressive"},
    {"OAG", "Overtly Aggressive"},
}};

constexpr std::array<LabelInfo, 4> kCyberbullying{{
    {"ethnicity_race", "Ethnicity/Race"},
    {"religion", "Religion"},
    {"gender_sexual", "Gender/Sexual"},
    {"not_cyberbullying", "Not Cyberbullying"},
}};

const LabelInfo& info(const Label& label) {
  if (const auto* a = std::get_if<AggressionLabel>(&label)) {
    return kAggression.at(static_cast<std::size_t>(*a));
  }
  return kCyberbullying.at(
      static_cast<std::size_t>(std::get<CyberbullyingLabel>(label)));
}

}  // namespace

std::size_t class_count(Task task) {
  return task == Task::aggression ? kAggression.size() : kCyberbullying.size();
}

std::vector<Label> label_space(Task task) {
  std::vector<Label> out;
  for (std::size_t i = 0; i < class_count(task); ++i) {
    out.push_back(label_at(task, i));
  }
  return out;
}

Task task_of(const Label& label) {
  return std::holds_alternative<AggressionLabel>(label) ? Task::aggression
                                                        : Task::cyberbullying;
}

std::size_t class_index(const Label& label) {
  return std::visit([](auto l) { return static_cast<std::size_t>(l); }, label);
}

Label label_at(Task task, std::size_t index) {
  if (index >= class_count(task)) {
    throw std::out_of_range("class index " + std::to_string(index) +
                            " outside label space of " +
                            std::string(task_name(task)));
  }
  if (task == Task::aggression) {
    return static_cast<AggressionLabel>(index);
  }
  return static_cast<CyberbullyingLabel>(index);
}

std::string_view display_name(const Label& label) { return info(label).display; }

std::string_view display_name(AggressionLabel label) {
  return display_name(Label{label});
}

std::string_view label_key(const Label& label) { return info(label).key; }

std::optional<Label> label_from_key(Task task, std::string_view key) {
  for (std::size_t i = 0; i < class_count(task); ++i) {
    Label l = label_at(task, i);
    if (label_key(l) == key) return l;
  }
  return std::nullopt;
}

std::string_view task_name(Task task) {
  return task == Task::aggression ? "aggression" : "cyberbullying";
}

std::optional<Task> task_from_name(std::string_view name) {
  if (name == "aggression") return Task::aggression;
  if (name == "cyberbullying") return Task::cyberbullying;
  return std::nullopt;
}

}  // namespace cbd
