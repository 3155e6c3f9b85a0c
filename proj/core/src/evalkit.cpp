#include "cbd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "cbd/error.hpp"
#include "json.hpp"

namespace cbd {

using nlohmann::json;

std::string_view failure_policy_name(FailurePolicy p) {
  return p == FailurePolicy::exclude_and_report ? "exclude_and_report" : "count_as_error_class";
}

std::optional<FailurePolicy> failure_policy_from_name(std::string_view name) {
  if (name == "exclude_and_report") return FailurePolicy::exclude_and_report;
  if (name == "count_as_error_class") return FailurePolicy::count_as_error_class;
  return std::nullopt;
}

ConfusionMatrix ConfusionMatrix::empty(Task task) {
  const std::size_t c = class_count(task);
  ConfusionMatrix cm;
  cm.task = task;
  cm.counts.assign(c, std::vector<std::size_t>(c, 0));
  cm.unscored_by_gold.assign(c, 0);
  return cm;
}

std::size_t ConfusionMatrix::scored() const {
  std::size_t n = 0;
  for (const auto& row : counts) {
    for (auto v : row) n += v;
  }
  return n;
}

void ConfusionMatrix::add(const Label& gold, const Label& predicted) {
  if (task_of(gold) != task || task_of(predicted) != task) {
    throw InvalidArgument("confusion matrix: label outside the " + std::string(task_name(task)) +
                          " label space");
  }
  ++counts[class_index(gold)][class_index(predicted)];
}

void ConfusionMatrix::add_unscored(const Label& gold, Outcome outcome) {
  if (task_of(gold) != task) {
    throw InvalidArgument("confusion matrix: label outside the " + std::string(task_name(task)) +
                          " label space");
  }
  if (outcome == Outcome::labeled) throw InvalidArgument("confusion matrix: outcome is labeled");
  ++unscored_by_gold[class_index(gold)];
  (outcome == Outcome::parse_failure ? n_parse_failures : n_backend_errors) += 1;
}

ConfusionMatrix build_confusion(std::span<const Prediction> predictions, Task label_space) {
  ConfusionMatrix cm = ConfusionMatrix::empty(label_space);
  for (const auto& p : predictions) {
    if (task_of(p.gold) != label_space) {
      throw InvalidArgument("build_confusion: mixed tasks (post " + p.post_id + " is " +
                            std::string(task_name(task_of(p.gold))) + ")");
    }
    if (p.outcome == Outcome::labeled && p.label) {
      cm.add(p.gold, *p.label);
    } else {
      cm.add_unscored(p.gold, p.outcome == Outcome::labeled ? Outcome::parse_failure : p.outcome);
    }
  }
  return cm;
}

EvalReport compute_metrics(const ConfusionMatrix& cm, FailurePolicy policy) {
  const std::size_t c = cm.classes();
  if (c == 0 || cm.unscored_by_gold.size() != c) {
    throw InvalidArgument("compute_metrics: malformed confusion matrix");
  }
  const bool count_failures = policy == FailurePolicy::count_as_error_class;
  const std::size_t scored = cm.scored();
  const std::size_t unscored = cm.n_parse_failures + cm.n_backend_errors;
  const std::size_t denom = scored + (count_failures ? unscored : 0);
  if (denom == 0) throw InvalidArgument("compute_metrics: empty confusion matrix");

  EvalReport r;
  r.task = cm.task;
  r.policy = policy;
  r.evaluated = cm.total();
  r.n_parse_failures = cm.n_parse_failures;
  r.n_backend_errors = cm.n_backend_errors;

  std::size_t trace = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t col = 0, row = 0;
    for (std::size_t i = 0; i < c; ++i) {
      col += cm.counts[i][k];
      row += cm.counts[k][i];
    }
    if (count_failures) row += cm.unscored_by_gold[k];
    const double tp = static_cast<double>(cm.counts[k][k]);
    trace += cm.counts[k][k];

    ClassMetrics m;
    m.support = row;
    m.precision = col == 0 ? 0.0 : tp / static_cast<double>(col);
    m.recall = row == 0 ? 0.0 : tp / static_cast<double>(row);
    m.f1 = (m.precision + m.recall) == 0.0 ? 0.0
                                           : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    r.per_class.push_back(m);
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  const double n = static_cast<double>(c);
  r.macro_precision /= n;
  r.macro_recall /= n;
  r.macro_f1 /= n;
  r.accuracy = static_cast<double>(trace) / static_cast<double>(denom);
  return r;
}

std::string report_to_json(const EvalReport& r) {
  json per_class = json::object();
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& m = r.per_class[k];
    per_class[std::string(label_key(label_at(r.task, k)))] = {
        {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"support", m.support}};
  }
  json j;
  j["run_id"] = r.run_id;
  j["task"] = task_name(r.task);
  j["parse_failure_policy"] = failure_policy_name(r.policy);
  j["evaluated"] = r.evaluated;
  j["n_parse_failures"] = r.n_parse_failures;
  j["n_backend_errors"] = r.n_backend_errors;
  j["accuracy"] = r.accuracy;
  j["macro_precision"] = r.macro_precision;
  j["macro_recall"] = r.macro_recall;
  j["macro_f1"] = r.macro_f1;
  j["per_class"] = per_class;
  return j.dump(2);
}

EvalReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    const auto task = task_from_name(j.at("task").get<std::string>());
    if (!task) throw InvalidArgument("report: unknown task");
    r.task = *task;
    const auto policy = failure_policy_from_name(j.at("parse_failure_policy").get<std::string>());
    if (!policy) throw InvalidArgument("report: unknown parse_failure_policy");
    r.policy = *policy;
    r.run_id = j.value("run_id", "");
    r.evaluated = j.value("evaluated", std::size_t{0});
    r.n_parse_failures = j.value("n_parse_failures", std::size_t{0});
    r.n_backend_errors = j.value("n_backend_errors", std::size_t{0});
    r.accuracy = j.value("accuracy", 0.0);
    r.macro_precision = j.value("macro_precision", 0.0);
    r.macro_recall = j.value("macro_recall", 0.0);
    r.macro_f1 = j.at("macro_f1").get<double>();
    if (j.contains("per_class")) {
      for (std::size_t k = 0; k < class_count(r.task); ++k) {
        const auto key = std::string(label_key(label_at(r.task, k)));
        ClassMetrics m;
        if (j["per_class"].contains(key)) {
          const json& c = j["per_class"][key];
          m.precision = c.value("precision", 0.0);
          m.recall = c.value("recall", 0.0);
          m.f1 = c.value("f1", 0.0);
          m.support = c.value("support", std::size_t{0});
        }
        r.per_class.push_back(m);
      }
    }
    const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(r.accuracy) || !in_unit(r.macro_f1) || !in_unit(r.macro_precision) ||
        !in_unit(r.macro_recall)) {
      throw InvalidArgument("report: metric outside [0, 1]");
    }
    return r;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("report: malformed JSON: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

namespace {

constexpr Method kMethodOrder[] = {Method::zero_shot, Method::few_shot, Method::lora_sft,
                                   Method::mtl, Method::epp};
constexpr Task kTaskOrder[] = {Task::aggression, Task::cyberbullying};

std::string_view task_heading(Task t) {
  return t == Task::aggression ? "Aggression Detection" : "Cyberbullying Detection";
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct Cell {
  const EvalReport* report = nullptr;
  std::string value;  // two decimals
  bool best = false;
  bool mirrored = false;
};

std::string pad(const std::string& s, std::size_t width) {
  // Display width: count UTF-8 lead bytes only.
  std::size_t w = 0;
  for (unsigned char c : s) w += (c & 0xC0) != 0x80;
  return s + std::string(width > w ? width - w : 0, ' ');
}

}  // namespace

Grid render_grid(std::span<const std::pair<GridKey, EvalReport>> reports,
                 const GridOptions& options) {
  if (reports.empty()) throw InvalidArgument("render_grid: no reports");

  std::vector<std::string> models;
  std::map<std::tuple<std::string, Task, Method>, const EvalReport*> cells;
  for (const auto& [key, report] : reports) {
    if (report.task != key.task) {
      throw InvalidArgument("render_grid: report for " + key.model + " is a " +
                            std::string(task_name(report.task)) + " report filed under " +
                            std::string(task_name(key.task)));
    }
    if (std::find(models.begin(), models.end(), key.model) == models.end()) {
      models.push_back(key.model);
    }
    if (!cells.emplace(std::tuple{key.model, key.task, key.method}, &report).second) {
      throw InvalidArgument("render_grid: duplicate report for " + key.model + " / " +
                            std::string(method_name(key.method)) + " / " +
                            std::string(task_name(key.task)));
    }
  }

  std::set<std::tuple<std::string, Task, Method>> mirrored;
  if (options.mirror_epp_aggression) {
    for (const auto& m : models) {
      const auto epp_agg = std::tuple{m, Task::aggression, Method::epp};
      const auto epp_cb = std::tuple{m, Task::cyberbullying, Method::epp};
      const auto lora_agg = std::tuple{m, Task::aggression, Method::lora_sft};
      if (!cells.contains(epp_agg) && cells.contains(epp_cb) && cells.contains(lora_agg)) {
        cells[epp_agg] = cells[lora_agg];
        mirrored.insert(epp_agg);
      }
    }
  }

  // Columns: (task, method) pairs that occur anywhere.
  std::vector<std::pair<Task, Method>> columns;
  for (Task t : kTaskOrder) {
    for (Method m : kMethodOrder) {
      for (const auto& model : models) {
        if (cells.contains(std::tuple{model, t, m})) {
          columns.emplace_back(t, m);
          break;
        }
      }
    }
  }

  // Cell values and per-(row, task) emphasis on the rounded values.
  std::vector<std::vector<Cell>> grid(models.size(), std::vector<Cell>(columns.size()));
  bool any_unscored = false;
  for (std::size_t r = 0; r < models.size(); ++r) {
    for (Task t : kTaskOrder) {
      std::vector<std::size_t> filled;
      for (std::size_t c = 0; c < columns.size(); ++c) {
        if (columns[c].first != t) continue;
        auto it = cells.find(std::tuple{models[r], t, columns[c].second});
        if (it == cells.end()) continue;
        Cell& cell = grid[r][c];
        cell.report = it->second;
        cell.value = fixed2(it->second->macro_f1);
        cell.mirrored = mirrored.contains(it->first);
        any_unscored |= (it->second->n_parse_failures + it->second->n_backend_errors) > 0;
        filled.push_back(c);
      }
      if (filled.size() < 2) continue;
      std::string best;
      for (auto c : filled) best = std::max(best, grid[r][c].value);
      for (auto c : filled) grid[r][c].best = grid[r][c].value == best;
    }
  }

  // Header: policies and run ids.
  std::set<std::string> policies;
  std::vector<std::string> run_ids;
  for (const auto& [key, report] : reports) {
    policies.insert(std::string(failure_policy_name(report.policy)));
    if (!report.run_id.empty() &&
        std::find(run_ids.begin(), run_ids.end(), report.run_id) == run_ids.end()) {
      run_ids.push_back(report.run_id);
    }
  }
  std::string policy_text, runs_text;
  for (const auto& p : policies) policy_text += (policy_text.empty() ? "" : ", ") + p;
  for (const auto& id : run_ids) runs_text += (runs_text.empty() ? "" : ", ") + id;
  if (runs_text.empty()) runs_text = "-";

  auto cell_text = [&](const Cell& cell) {
    if (!cell.report) return std::string("-");
    std::string s = cell.value;
    if (cell.best) s += options.emphasis_marker;
    const std::size_t unscored = cell.report->n_parse_failures + cell.report->n_backend_errors;
    if (unscored > 0) s += " (" + std::to_string(unscored) + " unscored)";
    return s;
  };

  // Plain text.
  std::size_t model_w = 5;
  for (const auto& m : models) model_w = std::max(model_w, m.size());
  std::vector<std::size_t> col_w(columns.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    col_w[c] = method_heading(columns[c].second).size();
    for (std::size_t r = 0; r < models.size(); ++r) col_w[c] = std::max(col_w[c], cell_text(grid[r][c]).size());
  }
  // Widen the last column of a group so the group heading fits.
  for (Task task : kTaskOrder) {
    std::size_t width = 0, last = columns.size();
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c].first != task) continue;
      width += col_w[c] + (last == columns.size() ? 0 : 2);
      last = c;
    }
    if (last != columns.size() && width < task_heading(task).size()) {
      col_w[last] += task_heading(task).size() - width;
    }
  }

  Grid out;
  std::string& t = out.text;
  t += "# macro-F1 by model, task and method\n";
  t += "# parse-failure policy: " + policy_text + "\n";
  t += "# runs: " + runs_text + "\n";
  if (!options.emphasis_marker.empty()) {
    t += "# " + options.emphasis_marker + " best in row for the task\n";
  }
  if (!mirrored.empty()) t += "# EPP aggression cells repeat the LoRA aggression result\n";

  std::string head_line = pad("Model", model_w);
  for (Task task : kTaskOrder) {
    bool first = true;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c].first != task) continue;
      head_line += (first ? " | " : "  ") + pad(std::string(method_heading(columns[c].second)), col_w[c]);
      first = false;
    }
  }
  std::string group_line = pad("", model_w);
  for (Task task : kTaskOrder) {
    std::size_t width = 0;
    bool first = true;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (columns[c].first != task) continue;
      width += col_w[c] + (first ? 0 : 2);
      first = false;
    }
    if (!first) group_line += " | " + pad(std::string(task_heading(task)), width);
  }
  auto rtrim = [](std::string s) {
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
  };
  t += rtrim(group_line) + "\n" + rtrim(head_line) + "\n";
  for (std::size_t r = 0; r < models.size(); ++r) {
    std::string line = pad(models[r], model_w);
    Task prev = columns.empty() ? Task::aggression : columns.front().first;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const bool first = c == 0 || columns[c].first != prev;
      prev = columns[c].first;
      line += (first ? " | " : "  ") + pad(cell_text(grid[r][c]), col_w[c]);
    }
    t += rtrim(line) + "\n";
  }

  // Delimited.
  std::string& csv = out.csv;
  csv += "# parse_failure_policy=" + policy_text + "\n";
  csv += "# runs=" + runs_text + "\n";
  csv += "model";
  for (const auto& [task, method] : columns) {
    csv += "," + csv_field(std::string(task_name(task)) + " " + std::string(method_heading(method)));
  }
  if (any_unscored) {
    for (const auto& [task, method] : columns) {
      csv += "," + csv_field(std::string(task_name(task)) + " " + std::string(method_heading(method)) +
                             " unscored");
    }
  }
  csv += ",best\n";
  for (std::size_t r = 0; r < models.size(); ++r) {
    csv += csv_field(models[r]);
    std::string best;
    for (std::size_t c = 0; c < columns.size(); ++c) {
      const Cell& cell = grid[r][c];
      csv += "," + (cell.report ? cell.value : std::string());
      if (cell.best) {
        best += (best.empty() ? "" : ";") + std::string(task_name(columns[c].first)) + " " +
                std::string(method_heading(columns[c].second));
      }
    }
    if (any_unscored) {
      for (std::size_t c = 0; c < columns.size(); ++c) {
        const Cell& cell = grid[r][c];
        csv += ",";
        if (cell.report) {
          csv += std::to_string(cell.report->n_parse_failures + cell.report->n_backend_errors);
        }
      }
    }
    csv += "," + csv_field(best) + "\n";
  }
  return out;
}

}  // namespace cbd
