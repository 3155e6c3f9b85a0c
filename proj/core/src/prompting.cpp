#include "cbd/prompting.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>

#include "cbd/error.hpp"
#include "cbd/random.hpp"
#include "detail/strings.hpp"
#include "json.hpp"

namespace cbd {

using nlohmann::json;

namespace {

constexpr std::string_view kSeparator = "---";
constexpr std::string_view kEnrichedLead =
    "This post was predicted as {{aggression}}. Based on this, classify the "
    "following content for cyberbullying.\n\n{{post}}";

std::string zero_shot_body(Task task) {
  return "Classify the following social media post for " +
         std::string(task_name(task)) +
         ". Choose exactly one of these categories:\n{{labels}}\n\n"
         "Post:\n{{post}}\n\nAnswer with exactly one label:";
}

std::string few_shot_body(Task task) {
  return "Classify the following social media post for " +
         std::string(task_name(task)) +
         ". Choose exactly one of these categories:\n{{labels}}\n\n"
         "Labelled examples:\n{{exemplars}}\n\n"
         "Post:\n{{post}}\n\nAnswer with exactly one label:";
}

std::string enriched_body() {
  return std::string(kEnrichedLead) +
         "\n\nChoose exactly one of these categories:\n{{labels}}\n\n"
         "Answer with exactly one label:";
}

PromptTemplate make_default(PromptMode mode, Task task) {
  PromptTemplate t;
  t.mode = mode;
  t.task = task;
  t.version = 1;
  t.template_id = std::string(mode_name(mode)) + "." + std::string(task_name(task));
  switch (mode) {
    case PromptMode::zero_shot: t.body = zero_shot_body(task); break;
    case PromptMode::few_shot: t.body = few_shot_body(task); break;
    case PromptMode::enriched: t.body = enriched_body(); break;
  }
  return t;
}

using Bindings = std::map<std::string, std::string, std::less<>>;

// Single left-to-right pass; substituted values are never rescanned, so post
// text containing "{{...}}" is emitted verbatim.
std::string substitute(const PromptTemplate& tmpl, const Bindings& values) {
  std::string out;
  std::string_view body = tmpl.body;
  std::size_t pos = 0;
  while (pos < body.size()) {
    std::size_t open = body.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(body.substr(pos));
      break;
    }
    out.append(body.substr(pos, open - pos));
    std::size_t close = body.find("}}", open + 2);
    if (close == std::string_view::npos) {
      throw InvalidArgument("template " + tmpl.template_id + ": unterminated placeholder");
    }
    auto name = body.substr(open + 2, close - open - 2);
    auto it = values.find(name);
    if (it == values.end()) {
      throw InvalidArgument("template " + tmpl.template_id +
                            ": placeholder {{" + std::string(name) + "}} is not bound");
    }
    out.append(it->second);
    pos = close + 2;
  }
  return out;
}

std::vector<std::string> placeholders(std::string_view body) {
  std::vector<std::string> names;
  std::size_t pos = 0;
  while ((pos = body.find("{{", pos)) != std::string_view::npos) {
    std::size_t close = body.find("}}", pos + 2);
    if (close == std::string_view::npos) break;
    names.emplace_back(body.substr(pos + 2, close - pos - 2));
    pos = close + 2;
  }
  return names;
}

std::string render_label_list(Task task) {
  std::string out;
  for (const auto& l : label_space(task)) {
    if (!out.empty()) out += '\n';
    out += "- ";
    out += display_name(l);
  }
  return out;
}

std::string render_exemplars(const ExemplarSet& set) {
  std::string out;
  for (const auto& [text, label] : set.exemplars) {
    if (!out.empty()) out += "\n\n";
    out += "Post: ";
    out += text;
    out += "\nlabel: ";
    out += display_name(label);
  }
  return out;
}

void check_task(const LabeledPost& post, const PromptTemplate& tmpl,
                PromptMode expected_mode) {
  if (tmpl.mode != expected_mode) {
    throw InvalidArgument("template " + tmpl.template_id + " has mode " +
                          std::string(mode_name(tmpl.mode)) + ", expected " +
                          std::string(mode_name(expected_mode)));
  }
  if (tmpl.task != post.task()) {
    throw InvalidArgument("template " + tmpl.template_id + " targets " +
                          std::string(task_name(tmpl.task)) + " but post " + post.id +
                          " is a " + std::string(task_name(post.task())) + " post");
  }
}

Prompt finish(const LabeledPost& post, const PromptTemplate& tmpl,
              const Bindings& values) {
  Prompt p;
  p.rendered_text = substitute(tmpl, values);
  p.label_space = tmpl.task;
  p.query_text = post.text;
  p.provenance.template_id = tmpl.template_id;
  p.provenance.template_version = tmpl.version;
  p.provenance.mode = tmpl.mode;
  p.provenance.post_id = post.id;
  return p;
}

}  // namespace

std::string_view mode_name(PromptMode mode) {
  switch (mode) {
    case PromptMode::zero_shot: return "zero_shot";
    case PromptMode::few_shot: return "few_shot";
    case PromptMode::enriched: return "enriched";
  }
  return "zero_shot";
}

std::optional<PromptMode> mode_from_name(std::string_view name) {
  if (name == "zero_shot") return PromptMode::zero_shot;
  if (name == "few_shot") return PromptMode::few_shot;
  if (name == "enriched") return PromptMode::enriched;
  return std::nullopt;
}

void PromptTemplate::validate() const {
  if (template_id.empty()) throw InvalidArgument("template: empty template_id");
  std::set<std::string> allowed{"labels", "post"};
  if (mode == PromptMode::few_shot) allowed.insert("exemplars");
  if (mode == PromptMode::enriched) allowed.insert("aggression");

  std::size_t post_count = 0;
  std::set<std::string> present;
  for (const auto& name : placeholders(body)) {
    if (!allowed.count(name)) {
      throw InvalidArgument("template " + template_id + ": placeholder {{" + name +
                            "}} cannot be bound in " + std::string(mode_name(mode)) +
                            " mode");
    }
    if (name == "post") ++post_count;
    present.insert(name);
  }
  if (post_count != 1) {
    throw InvalidArgument("template " + template_id +
                          ": body must contain {{post}} exactly once");
  }
  if (mode == PromptMode::few_shot && !present.count("exemplars")) {
    throw InvalidArgument("template " + template_id + ": few-shot body lacks {{exemplars}}");
  }
  if (mode == PromptMode::enriched) {
    if (task != Task::cyberbullying) {
      throw InvalidArgument("template " + template_id +
                            ": enriched templates target cyberbullying");
    }
    if (!std::string_view(body).starts_with(kEnrichedLead)) {
      throw InvalidArgument("template " + template_id +
                            ": enriched body must open with the enrichment "
                            "sentence, a blank line and {{post}}");
    }
  }
}

PromptTemplate PromptTemplate::parse(std::string_view text) {
  PromptTemplate t;
  bool have_id = false, have_version = false, have_mode = false, have_task = false;
  std::size_t pos = 0;
  while (true) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) {
      throw InvalidArgument("template: missing '---' header separator");
    }
    auto line = detail::trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (line == kSeparator) break;
    if (line.empty() || line.front() == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw InvalidArgument("template: bad header line '" + std::string(line) + "'");
    }
    auto key = detail::trim(line.substr(0, colon));
    auto value = std::string(detail::trim(line.substr(colon + 1)));
    if (key == "template_id") {
      t.template_id = value;
      have_id = true;
    } else if (key == "version") {
      try {
        t.version = std::stoi(value);
      } catch (const std::exception&) {
        throw InvalidArgument("template: bad version '" + value + "'");
      }
      have_version = true;
    } else if (key == "mode") {
      auto m = mode_from_name(value);
      if (!m) throw InvalidArgument("template: unknown mode '" + value + "'");
      t.mode = *m;
      have_mode = true;
    } else if (key == "task") {
      auto task = task_from_name(value);
      if (!task) throw InvalidArgument("template: unknown task '" + value + "'");
      t.task = *task;
      have_task = true;
    } else {
      throw InvalidArgument("template: unknown header key '" + std::string(key) + "'");
    }
  }
  if (!have_id || !have_version || !have_mode || !have_task) {
    throw InvalidArgument("template: header needs template_id, version, mode and task");
  }
  auto body = text.substr(pos);
  if (body.ends_with('\n')) body.remove_suffix(1);
  t.body = std::string(body);
  t.validate();
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  try {
    return parse(detail::read_file(path));
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

std::string PromptTemplate::serialize() const {
  return "template_id: " + template_id + "\nversion: " + std::to_string(version) +
         "\nmode: " + std::string(mode_name(mode)) + "\ntask: " +
         std::string(task_name(task)) + "\n---\n" + body + "\n";
}

const PromptTemplate& default_template(PromptMode mode, Task task) {
  static const auto templates = [] {
    std::array<PromptTemplate, 6> all;
    for (auto m : {PromptMode::zero_shot, PromptMode::few_shot, PromptMode::enriched}) {
      for (auto t : {Task::aggression, Task::cyberbullying}) {
        all[static_cast<std::size_t>(m) * 2 + static_cast<std::size_t>(t)] =
            m == PromptMode::enriched ? make_default(m, Task::cyberbullying)
                                      : make_default(m, t);
      }
    }
    return all;
  }();
  if (mode == PromptMode::enriched && task != Task::cyberbullying) {
    throw InvalidArgument("enriched prompts exist only for cyberbullying");
  }
  return templates[static_cast<std::size_t>(mode) * 2 + static_cast<std::size_t>(task)];
}

std::string enrichment_sentence(AggressionLabel predicted) {
  return "This post was predicted as " + std::string(display_name(predicted)) +
         ". Based on this, classify the following content for cyberbullying.";
}

Prompt render_zero_shot(const LabeledPost& post, const PromptTemplate& tmpl) {
  check_task(post, tmpl, PromptMode::zero_shot);
  return finish(post, tmpl, {{"labels", render_label_list(tmpl.task)}, {"post", post.text}});
}

ExemplarSet select_exemplars(std::span<const LabeledPost> train, std::size_t k,
                             std::uint64_t seed) {
  if (k == 0) throw InvalidArgument("select_exemplars: k must be >= 1");
  if (train.empty()) throw InvalidArgument("select_exemplars: empty training set");
  const Task task = train.front().task();

  std::vector<std::vector<const LabeledPost*>> by_class(class_count(task));
  for (const auto& p : train) {
    if (p.task() != task) {
      throw InvalidArgument("select_exemplars: mixed tasks (post " + p.id + ")");
    }
    if (p.split != Split::train) {
      throw InvalidArgument("select_exemplars: post " + p.id + " is in the " +
                            std::string(split_name(p.split)) + " split");
    }
    by_class[class_index(p.label)].push_back(&p);
  }

  Rng rng(seed);
  std::vector<std::vector<const LabeledPost*>> chosen(by_class.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    if (pool.size() < k) {
      throw InvalidArgument("select_exemplars: class '" +
                            std::string(display_name(label_at(task, c))) + "' has " +
                            std::to_string(pool.size()) + " training records, need " +
                            std::to_string(k));
    }
    std::sort(pool.begin(), pool.end(),
              [](const LabeledPost* a, const LabeledPost* b) { return a->id < b->id; });
    // Partial Fisher-Yates: the first k slots form the sample.
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    chosen[c].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  }

  ExemplarSet set;
  set.task = task;
  set.k = k;
  set.seed = seed;
  for (std::size_t i = 0; i < k; ++i) {
    for (const auto& per_class : chosen) {
      set.exemplars.emplace_back(per_class[i]->text, per_class[i]->label);
      set.source_ids.push_back(per_class[i]->id);
    }
  }
  return set;
}

Prompt render_few_shot(const LabeledPost& post, const PromptTemplate& tmpl,
                       const ExemplarSet& exemplars) {
  check_task(post, tmpl, PromptMode::few_shot);
  if (exemplars.task != post.task()) {
    throw InvalidArgument("render_few_shot: exemplar task differs from post task");
  }
  if (exemplars.exemplars.size() != exemplars.k * class_count(exemplars.task) ||
      exemplars.source_ids.size() != exemplars.exemplars.size()) {
    throw InvalidArgument("render_few_shot: exemplar set is not k per class");
  }
  if (std::find(exemplars.source_ids.begin(), exemplars.source_ids.end(), post.id) !=
      exemplars.source_ids.end()) {
    throw InvalidArgument("render_few_shot: leakage, post " + post.id +
                          " is one of its own exemplars");
  }
  Prompt p = finish(post, tmpl,
                    {{"labels", render_label_list(tmpl.task)},
                     {"exemplars", render_exemplars(exemplars)},
                     {"post", post.text}});
  p.provenance.exemplar_ids = exemplars.source_ids;
  return p;
}

Prompt render_enriched(const LabeledPost& post, AggressionLabel predicted,
                       const PromptTemplate& tmpl) {
  if (post.task() != Task::cyberbullying) {
    throw InvalidArgument("render_enriched: post " + post.id + " is not a cyberbullying post");
  }
  check_task(post, tmpl, PromptMode::enriched);
  const auto code = static_cast<int>(predicted);
  if (code < 0 || code > 2) throw InvalidArgument("render_enriched: invalid aggression label");
  Prompt p = finish(post, tmpl,
                    {{"aggression", std::string(display_name(predicted))},
                     {"labels", render_label_list(tmpl.task)},
                     {"post", post.text}});
  p.provenance.aggression_label = predicted;
  return p;
}

std::string prompt_to_json(const Prompt& prompt) {
  json j;
  const auto& pv = prompt.provenance;
  j["post_id"] = pv.post_id;
  j["template_id"] = pv.template_id;
  j["template_version"] = pv.template_version;
  j["mode"] = mode_name(pv.mode);
  j["label_space"] = task_name(prompt.label_space);
  j["exemplar_ids"] = pv.exemplar_ids;
  j["aggression_label"] = pv.aggression_label
                              ? json(std::string(label_key(*pv.aggression_label)))
                              : json(nullptr);
  j["rendered_text"] = prompt.rendered_text;
  return j.dump();
}

PromptAuditLog::PromptAuditLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::app);
  if (!out_) throw IoError("cannot open prompt audit log " + path.string());
}

void PromptAuditLog::append(const Prompt& prompt) {
  std::string line = prompt_to_json(prompt);
  std::lock_guard lock(mu_);
  out_ << line << '\n';
  out_.flush();
}

}  // namespace cbd
