#include "cbd/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>

#include "cbd/error.hpp"
#include "detail/strings.hpp"
#include "json.hpp"

namespace cbd {

using nlohmann::json;

std::string_view method_name(Method m) {
  switch (m) {
    case Method::zero_shot: return "zero_shot";
    case Method::few_shot: return "few_shot";
    case Method::lora_sft: return "lora_sft";
    case Method::mtl: return "mtl";
    case Method::epp: return "epp";
  }
  return "zero_shot";
}

std::optional<Method> method_from_name(std::string_view name) {
  for (Method m : {Method::zero_shot, Method::few_shot, Method::lora_sft, Method::mtl, Method::epp}) {
    if (name == method_name(m)) return m;
  }
  return std::nullopt;
}

std::string_view method_heading(Method m) {
  switch (m) {
    case Method::zero_shot: return "Zero-shot";
    case Method::few_shot: return "Few-shot";
    case Method::lora_sft: return "LoRA";
    case Method::mtl: return "MTL";
    case Method::epp: return "EPP";
  }
  return "";
}

std::string_view aggression_source_name(AggressionSource s) {
  return s == AggressionSource::predicted ? "predicted" : "gold_diagnostic";
}

std::optional<AggressionSource> aggression_source_from_name(std::string_view name) {
  if (name == "predicted") return AggressionSource::predicted;
  if (name == "gold_diagnostic") return AggressionSource::gold_diagnostic;
  return std::nullopt;
}

std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::labeled: return "labeled";
    case Outcome::parse_failure: return "parse_failure";
    case Outcome::backend_error: return "backend_error";
  }
  return "labeled";
}

namespace {

struct StageShape {
  PromptMode mode;
  Task task;
};

StageShape stage_shape(const ExperimentSpec& spec, std::size_t stage) {
  if (spec.method == Method::epp) {
    return stage == 0 ? StageShape{PromptMode::zero_shot, Task::aggression}
                      : StageShape{PromptMode::enriched, Task::cyberbullying};
  }
  return {spec.method == Method::few_shot ? PromptMode::few_shot : PromptMode::zero_shot, spec.task};
}

std::vector<std::shared_ptr<Backend>> open_backends(const ExperimentSpec& spec,
                                                    const RunOptions& options) {
  if (!options.backends.empty()) {
    if (options.backends.size() != spec.stage_count()) {
      throw InvalidArgument("run: expected " + std::to_string(spec.stage_count()) +
                            " backend(s), got " + std::to_string(options.backends.size()));
    }
    return options.backends;
  }
  std::vector<std::shared_ptr<Backend>> out;
  for (const auto& d : spec.backends) out.push_back(open_backend(d));
  return out;
}

void check_records(std::span<const LabeledPost> records, Task task) {
  if (records.empty()) throw InvalidArgument("run: empty split");
  for (const auto& r : records) {
    if (r.task() != task) {
      throw InvalidArgument("run: post " + r.id + " is a " + std::string(task_name(r.task())) +
                            " post, the experiment targets " + std::string(task_name(task)));
    }
  }
}

// Runs fn(i) for every index on up to `workers` threads. Results land in
// caller-owned slots, so order never depends on scheduling. The first
// exception in index order is rethrown after all workers finish.
template <typename Fn>
void for_each_parallel(std::size_t n, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Calls the backend and parses the answer. Backend errors and parse failures
// stay inside the returned outcome; anything else propagates.
StageOutcome call_stage(Backend& backend, const Prompt& prompt, const SynonymTable& synonyms,
                        ResponseAuditLog* audit) {
  StageOutcome out;
  out.task = prompt.label_space;
  out.backend_id = backend.descriptor().backend_id;
  RawResponse raw;
  try {
    raw = backend.complete(prompt);
  } catch (const BackendError& e) {
    out.error = e.what();
    if (audit) audit->append_failure(prompt, e);
    return out;
  }
  if (audit) audit->append(prompt, raw);
  out.raw_text = raw.text;
  out.truncated = raw.truncated;
  try {
    const ParsedLabel parsed = parse_label(raw, prompt.label_space, synonyms);
    out.parsed = parsed.label;
    out.match_kind = parsed.match_kind;
  } catch (const ParseFailure& e) {
    out.error = e.what();
  }
  return out;
}

void settle(Prediction& p, const StageOutcome& final_stage) {
  if (final_stage.parsed) {
    p.outcome = Outcome::labeled;
    p.label = final_stage.parsed;
  } else {
    p.outcome = final_stage.raw_text ? Outcome::parse_failure : Outcome::backend_error;
  }
}

std::size_t parallelism(std::span<const std::shared_ptr<Backend>> backends) {
  std::size_t n = std::numeric_limits<std::size_t>::max();
  for (const auto& b : backends) n = std::min(n, b->descriptor().max_parallel_requests);
  return std::max<std::size_t>(n, 1);
}

std::optional<Label> label_from_json(const json& j, Task task) {
  if (j.is_null()) return std::nullopt;
  auto l = label_from_key(task, j.get<std::string>());
  if (!l) throw InvalidArgument("unknown label key " + j.get<std::string>());
  return l;
}

std::optional<MatchKind> match_kind_from_name(std::string_view s) {
  for (MatchKind k : {MatchKind::exact, MatchKind::synonym, MatchKind::substring_first}) {
    if (s == match_kind_name(k)) return k;
  }
  return std::nullopt;
}

}  // namespace

void ExperimentSpec::validate() const {
  if (model.empty()) throw InvalidArgument("experiment: model name is empty");
  if (method == Method::epp) {
    if (task != Task::cyberbullying) {
      throw InvalidArgument("experiment: epp targets the cyberbullying task");
    }
    if (backends.size() != 2) {
      throw InvalidArgument(
          "experiment: epp requires exactly two backends (aggression stage, cyberbullying stage), got " +
          std::to_string(backends.size()));
    }
  } else {
    if (backends.size() != 1) {
      throw InvalidArgument("experiment: " + std::string(method_name(method)) +
                            " requires exactly one backend, got " + std::to_string(backends.size()));
    }
    if (aggression_source != AggressionSource::predicted) {
      throw InvalidArgument("experiment: gold aggression labels only apply to epp");
    }
  }
  for (const auto& b : backends) b.validate();
  if (!templates.empty() && templates.size() != stage_count()) {
    throw InvalidArgument("experiment: expected " + std::to_string(stage_count()) +
                          " template(s), got " + std::to_string(templates.size()));
  }
  for (std::size_t s = 0; s < templates.size(); ++s) {
    templates[s].validate();
    const StageShape shape = stage_shape(*this, s);
    if (templates[s].mode != shape.mode || templates[s].task != shape.task) {
      throw InvalidArgument("experiment: template " + templates[s].template_id + " for stage " +
                            std::to_string(s + 1) + " must be " +
                            std::string(mode_name(shape.mode)) + "/" +
                            std::string(task_name(shape.task)));
    }
  }
  if (method == Method::few_shot && exemplars_per_class == 0) {
    throw InvalidArgument("experiment: exemplars_per_class must be >= 1");
  }
}

const PromptTemplate& ExperimentSpec::stage_template(std::size_t stage) const {
  if (stage >= stage_count()) throw InvalidArgument("experiment: no stage " + std::to_string(stage));
  if (!templates.empty()) return templates[stage];
  const StageShape shape = stage_shape(*this, stage);
  return default_template(shape.mode, shape.task);
}

std::vector<Prediction> run_baseline(std::span<const LabeledPost> records,
                                     const ExperimentSpec& spec, const RunOptions& options) {
  if (spec.method == Method::epp) throw InvalidArgument("run_baseline: use run_epp for epp");
  spec.validate();
  check_records(records, spec.task);
  const PromptTemplate& tmpl = spec.stage_template(0);

  std::vector<Prompt> prompts;
  prompts.reserve(records.size());
  if (spec.method == Method::few_shot) {
    const ExemplarSet ex =
        select_exemplars(options.exemplar_pool, spec.exemplars_per_class, spec.seed);
    for (const auto& r : records) prompts.push_back(render_few_shot(r, tmpl, ex));
  } else {
    for (const auto& r : records) prompts.push_back(render_zero_shot(r, tmpl));
  }

  const auto backends = open_backends(spec, options);
  const SynonymTable& synonyms = options.synonyms ? *options.synonyms : SynonymTable::builtin();
  std::vector<Prediction> out(records.size());
  for_each_parallel(records.size(), parallelism(backends), [&](std::size_t i) {
    Prediction& p = out[i];
    p.post_id = records[i].id;
    p.gold = records[i].label;
    p.provenance = prompts[i].provenance;
    p.final_prompt = prompts[i].rendered_text;
    p.stages.push_back(call_stage(*backends[0], prompts[i], synonyms, options.audit));
    settle(p, p.stages.back());
  });
  return out;
}

std::vector<Prediction> run_epp(std::span<const LabeledPost> records, const ExperimentSpec& spec,
                                const RunOptions& options) {
  if (spec.method != Method::epp) throw InvalidArgument("run_epp: spec method is not epp");
  spec.validate();
  check_records(records, Task::cyberbullying);
  const PromptTemplate& agg_tmpl = spec.stage_template(0);
  const PromptTemplate& cb_tmpl = spec.stage_template(1);

  const bool gold = spec.aggression_source == AggressionSource::gold_diagnostic;
  if (gold) {
    if (!options.gold_aggression) {
      throw InvalidArgument("run_epp: gold_diagnostic mode needs aggression annotations");
    }
    for (const auto& r : records) {
      if (!options.gold_aggression->contains(r.id)) {
        throw InvalidArgument("run_epp: no aggression annotation for post " + r.id);
      }
    }
  }

  // Stage-1 prompts see the post as an aggression item; its label is unused.
  std::vector<Prompt> stage1;
  if (!gold) {
    stage1.reserve(records.size());
    for (const auto& r : records) {
      LabeledPost as_agg = r;
      as_agg.label = AggressionLabel::NAG;
      stage1.push_back(render_zero_shot(as_agg, agg_tmpl));
    }
  }
  // Surfaces template problems before the first backend call.
  (void)render_enriched(records.front(), spec.stage1_fallback, cb_tmpl);

  const auto backends = open_backends(spec, options);
  const SynonymTable& synonyms = options.synonyms ? *options.synonyms : SynonymTable::builtin();
  std::vector<Prediction> out(records.size());
  for_each_parallel(records.size(), parallelism(backends), [&](std::size_t i) {
    Prediction& p = out[i];
    p.post_id = records[i].id;
    p.gold = records[i].label;

    AggressionLabel cue = spec.stage1_fallback;
    if (gold) {
      cue = options.gold_aggression->at(records[i].id);
    } else {
      p.stages.push_back(call_stage(*backends[0], stage1[i], synonyms, options.audit));
      if (p.stages.back().parsed) {
        cue = std::get<AggressionLabel>(*p.stages.back().parsed);
      } else {
        p.stage1_fallback = true;
      }
    }
    p.aggression_annotation = cue;

    const Prompt enriched = render_enriched(records[i], cue, cb_tmpl);
    p.provenance = enriched.provenance;
    p.final_prompt = enriched.rendered_text;
    p.stages.push_back(call_stage(*backends[1], enriched, synonyms, options.audit));
    settle(p, p.stages.back());
  });
  return out;
}

std::vector<Prediction> run_experiment(std::span<const LabeledPost> records,
                                       const ExperimentSpec& spec, const RunOptions& options) {
  return spec.method == Method::epp ? run_epp(records, spec, options)
                                    : run_baseline(records, spec, options);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

std::string prediction_to_line(const Prediction& p) {
  const Task task = task_of(p.gold);
  json j;
  j["post_id"] = p.post_id;
  j["task"] = task_name(task);
  j["gold"] = label_key(p.gold);
  j["outcome"] = outcome_name(p.outcome);
  j["label"] = p.label ? json(label_key(*p.label)) : json(nullptr);
  j["aggression_annotation"] =
      p.aggression_annotation ? json(label_key(*p.aggression_annotation)) : json(nullptr);
  j["stage1_fallback"] = p.stage1_fallback;

  const auto& pv = p.provenance;
  j["provenance"] = {{"template_id", pv.template_id},
                     {"template_version", pv.template_version},
                     {"mode", mode_name(pv.mode)},
                     {"exemplar_ids", pv.exemplar_ids},
                     {"aggression_label", pv.aggression_label
                                              ? json(label_key(*pv.aggression_label))
                                              : json(nullptr)},
                     {"post_id", pv.post_id}};
  json stages = json::array();
  for (const auto& s : p.stages) {
    stages.push_back({{"task", task_name(s.task)},
                      {"backend_id", s.backend_id},
                      {"raw_text", s.raw_text ? json(*s.raw_text) : json(nullptr)},
                      {"truncated", s.truncated},
                      {"parsed", s.parsed ? json(label_key(*s.parsed)) : json(nullptr)},
                      {"match_kind", s.match_kind ? json(match_kind_name(*s.match_kind)) : json(nullptr)},
                      {"error", s.error}});
  }
  j["stages"] = stages;
  return j.dump();
}

Prediction prediction_from_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    const auto task = task_from_name(j.at("task").get<std::string>());
    if (!task) throw InvalidArgument("prediction: unknown task");
    Prediction p;
    p.post_id = j.at("post_id").get<std::string>();
    p.gold = *label_from_json(j.at("gold"), *task);
    const auto outcome = j.at("outcome").get<std::string>();
    if (outcome == "labeled") p.outcome = Outcome::labeled;
    else if (outcome == "parse_failure") p.outcome = Outcome::parse_failure;
    else if (outcome == "backend_error") p.outcome = Outcome::backend_error;
    else throw InvalidArgument("prediction: unknown outcome " + outcome);
    p.label = label_from_json(j.at("label"), *task);
    if (auto a = label_from_json(j.at("aggression_annotation"), Task::aggression)) {
      p.aggression_annotation = std::get<AggressionLabel>(*a);
    }
    p.stage1_fallback = j.at("stage1_fallback").get<bool>();

    const json& pv = j.at("provenance");
    p.provenance.template_id = pv.at("template_id").get<std::string>();
    p.provenance.template_version = pv.at("template_version").get<int>();
    const auto mode = mode_from_name(pv.at("mode").get<std::string>());
    if (!mode) throw InvalidArgument("prediction: unknown prompt mode");
    p.provenance.mode = *mode;
    p.provenance.exemplar_ids = pv.at("exemplar_ids").get<std::vector<std::string>>();
    if (auto a = label_from_json(pv.at("aggression_label"), Task::aggression)) {
      p.provenance.aggression_label = std::get<AggressionLabel>(*a);
    }
    p.provenance.post_id = pv.at("post_id").get<std::string>();

    for (const auto& s : j.at("stages")) {
      StageOutcome st;
      const auto st_task = task_from_name(s.at("task").get<std::string>());
      if (!st_task) throw InvalidArgument("prediction: unknown stage task");
      st.task = *st_task;
      st.backend_id = s.at("backend_id").get<std::string>();
      if (!s.at("raw_text").is_null()) st.raw_text = s.at("raw_text").get<std::string>();
      st.truncated = s.at("truncated").get<bool>();
      st.parsed = label_from_json(s.at("parsed"), st.task);
      if (!s.at("match_kind").is_null()) {
        st.match_kind = match_kind_from_name(s.at("match_kind").get<std::string>());
      }
      st.error = s.at("error").get<std::string>();
      p.stages.push_back(std::move(st));
    }
    return p;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("prediction: malformed line: ") + e.what());
  }
}

void write_predictions(const std::filesystem::path& path, std::span<const Prediction> preds) {
  std::string out;
  for (const auto& p : preds) {
    out += prediction_to_line(p);
    out += '\n';
  }
  detail::write_file(path, out);
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::vector<Prediction> out;
  const std::string data = detail::read_file(path);
  for (auto line : detail::lines(data)) {
    if (detail::trim(line).empty()) continue;
    out.push_back(prediction_from_line(line));
  }
  return out;
}

}  // namespace cbd
