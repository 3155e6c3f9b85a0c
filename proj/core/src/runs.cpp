#include "cbd/runs.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "cbd/error.hpp"
#include "cbd/random.hpp"
#include "detail/config_json.hpp"
#include "detail/strings.hpp"

namespace cbd {

namespace fs = std::filesystem;
using detail::Issues;
using detail::json;
using detail::key_path;
using detail::index_path;

namespace {

constexpr std::string_view kToolVersion = "cbd 0.1.0";

json parse_document(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::vector<ConfigIssue>{{"", std::string("not valid JSON: ") + e.what()}});
  }
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t hash_file(const fs::path& p, std::uint64_t h) {
  h = fnv1a64(p.filename().string(), h);
  return fnv1a64(detail::read_file(p), h);
}

json paths_to_json(const std::vector<fs::path>& paths) {
  json a = json::array();
  for (const auto& p : paths) a.push_back(p.string());
  return a;
}

std::vector<fs::path> resolve_files(const json& obj, const std::string& path, std::string_view key,
                                    bool required, const fs::path& base, Issues& issues) {
  std::vector<fs::path> out;
  const auto list = detail::get_string_list(obj, path, key, required, issues);
  if (!list) return out;
  const json& v = obj.at(std::string(key));
  for (std::size_t i = 0; i < list->size(); ++i) {
    const std::string p = v.is_array() ? index_path(key_path(path, key), i) : key_path(path, key);
    if (auto f = detail::existing_file(base, (*list)[i], p, issues)) out.push_back(*f);
  }
  return out;
}

std::optional<Task> get_task(const json& obj, const std::string& path, std::string_view key,
                             bool required, Issues& issues) {
  auto s = detail::get_string(obj, path, key, required, issues);
  if (!s) return std::nullopt;
  auto t = task_from_name(*s);
  if (!t) issues.add(key_path(path, key), "unknown task '" + *s + "' (aggression, cyberbullying)");
  return t;
}

// ---------------------------------------------------------------------------
// Backend descriptor
// ---------------------------------------------------------------------------

std::optional<BackendDescriptor> descriptor_from_json(const json& j, const std::string& path,
                                                      const fs::path& base, Issues& issues) {
  if (!detail::expect_object(j, path, issues)) return std::nullopt;
  detail::reject_unknown_keys(j, path,
                              {"backend_id", "kind", "model_name", "max_parallel_requests",
                               "timeout_ms", "retry", "endpoint", "api_key_env", "decoding", "stub",
                               "checkpoint"},
                              issues);
  BackendDescriptor d;
  bool ok = true;
  if (auto id = detail::get_string(j, path, "backend_id", true, issues)) d.backend_id = *id; else ok = false;
  if (auto kind = detail::get_string(j, path, "kind", true, issues)) {
    if (auto k = backend_kind_from_name(*kind)) {
      d.kind = *k;
    } else {
      issues.add(key_path(path, "kind"), "unknown backend kind '" + *kind +
                                             "' (live_endpoint, stub, tuned_checkpoint)");
      ok = false;
    }
  } else {
    ok = false;
  }
  if (auto m = detail::get_string(j, path, "model_name", false, issues, true)) d.model_name = *m;
  if (auto n = detail::get_uint(j, path, "max_parallel_requests", false, issues, 1)) d.max_parallel_requests = *n;
  if (auto t = detail::get_uint(j, path, "timeout_ms", false, issues, 1)) d.timeout = std::chrono::milliseconds(*t);

  if (const json* r = detail::member(j, path, "retry", false, issues)) {
    const std::string rp = key_path(path, "retry");
    if (detail::expect_object(*r, rp, issues)) {
      detail::reject_unknown_keys(*r, rp, {"max_attempts", "backoff_ms"}, issues);
      if (auto a = detail::get_uint(*r, rp, "max_attempts", false, issues, 1)) d.retry.max_attempts = *a;
      if (const json* b = detail::member(*r, rp, "backoff_ms", false, issues)) {
        if (!b->is_array()) {
          issues.add(key_path(rp, "backoff_ms"), "expected a list of non-negative integers");
        } else {
          d.retry.backoff.clear();
          for (std::size_t i = 0; i < b->size(); ++i) {
            if (!(*b)[i].is_number_unsigned()) {
              issues.add(index_path(key_path(rp, "backoff_ms"), i), "expected a non-negative integer");
            } else {
              d.retry.backoff.emplace_back((*b)[i].get<std::uint64_t>());
            }
          }
        }
      }
    }
  }
  if (auto e = detail::get_string(j, path, "endpoint", false, issues, true)) d.endpoint_address = *e;
  if (auto e = detail::get_string(j, path, "api_key_env", false, issues, true)) d.api_key_env = *e;
  if (const json* dec = detail::member(j, path, "decoding", false, issues)) {
    const std::string dp = key_path(path, "decoding");
    if (detail::expect_object(*dec, dp, issues)) {
      detail::reject_unknown_keys(*dec, dp, {"temperature", "max_tokens"}, issues);
      if (auto t = detail::get_number(*dec, dp, "temperature", false, issues)) {
        if (*t < 0) issues.add(key_path(dp, "temperature"), "must be >= 0");
        d.decoding.temperature = *t;
      }
      if (auto m = detail::get_uint(*dec, dp, "max_tokens", false, issues, 1)) {
        d.decoding.max_tokens = static_cast<int>(*m);
      }
    }
  }

  const json* stub = detail::member(j, path, "stub", false, issues);
  if (stub) {
    const std::string sp = key_path(path, "stub");
    if (detail::expect_object(*stub, sp, issues)) {
      detail::reject_unknown_keys(*stub, sp, {"rules", "class_names", "default_response", "scope"},
                                  issues);
      if (const json* rules = detail::member(*stub, sp, "rules", false, issues)) {
        const std::string rp = key_path(sp, "rules");
        if (!rules->is_array()) {
          issues.add(rp, "expected a list of rules");
        } else {
          for (std::size_t i = 0; i < rules->size(); ++i) {
            const std::string ip = index_path(rp, i);
            const json& rule = (*rules)[i];
            if (!detail::expect_object(rule, ip, issues)) continue;
            detail::reject_unknown_keys(rule, ip, {"pattern", "response", "fail"}, issues);
            StubRule sr;
            if (auto p = detail::get_string(rule, ip, "pattern", true, issues, true)) sr.pattern = *p;
            if (auto f = detail::get_bool(rule, ip, "fail", false, issues)) sr.fail = *f;
            if (auto r = detail::get_string(rule, ip, "response", !sr.fail, issues, true)) sr.response = *r;
            d.stub_rules.push_back(std::move(sr));
          }
        }
      }
      if (auto t = get_task(*stub, sp, "class_names", false, issues)) {
        for (const auto& l : label_space(*t)) {
          d.stub_rules.push_back({std::string(display_name(l)), std::string(display_name(l)), false});
        }
      }
      if (auto r = detail::get_string(*stub, sp, "default_response", false, issues, true)) {
        d.stub_default_response = *r;
      }
      if (auto s = detail::get_string(*stub, sp, "scope", false, issues)) {
        if (*s == "query") d.stub_scope = StubScope::query;
        else if (*s == "prompt") d.stub_scope = StubScope::prompt;
        else issues.add(key_path(sp, "scope"), "expected 'query' or 'prompt'");
      }
    }
  }
  if (ok && d.kind == BackendKind::stub && d.stub_rules.empty()) {
    issues.add(key_path(path, "stub"), "a stub backend needs at least one rule (rules or class_names)");
  }
  if (ok && d.kind != BackendKind::stub && stub) {
    issues.add(key_path(path, "stub"), "only stub backends take stub rules");
  }
  if (auto c = detail::get_string(j, path, "checkpoint", ok && d.kind == BackendKind::tuned_checkpoint,
                                  issues)) {
    if (auto f = detail::existing_file(base, *c, key_path(path, "checkpoint"), issues)) d.checkpoint = *f;
  }
  if (!ok) return std::nullopt;
  return d;
}

json descriptor_to_json(const BackendDescriptor& d) {
  json j;
  j["backend_id"] = d.backend_id;
  j["kind"] = backend_kind_name(d.kind);
  j["model_name"] = d.model_name;
  j["max_parallel_requests"] = d.max_parallel_requests;
  j["timeout_ms"] = d.timeout.count();
  json backoff = json::array();
  for (auto b : d.retry.backoff) backoff.push_back(b.count());
  j["retry"] = {{"max_attempts", d.retry.max_attempts}, {"backoff_ms", backoff}};
  switch (d.kind) {
    case BackendKind::live_endpoint:
      j["endpoint"] = d.endpoint_address;
      j["api_key_env"] = d.api_key_env;
      j["decoding"] = {{"temperature", d.decoding.temperature}, {"max_tokens", d.decoding.max_tokens}};
      break;
    case BackendKind::stub: {
      json rules = json::array();
      for (const auto& r : d.stub_rules) {
        rules.push_back({{"pattern", r.pattern}, {"response", r.response}, {"fail", r.fail}});
      }
      j["stub"] = {{"rules", rules},
                   {"default_response", d.stub_default_response},
                   {"scope", d.stub_scope == StubScope::query ? "query" : "prompt"}};
      break;
    }
    case BackendKind::tuned_checkpoint:
      j["checkpoint"] = d.checkpoint.string();
      break;
  }
  return j;
}

}  // namespace

BackendDescriptor parse_backend_descriptor(std::string_view json_text, const fs::path& base_dir) {
  Issues issues;
  auto d = descriptor_from_json(parse_document(json_text), "", base_dir, issues);
  issues.throw_if_any();
  try {
    d->validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::vector<ConfigIssue>{{"", e.what()}});
  }
  return *d;
}

std::string backend_descriptor_to_json(const BackendDescriptor& d) {
  return descriptor_to_json(d).dump(2);
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

PrepareResult prepare_data(const fs::path& input, const SchemaMapping& schema,
                           const SplitSpec& split, const fs::path& out_dir) {
  split.validate();
  LoadResult loaded = load_dataset(input, schema);
  CorpusSplits parts = split_corpus(loaded.posts, split);
  for (auto& p : parts.train) p.split = Split::train;
  for (auto& p : parts.validation) p.split = Split::validation;
  for (auto& p : parts.test) p.split = Split::test;

  write_records(out_dir / "train.jsonl", parts.train);
  write_records(out_dir / "validation.jsonl", parts.validation);
  write_records(out_dir / "test.jsonl", parts.test);
  write_rejects(out_dir / "rejects.jsonl", loaded.rejects);
  return {loaded.rows_read, loaded.rejects.size(), parts.sizes(), out_dir};
}

std::vector<LabeledPost> read_record_files(std::span<const fs::path> files) {
  std::vector<LabeledPost> out;
  std::set<std::string> seen;
  for (const auto& f : files) {
    for (auto& p : read_records(f)) {
      if (!seen.insert(p.id).second) {
        throw InvalidArgument(f.string() + ": duplicate record id " + p.id);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run configs
// ---------------------------------------------------------------------------

namespace {

std::map<std::string, AggressionLabel> load_gold_aggression(const fs::path& path) {
  const json j = parse_document(detail::read_file(path));
  if (!j.is_object()) throw InvalidArgument(path.string() + ": expected an object of post_id -> label");
  std::map<std::string, AggressionLabel> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it->is_string()) throw InvalidArgument(path.string() + ": label for " + it.key() + " is not a string");
    auto l = label_from_key(Task::aggression, it->get<std::string>());
    if (!l) throw InvalidArgument(path.string() + ": unknown aggression label " + it->get<std::string>());
    out.emplace(it.key(), std::get<AggressionLabel>(*l));
  }
  return out;
}

}  // namespace

RunConfig parse_run_config(std::string_view json_text, const fs::path& base_dir) {
  const json j = parse_document(json_text);
  Issues issues;
  if (!detail::expect_object(j, "", issues)) issues.throw_if_any();
  detail::reject_unknown_keys(j, "",
                              {"model", "method", "task", "backends", "templates", "corpus",
                               "exemplar_pool", "exemplars_per_class", "seed", "stage1_fallback",
                               "aggression_source", "gold_aggression", "synonyms", "output_dir",
                               "parse_failure_policy", "recorded"},
                              issues);
  RunConfig c;
  ExperimentSpec& s = c.spec;
  if (auto m = detail::get_string(j, "", "model", false, issues)) s.model = *m;

  std::optional<Method> method;
  if (auto m = detail::get_string(j, "", "method", true, issues)) {
    method = method_from_name(*m);
    if (!method) issues.add("method", "unknown method '" + *m + "' (zero_shot, few_shot, lora_sft, mtl, epp)");
  }
  if (method) s.method = *method;
  const bool epp = method == Method::epp;

  if (auto t = get_task(j, "", "task", !epp, issues)) {
    s.task = *t;
    if (epp && *t != Task::cyberbullying) issues.add("task", "epp targets the cyberbullying task");
  } else if (epp) {
    s.task = Task::cyberbullying;
  }

  const std::size_t stages = epp ? 2 : 1;
  if (const json* b = detail::member(j, "", "backends", true, issues)) {
    if (!b->is_array()) {
      issues.add("backends", "expected a list of backend descriptors");
    } else {
      if (method && b->size() != stages) {
        issues.add("backends", epp ? "epp requires exactly two backends (aggression stage, cyberbullying stage), got " +
                                         std::to_string(b->size())
                                   : "expected exactly one backend, got " + std::to_string(b->size()));
      }
      std::set<std::string> ids;
      for (std::size_t i = 0; i < b->size(); ++i) {
        if (auto d = descriptor_from_json((*b)[i], index_path("backends", i), base_dir, issues)) {
          s.backends.push_back(std::move(*d));
        }
      }
    }
  }

  c.template_files = resolve_files(j, "", "templates", false, base_dir, issues);
  if (j.contains("templates") && method && !c.template_files.empty() &&
      c.template_files.size() != stages) {
    issues.add("templates", "expected " + std::to_string(stages) + " template file(s), one per stage");
  }
  for (std::size_t i = 0; i < c.template_files.size(); ++i) {
    try {
      s.templates.push_back(PromptTemplate::load(c.template_files[i]));
    } catch (const Error& e) {
      issues.add(index_path("templates", i), e.what());
    }
  }

  c.corpus = resolve_files(j, "", "corpus", true, base_dir, issues);
  c.exemplar_pool = resolve_files(j, "", "exemplar_pool", method == Method::few_shot, base_dir, issues);
  if (auto k = detail::get_uint(j, "", "exemplars_per_class", false, issues, 1)) s.exemplars_per_class = *k;
  if (auto seed = detail::get_uint(j, "", "seed", false, issues)) s.seed = *seed;
  if (auto f = detail::get_string(j, "", "stage1_fallback", false, issues)) {
    if (auto l = label_from_key(Task::aggression, *f)) s.stage1_fallback = std::get<AggressionLabel>(*l);
    else issues.add("stage1_fallback", "expected NAG, CAG or OAG");
  }
  if (auto a = detail::get_string(j, "", "aggression_source", false, issues)) {
    if (auto src = aggression_source_from_name(*a)) s.aggression_source = *src;
    else issues.add("aggression_source", "expected 'predicted' or 'gold_diagnostic'");
  }
  const bool gold = s.aggression_source == AggressionSource::gold_diagnostic;
  if (auto g = detail::get_string(j, "", "gold_aggression", gold, issues)) {
    if (!gold) {
      issues.add("gold_aggression", "only used with aggression_source = gold_diagnostic");
    } else if (auto f = detail::existing_file(base_dir, *g, "gold_aggression", issues)) {
      c.gold_aggression = *f;
      try {
        (void)load_gold_aggression(*f);
      } catch (const Error& e) {
        issues.add("gold_aggression", e.what());
      }
    }
  }
  if (auto syn = detail::get_string(j, "", "synonyms", false, issues)) {
    if (auto f = detail::existing_file(base_dir, *syn, "synonyms", issues)) {
      c.synonyms = *f;
      try {
        (void)SynonymTable::load(*f);
      } catch (const Error& e) {
        issues.add("synonyms", e.what());
      }
    }
  }
  c.output_dir = detail::resolve_path(base_dir, "runs");
  if (auto o = detail::get_string(j, "", "output_dir", false, issues)) c.output_dir = detail::resolve_path(base_dir, *o);
  if (auto p = detail::get_string(j, "", "parse_failure_policy", false, issues)) {
    if (auto pol = failure_policy_from_name(*p)) c.policy = *pol;
    else issues.add("parse_failure_policy", "expected 'exclude_and_report' or 'count_as_error_class'");
  }

  if (issues.empty()) {
    try {
      s.validate();
    } catch (const InvalidArgument& e) {
      issues.add("", e.what());
    }
  }
  issues.throw_if_any();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  return parse_run_config(detail::read_file(file), fs::absolute(file).parent_path());
}

namespace {

json run_config_json(const RunConfig& c, bool with_output_dir) {
  const ExperimentSpec& s = c.spec;
  json j;
  j["model"] = s.model;
  j["method"] = method_name(s.method);
  j["task"] = task_name(s.task);
  json backends = json::array();
  for (const auto& b : s.backends) backends.push_back(descriptor_to_json(b));
  j["backends"] = backends;
  if (!c.template_files.empty()) j["templates"] = paths_to_json(c.template_files);
  j["corpus"] = paths_to_json(c.corpus);
  if (!c.exemplar_pool.empty()) j["exemplar_pool"] = paths_to_json(c.exemplar_pool);
  j["exemplars_per_class"] = s.exemplars_per_class;
  j["seed"] = s.seed;
  j["stage1_fallback"] = label_key(s.stage1_fallback);
  j["aggression_source"] = aggression_source_name(s.aggression_source);
  if (!c.gold_aggression.empty()) j["gold_aggression"] = c.gold_aggression.string();
  if (!c.synonyms.empty()) j["synonyms"] = c.synonyms.string();
  if (with_output_dir) j["output_dir"] = c.output_dir.string();
  j["parse_failure_policy"] = failure_policy_name(c.policy);
  return j;
}

}  // namespace

std::string run_config_to_json(const RunConfig& config) {
  return run_config_json(config, true).dump(2);
}

std::string run_id_for(const RunConfig& c) {
  std::uint64_t h = fnv1a64(run_config_json(c, false).dump());
  for (const auto& f : c.corpus) h = hash_file(f, h);
  for (const auto& f : c.exemplar_pool) h = hash_file(f, h);
  for (const auto& f : c.template_files) h = hash_file(f, h);
  if (!c.synonyms.empty()) h = hash_file(c.synonyms, h);
  if (!c.gold_aggression.empty()) h = hash_file(c.gold_aggression, h);
  for (const auto& b : c.spec.backends) {
    if (b.kind == BackendKind::tuned_checkpoint) h = hash_file(b.checkpoint, h);
  }
  return hex64(h);
}

RunResult execute_run(const RunConfig& config) {
  config.spec.validate();
  // Everything is loaded and checked before the run directory exists.
  const std::vector<LabeledPost> records = read_record_files(config.corpus);
  const std::vector<LabeledPost> pool = read_record_files(config.exemplar_pool);
  std::map<std::string, AggressionLabel> gold;
  if (!config.gold_aggression.empty()) gold = load_gold_aggression(config.gold_aggression);
  std::optional<SynonymTable> synonyms;
  if (!config.synonyms.empty()) synonyms = SynonymTable::load(config.synonyms);
  if (config.spec.method == Method::few_shot) {
    (void)select_exemplars(pool, config.spec.exemplars_per_class, config.spec.seed);
  }
  std::vector<std::shared_ptr<Backend>> backends;
  for (const auto& d : config.spec.backends) backends.push_back(open_backend(d));

  const std::string run_id = run_id_for(config);
  const fs::path final_dir = config.output_dir / run_id;
  const fs::path work_dir = config.output_dir / ("." + run_id + ".partial");
  fs::remove_all(work_dir);
  fs::create_directories(work_dir);

  RunResult result;
  result.run_id = run_id;
  try {
    std::vector<Prediction> preds;
    {
      ResponseAuditLog audit(work_dir / "responses.jsonl");
      RunOptions options;
      options.exemplar_pool = pool;
      options.gold_aggression = config.gold_aggression.empty() ? nullptr : &gold;
      options.backends = backends;
      options.synonyms = synonyms ? &*synonyms : nullptr;
      options.audit = &audit;
      preds = run_experiment(records, config.spec, options);
    }
    write_predictions(work_dir / "predictions.jsonl", preds);

    EvalReport report = compute_metrics(build_confusion(preds, config.spec.task), config.policy);
    report.run_id = run_id;
    detail::write_file(work_dir / "report.json", report_to_json(report) + "\n");

    json manifest = run_config_json(config, true);
    json templates = json::array();
    for (std::size_t s = 0; s < config.spec.stage_count(); ++s) {
      const auto& t = config.spec.stage_template(s);
      templates.push_back({{"template_id", t.template_id}, {"version", t.version}});
    }
    manifest["recorded"] = {{"run_id", run_id},
                            {"tool", kToolVersion},
                            {"records", records.size()},
                            {"templates", templates},
                            {"seed", config.spec.seed}};
    detail::write_file(work_dir / "manifest.json", manifest.dump(2) + "\n");

    fs::remove_all(final_dir);
    fs::rename(work_dir, final_dir);
    result.predictions = std::move(preds);
    result.report = std::move(report);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(work_dir, ec);
    throw;
  }
  result.dir = final_dir;
  return result;
}

StoredRun load_run(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  const fs::path report_path = dir / "report.json";
  if (!fs::is_regular_file(manifest_path)) throw IoError(dir.string() + ": no manifest.json");
  if (!fs::is_regular_file(report_path)) throw IoError(dir.string() + ": no report.json");
  StoredRun run;
  run.dir = dir;
  try {
    const json m = json::parse(detail::read_file(manifest_path));
    run.key.model = m.value("model", std::string("model"));
    const auto method = method_from_name(m.at("method").get<std::string>());
    if (!method) throw InvalidArgument(manifest_path.string() + ": unknown method");
    run.key.method = *method;
    const auto task = m.contains("task") ? task_from_name(m.at("task").get<std::string>())
                                         : std::optional<Task>(Task::cyberbullying);
    if (!task) throw InvalidArgument(manifest_path.string() + ": unknown task");
    run.key.task = *task;
  } catch (const json::exception& e) {
    throw InvalidArgument(manifest_path.string() + ": " + e.what());
  }
  run.report = report_from_json(detail::read_file(report_path));
  if (run.report.task != run.key.task) {
    throw InvalidArgument(dir.string() + ": report task differs from manifest task");
  }
  return run;
}

std::vector<fs::path> find_runs(std::span<const fs::path> roots) {
  std::vector<fs::path> out;
  for (const auto& root : roots) {
    if (!fs::is_directory(root)) throw IoError(root.string() + ": not a directory");
    if (fs::is_regular_file(root / "manifest.json")) {
      out.push_back(root);
      continue;
    }
    std::vector<fs::path> found;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && entry.path().filename().string().front() != '.' &&
          fs::is_regular_file(entry.path() / "manifest.json")) {
        found.push_back(entry.path());
      }
    }
    std::sort(found.begin(), found.end());
    out.insert(out.end(), found.begin(), found.end());
  }
  if (out.empty()) throw InvalidArgument("no run directories found");
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainConfig parse_train_config(std::string_view json_text, const fs::path& base_dir) {
  const json j = parse_document(json_text);
  Issues issues;
  if (!detail::expect_object(j, "", issues)) issues.throw_if_any();
  detail::reject_unknown_keys(j, "",
                              {"method", "task", "train", "aggression_train", "cyberbullying_train",
                               "enrich_with", "network", "rank", "learning_rate", "batch_size",
                               "epochs", "target_layers", "seed", "output_dir", "recorded"},
                              issues);
  TrainConfig c;
  std::optional<TuneMethod> method;
  if (auto m = detail::get_string(j, "", "method", true, issues)) {
    if (*m == "lora_sft") method = TuneMethod::lora_sft;
    else if (*m == "mtl") method = TuneMethod::mtl;
    else issues.add("method", "unknown training method '" + *m + "' (lora_sft, mtl)");
  }
  if (method) c.method = *method;
  const bool mtl = method == TuneMethod::mtl;
  c.tune = mtl ? TuneConfig::mtl_defaults() : TuneConfig::sft_defaults();

  if (mtl) {
    for (const char* k : {"task", "train", "enrich_with"}) {
      if (j.contains(k)) issues.add(k, "not used by mtl training");
    }
    c.aggression_train = resolve_files(j, "", "aggression_train", true, base_dir, issues);
    c.cyberbullying_train = resolve_files(j, "", "cyberbullying_train", true, base_dir, issues);
  } else if (method) {
    for (const char* k : {"aggression_train", "cyberbullying_train"}) {
      if (j.contains(k)) issues.add(k, "only used by mtl training");
    }
    if (auto t = get_task(j, "", "task", true, issues)) c.task = *t;
    c.train = resolve_files(j, "", "train", true, base_dir, issues);
    if (auto e = detail::get_string(j, "", "enrich_with", false, issues)) {
      if (c.task != Task::cyberbullying) {
        issues.add("enrich_with", "only applies when training the cyberbullying task");
      } else if (auto f = detail::existing_file(base_dir, *e, "enrich_with", issues)) {
        c.enrich_with = *f;
      }
    }
  }

  if (const json* n = detail::member(j, "", "network", false, issues)) {
    if (detail::expect_object(*n, "network", issues)) {
      detail::reject_unknown_keys(*n, "network",
                                  {"vocab_size", "d_model", "n_layers", "d_ff", "max_seq_len", "seed"},
                                  issues);
      if (auto v = detail::get_uint(*n, "network", "vocab_size", false, issues, 2)) c.network.vocab_size = *v;
      if (auto v = detail::get_uint(*n, "network", "d_model", false, issues, 1)) c.network.d_model = *v;
      if (auto v = detail::get_uint(*n, "network", "n_layers", false, issues, 1)) c.network.n_layers = *v;
      if (auto v = detail::get_uint(*n, "network", "d_ff", false, issues, 1)) c.network.d_ff = *v;
      if (auto v = detail::get_uint(*n, "network", "max_seq_len", false, issues, 2)) c.network.max_seq_len = *v;
      if (auto v = detail::get_uint(*n, "network", "seed", false, issues)) c.network.seed = *v;
    }
  }
  if (auto r = detail::get_uint(j, "", "rank", false, issues, 1)) c.tune.rank = *r;
  if (auto lr = detail::get_number(j, "", "learning_rate", false, issues)) {
    if (*lr < 0) issues.add("learning_rate", "must be >= 0");
    c.tune.learning_rate = *lr;
  } else if (!j.contains("learning_rate")) {
    c.learning_rate_defaulted = true;
  }
  if (auto b = detail::get_uint(j, "", "batch_size", false, issues, 1)) c.tune.batch_size = *b;
  if (auto e = detail::get_uint(j, "", "epochs", false, issues, 1)) c.tune.epochs = *e;
  if (auto t = detail::get_string_list(j, "", "target_layers", false, issues)) c.tune.target_layers = *t;
  if (auto s = detail::get_uint(j, "", "seed", false, issues)) c.tune.seed = *s;
  c.output_dir = detail::resolve_path(base_dir, "train-out");
  if (auto o = detail::get_string(j, "", "output_dir", false, issues)) c.output_dir = detail::resolve_path(base_dir, *o);

  if (issues.empty()) {
    // The selector has to hit at least one weight of the toy network.
    try {
      const ToyNetwork net(c.network);
      bool hit = false;
      for (const auto& w : net.attachable_weights()) {
        for (const auto& p : c.tune.target_layers) hit = hit || glob_match(p, w);
      }
      if (!hit) issues.add("target_layers", "matches no weight matrix");
    } catch (const InvalidArgument& e) {
      issues.add("network", e.what());
    }
  }
  issues.throw_if_any();

  if (mtl && (c.tune.epochs < 3 || c.tune.epochs > 6)) {
    c.warnings.push_back("mtl epochs = " + std::to_string(c.tune.epochs) +
                         " is outside the usual range of 3 to 6");
  }
  return c;
}

TrainConfig load_train_config(const fs::path& file) {
  return parse_train_config(detail::read_file(file), fs::absolute(file).parent_path());
}

namespace {

json train_config_json(const TrainConfig& c) {
  json j;
  j["method"] = tune_method_name(c.method);
  if (c.method == TuneMethod::lora_sft) {
    j["task"] = task_name(c.task);
    j["train"] = paths_to_json(c.train);
    if (!c.enrich_with.empty()) j["enrich_with"] = c.enrich_with.string();
  } else {
    j["aggression_train"] = paths_to_json(c.aggression_train);
    j["cyberbullying_train"] = paths_to_json(c.cyberbullying_train);
  }
  j["network"] = {{"vocab_size", c.network.vocab_size}, {"d_model", c.network.d_model},
                  {"n_layers", c.network.n_layers},     {"d_ff", c.network.d_ff},
                  {"max_seq_len", c.network.max_seq_len}, {"seed", c.network.seed}};
  j["rank"] = c.tune.rank;
  j["learning_rate"] = c.tune.learning_rate;
  j["batch_size"] = c.tune.batch_size;
  j["epochs"] = c.tune.epochs;
  j["target_layers"] = c.tune.target_layers;
  j["seed"] = c.tune.seed;
  j["output_dir"] = c.output_dir.string();
  return j;
}

std::vector<LabeledPost> training_records(std::span<const fs::path> files, Task task) {
  auto posts = read_record_files(files);
  if (posts.empty()) throw InvalidArgument("training data is empty");
  for (const auto& p : posts) {
    if (p.task() != task) {
      throw InvalidArgument("training record " + p.id + " is a " + std::string(task_name(p.task())) +
                            " record, expected " + std::string(task_name(task)));
    }
    if (p.split != Split::train) {
      throw InvalidArgument("training record " + p.id + " belongs to the " +
                            std::string(split_name(p.split)) + " split");
    }
  }
  return posts;
}

}  // namespace

TrainResult execute_train(const TrainConfig& c) {
  c.tune.validate();
  const bool mtl = c.method == TuneMethod::mtl;
  std::vector<LabeledPost> agg, cb, data;
  if (mtl) {
    agg = training_records(c.aggression_train, Task::aggression);
    cb = training_records(c.cyberbullying_train, Task::cyberbullying);
  } else {
    data = training_records(c.train, c.task);
  }

  if (!c.enrich_with.empty()) {
    const Checkpoint enrich = load_checkpoint(c.enrich_with);
    const TaskHead* head = enrich.head_for(Task::aggression);
    if (!head) throw InvalidArgument(c.enrich_with.string() + ": checkpoint has no aggression head");
    const AdaptedModel agg_model = restore_model(enrich);
    for (auto& p : data) {
      const auto cue = std::get<AggressionLabel>(predict(agg_model, *head, p.text));
      p.text = enrichment_sentence(cue) + "\n\n" + p.text;
    }
  }

  auto base = std::make_shared<const ToyNetwork>(c.network);
  AdaptedModel model(base);
  std::string metrics;
  const MetricsSink sink = [&](const TrainStepRecord& r) { metrics += metrics_line(r) + "\n"; };

  Checkpoint ck;
  ck.method = c.method;
  ck.network = c.network;
  ck.tune = c.tune;
  ck.enriched_inputs = !c.enrich_with.empty();
  ck.base_checksum = base->checksum();

  std::size_t steps = 0;
  if (mtl) {
    model.attach("aggression", c.tune);
    model.attach("cyberbullying", c.tune);
    TaskHead agg_head = TaskHead::zeros(Task::aggression, c.network.d_model);
    TaskHead cb_head = TaskHead::zeros(Task::cyberbullying, c.network.d_model);
    MtlTrainer trainer(model, agg_head, cb_head, c.tune);
    steps = train_mtl(trainer, agg, cb, c.tune, sink);
    ck.heads = {agg_head, cb_head};
  } else {
    model.attach("default", c.tune);
    TaskHead head = TaskHead::zeros(c.task, c.network.d_model);
    SftTrainer trainer(model, head, c.tune);
    steps = train_sft(trainer, data, c.tune, sink);
    ck.heads = {head};
  }
  ck.adapters = model.adapters();

  TrainResult result;
  result.checkpoint = c.output_dir / "checkpoint.cbd";
  result.metrics = c.output_dir / "metrics.jsonl";
  result.manifest = c.output_dir / "manifest.json";
  result.steps = steps;
  result.warnings = c.warnings;

  json manifest = train_config_json(c);
  manifest["recorded"] = {{"tool", kToolVersion},
                          {"steps", steps},
                          {"learning_rate_source", c.learning_rate_defaulted ? "default" : "config"},
                          {"base_checksum", ck.base_checksum},
                          {"warnings", c.warnings}};
  save_checkpoint(result.checkpoint, ck);
  detail::write_file(result.metrics, metrics);
  detail::write_file(result.manifest, manifest.dump(2) + "\n");
  return result;
}

}  // namespace cbd
