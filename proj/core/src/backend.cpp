#include "cbd/backend.hpp"

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <semaphore>
#include <thread>

#include "detail/strings.hpp"
#include "json.hpp"

#include "cbd/tuning.hpp"
#include "httplib.h"

namespace cbd {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::string_view kDefaultChatPath = "/v1/chat/completions";

std::chrono::milliseconds since(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start);
}

std::chrono::microseconds micros_since(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - start);
}

class HttplibTransport final : public Transport {
 public:
  HttpResponse post_json(const std::string& url, const std::string& body,
                         const std::vector<std::pair<std::string, std::string>>& headers,
                         std::chrono::milliseconds timeout) override {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
      throw TransportFailure("endpoint address lacks a scheme: " + url, false);
    }
    auto path_start = url.find('/', scheme_end + 3);
    std::string origin = url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? std::string(kDefaultChatPath)
                                                       : url.substr(path_start);

    httplib::Client client(origin);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());

    httplib::Headers h;
    for (const auto& [k, v] : headers) h.emplace(k, v);
    const auto start = Clock::now();
    auto res = client.Post(path, h, body, "application/json");
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                             (err == httplib::Error::Read && since(start) >= timeout);
      throw TransportFailure(httplib::to_string(err), timed_out);
    }
    return {res->status, res->body};
  }
};

class StubBackend final : public Backend {
 public:
  explicit StubBackend(BackendDescriptor d) : d_(std::move(d)) { d_.validate(); }

  const BackendDescriptor& descriptor() const override { return d_; }

  RawResponse complete(const Prompt& prompt) override {
    const auto start = Clock::now();
    const std::string& haystack =
        d_.stub_scope == StubScope::query ? prompt.query_text : prompt.rendered_text;
    const std::string* response = &d_.stub_default_response;
    for (const auto& rule : d_.stub_rules) {
      if (haystack.find(rule.pattern) != std::string::npos) {
        if (rule.fail) {
          throw TransportError("stub " + d_.backend_id + ": injected failure",
                               {AttemptRecord{1, "injected failure", false, since(start)}});
        }
        response = &rule.response;
        break;
      }
    }
    return RawResponse{*response, micros_since(start), d_.backend_id, false};
  }

 private:
  BackendDescriptor d_;
};

class ChatBackend final : public Backend {
 public:
  ChatBackend(BackendDescriptor d, std::shared_ptr<Transport> transport)
      : d_(std::move(d)),
        transport_(std::move(transport)),
        slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, d_.max_parallel_requests))) {
    d_.validate();
    if (d_.endpoint_address.empty()) {
      if (const char* env = std::getenv("CBD_ENDPOINT_URL"); env && *env) {
        d_.endpoint_address = env;
      } else {
        throw InvalidArgument("backend " + d_.backend_id +
                              ": no endpoint address and CBD_ENDPOINT_URL is unset");
      }
    }
    if (!d_.api_key_env.empty()) {
      if (const char* key = std::getenv(d_.api_key_env.c_str()); key && *key) {
        headers_.emplace_back("Authorization", std::string("Bearer ") + key);
      }
    }
  }

  const BackendDescriptor& descriptor() const override { return d_; }

  RawResponse complete(const Prompt& prompt) override {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{slots_};

    const std::string body = chat_request_body(prompt, d_);
    std::vector<AttemptRecord> log;
    for (std::size_t attempt = 1; attempt <= d_.retry.max_attempts; ++attempt) {
      const auto start = Clock::now();
      try {
        HttpResponse res = transport_->post_json(d_.endpoint_address, body, headers_, d_.timeout);
        if (res.status == 200) {
          return decode(res.body, micros_since(start), log, attempt);
        }
        log.push_back({attempt, "HTTP " + std::to_string(res.status), false, since(start)});
        const bool retryable = res.status == 429 || res.status >= 500;
        if (!retryable) {
          throw TransportError("backend " + d_.backend_id + ": HTTP " +
                                   std::to_string(res.status),
                               log);
        }
      } catch (const TransportFailure& f) {
        log.push_back({attempt, f.what(), f.timed_out(), since(start)});
      }
      if (attempt < d_.retry.max_attempts) {
        std::this_thread::sleep_for(d_.retry.delay_after(attempt - 1));
      }
    }
    const std::string what = "backend " + d_.backend_id + ": giving up after " +
                             std::to_string(log.size()) + " attempts (" +
                             log.back().error + ")";
    if (log.back().timed_out) throw TimeoutError(what, log);
    throw TransportError(what, log);
  }

 private:
  RawResponse decode(const std::string& body, std::chrono::microseconds latency,
                     std::vector<AttemptRecord>& log, std::size_t attempt) const {
    try {
      auto j = json::parse(body);
      const auto& choice = j.at("choices").at(0);
      RawResponse r;
      r.text = choice.at("message").at("content").get<std::string>();
      r.latency = latency;
      r.backend_id = d_.backend_id;
      r.truncated = choice.value("finish_reason", std::string()) == "length";
      return r;
    } catch (const json::exception& e) {
      log.push_back({attempt, std::string("malformed response: ") + e.what(), false,
                     std::chrono::duration_cast<std::chrono::milliseconds>(latency)});
      throw TransportError("backend " + d_.backend_id + ": malformed response", log);
    }
  }

  BackendDescriptor d_;
  std::shared_ptr<Transport> transport_;
  std::vector<std::pair<std::string, std::string>> headers_;
  std::counting_semaphore<> slots_;
};

// Position of the first occurrence of `needle` in `hay` that is not glued to
// a letter or digit on either side.
std::size_t find_word(std::string_view hay, std::string_view needle) {
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::size_t pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string_view::npos) {
    const bool left_ok = pos == 0 || !is_word(hay[pos - 1]);
    const std::size_t end = pos + needle.size();
    const bool right_ok = end >= hay.size() || !is_word(hay[end]);
    if (left_ok && right_ok) return pos;
    ++pos;
  }
  return std::string_view::npos;
}

json synonyms_json(const SynonymTable& table, Task task) {
  json obj = json::object();
  for (const auto& [phrase, label] : table.entries) {
    if (task_of(label) == task) obj[phrase] = std::string(label_key(label));
  }
  return obj;
}

}  // namespace

std::string_view backend_kind_name(BackendKind kind) {
  switch (kind) {
    case BackendKind::live_endpoint: return "live_endpoint";
    case BackendKind::stub: return "stub";
    case BackendKind::tuned_checkpoint: return "tuned_checkpoint";
  }
  return "stub";
}

std::optional<BackendKind> backend_kind_from_name(std::string_view name) {
  if (name == "live_endpoint") return BackendKind::live_endpoint;
  if (name == "stub") return BackendKind::stub;
  if (name == "tuned_checkpoint") return BackendKind::tuned_checkpoint;
  return std::nullopt;
}

std::chrono::milliseconds RetryPolicy::delay_after(std::size_t failed_attempt) const {
  if (backoff.empty()) return std::chrono::milliseconds(0);
  return backoff[std::min(failed_attempt, backoff.size() - 1)];
}

void BackendDescriptor::validate() const {
  if (backend_id.empty()) throw InvalidArgument("backend: empty backend_id");
  if (max_parallel_requests < 1) {
    throw InvalidArgument("backend " + backend_id + ": max_parallel_requests must be >= 1");
  }
  if (timeout.count() <= 0) throw InvalidArgument("backend " + backend_id + ": timeout must be > 0");
  if (retry.max_attempts < 1) {
    throw InvalidArgument("backend " + backend_id + ": retry.max_attempts must be >= 1");
  }
  if (kind == BackendKind::stub && stub_rules.empty()) {
    throw InvalidArgument("backend " + backend_id + ": empty stub rule table");
  }
  if (kind == BackendKind::tuned_checkpoint && checkpoint.empty()) {
    throw InvalidArgument("backend " + backend_id + ": missing checkpoint path");
  }
}

std::shared_ptr<Transport> http_transport() {
  static auto transport = std::make_shared<HttplibTransport>();
  return transport;
}

std::unique_ptr<Backend> make_stub_backend(BackendDescriptor descriptor) {
  if (descriptor.kind != BackendKind::stub) {
    throw InvalidArgument("backend " + descriptor.backend_id + " is not a stub");
  }
  return std::make_unique<StubBackend>(std::move(descriptor));
}

std::unique_ptr<Backend> make_chat_backend(BackendDescriptor descriptor,
                                           std::shared_ptr<Transport> transport) {
  if (descriptor.kind != BackendKind::live_endpoint) {
    throw InvalidArgument("backend " + descriptor.backend_id + " is not a live endpoint");
  }
  return std::make_unique<ChatBackend>(std::move(descriptor), std::move(transport));
}

BackendDescriptor make_stub(std::vector<StubRule> rules, std::string default_response,
                            std::string backend_id) {
  if (rules.empty()) throw InvalidArgument("make_stub: empty rule table");
  BackendDescriptor d;
  d.backend_id = std::move(backend_id);
  d.kind = BackendKind::stub;
  d.model_name = "stub";
  d.stub_rules = std::move(rules);
  d.stub_default_response = std::move(default_response);
  d.validate();
  return d;
}

BackendDescriptor class_name_stub(Task task, std::string default_response,
                                  std::string backend_id) {
  std::vector<StubRule> rules;
  for (const auto& l : label_space(task)) {
    rules.push_back({std::string(display_name(l)), std::string(display_name(l)), false});
  }
  return make_stub(std::move(rules), std::move(default_response), std::move(backend_id));
}

std::unique_ptr<Backend> open_backend(const BackendDescriptor& descriptor) {
  switch (descriptor.kind) {
    case BackendKind::stub: return make_stub_backend(descriptor);
    case BackendKind::live_endpoint: return make_chat_backend(descriptor);
    case BackendKind::tuned_checkpoint: return make_tuned_backend(descriptor);
  }
  throw InvalidArgument("unknown backend kind");
}

RawResponse classify(const Prompt& prompt, const BackendDescriptor& descriptor) {
  return open_backend(descriptor)->complete(prompt);
}

std::string chat_request_body(const Prompt& prompt, const BackendDescriptor& d) {
  json j;
  j["model"] = d.model_name;
  j["messages"] = json::array({json{{"role", "user"}, {"content", prompt.rendered_text}}});
  j["temperature"] = d.decoding.temperature;
  j["max_tokens"] = d.decoding.max_tokens;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

std::string_view match_kind_name(MatchKind kind) {
  switch (kind) {
    case MatchKind::exact: return "exact";
    case MatchKind::synonym: return "synonym";
    case MatchKind::substring_first: return "substring_first";
  }
  return "exact";
}

const SynonymTable& SynonymTable::builtin() {
  static const SynonymTable table{{
      {"not aggressive", AggressionLabel::NAG},
      {"non-aggressive", AggressionLabel::NAG},
      {"non aggressive", AggressionLabel::NAG},
      {"nag", AggressionLabel::NAG},
      {"covertly-aggressive", AggressionLabel::CAG},
      {"covert aggression", AggressionLabel::CAG},
      {"cag", AggressionLabel::CAG},
      {"overtly-aggressive", AggressionLabel::OAG},
      {"overt aggression", AggressionLabel::OAG},
      {"oag", AggressionLabel::OAG},
      {"not bullying", CyberbullyingLabel::not_cyberbullying},
      {"none", CyberbullyingLabel::not_cyberbullying},
      {"no cyberbullying", CyberbullyingLabel::not_cyberbullying},
      {"not_cyberbullying", CyberbullyingLabel::not_cyberbullying},
      {"ethnicity_race", CyberbullyingLabel::ethnicity_race},
      {"ethnicity", CyberbullyingLabel::ethnicity_race},
      {"religious", CyberbullyingLabel::religion},
      {"gender_sexual", CyberbullyingLabel::gender_sexual},
      {"gender", CyberbullyingLabel::gender_sexual},
  }};
  return table;
}

SynonymTable SynonymTable::parse(std::string_view json_text) {
  SynonymTable table;
  try {
    auto j = json::parse(json_text);
    for (auto task : {Task::aggression, Task::cyberbullying}) {
      const std::string key(task_name(task));
      if (!j.contains(key)) continue;
      for (const auto& [phrase, target] : j.at(key).items()) {
        auto label = label_from_key(task, target.get<std::string>());
        if (!label) {
          throw InvalidArgument("synonyms: '" + phrase + "' maps to unknown label '" +
                                target.get<std::string>() + "'");
        }
        auto lowered = detail::ascii_lower(detail::trim(phrase));
        if (lowered.empty()) throw InvalidArgument("synonyms: empty phrase");
        table.entries.emplace_back(std::move(lowered), *label);
      }
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("synonyms: ") + e.what());
  }
  return table;
}

SynonymTable SynonymTable::load(const std::filesystem::path& path) {
  return parse(detail::read_file(path));
}

std::string SynonymTable::to_json() const {
  json j;
  j["aggression"] = synonyms_json(*this, Task::aggression);
  j["cyberbullying"] = synonyms_json(*this, Task::cyberbullying);
  return j.dump(2) + "\n";
}

ParsedLabel parse_label(const RawResponse& raw, Task label_space_task,
                        const SynonymTable& synonyms) {
  const std::string lower = detail::ascii_lower(detail::trim(raw.text));
  const auto labels = label_space(label_space_task);

  for (const auto& l : labels) {
    if (lower == detail::ascii_lower(display_name(l))) {
      return {l, MatchKind::exact, raw};
    }
  }

  constexpr auto npos = std::string_view::npos;
  std::size_t best_pos = npos;
  std::size_t best_len = 0;
  std::optional<Label> best;
  for (const auto& [phrase, label] : synonyms.entries) {
    if (task_of(label) != label_space_task) continue;
    std::size_t pos = find_word(lower, phrase);
    if (pos == npos) continue;
    if (pos < best_pos || (pos == best_pos && phrase.size() > best_len)) {
      best_pos = pos;
      best_len = phrase.size();
      best = label;
    }
  }
  if (best) return {*best, MatchKind::synonym, raw};

  best_pos = npos;
  for (const auto& l : labels) {
    std::size_t pos = lower.find(detail::ascii_lower(display_name(l)));
    if (pos != npos && (pos < best_pos || best_pos == npos)) {
      best_pos = pos;
      best = l;
    }
  }
  if (best) return {*best, MatchKind::substring_first, raw};

  throw ParseFailure(raw.text);
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

ResponseAuditLog::ResponseAuditLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::binary | std::ios::app);
  if (!out_) throw IoError("cannot open response audit log " + path.string());
}

void ResponseAuditLog::append(const Prompt& prompt, const RawResponse& response) {
  json j;
  j["post_id"] = prompt.provenance.post_id;
  j["template_id"] = prompt.provenance.template_id;
  j["backend_id"] = response.backend_id;
  j["prompt"] = prompt.rendered_text;
  j["response"] = response.text;
  j["latency_us"] = response.latency.count();
  j["truncated"] = response.truncated;
  write_line(j.dump());
}

void ResponseAuditLog::append_failure(const Prompt& prompt, const BackendError& error) {
  json j;
  j["post_id"] = prompt.provenance.post_id;
  j["template_id"] = prompt.provenance.template_id;
  j["prompt"] = prompt.rendered_text;
  j["error"] = error.what();
  json attempts = json::array();
  for (const auto& a : error.attempts()) {
    attempts.push_back({{"attempt", a.attempt},
                        {"error", a.error},
                        {"timed_out", a.timed_out},
                        {"elapsed_ms", a.elapsed.count()}});
  }
  j["attempts"] = attempts;
  write_line(j.dump());
}

void ResponseAuditLog::write_line(const std::string& line) {
  std::lock_guard lock(mu_);
  out_ << line << '\n';
  out_.flush();
}

}  // namespace cbd
