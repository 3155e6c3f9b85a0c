#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cbd/error.hpp"
#include "cbd/labels.hpp"
#include "cbd/prompting.hpp"

namespace cbd {

enum class BackendKind { live_endpoint, stub, tuned_checkpoint };

std::string_view backend_kind_name(BackendKind kind);
std::optional<BackendKind> backend_kind_from_name(std::string_view name);

struct RetryPolicy {
  std::size_t max_attempts = 3;
  // Delay before attempt i+2 is backoff[min(i, size-1)]; empty means no delay.
  std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(250),
                                                 std::chrono::milliseconds(1000)};

  std::chrono::milliseconds delay_after(std::size_t failed_attempt) const;
};

// Requested from live endpoints. Neither value is known for the reference
// runs; greedy decoding and a short answer budget are the defaults.
struct DecodingSettings {
  double temperature = 0.0;
  int max_tokens = 16;
};

enum class StubScope { query, prompt };

struct StubRule {
  std::string pattern;   // literal, case-sensitive substring
  std::string response;
  bool fail = false;     // raise a transport error instead of responding
};

struct BackendDescriptor {
  std::string backend_id;
  BackendKind kind = BackendKind::stub;
  std::string model_name;
  std::size_t max_parallel_requests = 1;
  std::chrono::milliseconds timeout{30000};
  RetryPolicy retry;

  // live_endpoint
  std::string endpoint_address;  // empty: read from CBD_ENDPOINT_URL
  std::string api_key_env = "CBD_API_KEY";
  DecodingSettings decoding;

  // stub: rules are tried in order, first hit wins.
  std::vector<StubRule> stub_rules;
  std::string stub_default_response;
  StubScope stub_scope = StubScope::query;

  // tuned_checkpoint
  std::filesystem::path checkpoint;

  void validate() const;
};

struct RawResponse {
  std::string text;  // unmodified model output
  std::chrono::microseconds latency{0};
  std::string backend_id;
  bool truncated = false;
};

struct AttemptRecord {
  std::size_t attempt = 0;
  std::string error;
  bool timed_out = false;
  std::chrono::milliseconds elapsed{0};
};

class BackendError : public Error {
 public:
  BackendError(const std::string& what, std::vector<AttemptRecord> attempts)
      : Error(what), attempts_(std::move(attempts)) {}
  const std::vector<AttemptRecord>& attempts() const { return attempts_; }

 private:
  std::vector<AttemptRecord> attempts_;
};

/// Retries exhausted, or a non-retryable endpoint failure.
class TransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// The final attempt timed out.
class TimeoutError : public BackendError {
 public:
  using BackendError::BackendError;
};

// Minimal HTTP seam so retry behaviour can be tested without a server.
struct HttpResponse {
  int status = 0;
  std::string body;
};

class TransportFailure : public Error {
 public:
  TransportFailure(const std::string& what, bool timed_out)
      : Error(what), timed_out_(timed_out) {}
  bool timed_out() const { return timed_out_; }

 private:
  bool timed_out_;
};

class Transport {
 public:
  virtual ~Transport() = default;
  // Throws TransportFailure when no HTTP response was received.
  virtual HttpResponse post_json(const std::string& url, const std::string& body,
                                 const std::vector<std::pair<std::string, std::string>>& headers,
                                 std::chrono::milliseconds timeout) = 0;
};

std::shared_ptr<Transport> http_transport();

class Backend {
 public:
  virtual ~Backend() = default;
  virtual const BackendDescriptor& descriptor() const = 0;
  /// Thread-safe; callers may invoke concurrently.
  virtual RawResponse complete(const Prompt& prompt) = 0;
};

std::unique_ptr<Backend> make_stub_backend(BackendDescriptor descriptor);
std::unique_ptr<Backend> make_chat_backend(
    BackendDescriptor descriptor,
    std::shared_ptr<Transport> transport = http_transport());

/// Descriptor for a rule-table stub. Throws on an empty rule table.
BackendDescriptor make_stub(std::vector<StubRule> rules,
                            std::string default_response = {},
                            std::string backend_id = "stub");

/// Stub whose rules map each display name of `task` to itself.
BackendDescriptor class_name_stub(Task task, std::string default_response = {},
                                  std::string backend_id = "class-name-stub");

/// Builds the backend a descriptor names.
std::unique_ptr<Backend> open_backend(const BackendDescriptor& descriptor);

/// One-shot classification through open_backend.
RawResponse classify(const Prompt& prompt, const BackendDescriptor& descriptor);

/// Builds the chat-completion request body sent to live endpoints.
std::string chat_request_body(const Prompt& prompt, const BackendDescriptor& d);

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

enum class MatchKind { exact, synonym, substring_first };
std::string_view match_kind_name(MatchKind kind);

struct ParsedLabel {
  Label label;
  MatchKind match_kind = MatchKind::exact;
  RawResponse raw;
};

class ParseFailure : public Error {
 public:
  explicit ParseFailure(std::string raw_text)
      : Error("response matches no label: \"" + raw_text + "\""),
        raw_text_(std::move(raw_text)) {}
  const std::string& raw_text() const { return raw_text_; }

 private:
  std::string raw_text_;
};

// Lower-case phrases that stand for a label. Matched on word boundaries.
struct SynonymTable {
  std::vector<std::pair<std::string, Label>> entries;

  static const SynonymTable& builtin();
  static SynonymTable parse(std::string_view json_text);
  static SynonymTable load(const std::filesystem::path& path);
  std::string to_json() const;
};

/// Cascade, first hit wins: (1) whole trimmed response equals a display
/// name, case-insensitively; (2) earliest synonym occurrence; (3) earliest
/// display-name occurrence. Throws ParseFailure when nothing matches.
ParsedLabel parse_label(const RawResponse& raw, Task label_space,
                        const SynonymTable& synonyms = SynonymTable::builtin());

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

class ResponseAuditLog {
 public:
  explicit ResponseAuditLog(const std::filesystem::path& path);
  void append(const Prompt& prompt, const RawResponse& response);
  void append_failure(const Prompt& prompt, const BackendError& error);

 private:
  void write_line(const std::string& line);
  std::mutex mu_;
  std::ofstream out_;
};

}  // namespace cbd
