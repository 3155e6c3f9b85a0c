#include <gtest/gtest.h>

#include <deque>
#include <variant>

#include "cbd/backend.hpp"
#include "cbd/error.hpp"
#include "cbd/tuning.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace cbd;

namespace {

Prompt prompt_for(const std::string& query, Task task = Task::aggression) {
  Prompt p;
  p.query_text = query;
  p.rendered_text = "Classify:\n" + query;
  p.label_space = task;
  p.provenance.post_id = "p1";
  return p;
}

// Replays a scripted sequence: an int is an HTTP status (200 gets a valid
// chat body), a bool is a transport failure with that timed_out flag.
class ScriptedTransport : public Transport {
 public:
  explicit ScriptedTransport(std::deque<std::variant<int, bool>> script)
      : script_(std::move(script)) {}

  HttpResponse post_json(const std::string& url, const std::string& body,
                         const std::vector<std::pair<std::string, std::string>>&,
                         std::chrono::milliseconds) override {
    ++calls;
    last_url = url;
    last_body = body;
    auto next = script_.front();
    if (script_.size() > 1) script_.pop_front();
    if (auto* failed = std::get_if<bool>(&next)) throw TransportFailure("no response", *failed);
    const int status = std::get<int>(next);
    if (status != 200) return {status, "{}"};
    return {200, R"({"choices":[{"message":{"content":"Overtly Aggressive"},"finish_reason":"stop"}]})"};
  }

  int calls = 0;
  std::string last_url;
  std::string last_body;

 private:
  std::deque<std::variant<int, bool>> script_;
};

BackendDescriptor live(std::size_t attempts = 3) {
  BackendDescriptor d;
  d.backend_id = "live";
  d.kind = BackendKind::live_endpoint;
  d.model_name = "some-model";
  d.endpoint_address = "http://127.0.0.1:9/v1/chat/completions";
  d.api_key_env = "";
  d.retry.max_attempts = attempts;
  d.retry.backoff.clear();
  return d;
}

RawResponse raw(std::string text) { return RawResponse{std::move(text), {}, "test", false}; }

}  // namespace

TEST(Stub, ClassNameRuleAndDefault) {
  auto backend = make_stub_backend(class_name_stub(Task::cyberbullying, "Not Cyberbullying"));
  EXPECT_EQ(backend->complete(prompt_for("post about Religion here")).text, "Religion");
  EXPECT_EQ(backend->complete(prompt_for("nothing matches")).text, "Not Cyberbullying");
  EXPECT_EQ(backend->complete(prompt_for("x Gender/Sexual y")).backend_id, "class-name-stub");
}

TEST(Stub, DeterministicAndFirstRuleWins) {
  auto d = make_stub({{"a", "first", false}, {"ab", "second", false}}, "none");
  auto backend = open_backend(d);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(backend->complete(prompt_for("ab")).text, "first");
}

TEST(Stub, ScopeSelectsQueryOrPrompt) {
  auto d = make_stub({{"Classify", "hit", false}}, "miss");
  EXPECT_EQ(make_stub_backend(d)->complete(prompt_for("post")).text, "miss");
  d.stub_scope = StubScope::prompt;
  EXPECT_EQ(make_stub_backend(d)->complete(prompt_for("post")).text, "hit");
}

TEST(Stub, FailRuleRaisesTransportError) {
  auto backend = make_stub_backend(make_stub({{"boom", "", true}}, "ok"));
  EXPECT_THROW(backend->complete(prompt_for("boom")), TransportError);
  EXPECT_EQ(backend->complete(prompt_for("calm")).text, "ok");
}

TEST(Stub, EmptyRuleTableIsRejected) {
  EXPECT_THROW(make_stub({}), InvalidArgument);
  BackendDescriptor d;
  d.backend_id = "s";
  d.kind = BackendKind::stub;
  EXPECT_THROW(d.validate(), InvalidArgument);
}

TEST(Retry, TransportFailuresAreRetriedUpToTheLimit) {
  auto t = std::make_shared<ScriptedTransport>(std::deque<std::variant<int, bool>>{false});
  auto backend = make_chat_backend(live(3), t);
  try {
    backend->complete(prompt_for("x"));
    FAIL() << "expected TransportError";
  } catch (const TimeoutError&) {
    FAIL() << "not a timeout";
  } catch (const TransportError& e) {
    EXPECT_EQ(e.attempts().size(), 3u);
  }
  EXPECT_EQ(t->calls, 3);
}

TEST(Retry, FinalTimeoutIsReportedAsTimeout) {
  auto t = std::make_shared<ScriptedTransport>(std::deque<std::variant<int, bool>>{true});
  auto backend = make_chat_backend(live(2), t);
  EXPECT_THROW(backend->complete(prompt_for("x")), TimeoutError);
  EXPECT_EQ(t->calls, 2);
}

TEST(Retry, RecoversAfterRetryableStatus) {
  auto t = std::make_shared<ScriptedTransport>(
      std::deque<std::variant<int, bool>>{429, 503, 200});
  auto backend = make_chat_backend(live(3), t);
  const RawResponse r = backend->complete(prompt_for("x"));
  EXPECT_EQ(r.text, "Overtly Aggressive");
  EXPECT_EQ(r.backend_id, "live");
  EXPECT_EQ(t->calls, 3);
}

TEST(Retry, ClientErrorsAreNotRetried) {
  auto t = std::make_shared<ScriptedTransport>(std::deque<std::variant<int, bool>>{400});
  auto backend = make_chat_backend(live(5), t);
  EXPECT_THROW(backend->complete(prompt_for("x")), TransportError);
  EXPECT_EQ(t->calls, 1);
}

TEST(Retry, BackoffSchedule) {
  RetryPolicy p;
  p.backoff = {std::chrono::milliseconds(10), std::chrono::milliseconds(40)};
  EXPECT_EQ(p.delay_after(0).count(), 10);
  EXPECT_EQ(p.delay_after(1).count(), 40);
  EXPECT_EQ(p.delay_after(5).count(), 40);
  p.backoff.clear();
  EXPECT_EQ(p.delay_after(0).count(), 0);
}

TEST(ChatRequest, CarriesModelPromptAndDecoding) {
  BackendDescriptor d = live();
  d.decoding.temperature = 0.25;
  d.decoding.max_tokens = 7;
  const auto j = nlohmann::json::parse(chat_request_body(prompt_for("hello\nworld"), d));
  EXPECT_EQ(j.at("model"), "some-model");
  EXPECT_EQ(j.at("messages").at(0).at("role"), "user");
  EXPECT_EQ(j.at("messages").at(0).at("content"), "Classify:\nhello\nworld");
  EXPECT_DOUBLE_EQ(j.at("temperature").get<double>(), 0.25);
  EXPECT_EQ(j.at("max_tokens"), 7);

  auto t = std::make_shared<ScriptedTransport>(std::deque<std::variant<int, bool>>{200});
  make_chat_backend(d, t)->complete(prompt_for("hello\nworld"));
  EXPECT_EQ(t->last_url, d.endpoint_address);
  EXPECT_EQ(t->last_body, chat_request_body(prompt_for("hello\nworld"), d));
}

TEST(ParseLabel, ExactMatch) {
  const ParsedLabel p = parse_label(raw("Overtly Aggressive"), Task::aggression);
  EXPECT_EQ(p.label, Label(AggressionLabel::OAG));
  EXPECT_EQ(p.match_kind, MatchKind::exact);
  EXPECT_EQ(parse_label(raw("  overtly aggressive \n"), Task::aggression).match_kind,
            MatchKind::exact);
}

TEST(ParseLabel, SynonymMatch) {
  const ParsedLabel p = parse_label(raw("I think this is not aggressive."), Task::aggression);
  EXPECT_EQ(p.label, Label(AggressionLabel::NAG));
  EXPECT_EQ(p.match_kind, MatchKind::synonym);
}

TEST(ParseLabel, EarliestDisplayNameWins) {
  const ParsedLabel p =
      parse_label(raw("Covertly Aggressive or Overtly Aggressive"), Task::aggression);
  EXPECT_EQ(p.label, Label(AggressionLabel::CAG));
  EXPECT_EQ(p.match_kind, MatchKind::substring_first);
}

TEST(ParseLabel, SynonymsRespectWordBoundaries) {
  // "nag" must not fire inside "management".
  EXPECT_THROW(parse_label(raw("management"), Task::aggression), ParseFailure);
  EXPECT_EQ(parse_label(raw("label: NAG"), Task::aggression).label, Label(AggressionLabel::NAG));
}

TEST(ParseLabel, EveryDisplayNameRoundTrips) {
  for (Task task : {Task::aggression, Task::cyberbullying}) {
    for (const auto& l : label_space(task)) {
      const std::string name(display_name(l));
      EXPECT_EQ(parse_label(raw(name), task).label, l) << name;
      EXPECT_EQ(parse_label(raw("The answer is " + name + "."), task).label, l) << name;
    }
  }
}

TEST(ParseLabel, NoMatchRaisesParseFailureWithRawText) {
  try {
    parse_label(raw("I cannot help with that"), Task::cyberbullying);
    FAIL() << "expected ParseFailure";
  } catch (const ParseFailure& e) {
    EXPECT_EQ(e.raw_text(), "I cannot help with that");
  }
  // Labels from the other task's space do not count.
  EXPECT_THROW(parse_label(raw("Religion"), Task::aggression), ParseFailure);
}

TEST(Synonyms, JsonRoundTripAndCustomTable) {
  const SynonymTable& b = SynonymTable::builtin();
  const SynonymTable back = SynonymTable::parse(b.to_json());
  EXPECT_EQ(back.to_json(), b.to_json());

  const SynonymTable custom = SynonymTable::parse(R"({"aggression": {"Calm": "NAG"}})");
  EXPECT_EQ(parse_label(raw("very calm"), Task::aggression, custom).label,
            Label(AggressionLabel::NAG));
  EXPECT_THROW(SynonymTable::parse(R"({"aggression": {"x": "religion"}})"), InvalidArgument);
}

TEST(Audit, ResponsesAndFailuresAreLogged) {
  test::TempDir dir;
  {
    ResponseAuditLog log(dir / "responses.jsonl");
    log.append(prompt_for("a"), raw("Overtly Aggressive"));
    log.append_failure(prompt_for("b"),
                       TransportError("down", {AttemptRecord{1, "refused", false, {}}}));
  }
  const std::string text = test::slurp(dir / "responses.jsonl");
  const auto nl = text.find('\n');
  ASSERT_NE(nl, std::string::npos);
  const auto first = nlohmann::json::parse(text.substr(0, nl));
  EXPECT_EQ(first.at("response"), "Overtly Aggressive");
  const auto second = nlohmann::json::parse(text.substr(nl + 1));
  EXPECT_EQ(second.at("attempts").size(), 1u);
}

TEST(OpenBackend, TunedCheckpointAnswersWithDisplayName) {
  test::TempDir dir;
  auto base = std::make_shared<const ToyNetwork>(NetworkConfig{});
  TuneConfig cfg;
  cfg.rank = 2;
  AdaptedModel model = attach_adapters(base, cfg);
  Checkpoint ck;
  ck.method = TuneMethod::lora_sft;
  ck.network = base->config();
  ck.tune = cfg;
  ck.base_checksum = base->checksum();
  ck.adapters = model.adapters();
  TaskHead head = TaskHead::zeros(Task::aggression, base->config().d_model);
  head.bias.value(0, 2) = 5.0;
  ck.heads.push_back(head);
  save_checkpoint(dir / "ck.cbd", ck);

  BackendDescriptor d;
  d.backend_id = "tuned";
  d.kind = BackendKind::tuned_checkpoint;
  d.model_name = "toy";
  d.checkpoint = dir / "ck.cbd";
  const RawResponse r = open_backend(d)->complete(prompt_for("anything at all"));
  EXPECT_EQ(r.text, "Overtly Aggressive");
  EXPECT_EQ(r.backend_id, "tuned");

  d.checkpoint = dir / "missing.cbd";
  EXPECT_ANY_THROW(open_backend(d)->complete(prompt_for("x")));
}
