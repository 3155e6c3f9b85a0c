#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <thread>

#include "cbd/error.hpp"
#include "cbd/pipeline.hpp"
#include "test_util.hpp"

using namespace cbd;

namespace {

// Answers through a callback and remembers every prompt it saw.
class RecordingBackend : public Backend {
 public:
  RecordingBackend(std::string id, std::size_t parallel,
                   std::function<std::string(const Prompt&)> answer)
      : answer_(std::move(answer)) {
    d_.backend_id = std::move(id);
    d_.kind = BackendKind::stub;
    d_.max_parallel_requests = parallel;
  }
  const BackendDescriptor& descriptor() const override { return d_; }
  RawResponse complete(const Prompt& prompt) override {
    {
      std::lock_guard lock(mu_);
      seen.push_back(prompt);
    }
    return RawResponse{answer_(prompt), {}, d_.backend_id, false};
  }

  std::vector<Prompt> seen;

 private:
  BackendDescriptor d_;
  std::function<std::string(const Prompt&)> answer_;
  std::mutex mu_;
};

std::string echo_gold_name(const Prompt& p, const std::vector<LabeledPost>& posts) {
  for (const auto& post : posts) {
    if (post.id == p.provenance.post_id) return std::string(display_name(post.label));
  }
  return "?";
}

ExperimentSpec spec_for(Method method, Task task) {
  ExperimentSpec s;
  s.method = method;
  s.task = task;
  s.backends.push_back(class_name_stub(task));
  if (method == Method::epp) {
    s.backends.insert(s.backends.begin(), class_name_stub(Task::aggression, "", "agg-stub"));
  }
  return s;
}

std::vector<LabeledPost> as_test(std::vector<LabeledPost> posts) {
  for (auto& p : posts) p.split = Split::test;
  return posts;
}

}  // namespace

TEST(Baseline, ZeroShotOnFixtureIsAllCorrect) {
  const auto posts = as_test(synth_fixture(3, Task::cyberbullying, 1));
  ASSERT_EQ(posts.size(), 12u);
  const auto preds = run_experiment(posts, spec_for(Method::zero_shot, Task::cyberbullying));
  ASSERT_EQ(preds.size(), 12u);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(preds[i].post_id, posts[i].id);
    EXPECT_EQ(preds[i].outcome, Outcome::labeled);
    EXPECT_EQ(preds[i].label, posts[i].label);
    ASSERT_EQ(preds[i].stages.size(), 1u);
    EXPECT_EQ(preds[i].stages[0].match_kind, MatchKind::exact);
  }
}

TEST(Baseline, FewShotExemplarErrorsComeBeforeAnyBackendCall) {
  const auto posts = as_test(synth_fixture(1, Task::aggression, 1));
  auto pool = synth_fixture(3, Task::aggression, 2);
  std::erase_if(pool, [](const LabeledPost& p) { return p.label == Label(AggressionLabel::OAG); });
  auto backend = std::make_shared<RecordingBackend>("rec", 1, [](const Prompt&) { return "x"; });
  ExperimentSpec spec = spec_for(Method::few_shot, Task::aggression);
  RunOptions opts;
  opts.exemplar_pool = pool;
  opts.backends = {backend};
  EXPECT_THROW(run_experiment(posts, spec, opts), InvalidArgument);
  EXPECT_TRUE(backend->seen.empty());
}

TEST(Baseline, FewShotPromptsCarryExemplars) {
  const auto posts = as_test(synth_fixture(2, Task::aggression, 1));
  const auto pool = synth_fixture(4, Task::aggression, 2);
  ExperimentSpec spec = spec_for(Method::few_shot, Task::aggression);
  spec.exemplars_per_class = 2;
  RunOptions opts;
  opts.exemplar_pool = pool;
  const auto preds = run_experiment(posts, spec, opts);
  for (const auto& p : preds) {
    EXPECT_EQ(p.provenance.exemplar_ids.size(), 6u);
    EXPECT_EQ(p.provenance.mode, PromptMode::few_shot);
  }
}

TEST(Baseline, OrderPreservedUnderParallelism) {
  auto posts = as_test(synth_fixture(10, Task::cyberbullying, 3));
  auto backend = std::make_shared<RecordingBackend>("slow", 4, [&](const Prompt& p) {
    const auto h = std::hash<std::string>{}(p.provenance.post_id);
    std::this_thread::sleep_for(std::chrono::microseconds(200 + h % 2000));
    return echo_gold_name(p, posts);
  });
  RunOptions opts;
  opts.backends = {backend};
  const auto preds = run_experiment(posts, spec_for(Method::zero_shot, Task::cyberbullying), opts);
  ASSERT_EQ(preds.size(), posts.size());
  for (std::size_t i = 0; i < posts.size(); ++i) {
    EXPECT_EQ(preds[i].post_id, posts[i].id);
    EXPECT_EQ(preds[i].label, posts[i].label);
  }
  EXPECT_EQ(backend->seen.size(), posts.size());
}

TEST(Baseline, ParseFailuresAndBackendErrorsBecomeOutcomes) {
  const auto posts = as_test(synth_fixture(1, Task::aggression, 1));
  ExperimentSpec spec = spec_for(Method::zero_shot, Task::aggression);
  spec.backends[0] = make_stub({{"Covertly", "no idea", false}, {"Overtly", "", true}},
                               "Not-Aggressive");
  const auto preds = run_experiment(posts, spec);
  for (const auto& p : preds) {
    if (p.gold == Label(AggressionLabel::CAG)) {
      EXPECT_EQ(p.outcome, Outcome::parse_failure);
      EXPECT_FALSE(p.label.has_value());
      EXPECT_EQ(p.stages[0].raw_text, "no idea");
    } else if (p.gold == Label(AggressionLabel::OAG)) {
      EXPECT_EQ(p.outcome, Outcome::backend_error);
      EXPECT_FALSE(p.stages[0].raw_text.has_value());
      EXPECT_FALSE(p.stages[0].error.empty());
    } else {
      EXPECT_EQ(p.outcome, Outcome::labeled);
    }
  }
}

TEST(Baseline, InvalidRunsAreRejected) {
  const auto posts = as_test(synth_fixture(1, Task::aggression, 1));
  EXPECT_THROW(run_experiment({}, spec_for(Method::zero_shot, Task::aggression)), InvalidArgument);
  EXPECT_THROW(run_experiment(posts, spec_for(Method::zero_shot, Task::cyberbullying)),
               InvalidArgument);
  ExperimentSpec epp = spec_for(Method::epp, Task::cyberbullying);
  epp.backends.pop_back();
  EXPECT_THROW(epp.validate(), InvalidArgument);
  ExperimentSpec agg_epp = spec_for(Method::epp, Task::cyberbullying);
  agg_epp.task = Task::aggression;
  EXPECT_THROW(agg_epp.validate(), InvalidArgument);
}

TEST(Epp, StageTwoPromptsOpenWithStageOneLabel) {
  const auto posts = as_test(synth_fixture(2, Task::cyberbullying, 4));
  auto stage1 = std::make_shared<RecordingBackend>("agg", 2, [](const Prompt&) {
    return "Overtly Aggressive";
  });
  auto stage2 = std::make_shared<RecordingBackend>("cb", 2, [&](const Prompt& p) {
    return echo_gold_name(p, posts);
  });
  RunOptions opts;
  opts.backends = {stage1, stage2};
  const auto preds = run_experiment(posts, spec_for(Method::epp, Task::cyberbullying), opts);
  const std::string lead = enrichment_sentence(AggressionLabel::OAG) + "\n\n";
  ASSERT_EQ(stage2->seen.size(), posts.size());
  for (const auto& prompt : stage2->seen) {
    EXPECT_EQ(prompt.rendered_text.rfind(lead, 0), 0u);
    EXPECT_EQ(prompt.label_space, Task::cyberbullying);
  }
  for (const auto& prompt : stage1->seen) EXPECT_EQ(prompt.label_space, Task::aggression);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(preds[i].aggression_annotation, AggressionLabel::OAG);
    EXPECT_FALSE(preds[i].stage1_fallback);
    EXPECT_EQ(preds[i].label, posts[i].label);
    EXPECT_EQ(preds[i].stages.size(), 2u);
    EXPECT_EQ(preds[i].final_prompt.rfind(lead, 0), 0u);
  }
}

TEST(Epp, StageOneParseFailureFallsBackAndIsFlagged) {
  const auto posts = as_test(synth_fixture(1, Task::cyberbullying, 4));
  const std::string broken = posts[1].id;
  auto stage1 = std::make_shared<RecordingBackend>("agg", 1, [&](const Prompt& p) {
    return p.provenance.post_id == broken ? std::string("unsure") : std::string("Covertly Aggressive");
  });
  auto stage2 = std::make_shared<RecordingBackend>("cb", 1, [&](const Prompt& p) {
    return echo_gold_name(p, posts);
  });
  RunOptions opts;
  opts.backends = {stage1, stage2};
  const auto preds = run_experiment(posts, spec_for(Method::epp, Task::cyberbullying), opts);
  for (const auto& p : preds) {
    if (p.post_id == broken) {
      EXPECT_TRUE(p.stage1_fallback);
      EXPECT_EQ(p.aggression_annotation, AggressionLabel::NAG);
      EXPECT_EQ(p.final_prompt.rfind(enrichment_sentence(AggressionLabel::NAG), 0), 0u);
      EXPECT_EQ(p.outcome, Outcome::labeled);
    } else {
      EXPECT_FALSE(p.stage1_fallback);
      EXPECT_EQ(p.aggression_annotation, AggressionLabel::CAG);
    }
  }
}

TEST(Epp, ConfiguredFallbackCueIsUsed) {
  const auto posts = as_test(synth_fixture(1, Task::cyberbullying, 4));
  ExperimentSpec spec = spec_for(Method::epp, Task::cyberbullying);
  spec.backends[0] = make_stub({{"", "", true}}, "", "down");
  spec.stage1_fallback = AggressionLabel::CAG;
  const auto preds = run_experiment(posts, spec);
  for (const auto& p : preds) {
    EXPECT_TRUE(p.stage1_fallback);
    EXPECT_EQ(p.aggression_annotation, AggressionLabel::CAG);
    EXPECT_EQ(p.stages[0].error.empty(), false);
  }
}

TEST(Epp, CueChangeOnlyTouchesTheEnrichmentSentence) {
  const auto posts = as_test(synth_fixture(2, Task::cyberbullying, 6));
  const std::string flipped = posts[3].id;
  auto run_with = [&](bool flip) {
    auto stage1 = std::make_shared<RecordingBackend>("agg", 1, [&, flip](const Prompt& p) {
      return flip && p.provenance.post_id == flipped ? "Covertly Aggressive" : "Not-Aggressive";
    });
    auto stage2 = std::make_shared<RecordingBackend>("cb", 1, [](const Prompt&) { return "Religion"; });
    RunOptions opts;
    opts.backends = {stage1, stage2};
    return run_experiment(posts, spec_for(Method::epp, Task::cyberbullying), opts);
  };
  const auto a = run_with(false);
  const auto b = run_with(true);
  for (std::size_t i = 0; i < posts.size(); ++i) {
    if (posts[i].id != flipped) {
      EXPECT_EQ(a[i].final_prompt, b[i].final_prompt);
      continue;
    }
    const auto nag = enrichment_sentence(AggressionLabel::NAG);
    const auto cag = enrichment_sentence(AggressionLabel::CAG);
    ASSERT_EQ(a[i].final_prompt.rfind(nag, 0), 0u);
    ASSERT_EQ(b[i].final_prompt.rfind(cag, 0), 0u);
    EXPECT_EQ(a[i].final_prompt.substr(nag.size()), b[i].final_prompt.substr(cag.size()));
  }
}

TEST(Epp, GoldDiagnosticUsesAnnotations) {
  const auto posts = as_test(synth_fixture(1, Task::cyberbullying, 4));
  std::map<std::string, AggressionLabel> gold;
  for (const auto& p : posts) gold[p.id] = AggressionLabel::OAG;
  ExperimentSpec spec = spec_for(Method::epp, Task::cyberbullying);
  spec.aggression_source = AggressionSource::gold_diagnostic;
  RunOptions opts;
  opts.gold_aggression = &gold;
  const auto preds = run_experiment(posts, spec, opts);
  for (const auto& p : preds) {
    EXPECT_EQ(p.aggression_annotation, AggressionLabel::OAG);
    EXPECT_EQ(p.stages.size(), 1u);
  }
  gold.erase(posts[0].id);
  EXPECT_THROW(run_experiment(posts, spec, opts), InvalidArgument);
  EXPECT_THROW(run_experiment(posts, spec), InvalidArgument);
}

TEST(Predictions, LineRoundTrip) {
  const auto posts = as_test(synth_fixture(1, Task::cyberbullying, 4));
  ExperimentSpec spec = spec_for(Method::epp, Task::cyberbullying);
  spec.backends[0] = make_stub({{"Religion", "hmm", false}}, "Overtly Aggressive", "agg");
  const auto preds = run_experiment(posts, spec);
  test::TempDir dir;
  write_predictions(dir / "p.jsonl", preds);
  const auto back = read_predictions(dir / "p.jsonl");
  ASSERT_EQ(back.size(), preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(back[i], preds[i]);
    EXPECT_EQ(prediction_to_line(back[i]), prediction_to_line(preds[i]));
  }
}
