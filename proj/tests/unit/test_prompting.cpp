#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "cbd/error.hpp"
#include "cbd/prompting.hpp"
#include "test_util.hpp"

using namespace cbd;

namespace {

std::size_t count_occurrences(const std::string& haystack, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos;
       pos = haystack.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

LabeledPost cb_post(std::string id, std::string text,
                    CyberbullyingLabel label = CyberbullyingLabel::religion) {
  return {std::move(id), std::move(text), label, DatasetId::D6, Split::test, "en"};
}

}  // namespace

TEST(ZeroShot, ListsEveryClassAndEmbedsPostVerbatim) {
  for (Task task : {Task::aggression, Task::cyberbullying}) {
    LabeledPost post = synth_fixture(1, task, 3).front();
    post.text = "  spaced\n\ttext {{post}} 🙃  ";
    const Prompt p = render_zero_shot(post, default_template(PromptMode::zero_shot, task));
    for (const auto& l : label_space(task)) {
      EXPECT_NE(p.rendered_text.find(std::string(display_name(l))), std::string::npos);
    }
    EXPECT_EQ(count_occurrences(p.rendered_text, post.text), 1u);
    EXPECT_EQ(p.query_text, post.text);
    EXPECT_EQ(p.label_space, task);
    EXPECT_EQ(p.provenance.post_id, post.id);
    EXPECT_EQ(p.provenance.mode, PromptMode::zero_shot);
  }
}

TEST(ZeroShot, TaskMismatchIsRejected) {
  const LabeledPost post = synth_fixture(1, Task::aggression, 1).front();
  EXPECT_THROW(render_zero_shot(post, default_template(PromptMode::zero_shot, Task::cyberbullying)),
               InvalidArgument);
  EXPECT_THROW(render_zero_shot(post, default_template(PromptMode::few_shot, Task::aggression)),
               InvalidArgument);
}

TEST(Exemplars, SmallPoolIsFullySelected) {
  const auto pool = synth_fixture(2, Task::aggression, 4);
  const ExemplarSet set = select_exemplars(pool, 2, 99);
  ASSERT_EQ(set.exemplars.size(), 6u);
  std::set<std::string> chosen(set.source_ids.begin(), set.source_ids.end());
  std::set<std::string> all;
  for (const auto& p : pool) all.insert(p.id);
  EXPECT_EQ(chosen, all);
}

TEST(Exemplars, ClassInterleavedOrder) {
  const auto pool = synth_fixture(5, Task::cyberbullying, 4);
  const ExemplarSet set = select_exemplars(pool, 3, 1);
  ASSERT_EQ(set.exemplars.size(), 12u);
  for (std::size_t i = 0; i < set.exemplars.size(); ++i) {
    EXPECT_EQ(class_index(set.exemplars[i].second), i % 4);
  }
}

TEST(Exemplars, ShortClassIsNamedInError) {
  auto pool = synth_fixture(3, Task::aggression, 4);
  pool.erase(std::find_if(pool.begin(), pool.end(), [](const LabeledPost& p) {
    return p.label == Label(AggressionLabel::CAG);
  }));
  try {
    select_exemplars(pool, 3, 1);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("Covertly Aggressive"), std::string::npos) << e.what();
  }
}

TEST(Exemplars, DeterministicAndOrderIndependent) {
  auto pool = synth_fixture(6, Task::cyberbullying, 2);
  const ExemplarSet a = select_exemplars(pool, 3, 17);
  std::reverse(pool.begin(), pool.end());
  const ExemplarSet b = select_exemplars(pool, 3, 17);
  EXPECT_EQ(a.source_ids, b.source_ids);
  const ExemplarSet c = select_exemplars(pool, 3, 18);
  EXPECT_NE(a.source_ids, c.source_ids);
}

TEST(Exemplars, NonTrainRecordsAreRefused) {
  auto pool = synth_fixture(3, Task::aggression, 1);
  pool[0].split = Split::test;
  EXPECT_THROW(select_exemplars(pool, 1, 1), InvalidArgument);
}

TEST(FewShot, TwelveLabelledExemplarsForFourClasses) {
  const auto pool = synth_fixture(4, Task::cyberbullying, 8);
  const ExemplarSet set = select_exemplars(pool, 3, 5);
  const LabeledPost post = cb_post("q1", "what is this even");
  const Prompt p = render_few_shot(post, default_template(PromptMode::few_shot, Task::cyberbullying), set);
  EXPECT_EQ(count_occurrences(p.rendered_text, "\nlabel: "), 12u);
  EXPECT_EQ(p.provenance.exemplar_ids, set.source_ids);
  for (const auto& [text, label] : set.exemplars) {
    EXPECT_NE(p.rendered_text.find(text + "\nlabel: " + std::string(display_name(label))),
              std::string::npos);
  }
}

TEST(FewShot, LeakageIsAnError) {
  const auto pool = synth_fixture(3, Task::aggression, 8);
  const ExemplarSet set = select_exemplars(pool, 1, 5);
  const LabeledPost post = *std::find_if(pool.begin(), pool.end(), [&](const LabeledPost& p) {
    return p.id == set.source_ids.front();
  });
  EXPECT_THROW(render_few_shot(post, default_template(PromptMode::few_shot, Task::aggression), set),
               InvalidArgument);
}

TEST(FewShot, SharedPrefixAcrossPosts) {
  const auto pool = synth_fixture(4, Task::cyberbullying, 8);
  const ExemplarSet set = select_exemplars(pool, 3, 5);
  const auto& tmpl = default_template(PromptMode::few_shot, Task::cyberbullying);
  const Prompt a = render_few_shot(cb_post("a", "first query"), tmpl, set);
  const Prompt b = render_few_shot(cb_post("b", "a different one"), tmpl, set);
  const auto prefix_a = a.rendered_text.substr(0, a.rendered_text.find("first query"));
  const auto prefix_b = b.rendered_text.substr(0, b.rendered_text.find("a different one"));
  EXPECT_EQ(prefix_a, prefix_b);
  EXPECT_FALSE(prefix_a.empty());
}

TEST(Enriched, OpensWithSentenceBlankLineAndPost) {
  const auto& tmpl = default_template(PromptMode::enriched, Task::cyberbullying);
  for (auto agg : {AggressionLabel::NAG, AggressionLabel::CAG, AggressionLabel::OAG}) {
    const LabeledPost post = cb_post("e1", "line one\nline two\n\nline four");
    const Prompt p = render_enriched(post, agg, tmpl);
    const std::string head = enrichment_sentence(agg) + "\n\n" + post.text;
    EXPECT_EQ(p.rendered_text.substr(0, head.size()), head);
    EXPECT_EQ(p.provenance.aggression_label, agg);
    EXPECT_EQ(p.provenance.mode, PromptMode::enriched);
  }
  EXPECT_EQ(enrichment_sentence(AggressionLabel::OAG),
            "This post was predicted as Overtly Aggressive. Based on this, classify the "
            "following content for cyberbullying.");
}

TEST(Enriched, CueOnlyChangesTheSentence) {
  const auto& tmpl = default_template(PromptMode::enriched, Task::cyberbullying);
  const LabeledPost post = cb_post("e2", "some post");
  const Prompt nag = render_enriched(post, AggressionLabel::NAG, tmpl);
  const Prompt cag = render_enriched(post, AggressionLabel::CAG, tmpl);
  const auto s_nag = enrichment_sentence(AggressionLabel::NAG);
  const auto s_cag = enrichment_sentence(AggressionLabel::CAG);
  EXPECT_EQ(nag.rendered_text.substr(s_nag.size()), cag.rendered_text.substr(s_cag.size()));
}

TEST(Enriched, RejectsAggressionPostsAndInvalidCodes) {
  const auto& tmpl = default_template(PromptMode::enriched, Task::cyberbullying);
  const LabeledPost agg = synth_fixture(1, Task::aggression, 1).front();
  EXPECT_THROW(render_enriched(agg, AggressionLabel::NAG, tmpl), InvalidArgument);
  EXPECT_THROW(render_enriched(cb_post("x", "y"), static_cast<AggressionLabel>(7), tmpl),
               InvalidArgument);
  EXPECT_THROW(default_template(PromptMode::enriched, Task::aggression), InvalidArgument);
}

TEST(Template, SerializeParseRoundTrip) {
  for (auto mode : {PromptMode::zero_shot, PromptMode::few_shot}) {
    for (auto task : {Task::aggression, Task::cyberbullying}) {
      const auto& t = default_template(mode, task);
      const PromptTemplate back = PromptTemplate::parse(t.serialize());
      EXPECT_EQ(back.serialize(), t.serialize());
      EXPECT_EQ(back.body, t.body);
    }
  }
  const auto& e = default_template(PromptMode::enriched, Task::cyberbullying);
  EXPECT_EQ(PromptTemplate::parse(e.serialize()).body, e.body);
}

TEST(Template, ValidationCatchesBadBodies) {
  PromptTemplate t = default_template(PromptMode::zero_shot, Task::aggression);
  t.body = "no post placeholder {{labels}}";
  EXPECT_THROW(t.validate(), InvalidArgument);
  t.body = "{{post}} {{post}}";
  EXPECT_THROW(t.validate(), InvalidArgument);
  t.body = "{{post}} {{aggression}}";
  EXPECT_THROW(t.validate(), InvalidArgument);

  PromptTemplate few = default_template(PromptMode::few_shot, Task::aggression);
  few.body = "{{labels}} {{post}}";
  EXPECT_THROW(few.validate(), InvalidArgument);

  PromptTemplate enr = default_template(PromptMode::enriched, Task::cyberbullying);
  enr.body = "{{post}} {{aggression}}";
  EXPECT_THROW(enr.validate(), InvalidArgument);

  EXPECT_THROW(PromptTemplate::parse("template_id: x\nversion: 1\n{{post}}"), InvalidArgument);
}

TEST(Template, LoadFromFile) {
  test::TempDir dir;
  const auto& t = default_template(PromptMode::zero_shot, Task::cyberbullying);
  test::write(dir / "t.tmpl", t.serialize());
  EXPECT_EQ(PromptTemplate::load(dir / "t.tmpl").body, t.body);
}

TEST(PromptAudit, AppendsOneLinePerPrompt) {
  test::TempDir dir;
  {
    PromptAuditLog log(dir / "audit" / "prompts.jsonl");
    const auto& tmpl = default_template(PromptMode::zero_shot, Task::cyberbullying);
    log.append(render_zero_shot(cb_post("a", "x\ny"), tmpl));
    log.append(render_zero_shot(cb_post("b", "z"), tmpl));
  }
  const std::string text = test::slurp(dir / "audit" / "prompts.jsonl");
  EXPECT_EQ(count_occurrences(text, "\n"), 2u);
  EXPECT_NE(text.find("\"post_id\":\"a\""), std::string::npos);
}
