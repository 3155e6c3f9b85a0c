#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "cbd/backend.hpp"
#include "cbd/corpus.hpp"
#include "cbd/evalkit.hpp"
#include "cbd/prompting.hpp"
#include "cbd/random.hpp"
#include "cbd/tuning.hpp"

using namespace cbd;

static void BM_ComputeMetrics(benchmark::State& state) {
  const auto k = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  ConfusionMatrix cm;
  cm.counts.assign(k, std::vector<std::size_t>(k));
  cm.unscored_by_gold.assign(k, 0);
  for (auto& row : cm.counts) {
    for (auto& v : row) v = 1 + rng.below(50);
  }
  for (auto _ : state) benchmark::DoNotOptimize(compute_metrics(cm).macro_f1);
}
BENCHMARK(BM_ComputeMetrics)->Arg(3)->Arg(4)->Arg(6);

static void BM_BuildConfusion(benchmark::State& state) {
  std::vector<Prediction> preds;
  for (const auto& p : synth_fixture(static_cast<std::size_t>(state.range(0)), Task::cyberbullying, 2)) {
    Prediction pr;
    pr.post_id = p.id;
    pr.gold = p.label;
    pr.label = p.label;
    preds.push_back(pr);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_confusion(preds, Task::cyberbullying).scored());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(preds.size()));
}
BENCHMARK(BM_BuildConfusion)->Arg(250)->Arg(2500);

static void BM_ParseLabel(benchmark::State& state) {
  const std::vector<std::string> answers{
      "Overtly Aggressive", "I think this is covertly aggressive.",
      "Label: NAG", "The post seems non-aggressive overall, not overtly aggressive"};
  std::size_t i = 0;
  for (auto _ : state) {
    RawResponse r{answers[i++ % answers.size()], {}, "b", false};
    benchmark::DoNotOptimize(parse_label(r, Task::aggression).label);
  }
}
BENCHMARK(BM_ParseLabel);

static void BM_RenderEnriched(benchmark::State& state) {
  const auto& tmpl = default_template(PromptMode::enriched, Task::cyberbullying);
  const auto posts = synth_fixture(8, Task::cyberbullying, 3);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& p = posts[i++ % posts.size()];
    benchmark::DoNotOptimize(render_enriched(p, AggressionLabel::CAG, tmpl).rendered_text.size());
  }
}
BENCHMARK(BM_RenderEnriched);

static void BM_ToyForward(benchmark::State& state) {
  const auto net = std::make_shared<const ToyNetwork>(NetworkConfig{});
  AdaptedModel model = attach_adapters(net, TuneConfig{});
  const TaskHead head = TaskHead::zeros(Task::cyberbullying, net->config().d_model);
  std::string text;
  for (int w = 0; w < state.range(0); ++w) text += "word" + std::to_string(w) + " ";
  for (auto _ : state) benchmark::DoNotOptimize(head_logits(model, head, text)(0));
}
BENCHMARK(BM_ToyForward)->Arg(8)->Arg(32)->Arg(63);

static void BM_SftStep(benchmark::State& state) {
  const auto net = std::make_shared<const ToyNetwork>(NetworkConfig{});
  TuneConfig tune;
  tune.learning_rate = 1e-3;
  AdaptedModel model = attach_adapters(net, tune);
  TaskHead head = TaskHead::zeros(Task::aggression, net->config().d_model);
  SftTrainer trainer(model, head, tune);
  const auto batch = synth_fixture(3, Task::aggression, 4);
  const std::span<const LabeledPost> eight(batch.data(), 8);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(eight));
}
BENCHMARK(BM_SftStep);
BENCHMARK_MAIN();
