#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "cbd/error.hpp"
#include "cbd/random.hpp"
#include "cbd/tuning.hpp"
#include "test_util.hpp"

using namespace cbd;

namespace {

std::shared_ptr<const ToyNetwork> small_net() {
  static const auto net = std::make_shared<const ToyNetwork>(NetworkConfig{});
  return net;
}

TuneConfig small_tune(std::size_t rank = 4) {
  TuneConfig c;
  c.rank = rank;
  c.learning_rate = 1e-2;
  c.batch_size = 4;
  c.seed = 3;
  return c;
}

std::vector<bool> full_mask(std::size_t n) { return std::vector<bool>(n, true); }

struct BoolBuf {
  explicit BoolBuf(const std::vector<bool>& v) : data(new bool[v.size()]), n(v.size()) {
    for (std::size_t i = 0; i < n; ++i) data[i] = v[i];
  }
  std::span<const bool> span() const { return {data.get(), n}; }
  std::unique_ptr<bool[]> data;
  std::size_t n;
};

double oracle_ce(const Eigen::RowVectorXd& z, std::size_t y) {
  double sum = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) sum += std::exp(z(i));
  return -std::log(std::exp(z(static_cast<Eigen::Index>(y))) / sum);
}

void randomize(Matrix& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
}

Matrix snapshot(AdapterState& a) {
  std::vector<double> flat;
  for (auto* p : a.parameters()) flat.insert(flat.end(), p->value.data(), p->value.data() + p->value.size());
  return Eigen::Map<Matrix>(flat.data(), static_cast<Eigen::Index>(flat.size()), 1);
}

}  // namespace

TEST(Toy, TokenizeStartsWithBosAndIsCaseInsensitive) {
  const auto& net = *small_net();
  const auto a = net.tokenize("Hello, WORLD!");
  const auto b = net.tokenize("hello world");
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0], 0);
  for (std::size_t i = 1; i < a.size(); ++i) {
    EXPECT_GE(a[i], 1);
    EXPECT_LT(a[i], 512);
  }
  std::string long_text;
  for (int i = 0; i < 200; ++i) long_text += "w" + std::to_string(i) + " ";
  EXPECT_EQ(net.tokenize(long_text).size(), net.config().max_seq_len);
}

TEST(Toy, SameSeedSameNetwork) {
  EXPECT_EQ(ToyNetwork(NetworkConfig{}).checksum(), small_net()->checksum());
  NetworkConfig other;
  other.seed = 2;
  EXPECT_NE(ToyNetwork(other).checksum(), small_net()->checksum());
}

TEST(Lora, ZeroInitIsIdentity) {
  AdaptedModel plain(small_net());
  AdaptedModel adapted = attach_adapters(small_net(), small_tune());
  const auto tokens = small_net()->tokenize("some words to encode here");
  const BoolBuf mask(full_mask(tokens.size()));
  EXPECT_EQ(plain.hidden_states(tokens, mask.span()), adapted.hidden_states(tokens, mask.span()));
  for (const auto& [name, f] : adapted.adapters().front().factors) {
    EXPECT_TRUE(f.up.value.isZero(0.0)) << name;
    EXPECT_FALSE(f.down.value.isZero(0.0)) << name;
  }
}

TEST(Lora, ParameterCountForOneTarget) {
  TuneConfig c = small_tune(8);
  c.target_layers = {"layers.0.attn.q"};
  AdaptedModel m = attach_adapters(small_net(), c);
  const auto& w = small_net()->weight("layers.0.attn.q");
  EXPECT_EQ(m.adapters().front().parameter_count(),
            8u * static_cast<std::size_t>(w.rows() + w.cols()));

  c.target_layers = {"layers.*.mlp.up"};
  AdaptedModel m2 = attach_adapters(small_net(), c);
  const auto& up = small_net()->weight("layers.0.mlp.up");
  EXPECT_EQ(m2.adapters().front().parameter_count(),
            2u * 8u * static_cast<std::size_t>(up.rows() + up.cols()));
}

TEST(Lora, UpdateRankIsBounded) {
  for (std::size_t r : {1u, 3u, 8u}) {
    AdaptedModel m = attach_adapters(small_net(), small_tune(r));
    Rng rng(r);
    for (auto& [name, f] : m.adapters().front().factors) {
      randomize(f.up.value, rng, 1.0);
      EXPECT_LE(numerical_rank(f.delta()), r) << name;
      EXPECT_EQ(numerical_rank(f.delta()), std::min<std::size_t>(r, 16)) << name;
    }
  }
}

TEST(Lora, SelectorErrors) {
  TuneConfig c = small_tune();
  c.target_layers = {"layers.9.*"};
  EXPECT_THROW(attach_adapters(small_net(), c), InvalidArgument);
  AdaptedModel m = attach_adapters(small_net(), small_tune());
  EXPECT_THROW(m.attach("default", small_tune()), InvalidArgument);
  EXPECT_THROW(m.adapter("missing"), InvalidArgument);
  EXPECT_TRUE(glob_match("*.attn.q", "layers.1.attn.q"));
  EXPECT_FALSE(glob_match("*.attn.q", "layers.1.attn.qq"));
  EXPECT_TRUE(glob_match("layers.*", "layers.0.mlp.down"));
}

TEST(Pooling, PaddedEqualsUnpadded) {
  AdaptedModel m = attach_adapters(small_net(), small_tune());
  Rng rng(5);
  for (auto& [name, f] : m.adapters().front().factors) randomize(f.up.value, rng, 0.3);

  const auto tokens = small_net()->tokenize("a short post");
  const BoolBuf mask(full_mask(tokens.size()));
  const auto plain = pool_embedding(m.hidden_states(tokens, mask.span()), mask.span());

  auto padded = tokens;
  std::vector<bool> pmask = full_mask(tokens.size());
  for (int i = 0; i < 5; ++i) {
    padded.push_back(1 + i);
    pmask.push_back(false);
  }
  const BoolBuf pm(pmask);
  const auto pooled = pool_embedding(m.hidden_states(padded, pm.span()), pm.span());
  EXPECT_TRUE(plain.isApprox(pooled, 1e-12));
  EXPECT_EQ(last_unmasked(pm.span()), tokens.size() - 1);
}

TEST(Pooling, AllMaskedThrows) {
  const BoolBuf none(std::vector<bool>(4, false));
  EXPECT_THROW(last_unmasked(none.span()), InvalidArgument);
  EXPECT_THROW(pool_embedding(Matrix::Zero(4, 16), none.span()), InvalidArgument);
}

TEST(JointLoss, UniformLogitsGiveLogThreePlusLogFour) {
  const Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(3);
  const Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(4);
  for (std::size_t ya = 0; ya < 3; ++ya) {
    for (std::size_t yc = 0; yc < 4; ++yc) {
      EXPECT_NEAR(mtl_joint_loss(a, ya, c, yc), std::log(3.0) + std::log(4.0), 1e-12);
    }
  }
}

TEST(JointLoss, MatchesSoftmaxOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::RowVectorXd a(3), c(4);
    for (Eigen::Index i = 0; i < 3; ++i) a(i) = rng.uniform(-5, 5);
    for (Eigen::Index i = 0; i < 4; ++i) c(i) = rng.uniform(-5, 5);
    const std::size_t ya = rng.below(3), yc = rng.below(4);
    EXPECT_NEAR(mtl_joint_loss(a, ya, c, yc), oracle_ce(a, ya) + oracle_ce(c, yc), 1e-9);
  }
  EXPECT_THROW(mtl_joint_loss(Eigen::RowVectorXd::Zero(4), 0, Eigen::RowVectorXd::Zero(4), 0),
               InvalidArgument);
  EXPECT_THROW(mtl_joint_loss(Eigen::RowVectorXd::Zero(3), 3, Eigen::RowVectorXd::Zero(4), 0),
               InvalidArgument);
}

TEST(Training, BaseStaysFrozen) {
  const auto base = std::make_shared<const ToyNetwork>(NetworkConfig{});
  const auto before = base->checksum();
  AdaptedModel m = attach_adapters(base, small_tune());
  TaskHead head = TaskHead::zeros(Task::aggression, 16);
  SftTrainer trainer(m, head, small_tune());
  const auto data = synth_fixture(4, Task::aggression, 1);
  train_sft(trainer, data, small_tune());
  EXPECT_EQ(base->checksum(), before);
}

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
  TuneConfig c = small_tune();
  c.learning_rate = 0.0;
  AdaptedModel m = attach_adapters(small_net(), c);
  TaskHead head = TaskHead::zeros(Task::aggression, 16);
  const Matrix before = snapshot(m.adapters().front());
  SftTrainer trainer(m, head, c);
  trainer.step(synth_fixture(2, Task::aggression, 1));
  EXPECT_EQ(snapshot(m.adapters().front()), before);
  EXPECT_TRUE(head.weight.value.isZero(0.0));
  EXPECT_TRUE(head.bias.value.isZero(0.0));
}

TEST(Training, HeadGradientsStaySeparate) {
  AdaptedModel m(small_net());
  m.attach("aggression", small_tune());
  m.attach("cyberbullying", small_tune());
  Rng rng(2);
  for (auto& set : m.adapters()) {
    for (auto& [name, f] : set.factors) randomize(f.up.value, rng, 0.2);
  }
  TaskHead agg = TaskHead::zeros(Task::aggression, 16);
  TaskHead cb = TaskHead::zeros(Task::cyberbullying, 16);
  randomize(agg.weight.value, rng, 0.5);
  randomize(cb.weight.value, rng, 0.5);
  const auto agg_batch = synth_fixture(1, Task::aggression, 4);
  const auto cb_batch = synth_fixture(1, Task::cyberbullying, 4);

  joint_loss_and_grad(m, agg, cb, agg_batch, cb_batch);
  const Matrix joint_agg = agg.weight.grad;
  const Matrix joint_cb = cb.weight.grad;

  agg.weight.zero_grad();
  agg.bias.zero_grad();
  cb.weight.zero_grad();
  cb.bias.zero_grad();
  task_loss_and_grad(m, agg, agg_batch);
  EXPECT_TRUE(cb.weight.grad.isZero(0.0));
  EXPECT_TRUE(agg.weight.grad.isApprox(joint_agg, 1e-12));
  task_loss_and_grad(m, cb, cb_batch);
  EXPECT_TRUE(cb.weight.grad.isApprox(joint_cb, 1e-12));
}

TEST(Training, AdapterGradientMatchesFiniteDifferences) {
  AdaptedModel m = attach_adapters(small_net(), small_tune(2));
  Rng rng(9);
  for (auto& [name, f] : m.adapters().front().factors) randomize(f.up.value, rng, 0.3);
  TaskHead head = TaskHead::zeros(Task::cyberbullying, 16);
  randomize(head.weight.value, rng, 0.5);
  const auto batch = synth_fixture(1, Task::cyberbullying, 6);

  auto loss_only = [&] {
    for (auto* p : m.trainable_parameters()) p->zero_grad();
    head.weight.zero_grad();
    head.bias.zero_grad();
    return task_loss_and_grad(m, head, batch);
  };
  loss_only();
  std::vector<Matrix> analytic;
  for (auto* p : m.trainable_parameters()) analytic.push_back(p->grad);

  const double h = 1e-6;
  auto params = m.trainable_parameters();
  for (std::size_t pi = 0; pi < params.size(); pi += 3) {
    Parameter* p = params[pi];
    for (Eigen::Index k = 0; k < p->value.size(); k += 7) {
      const double orig = p->value.data()[k];
      p->value.data()[k] = orig + h;
      const double up = loss_only();
      p->value.data()[k] = orig - h;
      const double down = loss_only();
      p->value.data()[k] = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(analytic[pi].data()[k], numeric, 1e-6 + 1e-4 * std::abs(numeric))
          << p->name << "[" << k << "]";
    }
  }
}

TEST(Training, MixedBatchIsRejected) {
  AdaptedModel m = attach_adapters(small_net(), small_tune());
  TaskHead head = TaskHead::zeros(Task::aggression, 16);
  auto batch = synth_fixture(1, Task::aggression, 1);
  batch.push_back(synth_fixture(1, Task::cyberbullying, 1).front());
  EXPECT_THROW(task_loss_and_grad(m, head, batch), InvalidArgument);
  SftTrainer trainer(m, head, small_tune());
  EXPECT_THROW(trainer.step(batch), InvalidArgument);

  AdaptedModel bare(small_net());
  EXPECT_THROW(SftTrainer(bare, head, small_tune()), InvalidArgument);
}

TEST(Training, MtlUpdatesBothAdapterSets) {
  AdaptedModel m(small_net());
  m.attach("aggression", small_tune());
  m.attach("cyberbullying", small_tune());
  TaskHead agg = TaskHead::zeros(Task::aggression, 16);
  TaskHead cb = TaskHead::zeros(Task::cyberbullying, 16);
  const Matrix a0 = snapshot(m.adapter("aggression"));
  const Matrix c0 = snapshot(m.adapter("cyberbullying"));
  TuneConfig c = small_tune();
  c.epochs = 2;
  MtlTrainer trainer(m, agg, cb, c);
  std::vector<TrainStepRecord> log;
  const auto steps = train_mtl(trainer, synth_fixture(3, Task::aggression, 1),
                               synth_fixture(2, Task::cyberbullying, 1), c,
                               [&](const TrainStepRecord& r) { log.push_back(r); });
  // 9 aggression and 8 cyberbullying posts at batch 4: 3 steps per epoch.
  EXPECT_EQ(steps, 6u);
  ASSERT_EQ(log.size(), 6u);
  EXPECT_NEAR(log.front().joint_loss, std::log(3.0) + std::log(4.0), 1e-12);
  EXPECT_TRUE(log.front().aggression_loss && log.front().cyberbullying_loss);
  EXPECT_NE(snapshot(m.adapter("aggression")), a0);
  EXPECT_NE(snapshot(m.adapter("cyberbullying")), c0);

  AdaptedModel one = attach_adapters(small_net(), small_tune());
  EXPECT_THROW(MtlTrainer(one, agg, cb, c), InvalidArgument);
  EXPECT_THROW(MtlTrainer(m, cb, agg, c).step(synth_fixture(1, Task::aggression, 1),
                                               synth_fixture(1, Task::cyberbullying, 1)),
               InvalidArgument);
}

TEST(Training, SftStepsAndMetricsLines) {
  AdaptedModel m = attach_adapters(small_net(), small_tune());
  TaskHead head = TaskHead::zeros(Task::aggression, 16);
  TuneConfig c = small_tune();
  c.epochs = 3;
  SftTrainer trainer(m, head, c);
  std::vector<std::string> lines;
  const auto steps = train_sft(trainer, synth_fixture(3, Task::aggression, 2), c,
                               [&](const TrainStepRecord& r) { lines.push_back(metrics_line(r)); });
  EXPECT_EQ(steps, 9u);
  ASSERT_EQ(lines.size(), 9u);
  EXPECT_NE(lines.front().find("\"cyberbullying_loss\":null"), std::string::npos);
  EXPECT_NE(lines.back().find("\"step\":9"), std::string::npos);
}

TEST(Checkpoint, RoundTripRestoresPredictions) {
  test::TempDir dir;
  AdaptedModel m(small_net());
  m.attach("aggression", small_tune());
  m.attach("cyberbullying", small_tune());
  TaskHead agg = TaskHead::zeros(Task::aggression, 16);
  TaskHead cb = TaskHead::zeros(Task::cyberbullying, 16);
  MtlTrainer trainer(m, agg, cb, small_tune());
  train_mtl(trainer, synth_fixture(2, Task::aggression, 1), synth_fixture(2, Task::cyberbullying, 1),
            small_tune());

  Checkpoint ck;
  ck.method = TuneMethod::mtl;
  ck.network = small_net()->config();
  ck.tune = small_tune();
  ck.base_checksum = small_net()->checksum();
  ck.adapters = m.adapters();
  ck.heads = {agg, cb};
  save_checkpoint(dir / "ck.cbd", ck);

  const Checkpoint back = load_checkpoint(dir / "ck.cbd");
  EXPECT_EQ(back.method, TuneMethod::mtl);
  EXPECT_EQ(back.network, ck.network);
  ASSERT_EQ(back.adapters.size(), 2u);
  ASSERT_NE(back.head_for(Task::cyberbullying), nullptr);
  EXPECT_EQ(back.head_for(Task::cyberbullying)->weight.value, cb.weight.value);
  for (std::size_t i = 0; i < 2; ++i) {
    for (const auto& [name, f] : ck.adapters[i].factors) {
      EXPECT_EQ(back.adapters[i].factors.at(name).up.value, f.up.value);
      EXPECT_EQ(back.adapters[i].factors.at(name).down.value, f.down.value);
    }
  }
  const AdaptedModel restored = restore_model(back);
  for (const char* text : {"first text", "Religion matters here", "quite calm post"}) {
    EXPECT_EQ(head_logits(restored, *back.head_for(Task::cyberbullying), text),
              head_logits(m, cb, text));
  }

  std::string bytes = test::slurp(dir / "ck.cbd");
  test::write(dir / "short.cbd", bytes.substr(0, bytes.size() - 5));
  EXPECT_ANY_THROW(load_checkpoint(dir / "short.cbd"));
  test::write(dir / "bad.cbd", "not a checkpoint\n");
  EXPECT_ANY_THROW(load_checkpoint(dir / "bad.cbd"));

  Checkpoint wrong = back;
  wrong.base_checksum ^= 1;
  EXPECT_THROW(restore_model(wrong), InvalidArgument);
}
