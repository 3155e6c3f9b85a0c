#include "cbd/tuning.hpp"

#include <bit>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "cbd/backend.hpp"
#include "cbd/error.hpp"
#include "cbd/prompting.hpp"
#include "cbd/random.hpp"
#include "detail/strings.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint tensors are stored little-endian");

namespace cbd {

using nlohmann::json;
using ad::Tape;

namespace {

Matrix uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
  }
  return m;
}

std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h) {
  // Column-major storage; hashing raw bytes is exact for bit-identity checks.
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                  static_cast<std::size_t>(m.size()) * sizeof(double)),
                 h);
}

std::string layer_name(std::size_t layer, std::string_view suffix) {
  return "layers." + std::to_string(layer) + "." + std::string(suffix);
}

// std::vector<bool> has no contiguous storage; spans need real bools.
struct Mask {
  std::unique_ptr<bool[]> data;
  std::size_t size = 0;
  explicit Mask(std::size_t n) : data(new bool[n]), size(n) {
    std::fill(data.get(), data.get() + n, true);
  }
  std::span<const bool> span() const { return {data.get(), size}; }
};

void check_single_task(std::span<const LabeledPost> batch, Task task, const char* what) {
  if (batch.empty()) throw InvalidArgument(std::string(what) + ": empty batch");
  for (const auto& p : batch) {
    if (p.task() != task) {
      throw InvalidArgument(std::string(what) + ": mixed-task batch (post " + p.id + " is " +
                            std::string(task_name(p.task())) + ", head is " +
                            std::string(task_name(task)) + ")");
    }
  }
}

// Mean CE nodes for one task's batch on an existing tape.
Tape::Var batch_loss(Tape& tape, AdaptedModel& model, TaskHead& head,
                     std::span<const LabeledPost> batch) {
  const Tape::Var w = tape.leaf(head.weight.value, &head.weight.grad);
  const Tape::Var b = tape.leaf(head.bias.value, &head.bias.grad);
  std::vector<Tape::Var> losses;
  losses.reserve(batch.size());
  for (const auto& post : batch) {
    const auto tokens = model.base().tokenize(post.text);
    Mask mask(tokens.size());
    const Tape::Var h = model.encode(tape, tokens, mask.span());
    const Tape::Var pooled = tape.row(h, last_unmasked(mask.span()));
    const Tape::Var logits = tape.add(tape.matmul_bt(pooled, w), b);
    losses.push_back(tape.cross_entropy(logits, class_index(post.label)));
  }
  return tape.weighted_sum(losses, 1.0 / static_cast<double>(batch.size()));
}

void zero_grads(std::span<Parameter* const> params) {
  for (auto* p : params) p->zero_grad();
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  return idx;
}

std::vector<LabeledPost> gather(std::span<const LabeledPost> data,
                                const std::vector<std::size_t>& order,
                                std::size_t start, std::size_t count) {
  std::vector<LabeledPost> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(data[order[(start + k) % order.size()]]);
  return out;
}

json tune_to_json(const TuneConfig& c) {
  return {{"rank", c.rank},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"target_layers", c.target_layers},
          {"seed", c.seed}};
}

TuneConfig tune_from_json(const json& j) {
  TuneConfig c;
  c.rank = j.at("rank").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.target_layers = j.at("target_layers").get<std::vector<std::string>>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

json network_to_json(const NetworkConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

constexpr std::string_view kCheckpointMagic = "CBD-CHECKPOINT 1";

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void TuneConfig::validate() const {
  if (rank < 1) throw InvalidArgument("tune: rank must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("tune: learning_rate must be a finite value >= 0");
  }
  if (batch_size < 1) throw InvalidArgument("tune: batch_size must be >= 1");
  if (epochs < 1) throw InvalidArgument("tune: epochs must be >= 1");
  if (target_layers.empty()) throw InvalidArgument("tune: target_layers is empty");
}

void NetworkConfig::validate() const {
  if (vocab_size < 2 || d_model < 1 || n_layers < 1 || d_ff < 1 || max_seq_len < 2) {
    throw InvalidArgument("network: every dimension must be positive (vocab >= 2, seq >= 2)");
  }
}

// ---------------------------------------------------------------------------
// ToyNetwork
// ---------------------------------------------------------------------------

ToyNetwork::ToyNetwork(NetworkConfig config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const auto d = config_.d_model;
  embedding_ = uniform_matrix(rng, config_.vocab_size, d, 1.0);

  positions_.resize(static_cast<Eigen::Index>(config_.max_seq_len), static_cast<Eigen::Index>(d));
  for (std::size_t pos = 0; pos < config_.max_seq_len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      positions_(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(i)) =
          0.5 * (i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }

  const double attn_bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_bound = 1.0 / std::sqrt(static_cast<double>(config_.d_ff));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (auto proj : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      weights_[layer_name(l, proj)] = uniform_matrix(rng, d, d, attn_bound);
    }
    weights_[layer_name(l, "mlp.up")] = uniform_matrix(rng, config_.d_ff, d, attn_bound);
    weights_[layer_name(l, "mlp.down")] = uniform_matrix(rng, d, config_.d_ff, ff_bound);
  }
}

std::vector<std::string> ToyNetwork::attachable_weights() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : weights_) names.push_back(name);
  return names;
}

const Matrix& ToyNetwork::weight(std::string_view name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw InvalidArgument("unknown weight " + std::string(name));
  return it->second;
}

std::vector<int> ToyNetwork::tokenize(std::string_view text) const {
  std::vector<int> ids{0};
  const auto buckets = static_cast<std::uint64_t>(config_.vocab_size - 1);
  std::size_t i = 0;
  while (i < text.size() && ids.size() < config_.max_seq_len) {
    while (i < text.size() && detail::is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t start = i;
    while (i < text.size() && !detail::is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::string_view word = text.substr(start, i - start);
    while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.front()))) word.remove_prefix(1);
    while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.back()))) word.remove_suffix(1);
    if (word.empty()) continue;
    ids.push_back(1 + static_cast<int>(fnv1a64(detail::ascii_lower(word)) % buckets));
  }
  return ids;
}

std::uint64_t ToyNetwork::checksum() const {
  std::uint64_t h = hash_matrix(embedding_, 0xcbf29ce484222325ULL);
  h = hash_matrix(positions_, h);
  for (const auto& [name, w] : weights_) {
    h = fnv1a64(name, h);
    h = hash_matrix(w, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adapters and heads
// ---------------------------------------------------------------------------

std::size_t AdapterState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, f] : factors) {
    n += static_cast<std::size_t>(f.down.value.size() + f.up.value.size());
  }
  return n;
}

std::vector<Parameter*> AdapterState::parameters() {
  std::vector<Parameter*> out;
  for (auto& [_, f] : factors) {
    out.push_back(&f.down);
    out.push_back(&f.up);
  }
  return out;
}

TaskHead TaskHead::zeros(Task task, std::size_t embedding_dim) {
  const auto classes = static_cast<Eigen::Index>(class_count(task));
  TaskHead h;
  h.task = task;
  h.weight = Parameter("head." + std::string(task_name(task)) + ".weight",
                       Matrix::Zero(classes, static_cast<Eigen::Index>(embedding_dim)));
  h.bias = Parameter("head." + std::string(task_name(task)) + ".bias", Matrix::Zero(1, classes));
  return h;
}

bool glob_match(std::string_view pattern, std::string_view name) {
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (p < pattern.size() && pattern[p] == name[n]) {
      ++p;
      ++n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::size_t numerical_rank(const Matrix& m, double rel_tol) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > rel_tol * s(0)) ++r;
  }
  return r;
}

AdaptedModel::AdaptedModel(std::shared_ptr<const ToyNetwork> base) : base_(std::move(base)) {
  if (!base_) throw InvalidArgument("AdaptedModel: null base network");
}

AdapterState& AdaptedModel::attach(std::string name, const TuneConfig& config) {
  config.validate();
  for (const auto& a : adapters_) {
    if (a.name == name) throw InvalidArgument("adapter set '" + name + "' already attached");
  }
  std::vector<std::string> targets;
  for (const auto& w : base_->attachable_weights()) {
    for (const auto& pattern : config.target_layers) {
      if (glob_match(pattern, w)) {
        targets.push_back(w);
        break;
      }
    }
  }
  if (targets.empty()) {
    throw InvalidArgument("adapter selector matches no weight matrix");
  }

  AdapterState state;
  state.name = std::move(name);
  state.rank = config.rank;
  Rng rng(config.seed ^ fnv1a64(state.name));
  for (const auto& t : targets) {
    const Matrix& w = base_->weight(t);
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    LoraFactors f;
    f.down = Parameter(state.name + "." + t + ".down",
                       uniform_matrix(rng, config.rank, static_cast<std::size_t>(w.cols()), bound));
    f.up = Parameter(state.name + "." + t + ".up",
                     Matrix::Zero(w.rows(), static_cast<Eigen::Index>(config.rank)));
    state.factors.emplace(t, std::move(f));
  }
  adapters_.push_back(std::move(state));
  return adapters_.back();
}

AdapterState& AdaptedModel::adapter(std::string_view name) {
  for (auto& a : adapters_) {
    if (a.name == name) return a;
  }
  throw InvalidArgument("no adapter set named '" + std::string(name) + "'");
}

std::vector<Parameter*> AdaptedModel::trainable_parameters() {
  std::vector<Parameter*> out;
  for (auto& a : adapters_) {
    auto p = a.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tape::Var AdaptedModel::linear(Tape& tape, Tape::Var x, const std::string& weight,
                               bool track) const {
  Tape::Var y = tape.matmul_bt(x, tape.constant(base_->weight(weight)));
  for (const auto& set : adapters_) {
    auto it = set.factors.find(weight);
    if (it == set.factors.end()) continue;
    const LoraFactors& f = it->second;
    // Gradient sinks are only handed out from the non-const encode().
    Matrix* down_sink = track ? const_cast<Matrix*>(&f.down.grad) : nullptr;
    Matrix* up_sink = track ? const_cast<Matrix*>(&f.up.grad) : nullptr;
    const Tape::Var down = tape.leaf(f.down.value, down_sink);
    const Tape::Var up = tape.leaf(f.up.value, up_sink);
    y = tape.add(y, tape.matmul_bt(tape.matmul_bt(x, down), up));
  }
  return y;
}

Tape::Var AdaptedModel::encode_impl(Tape& tape, std::span<const int> tokens,
                                    std::span<const bool> mask, bool track) const {
  const auto& cfg = base_->config();
  if (tokens.empty()) throw InvalidArgument("encode: empty token sequence");
  if (tokens.size() != mask.size()) throw InvalidArgument("encode: mask length mismatch");
  if (tokens.size() > cfg.max_seq_len) throw InvalidArgument("encode: sequence too long");

  const auto T = static_cast<Eigen::Index>(tokens.size());
  Matrix x0(T, static_cast<Eigen::Index>(cfg.d_model));
  for (Eigen::Index t = 0; t < T; ++t) {
    const int id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw InvalidArgument("encode: token id out of range");
    }
    x0.row(t) = base_->embedding().row(id) + base_->positions().row(t);
  }
  Tape::Var x = tape.constant(std::move(x0));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const Tape::Var q = linear(tape, x, layer_name(l, "attn.q"), track);
    const Tape::Var k = linear(tape, x, layer_name(l, "attn.k"), track);
    const Tape::Var v = linear(tape, x, layer_name(l, "attn.v"), track);
    const Tape::Var scores = tape.scale(tape.matmul_bt(q, k), inv_sqrt_d);
    const Tape::Var attn = tape.causal_softmax(scores, mask);
    const Tape::Var mixed = tape.matmul(attn, v);
    x = tape.add(x, linear(tape, mixed, layer_name(l, "attn.o"), track));
    const Tape::Var hidden = tape.tanh(linear(tape, x, layer_name(l, "mlp.up"), track));
    x = tape.add(x, linear(tape, hidden, layer_name(l, "mlp.down"), track));
  }
  return x;
}

Tape::Var AdaptedModel::encode(Tape& tape, std::span<const int> tokens,
                               std::span<const bool> mask) {
  return encode_impl(tape, tokens, mask, true);
}

Matrix AdaptedModel::hidden_states(std::span<const int> tokens,
                                   std::span<const bool> mask) const {
  Tape tape;
  return tape.value(encode_impl(tape, tokens, mask, false));
}

AdaptedModel attach_adapters(std::shared_ptr<const ToyNetwork> base, const TuneConfig& config) {
  AdaptedModel model(std::move(base));
  model.attach("default", config);
  return model;
}

std::size_t last_unmasked(std::span<const bool> mask) {
  for (std::size_t i = mask.size(); i-- > 0;) {
    if (mask[i]) return i;
  }
  throw InvalidArgument("pool_embedding: every position is masked");
}

Eigen::RowVectorXd pool_embedding(const Matrix& hidden, std::span<const bool> mask) {
  if (static_cast<std::size_t>(hidden.rows()) != mask.size()) {
    throw InvalidArgument("pool_embedding: mask length differs from sequence length");
  }
  return hidden.row(static_cast<Eigen::Index>(last_unmasked(mask)));
}

double mtl_joint_loss(const Eigen::RowVectorXd& logits_agg, std::size_t y_agg,
                      const Eigen::RowVectorXd& logits_cb, std::size_t y_cb) {
  if (logits_agg.size() != 3 || logits_cb.size() != 4) {
    throw InvalidArgument("mtl_joint_loss: expected 3 aggression and 4 cyberbullying logits");
  }
  if (y_agg >= 3 || y_cb >= 4) throw InvalidArgument("mtl_joint_loss: class index out of range");
  return ad::cross_entropy(logits_agg, y_agg) + ad::cross_entropy(logits_cb, y_cb);
}

Eigen::RowVectorXd head_logits(const AdaptedModel& model, const TaskHead& head,
                               std::string_view text) {
  const auto tokens = model.base().tokenize(text);
  Mask mask(tokens.size());
  const Matrix h = model.hidden_states(tokens, mask.span());
  const Eigen::RowVectorXd pooled = pool_embedding(h, mask.span());
  return pooled * head.weight.value.transpose() + head.bias.value.row(0);
}

Label predict(const AdaptedModel& model, const TaskHead& head, std::string_view text) {
  const Eigen::RowVectorXd z = head_logits(model, head, text);
  Eigen::Index best = 0;
  z.maxCoeff(&best);
  return label_at(head.task, static_cast<std::size_t>(best));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(std::span<Parameter* const> params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Parameter* p : params) {
    auto [it, fresh] = state_.try_emplace(p);
    Moments& s = it->second;
    if (fresh) {
      s.m = Matrix::Zero(p->value.rows(), p->value.cols());
      s.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    s.m = beta1_ * s.m + (1.0 - beta1_) * p->grad;
    s.v = beta2_ * s.v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    if (lr_ == 0.0) continue;
    p->value.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
  }
}

double task_loss_and_grad(AdaptedModel& model, TaskHead& head, std::span<const LabeledPost> batch) {
  check_single_task(batch, head.task, "sft_step");
  Tape tape;
  const Tape::Var loss = batch_loss(tape, model, head, batch);
  tape.backward(loss);
  return tape.scalar(loss);
}

JointLoss joint_loss_and_grad(AdaptedModel& model, TaskHead& agg_head, TaskHead& cb_head,
                              std::span<const LabeledPost> batch_agg,
                              std::span<const LabeledPost> batch_cb) {
  if (agg_head.task != Task::aggression || cb_head.task != Task::cyberbullying) {
    throw InvalidArgument("mtl_step: heads must be (aggression, cyberbullying)");
  }
  check_single_task(batch_agg, Task::aggression, "mtl_step");
  check_single_task(batch_cb, Task::cyberbullying, "mtl_step");
  Tape tape;
  const Tape::Var agg = batch_loss(tape, model, agg_head, batch_agg);
  const Tape::Var cb = batch_loss(tape, model, cb_head, batch_cb);
  const std::array<Tape::Var, 2> terms{agg, cb};
  const Tape::Var joint = tape.weighted_sum(terms, 1.0);
  tape.backward(joint);
  return {tape.scalar(agg), tape.scalar(cb), tape.scalar(joint)};
}

SftTrainer::SftTrainer(AdaptedModel& model, TaskHead& head, const TuneConfig& config)
    : model_(model), head_(head), optimizer_(config.learning_rate) {
  config.validate();
  if (model_.adapters().empty()) throw InvalidArgument("SftTrainer: model has no adapters");
}

double SftTrainer::step(std::span<const LabeledPost> batch) {
  check_single_task(batch, head_.task, "sft_step");
  auto params = model_.trainable_parameters();
  auto head_params = head_.parameters();
  params.insert(params.end(), head_params.begin(), head_params.end());
  zero_grads(params);
  const double loss = task_loss_and_grad(model_, head_, batch);
  optimizer_.step(params);
  return loss;
}

MtlTrainer::MtlTrainer(AdaptedModel& model, TaskHead& agg_head, TaskHead& cb_head,
                       const TuneConfig& config)
    : model_(model), agg_head_(agg_head), cb_head_(cb_head), optimizer_(config.learning_rate) {
  config.validate();
  if (model_.adapters().size() != 2) {
    throw InvalidArgument("MtlTrainer: expected exactly two adapter sets");
  }
}

JointLoss MtlTrainer::step(std::span<const LabeledPost> batch_agg,
                           std::span<const LabeledPost> batch_cb) {
  auto params = model_.trainable_parameters();
  for (auto* p : agg_head_.parameters()) params.push_back(p);
  for (auto* p : cb_head_.parameters()) params.push_back(p);
  zero_grads(params);
  const JointLoss loss = joint_loss_and_grad(model_, agg_head_, cb_head_, batch_agg, batch_cb);
  optimizer_.step(params);
  return loss;
}

std::string metrics_line(const TrainStepRecord& r) {
  json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["aggression_loss"] = r.aggression_loss ? json(*r.aggression_loss) : json(nullptr);
  j["cyberbullying_loss"] = r.cyberbullying_loss ? json(*r.cyberbullying_loss) : json(nullptr);
  j["joint_loss"] = r.joint_loss;
  return j.dump();
}

std::size_t train_sft(SftTrainer& trainer, std::span<const LabeledPost> data,
                      const TuneConfig& config, const MetricsSink& sink) {
  if (data.empty()) throw InvalidArgument("train_sft: no training data");
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = shuffled_indices(data.size(), config.seed + epoch);
    for (std::size_t start = 0; start < data.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, data.size() - start);
      const auto batch = gather(data, order, start, n);
      const double loss = trainer.step(batch);
      TrainStepRecord rec{++steps, epoch, std::nullopt, std::nullopt, loss};
      (batch.front().task() == Task::aggression ? rec.aggression_loss : rec.cyberbullying_loss) = loss;
      if (sink) sink(rec);
    }
  }
  return steps;
}

std::size_t train_mtl(MtlTrainer& trainer, std::span<const LabeledPost> agg_data,
                      std::span<const LabeledPost> cb_data, const TuneConfig& config,
                      const MetricsSink& sink) {
  if (agg_data.empty() || cb_data.empty()) throw InvalidArgument("train_mtl: both tasks need data");
  const std::size_t bs = config.batch_size;
  const std::size_t per_epoch = std::max((agg_data.size() + bs - 1) / bs, (cb_data.size() + bs - 1) / bs);
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto agg_order = shuffled_indices(agg_data.size(), config.seed + 2 * epoch);
    const auto cb_order = shuffled_indices(cb_data.size(), config.seed + 2 * epoch + 1);
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const auto batch_agg = gather(agg_data, agg_order, s * bs, std::min(bs, agg_data.size()));
      const auto batch_cb = gather(cb_data, cb_order, s * bs, std::min(bs, cb_data.size()));
      const JointLoss loss = trainer.step(batch_agg, batch_cb);
      TrainStepRecord rec{++steps, epoch, loss.aggression, loss.cyberbullying, loss.joint};
      if (sink) sink(rec);
    }
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::string_view tune_method_name(TuneMethod m) {
  return m == TuneMethod::lora_sft ? "lora_sft" : "mtl";
}

const TaskHead* Checkpoint::head_for(Task task) const {
  for (const auto& h : heads) {
    if (h.task == task) return &h;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  json adapters = json::array();
  for (const auto& a : ck.adapters) {
    json targets = json::array();
    for (const auto& [target, f] : a.factors) {
      targets.push_back(target);
      tensors.emplace_back("adapter/" + a.name + "/" + target + "/down", &f.down.value);
      tensors.emplace_back("adapter/" + a.name + "/" + target + "/up", &f.up.value);
    }
    adapters.push_back({{"name", a.name}, {"rank", a.rank}, {"targets", targets}});
  }
  json heads = json::array();
  for (const auto& h : ck.heads) {
    heads.push_back(task_name(h.task));
    tensors.emplace_back("head/" + std::string(task_name(h.task)) + "/weight", &h.weight.value);
    tensors.emplace_back("head/" + std::string(task_name(h.task)) + "/bias", &h.bias.value);
  }
  json directory = json::array();
  for (const auto& [name, m] : tensors) {
    directory.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
  }
  json header;
  header["method"] = tune_method_name(ck.method);
  header["network"] = network_to_json(ck.network);
  header["tune"] = tune_to_json(ck.tune);
  header["enriched_inputs"] = ck.enriched_inputs;
  header["base_checksum"] = ck.base_checksum;
  header["adapters"] = adapters;
  header["heads"] = heads;
  header["tensors"] = directory;

  std::string out(kCheckpointMagic);
  out += '\n';
  out += header.dump();
  out += '\n';
  for (const auto& [name, m] : tensors) {
    for (Eigen::Index i = 0; i < m->rows(); ++i) {
      for (Eigen::Index j = 0; j < m->cols(); ++j) {
        const double v = (*m)(i, j);
        out.append(reinterpret_cast<const char*>(&v), sizeof v);
      }
    }
  }
  detail::write_file(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string data = detail::read_file(path);
  const auto bad = [&](const std::string& why) {
    return InvalidArgument(path.string() + ": " + why);
  };
  const std::size_t nl1 = data.find('\n');
  if (nl1 == std::string::npos || std::string_view(data).substr(0, nl1) != kCheckpointMagic) {
    throw bad("not a checkpoint file (bad magic line)");
  }
  const std::size_t nl2 = data.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw bad("truncated header");

  Checkpoint ck;
  std::map<std::string, Matrix> tensors;
  try {
    const json header = json::parse(std::string_view(data).substr(nl1 + 1, nl2 - nl1 - 1));
    const auto method = header.at("method").get<std::string>();
    if (method == "lora_sft") ck.method = TuneMethod::lora_sft;
    else if (method == "mtl") ck.method = TuneMethod::mtl;
    else throw bad("unknown method " + method);
    ck.network = network_from_json(header.at("network"));
    ck.tune = tune_from_json(header.at("tune"));
    ck.enriched_inputs = header.at("enriched_inputs").get<bool>();
    ck.base_checksum = header.at("base_checksum").get<std::uint64_t>();

    std::size_t offset = nl2 + 1;
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (offset + bytes > data.size()) throw bad("truncated tensor data");
      Matrix m(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          double v;
          std::memcpy(&v, data.data() + offset, sizeof v);
          offset += sizeof v;
          m(i, j) = v;
        }
      }
      tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    if (offset != data.size()) throw bad("trailing bytes after tensor data");

    auto take = [&](const std::string& name) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw bad("missing tensor " + name);
      return it->second;
    };
    for (const auto& a : header.at("adapters")) {
      AdapterState state;
      state.name = a.at("name").get<std::string>();
      state.rank = a.at("rank").get<std::size_t>();
      for (const auto& target : a.at("targets")) {
        const auto t = target.get<std::string>();
        const std::string prefix = "adapter/" + state.name + "/" + t;
        LoraFactors f;
        f.down = Parameter(state.name + "." + t + ".down", take(prefix + "/down"));
        f.up = Parameter(state.name + "." + t + ".up", take(prefix + "/up"));
        state.factors.emplace(t, std::move(f));
      }
      ck.adapters.push_back(std::move(state));
    }
    for (const auto& h : header.at("heads")) {
      auto task = task_from_name(h.get<std::string>());
      if (!task) throw bad("unknown head task");
      TaskHead head;
      head.task = *task;
      const std::string prefix = "head/" + std::string(task_name(*task));
      head.weight = Parameter("head." + std::string(task_name(*task)) + ".weight", take(prefix + "/weight"));
      head.bias = Parameter("head." + std::string(task_name(*task)) + ".bias", take(prefix + "/bias"));
      ck.heads.push_back(std::move(head));
    }
  } catch (const json::exception& e) {
    throw bad(std::string("bad header: ") + e.what());
  }
  return ck;
}

AdaptedModel restore_model(const Checkpoint& ck) {
  auto base = std::make_shared<const ToyNetwork>(ck.network);
  if (base->checksum() != ck.base_checksum) {
    throw InvalidArgument("checkpoint base checksum does not match the rebuilt network");
  }
  AdaptedModel model(base);
  for (const auto& a : ck.adapters) {
    for (const auto& [target, f] : a.factors) {
      const Matrix& w = base->weight(target);
      if (f.down.value.rows() != static_cast<Eigen::Index>(a.rank) ||
          f.down.value.cols() != w.cols() || f.up.value.rows() != w.rows() ||
          f.up.value.cols() != static_cast<Eigen::Index>(a.rank)) {
        throw InvalidArgument("checkpoint adapter " + a.name + "/" + target + " has wrong shape");
      }
    }
    model.adapters().push_back(a);
  }
  for (const auto& h : ck.heads) {
    if (h.weight.value.rows() != static_cast<Eigen::Index>(class_count(h.task)) ||
        h.weight.value.cols() != static_cast<Eigen::Index>(ck.network.d_model)) {
      throw InvalidArgument("checkpoint head has wrong shape");
    }
  }
  return model;
}

std::string model_input(const Prompt& prompt) {
  if (prompt.provenance.aggression_label) {
    return enrichment_sentence(*prompt.provenance.aggression_label) + "\n\n" + prompt.query_text;
  }
  return prompt.query_text;
}

namespace {

class TunedBackend final : public Backend {
 public:
  explicit TunedBackend(BackendDescriptor d)
      : d_(std::move(d)), checkpoint_(load_checkpoint(d_.checkpoint)), model_(restore_model(checkpoint_)) {
    d_.validate();
  }

  const BackendDescriptor& descriptor() const override { return d_; }

  RawResponse complete(const Prompt& prompt) override {
    const auto start = std::chrono::steady_clock::now();
    const TaskHead* head = checkpoint_.head_for(prompt.label_space);
    if (!head) {
      throw InvalidArgument("checkpoint " + d_.checkpoint.string() + " has no " +
                            std::string(task_name(prompt.label_space)) + " head");
    }
    const Label label = predict(model_, *head, model_input(prompt));
    return RawResponse{std::string(display_name(label)),
                       std::chrono::duration_cast<std::chrono::microseconds>(
                           std::chrono::steady_clock::now() - start),
                       d_.backend_id, false};
  }

 private:
  BackendDescriptor d_;
  Checkpoint checkpoint_;
  AdaptedModel model_;
};

}  // namespace

std::unique_ptr<Backend> make_tuned_backend(const BackendDescriptor& descriptor) {
  if (descriptor.kind != BackendKind::tuned_checkpoint) {
    throw InvalidArgument("backend " + descriptor.backend_id + " is not a tuned checkpoint");
  }
  return std::make_unique<TunedBackend>(descriptor);
}

}  // namespace cbd
