#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "cbd/autodiff.hpp"
#include "cbd/corpus.hpp"
#include "cbd/labels.hpp"

namespace cbd {

class Backend;
struct BackendDescriptor;
struct Prompt;

using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TuneConfig {
  std::size_t rank = 8;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  // Glob patterns over weight names such as "layers.0.attn.q".
  std::vector<std::string> target_layers{"*.attn.q", "*.attn.k", "*.attn.v", "*.attn.o"};
  std::uint64_t seed = 0;

  static TuneConfig sft_defaults() { return {}; }
  static TuneConfig mtl_defaults() {
    TuneConfig c;
    c.epochs = 3;
    return c;
  }
  void validate() const;
};

/// Shape of the toy verification network.
struct NetworkConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t d_ff = 32;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Frozen base network
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Small causal transformer: token embedding plus fixed sinusoidal positions,
// then per layer single-head causal self-attention and a tanh MLP, both with
// residual connections. Weights are (d_out × d_in) and applied as x·Wᵀ.
// Instances are immutable once built.
class ToyNetwork {
 public:
  explicit ToyNetwork(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }

  /// Names of weight matrices an adapter may target (embedding excluded).
  std::vector<std::string> attachable_weights() const;
  const Matrix& weight(std::string_view name) const;
  const Matrix& embedding() const { return embedding_; }
  const Matrix& positions() const { return positions_; }

  /// Beginning-of-sequence id 0 followed by hashed lower-cased words,
  /// truncated to max_seq_len.
  std::vector<int> tokenize(std::string_view text) const;

  /// FNV-1a over the bytes of every base tensor.
  std::uint64_t checksum() const;

 private:
  NetworkConfig config_;
  Matrix embedding_;
  Matrix positions_;
  std::map<std::string, Matrix, std::less<>> weights_;
};

// ---------------------------------------------------------------------------
// Adapters and heads
// ---------------------------------------------------------------------------

struct LoraFactors {
  Parameter down;  // rank × d_in, seeded small uniform values
  Parameter up;    // d_out × rank, zeros at attachment
  Matrix delta() const { return up.value * down.value; }
};

struct AdapterState {
  std::string name;
  std::size_t rank = 0;
  std::map<std::string, LoraFactors> factors;  // keyed by target weight name

  std::size_t parameter_count() const;
  std::vector<Parameter*> parameters();
};

struct TaskHead {
  Task task = Task::aggression;
  Parameter weight;  // |classes| × d_model
  Parameter bias;    // 1 × |classes|

  static TaskHead zeros(Task task, std::size_t embedding_dim);
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

/// Matches a weight name against a '*' glob.
bool glob_match(std::string_view pattern, std::string_view name);

/// Count of singular values above rel_tol × the largest one.
std::size_t numerical_rank(const Matrix& m, double rel_tol = 1e-8);

// A frozen base plus any number of adapter sets. Every attached set is
// active in the forward pass: a targeted W behaves as W + Σ Up·Down.
class AdaptedModel {
 public:
  explicit AdaptedModel(std::shared_ptr<const ToyNetwork> base);

  /// Attaches a named adapter set; throws if the selector matches nothing
  /// or the name is taken.
  AdapterState& attach(std::string name, const TuneConfig& config);

  const ToyNetwork& base() const { return *base_; }
  std::shared_ptr<const ToyNetwork> base_ptr() const { return base_; }
  std::deque<AdapterState>& adapters() { return adapters_; }
  const std::deque<AdapterState>& adapters() const { return adapters_; }
  AdapterState& adapter(std::string_view name);

  /// Final-layer hidden states (T × d_model) recorded on `tape`; adapter
  /// gradients flow into the adapter parameters.
  ad::Tape::Var encode(ad::Tape& tape, std::span<const int> tokens,
                       std::span<const bool> attention_mask);

  /// Same computation with no gradient tracking.
  Matrix hidden_states(std::span<const int> tokens,
                       std::span<const bool> attention_mask) const;

  std::vector<Parameter*> trainable_parameters();

 private:
  ad::Tape::Var encode_impl(ad::Tape& tape, std::span<const int> tokens,
                            std::span<const bool> attention_mask, bool track) const;
  ad::Tape::Var linear(ad::Tape& tape, ad::Tape::Var x, const std::string& weight,
                       bool track) const;

  std::shared_ptr<const ToyNetwork> base_;
  std::deque<AdapterState> adapters_;
};

/// Attaches a single adapter set named "default".
AdaptedModel attach_adapters(std::shared_ptr<const ToyNetwork> base,
                             const TuneConfig& config);

/// Final-layer vector of the last unmasked token. Throws if all are masked.
Eigen::RowVectorXd pool_embedding(const Matrix& hidden_states,
                                  std::span<const bool> attention_mask);
std::size_t last_unmasked(std::span<const bool> attention_mask);

/// CE(logits_agg, y_agg) + CE(logits_cb, y_cb), unweighted.
double mtl_joint_loss(const Eigen::RowVectorXd& logits_agg, std::size_t y_agg,
                      const Eigen::RowVectorXd& logits_cb, std::size_t y_cb);

/// Head logits for one text.
Eigen::RowVectorXd head_logits(const AdaptedModel& model, const TaskHead& head,
                               std::string_view text);
Label predict(const AdaptedModel& model, const TaskHead& head, std::string_view text);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

class AdamOptimizer {
 public:
  explicit AdamOptimizer(double learning_rate, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<Parameter* const> params);
  double learning_rate() const { return lr_; }

 private:
  struct Moments {
    Matrix m;
    Matrix v;
  };
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<const Parameter*, Moments> state_;
};

/// Mean CE over `batch` for `head`, gradients accumulated into the adapter
/// and head parameters (not zeroed first).
double task_loss_and_grad(AdaptedModel& model, TaskHead& head,
                          std::span<const LabeledPost> batch);

struct JointLoss {
  double aggression = 0;
  double cyberbullying = 0;
  double joint = 0;
};

/// Mean CE per task summed into one scalar, then a single backward pass.
JointLoss joint_loss_and_grad(AdaptedModel& model, TaskHead& agg_head,
                              TaskHead& cb_head, std::span<const LabeledPost> batch_agg,
                              std::span<const LabeledPost> batch_cb);

// One adapter set and one head trained on a single task.
class SftTrainer {
 public:
  SftTrainer(AdaptedModel& model, TaskHead& head, const TuneConfig& config);
  /// Gradient step on the mean batch CE; returns the pre-step loss.
  double step(std::span<const LabeledPost> batch);

 private:
  AdaptedModel& model_;
  TaskHead& head_;
  AdamOptimizer optimizer_;
};

// Two adapter sets (both active) and one head per task, trained on the sum
// of per-task losses.
class MtlTrainer {
 public:
  MtlTrainer(AdaptedModel& model, TaskHead& agg_head, TaskHead& cb_head,
             const TuneConfig& config);
  JointLoss step(std::span<const LabeledPost> batch_agg,
                 std::span<const LabeledPost> batch_cb);

 private:
  AdaptedModel& model_;
  TaskHead& agg_head_;
  TaskHead& cb_head_;
  AdamOptimizer optimizer_;
};

struct TrainStepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t epoch = 0;
  std::optional<double> aggression_loss;
  std::optional<double> cyberbullying_loss;
  double joint_loss = 0;
};

using MetricsSink = std::function<void(const TrainStepRecord&)>;

/// Line-delimited metrics record: {"step", "epoch", per-task losses, "joint_loss"}.
std::string metrics_line(const TrainStepRecord& record);

/// config.epochs passes over `data` in seeded shuffled mini-batches.
/// Returns the number of optimizer steps taken.
std::size_t train_sft(SftTrainer& trainer, std::span<const LabeledPost> data,
                      const TuneConfig& config, const MetricsSink& sink = {});

/// Each step pairs one aggression and one cyberbullying mini-batch; an epoch
/// lasts until the larger task has been seen once, cycling the smaller.
std::size_t train_mtl(MtlTrainer& trainer, std::span<const LabeledPost> agg_data,
                      std::span<const LabeledPost> cb_data, const TuneConfig& config,
                      const MetricsSink& sink = {});

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

enum class TuneMethod { lora_sft, mtl };
std::string_view tune_method_name(TuneMethod m);

// File layout: the line "CBD-CHECKPOINT 1", one JSON header line (network
// and tune config, method, base checksum, tensor directory), then each
// tensor as row-major little-endian float64 in directory order.
struct Checkpoint {
  TuneMethod method = TuneMethod::lora_sft;
  NetworkConfig network;
  TuneConfig tune;
  bool enriched_inputs = false;  // cyberbullying head trained on enriched inputs
  std::uint64_t base_checksum = 0;
  std::deque<AdapterState> adapters;
  std::vector<TaskHead> heads;

  const TaskHead* head_for(Task task) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the frozen base from the network config and re-attaches the
/// stored adapter sets. Throws if the rebuilt base checksum differs.
AdaptedModel restore_model(const Checkpoint& checkpoint);

/// Text a tuned model sees for a prompt: the query text, preceded by the
/// enrichment sentence and a blank line for enriched prompts.
std::string model_input(const Prompt& prompt);

/// Backend answering with the display name of the head's argmax class.
std::unique_ptr<Backend> make_tuned_backend(const BackendDescriptor& descriptor);

}  // namespace cbd
