#pragma once

#include "tpt/data.hpp"
#include "tpt/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tpt {

struct TrainConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.995;
  double adam_eps = 1e-8;
  double clip_norm = 0.1;
  Index batch_size = 64;
  Index max_steps = 0;
  Index eval_every = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// All positions of every unmasked row were masked out.
class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Mean of -log softmax(logits)[target] over positions where `loss_mask` is
/// true. `logits` is (B*T) x d_v with rows in sample-major order; masked rows
/// are never read.
Var masked_cross_entropy(Var logits, const TokenMatrix& targets, const Mask& loss_mask);

/// Scales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm. Returns g (before clipping).
double clip_grad_norm(ParamMap& grads, double max_norm = 0.1);

struct OptimizerState {
  ParamMap m;
  ParamMap v;
  Index step = 0;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
void adam_step(ParamMap& params, const ParamMap& grads, OptimizerState& state, const TrainConfig& config);

/// Forward, backward, clip and Adam over a fixed training corpus. The batch
/// for step s is a pure function of (seed, s), so a trainer restored from a
/// checkpoint continues exactly where the original left off.
class Trainer {
 public:
  Trainer(Model model, const EncodedCorpus& corpus, TrainConfig config, OptimizerState state = {});

  /// Runs one step and returns its loss. Throws DivergenceError, leaving the
  /// model and optimizer at their last good values, if the loss or any
  /// gradient is not finite.
  double step();

  Index steps_done() const { return state_.step; }
  const Model& model() const { return model_; }
  const OptimizerState& optimizer() const { return state_; }
  const TrainConfig& config() const { return config_; }

  /// Sample indices of the batch used at `step` (0-based).
  std::vector<std::size_t> batch_indices(Index step) const;

 private:
  Model model_;
  const EncodedCorpus* corpus_;
  TrainConfig config_;
  OptimizerState state_;
};

struct MetricRecord {
  Index step = 0;
  double loss = 0.0;  // mean training loss since the previous record
  std::optional<double> accuracy;

  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

struct TrainHooks {
  /// Called every eval_every steps and after the last step; the result is
  /// logged as the record's accuracy.
  std::function<std::optional<double>(const Model&, Index step)> evaluate;
  /// Return false to stop training after this record.
  std::function<bool(const MetricRecord&)> on_record;
};

struct TrainResult {
  Model model;
  OptimizerState optimizer;
  std::vector<MetricRecord> metrics;
  std::optional<std::string> divergence;  // set when training aborted on a non-finite loss
};

/// Continues from `optimizer.step` up to config.max_steps.
TrainResult train(Model model, const EncodedCorpus& corpus, const TrainConfig& config, const TrainHooks& hooks = {},
                  OptimizerState optimizer = {});

struct DecodeResult {
  std::string text;
  bool truncated = false;  // max_steps reached before EOS
};

/// Greedy decoding of a batch of questions: feed the argmax symbol (lowest
/// id on ties) until EOS or `max_steps` symbols.
std::vector<DecodeResult> greedy_decode(const Model& model, std::span<const std::string> questions,
                                        const Vocabulary& vocab, Index max_steps);
DecodeResult greedy_decode(const Model& model, const std::string& question, const Vocabulary& vocab, Index max_steps);

/// Fraction of samples whose greedy decode equals the answer exactly.
/// Throws ContractError on an empty sample list.
double evaluate_exact_match(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab,
                            Index batch_size = 256);

/// Full-model gradient check: masked cross-entropy of a random teacher-forced
/// batch against central differences over every parameter.
struct ModelGradCheckOptions {
  ModelConfig config;
  std::uint64_t seed = 0;
  Index batch = 2;
  Index src_len = 6;
  Index tgt_len = 6;
  double eps = 1e-5;
  /// Key biases have an identically zero gradient (a softmax row is
  /// invariant to adding the same score everywhere), so their central
  /// differences are pure rounding noise. When set they are held fixed and
  /// only their analytic gradient is reported.
  bool skip_key_biases = false;
};

struct ModelGradCheckResult {
  GradCheckReport report;
  std::size_t skipped_coordinates = 0;
  double max_key_bias_gradient = 0.0;  // |analytic| over all key biases
};

/// d_z=16, d_f=32, H=2, L=2 over an 8-symbol vocabulary.
ModelConfig tiny_gradcheck_config();
ModelGradCheckResult model_grad_check(const ModelGradCheckOptions& options);

// ---------------------------------------------------------------------------
// Persistence.

struct Checkpoint {
  Model model;
  Vocabulary vocab;
  OptimizerState optimizer;
  nlohmann::ordered_json run_config = nlohmann::ordered_json::object();
};

inline constexpr char kCheckpointMagic[8] = {'T', 'P', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Magic, uint32 version, uint64 header length, JSON header, then the arrays
/// as little-endian doubles in directory order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, unsupported version, or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One JSON object per line: {"step", "loss", "accuracy"}; accuracy is null
/// when not evaluated. A non-null `run_config` is written first as a
/// {"run_config": ...} line.
void write_metrics(const std::filesystem::path& path, std::span<const MetricRecord> records,
                   const nlohmann::ordered_json& run_config = nullptr);
std::vector<MetricRecord> read_metrics(const std::filesystem::path& path);

}  // namespace tpt
