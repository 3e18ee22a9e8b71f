#include "tpt/training.hpp"

#include "tpt/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tpt {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
}

// ---------------------------------------------------------------------------

Var masked_cross_entropy(Var logits, const TokenMatrix& targets, const Mask& loss_mask) {
  const RowMatrix& X = logits.mat();
  const Index B = targets.rows();
  const Index T = targets.cols();
  if (loss_mask.rows() != B || loss_mask.cols() != T || X.rows() != B * T) {
    throw DimensionError("masked_cross_entropy: logits " + shape_string(logits.shape()) + " vs targets " +
                         std::to_string(B) + "x" + std::to_string(T));
  }
  const Index count = loss_mask.count();
  if (count == 0) throw DegenerateBatchError("masked_cross_entropy: every target position is masked");

  // Only unmasked rows are read, so PAD-region logits cannot affect the loss.
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(count));
  double total = 0.0;
  for (Index b = 0; b < B; ++b) {
    for (Index t = 0; t < T; ++t) {
      if (!loss_mask(b, t)) continue;
      const Index r = b * T + t;
      const int target = targets(b, t);
      if (target < 0 || target >= X.cols()) {
        throw VocabularyError("masked_cross_entropy: target id " + std::to_string(target) + " out of range");
      }
      const double peak = X.row(r).maxCoeff();
      const double lse = peak + std::log((X.row(r).array() - peak).exp().sum());
      total += lse - X(r, target);
      rows.push_back(r);
    }
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  const int ix = logits.id();
  return logits.tape().record(
      Tensor::scalar(total * inv_count), {logits},
      [ix, rows = std::move(rows), targets, T, inv_count](Tape& t, const RowMatrix& g) {
        RowMatrix* gx = t.grad_sink(ix);
        if (!gx) return;
        const RowMatrix& X = t.value(ix).mat();
        const double scale = g(0, 0) * inv_count;
        for (Index r : rows) {
          const double peak = X.row(r).maxCoeff();
          Eigen::RowVectorXd p = (X.row(r).array() - peak).exp();
          p /= p.sum();
          p(targets(r / T, r % T)) -= 1.0;
          gx->row(r) += scale * p;
        }
      },
      "masked_cross_entropy");
}

double clip_grad_norm(ParamMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericalError("clip_grad_norm: non-finite gradient for " + name);
    sq += g.mat().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& [name, g] : grads) g.mat() *= factor;
  }
  return norm;
}

void adam_step(ParamMap& params, const ParamMap& grads, OptimizerState& state, const TrainConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(config.beta1, t);
  const double correction2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("adam_step: gradient for unknown parameter " + name);
    RowMatrix& theta = it->second.mat();
    if (g.shape() != it->second.shape()) throw DimensionError("adam_step: gradient shape mismatch for " + name);
    auto m_it = state.m.try_emplace(name, Tensor(g.shape())).first;
    auto v_it = state.v.try_emplace(name, Tensor(g.shape())).first;
    RowMatrix& m = m_it->second.mat();
    RowMatrix& v = v_it->second.mat();
    m = config.beta1 * m + (1.0 - config.beta1) * g.mat();
    v = config.beta2 * v + (1.0 - config.beta2) * g.mat().cwiseProduct(g.mat());
    theta.array() -= config.learning_rate * (m.array() / correction1) /
                     ((v.array() / correction2).sqrt() + config.adam_eps);
  }
}

// ---------------------------------------------------------------------------

Trainer::Trainer(Model model, const EncodedCorpus& corpus, TrainConfig config, OptimizerState state)
    : model_(std::move(model)), corpus_(&corpus), config_(config), state_(std::move(state)) {
  config_.validate();
  model_.config.validate();
  if (corpus.size() == 0) throw ConfigError("training corpus is empty");
}

std::vector<std::size_t> Trainer::batch_indices(Index step) const {
  const std::size_t n = corpus_->size();
  const auto batch = static_cast<std::size_t>(config_.batch_size);
  const CounterRng epochs = CounterRng(config_.seed).split("epoch");
  std::vector<std::size_t> out;
  out.reserve(batch);
  // Positions step*B .. step*B+B-1 of the concatenation of per-epoch shuffles.
  std::size_t pos = static_cast<std::size_t>(step) * batch;
  std::size_t loaded_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < batch; ++j, ++pos) {
    const std::size_t epoch = pos / n;
    if (epoch != loaded_epoch) {
      order = shuffled_indices(n, epochs.split(epoch));
      loaded_epoch = epoch;
    }
    out.push_back(order[pos % n]);
  }
  return out;
}

double Trainer::step() {
  const auto indices = batch_indices(state_.step);
  const Batch batch = corpus_->batch(indices);
  Tape tape;
  ParamMap grads;
  double loss_value = 0.0;
  try {
    BoundModel bound(tape, model_, true);
    const Var encoded = encode(bound, batch.src, batch.src_lengths);
    const Var logits = decode(bound, batch.tgt_in, encoded, batch.src.cols(), batch.src_lengths);
    const Var loss = masked_cross_entropy(logits, batch.tgt_out, batch.tgt_loss_mask);
    loss_value = loss.value().item();
    grads = tape.backward(loss);
    clip_grad_norm(grads, config_.clip_norm);
  } catch (const NumericalError& e) {
    throw DivergenceError("step " + std::to_string(state_.step + 1) + ": " + e.what());
  }
  adam_step(model_.params, grads, state_, config_);
  return loss_value;
}

TrainResult train(Model model, const EncodedCorpus& corpus, const TrainConfig& config, const TrainHooks& hooks,
                  OptimizerState optimizer) {
  Trainer trainer(std::move(model), corpus, config, std::move(optimizer));
  TrainResult result;
  double loss_sum = 0.0;
  Index loss_count = 0;
  while (trainer.steps_done() < config.max_steps) {
    try {
      loss_sum += trainer.step();
      ++loss_count;
    } catch (const DivergenceError& e) {
      result.divergence = e.what();
      break;
    }
    const Index s = trainer.steps_done();
    if (s % config.eval_every != 0 && s != config.max_steps) continue;
    MetricRecord record{s, loss_sum / static_cast<double>(loss_count), std::nullopt};
    if (hooks.evaluate) record.accuracy = hooks.evaluate(trainer.model(), s);
    result.metrics.push_back(record);
    loss_sum = 0.0;
    loss_count = 0;
    if (hooks.on_record && !hooks.on_record(record)) break;
  }
  result.model = trainer.model();
  result.optimizer = trainer.optimizer();
  return result;
}

// ---------------------------------------------------------------------------

std::vector<DecodeResult> greedy_decode(const Model& model, std::span<const std::string> questions,
                                        const Vocabulary& vocab, Index max_steps) {
  const auto B = static_cast<Index>(questions.size());
  if (B == 0) return {};
  if (vocab.size() != model.config.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " symbols but the model expects " +
                      std::to_string(model.config.vocab_size));
  }
  std::vector<std::vector<TokenId>> sources;
  Index width = 0;
  for (const std::string& q : questions) {
    std::vector<TokenId> src{Vocabulary::kSos};
    const auto ids = vocab.encode(q);
    src.insert(src.end(), ids.begin(), ids.end());
    width = std::max(width, static_cast<Index>(src.size()));
    sources.push_back(std::move(src));
  }
  TokenMatrix src = TokenMatrix::Constant(B, width, Vocabulary::kPad);
  std::vector<Index> lengths;
  for (Index b = 0; b < B; ++b) {
    const auto& s = sources[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < s.size(); ++t) src(b, static_cast<Index>(t)) = s[t];
    lengths.push_back(static_cast<Index>(s.size()));
  }

  Tape tape;
  BoundModel bound(tape, model, false);
  const Var encoded = encode(bound, src, lengths);
  std::vector<DecodeResult> results(static_cast<std::size_t>(B));
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  TokenMatrix tgt = TokenMatrix::Constant(B, 1, Vocabulary::kSos);
  Index remaining = B;
  for (Index step = 0; step < max_steps && remaining > 0; ++step) {
    const Index T = tgt.cols();
    const RowMatrix logits = decode(bound, tgt, encoded, width, lengths).mat();
    TokenMatrix next(B, T + 1);
    next.leftCols(T) = tgt;
    for (Index b = 0; b < B; ++b) {
      next(b, T) = Vocabulary::kPad;
      if (done[static_cast<std::size_t>(b)]) continue;
      Index best = 0;
      const auto row = logits.row(b * T + T - 1);
      // Strict comparison keeps the lowest id among equal maxima.
      for (Index j = 1; j < row.size(); ++j) {
        if (row(j) > row(best)) best = j;
      }
      const auto id = static_cast<TokenId>(best);
      if (id == Vocabulary::kEos) {
        done[static_cast<std::size_t>(b)] = true;
        --remaining;
        continue;
      }
      // Specials other than EOS show up verbatim so they never match an answer.
      results[static_cast<std::size_t>(b)].text += vocab.symbol(id);
      next(b, T) = id;
    }
    tgt = std::move(next);
  }
  for (Index b = 0; b < B; ++b) results[static_cast<std::size_t>(b)].truncated = !done[static_cast<std::size_t>(b)];
  return results;
}

DecodeResult greedy_decode(const Model& model, const std::string& question, const Vocabulary& vocab,
                           Index max_steps) {
  return greedy_decode(model, std::span<const std::string>(&question, 1), vocab, max_steps).front();
}

double evaluate_exact_match(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab,
                            Index batch_size) {
  if (samples.empty()) throw ContractError("evaluate_exact_match: no samples");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::string> questions;
    for (std::size_t i = begin; i < end; ++i) questions.push_back(samples[i].question);
    const auto decoded = greedy_decode(model, questions, vocab, model.config.max_tgt_len);
    for (std::size_t i = begin; i < end; ++i) {
      const DecodeResult& d = decoded[i - begin];
      correct += !d.truncated && d.text == samples[i].answer;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------

ModelConfig tiny_gradcheck_config() {
  ModelConfig c;
  c.d_z = 16;
  c.d_f = 32;
  c.heads = 2;
  c.layers = 2;
  c.vocab_size = 8;
  return c;
}

ModelGradCheckResult model_grad_check(const ModelGradCheckOptions& options) {
  const ModelConfig& c = options.config;
  c.validate();
  if (options.batch <= 0 || options.src_len < 1 || options.tgt_len < 1) {
    throw ConfigError("gradcheck: batch and lengths must be positive");
  }
  CounterRng rng = CounterRng(options.seed).split("gradcheck");
  auto token = [&] { return static_cast<TokenId>(3 + rng.below(static_cast<std::uint64_t>(c.vocab_size - 3))); };

  // Sample 0 uses the full lengths, later samples are shorter so padding and
  // masking are exercised.
  const Index B = options.batch;
  TokenMatrix src = TokenMatrix::Constant(B, options.src_len, Vocabulary::kPad);
  TokenMatrix tgt_in = TokenMatrix::Constant(B, options.tgt_len, Vocabulary::kPad);
  TokenMatrix tgt_out = TokenMatrix::Constant(B, options.tgt_len, Vocabulary::kPad);
  Mask loss_mask = Mask::Constant(B, options.tgt_len, false);
  std::vector<Index> src_lengths;
  for (Index b = 0; b < B; ++b) {
    const Index s_len = std::max<Index>(1, options.src_len - b);
    const Index t_len = std::max<Index>(1, options.tgt_len - 2 * b);
    src(b, 0) = Vocabulary::kSos;
    for (Index t = 1; t < s_len; ++t) src(b, t) = token();
    tgt_in(b, 0) = Vocabulary::kSos;
    for (Index t = 0; t < t_len; ++t) {
      tgt_out(b, t) = t + 1 == t_len ? Vocabulary::kEos : token();
      loss_mask(b, t) = true;
      if (t + 1 < t_len) tgt_in(b, t + 1) = tgt_out(b, t);
    }
    src_lengths.push_back(s_len);
  }

  ParamMap params = init_params(c, options.seed);
  ParamMap fixed;
  if (options.skip_key_biases) {
    for (auto it = params.begin(); it != params.end();) {
      if (it->first.ends_with(".b_k")) {
        fixed.insert(params.extract(it++));
      } else {
        ++it;
      }
    }
  }
  const ScalarFn loss = [&](Tape& tape, const VarMap& vars) {
    VarMap all = vars;
    for (const auto& [name, value] : fixed) all.emplace(name, tape.parameter(value, name, false));
    const BoundModel bound(tape, c, std::move(all));
    const Var logits = decode(bound, tgt_in, encode(bound, src, src_lengths), src.cols(), src_lengths);
    return masked_cross_entropy(logits, tgt_out, loss_mask);
  };

  ModelGradCheckResult result;
  result.report = grad_check(loss, params, options.eps);
  for (const auto& [name, value] : fixed) result.skipped_coordinates += static_cast<std::size_t>(value.size());

  Tape tape;
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(value, name, true));
  for (const auto& [name, value] : fixed) vars.emplace(name, tape.parameter(value, name, true));
  const ParamMap grads = tape.backward(loss(tape, vars));
  for (const auto& [name, g] : grads) {
    if (name.ends_with(".b_k")) {
      result.max_key_bias_gradient = std::max(result.max_key_bias_gradient, g.mat().cwiseAbs().maxCoeff());
    }
  }
  return result;
}

}  // namespace tpt
