// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any selected criterion fails.

#include "tpt/analysis.hpp"
#include "tpt/data.hpp"
#include "tpt/model.hpp"
#include "tpt/random.hpp"
#include "tpt/training.hpp"

#include "reference_transformer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

namespace tpt {
namespace {

namespace fs = std::filesystem;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream s;
  s << std::setprecision(4);
  (s << ... << args);
  return s.str();
}

TokenMatrix random_tokens(Index batch, Index length, Index vocab, CounterRng& rng) {
  TokenMatrix t(batch, length);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<int>(rng.below(vocab));
  return t;
}

// Gradient fidelity ----------------------------------------------------------

Outcome gradient_fidelity() {
  ModelGradCheckOptions options;
  options.config = tiny_gradcheck_config();
  const auto start = Clock::now();
  const ModelGradCheckResult full = model_grad_check(options);
  const double elapsed = seconds_since(start);
  const GradCheckReport& r = full.report;

  // Diagnostic only: the same check with the key biases held fixed.
  options.skip_key_biases = true;
  const ModelGradCheckResult held = model_grad_check(options);

  return {r.max_rel_error < 1e-4 && elapsed < 60.0,
          cat("max relative error ", r.max_rel_error, " at ", r.worst_param, "[", r.worst_index, "] (analytic ",
              r.worst_analytic, ", numeric ", r.worst_numeric, ") over ", r.coordinates, " coordinates in ", elapsed,
              " s; limit 1e-4. Without key biases: ", held.report.max_rel_error, " at ", held.report.worst_param,
              ", key-bias |grad| <= ", held.max_key_bias_gradient)};
}

// Ones-role reduction --------------------------------------------------------

Outcome ones_role_reduction() {
  ModelConfig c;
  c.d_z = 16;
  c.d_f = 32;
  c.heads = 4;
  c.layers = 2;
  c.vocab_size = 11;
  c.role_binding = false;
  const Index batch = 3, src_len = 7, tgt_len = 5;
  double worst_enc = 0.0, worst_dec = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Model model{c, init_params(c, seed)};
    CounterRng rng = CounterRng(seed).split("ones-role");
    const TokenMatrix src = random_tokens(batch, src_len, c.vocab_size, rng);
    const TokenMatrix tgt = random_tokens(batch, tgt_len, c.vocab_size, rng);
    std::vector<Index> lengths;
    for (Index b = 0; b < batch; ++b) lengths.push_back(1 + static_cast<Index>(rng.below(src_len)));
    lengths[0] = src_len;
    Tape tape;
    BoundModel bound(tape, model, false);
    const Var enc = encode(bound, src, lengths);
    const RowMatrix logits = decode(bound, tgt, enc, src_len, lengths).mat();
    for (Index b = 0; b < batch; ++b) {
      const std::vector<int> s(src.row(b).data(), src.row(b).data() + lengths[b]);
      const std::vector<int> t(tgt.row(b).data(), tgt.row(b).data() + tgt_len);
      const reference::Mat ref_enc = reference::encode(c, model.params, s);
      worst_enc = std::max(worst_enc, (enc.mat().middleRows(b * src_len, lengths[b]) - ref_enc).cwiseAbs().maxCoeff());
      const reference::Mat ref_logits = reference::decode_logits(c, model.params, t, ref_enc);
      worst_dec = std::max(worst_dec, (logits.middleRows(b * tgt_len, tgt_len) - ref_logits).cwiseAbs().maxCoeff());
    }
  }
  return {worst_enc <= 1e-12 && worst_dec <= 1e-12,
          cat("20 seeds, max |encoder - reference| ", worst_enc, ", max |decoder logits - reference| ", worst_dec,
              "; limit 1e-12")};
}

// Binding ambiguity ----------------------------------------------------------

Outcome binding_ambiguity() {
  const auto start = Clock::now();
  const BindingReport r = binding_ambiguity_demo(8, 2024, 1000);
  const double elapsed = seconds_since(start);
  const bool pass = r.trials == 1000 && r.standard_collisions == r.trials && r.max_standard_difference == 0.0 &&
                    r.role_collisions == 0 && r.min_role_difference > 1e-9 && elapsed < 10.0;
  return {pass, cat("d=8, ", r.trials, " trials: standard identical in ", r.standard_collisions,
                    " (max difference ", r.max_standard_difference, "), role binding min difference ",
                    r.min_role_difference, ", ", elapsed, " s")};
}

// Appendix identity ----------------------------------------------------------

Outcome appendix_identity() {
  const CompressionReport r = hadamard_compression_check(64, 16, 99, 1000);
  return {r.max_general_deviation < 1e-12,
          cat("d_k=16, 1000 trials: max deviation ", r.max_general_deviation, " (orthonormal maps ",
              r.max_orthonormal_deviation, "); limit 1e-12")};
}

// Causality ------------------------------------------------------------------

Outcome causality() {
  ModelConfig c;
  c.d_z = 16;
  c.d_f = 32;
  c.heads = 2;
  c.layers = 2;
  c.vocab_size = 13;
  const Index batch = 2, src_len = 6, tgt_len = 7;
  Index changed_rows = 0, compared_rows = 0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const Model model{c, init_params(c, 500 + trial)};
    CounterRng rng = CounterRng(trial).split("causality");
    const TokenMatrix src = random_tokens(batch, src_len, c.vocab_size, rng);
    const TokenMatrix tgt = random_tokens(batch, tgt_len, c.vocab_size, rng);
    const std::vector<Index> lengths{src_len, 1 + static_cast<Index>(rng.below(src_len))};
    const Index pivot = static_cast<Index>(rng.below(tgt_len - 1));
    TokenMatrix perturbed = tgt;
    for (Index b = 0; b < batch; ++b) {
      for (Index t = pivot + 1; t < tgt_len; ++t) {
        perturbed(b, t) = static_cast<int>((tgt(b, t) + 1 + rng.below(c.vocab_size - 1)) % c.vocab_size);
      }
    }
    auto logits = [&](const TokenMatrix& t) {
      Tape tape;
      BoundModel bound(tape, model, false);
      return RowMatrix(decode(bound, t, encode(bound, src, lengths), src_len, lengths).mat());
    };
    const RowMatrix before = logits(tgt);
    const RowMatrix after = logits(perturbed);
    for (Index b = 0; b < batch; ++b) {
      for (Index t = 0; t <= pivot; ++t, ++compared_rows) {
        if (before.row(b * tgt_len + t) != after.row(b * tgt_len + t)) ++changed_rows;
      }
    }
  }
  return {changed_rows == 0, cat("100 random models/inputs, ", compared_rows, " past-step logit rows compared, ",
                                 changed_rows, " changed")};
}

// Attention normalization (run inside the toy training) ----------------------

struct AlphaAudit {
  Index checks = 0;
  Index records = 0;
  double worst_row_sum = 0.0;
  Index nonzero_masked = 0;
  Index missing_records = 0;

  void inspect(const Model& model, const Batch& batch) {
    ++checks;
    Tape tape;
    BoundModel bound(tape, model, false);
    AttentionTrace trace;
    const Var enc = encode(bound, batch.src, batch.src_lengths, &trace);
    decode(bound, batch.tgt_in, enc, batch.src.cols(), batch.src_lengths, &trace);
    const auto expected = static_cast<std::size_t>(3 * model.config.layers * model.config.heads * batch.size());
    if (trace.records.size() != expected) ++missing_records;
    for (const HeadRecord& r : trace.records) {
      ++records;
      for (Index i = 0; i < r.alpha.rows(); ++i) {
        worst_row_sum = std::max(worst_row_sum, std::abs(r.alpha.row(i).sum() - 1.0));
        for (Index j = 0; j < r.alpha.cols(); ++j) {
          const bool masked = r.site == Site::DecoderSelf ? j > i : j >= batch.src_lengths[r.sample];
          if (masked && r.alpha(i, j) != 0.0) ++nonzero_masked;
        }
      }
    }
  }

  Outcome outcome() const {
    return {checks > 0 && missing_records == 0 && worst_row_sum <= 1e-6 && nonzero_masked == 0,
            cat(checks, " evaluations, ", records, " head maps over all layers/heads/sites: max |row sum - 1| ",
                worst_row_sum, ", non-zero masked entries ", nonzero_masked)};
  }
};

// Toy-task learning ----------------------------------------------------------

struct ToyRun {
  Model model;
  Vocabulary vocab;
  std::vector<Sample> held_out;
  Outcome learning;
  AlphaAudit audit;
};

// Flat rate; 1e-4 (the full-scale setting) barely moves this model within 20k steps at batch 64.
constexpr double kToyLearningRate = 3e-3;

ToyRun toy_task_learning(const fs::path& out_dir) {
  const auto start = Clock::now();
  DatasetSplit split = generate_split("add_sub", 50000, 2000, 1);
  std::vector<Sample> everything = split.train;
  everything.insert(everything.end(), split.held_out.begin(), split.held_out.end());
  ToyRun run{.model = {}, .vocab = Vocabulary::build(everything), .held_out = split.held_out, .learning = {}, .audit = {}};

  ModelConfig c;
  c.d_z = 64;
  c.d_f = 256;
  c.heads = 4;
  c.layers = 2;
  c.vocab_size = run.vocab.size();
  const SequenceLimits limits{c.max_src_len, c.max_tgt_len};
  const EncodedCorpus corpus(split.train, run.vocab, limits);
  const EncodedCorpus held_corpus(std::span(split.held_out).first(64), run.vocab, limits);
  std::vector<std::size_t> audit_rows(64);
  std::iota(audit_rows.begin(), audit_rows.end(), 0);
  const Batch audit_batch = held_corpus.batch(audit_rows);

  TrainConfig t;
  t.learning_rate = kToyLearningRate;
  t.batch_size = 64;
  t.max_steps = 20000;
  t.eval_every = 1000;
  t.seed = 1;

  const Model initial{c, init_params(c, t.seed)};
  run.audit.inspect(initial, audit_batch);

  double best = 0.0;
  TrainHooks hooks;
  hooks.evaluate = [&](const Model& m, Index) -> std::optional<double> {
    run.audit.inspect(m, audit_batch);
    return evaluate_exact_match(m, split.held_out, run.vocab);
  };
  hooks.on_record = [&](const MetricRecord& r) {
    best = std::max(best, r.accuracy.value_or(0.0));
    std::cout << "  add_sub step " << r.step << " loss " << r.loss << " held-out exact match "
              << r.accuracy.value_or(0.0) << " (" << seconds_since(start) << " s)\n"
              << std::flush;
    return r.accuracy.value_or(0.0) < 0.95;
  };
  TrainResult result = train(initial, corpus, t, hooks);
  const double elapsed = seconds_since(start);
  run.model = result.model;

  fs::create_directories(out_dir);
  Checkpoint checkpoint{result.model, run.vocab, result.optimizer, {}};
  checkpoint.run_config["train"] = to_json(t);
  save_checkpoint(out_dir / "add_sub.ckpt", checkpoint);
  write_metrics(out_dir / "add_sub_metrics.jsonl", result.metrics, checkpoint.run_config);

  const double final_accuracy = result.metrics.empty() ? 0.0 : result.metrics.back().accuracy.value_or(0.0);
  const bool reached = !result.divergence && final_accuracy >= 0.95 && result.optimizer.step <= 20000;
  run.learning = {reached && elapsed <= 45 * 60.0,
                  cat("held-out exact match ", final_accuracy, " (best ", best, ") after ", result.optimizer.step,
                      " steps in ", elapsed / 60.0, " min; need >= 0.95 within 20000 steps",
                      result.divergence ? "; diverged: " + *result.divergence : std::string())};
  return run;
}

// Relative advantage ---------------------------------------------------------

Outcome relative_advantage() {
  const DatasetSplit split = generate_split("nested_fraction", 20000, 1000, 6);
  std::vector<Sample> everything = split.train;
  everything.insert(everything.end(), split.held_out.begin(), split.held_out.end());
  const Vocabulary vocab = Vocabulary::build(everything);

  ModelConfig c;
  c.d_z = 32;
  c.d_f = 128;
  c.heads = 4;
  c.layers = 2;
  c.vocab_size = vocab.size();
  const EncodedCorpus corpus(split.train, vocab, {c.max_src_len, c.max_tgt_len});
  TrainConfig t;
  t.learning_rate = kToyLearningRate;
  t.batch_size = 32;
  t.max_steps = 4000;

  std::vector<double> gaps;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    t.seed = 100 + seed;
    double accuracy[2];
    for (int role_binding = 0; role_binding < 2; ++role_binding) {
      ModelConfig mc = c;
      mc.role_binding = role_binding == 1;
      const TrainResult r = train(Model{mc, init_params(mc, t.seed)}, corpus, t);
      accuracy[role_binding] = r.divergence ? 0.0 : evaluate_exact_match(r.model, split.held_out, vocab);
    }
    gaps.push_back(accuracy[1] - accuracy[0]);
    per_seed += cat(per_seed.empty() ? "" : ", ", accuracy[1], "/", accuracy[0]);
    std::cout << "  nested_fraction seed pair " << seed << ": TP " << accuracy[1] << ", baseline " << accuracy[0]
              << "\n"
              << std::flush;
  }
  std::sort(gaps.begin(), gaps.end());
  const double median = gaps[2];
  return {median >= -0.02, cat("median TP - baseline ", median * 100.0, " pp over 5 seed pairs (TP/baseline: ",
                               per_seed, "); fails below -2 pp")};
}

// Probe pipeline -------------------------------------------------------------

Outcome probe_pipeline(const ToyRun& toy) {
  const ProbeResult r = reconstruction_probe(toy.model, toy.held_out, toy.vocab, 100);
  bool finite = static_cast<Index>(r.heads.size()) == toy.model.config.heads;
  std::string per_head;
  for (const HeadProbe& h : r.heads) {
    finite = finite && std::isfinite(h.mse);
    per_head += cat(per_head.empty() ? "" : ", ", "h", h.head, " ", h.mse);
  }

  // One head whose value map is the identity sees the full state.
  ModelConfig c;
  c.d_z = 16;
  c.d_f = 32;
  c.heads = 1;
  c.layers = 2;
  c.vocab_size = toy.vocab.size();
  Model identity{c, init_params(c, 3)};
  identity.params[head_param_name(Site::EncoderSelf, c.layers - 1, 0, "W_v")].mat().setIdentity();
  identity.params[head_param_name(Site::EncoderSelf, c.layers - 1, 0, "b_v")].mat().setZero();
  const double identity_mse = reconstruction_probe(identity, toy.held_out, toy.vocab, 100).mean_mse;

  return {finite && identity_mse < 1e-9,
          cat("per-head MSE ", per_head, " (mean ", r.mean_mse, " over ", r.positions,
              " positions; full-scale references ~0.017 TP / ~0.009 baseline); identity fixture MSE ", identity_mse)};
}

// Clustering pipeline --------------------------------------------------------

Outcome clustering_pipeline(const Model& model, const Vocabulary& vocab, std::span<const Sample> samples) {
  const Traces traces =
      collect_traces(model, samples.first(std::min<std::size_t>(samples.size(), 300)), vocab, model.config.layers - 1, 0);
  const RowMatrix roles = role_matrix(traces.roles);
  KMeansOptions options;
  options.k = 20;
  options.seed = 17;
  const ClusterAssignment a = kmeans(roles, options);
  const ClusterAssignment b = kmeans(roles, options);
  const bool deterministic = a.labels == b.labels && a.centroids == b.centroids && a.inertia == b.inertia &&
                             a.inertia_history == b.inertia_history;
  bool monotone = true;
  for (std::size_t i = 1; i < a.inertia_history.size(); ++i) monotone = monotone && a.inertia_history[i] <= a.inertia_history[i - 1];

  // Two tight clouds far apart.
  CounterRng rng(23);
  std::normal_distribution<double> noise(0.0, 0.1);
  RowMatrix clouds(200, 5);
  std::vector<Index> truth(200);
  for (Index i = 0; i < 200; ++i) {
    truth[i] = i % 2;
    for (Index j = 0; j < 5; ++j) clouds(i, j) = (truth[i] == 0 ? -5.0 : 5.0) + noise(rng);
  }
  KMeansOptions two;
  two.k = 2;
  two.seed = 4;
  const ClusterAssignment split = kmeans(clouds, two);
  Index agree = 0;
  for (Index i = 0; i < 200; ++i) agree += (split.labels[i] == split.labels[0]) == (truth[i] == truth[0]);

  return {deterministic && monotone && agree == 200,
          cat(roles.rows(), " role vectors, k=20: ", deterministic ? "deterministic" : "NOT deterministic",
              ", inertia ", monotone ? "non-increasing" : "INCREASED", " over ", a.inertia_history.size(),
              " iterations (final ", a.inertia, "); two-cloud fixture ", agree, "/200 assigned correctly")};
}

// Persistence ----------------------------------------------------------------

Outcome persistence(const fs::path& out_dir) {
  const DatasetSplit split = generate_split("add_sub", 2000, 64, 11);
  std::vector<Sample> everything = split.train;
  everything.insert(everything.end(), split.held_out.begin(), split.held_out.end());
  const Vocabulary vocab = Vocabulary::build(everything);
  ModelConfig c;
  c.d_z = 16;
  c.d_f = 32;
  c.heads = 2;
  c.layers = 2;
  c.vocab_size = vocab.size();
  const SequenceLimits limits{c.max_src_len, c.max_tgt_len};
  const EncodedCorpus corpus(split.train, vocab, limits);
  TrainConfig t;
  t.batch_size = 16;
  t.seed = 8;
  t.learning_rate = 1e-3;

  Trainer straight(Model{c, init_params(c, t.seed)}, corpus, t);
  std::vector<double> straight_losses;
  for (int i = 0; i < 60; ++i) straight_losses.push_back(straight.step());

  Trainer first(Model{c, init_params(c, t.seed)}, corpus, t);
  std::vector<double> resumed_losses;
  for (int i = 0; i < 25; ++i) resumed_losses.push_back(first.step());
  fs::create_directories(out_dir);
  const fs::path path = out_dir / "persistence.ckpt";
  save_checkpoint(path, Checkpoint{first.model(), vocab, first.optimizer(), {}});
  const Checkpoint loaded = load_checkpoint(path);

  // Forward outputs of the saved and loaded models.
  const EncodedCorpus held(split.held_out, vocab, limits);
  std::vector<std::size_t> rows(split.held_out.size());
  std::iota(rows.begin(), rows.end(), 0);
  const Batch batch = held.batch(rows);
  auto forward = [&](const Model& m) {
    Tape tape;
    BoundModel bound(tape, m, false);
    return RowMatrix(decode(bound, batch.tgt_in, encode(bound, batch.src, batch.src_lengths), batch.src.cols(),
                            batch.src_lengths)
                         .mat());
  };
  const bool forward_identical = forward(first.model()) == forward(loaded.model) && loaded.vocab == vocab;

  Trainer second(loaded.model, corpus, t, loaded.optimizer);
  for (int i = 25; i < 60; ++i) resumed_losses.push_back(second.step());
  Index matching_steps = 0;
  for (std::size_t i = 0; i < straight_losses.size(); ++i) matching_steps += straight_losses[i] == resumed_losses[i];
  const bool resumed_identical = matching_steps == 60 && second.model().params == straight.model().params &&
                                 second.optimizer() == straight.optimizer();

  return {forward_identical && resumed_identical,
          cat("reloaded forward outputs ", forward_identical ? "bitwise identical" : "DIFFER", "; resumed at step 25: ",
              matching_steps, "/60 step losses identical, final parameters and optimizer ",
              resumed_identical ? "identical" : "DIFFER")};
}

}  // namespace
}  // namespace tpt

int main(int argc, char** argv) {
  using namespace tpt;
  CLI::App app{"acceptance run"};
  std::vector<int> only;
  std::string out = "acceptance_artifacts";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--out", out, "directory for checkpoints and metrics")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) {
    for (int i = 1; i <= 11; ++i) selected.insert(i);
  }
  const auto wants = [&](int i) { return selected.count(i) > 0; };

  const char* names[] = {"",
                         "gradient fidelity",
                         "ones-role reduction",
                         "binding ambiguity",
                         "appendix identity",
                         "toy-task learning",
                         "relative advantage",
                         "causality",
                         "attention normalization",
                         "probe pipeline",
                         "clustering pipeline",
                         "persistence"};
  std::map<int, Outcome> outcomes;
  const auto record = [&](int i, Outcome o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i << " (" << names[i] << "): " << o.detail << "\n"
              << std::flush;
    outcomes[i] = std::move(o);
  };
  const auto guarded = [&](int i, auto&& fn) {
    try {
      record(i, fn());
    } catch (const std::exception& e) {
      record(i, {false, std::string("threw: ") + e.what()});
    }
  };

  if (wants(1)) guarded(1, gradient_fidelity);
  if (wants(2)) guarded(2, ones_role_reduction);
  if (wants(3)) guarded(3, binding_ambiguity);
  if (wants(4)) guarded(4, appendix_identity);
  if (wants(7)) guarded(7, causality);
  if (wants(11)) guarded(11, [&] { return persistence(out); });

  std::optional<ToyRun> toy;
  if (wants(5) || wants(8) || wants(9)) {
    try {
      toy = toy_task_learning(out);
    } catch (const std::exception& e) {
      for (int i : {5, 8, 9}) {
        if (wants(i)) record(i, {false, std::string("toy training threw: ") + e.what()});
      }
    }
  }
  if (toy) {
    if (wants(5)) record(5, toy->learning);
    if (wants(8)) record(8, toy->audit.outcome());
    if (wants(9)) guarded(9, [&] { return probe_pipeline(*toy); });
  }
  if (wants(10)) {
    guarded(10, [&] {
      if (toy) return clustering_pipeline(toy->model, toy->vocab, toy->held_out);
      const std::vector<Sample> samples = generate_dataset("add_sub", 300, 5);
      const Vocabulary vocab = Vocabulary::build(samples);
      ModelConfig c;
      c.vocab_size = vocab.size();
      return clustering_pipeline(Model{c, init_params(c, 5)}, vocab, samples);
    });
  }
  if (wants(6)) guarded(6, relative_advantage);

  int failed = 0;
  std::cout << "\nsummary:";
  for (const auto& [i, o] : outcomes) {
    std::cout << " " << i << "=" << (o.pass ? "PASS" : "FAIL");
    failed += !o.pass;
  }
  std::cout << "\n";
  return failed == 0 ? 0 : 1;
}
