#include "tpt/cli.hpp"

#include "tpt/analysis.hpp"
#include "tpt/errors.hpp"
#include "tpt/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace tpt {
namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Reference values of the full-scale probe, reported next to ours.
constexpr double kReferenceProbeTp = 0.017;
constexpr double kReferenceProbeBaseline = 0.009;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing", path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("write failed", path.string());
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory", dir.string());
}

// Pulls `--config FILE` out of the arguments and splices the file's values in
// right after the subcommand names, so flags given later override them.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file name");
      file = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].starts_with("--config=")) {
      file = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!file) return args;
  std::ifstream in(*file);
  if (!in) throw IoError("cannot open config file", *file);
  std::vector<std::string> injected;
  for (const CLI::ConfigItem& item : CLI::ConfigTOML().from_config(in)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    for (const std::string& value : item.inputs) {
      // Empty strings stand for unset paths; "--name=" would swallow the next token.
      if (!value.empty()) injected.push_back("--" + item.name + "=" + value);
    }
  }
  std::size_t insert_at = 0;
  while (insert_at < args.size() && !args[insert_at].starts_with("-")) ++insert_at;
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(insert_at), injected.begin(), injected.end());
  return args;
}

struct ModelFlags {
  ModelConfig config;

  void add(CLI::App* app) {
    app->add_option("--d-z", config.d_z, "model width")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--d-f", config.d_f, "feed-forward width")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--heads", config.heads, "attention heads")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--layers", config.layers, "layers per stack")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--max-src-len", config.max_src_len, "longest question in symbols")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--max-tgt-len", config.max_tgt_len, "longest answer in symbols")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    app->add_option("--role-binding", config.role_binding, "false trains the standard Transformer baseline")
        ->capture_default_str();
    app->add_option("--ln-eps", config.ln_eps, "layer-norm epsilon")->capture_default_str();
  }
};

struct TrainFlags {
  TrainConfig config;

  void add(CLI::App* app) {
    app->add_option("--lr", config.learning_rate, "Adam learning rate")->capture_default_str();
    app->add_option("--beta1", config.beta1)->capture_default_str();
    app->add_option("--beta2", config.beta2)->capture_default_str();
    app->add_option("--adam-eps", config.adam_eps)->capture_default_str();
    app->add_option("--clip-norm", config.clip_norm, "global gradient-norm clip")->capture_default_str();
    app->add_option("--batch-size", config.batch_size)->capture_default_str();
    app->add_option("--max-steps", config.max_steps, "train until this many steps have run")->capture_default_str();
    app->add_option("--eval-every", config.eval_every, "steps between metric records")->capture_default_str();
    app->add_option("--seed", config.seed, "initialization and batch-order seed")->capture_default_str();
  }
};

// Every run leaves its resolved flags next to its outputs.
void save_resolved(const CLI::App* app, const fs::path& where) {
  write_text(where, app->config_to_str(true, false));
}

fs::path resolved_path_for_file(const fs::path& output) { return fs::path(output.string() + ".run.toml"); }

ordered_json run_config_json(const CLI::App* app, const std::string& command) {
  return {{"command", command}, {"resolved", app->config_to_str(true, false)}};
}

std::string percent(double fraction) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * fraction << "%";
  return s.str();
}

// ---------------------------------------------------------------------------

struct GenData {
  std::string module;
  Index n = 0;
  std::uint64_t seed = 0;
  std::string out;
  Index held_out = 0;
  std::string held_out_out;

  void add(CLI::App* app) {
    std::vector<std::string> modules(std::begin(kModules), std::end(kModules));
    app->add_option("--module", module, "problem family")->required()->check(CLI::IsMember(modules));
    app->add_option("--n", n, "number of samples")->required()->check(CLI::PositiveNumber);
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--out", out, "output JSONL file")->required();
    app->add_option("--held-out", held_out, "also draw this many distinct held-out questions")->capture_default_str();
    app->add_option("--held-out-out", held_out_out, "file for the held-out samples");
  }

  int run(const CLI::App* app, std::ostream& log) const {
    if (held_out > 0) {
      if (held_out_out.empty()) throw UsageError("--held-out needs --held-out-out");
      const DatasetSplit split = generate_split(module, n, held_out, seed);
      write_jsonl(out, split.train);
      write_jsonl(held_out_out, split.held_out);
      log << "wrote " << split.train.size() << " samples to " << out << " and " << split.held_out.size()
          << " held-out samples to " << held_out_out << "\n";
    } else {
      const auto samples = generate_dataset(module, n, seed);
      write_jsonl(out, samples);
      log << "wrote " << samples.size() << " samples to " << out << "\n";
    }
    save_resolved(app, resolved_path_for_file(out));
    return kExitOk;
  }
};

struct Train {
  std::string data;
  std::string eval_data;
  std::string out;
  std::string resume;
  double target_accuracy = 0.0;
  Index eval_limit = 0;
  ModelFlags model;
  TrainFlags train;

  void add(CLI::App* app) {
    app->add_option("--data", data, "training JSONL")->required()->check(CLI::ExistingFile);
    app->add_option("--eval-data", eval_data, "held-out JSONL scored at every record")->check(CLI::ExistingFile);
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--resume", resume, "continue from this checkpoint")->check(CLI::ExistingFile);
    app->add_option("--target-accuracy", target_accuracy, "stop once held-out exact match reaches this (0 = never)")
        ->capture_default_str();
    app->add_option("--eval-limit", eval_limit, "score only the first N held-out samples (0 = all)")
        ->capture_default_str();
    model.add(app);
    train.add(app);
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const auto samples = read_jsonl(data);
    std::vector<Sample> eval_samples;
    if (!eval_data.empty()) eval_samples = read_jsonl(eval_data);
    if (eval_limit > 0 && static_cast<std::size_t>(eval_limit) < eval_samples.size()) {
      eval_samples.resize(static_cast<std::size_t>(eval_limit));
    }
    train.config.validate();
    ensure_directory(out);

    Model initial;
    Vocabulary vocab;
    OptimizerState optimizer;
    if (!resume.empty()) {
      Checkpoint ckpt = load_checkpoint(resume);
      initial = std::move(ckpt.model);
      vocab = std::move(ckpt.vocab);
      optimizer = std::move(ckpt.optimizer);
      log << "resuming from " << resume << " at step " << optimizer.step << "\n";
    } else {
      std::vector<Sample> all = samples;
      all.insert(all.end(), eval_samples.begin(), eval_samples.end());
      vocab = Vocabulary::build(all);
      ModelConfig config = model.config;
      config.vocab_size = vocab.size();
      config.validate();
      initial = Model{config, init_params(config, train.config.seed)};
    }
    const ModelConfig& config = initial.config;
    const EncodedCorpus corpus(samples, vocab, {config.max_src_len, config.max_tgt_len});

    const fs::path metrics_path = fs::path(out) / "metrics.jsonl";
    std::vector<MetricRecord> history;
    if (!resume.empty() && fs::exists(metrics_path)) {
      for (const MetricRecord& r : read_metrics(metrics_path)) {
        if (r.step <= optimizer.step) history.push_back(r);
      }
    }

    TrainHooks hooks;
    if (!eval_samples.empty()) {
      hooks.evaluate = [&](const Model& m, Index) -> std::optional<double> {
        return evaluate_exact_match(m, eval_samples, vocab);
      };
    }
    hooks.on_record = [&](const MetricRecord& r) {
      log << "step " << r.step << " loss " << r.loss;
      if (r.accuracy) log << " exact_match " << percent(*r.accuracy);
      log << std::endl;
      return !(target_accuracy > 0.0 && r.accuracy && *r.accuracy >= target_accuracy);
    };

    log << "training " << (config.role_binding ? "TP-Transformer" : "Transformer") << " on " << samples.size()
        << " samples, vocabulary " << vocab.size() << "\n";
    TrainResult result = ::tpt::train(initial, corpus, train.config, hooks, optimizer);
    history.insert(history.end(), result.metrics.begin(), result.metrics.end());

    ordered_json run_config = run_config_json(app, "train");
    run_config["model"] = to_json(config);
    run_config["train"] = to_json(train.config);
    const fs::path ckpt_path = fs::path(out) / "model.ckpt";
    save_checkpoint(ckpt_path, {result.model, vocab, result.optimizer, run_config});
    write_metrics(metrics_path, history, run_config);
    save_resolved(app, fs::path(out) / "run_config.toml");
    log << "saved " << ckpt_path.string() << " at step " << result.optimizer.step << "\n";
    if (result.divergence) {
      log << "diverged: " << *result.divergence << " (checkpoint holds the last good state)\n";
      return kExitFailed;
    }
    return kExitOk;
  }
};

struct Eval {
  std::string data;
  std::string ckpt;
  Index batch_size = 256;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--data", data, "JSONL to score")->required()->check(CLI::ExistingFile);
    app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_option("--out", out, "optional JSON report");
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const Checkpoint c = load_checkpoint(ckpt);
    const auto samples = read_jsonl(data);
    const double accuracy = evaluate_exact_match(c.model, samples, c.vocab, batch_size);
    const auto correct = static_cast<Index>(std::llround(accuracy * static_cast<double>(samples.size())));
    log << "exact_match " << percent(accuracy) << " (" << correct << "/" << samples.size() << ")\n";
    if (!out.empty()) {
      write_json(out, {{"exact_match", accuracy}, {"correct", correct}, {"samples", samples.size()}});
      save_resolved(app, resolved_path_for_file(out));
    }
    return kExitOk;
  }
};

struct Decode {
  std::string ckpt;
  std::vector<std::string> questions;
  std::string data;
  Index max_steps = 0;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--question", questions, "question to answer (repeatable)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    app->add_option("--data", data, "answer every question of this JSONL")->check(CLI::ExistingFile);
    app->add_option("--max-steps", max_steps, "symbol budget (0 = the model's max_tgt_len)")->capture_default_str();
  }

  int run(const CLI::App*, std::ostream& log) const {
    const Checkpoint c = load_checkpoint(ckpt);
    std::vector<std::string> all = questions;
    if (!data.empty()) {
      for (const Sample& s : read_jsonl(data)) all.push_back(s.question);
    }
    if (all.empty()) throw UsageError("give --question or --data");
    const Index budget = max_steps > 0 ? max_steps : c.model.config.max_tgt_len;
    const auto results = greedy_decode(c.model, all, c.vocab, budget);
    for (std::size_t i = 0; i < all.size(); ++i) {
      log << all[i] << "\t" << results[i].text << (results[i].truncated ? "\t[truncated]" : "") << "\n";
    }
    return kExitOk;
  }
};

struct TraceFlags {
  std::string ckpt;
  std::string data;
  Index n = 128;
  Index layer = -1;
  Index head = 0;
  std::string site = "encoder_self";

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--data", data, "JSONL of problems to trace")->required()->check(CLI::ExistingFile);
    app->add_option("--n", n, "number of problems")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--layer", layer, "layer (-1 = last)")->capture_default_str();
    app->add_option("--head", head)->capture_default_str();
    app->add_option("--site", site)
        ->capture_default_str()
        ->check(CLI::IsMember({"encoder_self", "decoder_self", "decoder_cross"}));
  }

  Traces collect(const Checkpoint& c) const {
    auto samples = read_jsonl(data);
    if (static_cast<std::size_t>(n) < samples.size()) samples.resize(static_cast<std::size_t>(n));
    const Index l = layer < 0 ? c.model.config.layers + layer : layer;
    return collect_traces(c.model, samples, c.vocab, l, head, *parse_site(site));
  }
};

struct KMeansFlags {
  KMeansOptions options;

  void add(CLI::App* app, Index default_k) {
    options.k = default_k;
    app->add_option("--k", options.k, "clusters")->capture_default_str();
    app->add_option("--restarts", options.restarts)->capture_default_str();
    app->add_option("--seed", options.seed)->capture_default_str();
  }
};

struct AnalyzeRoles {
  TraceFlags trace;
  KMeansFlags kmeans;
  std::string out;

  void add(CLI::App* app) {
    trace.add(app);
    kmeans.add(app, 20);
    app->add_option("--out", out, "output directory")->required();
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const Checkpoint c = load_checkpoint(trace.ckpt);
    const Traces traces = trace.collect(c);
    const ClusterAssignment a = ::tpt::kmeans(role_matrix(traces.roles), kmeans.options);
    ensure_directory(out);

    std::ostringstream records;
    for (std::size_t i = 0; i < traces.roles.size(); ++i) {
      const RoleRecord& r = traces.roles[i];
      records << ordered_json{{"sample", r.sample},        {"position", r.position}, {"layer", r.layer},
                              {"head", r.head},            {"symbol", r.symbol},     {"cluster", a.labels[i]},
                              {"role", std::vector<double>(r.role.begin(), r.role.end())}}
                     .dump()
              << "\n";
    }
    write_text(fs::path(out) / "roles.jsonl", records.str());

    // Cluster of every input symbol, one problem per block.
    std::ostringstream report;
    std::vector<Index> sizes(static_cast<std::size_t>(kmeans.options.k), 0);
    for (Index label : a.labels) ++sizes[static_cast<std::size_t>(label)];
    Index current = -1;
    std::string symbols, clusters;
    auto flush = [&] {
      if (current >= 0) report << "sample " << current << "\n" << symbols << "\n" << clusters << "\n\n";
      symbols.clear();
      clusters.clear();
    };
    for (std::size_t i = 0; i < traces.roles.size(); ++i) {
      const RoleRecord& r = traces.roles[i];
      if (r.sample != current) {
        flush();
        current = r.sample;
      }
      std::ostringstream cell_s, cell_c;
      cell_s << std::setw(6) << r.symbol;
      cell_c << std::setw(6) << a.labels[i];
      symbols += cell_s.str();
      clusters += cell_c.str();
    }
    flush();
    write_text(fs::path(out) / "cluster_report.txt", report.str());

    ordered_json summary = {{"records", traces.roles.size()},
                            {"k", kmeans.options.k},
                            {"inertia", a.inertia},
                            {"inertia_history", a.inertia_history},
                            {"cluster_sizes", sizes},
                            {"centroids", ordered_json::array()}};
    for (Index k = 0; k < a.centroids.rows(); ++k) {
      summary["centroids"].push_back(std::vector<double>(a.centroids.row(k).begin(), a.centroids.row(k).end()));
    }
    write_json(fs::path(out) / "clusters.json", summary);
    save_resolved(app, fs::path(out) / "run_config.toml");
    log << "clustered " << traces.roles.size() << " role vectors into " << kmeans.options.k << " clusters, inertia "
        << a.inertia << " after " << a.inertia_history.size() << " iterations\n";
    return kExitOk;
  }
};

struct AnalyzeAttention {
  TraceFlags trace;
  KMeansFlags kmeans;
  std::string out;

  void add(CLI::App* app) {
    trace.add(app);
    kmeans.add(app, 20);
    app->add_option("--out", out, "output JSONL")->required();
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const Checkpoint c = load_checkpoint(trace.ckpt);
    Traces traces = trace.collect(c);
    if (kmeans.options.k > 0) {
      attach_clusters(traces.maps, traces.roles, ::tpt::kmeans(role_matrix(traces.roles), kmeans.options));
    }
    export_attention_maps(out, traces.maps);
    save_resolved(app, resolved_path_for_file(out));
    log << "exported " << traces.maps.size() << " attention maps to " << out << "\n";
    return kExitOk;
  }
};

struct AnalyzeProbe {
  std::string ckpt;
  std::string data;
  Index n = 100;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--data", data, "JSONL of problems")->required()->check(CLI::ExistingFile);
    app->add_option("--n", n, "number of problems")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--out", out, "optional JSON report");
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const Checkpoint c = load_checkpoint(ckpt);
    const auto samples = read_jsonl(data);
    const ProbeResult r = reconstruction_probe(c.model, samples, c.vocab, n);
    ordered_json heads = ordered_json::array();
    for (const HeadProbe& h : r.heads) {
      log << "head " << h.head << " mse " << h.mse << "\n";
      heads.push_back({{"head", h.head}, {"mse", h.mse}});
    }
    log << "mean mse " << r.mean_mse << " over " << r.positions << " positions (full-scale reference: TP-Transformer ~"
        << kReferenceProbeTp << ", Transformer ~" << kReferenceProbeBaseline << ")\n";
    if (!out.empty()) {
      write_json(out, {{"heads", heads},
                       {"mean_mse", r.mean_mse},
                       {"positions", r.positions},
                       {"reference_mean_mse", {{"tp_transformer", kReferenceProbeTp}, {"transformer", kReferenceProbeBaseline}}}});
      save_resolved(app, resolved_path_for_file(out));
    }
    for (const HeadProbe& h : r.heads) {
      if (!std::isfinite(h.mse)) throw CheckFailed("probe error is not finite for head " + std::to_string(h.head));
    }
    return kExitOk;
  }
};

struct AnalyzeBinding {
  Index dim = 8;
  Index trials = 1000;
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--dim", dim)->capture_default_str();
    app->add_option("--trials", trials)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--out", out, "optional JSON report");
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const BindingReport r = binding_ambiguity_demo(dim, seed, trials);
    const double standard_rate = static_cast<double>(r.standard_collisions) / static_cast<double>(r.trials);
    const double role_rate = static_cast<double>(r.role_collisions) / static_cast<double>(r.trials);
    log << "standard attention: swapped pairings collide in " << r.standard_collisions << "/" << r.trials
        << " trials (rate " << standard_rate << ", max difference " << r.max_standard_difference << ")\n"
        << "role binding: swapped pairings collide in " << r.role_collisions << "/" << r.trials << " trials (rate "
        << role_rate << ", min difference " << r.min_role_difference << ")\n";
    if (!out.empty()) {
      write_json(out, {{"dim", r.dim},
                       {"trials", r.trials},
                       {"standard_collision_rate", standard_rate},
                       {"role_collision_rate", role_rate},
                       {"max_standard_difference", r.max_standard_difference},
                       {"min_role_difference", r.min_role_difference},
                       {"tolerance", r.tolerance}});
      save_resolved(app, resolved_path_for_file(out));
    }
    if (r.standard_collisions != r.trials || r.role_collisions != 0) throw CheckFailed("binding demonstration failed");
    return kExitOk;
  }
};

struct AnalyzeAppendix {
  Index d_z = 64;
  Index d_k = 16;
  Index trials = 1000;
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--d-z", d_z)->capture_default_str();
    app->add_option("--d-k", d_k)->capture_default_str();
    app->add_option("--trials", trials)->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--out", out, "optional JSON report");
  }

  int run(const CLI::App* app, std::ostream& log) const {
    const CompressionReport r = hadamard_compression_check(d_z, d_k, seed, trials);
    const ConfusabilityReport nc = non_confusability_check(d_k, seed, trials);
    log << "diag(M^T v r^T N) vs (M^T v)*(N^T r): max deviation " << r.max_general_deviation << " (general), "
        << r.max_orthonormal_deviation << " (orthonormal)\n"
        << "orthonormality error " << r.max_orthonormality_error << ", parameter folding deviation "
        << r.max_folding_deviation << "\n"
        << "non-confusability: " << nc.collisions << "/" << nc.trials << " collisions, min difference "
        << nc.min_difference << "\n";
    if (!out.empty()) {
      write_json(out, {{"trials", r.trials},
                       {"max_general_deviation", r.max_general_deviation},
                       {"max_orthonormal_deviation", r.max_orthonormal_deviation},
                       {"max_orthonormality_error", r.max_orthonormality_error},
                       {"max_folding_deviation", r.max_folding_deviation},
                       {"confusability_collisions", nc.collisions},
                       {"min_confusability_difference", nc.min_difference}});
      save_resolved(app, resolved_path_for_file(out));
    }
    if (!(r.max_general_deviation < 1e-12 && r.max_orthonormal_deviation < 1e-12 &&
          r.max_orthonormality_error < 1e-10 && nc.collisions == 0)) {
      throw CheckFailed("appendix identity check failed");
    }
    return kExitOk;
  }
};

struct GradCheck {
  bool tiny = false;
  bool skip_key_biases = false;
  Index vocab_size = 8;
  ModelGradCheckOptions options;
  ModelFlags model;

  void add(CLI::App* app) {
    app->add_flag("--tiny", tiny, "d_z=16, H=2, L=2 preset");
    app->add_flag("--skip-key-biases", skip_key_biases, "hold key biases fixed and report their analytic gradient");
    app->add_option("--seed", options.seed)->capture_default_str();
    app->add_option("--batch", options.batch)->capture_default_str();
    app->add_option("--src-len", options.src_len)->capture_default_str();
    app->add_option("--tgt-len", options.tgt_len)->capture_default_str();
    app->add_option("--eps", options.eps)->capture_default_str();
    app->add_option("--vocab-size", vocab_size)->capture_default_str();
    model.add(app);
  }

  int run(const CLI::App*, std::ostream& log) const {
    ModelGradCheckOptions o = options;
    if (tiny) {
      o.config = tiny_gradcheck_config();
    } else {
      o.config = model.config;
      o.config.vocab_size = vocab_size;
    }
    o.skip_key_biases = skip_key_biases;
    const ModelGradCheckResult r = model_grad_check(o);
    log << "max relative error " << r.report.max_rel_error << " at " << r.report.worst_param << "["
        << r.report.worst_index << "] (analytic " << r.report.worst_analytic << ", numeric " << r.report.worst_numeric
        << ") over " << r.report.coordinates << " coordinates\n";
    if (skip_key_biases) {
      log << "key biases held fixed: " << r.skipped_coordinates << " coordinates, max |analytic gradient| "
          << r.max_key_bias_gradient << "\n";
    }
    return r.report.max_rel_error < 1e-4 ? kExitOk : kExitFailed;
  }
};

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app("TP-Transformer toolkit: data, training, evaluation and analysis", "tpt");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.footer("Every subcommand accepts --config FILE with key=value lines; explicit flags override it.");

  GenData gen_data;
  Train train;
  Eval eval;
  Decode decode;
  AnalyzeRoles roles;
  AnalyzeAttention attention;
  AnalyzeProbe probe;
  AnalyzeBinding binding;
  AnalyzeAppendix appendix;
  GradCheck gradcheck;

  auto* gen_cmd = app.add_subcommand("gen-data", "generate a procedural dataset");
  gen_data.add(gen_cmd);
  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint and metrics");
  train.add(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "exact-match accuracy of a checkpoint");
  eval.add(eval_cmd);
  auto* decode_cmd = app.add_subcommand("decode", "greedy answers from a checkpoint");
  decode.add(decode_cmd);
  auto* analyze_cmd = app.add_subcommand("analyze", "structural probes");
  analyze_cmd->require_subcommand(1);
  auto* roles_cmd = analyze_cmd->add_subcommand("roles", "k-means clusters of role vectors");
  roles.add(roles_cmd);
  auto* attention_cmd = analyze_cmd->add_subcommand("attention", "export attention maps");
  attention.add(attention_cmd);
  auto* probe_cmd = analyze_cmd->add_subcommand("probe", "affine reconstruction of states from one head");
  probe.add(probe_cmd);
  auto* binding_cmd = analyze_cmd->add_subcommand("binding", "swapped-pairing ambiguity demonstration");
  binding.add(binding_cmd);
  auto* appendix_cmd = analyze_cmd->add_subcommand("appendix", "Hadamard/tensor-product compression identity");
  appendix.add(appendix_cmd);
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "full-model finite-difference gradient check");
  gradcheck.add(gradcheck_cmd);

  try {
    std::vector<std::string> args = expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << ": " << e.path() << "\n";
    return kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return gen_data.run(gen_cmd, out);
    if (train_cmd->parsed()) return train.run(train_cmd, out);
    if (eval_cmd->parsed()) return eval.run(eval_cmd, out);
    if (decode_cmd->parsed()) return decode.run(decode_cmd, out);
    if (roles_cmd->parsed()) return roles.run(roles_cmd, out);
    if (attention_cmd->parsed()) return attention.run(attention_cmd, out);
    if (probe_cmd->parsed()) return probe.run(probe_cmd, out);
    if (binding_cmd->parsed()) return binding.run(binding_cmd, out);
    if (appendix_cmd->parsed()) return appendix.run(appendix_cmd, out);
    if (gradcheck_cmd->parsed()) return gradcheck.run(gradcheck_cmd, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << ": " << e.path() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return kExitFailed;
  }
  err << "error: no command\n";
  return kExitUsage;
}

}  // namespace tpt
