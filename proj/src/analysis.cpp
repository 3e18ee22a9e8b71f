#include "tpt/analysis.hpp"

#include "tpt/errors.hpp"

#include <json.hpp>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <tuple>

namespace tpt {
namespace {

Eigen::VectorXd gaussian_vector(Index n, CounterRng& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  Eigen::VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = normal(rng);
  return v;
}

Eigen::MatrixXd gaussian_matrix(Index rows, Index cols, CounterRng& rng, double sd) {
  std::normal_distribution<double> normal(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  }
  return m;
}

std::vector<std::string> symbols_of(const TokenMatrix& tokens, Index row, Index length, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(length));
  for (Index t = 0; t < length; ++t) out.push_back(vocab.symbol(tokens(row, t)));
  return out;
}

void check_vocab(const Model& model, const Vocabulary& vocab) {
  if (vocab.size() != model.config.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " symbols but the model expects " +
                      std::to_string(model.config.vocab_size));
  }
}

struct Lloyd {
  RowMatrix centroids;
  std::vector<Index> labels;
  std::vector<double> history;
};

// Squared distances of every point to its nearest centroid; fills labels.
double assign(const RowMatrix& points, const RowMatrix& centroids, std::vector<Index>& labels) {
  double inertia = 0.0;
  for (Index i = 0; i < points.rows(); ++i) {
    Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index c = 0; c < centroids.rows(); ++c) {
      const double d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
    inertia += best_d;
  }
  return inertia;
}

RowMatrix kmeans_plus_plus(const RowMatrix& points, Index k, CounterRng& rng) {
  const Index n = points.rows();
  RowMatrix centroids(k, points.cols());
  centroids.row(0) = points.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
  Eigen::VectorXd nearest(n);
  for (Index i = 0; i < n; ++i) nearest(i) = (points.row(i) - centroids.row(0)).squaredNorm();
  for (Index c = 1; c < k; ++c) {
    const double total = nearest.sum();
    Index pick = n - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double running = 0.0;
      for (Index i = 0; i < n; ++i) {
        running += nearest(i);
        if (nearest(i) > 0.0 && running > target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centroids.row(c) = points.row(pick);
    for (Index i = 0; i < n; ++i) nearest(i) = std::min(nearest(i), (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

Lloyd run_lloyd(const RowMatrix& points, const KMeansOptions& options, CounterRng rng) {
  Lloyd run;
  run.centroids = kmeans_plus_plus(points, options.k, rng);
  run.labels.assign(static_cast<std::size_t>(points.rows()), 0);
  for (Index it = 0; it < options.max_iterations; ++it) {
    const double inertia = assign(points, run.centroids, run.labels);
    const bool converged =
        !run.history.empty() && (run.history.back() == 0.0 ||
                                 (run.history.back() - inertia) <= options.tolerance * run.history.back());
    run.history.push_back(inertia);
    if (converged || it + 1 == options.max_iterations) break;
    // Empty clusters keep their centroid, which cannot raise the inertia.
    RowMatrix sums = RowMatrix::Zero(options.k, points.cols());
    std::vector<Index> counts(static_cast<std::size_t>(options.k), 0);
    for (Index i = 0; i < points.rows(); ++i) {
      const Index c = run.labels[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (Index c = 0; c < options.k; ++c) {
      const Index count = counts[static_cast<std::size_t>(c)];
      if (count > 0) run.centroids.row(c) = sums.row(c) / static_cast<double>(count);
    }
  }
  return run;
}

}  // namespace

Traces collect_traces(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab, Index layer,
                      Index head, Site site, Index batch_size) {
  const ModelConfig& c = model.config;
  if (layer < 0 || layer >= c.layers) {
    throw ConfigError("layer " + std::to_string(layer) + " out of range [0, " + std::to_string(c.layers) + ")");
  }
  if (head < 0 || head >= c.heads) {
    throw ConfigError("head " + std::to_string(head) + " out of range [0, " + std::to_string(c.heads) + ")");
  }
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  check_vocab(model, vocab);

  Traces traces;
  if (samples.empty()) return traces;
  const EncodedCorpus corpus(samples, vocab, {c.max_src_len, c.max_tgt_len});
  for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> indices;
    for (std::size_t i = begin; i < end; ++i) indices.push_back(i);
    const Batch batch = corpus.batch(indices);

    AttentionTrace trace;
    trace.only_layer = layer;
    trace.only_head = head;
    trace.only_site = site;
    Tape tape;
    const BoundModel bound(tape, model, false);
    const bool in_encoder = site == Site::EncoderSelf;
    const Var encoded = encode(bound, batch.src, batch.src_lengths, in_encoder ? &trace : nullptr);
    if (!in_encoder) decode(bound, batch.tgt_in, encoded, batch.src.cols(), batch.src_lengths, &trace);

    for (const HeadRecord& r : trace.records) {
      const auto b = static_cast<std::size_t>(r.sample);
      const TokenMatrix& queries = in_encoder ? batch.src : batch.tgt_in;
      const TokenMatrix& keys = site == Site::DecoderSelf ? batch.tgt_in : batch.src;
      const Index q_len = in_encoder ? batch.src_lengths[b] : batch.tgt_lengths[b];
      const Index kv_len = site == Site::DecoderSelf ? batch.tgt_lengths[b] : batch.src_lengths[b];
      const auto sample = static_cast<Index>(begin + b);

      AttentionMap map{sample, r.layer, r.head, r.site, r.alpha.topLeftCorner(q_len, kv_len),
                       symbols_of(queries, r.sample, q_len, vocab), symbols_of(keys, r.sample, kv_len, vocab), {}};
      for (Index t = 0; t < q_len; ++t) {
        traces.roles.push_back({sample, t, r.layer, r.head, r.roles.row(t), map.query_symbols[static_cast<std::size_t>(t)]});
      }
      traces.maps.push_back(std::move(map));
    }
  }
  return traces;
}

RowMatrix role_matrix(std::span<const RoleRecord> records) {
  if (records.empty()) return {};
  RowMatrix out(static_cast<Index>(records.size()), records.front().role.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].role.size() != out.cols()) throw DimensionError("role vectors differ in length");
    out.row(static_cast<Index>(i)) = records[i].role;
  }
  return out;
}

ClusterAssignment kmeans(const RowMatrix& points, const KMeansOptions& options) {
  if (options.k <= 0 || options.restarts <= 0 || options.max_iterations <= 0) {
    throw ConfigError("kmeans: k, restarts and max_iterations must be positive");
  }
  if (points.rows() < options.k) {
    throw ConfigError("kmeans: " + std::to_string(points.rows()) + " points for k=" + std::to_string(options.k));
  }
  if (!points.allFinite()) throw NumericalError("kmeans: non-finite input");

  const CounterRng base = CounterRng(options.seed).split("kmeans");
  ClusterAssignment best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (Index r = 0; r < options.restarts; ++r) {
    Lloyd run = run_lloyd(points, options, base.split(static_cast<std::uint64_t>(r)));
    if (run.history.back() < best.inertia) {
      best.centroids = std::move(run.centroids);
      best.labels = std::move(run.labels);
      best.inertia = run.history.back();
      best.inertia_history = std::move(run.history);
      best.restart = r;
    }
  }
  return best;
}

void attach_clusters(std::span<AttentionMap> maps, std::span<const RoleRecord> records,
                     const ClusterAssignment& assignment) {
  if (assignment.labels.size() != records.size()) {
    throw ContractError("attach_clusters: " + std::to_string(records.size()) + " records but " +
                        std::to_string(assignment.labels.size()) + " labels");
  }
  std::map<std::tuple<Index, Index, Index, Index>, Index> lookup;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const RoleRecord& r = records[i];
    lookup[{r.sample, r.layer, r.head, r.position}] = assignment.labels[i];
  }
  for (AttentionMap& m : maps) {
    m.clusters.assign(m.query_symbols.size(), -1);
    for (std::size_t t = 0; t < m.clusters.size(); ++t) {
      const auto it = lookup.find({m.sample, m.layer, m.head, static_cast<Index>(t)});
      if (it != lookup.end()) m.clusters[t] = it->second;
    }
  }
}

HeadProbe fit_affine_probe(const RowMatrix& values, const RowMatrix& targets, double ridge) {
  if (values.rows() != targets.rows()) throw DimensionError("probe: values and targets differ in row count");
  if (values.rows() == 0) throw ContractError("probe: no observations");
  if (!(ridge >= 0.0)) throw ConfigError("probe: ridge must be non-negative");

  // Centering leaves the intercept out of the ridge penalty.
  const Eigen::RowVectorXd v_mean = values.colwise().mean();
  const Eigen::RowVectorXd z_mean = targets.colwise().mean();
  const RowMatrix V = values.rowwise() - v_mean;
  const RowMatrix Z = targets.rowwise() - z_mean;
  Eigen::MatrixXd gram = V.transpose() * V;
  gram.diagonal().array() += ridge;
  const Eigen::LDLT<Eigen::MatrixXd> solver(gram);
  const Eigen::MatrixXd X = solver.solve(Eigen::MatrixXd(V.transpose() * Z));  // d_k x d_z
  if (solver.info() != Eigen::Success || !X.allFinite()) throw NumericalError("probe: normal equations are singular");

  HeadProbe probe;
  probe.W = X.transpose();
  probe.b = z_mean - v_mean * X;
  const RowMatrix residual = (values * X).rowwise() + probe.b - targets;
  probe.mse = residual.squaredNorm() / static_cast<double>(residual.size());
  return probe;
}

ProbeResult reconstruction_probe(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab,
                                 Index n) {
  if (n <= 0) throw ConfigError("probe: n must be positive");
  check_vocab(model, vocab);
  const ModelConfig& c = model.config;
  const auto count = std::min(samples.size(), static_cast<std::size_t>(n));
  if (count == 0) throw ContractError("probe: no samples");
  const auto chosen = samples.first(count);
  const EncodedCorpus corpus(chosen, vocab, {c.max_src_len, c.max_tgt_len});

  std::vector<Eigen::RowVectorXd> rows;
  for (std::size_t begin = 0; begin < count; begin += 64) {
    const std::size_t end = std::min(count, begin + 64);
    std::vector<std::size_t> indices;
    for (std::size_t i = begin; i < end; ++i) indices.push_back(i);
    const Batch batch = corpus.batch(indices);
    Tape tape;
    const BoundModel bound(tape, model, false);
    const RowMatrix z = encode(bound, batch.src, batch.src_lengths).mat();
    const Index width = batch.src.cols();
    for (Index b = 0; b < batch.size(); ++b) {
      for (Index t = 0; t < batch.src_lengths[static_cast<std::size_t>(b)]; ++t) rows.push_back(z.row(b * width + t));
    }
  }
  RowMatrix Z(static_cast<Index>(rows.size()), c.d_z);
  for (std::size_t i = 0; i < rows.size(); ++i) Z.row(static_cast<Index>(i)) = rows[i];

  ProbeResult result;
  result.positions = Z.rows();
  const Index last = c.layers - 1;
  for (Index h = 0; h < c.heads; ++h) {
    const RowMatrix& W_v = model.params.at(head_param_name(Site::EncoderSelf, last, h, "W_v")).mat();
    const RowMatrix& b_v = model.params.at(head_param_name(Site::EncoderSelf, last, h, "b_v")).mat();
    const RowMatrix values = (Z * W_v.transpose()).rowwise() + b_v.row(0);
    HeadProbe probe = fit_affine_probe(values, Z);
    probe.head = h;
    result.mean_mse += probe.mse / static_cast<double>(c.heads);
    result.heads.push_back(std::move(probe));
  }
  return result;
}

Eigen::VectorXd BindingInstance::inner_sum(bool swapped, bool roles) const {
  const Eigen::VectorXd& object_of_a = swapped ? z_d : z_b;
  const Eigen::VectorXd& object_of_c = swapped ? z_b : z_d;
  Eigen::VectorXd from_a = V1 * object_of_a;
  Eigen::VectorXd from_c = V1 * object_of_c;
  if (roles) {
    from_a = from_a.cwiseProduct(r_a);
    from_c = from_c.cwiseProduct(r_c);
  }
  // Grouped as z_a + z_c + (o(a's object) + o(c's object)); without roles the
  // second group is a sum of the same two vectors in either pairing.
  return (z_a + z_c) + (O1 * from_a + O1 * from_c);
}

Eigen::VectorXd BindingInstance::output(bool swapped, bool roles) const {
  return z_e + O2 * (V2 * inner_sum(swapped, roles)) / 2.0;
}

BindingInstance BindingInstance::random(Index d, CounterRng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  BindingInstance x;
  x.z_a = gaussian_vector(d, rng);
  x.z_b = gaussian_vector(d, rng);
  x.z_c = gaussian_vector(d, rng);
  x.z_d = gaussian_vector(d, rng);
  x.z_e = gaussian_vector(d, rng);
  x.r_a = gaussian_vector(d, rng);
  x.r_c = gaussian_vector(d, rng);
  x.V1 = gaussian_matrix(d, d, rng, sd);
  x.O1 = gaussian_matrix(d, d, rng, sd);
  x.V2 = gaussian_matrix(d, d, rng, sd);
  x.O2 = gaussian_matrix(d, d, rng, sd);
  return x;
}

BindingReport binding_ambiguity_demo(Index d, std::uint64_t seed, Index trials) {
  if (d < 2) throw ConfigError("binding demo needs d >= 2");
  if (trials <= 0) throw ConfigError("binding demo needs at least one trial");
  BindingReport report;
  report.dim = d;
  report.trials = trials;
  report.min_role_difference = std::numeric_limits<double>::infinity();
  const CounterRng base = CounterRng(seed).split("binding");
  for (Index i = 0; i < trials; ++i) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(i));
    const BindingInstance x = BindingInstance::random(d, rng);
    const double standard = (x.output(false, false) - x.output(true, false)).norm();
    const double bound = (x.output(false, true) - x.output(true, true)).norm();
    report.standard_collisions += standard == 0.0;
    report.role_collisions += bound <= report.tolerance;
    report.max_standard_difference = std::max(report.max_standard_difference, standard);
    report.min_role_difference = std::min(report.min_role_difference, bound);
  }
  return report;
}

Eigen::VectorXd tensor_product_diagonal(const Eigen::MatrixXd& M, const Eigen::MatrixXd& N, const Eigen::VectorXd& v,
                                        const Eigen::VectorXd& r) {
  if (M.rows() != v.size() || N.rows() != r.size() || M.cols() != N.cols()) {
    throw DimensionError("tensor_product_diagonal: incompatible shapes");
  }
  const Eigen::MatrixXd A = v * r.transpose();
  return (M.transpose() * A * N).diagonal();
}

CompressionReport hadamard_compression_check(Index d_z, Index d_k, std::uint64_t seed, Index trials) {
  if (d_k <= 0 || d_k > d_z) throw ConfigError("compression check needs 0 < d_k <= d_z");
  if (trials <= 0) throw ConfigError("compression check needs at least one trial");
  CompressionReport report;
  report.trials = trials;
  const CounterRng base = CounterRng(seed).split("compression");
  const double sd_z = 1.0 / std::sqrt(static_cast<double>(d_z));
  const double sd_k = 1.0 / std::sqrt(static_cast<double>(d_k));
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d_k, d_k);

  auto diagonal_deviation = [](const Eigen::MatrixXd& M, const Eigen::MatrixXd& N, const Eigen::VectorXd& v,
                               const Eigen::VectorXd& r) {
    return (tensor_product_diagonal(M, N, v, r) - (M.transpose() * v).cwiseProduct(N.transpose() * r))
        .cwiseAbs()
        .maxCoeff();
  };

  for (Index i = 0; i < trials; ++i) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(i));
    const Eigen::VectorXd z = gaussian_vector(d_z, rng);
    const Eigen::MatrixXd W_v = gaussian_matrix(d_k, d_z, rng, sd_z);
    const Eigen::MatrixXd W_r = gaussian_matrix(d_k, d_z, rng, sd_z);
    const Eigen::VectorXd b_v = gaussian_vector(d_k, rng);
    const Eigen::VectorXd b_r = gaussian_vector(d_k, rng);
    const Eigen::VectorXd v = W_v * z + b_v;
    const Eigen::VectorXd r = W_r * z + b_r;

    const Eigen::MatrixXd M = gaussian_matrix(d_k, d_k, rng, sd_k);
    const Eigen::MatrixXd N = gaussian_matrix(d_k, d_k, rng, sd_k);
    report.max_general_deviation = std::max(report.max_general_deviation, diagonal_deviation(M, N, v, r));

    const Eigen::MatrixXd Mo = Eigen::HouseholderQR<Eigen::MatrixXd>(M).householderQ() * I;
    const Eigen::MatrixXd No = Eigen::HouseholderQR<Eigen::MatrixXd>(N).householderQ() * I;
    report.max_orthonormal_deviation = std::max(report.max_orthonormal_deviation, diagonal_deviation(Mo, No, v, r));
    report.max_orthonormality_error =
        std::max({report.max_orthonormality_error, (Mo.transpose() * Mo - I).cwiseAbs().maxCoeff(),
                  (No.transpose() * No - I).cwiseAbs().maxCoeff()});

    const Eigen::VectorXd folded = (Mo.transpose() * W_v) * z + Mo.transpose() * b_v;
    report.max_folding_deviation =
        std::max(report.max_folding_deviation, (folded - Mo.transpose() * v).cwiseAbs().maxCoeff());
  }
  return report;
}

ConfusabilityReport non_confusability_check(Index d, std::uint64_t seed, Index trials) {
  if (d <= 0 || trials <= 0) throw ConfigError("non-confusability check needs d > 0 and trials > 0");
  ConfusabilityReport report;
  report.trials = trials;
  report.min_difference = std::numeric_limits<double>::infinity();
  const CounterRng base = CounterRng(seed).split("confusability");
  for (Index i = 0; i < trials; ++i) {
    CounterRng rng = base.split(static_cast<std::uint64_t>(i));
    const Eigen::VectorXd a = gaussian_vector(d, rng);
    const Eigen::VectorXd b = gaussian_vector(d, rng);
    const Eigen::VectorXd r_n = gaussian_vector(d, rng);
    const Eigen::VectorXd r_d = gaussian_vector(d, rng);
    const double diff = ((a.cwiseProduct(r_n) + b.cwiseProduct(r_d)) - (a.cwiseProduct(r_d) + b.cwiseProduct(r_n))).norm();
    report.collisions += diff <= report.tolerance;
    report.min_difference = std::min(report.min_difference, diff);
  }
  return report;
}

void export_attention_maps(const std::filesystem::path& path, std::span<const AttentionMap> maps) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open attention export for writing", path.string());
  for (const AttentionMap& m : maps) {
    nlohmann::ordered_json alpha = nlohmann::ordered_json::array();
    for (Index i = 0; i < m.alpha.rows(); ++i) {
      alpha.push_back(std::vector<double>(m.alpha.row(i).begin(), m.alpha.row(i).end()));
    }
    const nlohmann::ordered_json line = {{"sample", m.sample},
                                         {"layer", m.layer},
                                         {"head", m.head},
                                         {"site", site_name(m.site)},
                                         {"query_symbols", m.query_symbols},
                                         {"key_symbols", m.key_symbols},
                                         {"clusters", m.clusters},
                                         {"alpha", alpha}};
    out << line.dump() << '\n';
  }
  out.flush();
  if (!out) throw IoError("attention export write failed", path.string());
}

std::vector<AttentionMap> read_attention_maps(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open attention export", path.string());
  std::vector<AttentionMap> maps;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      AttentionMap m;
      m.sample = j.at("sample").get<Index>();
      m.layer = j.at("layer").get<Index>();
      m.head = j.at("head").get<Index>();
      const auto site = parse_site(j.at("site").get<std::string>());
      if (!site) throw ParseError("unknown site " + j.at("site").dump(), line_no);
      m.site = *site;
      m.query_symbols = j.at("query_symbols").get<std::vector<std::string>>();
      m.key_symbols = j.at("key_symbols").get<std::vector<std::string>>();
      m.clusters = j.at("clusters").get<std::vector<Index>>();
      const auto rows = j.at("alpha").get<std::vector<std::vector<double>>>();
      m.alpha.resize(static_cast<Index>(rows.size()), static_cast<Index>(m.key_symbols.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != m.key_symbols.size()) throw ParseError("alpha row width differs from key symbols", line_no);
        for (std::size_t k = 0; k < rows[i].size(); ++k) m.alpha(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
      }
      if (rows.size() != m.query_symbols.size()) throw ParseError("alpha row count differs from query symbols", line_no);
      maps.push_back(std::move(m));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return maps;
}

}  // namespace tpt
