#pragma once

#include "tpt/data.hpp"
#include "tpt/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tpt {

/// Role vector of one query position.
struct RoleRecord {
  Index sample = 0;
  Index position = 0;
  Index layer = 0;
  Index head = 0;
  Eigen::RowVectorXd role;  // d_k
  std::string symbol;       // query symbol at `position`

  friend bool operator==(const RoleRecord&, const RoleRecord&) = default;
};

/// One attention matrix trimmed to the real (non-padding) positions.
struct AttentionMap {
  Index sample = 0;
  Index layer = 0;
  Index head = 0;
  Site site = Site::EncoderSelf;
  RowMatrix alpha;                         // query_symbols.size() x key_symbols.size()
  std::vector<std::string> query_symbols;  // one per alpha row
  std::vector<std::string> key_symbols;    // one per alpha column
  std::vector<Index> clusters;             // role cluster per query position; empty if not clustered

  friend bool operator==(const AttentionMap&, const AttentionMap&) = default;
};

struct Traces {
  std::vector<RoleRecord> roles;
  std::vector<AttentionMap> maps;
};

/// Forward passes over `samples` capturing the roles and attention weights
/// of one (site, layer, head). Encoder sites see the source sequence, decoder
/// sites the teacher-forced target. Sample ids are indices into `samples`.
/// Throws ConfigError if layer or head is out of range.
Traces collect_traces(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab, Index layer,
                      Index head, Site site = Site::EncoderSelf, Index batch_size = 64);

/// Stacks the role vectors as rows.
RowMatrix role_matrix(std::span<const RoleRecord> records);

struct KMeansOptions {
  Index k = 20;
  std::uint64_t seed = 0;
  Index restarts = 10;
  Index max_iterations = 300;
  double tolerance = 1e-6;  // relative inertia change
};

struct ClusterAssignment {
  RowMatrix centroids;  // k x d
  std::vector<Index> labels;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each assignment step of the winning restart
  Index restart = 0;                    // which restart won
};

/// Euclidean k-means: k-means++ seeding, Lloyd iterations, best of
/// `restarts` by inertia. Throws ConfigError if there are fewer points than k.
ClusterAssignment kmeans(const RowMatrix& points, const KMeansOptions& options = {});

/// Fills `clusters` of every map from the records of the same sample, layer
/// and head.
void attach_clusters(std::span<AttentionMap> maps, std::span<const RoleRecord> records,
                     const ClusterAssignment& assignment);

struct HeadProbe {
  Index head = 0;
  RowMatrix W;          // d_z x d_k
  Eigen::RowVectorXd b;  // d_z
  double mse = 0.0;
};

struct ProbeResult {
  std::vector<HeadProbe> heads;
  double mean_mse = 0.0;
  Index positions = 0;
};

/// Least squares z_hat = W v + b with ridge `ridge` on W (the intercept is
/// not penalized). Rows of `values` and `targets` are paired observations.
/// mse is the mean over rows and coordinates of (z_hat - z)^2.
HeadProbe fit_affine_probe(const RowMatrix& values, const RowMatrix& targets, double ridge = 1e-6);

/// Regresses the final encoder states z of the first `n` samples (every
/// real position) on each head's value vector v_h(z), computed with the last
/// encoder layer's value map.
ProbeResult reconstruction_probe(const Model& model, std::span<const Sample> samples, const Vocabulary& vocab,
                                 Index n = 100);

/// Simplified two-layer stack: single-head attention cells with residuals,
/// no feed-forward, layer norm or biases. Cell a attends only to b, c only to
/// d, then e attends to a and c with weight 1/2 each.
struct BindingInstance {
  Eigen::VectorXd z_a, z_b, z_c, z_d, z_e;
  Eigen::VectorXd r_a, r_c;
  Eigen::MatrixXd V1, O1, V2, O2;  // value and output maps of the two layers

  /// Sum handed to the second layer's value map: z_a + z_c plus both
  /// retrieved (and, with roles, bound) objects. `swapped` pairs a with d and
  /// c with b instead.
  Eigen::VectorXd inner_sum(bool swapped, bool roles) const;
  Eigen::VectorXd output(bool swapped, bool roles) const;
  static BindingInstance random(Index d, CounterRng& rng);
};

struct BindingReport {
  Index dim = 0;
  Index trials = 0;
  Index standard_collisions = 0;  // swapped pairing gave exactly the same output
  Index role_collisions = 0;      // difference at most `tolerance`
  double max_standard_difference = 0.0;
  double min_role_difference = 0.0;
  double tolerance = 1e-9;
};

BindingReport binding_ambiguity_demo(Index d, std::uint64_t seed, Index trials);

/// diag(M^T (v r^T) N), evaluated from the full outer product.
Eigen::VectorXd tensor_product_diagonal(const Eigen::MatrixXd& M, const Eigen::MatrixXd& N, const Eigen::VectorXd& v,
                                        const Eigen::VectorXd& r);

struct CompressionReport {
  Index trials = 0;
  double max_general_deviation = 0.0;      // diag(M^T v r^T N) vs (M^T v) * (N^T r), arbitrary M, N
  double max_orthonormal_deviation = 0.0;  // same identity with orthonormal M, N
  double max_orthonormality_error = 0.0;   // |M^T M - I| and |N^T N - I|
  double max_folding_deviation = 0.0;      // M^T (W z + b) vs (M^T W) z + M^T b
};

/// v and r come from random affine maps of a random z in R^d_z. Throws
/// ConfigError unless 0 < d_k <= d_z.
CompressionReport hadamard_compression_check(Index d_z, Index d_k, std::uint64_t seed, Index trials);

struct ConfusabilityReport {
  Index trials = 0;
  Index collisions = 0;  // |a*r_n + b*r_d - (a*r_d + b*r_n)| <= tolerance
  double min_difference = 0.0;
  double tolerance = 1e-9;
};

ConfusabilityReport non_confusability_check(Index d, std::uint64_t seed, Index trials);

/// One JSON object per line with the alpha rows, symbols and clusters.
void export_attention_maps(const std::filesystem::path& path, std::span<const AttentionMap> maps);
std::vector<AttentionMap> read_attention_maps(const std::filesystem::path& path);

}  // namespace tpt
