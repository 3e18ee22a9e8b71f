#pragma once

#include "tpt/grad_check.hpp"
#include "tpt/tape.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tpt {

using TokenMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  Index d_z = 64;
  Index d_f = 256;
  Index heads = 4;
  Index layers = 2;
  Index vocab_size = 0;  // d_v
  Index max_src_len = 64;
  Index max_tgt_len = 32;
  bool role_binding = true;  // false: plain multi-head attention baseline
  double ln_eps = 1e-5;

  Index d_k() const { return d_z / heads; }
  /// Throws ConfigError on non-positive sizes or d_z not divisible by heads.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Stack { Encoder, Decoder };
enum class Site { EncoderSelf, DecoderSelf, DecoderCross };

const char* site_name(Site site);
std::optional<Site> parse_site(std::string_view name);

// Stable parameter names, e.g. "encoder.1.self.h0.W_q".
std::string head_param_name(Site site, Index layer, Index head, std::string_view field);
std::string layer_param_name(Stack stack, Index layer, std::string_view field);

enum class Init { Normal01, Normal11, Xavier, Zeros, Ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

/// Every learned tensor of a configuration, in a fixed order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& config);

/// E ~ N(0,1), W_p ~ N(1,1), other matrices Xavier-uniform, biases 0,
/// layer-norm gains 1. Each tensor draws from its own stream keyed by
/// (seed, name), so shared tensors of the baseline and the TP model agree.
ParamMap init_params(const ModelConfig& config, std::uint64_t seed);

struct Model {
  ModelConfig config;
  ParamMap params;
};

/// p_t[2i] = sin(t / 10000^(2i/d_z)), p_t[2i+1] = cos(same), t from 0.
Tensor sinusoidal_positions(Index length, Index d_z);

/// Attention record for one (layer, site, head, sample).
struct HeadRecord {
  Index layer = 0;
  Site site = Site::EncoderSelf;
  Index head = 0;
  Index sample = 0;
  RowMatrix alpha;    // T_q x T_kv
  RowMatrix roles;    // T_q x d_k, all ones without role binding
  RowMatrix fillers;  // T_q x d_k, the attention-weighted values
};

/// Sink for attention internals captured during a forward pass. Optional
/// filters restrict what is kept.
struct AttentionTrace {
  std::optional<Index> only_layer;
  std::optional<Index> only_head;
  std::optional<Site> only_site;
  std::vector<HeadRecord> records;

  bool wants(Index layer, Site site, Index head) const {
    return (!only_layer || *only_layer == layer) && (!only_site || *only_site == site) &&
           (!only_head || *only_head == head);
  }
};

/// Model parameters bound as leaves of one tape.
class BoundModel {
 public:
  BoundModel(Tape& tape, const Model& model, bool requires_grad);
  /// Uses variables already on `tape` (e.g. those handed out by grad_check).
  BoundModel(Tape& tape, const ModelConfig& config, VarMap vars)
      : tape_(&tape), config_(&config), vars_(std::move(vars)) {}

  Tape& tape() const { return *tape_; }
  const ModelConfig& config() const { return *config_; }
  Var operator[](const std::string& name) const { return vars_.at(name); }
  const VarMap& vars() const { return vars_; }

 private:
  Tape* tape_;
  const ModelConfig* config_;
  VarMap vars_;
};

/// Per-head maps of one attention site.
struct HeadParams {
  Var W_q, b_q, W_k, b_k, W_v, b_v, W_r, b_r, W_o, b_o;
};

std::vector<HeadParams> attention_params(const BoundModel& model, Site site, Index layer);

/// Row layout of a batched attention call: `batch` samples, each occupying
/// q_len consecutive query rows and kv_len consecutive key/value rows.
/// masks[b] is q_len x kv_len (true = may attend).
struct AttentionLayout {
  Index batch = 1;
  Index q_len = 1;
  Index kv_len = 1;
  std::span<const Mask> masks;
  Index layer = 0;
  Site site = Site::EncoderSelf;
};

/// e_t = E x_t sqrt(d_z) + p_t; with role binding returns e_t * (W_p e_t + b_p),
/// otherwise e_t. `tokens` is B x T; the result is (B*T) x d_z.
Var embed_input(const BoundModel& model, const TokenMatrix& tokens);

/// softmax over keys of q k^T / sqrt(d_k), masked before normalization.
Var compute_alpha(Var q, Var k, const Mask* mask);

/// TP multi-head attention: sum over heads of W_o (filler * role) + b_o.
/// Queries and roles come from `queries`, keys and values from `keys_values`.
/// Without role binding the role is all ones, i.e. standard multi-head
/// attention.
Var tpmha(Var queries, Var keys_values, std::span<const HeadParams> heads, const AttentionLayout& layout,
          bool role_binding, AttentionTrace* trace = nullptr);

/// Masks for padded keys (encoder self and decoder cross attention).
std::vector<Mask> key_padding_masks(std::span<const Index> key_lengths, Index q_len, Index kv_len);
/// Lower-triangular masks for decoder self-attention.
std::vector<Mask> causal_masks(Index batch, Index length);

/// h = z + TPMHA(LN(z), LN(z)); returns LN(h + FF(LN(h))).
Var encoder_cell(const BoundModel& model, Var z, Index layer, const AttentionLayout& layout,
                 AttentionTrace* trace = nullptr);

/// Masked self-attention, cross-attention over `encoder_final`, then the
/// feed-forward sublayer with the final layer norm.
Var decoder_cell(const BoundModel& model, Var z, Var encoder_final, Index layer, const AttentionLayout& self_layout,
                 const AttentionLayout& cross_layout, AttentionTrace* trace = nullptr);

Var feed_forward(const BoundModel& model, Stack stack, Index layer, Var x);

/// logits = z_hat E, i.e. E^T z_hat per row.
Var output_logits(Var z_hat, Var embedding);

/// Embedding plus all encoder layers; `src` is B x T, result (B*T) x d_z.
Var encode(const BoundModel& model, const TokenMatrix& src, std::span<const Index> src_lengths,
           AttentionTrace* trace = nullptr);

/// Decoder over teacher-forced inputs; returns (B*T_hat) x d_v logits.
Var decode(const BoundModel& model, const TokenMatrix& tgt_in, Var encoder_final, Index src_len,
           std::span<const Index> src_lengths, AttentionTrace* trace = nullptr);

}  // namespace tpt
