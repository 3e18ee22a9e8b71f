#include "tpt/model.hpp"

#include "tpt/errors.hpp"
#include "tpt/random.hpp"

#include <cmath>
#include <random>

namespace tpt {
namespace {

constexpr const char* kHeadFields[] = {"W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_r", "b_r", "W_o", "b_o"};

const char* stack_name(Stack stack) { return stack == Stack::Encoder ? "encoder" : "decoder"; }

std::vector<Site> sites_of(Stack stack) {
  if (stack == Stack::Encoder) return {Site::EncoderSelf};
  return {Site::DecoderSelf, Site::DecoderCross};
}

void add_head_specs(std::vector<ParamSpec>& out, const ModelConfig& c, Site site, Index layer) {
  const Index dk = c.d_k();
  for (Index h = 0; h < c.heads; ++h) {
    for (const char* field : kHeadFields) {
      const std::string_view f(field);
      if (!c.role_binding && (f == "W_r" || f == "b_r")) continue;
      const std::string name = head_param_name(site, layer, h, f);
      if (f == "W_o") {
        out.push_back({name, {c.d_z, dk}, Init::Xavier});
      } else if (f == "b_o") {
        out.push_back({name, {c.d_z}, Init::Zeros});
      } else if (f[0] == 'W') {
        out.push_back({name, {dk, c.d_z}, Init::Xavier});
      } else {
        out.push_back({name, {dk}, Init::Zeros});
      }
    }
  }
}

void add_layer_norm(std::vector<ParamSpec>& out, Stack stack, Index layer, std::string_view which, Index d) {
  const std::string base = std::string(which);
  out.push_back({layer_param_name(stack, layer, base + ".gain"), {d}, Init::Ones});
  out.push_back({layer_param_name(stack, layer, base + ".bias"), {d}, Init::Zeros});
}

Var sum_all(const std::vector<Var>& parts) {
  Var total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = total + parts[i];
  return total;
}

Var layer_norm_named(const BoundModel& m, Stack stack, Index layer, std::string_view which, Var x) {
  const std::string base(which);
  return layer_norm(x, m[layer_param_name(stack, layer, base + ".gain")],
                    m[layer_param_name(stack, layer, base + ".bias")], m.config().ln_eps);
}

}  // namespace

void ModelConfig::validate() const {
  if (d_z <= 0 || d_f <= 0 || heads <= 0 || layers <= 0 || vocab_size <= 0 || max_src_len <= 0 ||
      max_tgt_len <= 0) {
    throw ConfigError("model config: all sizes must be positive");
  }
  if (d_z % heads != 0) {
    throw ConfigError("model config: d_z=" + std::to_string(d_z) + " is not divisible by H=" + std::to_string(heads));
  }
  if (!(ln_eps > 0.0)) throw ConfigError("model config: ln_eps must be positive");
}

const char* site_name(Site site) {
  switch (site) {
    case Site::EncoderSelf:
      return "encoder_self";
    case Site::DecoderSelf:
      return "decoder_self";
    case Site::DecoderCross:
      return "decoder_cross";
  }
  return "?";
}

std::optional<Site> parse_site(std::string_view name) {
  for (Site s : {Site::EncoderSelf, Site::DecoderSelf, Site::DecoderCross}) {
    if (name == site_name(s)) return s;
  }
  return std::nullopt;
}

std::string head_param_name(Site site, Index layer, Index head, std::string_view field) {
  const char* prefix = site == Site::EncoderSelf ? "encoder" : "decoder";
  const char* kind = site == Site::DecoderCross ? "cross" : "self";
  return std::string(prefix) + "." + std::to_string(layer) + "." + kind + ".h" + std::to_string(head) + "." +
         std::string(field);
}

std::string layer_param_name(Stack stack, Index layer, std::string_view field) {
  return std::string(stack_name(stack)) + "." + std::to_string(layer) + "." + std::string(field);
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  out.push_back({"embedding.E", {c.d_z, c.vocab_size}, Init::Normal01});
  if (c.role_binding) {
    out.push_back({"input_role.W_p", {c.d_z, c.d_z}, Init::Normal11});
    out.push_back({"input_role.b_p", {c.d_z}, Init::Zeros});
  }
  for (Stack stack : {Stack::Encoder, Stack::Decoder}) {
    for (Index l = 0; l < c.layers; ++l) {
      for (Site site : sites_of(stack)) add_head_specs(out, c, site, l);
      if (stack == Stack::Encoder) {
        add_layer_norm(out, stack, l, "ln_attn", c.d_z);
      } else {
        add_layer_norm(out, stack, l, "ln_self", c.d_z);
        add_layer_norm(out, stack, l, "ln_cross", c.d_z);
      }
      add_layer_norm(out, stack, l, "ln_ff", c.d_z);
      add_layer_norm(out, stack, l, "ln_out", c.d_z);
      out.push_back({layer_param_name(stack, l, "ff.W_f"), {c.d_f, c.d_z}, Init::Xavier});
      out.push_back({layer_param_name(stack, l, "ff.b_f"), {c.d_f}, Init::Zeros});
      out.push_back({layer_param_name(stack, l, "ff.W_g"), {c.d_z, c.d_f}, Init::Xavier});
      out.push_back({layer_param_name(stack, l, "ff.b_g"), {c.d_z}, Init::Zeros});
    }
  }
  return out;
}

ParamMap init_params(const ModelConfig& config, std::uint64_t seed) {
  const CounterRng root(seed);
  ParamMap params;
  for (const ParamSpec& spec : parameter_layout(config)) {
    CounterRng rng = root.split(spec.name);
    Tensor t(spec.shape);
    switch (spec.init) {
      case Init::Normal01:
      case Init::Normal11: {
        std::normal_distribution<double> normal(spec.init == Init::Normal11 ? 1.0 : 0.0, 1.0);
        for (double& x : t.data()) x = normal(rng);
        break;
      }
      case Init::Xavier: {
        const double fan_out = static_cast<double>(spec.shape[0]);
        const double fan_in = static_cast<double>(spec.shape[1]);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& x : t.data()) x = (2.0 * rng.uniform() - 1.0) * bound;
        break;
      }
      case Init::Zeros:
        break;
      case Init::Ones:
        t.mat().setOnes();
        break;
    }
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

Tensor sinusoidal_positions(Index length, Index d_z) {
  RowMatrix P(length, d_z);
  for (Index t = 0; t < length; ++t) {
    for (Index j = 0; j < d_z; ++j) {
      const Index pair = j / 2;
      const double angle =
          static_cast<double>(t) / std::pow(10000.0, static_cast<double>(2 * pair) / static_cast<double>(d_z));
      P(t, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::matrix(std::move(P));
}

BoundModel::BoundModel(Tape& tape, const Model& model, bool requires_grad)
    : tape_(&tape), config_(&model.config) {
  for (const auto& [name, value] : model.params) vars_.emplace(name, tape.parameter(value, name, requires_grad));
}

std::vector<HeadParams> attention_params(const BoundModel& m, Site site, Index layer) {
  std::vector<HeadParams> heads;
  const bool roles = m.config().role_binding;
  for (Index h = 0; h < m.config().heads; ++h) {
    auto get = [&](std::string_view f) { return m[head_param_name(site, layer, h, f)]; };
    HeadParams p{get("W_q"), get("b_q"), get("W_k"), get("b_k"), get("W_v"), get("b_v"),
                 roles ? get("W_r") : Var{}, roles ? get("b_r") : Var{}, get("W_o"), get("b_o")};
    heads.push_back(p);
  }
  return heads;
}

Var embed_input(const BoundModel& m, const TokenMatrix& tokens) {
  const ModelConfig& c = m.config();
  const Index batch = tokens.rows(), length = tokens.cols();
  RowMatrix one_hot = RowMatrix::Zero(batch * length, c.vocab_size);
  for (Index b = 0; b < batch; ++b) {
    for (Index t = 0; t < length; ++t) {
      const int id = tokens(b, t);
      if (id < 0 || id >= c.vocab_size) {
        throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(c.vocab_size));
      }
      one_hot(b * length + t, id) = 1.0;
    }
  }
  const Tensor positions = sinusoidal_positions(length, c.d_z);
  RowMatrix tiled(batch * length, c.d_z);
  for (Index b = 0; b < batch; ++b) tiled.middleRows(b * length, length) = positions.mat();

  Tape& tape = m.tape();
  Var looked_up = matmul(tape.constant(Tensor::matrix(std::move(one_hot))), transpose(m["embedding.E"]));
  Var e = scale(looked_up, std::sqrt(static_cast<double>(c.d_z))) + tape.constant(Tensor::matrix(std::move(tiled)));
  if (!c.role_binding) return e;
  Var r = affine(e, m["input_role.W_p"], m["input_role.b_p"]);
  return hadamard(e, r);
}

Var compute_alpha(Var q, Var k, const Mask* mask) {
  if (q.cols() != k.cols()) {
    throw DimensionError("compute_alpha: query " + shape_string(q.shape()) + " and key " + shape_string(k.shape()) +
                         " differ in d_k");
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return softmax(scale(matmul(q, transpose(k)), inv_sqrt_dk), mask);
}

Var tpmha(Var queries, Var keys_values, std::span<const HeadParams> heads, const AttentionLayout& layout,
          bool role_binding, AttentionTrace* trace) {
  const Index H = static_cast<Index>(heads.size());
  const Index d_z = queries.cols();
  const Index dk = d_z / H;
  if (queries.rows() != layout.batch * layout.q_len || keys_values.rows() != layout.batch * layout.kv_len) {
    throw DimensionError("tpmha: rows " + shape_string(queries.shape()) + " / " + shape_string(keys_values.shape()) +
                         " do not match layout");
  }
  if (static_cast<Index>(layout.masks.size()) != layout.batch) {
    throw DimensionError("tpmha: expected one mask per sample");
  }

  // Stack the per-head maps so each projection is a single product.
  auto stacked = [&](auto member_w, auto member_b) {
    std::vector<Var> ws, bs;
    for (const HeadParams& h : heads) {
      ws.push_back(h.*member_w);
      bs.push_back(reshape(h.*member_b, {1, dk}));
    }
    return std::pair{concat_rows(ws), concat_cols(bs)};
  };
  auto [Wq, bq] = stacked(&HeadParams::W_q, &HeadParams::b_q);
  auto [Wk, bk] = stacked(&HeadParams::W_k, &HeadParams::b_k);
  auto [Wv, bv] = stacked(&HeadParams::W_v, &HeadParams::b_v);
  const Var Q = add_bias(matmul(queries, transpose(Wq)), reshape(bq, {d_z}));
  const Var K = add_bias(matmul(keys_values, transpose(Wk)), reshape(bk, {d_z}));
  const Var V = add_bias(matmul(keys_values, transpose(Wv)), reshape(bv, {d_z}));
  Var R;
  if (role_binding) {
    auto [Wr, br] = stacked(&HeadParams::W_r, &HeadParams::b_r);
    R = add_bias(matmul(queries, transpose(Wr)), reshape(br, {d_z}));
  }

  std::vector<RowMatrix> weights;
  const bool tracing = trace != nullptr;
  const Var fillers = block_attention(Q, K, V, H, layout.masks, tracing ? &weights : nullptr);
  const Var bound_all = role_binding ? hadamard(fillers, R) : fillers;
  if (tracing) {
    for (Index b = 0; b < layout.batch; ++b) {
      for (Index h = 0; h < H; ++h) {
        if (!trace->wants(layout.layer, layout.site, h)) continue;
        const auto rows = [&](Var x) { return RowMatrix(x.mat().block(b * layout.q_len, h * dk, layout.q_len, dk)); };
        trace->records.push_back({layout.layer, layout.site, h, b, std::move(weights[static_cast<std::size_t>(b * H + h)]),
                                  role_binding ? rows(R) : RowMatrix::Ones(layout.q_len, dk), rows(fillers)});
      }
    }
  }

  std::vector<Var> outs, out_biases;
  for (const HeadParams& h : heads) {
    outs.push_back(h.W_o);
    out_biases.push_back(h.b_o);
  }
  return add_bias(matmul(bound_all, transpose(concat_cols(outs))), sum_all(out_biases));
}

std::vector<Mask> key_padding_masks(std::span<const Index> key_lengths, Index q_len, Index kv_len) {
  std::vector<Mask> masks;
  masks.reserve(key_lengths.size());
  for (Index len : key_lengths) {
    if (len <= 0 || len > kv_len) throw DimensionError("key length " + std::to_string(len) + " out of range");
    Mask m = Mask::Constant(q_len, kv_len, false);
    m.leftCols(len).setConstant(true);
    masks.push_back(std::move(m));
  }
  return masks;
}

std::vector<Mask> causal_masks(Index batch, Index length) {
  Mask m(length, length);
  for (Index i = 0; i < length; ++i) {
    for (Index j = 0; j < length; ++j) m(i, j) = j <= i;
  }
  return std::vector<Mask>(batch, m);
}

Var feed_forward(const BoundModel& m, Stack stack, Index layer, Var x) {
  auto p = [&](std::string_view f) { return m[layer_param_name(stack, layer, f)]; };
  return affine(relu(affine(x, p("ff.W_f"), p("ff.b_f"))), p("ff.W_g"), p("ff.b_g"));
}

Var encoder_cell(const BoundModel& m, Var z, Index layer, const AttentionLayout& layout, AttentionTrace* trace) {
  const auto heads = attention_params(m, Site::EncoderSelf, layer);
  const Var normed = layer_norm_named(m, Stack::Encoder, layer, "ln_attn", z);
  AttentionLayout at = layout;
  at.layer = layer;
  at.site = Site::EncoderSelf;
  const Var h = z + tpmha(normed, normed, heads, at, m.config().role_binding, trace);
  const Var ff = feed_forward(m, Stack::Encoder, layer, layer_norm_named(m, Stack::Encoder, layer, "ln_ff", h));
  return layer_norm_named(m, Stack::Encoder, layer, "ln_out", h + ff);
}

Var decoder_cell(const BoundModel& m, Var z, Var encoder_final, Index layer, const AttentionLayout& self_layout,
                 const AttentionLayout& cross_layout, AttentionTrace* trace) {
  const bool roles = m.config().role_binding;
  AttentionLayout self_at = self_layout, cross_at = cross_layout;
  self_at.layer = cross_at.layer = layer;
  self_at.site = Site::DecoderSelf;
  cross_at.site = Site::DecoderCross;

  const Var a = layer_norm_named(m, Stack::Decoder, layer, "ln_self", z);
  const Var h1 = z + tpmha(a, a, attention_params(m, Site::DecoderSelf, layer), self_at, roles, trace);
  const Var c = layer_norm_named(m, Stack::Decoder, layer, "ln_cross", h1);
  const Var h2 =
      h1 + tpmha(c, encoder_final, attention_params(m, Site::DecoderCross, layer), cross_at, roles, trace);
  const Var ff = feed_forward(m, Stack::Decoder, layer, layer_norm_named(m, Stack::Decoder, layer, "ln_ff", h2));
  return layer_norm_named(m, Stack::Decoder, layer, "ln_out", h2 + ff);
}

Var output_logits(Var z_hat, Var embedding) { return matmul(z_hat, embedding); }

Var encode(const BoundModel& m, const TokenMatrix& src, std::span<const Index> src_lengths, AttentionTrace* trace) {
  const Index batch = src.rows(), length = src.cols();
  if (static_cast<Index>(src_lengths.size()) != batch) throw DimensionError("encode: one length per sample");
  const std::vector<Mask> masks = key_padding_masks(src_lengths, length, length);
  AttentionLayout layout{batch, length, length, masks, 0, Site::EncoderSelf};
  Var z = embed_input(m, src);
  for (Index l = 0; l < m.config().layers; ++l) z = encoder_cell(m, z, l, layout, trace);
  return z;
}

Var decode(const BoundModel& m, const TokenMatrix& tgt_in, Var encoder_final, Index src_len,
           std::span<const Index> src_lengths, AttentionTrace* trace) {
  const Index batch = tgt_in.rows(), length = tgt_in.cols();
  const std::vector<Mask> self_masks = causal_masks(batch, length);
  const std::vector<Mask> cross_masks = key_padding_masks(src_lengths, length, src_len);
  AttentionLayout self_layout{batch, length, length, self_masks, 0, Site::DecoderSelf};
  AttentionLayout cross_layout{batch, length, src_len, cross_masks, 0, Site::DecoderCross};
  Var z = embed_input(m, tgt_in);
  for (Index l = 0; l < m.config().layers; ++l) {
    z = decoder_cell(m, z, encoder_final, l, self_layout, cross_layout, trace);
  }
  return output_logits(z, m["embedding.E"]);
}

}  // namespace tpt
