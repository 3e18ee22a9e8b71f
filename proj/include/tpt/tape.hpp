#pragma once

#include "tpt/tensor.hpp"

#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tpt {

class Tape;

/// Handle to a node of a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  const RowMatrix& mat() const { return value().mat(); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Append-only computation record for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order because
/// a node can only reference nodes that already exist. A tape belongs to one
/// thread; independent tapes may run concurrently over shared, immutable
/// parameter tensors (see parameter()).
class Tape {
 public:
  /// Receives the output gradient and pushes contributions into the inputs
  /// through grad_sink().
  using BackwardFn = std::function<void(Tape&, const RowMatrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, std::string name, bool requires_grad = true);
  // Borrows `value`; it must outlive the tape and stay unmodified while in use.
  Var parameter(const Tensor& value, std::string name, bool requires_grad = true);

  /// Registers the result of a primitive. Drops `backward` when no input
  /// requires a gradient. Throws NumericalError on a non-finite result.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward, const char* op);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward, const char* op);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  /// Zero-initialized accumulator for node `id`, or nullptr when the node
  /// does not need a gradient.
  RowMatrix* grad_sink(int id);

  /// Runs the reverse sweep from a scalar loss and returns the gradient of
  /// every named leaf that requires one. Leaves the loss does not reach get
  /// zero gradients.
  std::map<std::string, Tensor> backward(Var loss);

  /// Gradient of any node after backward(); zeros if unreached.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    std::vector<int> inputs;
    BackwardFn backward;
    RowMatrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
    const char* op = "";
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // deque: node references survive growth
};

// ---------------------------------------------------------------------------
// Primitives. All of them are recorded on the tape of their first operand.

/// a[m x k] * b[k x n].
Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var relu(Var a);
Var scale(Var a, double factor);

/// x[n x d] + bias[d] broadcast over rows; the only broadcasting primitive.
Var add_bias(Var x, Var bias);

/// Row-wise softmax over the last axis. `mask` (same view shape as the
/// logits, true = keep) is optional; masked entries come out exactly 0.
Var softmax(Var logits, const Mask* mask = nullptr);

/// Scaled dot-product attention over row blocks. q is (batch*q_len) x
/// (heads*d), k and v are (batch*kv_len) x (heads*d); sample b uses row block
/// b and head h uses column block h. masks[b] is q_len x kv_len. Returns the
/// attention-weighted values laid out like q. `weights`, when given, receives
/// the softmax weights indexed b*heads + h.
Var block_attention(Var q, Var k, Var v, Index heads, std::span<const Mask> masks,
                    std::vector<RowMatrix>* weights = nullptr);

/// gain * (x - mean) / sqrt(var + eps) + bias, per row of the last axis.
Var layer_norm(Var x, Var gain, Var bias, double eps);

Var slice(Var x, Index row, Index rows, Index col, Index cols);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var sum(Var x);
Var reshape(Var x, Shape shape);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

/// x * W^T + b for W[out x in] and b[out]: the affine map used everywhere
/// in the model.
Var affine(Var x, Var weight, Var bias);

}  // namespace tpt
