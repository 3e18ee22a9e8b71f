#include "tpt/errors.hpp"
#include "tpt/tape.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace tpt {
namespace {

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Shape matrix_shape(Index rows, Index cols) { return Shape{rows, cols}; }

}  // namespace

Var matmul(Var a, Var b) {
  const RowMatrix& A = a.mat();
  const RowMatrix& B = b.mat();
  if (a.value().rank() > 2 || b.value().rank() > 2 || A.cols() != B.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  Shape shape = matrix_shape(A.rows(), B.cols());
  RowMatrix C(A.rows(), B.cols());
  C.noalias() = A * B;
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      Tensor(std::move(shape), std::move(C)), {a, b},
      [ia, ib](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) ga->noalias() += g * t.value(ib).mat().transpose();
        if (RowMatrix* gb = t.grad_sink(ib)) gb->noalias() += t.value(ia).mat().transpose() * g;
      },
      "matmul");
}

Var transpose(Var a) {
  Shape shape = matrix_shape(a.cols(), a.rows());
  RowMatrix T = a.mat().transpose();
  const int ia = a.id();
  return a.tape().record(
      Tensor(std::move(shape), std::move(T)), {a},
      [ia](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) *ga += g.transpose();
      },
      "transpose");
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  RowMatrix C = a.mat() + b.mat();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      Tensor(a.shape(), std::move(C)), {a, b},
      [ia, ib](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) *ga += g;
        if (RowMatrix* gb = t.grad_sink(ib)) *gb += g;
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  RowMatrix C = a.mat() - b.mat();
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      Tensor(a.shape(), std::move(C)), {a, b},
      [ia, ib](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) *ga += g;
        if (RowMatrix* gb = t.grad_sink(ib)) *gb -= g;
      },
      "sub");
}

Var hadamard(Var a, Var b) {
  require_same_shape("hadamard", a, b);
  RowMatrix C = a.mat().cwiseProduct(b.mat());
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      Tensor(a.shape(), std::move(C)), {a, b},
      [ia, ib](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) *ga += g.cwiseProduct(t.value(ib).mat());
        if (RowMatrix* gb = t.grad_sink(ib)) *gb += g.cwiseProduct(t.value(ia).mat());
      },
      "hadamard");
}

Var relu(Var a) {
  RowMatrix C = a.mat().cwiseMax(0.0);
  const int ia = a.id();
  return a.tape().record(
      Tensor(a.shape(), std::move(C)), {a},
      [ia](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) {
          *ga += (t.value(ia).mat().array() > 0.0).select(g, 0.0).matrix();
        }
      },
      "relu");
}

Var scale(Var a, double factor) {
  RowMatrix C = a.mat() * factor;
  const int ia = a.id();
  return a.tape().record(
      Tensor(a.shape(), std::move(C)), {a},
      [ia, factor](Tape& t, const RowMatrix& g) {
        if (RowMatrix* ga = t.grad_sink(ia)) *ga += g * factor;
      },
      "scale");
}

Var add_bias(Var x, Var bias) {
  const RowMatrix& X = x.mat();
  const RowMatrix& b = bias.mat();
  if (b.rows() != 1 || b.cols() != X.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match rows of " +
                         shape_string(x.shape()));
  }
  RowMatrix C = X.rowwise() + b.row(0);
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(
      Tensor(x.shape(), std::move(C)), {x, bias},
      [ix, ib](Tape& t, const RowMatrix& g) {
        if (RowMatrix* gx = t.grad_sink(ix)) *gx += g;
        if (RowMatrix* gb = t.grad_sink(ib)) *gb += g.colwise().sum();
      },
      "add_bias");
}

namespace {

constexpr double kMasked = -1e30;

// Masked rows are filled with the surrogate before normalization and with
// exact zeros after.
template <typename Logits>
void masked_softmax_into(const Logits& X, const Mask* mask, RowMatrix& Y) {
  Y.resize(X.rows(), X.cols());
  for (Index i = 0; i < X.rows(); ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < X.cols(); ++j) {
      const double v = (mask && !(*mask)(i, j)) ? kMasked : X(i, j);
      Y(i, j) = v;
      if (!mask || (*mask)(i, j)) peak = std::max(peak, v);
    }
    if (peak == -std::numeric_limits<double>::infinity()) {
      throw DegenerateMaskError("softmax: row " + std::to_string(i) + " is fully masked");
    }
    double total = 0.0;
    for (Index j = 0; j < X.cols(); ++j) {
      const double e = (mask && !(*mask)(i, j)) ? 0.0 : std::exp(Y(i, j) - peak);
      Y(i, j) = e;
      total += e;
    }
    Y.row(i) /= total;
  }
}

}  // namespace

Var softmax(Var logits, const Mask* mask) {
  const RowMatrix& X = logits.mat();
  if (mask && (mask->rows() != X.rows() || mask->cols() != X.cols())) {
    throw DimensionError("softmax: mask " + std::to_string(mask->rows()) + "x" + std::to_string(mask->cols()) +
                         " does not match logits " + shape_string(logits.shape()));
  }
  RowMatrix Y;
  masked_softmax_into(X, mask, Y);
  const int ix = logits.id();
  // The result lands at the next free slot; the closure reads it back.
  const int iy = static_cast<int>(logits.tape().size());
  return logits.tape().record(
      Tensor(logits.shape(), std::move(Y)), {logits},
      [ix, iy](Tape& t, const RowMatrix& g) {
        RowMatrix* gx = t.grad_sink(ix);
        if (!gx) return;
        const RowMatrix& y = t.value(iy).mat();
        const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        *gx += (y.array() * (g.colwise() - dot).array()).matrix();
      },
      "softmax");
}

Var block_attention(Var q, Var k, Var v, Index heads, std::span<const Mask> masks,
                    std::vector<RowMatrix>* weights) {
  const auto batch = static_cast<Index>(masks.size());
  if (batch == 0 || heads <= 0) throw DimensionError("block_attention: need at least one sample and one head");
  const RowMatrix& Q = q.mat();
  const RowMatrix& K = k.mat();
  const RowMatrix& V = v.mat();
  if (Q.cols() != K.cols() || K.cols() != V.cols() || K.rows() != V.rows() || Q.cols() % heads != 0 ||
      Q.rows() % batch != 0 || K.rows() % batch != 0) {
    throw DimensionError("block_attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) +
                         ", v " + shape_string(v.shape()) + " do not split into " + std::to_string(batch) +
                         " samples x " + std::to_string(heads) + " heads");
  }
  const Index q_len = Q.rows() / batch;
  const Index kv_len = K.rows() / batch;
  const Index d = Q.cols() / heads;
  for (const Mask& m : masks) {
    if (m.rows() != q_len || m.cols() != kv_len) throw DimensionError("block_attention: mask shape mismatch");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // alpha[b * heads + h] is q_len x kv_len.
  auto alpha = std::make_shared<std::vector<RowMatrix>>(static_cast<std::size_t>(batch * heads));
  RowMatrix out(Q.rows(), Q.cols());
  RowMatrix scores(q_len, kv_len);
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      scores.noalias() = Q.block(b * q_len, h * d, q_len, d) * K.block(b * kv_len, h * d, kv_len, d).transpose();
      scores *= inv_sqrt_d;
      RowMatrix& a = (*alpha)[static_cast<std::size_t>(b * heads + h)];
      masked_softmax_into(scores, &masks[static_cast<std::size_t>(b)], a);
      out.block(b * q_len, h * d, q_len, d).noalias() = a * V.block(b * kv_len, h * d, kv_len, d);
    }
  }
  if (weights) *weights = *alpha;

  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      Tensor(q.shape(), std::move(out)), {q, k, v},
      [iq, ik, iv, alpha, batch, heads, q_len, kv_len, d, inv_sqrt_d](Tape& t, const RowMatrix& g) {
        RowMatrix* gq = t.grad_sink(iq);
        RowMatrix* gk = t.grad_sink(ik);
        RowMatrix* gv = t.grad_sink(iv);
        const RowMatrix& Q = t.value(iq).mat();
        const RowMatrix& K = t.value(ik).mat();
        const RowMatrix& V = t.value(iv).mat();
        RowMatrix d_alpha(q_len, kv_len);
        RowMatrix d_scores(q_len, kv_len);
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const RowMatrix& a = (*alpha)[static_cast<std::size_t>(b * heads + h)];
            const auto g_out = g.block(b * q_len, h * d, q_len, d);
            if (gv) gv->block(b * kv_len, h * d, kv_len, d).noalias() += a.transpose() * g_out;
            if (!gq && !gk) continue;
            d_alpha.noalias() = g_out * V.block(b * kv_len, h * d, kv_len, d).transpose();
            const Eigen::VectorXd dot = d_alpha.cwiseProduct(a).rowwise().sum();
            d_scores = (a.array() * (d_alpha.colwise() - dot).array()).matrix() * inv_sqrt_d;
            if (gq) gq->block(b * q_len, h * d, q_len, d).noalias() += d_scores * K.block(b * kv_len, h * d, kv_len, d);
            if (gk) {
              gk->block(b * kv_len, h * d, kv_len, d).noalias() +=
                  d_scores.transpose() * Q.block(b * q_len, h * d, q_len, d);
            }
          }
        }
      },
      "block_attention");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const RowMatrix& X = x.mat();
  const Index d = X.cols();
  if (gain.mat().rows() != 1 || gain.mat().cols() != d || bias.mat().rows() != 1 || bias.mat().cols() != d) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match " + shape_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");

  RowMatrix xhat(X.rows(), d);
  Eigen::VectorXd inv_std(X.rows());
  for (Index i = 0; i < X.rows(); ++i) {
    const double mean = X.row(i).mean();
    const double var = (X.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mean) * inv_std(i);
  }
  RowMatrix Y = (xhat.array().rowwise() * gain.mat().row(0).array()).matrix();
  Y.rowwise() += bias.mat().row(0);

  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      Tensor(x.shape(), std::move(Y)), {x, gain, bias},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const RowMatrix& g) {
        if (RowMatrix* gg = t.grad_sink(ig)) *gg += g.cwiseProduct(xhat).colwise().sum();
        if (RowMatrix* gb = t.grad_sink(ib)) *gb += g.colwise().sum();
        RowMatrix* gx = t.grad_sink(ix);
        if (!gx) return;
        const RowMatrix dxhat = (g.array().rowwise() * t.value(ig).mat().row(0).array()).matrix();
        const double n = static_cast<double>(xhat.cols());
        for (Index i = 0; i < xhat.rows(); ++i) {
          const double s1 = dxhat.row(i).sum();
          const double s2 = dxhat.row(i).dot(xhat.row(i));
          gx->row(i).array() +=
              (inv_std(i) / n) * (n * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
        }
      },
      "layer_norm");
}

Var slice(Var x, Index row, Index rows, Index col, Index cols) {
  const RowMatrix& X = x.mat();
  if (row < 0 || col < 0 || rows <= 0 || cols <= 0 || row + rows > X.rows() || col + cols > X.cols()) {
    throw DimensionError("slice [" + std::to_string(row) + "+" + std::to_string(rows) + ", " +
                         std::to_string(col) + "+" + std::to_string(cols) + "] out of range for " +
                         shape_string(x.shape()));
  }
  RowMatrix B = X.block(row, col, rows, cols);
  const int ix = x.id();
  return x.tape().record(
      Tensor(matrix_shape(rows, cols), std::move(B)), {x},
      [ix, row, rows, col, cols](Tape& t, const RowMatrix& g) {
        if (RowMatrix* gx = t.grad_sink(ix)) gx->block(row, col, rows, cols) += g;
      },
      "slice");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no operands");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.rows();
  }
  RowMatrix C(rows, cols);
  std::vector<int> ids;
  ids.reserve(parts.size());
  Index at = 0;
  for (const Var& p : parts) {
    C.middleRows(at, p.rows()) = p.mat();
    at += p.rows();
    ids.push_back(p.id());
  }
  return parts.front().tape().record(
      Tensor(matrix_shape(rows, cols), std::move(C)), parts,
      [ids = std::move(ids)](Tape& t, const RowMatrix& g) {
        Index at = 0;
        for (int id : ids) {
          const Index n = t.value(id).rows();
          if (RowMatrix* gp = t.grad_sink(id)) *gp += g.middleRows(at, n);
          at += n;
        }
      },
      "concat_rows");
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no operands");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    cols += p.cols();
  }
  RowMatrix C(rows, cols);
  std::vector<int> ids;
  ids.reserve(parts.size());
  Index at = 0;
  for (const Var& p : parts) {
    C.middleCols(at, p.cols()) = p.mat();
    at += p.cols();
    ids.push_back(p.id());
  }
  return parts.front().tape().record(
      Tensor(matrix_shape(rows, cols), std::move(C)), parts,
      [ids = std::move(ids)](Tape& t, const RowMatrix& g) {
        Index at = 0;
        for (int id : ids) {
          const Index n = t.value(id).cols();
          if (RowMatrix* gp = t.grad_sink(id)) *gp += g.middleCols(at, n);
          at += n;
        }
      },
      "concat_cols");
}

Var sum(Var x) {
  const int ix = x.id();
  return x.tape().record(
      Tensor::scalar(x.mat().sum()), {x},
      [ix](Tape& t, const RowMatrix& g) {
        if (RowMatrix* gx = t.grad_sink(ix)) gx->array() += g(0, 0);
      },
      "sum");
}

Var reshape(Var x, Shape shape) {
  Tensor r = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape().record(
      std::move(r), {x},
      [ix](Tape& t, const RowMatrix& g) {
        RowMatrix* gx = t.grad_sink(ix);
        if (!gx) return;
        gx->reshaped<Eigen::RowMajor>() += g.reshaped<Eigen::RowMajor>();
      },
      "reshape");
}

Var affine(Var x, Var weight, Var bias) { return add_bias(matmul(x, transpose(weight)), bias); }

}  // namespace tpt
