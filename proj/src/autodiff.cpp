#include "impression/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "impression/error.hpp"

namespace impression {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape(), 0.0) {}

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 20> kOpNames{{
    {OpKind::constant, "constant"},
    {OpKind::parameter, "parameter"},
    {OpKind::matmul, "matmul"},
    {OpKind::bias_add, "bias_add"},
    {OpKind::conv2d, "conv2d"},
    {OpKind::max_pool, "max_pool"},
    {OpKind::global_avg_pool, "global_avg_pool"},
    {OpKind::relu, "relu"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::concat, "concat"},
    {OpKind::embedding_lookup, "embedding_lookup"},
    {OpKind::softmax, "softmax"},
    {OpKind::inner_product, "inner_product"},
    {OpKind::add, "add"},
    {OpKind::scale, "scale"},
    {OpKind::sum, "sum"},
    {OpKind::reshape, "reshape"},
    {OpKind::loss_mse, "loss_mse"},
    {OpKind::loss_cross_entropy, "loss_cross_entropy"},
    {OpKind::loss_kl_divergence, "loss_kl_divergence"},
}};

}  // namespace

std::string_view op_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames)
    if (k == kind) return name;
  return "unknown";
}

OpKind op_kind_from_name(std::string_view name) {
  for (const auto& [k, n] : kOpNames)
    if (n == name) return k;
  throw ValueError("unknown op-kind '" + std::string(name) + "'");
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::constant, std::move(value), {}, {}, {}, nullptr, false, false});
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{OpKind::parameter, p.value, {}, {}, {}, &p, p.trainable, false});
  return {this, nodes_.size() - 1};
}

Var Tape::record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (auto id : inputs) needs = needs || nodes_.at(id).needs_grad;
  nodes_.push_back(Node{kind, std::move(value), {}, std::move(inputs), std::move(backward), nullptr, needs, false});
  return {this, nodes_.size() - 1};
}

Tensor* Tape::grad_for_input(std::size_t self, std::size_t which) {
  Node& input = nodes_[nodes_[self].inputs.at(which)];
  if (!input.needs_grad) return nullptr;
  if (!input.has_grad) {
    input.grad = Tensor(input.value.shape(), 0.0);
    input.has_grad = true;
  }
  return &input.grad;
}

void Tape::run_backward(Var loss) {
  if (loss.tape != this) throw ValueError("backward: loss was recorded on a different tape");
  Node& root = nodes_.at(loss.id);
  if (root.value.size() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(root.value.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  visits_.clear();
  if (!root.needs_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  root.has_grad = true;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.needs_grad) continue;
    visits_.push_back(i);
    if (n.backward) n.backward(*this, i);
  }
}

void Tape::backward(Var loss) {
  run_backward(loss);
  for (auto& n : nodes_) {
    if (n.kind != OpKind::parameter || !n.has_grad || !n.param->trainable) continue;
    auto& dst = n.param->grad;
    if (dst.shape() != n.value.shape()) dst = Tensor(n.value.shape(), 0.0);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
  }
}

std::vector<std::pair<Parameter*, Tensor>> Tape::backward_collect(Var loss) {
  run_backward(loss);
  std::vector<std::pair<Parameter*, Tensor>> out;
  for (auto& n : nodes_) {
    if (n.kind != OpKind::parameter || !n.has_grad || !n.param->trainable) continue;
    out.emplace_back(n.param, std::move(n.grad));
    n.grad = Tensor();
    n.has_grad = false;
  }
  return out;
}

namespace ops {
namespace {

[[noreturn]] void mismatch(OpKind kind, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(kind)) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ValueError("operands live on different tapes");
  return *a.tape;
}

Tensor scalar_tensor(double v) { return Tensor::scalar(v); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) mismatch(OpKind::matmul, A.shape(), B.shape());
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Tensor out({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = &out[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * m];
      for (std::size_t j = 0; j < m; ++j) o[j] += av * brow[j];
    }
  }
  return tape.record(OpKind::matmul, std::move(out), {a.id, b.id}, [n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const auto& in = t.inputs(self);
    const Tensor& A = t.value(in[0]);
    const Tensor& B = t.value(in[1]);
    if (Tensor* da = t.grad_for_input(self, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* brow = &B[p * m];
          const double* grow = &g[i * m];
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
          (*da)[i * k + p] += s;
        }
    }
    if (Tensor* db = t.grad_for_input(self, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          double* drow = &(*db)[p * m];
          const double* grow = &g[i * m];
          for (std::size_t j = 0; j < m; ++j) drow[j] += av * grow[j];
        }
    }
  });
}

Var bias_add(Var x, Var bias) {
  Tape& tape = same_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (b.rank() != 1 || X.rank() == 0 || X.shape().back() != b.dim(0)) mismatch(OpKind::bias_add, X.shape(), b.shape());
  const std::size_t m = b.size();
  Tensor out = X;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % m];
  return tape.record(OpKind::bias_add, std::move(out), {x.id, bias.id}, [m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* dx = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
    if (Tensor* db = t.grad_for_input(self, 1))
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i % m] += g[i];
  });
}

Var conv2d(Var x, Var kernel, Conv2dOptions opt) {
  Tape& tape = same_tape(x, kernel);
  const Tensor& X = x.value();
  const Tensor& K = kernel.value();
  if (X.rank() != 3 || K.rank() != 4 || K.dim(2) != X.dim(2)) mismatch(OpKind::conv2d, X.shape(), K.shape());
  if (opt.stride == 0) throw ShapeError("conv2d: stride must be at least 1");
  const std::size_t H = X.dim(0), W = X.dim(1), C = X.dim(2);
  const std::size_t KH = K.dim(0), KW = K.dim(1), F = K.dim(3);
  const std::size_t p = opt.padding, s = opt.stride;
  if (KH > H + 2 * p || KW > W + 2 * p) mismatch(OpKind::conv2d, X.shape(), K.shape());
  const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;

  Tensor out({OH, OW, F}, 0.0);
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double* o = &out[(oy * OW + ox) * F];
      for (std::size_t ky = 0; ky < KH; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
        for (std::size_t kx = 0; kx < KW; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const double* xin = &X[(static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C];
          const double* kk = &K[((ky * KW + kx) * C) * F];
          for (std::size_t c = 0; c < C; ++c) {
            const double xv = xin[c];
            const double* kf = kk + c * F;
            for (std::size_t f = 0; f < F; ++f) o[f] += xv * kf[f];
          }
        }
      }
    }

  return tape.record(OpKind::conv2d, std::move(out), {x.id, kernel.id},
                     [=](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       const auto& in = t.inputs(self);
                       const Tensor& X = t.value(in[0]);
                       const Tensor& K = t.value(in[1]);
                       Tensor* dx = t.grad_for_input(self, 0);
                       Tensor* dk = t.grad_for_input(self, 1);
                       for (std::size_t oy = 0; oy < OH; ++oy)
                         for (std::size_t ox = 0; ox < OW; ++ox) {
                           const double* go = &g[(oy * OW + ox) * F];
                           for (std::size_t ky = 0; ky < KH; ++ky) {
                             const std::ptrdiff_t iy =
                                 static_cast<std::ptrdiff_t>(oy * s + ky) - static_cast<std::ptrdiff_t>(p);
                             if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                             for (std::size_t kx = 0; kx < KW; ++kx) {
                               const std::ptrdiff_t ix =
                                   static_cast<std::ptrdiff_t>(ox * s + kx) - static_cast<std::ptrdiff_t>(p);
                               if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                               const std::size_t xoff =
                                   (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * C;
                               const std::size_t koff = ((ky * KW + kx) * C) * F;
                               for (std::size_t c = 0; c < C; ++c) {
                                 const double* kf = &K[koff + c * F];
                                 if (dx) {
                                   double acc = 0.0;
                                   for (std::size_t f = 0; f < F; ++f) acc += go[f] * kf[f];
                                   (*dx)[xoff + c] += acc;
                                 }
                                 if (dk) {
                                   const double xv = X[xoff + c];
                                   if (xv == 0.0) continue;
                                   double* dkf = &(*dk)[koff + c * F];
                                   for (std::size_t f = 0; f < F; ++f) dkf[f] += xv * go[f];
                                 }
                               }
                             }
                           }
                         }
                     });
}

Var max_pool(Var x, PoolOptions opt) {
  Tape& tape = *x.tape;
  const Tensor& X = x.value();
  if (X.rank() != 3) throw ShapeError("max_pool: expected [H,W,C] input, got " + shape_string(X.shape()));
  if (opt.window == 0 || opt.stride == 0) throw ShapeError("max_pool: window and stride must be positive");
  const std::size_t H = X.dim(0), W = X.dim(1), C = X.dim(2);
  if (opt.window > H || opt.window > W)
    throw ShapeError("max_pool: window " + std::to_string(opt.window) + " larger than input " +
                     shape_string(X.shape()));
  const std::size_t OH = (H - opt.window) / opt.stride + 1, OW = (W - opt.window) / opt.stride + 1;
  Tensor out({OH, OW, C}, 0.0);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox)
      for (std::size_t c = 0; c < C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t wy = 0; wy < opt.window; ++wy)
          for (std::size_t wx = 0; wx < opt.window; ++wx) {
            const std::size_t idx = ((oy * opt.stride + wy) * W + (ox * opt.stride + wx)) * C + c;
            if (X[idx] > best) {
              best = X[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (oy * OW + ox) * C + c;
        out[o] = best;
        argmax[o] = best_idx;
      }
  return tape.record(OpKind::max_pool, std::move(out), {x.id},
                     [argmax = std::move(argmax)](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       if (Tensor* dx = t.grad_for_input(self, 0))
                         for (std::size_t o = 0; o < g.size(); ++o) (*dx)[argmax[o]] += g[o];
                     });
}

Var global_avg_pool(Var x) {
  Tape& tape = *x.tape;
  const Tensor& X = x.value();
  if (X.rank() != 3) throw ShapeError("global_avg_pool: expected [H,W,C] input, got " + shape_string(X.shape()));
  const std::size_t C = X.dim(2), cells = X.dim(0) * X.dim(1);
  Tensor out({C}, 0.0);
  for (std::size_t i = 0; i < cells; ++i)
    for (std::size_t c = 0; c < C; ++c) out[c] += X[i * C + c];
  for (std::size_t c = 0; c < C; ++c) out[c] /= static_cast<double>(cells);
  return tape.record(OpKind::global_avg_pool, std::move(out), {x.id}, [C, cells](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* dx = t.grad_for_input(self, 0)) {
      const double inv = 1.0 / static_cast<double>(cells);
      for (std::size_t i = 0; i < cells; ++i)
        for (std::size_t c = 0; c < C; ++c) (*dx)[i * C + c] += g[c] * inv;
    }
  });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(OpKind::relu, std::move(out), {x.id}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    if (Tensor* dx = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (y[i] > 0.0) (*dx)[i] += g[i];
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return x.tape->record(OpKind::sigmoid, std::move(out), {x.id}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    if (Tensor* dx = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var concat(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() == 0 || A.rank() != B.rank() ||
      !std::equal(A.shape().begin(), A.shape().end() - 1, B.shape().begin()))
    mismatch(OpKind::concat, A.shape(), B.shape());
  const std::size_t da = A.shape().back(), db = B.shape().back(), rows = A.size() / da;
  Shape shape = A.shape();
  shape.back() = da + db;
  Tensor out(shape, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&A[r * da], da, &out[r * (da + db)]);
    std::copy_n(&B[r * db], db, &out[r * (da + db) + da]);
  }
  return tape.record(OpKind::concat, std::move(out), {a.id, b.id}, [=](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* ga = t.grad_for_input(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < da; ++i) (*ga)[r * da + i] += g[r * (da + db) + i];
    if (Tensor* gb = t.grad_for_input(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < db; ++i) (*gb)[r * db + i] += g[r * (da + db) + da + i];
  });
}

Var embedding_lookup(Var table, std::span<const std::size_t> rows) {
  const Tensor& T = table.value();
  if (T.rank() != 2) throw ShapeError("embedding_lookup: table must be [V,D], got " + shape_string(T.shape()));
  if (rows.empty()) throw ShapeError("embedding_lookup: no rows requested");
  const std::size_t V = T.dim(0), D = T.dim(1);
  Tensor out({rows.size(), D}, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= V)
      throw ShapeError("embedding_lookup: row " + std::to_string(rows[i]) + " outside table " + shape_string(T.shape()));
    std::copy_n(&T[rows[i] * D], D, &out[i * D]);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return table.tape->record(OpKind::embedding_lookup, std::move(out), {table.id},
                            [idx = std::move(idx), D](Tape& t, std::size_t self) {
                              const Tensor& g = t.grad(self);
                              if (Tensor* dt = t.grad_for_input(self, 0))
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                  for (std::size_t d = 0; d < D; ++d) (*dt)[idx[i] * D + d] += g[i * D + d];
                            });
}

Var softmax(Var logits) {
  const Tensor& Z = logits.value();
  if (Z.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t k = Z.shape().back(), rows = Z.size() / k;
  Tensor out = Z;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &out[r * k];
    const double mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      row[i] = std::exp(row[i] - mx);
      total += row[i];
    }
    for (std::size_t i = 0; i < k; ++i) row[i] /= total;
  }
  return logits.tape->record(OpKind::softmax, std::move(out), {logits.id}, [k, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& p = t.value(self);
    if (Tensor* dz = t.grad_for_input(self, 0))
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < k; ++i) dot += g[r * k + i] * p[r * k + i];
        for (std::size_t i = 0; i < k; ++i) (*dz)[r * k + i] += p[r * k + i] * (g[r * k + i] - dot);
      }
  });
}

Var inner_product(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (B.rank() != 1 || A.rank() == 0 || A.rank() > 2 || A.shape().back() != B.dim(0))
    mismatch(OpKind::inner_product, A.shape(), B.shape());
  const std::size_t k = B.size(), rows = A.size() / k;
  Tensor out = A.rank() == 1 ? Tensor::scalar(0.0) : Tensor({rows}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += A[r * k + i] * B[i];
    out[r] = s;
  }
  return tape.record(OpKind::inner_product, std::move(out), {a.id, b.id}, [k, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const auto& in = t.inputs(self);
    const Tensor& A = t.value(in[0]);
    const Tensor& B = t.value(in[1]);
    if (Tensor* da = t.grad_for_input(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < k; ++i) (*da)[r * k + i] += g[r] * B[i];
    if (Tensor* db = t.grad_for_input(self, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < k; ++i) (*db)[i] += g[r] * A[r * k + i];
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) mismatch(OpKind::add, A.shape(), B.shape());
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return tape.record(OpKind::add, std::move(out), {a.id, b.id}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t which = 0; which < 2; ++which)
      if (Tensor* d = t.grad_for_input(self, which))
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= factor;
  return x.tape->record(OpKind::scale, std::move(out), {x.id}, [factor](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* d = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i] * factor;
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(OpKind::sum, scalar_tensor(s), {x.id}, [](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    if (Tensor* d = t.grad_for_input(self, 0))
      for (auto& v : d->storage()) v += g;
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape->record(OpKind::reshape, std::move(out), {x.id}, [](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* d = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

Var mse(Var pred, Var target) {
  Tape& tape = same_tape(pred, target);
  const Tensor& P = pred.value();
  const Tensor& Y = target.value();
  if (P.shape() != Y.shape()) mismatch(OpKind::loss_mse, P.shape(), Y.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) s += (P[i] - Y[i]) * (P[i] - Y[i]);
  const double n = static_cast<double>(P.size());
  return tape.record(OpKind::loss_mse, scalar_tensor(s / n), {pred.id, target.id}, [n](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const auto& in = t.inputs(self);
    const Tensor& P = t.value(in[0]);
    const Tensor& Y = t.value(in[1]);
    if (Tensor* dp = t.grad_for_input(self, 0))
      for (std::size_t i = 0; i < P.size(); ++i) (*dp)[i] += g * 2.0 * (P[i] - Y[i]) / n;
    if (Tensor* dy = t.grad_for_input(self, 1))
      for (std::size_t i = 0; i < P.size(); ++i) (*dy)[i] -= g * 2.0 * (P[i] - Y[i]) / n;
  });
}

namespace {

// Gradient of -sum(y * log(p + floor)) / rows with respect to p; shared by
// cross-entropy and KL, which differ only by a term constant in p.
void log_loss_backward(Tape& t, std::size_t self, std::size_t target_input, std::size_t pred_input,
                       std::size_t rows, bool target_grad) {
  const double g = t.grad(self)[0];
  const auto& in = t.inputs(self);
  const Tensor& Y = t.value(in[target_input]);
  const Tensor& P = t.value(in[pred_input]);
  const double n = static_cast<double>(rows);
  if (Tensor* dp = t.grad_for_input(self, pred_input))
    for (std::size_t i = 0; i < P.size(); ++i) (*dp)[i] -= g * Y[i] / (P[i] + kLogFloor) / n;
  if (!target_grad) return;
  // y log((y+f)/(p+f)); zero entries contribute nothing to the forward value
  if (Tensor* dy = t.grad_for_input(self, target_input))
    for (std::size_t i = 0; i < Y.size(); ++i)
      if (Y[i] > 0.0)
        (*dy)[i] += g * (std::log((Y[i] + kLogFloor) / (P[i] + kLogFloor)) + Y[i] / (Y[i] + kLogFloor)) / n;
}

void check_distribution_rows(OpKind kind, const Tensor& d, std::string_view role) {
  const std::size_t k = d.shape().back(), rows = d.size() / k;
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double v = d[r * k + i];
      if (!(v >= 0.0)) throw ValueError(std::string(op_name(kind)) + ": negative entry in " + std::string(role));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-6)
      throw ValueError(std::string(op_name(kind)) + ": " + std::string(role) + " row " + std::to_string(r) +
                       " sums to " + std::to_string(total));
  }
}

}  // namespace

Var cross_entropy(Var pred, Var onehot) {
  Tape& tape = same_tape(pred, onehot);
  const Tensor& P = pred.value();
  const Tensor& Y = onehot.value();
  if (P.shape() != Y.shape() || P.rank() == 0) mismatch(OpKind::loss_cross_entropy, P.shape(), Y.shape());
  check_distribution_rows(OpKind::loss_cross_entropy, P, "prediction");
  const std::size_t k = P.shape().back(), rows = P.size() / k;
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const double y = Y[r * k + i];
      if (y == 1.0)
        ++ones;
      else if (y != 0.0)
        throw ValueError("loss_cross_entropy: target row " + std::to_string(r) + " is not one-hot");
      s -= y * std::log(P[r * k + i] + kLogFloor);
    }
    if (ones != 1)
      throw ValueError("loss_cross_entropy: target row " + std::to_string(r) + " has " + std::to_string(ones) +
                       " ones");
  }
  return tape.record(OpKind::loss_cross_entropy, scalar_tensor(s / static_cast<double>(rows)), {pred.id, onehot.id},
                     [rows](Tape& t, std::size_t self) { log_loss_backward(t, self, 1, 0, rows, false); });
}

Var kl_divergence(Var target, Var pred) {
  Tape& tape = same_tape(target, pred);
  const Tensor& Y = target.value();
  const Tensor& P = pred.value();
  if (P.shape() != Y.shape() || P.rank() == 0) mismatch(OpKind::loss_kl_divergence, Y.shape(), P.shape());
  check_distribution_rows(OpKind::loss_kl_divergence, Y, "target");
  check_distribution_rows(OpKind::loss_kl_divergence, P, "prediction");
  const std::size_t k = P.shape().back(), rows = P.size() / k;
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i)
    if (Y[i] > 0.0) s += Y[i] * std::log((Y[i] + kLogFloor) / (P[i] + kLogFloor));
  (void)k;
  return tape.record(OpKind::loss_kl_divergence, scalar_tensor(s / static_cast<double>(rows)), {target.id, pred.id},
                     [rows](Tape& t, std::size_t self) { log_loss_backward(t, self, 0, 1, rows, true); });
}

}  // namespace ops

Var primitive_forward(OpKind kind, std::span<const Var> in, const OpAttributes& attrs) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw ValueError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::matmul: arity(2); return ops::matmul(in[0], in[1]);
    case OpKind::bias_add: arity(2); return ops::bias_add(in[0], in[1]);
    case OpKind::conv2d: arity(2); return ops::conv2d(in[0], in[1], attrs.conv);
    case OpKind::max_pool: arity(1); return ops::max_pool(in[0], attrs.pool);
    case OpKind::global_avg_pool: arity(1); return ops::global_avg_pool(in[0]);
    case OpKind::relu: arity(1); return ops::relu(in[0]);
    case OpKind::sigmoid: arity(1); return ops::sigmoid(in[0]);
    case OpKind::concat: arity(2); return ops::concat(in[0], in[1]);
    case OpKind::embedding_lookup: arity(1); return ops::embedding_lookup(in[0], attrs.rows);
    case OpKind::softmax: arity(1); return ops::softmax(in[0]);
    case OpKind::inner_product: arity(2); return ops::inner_product(in[0], in[1]);
    case OpKind::add: arity(2); return ops::add(in[0], in[1]);
    case OpKind::scale: arity(1); return ops::scale(in[0], attrs.factor);
    case OpKind::sum: arity(1); return ops::sum(in[0]);
    case OpKind::reshape: arity(1); return ops::reshape(in[0], attrs.shape);
    case OpKind::loss_mse: arity(2); return ops::mse(in[0], in[1]);
    case OpKind::loss_cross_entropy: arity(2); return ops::cross_entropy(in[0], in[1]);
    case OpKind::loss_kl_divergence: arity(2); return ops::kl_divergence(in[0], in[1]);
    case OpKind::constant:
    case OpKind::parameter: break;
  }
  throw ValueError("unknown op-kind '" + std::string(op_name(kind)) + "' for primitive_forward");
}

}  // namespace impression
