#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "impression/tensor.hpp"

namespace impression {

/// A trainable value plus its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name, Tensor value);

  void zero_grad() { grad.fill(0.0); }
};

enum class OpKind {
  constant,
  parameter,
  matmul,
  bias_add,
  conv2d,
  max_pool,
  global_avg_pool,
  relu,
  sigmoid,
  concat,
  embedding_lookup,
  softmax,
  inner_product,
  add,
  scale,
  sum,
  reshape,
  loss_mse,
  loss_cross_entropy,
  loss_kl_divergence,
};

std::string_view op_name(OpKind kind);
/// Throws ValueError for names that are not a known op-kind.
OpKind op_kind_from_name(std::string_view name);

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run recording of primitive ops. A fresh tape is used for every
/// forward pass; backward walks the records in reverse execution order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  /// Records an op. `backward` receives the node index; it reads grad(self)
  /// and accumulates into the gradients of its inputs via grad_for_input.
  Var record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of an input of `self`, or nullptr when that input does
  /// not lead to any trainable parameter.
  Tensor* grad_for_input(std::size_t self, std::size_t which);

  /// Backpropagates a scalar loss and accumulates into Parameter::grad of
  /// every trainable parameter reachable from it.
  void backward(Var loss);

  /// Same traversal, but returns the parameter gradients instead of writing
  /// them, so independent tapes can be reduced in a fixed order.
  std::vector<std::pair<Parameter*, Tensor>> backward_collect(Var loss);

  /// Node ids visited by the last backward call, in visit order.
  const std::vector<std::size_t>& last_visit_order() const noexcept { return visits_; }

 private:
  struct Node {
    OpKind kind;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
    bool has_grad = false;
  };

  void run_backward(Var loss);

  std::vector<Node> nodes_;
  std::vector<std::size_t> visits_;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct PoolOptions {
  std::size_t window = 2;
  std::size_t stride = 2;
};

namespace ops {

/// [N,K] x [K,M] -> [N,M].
Var matmul(Var a, Var b);
/// Adds bias [M] to every row of [...,M].
Var bias_add(Var x, Var bias);
/// Cross-correlation of an [H,W,C] input with an [KH,KW,C,F] kernel.
Var conv2d(Var x, Var kernel, Conv2dOptions options);
Var max_pool(Var x, PoolOptions options);
/// [H,W,C] -> [C].
Var global_avg_pool(Var x);
Var relu(Var x);
Var sigmoid(Var x);
/// Concatenates along the last (feature) axis; leading dims must agree.
Var concat(Var a, Var b);
/// Rows of a [V,D] table selected by `rows` -> [N,D].
Var embedding_lookup(Var table, std::span<const std::size_t> rows);
/// Softmax over the last axis.
Var softmax(Var logits);
/// [K].[K] -> scalar, or [N,K].[K] -> [N].
Var inner_product(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var x, double factor);
Var sum(Var x);
Var reshape(Var x, Shape shape);

/// Mean of squared differences.
Var mse(Var pred, Var target);
/// -sum(onehot * log(pred + floor)) averaged over rows.
Var cross_entropy(Var pred, Var onehot);
/// sum(y * log((y + floor) / (p + floor))) averaged over rows.
Var kl_divergence(Var target, Var pred);

}  // namespace ops

/// Floor added inside log() by the cross-entropy and KL losses.
inline constexpr double kLogFloor = 1e-12;

/// Attributes for the generic dispatcher; only the fields relevant to the
/// op-kind are read.
struct OpAttributes {
  Conv2dOptions conv;
  PoolOptions pool;
  double factor = 1.0;
  Shape shape;
  std::vector<std::size_t> rows;
};

/// Dispatches a primitive by kind. Throws ShapeError for incompatible inputs
/// and ValueError for op-kinds that are not primitives.
Var primitive_forward(OpKind kind, std::span<const Var> inputs, const OpAttributes& attrs = {});

}  // namespace impression
