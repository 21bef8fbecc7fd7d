#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ami/tensor.hpp"

namespace ami::ad {

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  Shift,
  MatVec,
  MatVecT,
  MatMul,
  Tanh,
  Sigmoid,
  Relu,
  Softplus,
  Exp,
  Log,
  Softmax,
  LogSoftmax,
  Concat,
  Slice,
  Row,
  Gather,
  Stack,
  Sum,
  Mean,
  L2Norm,
  Dot,
};

const char* op_name(Op op) noexcept;

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  double item() const { return value().item(); }
  const Shape& shape() const { return value().shape(); }
};

/// Records primitive operations in evaluation order and runs reverse-mode
/// differentiation over them. A tape is single-threaded and single-use:
/// build the graph, call backward once, read gradients.
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var constant(double value) { return constant(Tensor::scalar(value)); }

  /// Differentiable named leaf. Registering the same name twice returns the
  /// existing node.
  Var param(const std::string& name, const Tensor& value);

  /// Reverse sweep from a scalar output. Throws std::invalid_argument when the
  /// output is not a single-element node.
  void backward(Var output);

  /// Gradient of the last backward output w.r.t. a node; zeros if the node
  /// does not influence it.
  Tensor grad(Var v) const;

  /// Gradients for every named parameter, keyed by name.
  NamedTensors param_grads() const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  Op op(int id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }
  std::span<const int> inputs(int id) const { return nodes_.at(static_cast<std::size_t>(id)).inputs; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  // Used by the primitive constructors.
  Var record(Op op, std::vector<int> inputs, Tensor value, std::size_t aux = 0, double scalar = 0.0,
             std::vector<std::size_t> indices = {});

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Tensor value;
    std::size_t aux = 0;
    double scalar = 0.0;
    std::vector<std::size_t> indices;
    bool requires_grad = false;
  };

  void propagate(const Node& node, const Tensor& upstream);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, int> params_;
};

// Primitives. Every operand must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var shift(Var a, double c);
Var matvec(Var m, Var x);    // [r,c] x [c] -> [r]
Var matvec_t(Var m, Var x);  // [r,c]^T x [r] -> [c]
Var matmul(Var a, Var b);    // [n,k] x [k,m] -> [n,m]
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var softmax(Var a);      // rank-1
Var log_softmax(Var a);  // rank-1
Var concat(std::span<const Var> parts);  // rank-1 pieces
Var concat(Var a, Var b);
Var slice(Var a, std::size_t offset, std::size_t length);  // rank-1
Var row(Var m, std::size_t r);                              // [r,c] -> [c]
Var gather(Var a, std::vector<std::size_t> indices);        // rank-1 -> rank-1
Var pick(Var a, std::size_t index);                         // rank-1 -> scalar
Var stack(std::span<const Var> rows);                       // n x [c] -> [n,c]
Var sum(Var a);
Var mean(Var a);
Var l2norm(Var a);
Var dot(Var a, Var b);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator*(double c, Var a);

/// Scalar-valued function of named parameters, built on a fresh tape.
using ScalarFunction = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

struct Evaluation {
  double value = 0.0;
  NamedTensors gradients;
};

/// Evaluates `f` with every tensor of `params` bound as a differentiable leaf.
double evaluate(const ScalarFunction& f, const NamedTensors& params);
Evaluation evaluate_with_grad(const ScalarFunction& f, const NamedTensors& params);

/// Max over coordinates of |analytic - central difference| /
/// max(1e-8, |central difference|). Zero when there are no coordinates.
double finite_diff_check(const ScalarFunction& f, const NamedTensors& params, double epsilon = 1e-5);

/// Same check for a black-box value function against a supplied gradient.
double finite_diff_check(const std::function<double(const NamedTensors&)>& value, const NamedTensors& analytic,
                         const NamedTensors& params, double epsilon = 1e-5);

}  // namespace ami::ad
