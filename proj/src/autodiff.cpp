#include "ami/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ami::ad {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

Tape& same_tape(Var a, Var b, const char* what) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(what) + ": invalid operand");
  if (a.tape != b.tape) throw std::invalid_argument(std::string(what) + ": operands live on different tapes");
  return *a.tape;
}

Tape& tape_of(Var a, const char* what) {
  if (!a.valid()) throw std::invalid_argument(std::string(what) + ": invalid operand");
  return *a.tape;
}

[[noreturn]] void shape_fail(const Tape& tape, const char* what, const std::string& detail) {
  throw ShapeError(std::string(what) + " (node " + std::to_string(tape.size()) + "): " + detail);
}

void require_same_shape(const Tape& tape, const char* what, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    shape_fail(tape, what, "shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

void require_rank(const Tape& tape, const char* what, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    shape_fail(tape, what, "expected rank " + std::to_string(rank) + ", got " + shape_string(a.shape()));
  }
}

template <typename F>
Var unary(Var a, Op op, F&& f) {
  Tape& t = tape_of(a, op_name(op));
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(op, {a.id}, std::move(y));
}

}  // namespace

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::MatVec: return "matvec";
    case Op::MatVecT: return "matvec_t";
    case Op::MatMul: return "matmul";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::Softplus: return "softplus";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Row: return "row";
    case Op::Gather: return "gather";
    case Op::Stack: return "stack";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::L2Norm: return "l2norm";
    case Op::Dot: return "dot";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!valid()) throw std::invalid_argument("value() on invalid Var");
  return tape->value(id);
}

Var Tape::constant(Tensor value) { return record(Op::Leaf, {}, std::move(value)); }

Var Tape::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return Var{this, it->second};
  Var v = record(Op::Leaf, {}, value);
  nodes_.back().requires_grad = true;
  params_.emplace(name, v.id);
  return v;
}

Var Tape::record(Op op, std::vector<int> inputs, Tensor value, std::size_t aux, double scalar,
                 std::vector<std::size_t> indices) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op_name(op)) + " (node " + std::to_string(nodes_.size()) +
                       "): non-finite value");
  }
  Node node;
  node.op = op;
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](int i) { return nodes_[static_cast<std::size_t>(i)].requires_grad; });
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  node.aux = aux;
  node.scalar = scalar;
  node.indices = std::move(indices);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::backward(Var output) {
  if (!output.valid() || output.tape != this) throw std::invalid_argument("backward: output not on this tape");
  if (output.value().size() != 1) {
    throw std::invalid_argument("backward: output node " + std::to_string(output.id) + " is not scalar (shape " +
                                shape_string(output.shape()) + ")");
  }
  grads_.assign(nodes_.size(), Tensor());
  std::vector<bool> touched(nodes_.size(), false);
  const auto out = static_cast<std::size_t>(output.id);
  grads_[out] = Tensor(nodes_[out].value.shape(), 1.0);
  touched[out] = true;
  for (std::size_t k = out + 1; k-- > 0;) {
    const Node& node = nodes_[k];
    if (!touched[k] || !node.requires_grad || node.op == Op::Leaf) continue;
    for (int in : node.inputs) {
      const auto i = static_cast<std::size_t>(in);
      if (!touched[i] && nodes_[i].requires_grad) {
        grads_[i] = Tensor(nodes_[i].value.shape(), 0.0);
        touched[i] = true;
      }
    }
    propagate(node, grads_[k]);
  }
}

Tensor Tape::grad(Var v) const {
  const auto i = static_cast<std::size_t>(v.id);
  if (i < grads_.size() && grads_[i].same_shape(nodes_[i].value)) {
    return grads_[i];
  }
  return Tensor(nodes_.at(i).value.shape(), 0.0);
}

NamedTensors Tape::param_grads() const {
  NamedTensors out;
  for (const auto& [name, id] : params_) out.emplace(name, grad(Var{const_cast<Tape*>(this), id}));
  return out;
}

void Tape::propagate(const Node& node, const Tensor& g) {
  auto gin = [&](std::size_t k) -> Tensor* {
    const auto i = static_cast<std::size_t>(node.inputs[k]);
    return nodes_[i].requires_grad ? &grads_[i] : nullptr;
  };
  auto val = [&](std::size_t k) -> const Tensor& { return nodes_[static_cast<std::size_t>(node.inputs[k])].value; };
  const Tensor& y = node.value;

  switch (node.op) {
    case Op::Leaf: break;
    case Op::Add:
    case Op::Sub: {
      const double sb = node.op == Op::Add ? 1.0 : -1.0;
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (Tensor* gb = gin(1)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += sb * g[i];
      break;
    }
    case Op::Mul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i];
      if (Tensor* gb = gin(1)) for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a[i];
      break;
    }
    case Op::Scale:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += node.scalar * g[i];
      break;
    case Op::Shift:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      break;
    case Op::MatVec: {
      const Tensor& m = val(0);
      const Tensor& x = val(1);
      const std::size_t r = m.rows(), c = m.cols();
      if (Tensor* gm = gin(0)) {
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g[i];
          double* rowp = gm->data().data() + i * c;
          for (std::size_t j = 0; j < c; ++j) rowp[j] += gi * x[j];
        }
      }
      if (Tensor* gx = gin(1)) {
        for (std::size_t i = 0; i < r; ++i) {
          const double gi = g[i];
          const double* rowp = m.data().data() + i * c;
          for (std::size_t j = 0; j < c; ++j) (*gx)[j] += rowp[j] * gi;
        }
      }
      break;
    }
    case Op::MatVecT: {
      const Tensor& m = val(0);
      const Tensor& x = val(1);
      const std::size_t r = m.rows(), c = m.cols();
      if (Tensor* gm = gin(0)) {
        for (std::size_t i = 0; i < r; ++i) {
          double* rowp = gm->data().data() + i * c;
          for (std::size_t j = 0; j < c; ++j) rowp[j] += x[i] * g[j];
        }
      }
      if (Tensor* gx = gin(1)) {
        for (std::size_t i = 0; i < r; ++i) {
          const double* rowp = m.data().data() + i * c;
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += rowp[j] * g[j];
          (*gx)[i] += acc;
        }
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
      if (Tensor* ga = gin(0)) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < m; ++j) acc += g.at(i, j) * b.at(p, j);
            ga->at(i, p) += acc;
          }
      }
      if (Tensor* gb = gin(1)) {
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += a.at(i, p) * g.at(i, j);
            gb->at(p, j) += acc;
          }
      }
      break;
    }
    case Op::Tanh:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    case Op::Sigmoid:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    case Op::Relu: {
      const Tensor& a = val(0);
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += a[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::Softplus: {
      const Tensor& a = val(0);
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * stable_sigmoid(a[i]);
      break;
    }
    case Op::Exp:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
      break;
    case Op::Log: {
      const Tensor& a = val(0);
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / a[i];
      break;
    }
    case Op::Softmax: {
      if (Tensor* ga = gin(0)) {
        double gy = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += y[i] * (g[i] - gy);
      }
      break;
    }
    case Op::LogSoftmax: {
      if (Tensor* ga = gin(0)) {
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) gs += g[i];
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] - std::exp(y[i]) * gs;
      }
      break;
    }
    case Op::Concat: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t n = val(k).size();
        if (Tensor* ga = gin(k)) for (std::size_t i = 0; i < n; ++i) (*ga)[i] += g[offset + i];
        offset += n;
      }
      break;
    }
    case Op::Slice:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < g.size(); ++i) (*ga)[node.aux + i] += g[i];
      break;
    case Op::Row: {
      if (Tensor* gm = gin(0)) {
        const std::size_t c = g.size();
        for (std::size_t j = 0; j < c; ++j) (*gm)[node.aux * c + j] += g[j];
      }
      break;
    }
    case Op::Gather:
      if (Tensor* ga = gin(0)) for (std::size_t k = 0; k < node.indices.size(); ++k) (*ga)[node.indices[k]] += g[k];
      break;
    case Op::Stack: {
      const std::size_t c = y.cols();
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (Tensor* ga = gin(k)) for (std::size_t j = 0; j < c; ++j) (*ga)[j] += g[k * c + j];
      }
      break;
    }
    case Op::Sum:
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
      break;
    case Op::Mean:
      if (Tensor* ga = gin(0)) {
        const double s = g[0] / static_cast<double>(ga->size());
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += s;
      }
      break;
    case Op::L2Norm: {
      const Tensor& a = val(0);
      if (Tensor* ga = gin(0); ga && y[0] > 0.0) {
        for (std::size_t i = 0; i < a.size(); ++i) (*ga)[i] += g[0] * a[i] / y[0];
      }
      break;
    }
    case Op::Dot: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (Tensor* ga = gin(0)) for (std::size_t i = 0; i < a.size(); ++i) (*ga)[i] += g[0] * b[i];
      if (Tensor* gb = gin(1)) for (std::size_t i = 0; i < a.size(); ++i) (*gb)[i] += g[0] * a[i];
      break;
    }
  }
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require_same_shape(t, "add", x, z);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i];
  return t.record(Op::Add, {a.id, b.id}, std::move(y));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require_same_shape(t, "sub", x, z);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - z[i];
  return t.record(Op::Sub, {a.id, b.id}, std::move(y));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require_same_shape(t, "mul", x, z);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i];
  return t.record(Op::Mul, {a.id, b.id}, std::move(y));
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a, "scale");
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = c * x[i];
  return t.record(Op::Scale, {a.id}, std::move(y), 0, c);
}

Var shift(Var a, double c) {
  Tape& t = tape_of(a, "shift");
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + c;
  return t.record(Op::Shift, {a.id}, std::move(y), 0, c);
}

Var matvec(Var m, Var x) {
  Tape& t = same_tape(m, x, "matvec");
  const Tensor& w = m.value();
  const Tensor& v = x.value();
  require_rank(t, "matvec", w, 2);
  require_rank(t, "matvec", v, 1);
  if (w.cols() != v.size()) {
    shape_fail(t, "matvec", "matrix " + shape_string(w.shape()) + " vs vector " + shape_string(v.shape()));
  }
  const std::size_t r = w.rows(), c = w.cols();
  Tensor y(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    const double* rowp = w.data().data() + i * c;
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += rowp[j] * v[j];
    y[i] = acc;
  }
  return t.record(Op::MatVec, {m.id, x.id}, std::move(y));
}

Var matvec_t(Var m, Var x) {
  Tape& t = same_tape(m, x, "matvec_t");
  const Tensor& w = m.value();
  const Tensor& v = x.value();
  require_rank(t, "matvec_t", w, 2);
  require_rank(t, "matvec_t", v, 1);
  if (w.rows() != v.size()) {
    shape_fail(t, "matvec_t", "matrix " + shape_string(w.shape()) + " vs vector " + shape_string(v.shape()));
  }
  const std::size_t r = w.rows(), c = w.cols();
  Tensor y(Shape{c}, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    const double* rowp = w.data().data() + i * c;
    for (std::size_t j = 0; j < c; ++j) y[j] += rowp[j] * v[i];
  }
  return t.record(Op::MatVecT, {m.id, x.id}, std::move(y));
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require_rank(t, "matmul", x, 2);
  require_rank(t, "matmul", z, 2);
  if (x.cols() != z.rows()) {
    shape_fail(t, "matmul", shape_string(x.shape()) + " x " + shape_string(z.shape()));
  }
  const std::size_t n = x.rows(), k = x.cols(), m = z.cols();
  Tensor y(Shape{n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x.at(i, p);
      for (std::size_t j = 0; j < m; ++j) y.at(i, j) += xv * z.at(p, j);
    }
  return t.record(Op::MatMul, {a.id, b.id}, std::move(y));
}

Var tanh(Var a) { return unary(a, Op::Tanh, [](double v) { return std::tanh(v); }); }
Var sigmoid(Var a) { return unary(a, Op::Sigmoid, stable_sigmoid); }
Var relu(Var a) { return unary(a, Op::Relu, [](double v) { return v > 0.0 ? v : 0.0; }); }
Var softplus(Var a) { return unary(a, Op::Softplus, stable_softplus); }
Var exp(Var a) { return unary(a, Op::Exp, [](double v) { return std::exp(v); }); }

Var log(Var a) {
  Tape& t = tape_of(a, "log");
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw NumericError("log (node " + std::to_string(t.size()) + "): non-positive argument");
  }
  return unary(a, Op::Log, [](double v) { return std::log(v); });
}

Var softmax(Var a) {
  Tape& t = tape_of(a, "softmax");
  const Tensor& x = a.value();
  require_rank(t, "softmax", x, 1);
  Tensor y(x.shape());
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += (y[i] = std::exp(x[i] - mx));
  for (std::size_t i = 0; i < x.size(); ++i) y[i] /= z;
  return t.record(Op::Softmax, {a.id}, std::move(y));
}

Var log_softmax(Var a) {
  Tape& t = tape_of(a, "log_softmax");
  const Tensor& x = a.value();
  require_rank(t, "log_softmax", x, 1);
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double z = 0.0;
  for (double v : x.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] - lse;
  return t.record(Op::LogSoftmax, {a.id}, std::move(y));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = tape_of(parts[0], "concat");
  std::vector<int> ids;
  std::vector<double> out;
  for (const Var& p : parts) {
    if (p.tape != &t) throw std::invalid_argument("concat: operands live on different tapes");
    require_rank(t, "concat", p.value(), 1);
    ids.push_back(p.id);
    out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  }
  return t.record(Op::Concat, std::move(ids), Tensor::vector(std::move(out)));
}

Var concat(Var a, Var b) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts));
}

Var slice(Var a, std::size_t offset, std::size_t length) {
  Tape& t = tape_of(a, "slice");
  const Tensor& x = a.value();
  require_rank(t, "slice", x, 1);
  if (offset + length > x.size()) {
    shape_fail(t, "slice", "range [" + std::to_string(offset) + "," + std::to_string(offset + length) +
                               ") out of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                          x.data().begin() + static_cast<std::ptrdiff_t>(offset + length));
  return t.record(Op::Slice, {a.id}, Tensor::vector(std::move(out)), offset);
}

Var row(Var m, std::size_t r) {
  Tape& t = tape_of(m, "row");
  const Tensor& x = m.value();
  require_rank(t, "row", x, 2);
  if (r >= x.rows()) shape_fail(t, "row", "row " + std::to_string(r) + " out of " + shape_string(x.shape()));
  const std::size_t c = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                          x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  return t.record(Op::Row, {m.id}, Tensor::vector(std::move(out)), r);
}

Var gather(Var a, std::vector<std::size_t> indices) {
  Tape& t = tape_of(a, "gather");
  const Tensor& x = a.value();
  require_rank(t, "gather", x, 1);
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= x.size()) shape_fail(t, "gather", "index " + std::to_string(i) + " out of " + shape_string(x.shape()));
    out.push_back(x[i]);
  }
  return t.record(Op::Gather, {a.id}, Tensor::vector(std::move(out)), 0, 0.0, std::move(indices));
}

Var pick(Var a, std::size_t index) {
  Tape& t = tape_of(a, "pick");
  const Tensor& x = a.value();
  require_rank(t, "pick", x, 1);
  if (index >= x.size()) shape_fail(t, "pick", "index " + std::to_string(index) + " out of " + shape_string(x.shape()));
  return t.record(Op::Gather, {a.id}, Tensor::scalar(x[index]), 0, 0.0, {index});
}

Var stack(std::span<const Var> rows) {
  if (rows.empty()) throw ShapeError("stack: no inputs");
  Tape& t = tape_of(rows[0], "stack");
  const std::size_t c = rows[0].value().size();
  std::vector<int> ids;
  std::vector<double> out;
  out.reserve(rows.size() * c);
  for (const Var& r : rows) {
    if (r.tape != &t) throw std::invalid_argument("stack: operands live on different tapes");
    require_rank(t, "stack", r.value(), 1);
    if (r.value().size() != c) shape_fail(t, "stack", "ragged rows");
    ids.push_back(r.id);
    out.insert(out.end(), r.value().data().begin(), r.value().data().end());
  }
  return t.record(Op::Stack, std::move(ids), Tensor::matrix(rows.size(), c, std::move(out)));
}

Var sum(Var a) {
  Tape& t = tape_of(a, "sum");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Op::Sum, {a.id}, Tensor::scalar(s));
}

Var mean(Var a) {
  Tape& t = tape_of(a, "mean");
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.record(Op::Mean, {a.id}, Tensor::scalar(s / static_cast<double>(a.value().size())));
}

Var l2norm(Var a) {
  Tape& t = tape_of(a, "l2norm");
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return t.record(Op::L2Norm, {a.id}, Tensor::scalar(std::sqrt(s)));
}

Var dot(Var a, Var b) {
  Tape& t = same_tape(a, b, "dot");
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  require_same_shape(t, "dot", x, z);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * z[i];
  return t.record(Op::Dot, {a.id, b.id}, Tensor::scalar(s));
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator*(double c, Var a) { return scale(a, c); }

namespace {

std::map<std::string, Var> bind_all(Tape& tape, const NamedTensors& params) {
  std::map<std::string, Var> vars;
  for (const auto& [name, t] : params) vars.emplace(name, tape.param(name, t));
  return vars;
}

}  // namespace

double evaluate(const ScalarFunction& f, const NamedTensors& params) {
  Tape tape;
  Var out = f(tape, bind_all(tape, params));
  return out.item();
}

Evaluation evaluate_with_grad(const ScalarFunction& f, const NamedTensors& params) {
  Tape tape;
  Var out = f(tape, bind_all(tape, params));
  tape.backward(out);
  return Evaluation{out.item(), tape.param_grads()};
}

double finite_diff_check(const std::function<double(const NamedTensors&)>& value, const NamedTensors& analytic,
                         const NamedTensors& params, double epsilon) {
  NamedTensors probe = params;
  double worst = 0.0;
  for (auto& [name, tensor] : probe) {
    const Tensor& g = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + epsilon;
      const double up = value(probe);
      tensor[i] = saved - epsilon;
      const double down = value(probe);
      tensor[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: non-finite value probing " + name);
      }
      const double fd = (up - down) / (2.0 * epsilon);
      worst = std::max(worst, std::abs(g[i] - fd) / std::max(1e-8, std::abs(fd)));
    }
  }
  return worst;
}

double finite_diff_check(const ScalarFunction& f, const NamedTensors& params, double epsilon) {
  const Evaluation analytic = evaluate_with_grad(f, params);
  if (!std::isfinite(analytic.value)) throw NumericError("finite_diff_check: non-finite function value");
  return finite_diff_check([&](const NamedTensors& p) { return evaluate(f, p); }, analytic.gradients, params, epsilon);
}

}  // namespace ami::ad
