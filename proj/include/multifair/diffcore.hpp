#pragma once

// Reverse-mode differentiation over dense double-precision matrices.
//
// Every backward rule is itself expressed with tape operations, so the
// gradients returned by Tape::gradients() are ordinary Values that can be
// differentiated again. The trainer relies on this to push the
// direction-alignment penalty (a function of gradients) back into the
// parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "multifair/error.hpp"

namespace multifair {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

}  // namespace multifair

namespace multifair::diff {

class Tape;

/// Handle to one node of a Tape. Cheap to copy; valid while its Tape lives.
class Value {
 public:
  Value() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }

  const Matrix& data() const;
  Eigen::Index rows() const { return data().rows(); }
  Eigen::Index cols() const { return data().cols(); }
  Eigen::Index size() const { return data().size(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  /// Value of a 1x1 node.
  double item() const;
  bool requires_grad() const;
  /// Gradient populated by Tape::backward(); StateError before that.
  const Matrix& grad() const;

 private:
  friend class Tape;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Parameter name -> gradient block.
using GradientMap = std::map<std::string, Matrix>;

/// Named set of parameters updated together ("encoder:0", "classifier:1", "fusion", "head").
struct ParamGroup {
  std::string name;
  std::vector<std::string> params;
};

/// Concatenates the row-major gradient blocks of a group. ContractError if a block is missing.
inline std::vector<double> flatten_group(const GradientMap& grads, const ParamGroup& group) {
  std::vector<double> flat;
  for (const auto& name : group.params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("no gradient for parameter '" + name + "'");
    flat.insert(flat.end(), it->second.data(), it->second.data() + it->second.size());
  }
  return flat;
}

/// Ordered record of a differentiable computation.
///
/// Nodes are appended in evaluation order, so node ids form a topological
/// order. A Tape is not copyable or movable because Values refer to it.
class Tape {
 public:
  using Backward = std::function<std::vector<Value>(const Value& upstream)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a named leaf whose gradient backward() reports.
  Value parameter(std::string name, Matrix value) {
    for (std::size_t id : leaves_) {
      if (nodes_[id].name == name) throw ContractError("duplicate parameter '" + name + "'");
    }
    Value v = push(std::move(value), {}, true, nullptr);
    nodes_[v.id_].name = std::move(name);
    leaves_.push_back(v.id_);
    return v;
  }

  Value constant(Matrix value) { return push(std::move(value), {}, false, nullptr); }

  /// Records a node computed from `inputs`. `backward` maps the upstream
  /// gradient to one gradient per input (an invalid Value means "none").
  Value record(Matrix value, std::vector<Value> inputs, Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.tape_ != this) throw ContractError("operand belongs to a different tape");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(in.id_);
    return push(std::move(value), std::move(ids), needs, needs ? std::move(backward) : nullptr);
  }

  /// Installs the backward rule of a node recorded with a null rule, for
  /// rules that need the node's own output.
  void attach(const Value& node, Backward backward) {
    if (node.tape_ != this) throw ContractError("node belongs to a different tape");
    Node& n = nodes_[node.id_];
    if (n.requires_grad) n.backward = std::move(backward);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool reversed() const noexcept { return reversed_; }

  /// Leaves in registration order.
  std::vector<Value> parameters() {
    std::vector<Value> out;
    for (std::size_t id : leaves_) out.push_back(Value(this, id));
    return out;
  }

  /// Gradients of a scalar `output` with respect to `wrt`, recorded on this
  /// tape so they can be differentiated again. Inputs that `output` does not
  /// depend on receive a zero constant.
  std::vector<Value> gradients(const Value& output, std::span<const Value> wrt) {
    if (output.tape_ != this) throw ContractError("output belongs to a different tape");
    if (!output.is_scalar()) {
      throw ContractError("gradients() needs a scalar output, got " +
                          shape_string(output.rows(), output.cols()));
    }
    const std::size_t top = output.id_;
    std::vector<std::optional<Value>> adjoint(top + 1);
    adjoint[top] = constant(Matrix::Ones(1, 1));

    for (std::size_t id = top + 1; id-- > 0;) {
      if (!adjoint[id] || !nodes_[id].requires_grad || !nodes_[id].backward) continue;
      // Copy: the rule appends nodes while it runs.
      Backward rule = nodes_[id].backward;
      std::vector<std::size_t> inputs = nodes_[id].inputs;
      std::vector<Value> in_grads = rule(*adjoint[id]);
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t in = inputs[k];
        if (k >= in_grads.size() || !in_grads[k].valid() || !nodes_[in].requires_grad) continue;
        adjoint[in] = adjoint[in] ? add_nodes(*adjoint[in], in_grads[k]) : in_grads[k];
      }
    }

    std::vector<Value> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      if (w.tape_ != this) throw ContractError("operand belongs to a different tape");
      if (w.id_ <= top && adjoint[w.id_]) {
        out.push_back(*adjoint[w.id_]);
      } else {
        out.push_back(constant(Matrix::Zero(w.rows(), w.cols())));
      }
    }
    return out;
  }

  /// Reverse pass from a scalar loss. Populates grad() of every parameter
  /// (zero when unreachable) and returns a snapshot keyed by parameter name.
  /// A tape can be reversed once.
  GradientMap backward(const Value& loss) {
    if (reversed_) throw StateError("reverse pass already ran on this tape");
    if (loss.tape_ != this) throw ContractError("loss belongs to a different tape");
    if (!loss.is_scalar()) {
      throw ContractError("backward() needs a scalar loss, got " +
                          shape_string(loss.rows(), loss.cols()));
    }
    std::vector<Value> leaves = parameters();
    std::vector<Value> grads = gradients(loss, leaves);
    GradientMap map;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      Node& node = nodes_[leaves[k].id_];
      node.grad = grads[k].data();
      map.emplace(node.name, *node.grad);
    }
    reversed_ = true;
    return map;
  }

 private:
  friend class Value;

  struct Node {
    Matrix value;
    std::optional<Matrix> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    std::string name;
  };

  Value push(Matrix value, std::vector<std::size_t> inputs, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Value(this, nodes_.size() - 1);
  }

  Value add_nodes(const Value& a, const Value& b);

  std::deque<Node> nodes_;
  std::vector<std::size_t> leaves_;
  bool reversed_ = false;
};

inline Tape& Value::tape() const {
  if (!tape_) throw StateError("empty Value handle");
  return *tape_;
}
inline const Matrix& Value::data() const { return tape().nodes_[id_].value; }
inline bool Value::requires_grad() const { return tape().nodes_[id_].requires_grad; }
inline double Value::item() const {
  if (!is_scalar()) throw ShapeError("item() on non-scalar " + shape_string(rows(), cols()));
  return data()(0, 0);
}
inline const Matrix& Value::grad() const {
  const auto& node = tape().nodes_[id_];
  if (!node.grad) throw StateError("gradient not populated; run backward() first");
  return *node.grad;
}

namespace detail {

inline Tape& same_tape(const Value& a, const Value& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands belong to different tapes");
  return a.tape();
}

inline void require_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                     " vs " + shape_string(b.rows(), b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations. Each forward computes with Eigen; each backward composes other
// operations so higher-order gradients come for free.
// ---------------------------------------------------------------------------

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double factor);
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a);
Value row_sum(const Value& a);
Value col_sum(const Value& a);
Value sum(const Value& a);
Value broadcast_cols(const Value& column, Eigen::Index cols);
Value broadcast_rows(const Value& row, Eigen::Index rows);
Value broadcast(const Value& scalar, Eigen::Index rows, Eigen::Index cols);
Value slice_cols(const Value& a, Eigen::Index begin, Eigen::Index count);
Value pad_cols(const Value& a, Eigen::Index begin, Eigen::Index total);
Value gather_rows(const Value& a, std::span<const std::size_t> rows);
Value scatter_rows(const Value& a, std::span<const std::size_t> rows, Eigen::Index total);
Value reciprocal(const Value& a);

inline Value Tape::add_nodes(const Value& a, const Value& b) { return diff::add(a, b); }

inline Value add(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "add");
  return t.record(a.data() + b.data(), {a, b},
                  [](const Value& g) { return std::vector<Value>{g, g}; });
}

inline Value sub(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "sub");
  return t.record(a.data() - b.data(), {a, b},
                  [](const Value& g) { return std::vector<Value>{g, scale(g, -1.0)}; });
}

inline Value mul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  detail::require_same_shape(a, b, "mul");
  return t.record(a.data().cwiseProduct(b.data()), {a, b}, [a, b](const Value& g) {
    return std::vector<Value>{mul(g, b), mul(g, a)};
  });
}

inline Value scale(const Value& a, double factor) {
  return a.tape().record(a.data() * factor, {a}, [factor](const Value& g) {
    return std::vector<Value>{scale(g, factor)};
  });
}

/// a + c elementwise.
inline Value shift(const Value& a, double offset) {
  Matrix out = a.data().array() + offset;
  return a.tape().record(std::move(out), {a},
                         [](const Value& g) { return std::vector<Value>{g}; });
}

inline Value matmul(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.rows(), a.cols()) +
                     " x " + shape_string(b.rows(), b.cols()));
  }
  Matrix out = a.data() * b.data();
  return t.record(std::move(out), {a, b}, [a, b](const Value& g) {
    return std::vector<Value>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

inline Value transpose(const Value& a) {
  Matrix out = a.data().transpose();
  return a.tape().record(std::move(out), {a},
                         [](const Value& g) { return std::vector<Value>{transpose(g)}; });
}

/// n x c -> n x 1.
inline Value row_sum(const Value& a) {
  const Eigen::Index c = a.cols();
  Matrix out = a.data().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [c](const Value& g) {
    return std::vector<Value>{broadcast_cols(g, c)};
  });
}

/// n x c -> 1 x c.
inline Value col_sum(const Value& a) {
  const Eigen::Index n = a.rows();
  Matrix out = a.data().colwise().sum();
  return a.tape().record(std::move(out), {a}, [n](const Value& g) {
    return std::vector<Value>{broadcast_rows(g, n)};
  });
}

/// Sum of all entries as a 1x1 value.
inline Value sum(const Value& a) {
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.data().sum();
  return a.tape().record(std::move(out), {a}, [r, c](const Value& g) {
    return std::vector<Value>{broadcast(g, r, c)};
  });
}

inline Value mean(const Value& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// n x 1 -> n x cols, repeating the column.
inline Value broadcast_cols(const Value& column, Eigen::Index cols) {
  if (column.cols() != 1) throw ShapeError("broadcast_cols expects a column");
  Matrix out = column.data().replicate(1, cols);
  return column.tape().record(std::move(out), {column},
                              [](const Value& g) { return std::vector<Value>{row_sum(g)}; });
}

/// 1 x c -> rows x c, repeating the row.
inline Value broadcast_rows(const Value& row, Eigen::Index rows) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows expects a row");
  Matrix out = row.data().replicate(rows, 1);
  return row.tape().record(std::move(out), {row},
                           [](const Value& g) { return std::vector<Value>{col_sum(g)}; });
}

inline Value broadcast(const Value& scalar, Eigen::Index rows, Eigen::Index cols) {
  if (!scalar.is_scalar()) throw ShapeError("broadcast expects a 1x1 value");
  Matrix out = Matrix::Constant(rows, cols, scalar.item());
  return scalar.tape().record(std::move(out), {scalar},
                              [](const Value& g) { return std::vector<Value>{sum(g)}; });
}

/// a (n x c) plus a bias row (1 x c) added to every row.
inline Value add_row(const Value& a, const Value& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: bias " + shape_string(row.rows(), row.cols()) +
                     " does not fit " + shape_string(a.rows(), a.cols()));
  }
  return add(a, broadcast_rows(row, a.rows()));
}

/// Scales row i of a (n x c) by column(i).
inline Value mul_col(const Value& a, const Value& column) {
  if (column.cols() != 1 || column.rows() != a.rows()) {
    throw ShapeError("mul_col: column " + shape_string(column.rows(), column.cols()) +
                     " does not fit " + shape_string(a.rows(), a.cols()));
  }
  return mul(a, broadcast_cols(column, a.cols()));
}

inline Value slice_cols(const Value& a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range out of bounds for " + shape_string(a.rows(), a.cols()));
  }
  const Eigen::Index total = a.cols();
  Matrix out = a.data().middleCols(begin, count);
  return a.tape().record(std::move(out), {a}, [begin, total](const Value& g) {
    return std::vector<Value>{pad_cols(g, begin, total)};
  });
}

/// Places a (n x c) at column offset `begin` of an n x total zero block.
inline Value pad_cols(const Value& a, Eigen::Index begin, Eigen::Index total) {
  if (begin < 0 || begin + a.cols() > total) throw ShapeError("pad_cols: range out of bounds");
  const Eigen::Index count = a.cols();
  Matrix out = Matrix::Zero(a.rows(), total);
  out.middleCols(begin, count) = a.data();
  return a.tape().record(std::move(out), {a}, [begin, count](const Value& g) {
    return std::vector<Value>{slice_cols(g, begin, count)};
  });
}

inline Value concat_cols(std::span<const Value> parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one block");
  const Eigen::Index n = parts.front().rows();
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix out(n, total);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.data();
    ranges.emplace_back(offset, p.cols());
    offset += p.cols();
  }
  std::vector<Value> inputs(parts.begin(), parts.end());
  return parts.front().tape().record(std::move(out), std::move(inputs), [ranges](const Value& g) {
    std::vector<Value> grads;
    for (auto [begin, count] : ranges) grads.push_back(slice_cols(g, begin, count));
    return grads;
  });
}

inline Value gather_rows(const Value& a, std::span<const std::size_t> rows) {
  const Eigen::Index n = a.rows();
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (static_cast<Eigen::Index>(rows[k]) >= n) throw ShapeError("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(k)) = a.data().row(static_cast<Eigen::Index>(rows[k]));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape().record(std::move(out), {a}, [idx, n](const Value& g) {
    return std::vector<Value>{scatter_rows(g, idx, n)};
  });
}

/// Adds row k of a into row rows[k] of an all-zero (total x c) block.
inline Value scatter_rows(const Value& a, std::span<const std::size_t> rows, Eigen::Index total) {
  if (static_cast<Eigen::Index>(rows.size()) != a.rows()) throw ShapeError("scatter_rows: index count differs from rows");
  Matrix out = Matrix::Zero(total, a.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (static_cast<Eigen::Index>(rows[k]) >= total) throw ShapeError("scatter_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(rows[k])) += a.data().row(static_cast<Eigen::Index>(k));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return a.tape().record(std::move(out), {a}, [idx](const Value& g) {
    return std::vector<Value>{gather_rows(g, idx)};
  });
}

/// max(x, 0); the sub-gradient at exactly 0 is 0.
inline Value relu(const Value& a) {
  Matrix out = a.data().cwiseMax(0.0);
  Matrix mask = (a.data().array() > 0.0).cast<double>().matrix();
  Tape& t = a.tape();
  return t.record(std::move(out), {a}, [&t, mask](const Value& g) {
    return std::vector<Value>{mul(g, t.constant(mask))};
  });
}

inline Value sigmoid(const Value& a) {
  Matrix out = a.data().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  Tape& t = a.tape();
  Value y = t.record(std::move(out), {a}, nullptr);
  t.attach(y, [y](const Value& g) {
    return std::vector<Value>{mul(g, mul(y, shift(scale(y, -1.0), 1.0)))};
  });
  return y;
}

inline Value log(const Value& a) {
  if ((a.data().array() <= 0.0).any()) throw NumericError("log of a non-positive value");
  Matrix out = a.data().array().log().matrix();
  return a.tape().record(std::move(out), {a}, [a](const Value& g) {
    return std::vector<Value>{mul(g, reciprocal(a))};
  });
}

inline Value reciprocal(const Value& a) {
  if ((a.data().array() == 0.0).any()) throw NumericError("reciprocal of zero");
  Matrix out = a.data().cwiseInverse();
  return a.tape().record(std::move(out), {a}, [a](const Value& g) {
    Value r = reciprocal(a);
    return std::vector<Value>{scale(mul(g, mul(r, r)), -1.0)};
  });
}

inline Value sqrt(const Value& a) {
  if ((a.data().array() < 0.0).any()) throw NumericError("sqrt of a negative value");
  Matrix out = a.data().cwiseSqrt();
  return a.tape().record(std::move(out), {a}, [a](const Value& g) {
    return std::vector<Value>{scale(mul(g, reciprocal(sqrt(a))), 0.5)};
  });
}

/// |x|; the sub-gradient at exactly 0 is 0.
inline Value abs(const Value& a) {
  Matrix out = a.data().cwiseAbs();
  Matrix sign = a.data().unaryExpr([](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  Tape& t = a.tape();
  return t.record(std::move(out), {a}, [&t, sign](const Value& g) {
    return std::vector<Value>{mul(g, t.constant(sign))};
  });
}

/// max(x, floor); no gradient flows through clamped entries.
inline Value clamp_min(const Value& a, double floor) {
  Matrix out = a.data().cwiseMax(floor);
  Matrix mask = (a.data().array() >= floor).cast<double>().matrix();
  Tape& t = a.tape();
  return t.record(std::move(out), {a}, [&t, mask](const Value& g) {
    return std::vector<Value>{mul(g, t.constant(mask))};
  });
}

/// Identity forward; multiplies the incoming gradient by `factor`.
inline Value grad_scale(const Value& a, double factor) {
  return a.tape().record(a.data(), {a}, [factor](const Value& g) {
    return std::vector<Value>{scale(g, factor)};
  });
}

/// Same data, cut from the graph.
inline Value stop_gradient(const Value& a) { return a.tape().constant(a.data()); }

/// Row-wise softmax with max subtraction. NumericError on non-finite input.
inline Value softmax_rows(const Value& x) {
  if (!x.data().allFinite()) throw NumericError("softmax_rows: non-finite input");
  Matrix out = x.data();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  Tape& t = x.tape();
  const Eigen::Index c = x.cols();
  Value y = t.record(std::move(out), {x}, nullptr);
  t.attach(y, [y, c](const Value& g) {
    Value inner = row_sum(mul(g, y));
    return std::vector<Value>{mul(y, sub(g, broadcast_cols(inner, c)))};
  });
  return y;
}

/// Mean negative log-likelihood of `labels` under row-probabilities `probs`.
/// Probabilities are floored at 1e-12 before the log.
inline Value cross_entropy(const Value& probs, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(probs.rows()) + " rows");
  }
  Matrix onehot = Matrix::Zero(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= probs.cols()) {
      throw InputError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                       std::to_string(probs.cols()) + ")");
    }
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  Tape& t = probs.tape();
  Value logp = log(clamp_min(probs, 1e-12));
  return scale(sum(mul(logp, t.constant(onehot))), -1.0 / static_cast<double>(labels.size()));
}

enum class Elementwise { add, mul, relu, sigmoid, scale };

/// Dispatch form of the elementwise operations; `factor` is used by `scale` only.
inline Value elementwise(Elementwise kind, std::span<const Value> inputs, double factor = 1.0) {
  const bool binary = kind == Elementwise::add || kind == Elementwise::mul;
  if (inputs.size() != (binary ? 2u : 1u)) {
    throw ContractError("elementwise: wrong operand count");
  }
  switch (kind) {
    case Elementwise::add: return add(inputs[0], inputs[1]);
    case Elementwise::mul: return mul(inputs[0], inputs[1]);
    case Elementwise::relu: return relu(inputs[0]);
    case Elementwise::sigmoid: return sigmoid(inputs[0]);
    case Elementwise::scale: return scale(inputs[0], factor);
  }
  throw ContractError("elementwise: unknown kind");
}

inline constexpr double kNormFloor = 1e-12;

/// Cosine similarity mapped from [-1, 1] onto [0, 1] as (cos + 1) / 2.
/// Returns the neutral 0.5 when either vector has norm below 1e-12.
inline double flat_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ShapeError("flat_cosine: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kNormFloor || nb < kNormFloor) return 0.5;
  const double cos = std::clamp(dot / (na * nb), -1.0, 1.0);
  return 0.5 * (cos + 1.0);
}

/// Differentiable flat_cosine over two same-shape values.
inline Value flat_cosine(const Value& a, const Value& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.size() != b.size()) {
    throw ShapeError("flat_cosine: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  const double na = a.data().norm(), nb = b.data().norm();
  if (na < kNormFloor || nb < kNormFloor) return t.constant(Matrix::Constant(1, 1, 0.5));
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("flat_cosine: differentiable form needs equal shapes");
  }
  Value dot = sum(mul(a, b));
  Value norms = mul(sqrt(sum(mul(a, a))), sqrt(sum(mul(b, b))));
  Value cos = mul(dot, reciprocal(norms));
  return shift(scale(cos, 0.5), 0.5);
}

}  // namespace multifair::diff
