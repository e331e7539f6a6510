#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace scriptgen::autograd {

using Matrix = Eigen::MatrixXd;

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Named dense tensors in declaration order. Gradients use the same layout.
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t slot) const { return names_[slot]; }
  const Matrix& value(std::size_t slot) const { return values_[slot]; }
  Matrix& value(std::size_t slot) { return values_[slot]; }
  std::size_t scalar_count() const;
  /// Throws if the name is unknown.
  std::size_t slot(const std::string& name) const;

  /// Zero-filled tensors shaped like the parameters.
  std::vector<Matrix> zeros_like() const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

/// Records a forward computation and replays it in reverse. Every operation
/// computes its value eagerly; backward() accumulates d(loss)/d(parameter)
/// into a caller-supplied gradient vector indexed by parameter slot.
class Tape {
 public:
  Tape() = default;

  Var constant(Matrix value);
  Var scalar(double value);
  /// Leaf bound to a parameter slot; one node per slot per tape.
  Var parameter(const ParameterSet& params, std::size_t slot);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar_value(Var v) const { return value(v)(0, 0); }
  Eigen::Index rows(Var v) const { return value(v).rows(); }
  Eigen::Index cols(Var v) const { return value(v).cols(); }
  std::size_t node_count() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Adds a 1 x cols row to every row of a.
  Var add_row(Var a, Var row);
  Var scale(Var a, double s);
  /// Elementwise product with a constant mask (dropout).
  Var mul_constant(Var a, Matrix mask);

  Var gelu(Var a);
  Var sigmoid(Var a);
  /// Row-wise layer normalization with learnable gain and bias rows.
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  /// Row-wise softmax. With causal set, entry (i, j) for j > i is excluded.
  Var softmax_rows(Var a, bool causal = false);

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  /// Embedding lookup: output row r is table row ids[r].
  Var gather_rows(Var table, const std::vector<std::int32_t>& ids);
  Var mean_rows(Var a);

  /// weight * mask_row + (1 - weight) * block, weight is 1 x 1 and the mask
  /// row is broadcast over every row of the block.
  Var blend(Var weight, Var mask_row, Var block);
  /// Per-row gate: gate(r) * a.row(r) + (1 - gate(r)) * b.row(r); gate is n x 1.
  Var row_blend(Var gate, Var a, Var b);

  /// Mean negative log-likelihood of targets under row-wise softmax(logits).
  /// Rows whose target equals ignore_id are excluded.
  Var cross_entropy(Var logits, const std::vector<std::int32_t>& targets, std::int32_t ignore_id);
  /// -log(exp(s_0/tau) / sum_i exp(s_i/tau)) for a 1 x m score row.
  Var info_nce(Var scores, double tau);

  /// Reverse sweep from a 1 x 1 node.
  void backward(Var loss, std::vector<Matrix>& param_grads);
  /// Node gradient after backward(); empty if the node did not receive one.
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

 private:
  enum class Op : std::uint8_t {
    Constant,
    Parameter,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    AddRow,
    Scale,
    MulConstant,
    Gelu,
    Sigmoid,
    LayerNorm,
    Softmax,
    SliceRows,
    SliceCols,
    ConcatRows,
    ConcatCols,
    GatherRows,
    MeanRows,
    Blend,
    RowBlend,
    CrossEntropy,
    InfoNce,
  };

  struct Node {
    Op op = Op::Constant;
    std::int32_t a = -1, b = -1, c = -1;
    bool needs_grad = false;
    double scalar = 0.0;
    Eigen::Index offset = 0;
    std::vector<std::int32_t> inputs;  // concat parts, gather ids, targets
    Matrix value;
    Matrix aux;  // cached forward quantities needed by backward
    Matrix aux2;
    Matrix grad;
  };

  Var push(Node node);
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
  bool needs(Var v) const { return node(v).needs_grad; }
  Matrix& grad_of(std::int32_t id);
  void propagate(std::size_t index, std::vector<Matrix>& param_grads);

  std::vector<Node> nodes_;
  std::vector<std::int32_t> param_nodes_;  // slot -> node id, -1 when unused
};

}  // namespace scriptgen::autograd
