#include "scriptgen/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace scriptgen::autograd {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

std::size_t ParameterSet::add(std::string name, Matrix value) {
  for (const auto& n : names_) {
    if (n == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

std::size_t ParameterSet::slot(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

std::vector<Matrix> ParameterSet::zeros_like() const {
  std::vector<Matrix> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(Matrix::Zero(v.rows(), v.cols()));
  return out;
}

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::parameter(const ParameterSet& params, std::size_t slot) {
  if (param_nodes_.size() < params.size()) param_nodes_.resize(params.size(), -1);
  if (param_nodes_[slot] >= 0) return Var{param_nodes_[slot]};
  Node n;
  n.op = Op::Parameter;
  n.offset = static_cast<Eigen::Index>(slot);
  n.needs_grad = true;
  n.value = params.value(slot);
  const Var v = push(std::move(n));
  param_nodes_[slot] = v.id;
  return v;
}

Var Tape::matmul(Var a, Var b) {
  require(cols(a) == rows(b), "matmul: inner dimensions differ");
  Node n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = needs(a) || needs(b);
  n.value.noalias() = value(a) * value(b);
  return push(std::move(n));
}

Var Tape::matmul_nt(Var a, Var b) {
  require(cols(a) == cols(b), "matmul_nt: column counts differ");
  Node n;
  n.op = Op::MatMulNT;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = needs(a) || needs(b);
  n.value.noalias() = value(a) * value(b).transpose();
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = needs(a) || needs(b);
  n.value = value(a) + value(b);
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  require(rows(a) == rows(b) && cols(a) == cols(b), "sub: shape mismatch");
  Node n;
  n.op = Op::Sub;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = needs(a) || needs(b);
  n.value = value(a) - value(b);
  return push(std::move(n));
}

Var Tape::add_row(Var a, Var row) {
  require(rows(row) == 1 && cols(row) == cols(a), "add_row: row shape mismatch");
  Node n;
  n.op = Op::AddRow;
  n.a = a.id;
  n.b = row.id;
  n.needs_grad = needs(a) || needs(row);
  n.value = value(a).rowwise() + value(row).row(0);
  return push(std::move(n));
}

Var Tape::scale(Var a, double s) {
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.scalar = s;
  n.needs_grad = needs(a);
  n.value = value(a) * s;
  return push(std::move(n));
}

Var Tape::mul_constant(Var a, Matrix mask) {
  require(mask.rows() == rows(a) && mask.cols() == cols(a), "mul_constant: shape mismatch");
  Node n;
  n.op = Op::MulConstant;
  n.a = a.id;
  n.needs_grad = needs(a);
  n.value = value(a).cwiseProduct(mask);
  n.aux = std::move(mask);
  return push(std::move(n));
}

Var Tape::gelu(Var a) {
  Node n;
  n.op = Op::Gelu;
  n.a = a.id;
  n.needs_grad = needs(a);
  const Matrix& x = value(a);
  n.value.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    n.value.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return push(std::move(n));
}

Var Tape::sigmoid(Var a) {
  Node n;
  n.op = Op::Sigmoid;
  n.a = a.id;
  n.needs_grad = needs(a);
  const Matrix& x = value(a);
  n.value.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    n.value.data()[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return push(std::move(n));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index d = cols(x);
  require(rows(gain) == 1 && cols(gain) == d && rows(bias) == 1 && cols(bias) == d,
          "layer_norm: gain/bias shape mismatch");
  Node n;
  n.op = Op::LayerNorm;
  n.a = x.id;
  n.b = gain.id;
  n.c = bias.id;
  n.needs_grad = needs(x) || needs(gain) || needs(bias);
  const Matrix& in = value(x);
  n.aux.resize(in.rows(), d);   // normalized input
  n.aux2.resize(in.rows(), 1);  // reciprocal standard deviation
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const double mean = in.row(r).mean();
    const double var = (in.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + eps);
    n.aux.row(r) = (in.row(r).array() - mean) * rstd;
    n.aux2(r, 0) = rstd;
  }
  n.value = (n.aux.array().rowwise() * value(gain).row(0).array()).rowwise() + value(bias).row(0).array();
  return push(std::move(n));
}

Var Tape::softmax_rows(Var a, bool causal) {
  Node n;
  n.op = Op::Softmax;
  n.a = a.id;
  n.needs_grad = needs(a);
  const Matrix& x = value(a);
  n.value = Matrix::Zero(x.rows(), x.cols());
  const Eigen::Index shift = x.cols() - x.rows();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Eigen::Index width = causal ? std::min<Eigen::Index>(x.cols(), r + shift + 1) : x.cols();
    require(width > 0, "softmax_rows: empty row");
    const double mx = x.row(r).head(width).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < width; ++c) {
      const double e = std::exp(x(r, c) - mx);
      n.value(r, c) = e;
      total += e;
    }
    n.value.row(r).head(width) /= total;
  }
  return push(std::move(n));
}

Var Tape::slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count > 0 && start + count <= rows(a), "slice_rows: out of range");
  Node n;
  n.op = Op::SliceRows;
  n.a = a.id;
  n.offset = start;
  n.needs_grad = needs(a);
  n.value = value(a).middleRows(start, count);
  return push(std::move(n));
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count > 0 && start + count <= cols(a), "slice_cols: out of range");
  Node n;
  n.op = Op::SliceCols;
  n.a = a.id;
  n.offset = start;
  n.needs_grad = needs(a);
  n.value = value(a).middleCols(start, count);
  return push(std::move(n));
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  Node n;
  n.op = Op::ConcatRows;
  Eigen::Index total = 0;
  const Eigen::Index c = cols(parts.front());
  for (auto p : parts) {
    require(cols(p) == c, "concat_rows: column mismatch");
    total += rows(p);
    n.inputs.push_back(p.id);
    n.needs_grad = n.needs_grad || needs(p);
  }
  n.value.resize(total, c);
  Eigen::Index at = 0;
  for (auto p : parts) {
    n.value.middleRows(at, rows(p)) = value(p);
    at += rows(p);
  }
  return push(std::move(n));
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  Node n;
  n.op = Op::ConcatCols;
  Eigen::Index total = 0;
  const Eigen::Index r = rows(parts.front());
  for (auto p : parts) {
    require(rows(p) == r, "concat_cols: row mismatch");
    total += cols(p);
    n.inputs.push_back(p.id);
    n.needs_grad = n.needs_grad || needs(p);
  }
  n.value.resize(r, total);
  Eigen::Index at = 0;
  for (auto p : parts) {
    n.value.middleCols(at, cols(p)) = value(p);
    at += cols(p);
  }
  return push(std::move(n));
}

Var Tape::gather_rows(Var table, const std::vector<std::int32_t>& ids) {
  Node n;
  n.op = Op::GatherRows;
  n.a = table.id;
  n.inputs = ids;
  n.needs_grad = needs(table);
  const Matrix& t = value(table);
  n.value.resize(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && ids[r] < t.rows(), "gather_rows: id out of range");
    n.value.row(static_cast<Eigen::Index>(r)) = t.row(ids[r]);
  }
  return push(std::move(n));
}

Var Tape::mean_rows(Var a) {
  require(rows(a) > 0, "mean_rows: no rows");
  Node n;
  n.op = Op::MeanRows;
  n.a = a.id;
  n.needs_grad = needs(a);
  n.value = value(a).colwise().mean();
  return push(std::move(n));
}

Var Tape::blend(Var weight, Var mask_row, Var block) {
  require(rows(weight) == 1 && cols(weight) == 1, "blend: weight must be 1x1");
  require(rows(mask_row) == 1 && cols(mask_row) == cols(block), "blend: mask row shape mismatch");
  Node n;
  n.op = Op::Blend;
  n.a = weight.id;
  n.b = mask_row.id;
  n.c = block.id;
  n.needs_grad = needs(weight) || needs(mask_row) || needs(block);
  const double w = scalar_value(weight);
  const Matrix& h = value(block);
  n.value.resize(h.rows(), h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    for (Eigen::Index c = 0; c < h.cols(); ++c) {
      n.value(r, c) = w * value(mask_row)(0, c) + (1.0 - w) * h(r, c);
    }
  }
  return push(std::move(n));
}

Var Tape::row_blend(Var gate, Var a, Var b) {
  require(cols(gate) == 1 && rows(gate) == rows(a), "row_blend: gate shape mismatch");
  require(rows(a) == rows(b) && cols(a) == cols(b), "row_blend: operand shape mismatch");
  Node n;
  n.op = Op::RowBlend;
  n.a = gate.id;
  n.b = a.id;
  n.c = b.id;
  n.needs_grad = needs(gate) || needs(a) || needs(b);
  const Matrix& g = value(gate);
  const Matrix& x = value(a);
  const Matrix& y = value(b);
  n.value.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      n.value(r, c) = g(r, 0) * x(r, c) + (1.0 - g(r, 0)) * y(r, c);
    }
  }
  return push(std::move(n));
}

Var Tape::cross_entropy(Var logits, const std::vector<std::int32_t>& targets, std::int32_t ignore_id) {
  const Matrix& x = value(logits);
  require(static_cast<Eigen::Index>(targets.size()) == x.rows(), "cross_entropy: target count mismatch");
  Node n;
  n.op = Op::CrossEntropy;
  n.a = logits.id;
  n.inputs = targets;
  n.offset = ignore_id;
  n.needs_grad = needs(logits);
  n.aux.resize(x.rows(), x.cols());
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    const double lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    n.aux.row(r) = (x.row(r).array() - lse).exp();
    const auto t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_id) continue;
    require(t >= 0 && t < x.cols(), "cross_entropy: target out of range");
    total += lse - x(r, t);
    ++count;
  }
  require(count > 0, "cross_entropy: every target is ignored");
  n.scalar = static_cast<double>(count);
  n.value = Matrix::Constant(1, 1, total / static_cast<double>(count));
  return push(std::move(n));
}

Var Tape::info_nce(Var scores, double tau) {
  require(rows(scores) == 1 && cols(scores) >= 2, "info_nce: need a positive and at least one negative");
  require(tau > 0.0, "info_nce: temperature must be positive");
  Node n;
  n.op = Op::InfoNce;
  n.a = scores.id;
  n.scalar = tau;
  n.needs_grad = needs(scores);
  const Eigen::ArrayXd s = value(scores).row(0).transpose().array() / tau;
  const double mx = s.maxCoeff();
  const double lse = mx + std::log((s - mx).exp().sum());
  n.aux = ((s - lse).exp()).matrix().transpose();
  n.value = Matrix::Constant(1, 1, lse - s(0));
  return push(std::move(n));
}

Matrix& Tape::grad_of(std::int32_t id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss, std::vector<Matrix>& param_grads) {
  require(rows(loss) == 1 && cols(loss) == 1, "backward: loss must be 1x1");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  if (!needs(loss)) return;
  grad_of(loss.id)(0, 0) = 1.0;
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    if (nodes_[i].needs_grad && nodes_[i].grad.size() != 0) propagate(i, param_grads);
  }
}

void Tape::propagate(std::size_t index, std::vector<Matrix>& param_grads) {
  // Gradients are read by index each time: grad_of() never reallocates
  // nodes_, so references into other nodes stay valid.
  Node& n = nodes_[index];
  const Matrix& g = n.grad;
  auto wants = [this](std::int32_t id) { return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad; };
  auto val = [this](std::int32_t id) -> const Matrix& { return nodes_[static_cast<std::size_t>(id)].value; };

  switch (n.op) {
    case Op::Constant:
      break;
    case Op::Parameter:
      param_grads[static_cast<std::size_t>(n.offset)] += g;
      break;
    case Op::MatMul:
      if (wants(n.a)) grad_of(n.a).noalias() += g * val(n.b).transpose();
      if (wants(n.b)) grad_of(n.b).noalias() += val(n.a).transpose() * g;
      break;
    case Op::MatMulNT:
      if (wants(n.a)) grad_of(n.a).noalias() += g * val(n.b);
      if (wants(n.b)) grad_of(n.b).noalias() += g.transpose() * val(n.a);
      break;
    case Op::Add:
      if (wants(n.a)) grad_of(n.a) += g;
      if (wants(n.b)) grad_of(n.b) += g;
      break;
    case Op::Sub:
      if (wants(n.a)) grad_of(n.a) += g;
      if (wants(n.b)) grad_of(n.b) -= g;
      break;
    case Op::AddRow:
      if (wants(n.a)) grad_of(n.a) += g;
      if (wants(n.b)) grad_of(n.b) += g.colwise().sum();
      break;
    case Op::Scale:
      if (wants(n.a)) grad_of(n.a) += g * n.scalar;
      break;
    case Op::MulConstant:
      if (wants(n.a)) grad_of(n.a) += g.cwiseProduct(n.aux);
      break;
    case Op::Gelu: {
      if (!wants(n.a)) break;
      const Matrix& x = val(n.a);
      Matrix& ga = grad_of(n.a);
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double v = x.data()[i];
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        ga.data()[i] += g.data()[i] * d;
      }
      break;
    }
    case Op::Sigmoid:
      if (wants(n.a)) grad_of(n.a).array() += g.array() * n.value.array() * (1.0 - n.value.array());
      break;
    case Op::LayerNorm: {
      const Matrix& gain = val(n.b);
      if (wants(n.b)) grad_of(n.b) += (g.cwiseProduct(n.aux)).colwise().sum();
      if (wants(n.c)) grad_of(n.c) += g.colwise().sum();
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        const double d = static_cast<double>(g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gain.row(0));
          const double m1 = dxhat.sum() / d;
          const double m2 = dxhat.dot(n.aux.row(r)) / d;
          ga.row(r).array() += n.aux2(r, 0) * (dxhat.array() - m1 - n.aux.row(r).array() * m2);
        }
      }
      break;
    }
    case Op::Softmax:
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const double dot = g.row(r).dot(n.value.row(r));
          ga.row(r).array() += n.value.row(r).array() * (g.row(r).array() - dot);
        }
      }
      break;
    case Op::SliceRows:
      if (wants(n.a)) grad_of(n.a).middleRows(n.offset, g.rows()) += g;
      break;
    case Op::SliceCols:
      if (wants(n.a)) grad_of(n.a).middleCols(n.offset, g.cols()) += g;
      break;
    case Op::ConcatRows: {
      Eigen::Index at = 0;
      for (auto id : n.inputs) {
        const Eigen::Index r = val(id).rows();
        if (wants(id)) grad_of(id) += nodes_[index].grad.middleRows(at, r);
        at += r;
      }
      break;
    }
    case Op::ConcatCols: {
      Eigen::Index at = 0;
      for (auto id : n.inputs) {
        const Eigen::Index c = val(id).cols();
        if (wants(id)) grad_of(id) += nodes_[index].grad.middleCols(at, c);
        at += c;
      }
      break;
    }
    case Op::GatherRows:
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        for (std::size_t r = 0; r < n.inputs.size(); ++r) ga.row(n.inputs[r]) += g.row(static_cast<Eigen::Index>(r));
      }
      break;
    case Op::MeanRows:
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        const double inv = 1.0 / static_cast<double>(ga.rows());
        ga.rowwise() += g.row(0) * inv;
      }
      break;
    case Op::Blend: {
      const double w = val(n.a)(0, 0);
      const Matrix& m = val(n.b);
      const Matrix& h = val(n.c);
      if (wants(n.a)) grad_of(n.a)(0, 0) += ((-h).rowwise() + m.row(0)).cwiseProduct(g).sum();
      if (wants(n.b)) grad_of(n.b) += w * g.colwise().sum();
      if (wants(n.c)) grad_of(n.c) += (1.0 - w) * g;
      break;
    }
    case Op::RowBlend: {
      const Matrix& gate = val(n.a);
      const Matrix& x = val(n.b);
      const Matrix& y = val(n.c);
      if (wants(n.a)) grad_of(n.a) += (x - y).cwiseProduct(g).rowwise().sum();
      if (wants(n.b)) grad_of(n.b) += (g.array().colwise() * gate.col(0).array()).matrix();
      if (wants(n.c)) grad_of(n.c) += (g.array().colwise() * (1.0 - gate.col(0).array())).matrix();
      break;
    }
    case Op::CrossEntropy:
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        const double coef = g(0, 0) / n.scalar;
        for (Eigen::Index r = 0; r < ga.rows(); ++r) {
          const auto t = n.inputs[static_cast<std::size_t>(r)];
          if (t == static_cast<std::int32_t>(n.offset)) continue;
          ga.row(r) += coef * n.aux.row(r);
          ga(r, t) -= coef;
        }
      }
      break;
    case Op::InfoNce:
      if (wants(n.a)) {
        Matrix& ga = grad_of(n.a);
        const double coef = g(0, 0) / n.scalar;
        ga.row(0) += coef * n.aux.row(0);
        ga(0, 0) -= coef;
      }
      break;
  }
}

}  // namespace scriptgen::autograd
