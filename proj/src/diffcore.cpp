#include "elastoreg/diffcore.hpp"

#include <cmath>

namespace elastoreg::diffcore {

namespace {

bool is_scalar(const Matrix& m) { return m.rows() == 1 && m.cols() == 1; }

void check_cwise_shapes(const Matrix& a, const Matrix& b) {
  if (is_scalar(a) || is_scalar(b)) return;
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("diffcore: coefficient-wise op shape mismatch");
  }
}

// Broadcast a 1x1 operand to the given shape (backward pass only; the
// cwise operands there are small column vectors).
Matrix bcast(const Matrix& m, long rows, long cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return Matrix::Constant(rows, cols, m(0, 0));
}

// Evaluates a cwise op on two same-shaped Eigen expressions without
// materializing broadcast copies of the operands.
template <class A, class B>
Matrix apply_cwise(Op op, const A& a, const B& b) {
  switch (op) {
    case Op::Add: return a + b;
    case Op::Sub: return a - b;
    case Op::Mul: return a.cwiseProduct(b);
    case Op::Div: return a.cwiseQuotient(b);
    case Op::Max: return a.cwiseMax(b);
    default: throw std::logic_error("diffcore: not a binary cwise op");
  }
}

// Accumulates the gradient expression `g` into the adjoint of an operand
// that may have been broadcast from 1x1; expressions evaluate straight
// into the adjoint without a temporary.
template <class E>
void accum_reduced(Matrix& adj, const Eigen::MatrixBase<E>& g) {
  if (adj.rows() == g.rows() && adj.cols() == g.cols()) {
    adj += g;
  } else {
    adj(0, 0) += g.sum();
  }
}

Matrix cofactor3(const Matrix& a) {
  Matrix c(3, 3);
  c(0, 0) = a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
  c(0, 1) = a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2);
  c(0, 2) = a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0);
  c(1, 0) = a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2);
  c(1, 1) = a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0);
  c(1, 2) = a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1);
  c(2, 0) = a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1);
  c(2, 1) = a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2);
  c(2, 2) = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  return c;
}

}  // namespace

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(const Matrix& value) {
  Node n;
  n.value = value;
  n.op = Op::Leaf;
  return push(std::move(n));
}

int Tape::constant(const Matrix& value) {
  Node n;
  n.value = value;
  n.op = Op::Const;
  return push(std::move(n));
}

int Tape::constant(double value) {
  return constant(Matrix::Constant(1, 1, value));
}

Matrix& Tape::mutable_value(int i) {
  Node& n = nodes_[i];
  if (n.op != Op::Leaf) {
    throw std::logic_error("diffcore: only leaf values may be mutated");
  }
  return n.value;
}

int Tape::binary(Op op, int a, int b) {
  const Matrix& va = nodes_[a].value;
  const Matrix& vb = nodes_[b].value;
  check_cwise_shapes(va, vb);
  long r = std::max(va.rows(), vb.rows());
  long c = std::max(va.cols(), vb.cols());
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  const bool grow_a = va.rows() != r || va.cols() != c;
  const bool grow_b = vb.rows() != r || vb.cols() != c;
  if (grow_a) {
    n.value = apply_cwise(op, Matrix::Constant(r, c, va(0, 0)), vb);
  } else if (grow_b) {
    n.value = apply_cwise(op, va, Matrix::Constant(r, c, vb(0, 0)));
  } else {
    n.value = apply_cwise(op, va, vb);
  }
  return push(std::move(n));
}

int Tape::unary(Op op, int a, double scalar) {
  const Matrix& v = nodes_[a].value;
  Node n;
  n.op = op;
  n.a = a;
  n.scalar = scalar;
  switch (op) {
    case Op::Neg: n.value = -v; break;
    case Op::Scale: n.value = scalar * v; break;
    case Op::Shift: n.value = v.array() + scalar; break;
    case Op::Ln:
      if (v.minCoeff() <= 0.0) {
        throw std::domain_error("diffcore: ln of non-positive value");
      }
      n.value = v.array().log();
      break;
    case Op::Exp: n.value = v.array().exp(); break;
    case Op::Sqrt:
      if (v.minCoeff() < 0.0) {
        throw std::domain_error("diffcore: sqrt of negative value");
      }
      n.value = v.array().sqrt();
      break;
    // Eigen vectorizes exp for doubles but not tanh; the exp form is ~16x
    // faster, saturates correctly at +-1 and matches std::tanh to 4 ulp.
    case Op::Tanh: n.value = 1.0 - 2.0 / ((2.0 * v.array()).exp() + 1.0); break;
    case Op::Relu: n.value = v.cwiseMax(0.0); break;
    case Op::ClampMin: n.value = v.cwiseMax(scalar); break;
    default: throw std::logic_error("diffcore: not a unary op");
  }
  return push(std::move(n));
}

int Tape::matmul(int a, int b) {
  const Matrix& va = nodes_[a].value;
  const Matrix& vb = nodes_[b].value;
  if (va.cols() != vb.rows()) {
    throw std::invalid_argument("diffcore: matmul inner dimension mismatch");
  }
  Node n;
  n.op = Op::MatMul;
  n.a = a;
  n.b = b;
  n.value.noalias() = va * vb;
  return push(std::move(n));
}

int Tape::add_rowvec(int m, int r) {
  const Matrix& vm = nodes_[m].value;
  const Matrix& vr = nodes_[r].value;
  if (vr.rows() != 1 || vr.cols() != vm.cols()) {
    throw std::invalid_argument("diffcore: add_rowvec shape mismatch");
  }
  Node n;
  n.op = Op::AddRowVec;
  n.a = m;
  n.b = r;
  // Column-at-a-time broadcast: sequential, vectorized column adds beat
  // Eigen's strided rowwise expression on large column-major operands.
  n.value = vm;
  for (long j = 0; j < vm.cols(); ++j) n.value.col(j).array() += vr(0, j);
  return push(std::move(n));
}

int Tape::colwise_max(int m) {
  const Matrix& v = nodes_[m].value;
  Node n;
  n.op = Op::ColwiseMax;
  n.a = m;
  n.value.resize(1, v.cols());
  n.aux.resize(v.cols());
  for (long c = 0; c < v.cols(); ++c) {
    long best = 0;
    v.col(c).maxCoeff(&best);
    n.aux[c] = static_cast<int>(best);
    n.value(0, c) = v(best, c);
  }
  return push(std::move(n));
}

int Tape::concat_cols(std::span<const int> parts) {
  if (parts.empty()) throw std::invalid_argument("diffcore: empty concat");
  long rows = nodes_[parts[0]].value.rows();
  long cols = 0;
  for (int p : parts) {
    if (nodes_[p].value.rows() != rows) {
      throw std::invalid_argument("diffcore: concat_cols row mismatch");
    }
    cols += nodes_[p].value.cols();
  }
  Node n;
  n.op = Op::ConcatCols;
  n.value.resize(rows, cols);
  long at = 0;
  for (int p : parts) {
    const Matrix& v = nodes_[p].value;
    n.value.middleCols(at, v.cols()) = v;
    n.aux.push_back(p);
    at += v.cols();
  }
  return push(std::move(n));
}

int Tape::col(int m, int j) { return cols(m, j, 1); }

int Tape::cols(int m, int j0, int count) {
  const Matrix& v = nodes_[m].value;
  if (j0 < 0 || count < 1 || j0 + count > v.cols()) {
    throw std::invalid_argument("diffcore: column slice out of range");
  }
  Node n;
  n.op = Op::Cols;
  n.a = m;
  n.aux = {j0, count};
  n.value = v.middleCols(j0, count);
  return push(std::move(n));
}

int Tape::row(int m, int i) {
  const Matrix& v = nodes_[m].value;
  if (i < 0 || i >= v.rows()) {
    throw std::invalid_argument("diffcore: row index out of range");
  }
  Node n;
  n.op = Op::Row;
  n.a = m;
  n.aux = {i};
  n.value = v.row(i);
  return push(std::move(n));
}

int Tape::gather_rows(int m, const std::vector<int>& rows) {
  const Matrix& v = nodes_[m].value;
  Node n;
  n.op = Op::GatherRows;
  n.a = m;
  n.aux = rows;
  n.value.resize(static_cast<long>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= v.rows()) {
      throw std::invalid_argument("diffcore: gather row out of range");
    }
    n.value.row(static_cast<long>(i)) = v.row(rows[i]);
  }
  return push(std::move(n));
}

int Tape::repeat_rows(int r, int count) {
  const Matrix& v = nodes_[r].value;
  if (v.rows() != 1) {
    throw std::invalid_argument("diffcore: repeat_rows wants a row vector");
  }
  Node n;
  n.op = Op::RepeatRows;
  n.a = r;
  n.value = v.replicate(count, 1);
  return push(std::move(n));
}

int Tape::sum(int m) {
  Node n;
  n.op = Op::Sum;
  n.a = m;
  n.value = Matrix::Constant(1, 1, nodes_[m].value.sum());
  return push(std::move(n));
}

int Tape::trace3(int m) {
  const Matrix& v = nodes_[m].value;
  if (v.rows() != 3 || v.cols() != 3) {
    throw std::invalid_argument("diffcore: trace3 wants a 3x3 node");
  }
  Node n;
  n.op = Op::Trace3;
  n.a = m;
  n.value = Matrix::Constant(1, 1, v.trace());
  return push(std::move(n));
}

int Tape::det3(int m) {
  const Matrix& v = nodes_[m].value;
  if (v.rows() != 3 || v.cols() != 3) {
    throw std::invalid_argument("diffcore: det3 wants a 3x3 node");
  }
  Node n;
  n.op = Op::Det3;
  n.a = m;
  n.value = Matrix::Constant(1, 1, v.determinant());
  return push(std::move(n));
}

int Tape::inv3(int m) {
  const Matrix& v = nodes_[m].value;
  if (v.rows() != 3 || v.cols() != 3) {
    throw std::invalid_argument("diffcore: inv3 wants a 3x3 node");
  }
  if (std::abs(v.determinant()) < 1e-300) {
    throw std::domain_error("diffcore: inv3 of singular matrix");
  }
  Node n;
  n.op = Op::Inv3;
  n.a = m;
  n.value = v.inverse();
  return push(std::move(n));
}

Matrix& Tape::accum(int i) {
  Node& n = nodes_[i];
  if (n.adjoint.rows() != n.value.rows() || n.adjoint.cols() != n.value.cols()) {
    n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  return n.adjoint;
}

void Tape::propagate(int i) {
  Node& n = nodes_[i];
  const Matrix& g = n.adjoint;
  if (g.size() == 0) return;
  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
      break;
    case Op::Add:
      accum_reduced(accum(n.a), g);
      accum_reduced(accum(n.b), g);
      break;
    case Op::Sub:
      accum_reduced(accum(n.a), g);
      accum_reduced(accum(n.b), -g);
      break;
    case Op::Mul: {
      const Matrix& va = nodes_[n.a].value;
      const Matrix& vb = nodes_[n.b].value;
      if (is_scalar(vb) && g.size() > 1) {
        accum_reduced(accum(n.a), vb(0, 0) * g);
      } else {
        accum_reduced(accum(n.a), g.cwiseProduct(vb));
      }
      if (is_scalar(va) && g.size() > 1) {
        accum_reduced(accum(n.b), va(0, 0) * g);
      } else {
        accum_reduced(accum(n.b), g.cwiseProduct(va));
      }
      break;
    }
    case Op::Div: {
      const Matrix& va = nodes_[n.a].value;
      const Matrix& vb = nodes_[n.b].value;
      if (is_scalar(vb) && g.size() > 1) {
        accum_reduced(accum(n.a), g / vb(0, 0));
        accum_reduced(accum(n.b),
                      -(g.cwiseProduct(va)) / (vb(0, 0) * vb(0, 0)));
      } else if (is_scalar(va) && g.size() > 1) {
        accum_reduced(accum(n.a), g.cwiseQuotient(vb));
        accum_reduced(
            accum(n.b),
            (-va(0, 0) * g.array() / vb.array().square()).matrix());
      } else {
        accum_reduced(accum(n.a), g.cwiseQuotient(vb));
        accum_reduced(
            accum(n.b),
            -g.cwiseProduct(va).cwiseQuotient(vb.cwiseProduct(vb)));
      }
      break;
    }
    case Op::Max: {
      const Matrix va = bcast(nodes_[n.a].value, g.rows(), g.cols());
      const Matrix vb = bcast(nodes_[n.b].value, g.rows(), g.cols());
      // Ties route to the first operand (subgradient choice).
      Matrix ga = ((va.array() >= vb.array()).cast<double>() * g.array()).matrix();
      Matrix gb = ((va.array() < vb.array()).cast<double>() * g.array()).matrix();
      accum_reduced(accum(n.a), ga);
      accum_reduced(accum(n.b), gb);
      break;
    }
    case Op::Neg:
      accum(n.a) -= g;
      break;
    case Op::Scale:
      accum(n.a) += n.scalar * g;
      break;
    case Op::Shift:
      accum(n.a) += g;
      break;
    case Op::Ln:
      accum(n.a) += g.cwiseQuotient(nodes_[n.a].value);
      break;
    case Op::Exp:
      accum(n.a) += g.cwiseProduct(n.value);
      break;
    case Op::Sqrt:
      accum(n.a).array() += 0.5 * g.array() / n.value.array();
      break;
    case Op::Tanh:
      accum(n.a).array() += g.array() * (1.0 - n.value.array().square());
      break;
    case Op::Relu:
      accum(n.a).array() +=
          g.array() * (nodes_[n.a].value.array() > 0.0).cast<double>();
      break;
    case Op::ClampMin:
      accum(n.a).array() +=
          g.array() * (nodes_[n.a].value.array() >= n.scalar).cast<double>();
      break;
    case Op::MatMul: {
      accum(n.a).noalias() += g * nodes_[n.b].value.transpose();
      accum(n.b).noalias() += nodes_[n.a].value.transpose() * g;
      break;
    }
    case Op::AddRowVec:
      accum(n.a) += g;
      accum(n.b) += g.colwise().sum();
      break;
    case Op::ColwiseMax: {
      Matrix& adj = accum(n.a);
      for (long c = 0; c < g.cols(); ++c) adj(n.aux[c], c) += g(0, c);
      break;
    }
    case Op::ConcatCols: {
      long at = 0;
      for (int p : n.aux) {
        long w = nodes_[p].value.cols();
        accum(p) += g.middleCols(at, w);
        at += w;
      }
      break;
    }
    case Op::Cols:
      accum(n.a).middleCols(n.aux[0], n.aux[1]) += g;
      break;
    case Op::Row:
      accum(n.a).row(n.aux[0]) += g;
      break;
    case Op::GatherRows: {
      Matrix& adj = accum(n.a);
      for (std::size_t i = 0; i < n.aux.size(); ++i) {
        adj.row(n.aux[i]) += g.row(static_cast<long>(i));
      }
      break;
    }
    case Op::RepeatRows:
      accum(n.a) += g.colwise().sum();
      break;
    case Op::Sum:
      accum(n.a).array() += g(0, 0);
      break;
    case Op::Trace3: {
      Matrix& adj = accum(n.a);
      adj(0, 0) += g(0, 0);
      adj(1, 1) += g(0, 0);
      adj(2, 2) += g(0, 0);
      break;
    }
    case Op::Det3:
      accum(n.a) += g(0, 0) * cofactor3(nodes_[n.a].value);
      break;
    case Op::Inv3:
      accum(n.a).noalias() -= n.value.transpose() * g * n.value.transpose();
      break;
  }
}

void Tape::backward(int root) {
  Node& r = nodes_[root];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw std::invalid_argument("diffcore: backward root must be scalar");
  }
  for (Node& n : nodes_) n.adjoint.resize(0, 0);
  accum(root)(0, 0) = 1.0;
  for (int i = root; i >= 0; --i) propagate(i);
}

void Tape::truncate(int mark) {
  if (mark < 0 || mark > static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("diffcore: bad truncation marker");
  }
  for (std::size_t i = mark; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::Leaf) {
      throw std::invalid_argument("diffcore: truncation would drop a leaf");
    }
  }
  nodes_.resize(mark);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::logic_error("diffcore: scalar() on non-scalar node");
  }
  return v(0, 0);
}

Var leaf(Tape& t, const Matrix& v) { return {t, t.leaf(v)}; }
Var constant(Tape& t, const Matrix& v) { return {t, t.constant(v)}; }
Var constant(Tape& t, double v) { return {t, t.constant(v)}; }

Var operator+(Var a, Var b) { return {*a.tape, a.tape->binary(Op::Add, a.idx, b.idx)}; }
Var operator-(Var a, Var b) { return {*a.tape, a.tape->binary(Op::Sub, a.idx, b.idx)}; }
Var operator*(Var a, Var b) { return {*a.tape, a.tape->binary(Op::Mul, a.idx, b.idx)}; }
Var operator/(Var a, Var b) { return {*a.tape, a.tape->binary(Op::Div, a.idx, b.idx)}; }
Var operator-(Var a) { return {*a.tape, a.tape->unary(Op::Neg, a.idx)}; }
Var operator*(double s, Var a) { return {*a.tape, a.tape->unary(Op::Scale, a.idx, s)}; }
Var operator*(Var a, double s) { return s * a; }
Var operator/(Var a, double s) { return (1.0 / s) * a; }
Var operator+(Var a, double s) { return {*a.tape, a.tape->unary(Op::Shift, a.idx, s)}; }
Var operator+(double s, Var a) { return a + s; }
Var operator-(Var a, double s) { return a + (-s); }
Var operator-(double s, Var a) { return (-a) + s; }

Var ln(Var a) { return {*a.tape, a.tape->unary(Op::Ln, a.idx)}; }
Var exp(Var a) { return {*a.tape, a.tape->unary(Op::Exp, a.idx)}; }
Var sqrt(Var a) { return {*a.tape, a.tape->unary(Op::Sqrt, a.idx)}; }
Var tanh(Var a) { return {*a.tape, a.tape->unary(Op::Tanh, a.idx)}; }
Var relu(Var a) { return {*a.tape, a.tape->unary(Op::Relu, a.idx)}; }
Var max(Var a, Var b) { return {*a.tape, a.tape->binary(Op::Max, a.idx, b.idx)}; }
Var clamp_min(Var a, double lo) { return {*a.tape, a.tape->unary(Op::ClampMin, a.idx, lo)}; }
Var square(Var a) { return a * a; }

Var matmul(Var a, Var b) { return {*a.tape, a.tape->matmul(a.idx, b.idx)}; }
Var add_rowvec(Var m, Var r) { return {*m.tape, m.tape->add_rowvec(m.idx, r.idx)}; }
Var colwise_max(Var m) { return {*m.tape, m.tape->colwise_max(m.idx)}; }

Var concat_cols(std::span<const Var> parts) {
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const Var& p : parts) ids.push_back(p.idx);
  return {*parts[0].tape, parts[0].tape->concat_cols(ids)};
}

Var col(Var m, int j) { return {*m.tape, m.tape->col(m.idx, j)}; }
Var cols(Var m, int j0, int count) { return {*m.tape, m.tape->cols(m.idx, j0, count)}; }
Var row(Var m, int i) { return {*m.tape, m.tape->row(m.idx, i)}; }
Var gather_rows(Var m, const std::vector<int>& rows) {
  return {*m.tape, m.tape->gather_rows(m.idx, rows)};
}
Var repeat_rows(Var r, int n) { return {*r.tape, r.tape->repeat_rows(r.idx, n)}; }
Var sum(Var m) { return {*m.tape, m.tape->sum(m.idx)}; }
Var dot(Var a, Var b) { return sum(a * b); }
Var trace3(Var m) { return {*m.tape, m.tape->trace3(m.idx)}; }
Var det3(Var m) { return {*m.tape, m.tape->det3(m.idx)}; }
Var inv3(Var m) { return {*m.tape, m.tape->inv3(m.idx)}; }

}  // namespace elastoreg::diffcore
