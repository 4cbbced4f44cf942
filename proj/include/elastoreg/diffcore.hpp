// Reverse-mode automatic differentiation over dense matrix-valued nodes.
//
// A Tape records operations on matrices (scalars are 1x1) and propagates
// adjoints in reverse topological order. One tape per training worker;
// truncation to a checkpoint frees everything recorded after it while the
// leaf (parameter) nodes survive across iterations.

#ifndef ELASTOREG_DIFFCORE_HPP
#define ELASTOREG_DIFFCORE_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace elastoreg::diffcore {

using Matrix = Eigen::MatrixXd;

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,  // coefficient-wise; 1x1 operands broadcast
  Div,
  Neg,
  Scale,   // s * x, s a plain double
  Shift,   // x + s
  Ln,
  Exp,
  Sqrt,
  Tanh,
  Relu,
  Max,        // coefficient-wise max of two nodes
  ClampMin,   // max(x, s)
  MatMul,
  AddRowVec,   // (N x C) + broadcast (1 x C)
  ColwiseMax,  // (N x C) -> (1 x C), argmax rows recorded
  ConcatCols,
  Col,         // single-column slice
  Cols,        // contiguous column range
  Row,         // single-row slice
  GatherRows,  // row selection by index list (rows may repeat)
  RepeatRows,  // (1 x C) -> (N x C)
  Sum,         // all coefficients -> 1x1
  Trace3,
  Det3,
  Inv3,
};

struct Node {
  Matrix value;
  Matrix adjoint;  // empty until backward() touches this node
  Op op = Op::Leaf;
  int a = -1;
  int b = -1;
  double scalar = 0.0;
  std::vector<int> aux;  // concat parents, argmax rows, gather indices, slice info
};

class Tape {
 public:
  // Leaves are parameters: they survive truncation and receive gradients.
  int leaf(const Matrix& value);
  int constant(const Matrix& value);
  int constant(double value);

  int binary(Op op, int a, int b);
  int unary(Op op, int a, double scalar = 0.0);
  int matmul(int a, int b);
  int add_rowvec(int m, int r);
  int colwise_max(int m);
  int concat_cols(std::span<const int> parts);
  int col(int m, int j);
  int cols(int m, int j0, int count);
  int row(int m, int i);
  int gather_rows(int m, const std::vector<int>& rows);
  int repeat_rows(int r, int n);
  int sum(int m);
  int trace3(int m);
  int det3(int m);
  int inv3(int m);

  const Matrix& value(int i) const { return nodes_[i].value; }
  // Leaf values may be updated in place between iterations (optimizer step).
  Matrix& mutable_value(int i);
  const Matrix& adjoint(int i) const { return nodes_[i].adjoint; }

  // Seeds the (1x1) root with 1 and propagates adjoints to every reachable
  // node, each visited exactly once in reverse recording order.
  void backward(int root);

  int checkpoint() const { return static_cast<int>(nodes_.size()); }
  void truncate(int mark);
  std::size_t size() const { return nodes_.size(); }

 private:
  int push(Node n);
  Matrix& accum(int i);  // adjoint storage, zero-initialized on first touch
  void propagate(int i);

  std::vector<Node> nodes_;
};

// Handle for expression-style composition on a tape.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;

  Var() = default;
  Var(Tape& t, int i) : tape(&t), idx(i) {}
  const Matrix& value() const { return tape->value(idx); }
  double scalar() const;
  long rows() const { return value().rows(); }
  long cols() const { return value().cols(); }
};

Var leaf(Tape& t, const Matrix& v);
Var constant(Tape& t, const Matrix& v);
Var constant(Tape& t, double v);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator*(double s, Var a);
Var operator*(Var a, double s);
Var operator/(Var a, double s);
Var operator+(Var a, double s);
Var operator+(double s, Var a);
Var operator-(Var a, double s);
Var operator-(double s, Var a);

Var ln(Var a);
Var exp(Var a);
Var sqrt(Var a);
Var tanh(Var a);
Var relu(Var a);
Var max(Var a, Var b);
Var clamp_min(Var a, double lo);
Var square(Var a);

Var matmul(Var a, Var b);
Var add_rowvec(Var m, Var r);
Var colwise_max(Var m);
Var concat_cols(std::span<const Var> parts);
Var col(Var m, int j);
Var cols(Var m, int j0, int count);
Var row(Var m, int i);
Var gather_rows(Var m, const std::vector<int>& rows);
Var repeat_rows(Var r, int n);
Var sum(Var m);
Var dot(Var a, Var b);
Var trace3(Var m);
Var det3(Var m);
Var inv3(Var m);

}  // namespace elastoreg::diffcore

#endif
