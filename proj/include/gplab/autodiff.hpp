#pragma once

#include <Eigen/Sparse>
#include <functional>
#include <vector>

#include "gplab/common.hpp"

namespace gplab::ad {

using SpMat = Eigen::SparseMatrix<double>;

// Eager reverse-mode tape over dense Eigen matrices. Values are computed as
// ops are recorded; backward() replays the tape in reverse. One tape per loss
// evaluation; leaves holding shared parameters are re-registered per tape.
class Tape {
 public:
  struct Var {
    int i = -1;
    bool valid() const { return i >= 0; }
  };

  Var input(Mat value, bool requires_grad);
  Var constant(Mat value) { return input(std::move(value), false); }
  Var param(Mat value) { return input(std::move(value), true); }

  const Mat& val(Var v) const { return nodes_[v.i].value; }
  // Zero matrix of the right shape when no gradient reached the node.
  Mat grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.i].requires_grad; }

  // Elementwise with broadcasting: b may match a, or be 1xC (per-column),
  // Rx1 (per-row) or 1x1 (scalar).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);

  Var matmul(Var a, Var b);
  Var spmm(const SpMat& a, Var b);  // constant sparse left factor

  Var scale(Var a, double s);
  Var add_scalar(Var a, double s);
  Var relu(Var a);
  Var leaky_relu(Var a, double slope);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var pow(Var a, double e);  // requires positive entries for fractional e

  Var transpose(Var a);
  Var row_sums(Var a);  // NxD -> Nx1
  Var col_sums(Var a);  // NxD -> 1xD
  Var sum_all(Var a);   // -> 1x1
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_rows(Var a, int r0, int n);
  // Zero matrix of shape rows x cols with val(src) placed at (r0, c0).
  Var place_block(Var src, int rows, int cols, int r0, int c0);
  Var reshape(Var a, int rows, int cols);  // column-major reinterpretation

  // Hard 0/1 adjacency from logits: forward symmetrizes, applies a sigmoid,
  // thresholds at 0.5 and zeroes the diagonal; backward follows the relaxed
  // sigmoid path (straight-through).
  Var binarize_st(Var logits);

  Var detach(Var a) { return constant(nodes_[a.i].value); }

  // Mean cross-entropy of row-wise softmax against integer labels.
  Var cross_entropy(Var scores, std::vector<int> labels);

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void(Tape&)> back;  // empty for leaves / no-grad nodes
  };

  Var emit(Mat value, bool requires_grad, std::function<void(Tape&)> back);
  void accumulate(int node, const Mat& g);
  Mat& grad_ref(int node);

  // Shared implementation for the four broadcasting elementwise ops.
  enum class Ew { Add, Sub, Mul, Div };
  Var elementwise(Var a, Var b, Ew op);

  std::vector<Node> nodes_;
  friend class TapeTest;
};

using Var = Tape::Var;

}  // namespace gplab::ad
