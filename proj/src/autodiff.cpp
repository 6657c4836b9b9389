#include "gplab/autodiff.hpp"

#include <cmath>
#include <utility>

namespace gplab::ad {

Var Tape::input(Mat value, bool requires_grad) {
  return emit(std::move(value), requires_grad, nullptr);
}

Var Tape::emit(Mat value, bool requires_grad, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.i];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Mat& Tape::grad_ref(int node) {
  Node& n = nodes_[node];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(int node, const Mat& g) {
  if (!nodes_[node].requires_grad) return;
  grad_ref(node) += g;
}

namespace {

enum class Bcast { None, Row, Col, Scalar };

Bcast bcast_kind(const Mat& full, const Mat& small) {
  if (small.rows() == full.rows() && small.cols() == full.cols()) return Bcast::None;
  if (small.rows() == 1 && small.cols() == 1) return Bcast::Scalar;
  if (small.rows() == 1 && small.cols() == full.cols()) return Bcast::Row;
  if (small.cols() == 1 && small.rows() == full.rows()) return Bcast::Col;
  throw DimensionError("elementwise op: incompatible shapes " +
                       std::to_string(full.rows()) + "x" + std::to_string(full.cols()) +
                       " vs " + std::to_string(small.rows()) + "x" +
                       std::to_string(small.cols()));
}

Mat expand(const Mat& small, Bcast k, Eigen::Index rows, Eigen::Index cols) {
  switch (k) {
    case Bcast::None:
      return small;
    case Bcast::Scalar:
      return Mat::Constant(rows, cols, small(0, 0));
    case Bcast::Row:
      return small.replicate(rows, 1);
    case Bcast::Col:
      return small.replicate(1, cols);
  }
  return small;
}

Mat reduce(const Mat& g, Bcast k) {
  switch (k) {
    case Bcast::None:
      return g;
    case Bcast::Scalar: {
      Mat r(1, 1);
      r(0, 0) = g.sum();
      return r;
    }
    case Bcast::Row:
      return g.colwise().sum();
    case Bcast::Col:
      return g.rowwise().sum();
  }
  return g;
}

}  // namespace

Var Tape::elementwise(Var a, Var b, Ew op) {
  const Mat& av = nodes_[a.i].value;
  const Mat& bv = nodes_[b.i].value;
  // The larger operand fixes the output shape; the other may broadcast.
  bool a_is_full = av.size() >= bv.size();
  const Mat& full = a_is_full ? av : bv;
  const Mat& small = a_is_full ? bv : av;
  Bcast k = bcast_kind(full, small);
  Mat xp = expand(small, k, full.rows(), full.cols());
  const Mat& lhs = a_is_full ? full : xp;
  const Mat& rhs = a_is_full ? xp : full;

  Mat out;
  switch (op) {
    case Ew::Add:
      out = lhs + rhs;
      break;
    case Ew::Sub:
      out = lhs - rhs;
      break;
    case Ew::Mul:
      out = lhs.cwiseProduct(rhs);
      break;
    case Ew::Div:
      out = lhs.cwiseQuotient(rhs);
      break;
  }

  bool rg = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var o = emit(std::move(out), rg, nullptr);
  if (!rg) return o;

  int oi = o.i, ai = a.i, bi = b.i;
  switch (op) {
    case Ew::Add:
      nodes_[oi].back = [oi, ai, bi, k, a_is_full](Tape& t) {
        const Mat& g = t.nodes_[oi].grad;
        t.accumulate(a_is_full ? ai : bi, g);
        t.accumulate(a_is_full ? bi : ai, reduce(g, k));
      };
      break;
    case Ew::Sub:
      nodes_[oi].back = [oi, ai, bi, k, a_is_full](Tape& t) {
        const Mat& g = t.nodes_[oi].grad;
        if (a_is_full) {
          t.accumulate(ai, g);
          t.accumulate(bi, reduce(Mat(-g), k));
        } else {
          t.accumulate(ai, reduce(g, k));
          t.accumulate(bi, Mat(-g));
        }
      };
      break;
    case Ew::Mul:
      nodes_[oi].back = [oi, ai, bi, k, a_is_full](Tape& t) {
        const Mat& g = t.nodes_[oi].grad;
        const Mat& av2 = t.nodes_[ai].value;
        const Mat& bv2 = t.nodes_[bi].value;
        const Mat& fv = a_is_full ? av2 : bv2;
        const Mat& sv = a_is_full ? bv2 : av2;
        Mat sx = expand(sv, k, fv.rows(), fv.cols());
        t.accumulate(a_is_full ? ai : bi, g.cwiseProduct(sx));
        t.accumulate(a_is_full ? bi : ai, reduce(g.cwiseProduct(fv), k));
      };
      break;
    case Ew::Div:
      nodes_[oi].back = [oi, ai, bi, k, a_is_full](Tape& t) {
        const Mat& g = t.nodes_[oi].grad;
        const Mat& av2 = t.nodes_[ai].value;
        const Mat& bv2 = t.nodes_[bi].value;
        const Mat& ov = t.nodes_[oi].value;
        if (a_is_full) {
          Mat bx = expand(bv2, k, av2.rows(), av2.cols());
          t.accumulate(ai, g.cwiseQuotient(bx));
          t.accumulate(bi, reduce(Mat(-g.cwiseProduct(ov).cwiseQuotient(bx)), k));
        } else {
          t.accumulate(ai, reduce(g.cwiseQuotient(bv2), k));
          t.accumulate(bi, Mat(-g.cwiseProduct(ov).cwiseQuotient(bv2)));
        }
      };
      break;
  }
  return o;
}

Var Tape::add(Var a, Var b) { return elementwise(a, b, Ew::Add); }
Var Tape::sub(Var a, Var b) { return elementwise(a, b, Ew::Sub); }
Var Tape::mul(Var a, Var b) { return elementwise(a, b, Ew::Mul); }
Var Tape::div(Var a, Var b) { return elementwise(a, b, Ew::Div); }

Var Tape::matmul(Var a, Var b) {
  const Mat& av = nodes_[a.i].value;
  const Mat& bv = nodes_[b.i].value;
  if (av.cols() != bv.rows())
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(av.cols()) +
                         " vs " + std::to_string(bv.rows()) + ")");
  bool rg = nodes_[a.i].requires_grad || nodes_[b.i].requires_grad;
  Var o = emit(av * bv, rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i, bi = b.i;
    nodes_[oi].back = [oi, ai, bi](Tape& t) {
      const Mat& g = t.nodes_[oi].grad;
      if (t.nodes_[ai].requires_grad) t.accumulate(ai, g * t.nodes_[bi].value.transpose());
      if (t.nodes_[bi].requires_grad) t.accumulate(bi, t.nodes_[ai].value.transpose() * g);
    };
  }
  return o;
}

Var Tape::spmm(const SpMat& a, Var b) {
  const Mat& bv = nodes_[b.i].value;
  if (a.cols() != bv.rows()) throw DimensionError("spmm: inner dimensions differ");
  bool rg = nodes_[b.i].requires_grad;
  Var o = emit(a * bv, rg, nullptr);
  if (rg) {
    int oi = o.i, bi = b.i;
    SpMat at = a.transpose();
    nodes_[oi].back = [oi, bi, at](Tape& t) { t.accumulate(bi, at * t.nodes_[oi].grad); };
  }
  return o;
}

Var Tape::scale(Var a, double s) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value * s, rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai, s](Tape& t) { t.accumulate(ai, Mat(t.nodes_[oi].grad * s)); };
  }
  return o;
}

Var Tape::add_scalar(Var a, double s) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit((nodes_[a.i].value.array() + s).matrix(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) { t.accumulate(ai, t.nodes_[oi].grad); };
  }
  return o;
}

Var Tape::relu(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.cwiseMax(0.0), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      Mat mask = (t.nodes_[ai].value.array() > 0.0).cast<double>().matrix();
      t.accumulate(ai, t.nodes_[oi].grad.cwiseProduct(mask));
    };
  }
  return o;
}

Var Tape::leaky_relu(Var a, double slope) {
  const Mat& av = nodes_[a.i].value;
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(av.cwiseMax(Mat(av * slope)), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai, slope](Tape& t) {
      // 1 where the input was positive, slope elsewhere
      Mat mask = ((t.nodes_[ai].value.array() > 0.0).cast<double>() * (1.0 - slope) + slope)
                     .matrix();
      t.accumulate(ai, t.nodes_[oi].grad.cwiseProduct(mask));
    };
  }
  return o;
}

Var Tape::sigmoid(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Mat out = ((1.0 + (-nodes_[a.i].value.array()).exp()).inverse()).matrix();
  Var o = emit(std::move(out), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      const Mat& y = t.nodes_[oi].value;
      Mat d = (y.array() * (1.0 - y.array())).matrix();
      t.accumulate(ai, t.nodes_[oi].grad.cwiseProduct(d));
    };
  }
  return o;
}

Var Tape::exp(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.array().exp().matrix(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      t.accumulate(ai, t.nodes_[oi].grad.cwiseProduct(t.nodes_[oi].value));
    };
  }
  return o;
}

Var Tape::log(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.array().log().matrix(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      t.accumulate(ai, t.nodes_[oi].grad.cwiseQuotient(t.nodes_[ai].value));
    };
  }
  return o;
}

Var Tape::pow(Var a, double e) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.array().pow(e).matrix(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai, e](Tape& t) {
      Mat d = (e * t.nodes_[ai].value.array().pow(e - 1.0)).matrix();
      t.accumulate(ai, t.nodes_[oi].grad.cwiseProduct(d));
    };
  }
  return o;
}

Var Tape::transpose(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.transpose(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      t.accumulate(ai, t.nodes_[oi].grad.transpose());
    };
  }
  return o;
}

Var Tape::row_sums(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.rowwise().sum(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      t.accumulate(ai, t.nodes_[oi].grad.replicate(1, t.nodes_[ai].value.cols()));
    };
  }
  return o;
}

Var Tape::col_sums(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(nodes_[a.i].value.colwise().sum(), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      t.accumulate(ai, t.nodes_[oi].grad.replicate(t.nodes_[ai].value.rows(), 1));
    };
  }
  return o;
}

Var Tape::sum_all(Var a) {
  bool rg = nodes_[a.i].requires_grad;
  Mat s(1, 1);
  s(0, 0) = nodes_[a.i].value.sum();
  Var o = emit(std::move(s), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      double g = t.nodes_[oi].grad(0, 0);
      t.accumulate(ai,
                   Mat::Constant(t.nodes_[ai].value.rows(), t.nodes_[ai].value.cols(), g));
    };
  }
  return o;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty part list");
  Eigen::Index cols = nodes_[parts[0].i].value.cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (Var p : parts) {
    if (nodes_[p.i].value.cols() != cols) throw DimensionError("concat_rows: column mismatch");
    rows += nodes_[p.i].value.rows();
    rg = rg || nodes_[p.i].requires_grad;
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  std::vector<int> idx;
  std::vector<Eigen::Index> offs, lens;
  for (Var p : parts) {
    Eigen::Index n = nodes_[p.i].value.rows();
    out.middleRows(r, n) = nodes_[p.i].value;
    idx.push_back(p.i);
    offs.push_back(r);
    lens.push_back(n);
    r += n;
  }
  Var o = emit(std::move(out), rg, nullptr);
  if (rg) {
    int oi = o.i;
    nodes_[oi].back = [oi, idx, offs, lens](Tape& t) {
      const Mat& g = t.nodes_[oi].grad;
      for (std::size_t k = 0; k < idx.size(); ++k)
        t.accumulate(idx[k], g.middleRows(offs[k], lens[k]));
    };
  }
  return o;
}

Var Tape::slice_rows(Var a, int r0, int n) {
  const Mat& av = nodes_[a.i].value;
  if (r0 < 0 || n < 0 || r0 + n > av.rows()) throw IndexError("slice_rows: out of range");
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(av.middleRows(r0, n), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai, r0, n](Tape& t) {
      Mat g = Mat::Zero(t.nodes_[ai].value.rows(), t.nodes_[ai].value.cols());
      g.middleRows(r0, n) = t.nodes_[oi].grad;
      t.accumulate(ai, g);
    };
  }
  return o;
}

Var Tape::place_block(Var src, int rows, int cols, int r0, int c0) {
  const Mat& sv = nodes_[src.i].value;
  if (r0 < 0 || c0 < 0 || r0 + sv.rows() > rows || c0 + sv.cols() > cols)
    throw IndexError("place_block: block exceeds target shape");
  Mat out = Mat::Zero(rows, cols);
  out.block(r0, c0, sv.rows(), sv.cols()) = sv;
  bool rg = nodes_[src.i].requires_grad;
  Eigen::Index sr = sv.rows(), sc = sv.cols();  // before emit: it may reallocate nodes_
  Var o = emit(std::move(out), rg, nullptr);
  if (rg) {
    int oi = o.i, si = src.i;
    nodes_[oi].back = [oi, si, r0, c0, sr, sc](Tape& t) {
      t.accumulate(si, t.nodes_[oi].grad.block(r0, c0, sr, sc));
    };
  }
  return o;
}

Var Tape::reshape(Var a, int rows, int cols) {
  const Mat& av = nodes_[a.i].value;
  if (av.size() != static_cast<Eigen::Index>(rows) * cols)
    throw DimensionError("reshape: element count mismatch");
  Mat out = Eigen::Map<const Mat>(av.data(), rows, cols);
  bool rg = nodes_[a.i].requires_grad;
  Var o = emit(std::move(out), rg, nullptr);
  if (rg) {
    int oi = o.i, ai = a.i;
    nodes_[oi].back = [oi, ai](Tape& t) {
      const Mat& g = t.nodes_[oi].grad;
      const Mat& av2 = t.nodes_[ai].value;
      t.accumulate(ai, Mat(Eigen::Map<const Mat>(g.data(), av2.rows(), av2.cols())));
    };
  }
  return o;
}

Var Tape::binarize_st(Var logits) {
  const Mat& lv = nodes_[logits.i].value;
  if (lv.rows() != lv.cols()) throw DimensionError("binarize_st: matrix must be square");
  Mat sym = 0.5 * (lv + lv.transpose());
  Mat prob = ((1.0 + (-sym.array()).exp()).inverse()).matrix();
  Mat hard = (prob.array() > 0.5).cast<double>().matrix();
  hard.diagonal().setZero();
  bool rg = nodes_[logits.i].requires_grad;
  Var o = emit(std::move(hard), rg, nullptr);
  if (rg) {
    int oi = o.i, li = logits.i;
    nodes_[oi].back = [oi, li](Tape& t) {
      const Mat& lv2 = t.nodes_[li].value;
      Mat sym2 = 0.5 * (lv2 + lv2.transpose());
      Mat p = ((1.0 + (-sym2.array()).exp()).inverse()).matrix();
      Mat dp = (p.array() * (1.0 - p.array())).matrix();
      Mat g = t.nodes_[oi].grad;
      g.diagonal().setZero();
      // each logit feeds the symmetrized pair (i,j) and (j,i) with weight 1/2
      Mat gl = Mat(0.5 * (g + g.transpose())).cwiseProduct(dp);
      t.accumulate(li, gl);
    };
  }
  return o;
}

Var Tape::cross_entropy(Var scores, std::vector<int> labels) {
  const Mat& sv = nodes_[scores.i].value;
  Eigen::Index b = sv.rows(), c = sv.cols();
  if (static_cast<Eigen::Index>(labels.size()) != b)
    throw DimensionError("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= c) throw IndexError("cross_entropy: label out of range");
  Mat shifted = sv.colwise() - sv.rowwise().maxCoeff();
  Mat e = shifted.array().exp().matrix();
  Vec z = e.rowwise().sum();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i)
    loss += std::log(z(i)) - shifted(i, labels[static_cast<std::size_t>(i)]);
  loss /= static_cast<double>(b);
  Mat out(1, 1);
  out(0, 0) = loss;
  bool rg = nodes_[scores.i].requires_grad;
  Var o = emit(std::move(out), rg, nullptr);
  if (rg) {
    int oi = o.i, si = scores.i;
    Mat p = (e.array().colwise() / z.array()).matrix();
    nodes_[oi].back = [oi, si, p, labels, b](Tape& t) {
      double g = t.nodes_[oi].grad(0, 0);
      Mat ds = p;
      for (Eigen::Index i = 0; i < b; ++i) ds(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
      t.accumulate(si, Mat(ds * (g / static_cast<double>(b))));
    };
  }
  return o;
}

void Tape::backward(Var loss) {
  Node& ln = nodes_[loss.i];
  if (ln.value.rows() != 1 || ln.value.cols() != 1)
    throw DimensionError("backward: loss must be 1x1");
  grad_ref(loss.i)(0, 0) += 1.0;
  for (int i = loss.i; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back && n.grad.size() != 0) n.back(*this);
  }
}

}  // namespace gplab::ad
