#include "gplab/encoders.hpp"

#include "gplab/coverage.hpp"

#include <cmath>
#include <fstream>

#include "gplab/serialize.hpp"

namespace gplab::enc {

using ad::Tape;
using ad::Var;

Backbone backbone_from_string(const std::string& s) {
  if (s == "gcn") return Backbone::gcn;
  if (s == "sage") return Backbone::sage;
  if (s == "gat") return Backbone::gat;
  throw ConfigError("unknown backbone '" + s + "' (expected one of {gcn, sage, gat})");
}

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::gcn:
      return "gcn";
    case Backbone::sage:
      return "sage";
    case Backbone::gat:
      return "gat";
  }
  return "?";
}

namespace {

Mat glorot(int rows, int cols, Rng& rng) {
  double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-lim, lim);
  Mat m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

}  // namespace

EncoderParams EncoderParams::init(Backbone arch, int in_dim, int hidden, Rng& rng) {
  if (in_dim < 1 || hidden < 1) throw ConfigError("encoder dims must be positive");
  EncoderParams p;
  p.arch = arch;
  p.in_dim = in_dim;
  p.hidden = hidden;
  switch (arch) {
    case Backbone::gcn:
    case Backbone::gat:
      p.w1 = glorot(in_dim, hidden, rng);
      p.w2 = glorot(hidden, hidden, rng);
      break;
    case Backbone::sage:
      p.w1 = glorot(2 * in_dim, hidden, rng);
      p.w2 = glorot(2 * hidden, hidden, rng);
      break;
  }
  if (arch == Backbone::gat) {
    p.a1 = glorot(2 * hidden, 1, rng);
    p.a2 = glorot(2 * hidden, 1, rng);
  }
  return p;
}

std::vector<Mat*> EncoderParams::weights() {
  std::vector<Mat*> w{&w1, &w2};
  if (arch == Backbone::gat) {
    w.push_back(&a1);
    w.push_back(&a2);
  }
  return w;
}

std::vector<const Mat*> EncoderParams::weights() const {
  std::vector<const Mat*> w{&w1, &w2};
  if (arch == Backbone::gat) {
    w.push_back(&a1);
    w.push_back(&a2);
  }
  return w;
}

std::uint64_t EncoderParams::weights_checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const Mat* m : weights()) h = checksum(*m, h);
  return h;
}

json EncoderParams::to_json() const {
  json j{{"architecture", to_string(arch)},
         {"in_dim", in_dim},
         {"hidden", hidden},
         {"frozen", frozen},
         {"w1", mat_to_json(w1)},
         {"w2", mat_to_json(w2)}};
  if (arch == Backbone::gat) {
    j["a1"] = mat_to_json(a1);
    j["a2"] = mat_to_json(a2);
  }
  return j;
}

EncoderParams EncoderParams::from_json(const json& j) {
  EncoderParams p;
  p.arch = backbone_from_string(j.at("architecture").get<std::string>());
  p.in_dim = j.at("in_dim").get<int>();
  p.hidden = j.at("hidden").get<int>();
  p.frozen = j.at("frozen").get<bool>();
  p.w1 = mat_from_json(j.at("w1"));
  p.w2 = mat_from_json(j.at("w2"));
  if (p.arch == Backbone::gat) {
    p.a1 = mat_from_json(j.at("a1"));
    p.a2 = mat_from_json(j.at("a2"));
  }
  return p;
}

void EncoderParams::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_json().dump(1) << "\n";
}

EncoderParams EncoderParams::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  json j;
  in >> j;
  return from_json(j);
}

EncoderParams freeze(EncoderParams p) {
  cov::touch("freeze");
  p.frozen = true;
  return p;
}

EncoderVars register_encoder(Tape& t, const EncoderParams& p, bool trainable) {
  bool grad = trainable && !p.frozen;
  EncoderVars ev;
  ev.w1 = t.input(p.w1, grad);
  ev.w2 = t.input(p.w2, grad);
  if (p.arch == Backbone::gat) {
    ev.a1 = t.input(p.a1, grad);
    ev.a2 = t.input(p.a2, grad);
  }
  return ev;
}

namespace {

// D^{-1/2} (A+I) D^{-1/2}, differentiable through adj
Var gcn_norm(Tape& t, Var adj) {
  auto n = static_cast<int>(t.val(adj).rows());
  Var tilde = t.add(adj, t.constant(Mat::Identity(n, n)));
  Var dinv = t.pow(t.row_sums(tilde), -0.5);  // n x 1
  Var half = t.mul(tilde, dinv);              // scales rows
  return t.mul(half, t.transpose(dinv));      // scales cols
}

// D^{-1} (A+I)
Var row_norm(Tape& t, Var adj) {
  auto n = static_cast<int>(t.val(adj).rows());
  Var tilde = t.add(adj, t.constant(Mat::Identity(n, n)));
  Var dinv = t.pow(t.row_sums(tilde), -1.0);
  return t.mul(tilde, dinv);
}

// Single-head additive attention over mask = adj + I. The row-max shift is a
// constant, so softmax values and gradients are unaffected while exp stays
// bounded. Masked-out entries contribute zero weight but their mask entries
// still receive gradient (the straight-through trigger path needs it).
Var attention(Tape& t, Var z, Var a, Var adj) {
  auto n = static_cast<int>(t.val(z).rows());
  int h = static_cast<int>(t.val(z).cols());
  Var a_src = t.slice_rows(a, 0, h);
  Var a_dst = t.slice_rows(a, h, h);
  Var s = t.matmul(z, a_src);                 // n x 1
  Var d = t.transpose(t.matmul(z, a_dst));    // 1 x n
  Var zeros = t.constant(Mat::Zero(n, n));
  Var e = t.leaky_relu(t.add(t.add(zeros, s), d), 0.2);
  Var mask = t.add(adj, t.constant(Mat::Identity(n, n)));

  const Mat& ev = t.val(e);
  const Mat& mv = t.val(mask);
  Mat shift(n, 1);
  for (int i = 0; i < n; ++i) {
    double mx = 0.0;  // self-loop always present; start from its value
    bool first = true;
    for (int j = 0; j < n; ++j)
      if (mv(i, j) > 0.0) {
        mx = first ? ev(i, j) : std::max(mx, ev(i, j));
        first = false;
      }
    shift(i, 0) = mx;
  }
  Var p = t.mul(t.exp(t.sub(e, t.constant(shift))), mask);
  Var denom = t.row_sums(p);
  return t.div(p, denom);
}

// L2-normalized rows: every node contributes a unit vector to the pooled sum,
// so a grafted block's pull on the readout is bounded by its node count, not
// by how far its features sit from the data manifold. Epsilon inside the sqrt
// keeps the gradient finite for all-zero rows.
Var unit_rows(Tape& t, Var z) {
  Var n2 = t.add_scalar(t.row_sums(t.mul(z, z)), 1e-12);
  return t.div(z, t.pow(n2, 0.5));
}

}  // namespace

Layer1Pre project_layer1(Tape& t, const EncoderParams& p, const EncoderVars& ev, Var x) {
  Layer1Pre pre;
  if (p.arch == Backbone::sage) {
    pre.xw1 = t.matmul(x, t.slice_rows(ev.w1, 0, p.in_dim));
    pre.xw1_nb = t.matmul(x, t.slice_rows(ev.w1, p.in_dim, p.in_dim));
  } else {
    pre.xw1 = t.matmul(x, ev.w1);
  }
  return pre;
}

Var encode_from_pre(Tape& t, const EncoderParams& p, const EncoderVars& ev,
                    const Layer1Pre& pre, Var adj) {
  switch (p.arch) {
    case Backbone::gcn: {
      Var ahat = gcn_norm(t, adj);
      Var h1 = t.relu(t.matmul(ahat, pre.xw1));
      return unit_rows(t, t.matmul(t.matmul(ahat, h1), ev.w2));
    }
    case Backbone::sage: {
      Var m = row_norm(t, adj);
      Var h1 = t.relu(t.add(pre.xw1, t.matmul(m, pre.xw1_nb)));
      Var self2 = t.matmul(h1, t.slice_rows(ev.w2, 0, p.hidden));
      Var nb2 = t.matmul(t.matmul(m, h1), t.slice_rows(ev.w2, p.hidden, p.hidden));
      return unit_rows(t, t.add(self2, nb2));
    }
    case Backbone::gat: {
      Var z1 = pre.xw1;
      Var h1 = t.relu(t.matmul(attention(t, z1, ev.a1, adj), z1));
      Var z2 = t.matmul(h1, ev.w2);
      return unit_rows(t, t.matmul(attention(t, z2, ev.a2, adj), z2));
    }
  }
  throw ConfigError("encode: unknown backbone");
}

Var encode_dense(Tape& t, const EncoderParams& p, const EncoderVars& ev, Var x, Var adj) {
  if (t.val(x).cols() != p.in_dim)
    throw DimensionError("encode: feature width " + std::to_string(t.val(x).cols()) +
                         " != encoder input width " + std::to_string(p.in_dim));
  return encode_from_pre(t, p, ev, project_layer1(t, p, ev, x), adj);
}

Var readout_t(Tape& t, Var node_emb) {
  if (t.val(node_emb).rows() == 0) throw EvalError("readout: empty embedding");
  return t.col_sums(node_emb);
}

Mat dense_adjacency(const Graph& g) {
  Mat a = Mat::Zero(g.num_nodes(), g.num_nodes());
  for (auto [u, v] : g.edges) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

Mat encode(const EncoderParams& p, const Graph& g) {
  cov::touch("encode");
  Tape t;
  Var x = t.constant(g.x);
  Var adj = t.constant(dense_adjacency(g));
  return t.val(encode_dense(t, p, register_encoder(t, p, false), x, adj));
}

Mat readout(const Mat& node_emb) {
  cov::touch("readout");
  if (node_emb.rows() == 0) throw EvalError("readout: empty embedding");
  return node_emb.colwise().sum();
}

ProjectionCache build_projection_cache(const EncoderParams& p, const Mat& features) {
  if (features.cols() != p.in_dim)
    throw DimensionError("projection cache: feature width mismatch");
  ProjectionCache c;
  if (p.arch == Backbone::sage) {
    c.xw1 = features * p.w1.topRows(p.in_dim);
    c.xw1_nb = features * p.w1.bottomRows(p.in_dim);
  } else {
    c.xw1 = features * p.w1;
  }
  return c;
}

}  // namespace gplab::enc
