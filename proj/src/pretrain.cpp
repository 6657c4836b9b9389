#include "gplab/pretrain.hpp"

#include "gplab/coverage.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "gplab/optim.hpp"

namespace gplab::pre {

using ad::Tape;
using ad::Var;

Graph PretrainCorpus::materialize(std::size_t i) const {
  const CorpusItem& item = items[i];
  Graph g;
  g.name = source->name + "/part" + std::to_string(i);
  g.x.resize(static_cast<Eigen::Index>(item.nodes.size()), source->x.cols());
  for (std::size_t r = 0; r < item.nodes.size(); ++r)
    g.x.row(static_cast<Eigen::Index>(r)) = source->x.row(item.nodes[r]);
  g.edges = item.edges;
  return g;
}

namespace {

// x_v + mean of neighbor features, L2-normalized rows
Mat smoothed_features(const Graph& g) {
  auto adj = g.adjacency_list();
  Mat f = g.x;
  for (int v = 0; v < g.num_nodes(); ++v) {
    const auto& nb = adj[static_cast<std::size_t>(v)];
    if (nb.empty()) continue;
    Vec mean = Vec::Zero(g.x.cols());
    for (int u : nb) mean += g.x.row(u).transpose();
    f.row(v) += mean.transpose() / static_cast<double>(nb.size());
  }
  for (Eigen::Index v = 0; v < f.rows(); ++v) {
    double n = f.row(v).norm();
    if (n > 0.0) f.row(v) /= n;
  }
  return f;
}

}  // namespace

PretrainCorpus partition_corpus(std::shared_ptr<const Graph> graph, int k,
                                std::uint64_t seed) {
  cov::touch("partition_corpus");
  const Graph& g = *graph;
  int n = g.num_nodes();
  if (k < 1 || k > n) throw ConfigError("partition_corpus: k must be in [1, N]");

  Mat f = smoothed_features(g);
  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> medoids(order.begin(), order.begin() + k);

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 20; ++iter) {
    // assignment: nearest medoid by cosine distance (rows are unit norm)
    Mat med(k, f.cols());
    for (int c = 0; c < k; ++c) med.row(c) = f.row(medoids[static_cast<std::size_t>(c)]);
    Mat sim = f * med.transpose();  // n x k
    for (int v = 0; v < n; ++v) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (sim(v, c) > sim(v, best)) best = c;
      assign[static_cast<std::size_t>(v)] = best;
    }
    for (int c = 0; c < k; ++c) assign[static_cast<std::size_t>(medoids[static_cast<std::size_t>(c)])] = c;

    // medoid update: member minimizing total in-cluster distance
    std::vector<std::vector<int>> members(static_cast<std::size_t>(k));
    for (int v = 0; v < n; ++v) members[static_cast<std::size_t>(assign[static_cast<std::size_t>(v)])].push_back(v);
    bool changed = false;
    for (int c = 0; c < k; ++c) {
      const auto& mem = members[static_cast<std::size_t>(c)];
      if (mem.empty()) continue;
      Mat fc(static_cast<Eigen::Index>(mem.size()), f.cols());
      for (std::size_t i = 0; i < mem.size(); ++i)
        fc.row(static_cast<Eigen::Index>(i)) = f.row(mem[i]);
      Vec total = (fc * fc.transpose()).rowwise().sum();  // higher = more central
      Eigen::Index best = 0;
      total.maxCoeff(&best);
      int nm = mem[static_cast<std::size_t>(best)];
      if (nm != medoids[static_cast<std::size_t>(c)]) {
        medoids[static_cast<std::size_t>(c)] = nm;
        changed = true;
      }
    }
    if (!changed) break;
  }

  // final assignment with the settled medoids
  Mat med(k, f.cols());
  for (int c = 0; c < k; ++c) med.row(c) = f.row(medoids[static_cast<std::size_t>(c)]);
  Mat sim = f * med.transpose();
  PretrainCorpus corpus;
  corpus.source = graph;
  corpus.items.resize(static_cast<std::size_t>(k));
  for (int v = 0; v < n; ++v) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (sim(v, c) > sim(v, best)) best = c;
    corpus.items[static_cast<std::size_t>(best)].nodes.push_back(v);
  }
  for (int c = 0; c < k; ++c) {
    int m = medoids[static_cast<std::size_t>(c)];
    auto& nodes = corpus.items[static_cast<std::size_t>(c)].nodes;
    if (std::find(nodes.begin(), nodes.end(), m) == nodes.end()) nodes.push_back(m);
  }
  // medoid pinning above can only add; rebuild cleanly: each node exactly once
  {
    std::vector<int> owner(static_cast<std::size_t>(n), -1);
    for (int c = 0; c < k; ++c)
      for (int v : corpus.items[static_cast<std::size_t>(c)].nodes) {
        if (owner[static_cast<std::size_t>(v)] < 0) owner[static_cast<std::size_t>(v)] = c;
      }
    for (int c = 0; c < k; ++c) corpus.items[static_cast<std::size_t>(c)].nodes.clear();
    for (int c = 0; c < k; ++c) owner[static_cast<std::size_t>(medoids[static_cast<std::size_t>(c)])] = c;
    for (int v = 0; v < n; ++v)
      corpus.items[static_cast<std::size_t>(owner[static_cast<std::size_t>(v)])].nodes.push_back(v);
  }

  for (auto& item : corpus.items) {
    std::sort(item.nodes.begin(), item.nodes.end());
    std::unordered_map<int, int> local;
    for (std::size_t i = 0; i < item.nodes.size(); ++i) local[item.nodes[i]] = static_cast<int>(i);
    for (auto [u, v] : g.edges) {
      auto iu = local.find(u);
      auto iv = local.find(v);
      if (iu != local.end() && iv != local.end())
        item.edges.emplace_back(iu->second, iv->second);
    }
    canonicalize_edges(item.edges);
  }
  return corpus;
}

namespace {

Mat gathered_rows(const Mat& x, const std::vector<int>& nodes) {
  Mat r(static_cast<Eigen::Index>(nodes.size()), x.cols());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    r.row(static_cast<Eigen::Index>(i)) = x.row(nodes[i]);
  return r;
}

Mat dense_from_edges(int n, const std::vector<std::pair<int, int>>& edges) {
  Mat a = Mat::Zero(n, n);
  for (auto [u, v] : edges) {
    a(u, v) = 1.0;
    a(v, u) = 1.0;
  }
  return a;
}

// pooled readout of one item through tape-registered weights
Var item_pooled(Tape& t, const enc::EncoderParams& p, const enc::EncoderVars& ev,
                const Mat& x, const Mat& adj) {
  Var xv = t.constant(x);
  Var av = t.constant(adj);
  return enc::readout_t(t, enc::encode_dense(t, p, ev, xv, av));
}

// InfoNCE over cosine similarities, positives on the diagonal
Var info_nce(Tape& t, Var z1, Var z2, double temperature) {
  Var dots = t.matmul(z1, t.transpose(z2));
  // epsilon inside the sqrt: d/dx sqrt(x) blows up at x = 0 (all-zero row)
  Var n1 = t.pow(t.add_scalar(t.row_sums(t.mul(z1, z1)), 1e-12), 0.5);
  Var n2 = t.pow(t.add_scalar(t.row_sums(t.mul(z2, z2)), 1e-12), 0.5);
  Var cos = t.div(t.div(dots, n1), t.transpose(n2));
  std::vector<int> diag(static_cast<std::size_t>(t.val(dots).rows()));
  std::iota(diag.begin(), diag.end(), 0);
  return t.cross_entropy(t.scale(cos, 1.0 / temperature), diag);
}

std::vector<Mat*> trainable_weights(enc::EncoderParams& p) { return p.weights(); }

std::vector<Mat> collect_grads(Tape& t, const enc::EncoderVars& ev,
                               const enc::EncoderParams& p) {
  std::vector<Mat> g{t.grad(ev.w1), t.grad(ev.w2)};
  if (p.arch == enc::Backbone::gat) {
    g.push_back(t.grad(ev.a1));
    g.push_back(t.grad(ev.a2));
  }
  return g;
}

}  // namespace

enc::EncoderParams pretrain_simgrace(enc::EncoderParams params, const PretrainCorpus& corpus,
                                     const PretrainCfg& cfg) {
  cov::touch("pretrain_simgrace");
  if (params.frozen) throw TrainError("pretrain: params already frozen");
  if (corpus.items.empty()) throw TrainError("pretrain: empty corpus");
  if (cfg.epochs < 1 || cfg.lr <= 0.0)
    throw ConfigError("pretrain: epochs must be >= 1 and lr positive");
  Rng rng(cfg.seed);
  Adam opt(cfg.lr);

  std::vector<Mat> xs, adjs;
  for (const auto& item : corpus.items) {
    xs.push_back(gathered_rows(corpus.source->x, item.nodes));
    adjs.push_back(dense_from_edges(static_cast<int>(item.nodes.size()), item.edges));
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // detached view: weight-perturbed copy, scale relative to each tensor's std
    enc::EncoderParams pert = params;
    {
      auto ws = pert.weights();
      for (Mat* w : ws) {
        double sd = std::sqrt((w->array() - w->mean()).square().mean());
        *w += gaussian(static_cast<int>(w->rows()), static_cast<int>(w->cols()), rng,
                       cfg.noise_scale * (sd > 0.0 ? sd : 1.0));
      }
    }
    Mat z2(static_cast<Eigen::Index>(corpus.items.size()), params.hidden);
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
      Graph gi;
      gi.x = xs[i];
      gi.edges = corpus.items[i].edges;
      z2.row(static_cast<Eigen::Index>(i)) = enc::readout(enc::encode(pert, gi));
    }

    Tape t;
    enc::EncoderVars ev = enc::register_encoder(t, params, true);
    std::vector<Var> rows;
    rows.reserve(corpus.items.size());
    for (std::size_t i = 0; i < corpus.items.size(); ++i)
      rows.push_back(item_pooled(t, params, ev, xs[i], adjs[i]));
    Var z1 = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
    Var loss = info_nce(t, z1, t.constant(z2), cfg.temperature);
    t.backward(loss);
    if (cfg.loss_log) cfg.loss_log->push_back(t.val(loss)(0, 0));
    opt.step(trainable_weights(params), collect_grads(t, ev, params));
  }
  return params;
}

enc::EncoderParams pretrain_graphcl(enc::EncoderParams params, const PretrainCorpus& corpus,
                                    const PretrainCfg& cfg) {
  cov::touch("pretrain_graphcl");
  if (params.frozen) throw TrainError("pretrain: params already frozen");
  if (corpus.items.empty()) throw TrainError("pretrain: empty corpus");
  if (cfg.epochs < 1 || cfg.lr <= 0.0)
    throw ConfigError("pretrain: epochs must be >= 1 and lr positive");
  if (cfg.edge_drop < 0.0 || cfg.edge_drop >= 1.0 || cfg.feat_mask < 0.0 ||
      cfg.feat_mask >= 1.0)
    throw ConfigError("pretrain_graphcl: drop rates must be in [0, 1)");
  Rng rng(cfg.seed);
  Adam opt(cfg.lr);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape t;
    enc::EncoderVars ev = enc::register_encoder(t, params, true);
    std::vector<Var> r1, r2;
    for (const auto& item : corpus.items) {
      Mat x = gathered_rows(corpus.source->x, item.nodes);
      auto n = static_cast<int>(item.nodes.size());
      for (int view = 0; view < 2; ++view) {
        std::vector<std::pair<int, int>> kept;
        for (auto e : item.edges)
          if (coin(rng) >= cfg.edge_drop) kept.push_back(e);
        Mat xv = x;
        for (Eigen::Index j = 0; j < xv.cols(); ++j)
          if (coin(rng) < cfg.feat_mask) xv.col(j).setZero();
        (view == 0 ? r1 : r2)
            .push_back(item_pooled(t, params, ev, xv, dense_from_edges(n, kept)));
      }
    }
    Var z1 = r1.size() == 1 ? r1[0] : t.concat_rows(r1);
    Var z2 = r2.size() == 1 ? r2[0] : t.concat_rows(r2);
    Var loss = info_nce(t, z1, z2, cfg.temperature);
    t.backward(loss);
    if (cfg.loss_log) cfg.loss_log->push_back(t.val(loss)(0, 0));
    opt.step(trainable_weights(params), collect_grads(t, ev, params));
  }
  return params;
}

namespace {

// contiguous chunks of at most cap nodes per cluster keep dense adjacency
// (and GAT attention) bounded
std::vector<CorpusItem> chunked_items(const PretrainCorpus& corpus, std::size_t cap) {
  std::vector<CorpusItem> out;
  for (const auto& item : corpus.items) {
    if (item.nodes.size() <= cap) {
      out.push_back(item);
      continue;
    }
    for (std::size_t at = 0; at < item.nodes.size(); at += cap) {
      CorpusItem part;
      std::size_t stop = std::min(item.nodes.size(), at + cap);
      part.nodes.assign(item.nodes.begin() + static_cast<std::ptrdiff_t>(at),
                        item.nodes.begin() + static_cast<std::ptrdiff_t>(stop));
      std::unordered_map<int, int> local;
      for (std::size_t i = 0; i < part.nodes.size(); ++i)
        local[part.nodes[i]] = static_cast<int>(i);
      for (auto [u, v] : item.edges) {
        // item edges are local to the original cluster: translate via ids
        int gu = item.nodes[static_cast<std::size_t>(u)];
        int gv = item.nodes[static_cast<std::size_t>(v)];
        auto iu = local.find(gu);
        auto iv = local.find(gv);
        if (iu != local.end() && iv != local.end())
          part.edges.emplace_back(iu->second, iv->second);
      }
      canonicalize_edges(part.edges);
      out.push_back(std::move(part));
    }
  }
  return out;
}

}  // namespace

enc::EncoderParams pretrain_edgepred(enc::EncoderParams params, const Graph& graph,
                                     const PretrainCfg& cfg) {
  cov::touch("pretrain_edgepred");
  if (params.frozen) throw TrainError("pretrain: params already frozen");
  if (graph.num_edges() < 1) throw TrainError("pretrain_edgepred: graph has no edges");
  if (cfg.epochs < 1 || cfg.lr <= 0.0)
    throw ConfigError("pretrain: epochs must be >= 1 and lr positive");

  auto src = std::make_shared<Graph>(graph);
  int k = std::max(1, graph.num_nodes() / 256);
  PretrainCorpus corpus = partition_corpus(src, k, cfg.seed);
  auto items = chunked_items(corpus, 512);

  // keep only clusters that can host both positives and negatives
  std::erase_if(items, [](const CorpusItem& it) {
    auto n = static_cast<long long>(it.nodes.size());
    return it.edges.empty() ||
           static_cast<long long>(it.edges.size()) >= n * (n - 1) / 2;
  });
  if (items.empty())
    throw TrainError("pretrain_edgepred: no cluster has both edges and non-edges");

  Rng rng(cfg.seed + 1);
  Adam opt(cfg.lr);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& item : items) {
      auto n = static_cast<int>(item.nodes.size());
      std::unordered_set<std::int64_t> edge_set;
      for (auto [u, v] : item.edges)
        edge_set.insert(static_cast<std::int64_t>(u) * n + v);
      auto is_edge = [&](int u, int v) {
        int a = std::min(u, v), b = std::max(u, v);
        return edge_set.count(static_cast<std::int64_t>(a) * n + b) > 0;
      };

      // balanced: one sampled non-edge per true edge
      std::vector<std::pair<int, int>> neg;
      std::uniform_int_distribution<int> pick(0, n - 1);
      for (auto [u, v] : item.edges) {
        (void)v;
        for (int tries = 0; tries < 200; ++tries) {
          int w = pick(rng);
          if (w != u && !is_edge(u, w)) {
            neg.emplace_back(u, w);
            break;
          }
        }
      }
      if (neg.empty()) continue;

      Tape t;
      enc::EncoderVars ev = enc::register_encoder(t, params, true);
      Var x = t.constant(gathered_rows(graph.x, item.nodes));
      Var adj = t.constant(dense_from_edges(n, item.edges));
      Var z = enc::encode_dense(t, params, ev, x, adj);

      auto pair_scores = [&](const std::vector<std::pair<int, int>>& pairs) {
        auto m = static_cast<int>(pairs.size());
        ad::SpMat su(m, n), sv(m, n);
        std::vector<Eigen::Triplet<double>> tu, tv;
        for (int i = 0; i < m; ++i) {
          tu.emplace_back(i, pairs[static_cast<std::size_t>(i)].first, 1.0);
          tv.emplace_back(i, pairs[static_cast<std::size_t>(i)].second, 1.0);
        }
        su.setFromTriplets(tu.begin(), tu.end());
        sv.setFromTriplets(tv.begin(), tv.end());
        return t.row_sums(t.mul(t.spmm(su, z), t.spmm(sv, z)));  // m x 1
      };

      Var pos = t.sigmoid(pair_scores(item.edges));
      Var negs = t.sigmoid(pair_scores(neg));
      Var lp = t.scale(t.sum_all(t.log(t.add_scalar(pos, 1e-12))),
                       -1.0 / static_cast<double>(item.edges.size()));
      Var ones = t.constant(Mat::Ones(t.val(negs).rows(), 1));
      Var ln = t.scale(t.sum_all(t.log(t.add_scalar(t.sub(ones, negs), 1e-12))),
                       -1.0 / static_cast<double>(neg.size()));
      Var loss = t.add(lp, ln);
      t.backward(loss);
      epoch_loss += t.val(loss)(0, 0);
      opt.step(trainable_weights(params), collect_grads(t, ev, params));
    }
    if (cfg.loss_log) cfg.loss_log->push_back(epoch_loss / static_cast<double>(items.size()));
  }
  return params;
}

double edge_auc(const enc::EncoderParams& params, const Graph& graph, int samples,
                std::uint64_t seed) {
  if (graph.num_edges() < 1) throw EvalError("edge_auc: no edges");
  Mat z = enc::encode(params, graph);
  Rng rng(seed);
  int n = graph.num_nodes();
  std::unordered_set<std::int64_t> edge_set;
  for (auto [u, v] : graph.edges) edge_set.insert(static_cast<std::int64_t>(u) * n + v);
  auto is_edge = [&](int u, int v) {
    int a = std::min(u, v), b = std::max(u, v);
    return edge_set.count(static_cast<std::int64_t>(a) * n + b) > 0;
  };
  std::uniform_int_distribution<std::size_t> epick(0, graph.edges.size() - 1);
  std::uniform_int_distribution<int> npick(0, n - 1);
  int wins = 0, ties = 0;
  for (int i = 0; i < samples; ++i) {
    auto [u, v] = graph.edges[epick(rng)];
    double pos = z.row(u).dot(z.row(v));
    int a = npick(rng), b = npick(rng);
    int guard = 0;
    while ((a == b || is_edge(a, b)) && guard++ < 1000) {
      a = npick(rng);
      b = npick(rng);
    }
    double neg = z.row(a).dot(z.row(b));
    if (pos > neg)
      ++wins;
    else if (pos == neg)
      ++ties;
  }
  return (wins + 0.5 * ties) / static_cast<double>(samples);
}

}  // namespace gplab::pre
