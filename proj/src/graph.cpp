#include "gplab/graph.hpp"

#include "gplab/coverage.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace gplab {

int Graph::num_classes() const {
  int c = 0;
  for (int y : labels) c = std::max(c, y + 1);
  return c;
}

std::vector<std::vector<int>> Graph::adjacency_list() const {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(num_nodes()));
  for (auto [u, v] : edges) {
    adj[static_cast<std::size_t>(u)].push_back(v);
    adj[static_cast<std::size_t>(v)].push_back(u);
  }
  return adj;
}

std::vector<int> Graph::degrees() const {
  std::vector<int> deg(static_cast<std::size_t>(num_nodes()), 0);
  for (auto [u, v] : edges) {
    ++deg[static_cast<std::size_t>(u)];
    ++deg[static_cast<std::size_t>(v)];
  }
  return deg;
}

void Graph::validate() const {
  int n = num_nodes();
  for (auto [u, v] : edges) {
    if (u < 0 || u >= n || v < 0 || v >= n)
      throw DataError(name + ": edge endpoint out of range");
    if (u == v) throw DataError(name + ": self-loop stored explicitly");
  }
  if (!x.allFinite()) throw DataError(name + ": non-finite feature entry");
  if (!labels.empty()) {
    if (static_cast<int>(labels.size()) != n)
      throw DataError(name + ": label count != node count");
    int c = num_classes();
    for (int y : labels)
      if (y < 0 || y >= c) throw DataError(name + ": label out of range");
  }
}

void canonicalize_edges(std::vector<std::pair<int, int>>& edges) {
  for (auto& e : edges)
    if (e.first > e.second) std::swap(e.first, e.second);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  std::erase_if(edges, [](const auto& e) { return e.first == e.second; });
}

json NodeSplit::to_json() const {
  return json{{"labeled", labeled},
              {"unlabeled", unlabeled},
              {"test_targets", test_targets},
              {"test_clean", test_clean},
              {"val", val},
              {"poison", poison},
              {"shots_truncated", shots_truncated}};
}

NodeSplit NodeSplit::from_json(const json& j) {
  NodeSplit s;
  s.labeled = j.at("labeled").get<std::vector<int>>();
  s.unlabeled = j.at("unlabeled").get<std::vector<int>>();
  s.test_targets = j.at("test_targets").get<std::vector<int>>();
  s.test_clean = j.at("test_clean").get<std::vector<int>>();
  s.val = j.at("val").get<std::vector<int>>();
  s.poison = j.at("poison").get<std::vector<int>>();
  s.shots_truncated = j.value("shots_truncated", false);
  return s;
}

NodeSplit make_split(const Graph& graph, int shots, std::uint64_t seed) {
  cov::touch("make_split");
  if (graph.labels.empty()) throw DataError("make_split: graph has no labels");
  if (shots < 1) throw ConfigError("make_split: shots must be >= 1");
  int n = graph.num_nodes();
  int c = graph.num_classes();
  std::vector<int> class_count(static_cast<std::size_t>(c), 0);
  for (int y : graph.labels) ++class_count[static_cast<std::size_t>(y)];
  for (int k = 0; k < c; ++k)
    if (class_count[static_cast<std::size_t>(k)] == 0)
      throw DataError("make_split: class " + std::to_string(k) + " has zero nodes");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  NodeSplit s;
  int test_total = n / 5;  // floor(0.2 N)
  int targets = (test_total + 1) / 2;
  int clean = test_total - targets;
  std::size_t pos = 0;
  for (int i = 0; i < targets; ++i) s.test_targets.push_back(order[pos++]);
  for (int i = 0; i < clean; ++i) s.test_clean.push_back(order[pos++]);
  int remainder = n - test_total;
  int val_n = remainder / 10;  // floor(0.1 remainder)
  for (int i = 0; i < val_n; ++i) s.val.push_back(order[pos++]);

  std::vector<int> taken(static_cast<std::size_t>(c), 0);
  for (; pos < order.size(); ++pos) {
    int v = order[pos];
    int y = graph.labels[static_cast<std::size_t>(v)];
    if (taken[static_cast<std::size_t>(y)] < shots) {
      s.labeled.push_back(v);
      ++taken[static_cast<std::size_t>(y)];
    } else {
      s.unlabeled.push_back(v);
    }
  }
  for (int k = 0; k < c; ++k)
    if (taken[static_cast<std::size_t>(k)] < shots) s.shots_truncated = true;

  std::sort(s.test_targets.begin(), s.test_targets.end());
  std::sort(s.test_clean.begin(), s.test_clean.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  std::sort(s.unlabeled.begin(), s.unlabeled.end());
  return s;
}

NodeSplit select_poison_nodes(const NodeSplit& split, double ratio, std::uint64_t seed) {
  cov::touch("select_poison_nodes");
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw ConfigError("select_poison_nodes: ratio must be in (0, 1]");
  NodeSplit out = split;
  std::vector<int> pool = split.unlabeled;
  Rng rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  auto want = static_cast<std::size_t>(
      std::ceil(ratio * static_cast<double>(pool.size())));
  want = std::min(want, pool.size());
  out.poison.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(want));
  std::sort(out.poison.begin(), out.poison.end());
  return out;
}

namespace {

// BFS ball of radius `hops`; returns original ids with center first, then
// ring by ring in ascending id order.
std::vector<int> bfs_ball(const Graph& graph, int center, int hops) {
  auto adj = graph.adjacency_list();
  std::vector<int> dist(static_cast<std::size_t>(graph.num_nodes()), -1);
  std::vector<int> ordered{center};
  dist[static_cast<std::size_t>(center)] = 0;
  std::vector<int> frontier{center};
  for (int h = 1; h <= hops && !frontier.empty(); ++h) {
    std::vector<int> next;
    for (int u : frontier)
      for (int v : adj[static_cast<std::size_t>(u)])
        if (dist[static_cast<std::size_t>(v)] < 0) {
          dist[static_cast<std::size_t>(v)] = h;
          next.push_back(v);
        }
    std::sort(next.begin(), next.end());
    next.erase(std::unique(next.begin(), next.end()), next.end());
    ordered.insert(ordered.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return ordered;
}

EgoEntry ego_entry(const Graph& graph, int center, int hops) {
  cov::touch("extract_ego");
  if (center < 0 || center >= graph.num_nodes())
    throw IndexError("extract_ego: center out of range");
  if (hops < 0) throw ConfigError("extract_ego: hops must be >= 0");
  EgoEntry e;
  e.center = center;
  e.nodes = bfs_ball(graph, center, hops);
  std::unordered_map<int, int> local;
  local.reserve(e.nodes.size());
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    local[e.nodes[i]] = static_cast<int>(i);
  for (auto [u, v] : graph.edges) {
    auto iu = local.find(u);
    auto iv = local.find(v);
    if (iu != local.end() && iv != local.end()) e.edges.emplace_back(iu->second, iv->second);
  }
  canonicalize_edges(e.edges);
  if (!graph.labels.empty()) e.label = graph.labels[static_cast<std::size_t>(center)];
  return e;
}

Graph materialize_entry(const Graph& src, const EgoEntry& e) {
  Graph g;
  g.name = src.name + "/ego" + std::to_string(e.center);
  g.x.resize(static_cast<Eigen::Index>(e.nodes.size()), src.x.cols());
  for (std::size_t i = 0; i < e.nodes.size(); ++i)
    g.x.row(static_cast<Eigen::Index>(i)) = src.x.row(e.nodes[i]);
  g.edges = e.edges;
  if (!src.labels.empty()) {
    g.labels.reserve(e.nodes.size());
    for (int v : e.nodes) g.labels.push_back(src.labels[static_cast<std::size_t>(v)]);
  }
  return g;
}

}  // namespace

Graph materialize_ego(const Graph& source, const EgoEntry& e) {
  return materialize_entry(source, e);
}

Graph extract_ego(const Graph& graph, int center, int hops) {
  return materialize_entry(graph, ego_entry(graph, center, hops));
}

Graph EgoDataset::materialize(std::size_t i) const {
  return materialize_entry(*source, entries[i]);
}

EgoDataset build_ego_dataset(std::shared_ptr<const Graph> graph,
                             const std::vector<int>& centers, int hops) {
  EgoDataset ds;
  ds.source = std::move(graph);
  ds.hops = hops;
  ds.entries.reserve(centers.size());
  for (int c : centers) ds.entries.push_back(ego_entry(*ds.source, c, hops));
  return ds;
}

Mat svd_reduce(const Mat& features, int k) {
  cov::touch("svd_reduce");
  if (k < 1 || k > std::min(features.rows(), features.cols()))
    throw DimensionError("svd_reduce: k must be in [1, min(N, d)]");
  Eigen::BDCSVD<Mat> svd(features, Eigen::ComputeThinV);
  Mat v = svd.matrixV().leftCols(k);
  for (int j = 0; j < k; ++j) {
    Eigen::Index imax = 0;
    v.col(j).cwiseAbs().maxCoeff(&imax);
    if (v(imax, j) < 0.0) v.col(j) = -v.col(j);
  }
  return features * v;
}

Graph graft(const Graph& graph, int anchor, const Mat& sub_features, const Mat& sub_adj,
            const std::vector<int>& anchor_links) {
  cov::touch("graft");
  int n = graph.num_nodes();
  auto s = static_cast<int>(sub_features.rows());
  if (anchor < 0 || anchor >= n) throw IndexError("graft: anchor out of range");
  if (s > 0 && sub_features.cols() != graph.x.cols())
    throw DimensionError("graft: feature width mismatch");
  if (sub_adj.rows() != s || sub_adj.cols() != s)
    throw DimensionError("graft: sub_adj must be s x s");
  for (int i = 0; i < s; ++i) {
    if (sub_adj(i, i) != 0.0) throw DataError("graft: sub_adj diagonal must be zero");
    for (int j = i + 1; j < s; ++j)
      if (sub_adj(i, j) != sub_adj(j, i)) throw DataError("graft: sub_adj not symmetric");
  }
  for (int j : anchor_links)
    if (j < 0 || j >= s) throw IndexError("graft: anchor link index out of range");

  Graph out;
  out.name = graph.name;
  out.x.resize(n + s, graph.x.cols());
  out.x.topRows(n) = graph.x;
  if (s > 0) out.x.bottomRows(s) = sub_features;
  out.edges = graph.edges;
  for (int i = 0; i < s; ++i)
    for (int j = i + 1; j < s; ++j)
      if (sub_adj(i, j) != 0.0) out.edges.emplace_back(n + i, n + j);
  for (int j : anchor_links) out.edges.emplace_back(anchor, n + j);
  canonicalize_edges(out.edges);
  return out;
}

}  // namespace gplab
