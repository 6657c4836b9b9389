#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gplab/common.hpp"

namespace gplab {

using json = nlohmann::json;

// Attributed undirected graph. Edges are stored deduplicated as (u, v) with
// u < v; self-loops are never stored (encoders add them internally).
struct Graph {
  Mat x;                                   // N x d node features
  std::vector<std::pair<int, int>> edges;  // undirected, u < v, sorted
  std::vector<int> labels;                 // empty when absent
  std::string name;

  int num_nodes() const { return static_cast<int>(x.rows()); }
  int feat_dim() const { return static_cast<int>(x.cols()); }
  int num_edges() const { return static_cast<int>(edges.size()); }
  // 1 + max label; 0 when unlabeled
  int num_classes() const;

  std::vector<std::vector<int>> adjacency_list() const;
  std::vector<int> degrees() const;

  // Throws DataError on out-of-range endpoints / labels or non-finite features.
  void validate() const;
};

// Canonicalize an edge list in place: order endpoints, sort, dedupe, drop
// self-loops.
void canonicalize_edges(std::vector<std::pair<int, int>>& edges);

// Disjoint node partitions driving training and evaluation. poison is carved
// out of unlabeled by select_poison_nodes.
struct NodeSplit {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  std::vector<int> test_targets;
  std::vector<int> test_clean;
  std::vector<int> val;
  std::vector<int> poison;
  bool shots_truncated = false;  // some class had fewer nodes than requested

  json to_json() const;
  static NodeSplit from_json(const json& j);
};

// One ego-graph stored compactly: original node ids plus relabeled local
// edges. Feature rows are materialized on demand from the source graph to
// keep memory flat.
struct EgoEntry {
  int center = -1;              // original id; local index 0
  std::vector<int> nodes;       // original ids, nodes[0] == center
  std::vector<std::pair<int, int>> edges;  // local indices, u < v
  int label = -1;
};

struct EgoDataset {
  std::shared_ptr<const Graph> source;
  int hops = 2;
  std::vector<EgoEntry> entries;

  std::size_t size() const { return entries.size(); }
  Graph materialize(std::size_t i) const;
};

// Locator is either a built-in name (cora / citeseer / pubmed, synthesized
// deterministically) or a directory holding edges.txt, features.csv (or a
// features.bin mirror) and labels.txt.
Graph load_dataset(const std::string& path_or_name);

// 20% of nodes as test (split into targets/clean halves), 10% of the
// remainder as validation, `shots` per class labeled, rest unlabeled.
NodeSplit make_split(const Graph& graph, int shots, std::uint64_t seed);

// Copy of split with poison = ceil(ratio * |unlabeled|) nodes sampled from
// unlabeled without replacement.
NodeSplit select_poison_nodes(const NodeSplit& split, double ratio, std::uint64_t seed);

// Induced subgraph of all nodes within `hops` of center; center becomes
// local node 0, remaining nodes ordered ring by ring, ascending original id.
Graph extract_ego(const Graph& graph, int center, int hops);

// Compressed ego-graphs for a list of centers (labels copied when present).
EgoDataset build_ego_dataset(std::shared_ptr<const Graph> graph,
                             const std::vector<int>& centers, int hops);

// Materialize one stored ego-graph against its source.
Graph materialize_ego(const Graph& source, const EgoEntry& e);

// Projection onto the top-k right singular directions; each direction's
// largest-magnitude entry is made positive so results are sign-stable.
Mat svd_reduce(const Mat& features, int k);

// New graph with `sub` appended after the existing nodes: internal edges from
// sub_adj's upper triangle plus one edge anchor<->(N+j) per anchor_links
// entry. Labels are dropped (appended nodes have none).
Graph graft(const Graph& graph, int anchor, const Mat& sub_features, const Mat& sub_adj,
            const std::vector<int>& anchor_links);

}  // namespace gplab
