#pragma once

#include <memory>
#include <vector>

#include "gplab/encoders.hpp"
#include "gplab/graph.hpp"

namespace gplab::pre {

// Node-disjoint induced subgraphs of a source graph; items record node
// provenance and local edges, features materialize on demand. Labels are
// deliberately absent: pretraining never sees them.
struct CorpusItem {
  std::vector<int> nodes;                  // original ids
  std::vector<std::pair<int, int>> edges;  // local indices, u < v
};

struct PretrainCorpus {
  std::shared_ptr<const Graph> source;
  std::vector<CorpusItem> items;

  std::size_t size() const { return items.size(); }
  Graph materialize(std::size_t i) const;
};

// k-medoids over adjacency-smoothed, L2-normalized features; every node is
// assigned to its nearest medoid, so clusters partition V and are nonempty.
PretrainCorpus partition_corpus(std::shared_ptr<const Graph> graph, int k,
                                std::uint64_t seed);

struct PretrainCfg {
  int epochs = 30;
  double lr = 1e-3;
  double noise_scale = 0.1;  // simgrace weight-perturbation scale
  double edge_drop = 0.2;    // graphcl
  double feat_mask = 0.2;    // graphcl
  double temperature = 0.5;  // contrastive temperature
  std::uint64_t seed = 0;
  std::vector<double>* loss_log = nullptr;  // per-epoch losses, optional
};

// Contrastive alignment of each item's readout under the encoder vs a
// weight-perturbed copy (perturbed view detached), in-batch negatives.
enc::EncoderParams pretrain_simgrace(enc::EncoderParams params, const PretrainCorpus& corpus,
                                     const PretrainCfg& cfg);

// Contrastive alignment of two stochastic augmentations (edge drop +
// feature mask) of each item, both views through the trainable encoder.
enc::EncoderParams pretrain_graphcl(enc::EncoderParams params, const PretrainCorpus& corpus,
                                    const PretrainCfg& cfg);

// Inner-product classification of true edges vs sampled non-edges, balanced
// one negative per positive. Works cluster-locally so every backbone stays
// within dense-adjacency bounds.
enc::EncoderParams pretrain_edgepred(enc::EncoderParams params, const Graph& graph,
                                     const PretrainCfg& cfg);

// Edge-vs-nonedge AUC of inner-product scores (diagnostic/oracle helper).
double edge_auc(const enc::EncoderParams& params, const Graph& graph, int samples,
                std::uint64_t seed);

}  // namespace gplab::pre
