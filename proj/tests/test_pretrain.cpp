#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <set>

#include "gplab/pretrain.hpp"
#include "test_util.hpp"

using namespace gplab;
using enc::Backbone;
using enc::EncoderParams;

namespace {

// cosine similarity between pooled readouts
double pooled_cos(const EncoderParams& p, const Graph& a, const Graph& b) {
  Mat ra = enc::readout(enc::encode(p, a));
  Mat rb = enc::readout(enc::encode(p, b));
  return ra.row(0).dot(rb.row(0)) / (ra.norm() * rb.norm() + 1e-12);
}

}  // namespace

TEST_CASE("corpus partition covers every node exactly once") {
  auto g = std::make_shared<Graph>(tu::blob_graph(20, 3, 8, 17));
  pre::PretrainCorpus corpus = pre::partition_corpus(g, 6, 0);
  CHECK(corpus.size() == 6);
  std::vector<int> seen;
  for (const auto& item : corpus.items) {
    CHECK_FALSE(item.nodes.empty());
    seen.insert(seen.end(), item.nodes.begin(), item.nodes.end());
    // local edges stay in range and are induced from the source
    for (auto [u, v] : item.edges) {
      CHECK(u >= 0);
      CHECK(v < static_cast<int>(item.nodes.size()));
      auto eg = std::make_pair(std::min(item.nodes[u], item.nodes[v]),
                               std::max(item.nodes[u], item.nodes[v]));
      CHECK(std::find(g->edges.begin(), g->edges.end(), eg) != g->edges.end());
    }
  }
  std::sort(seen.begin(), seen.end());
  CHECK(static_cast<int>(seen.size()) == g->num_nodes());
  CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());

  // same seed -> same partition; materialization is well-formed
  pre::PretrainCorpus again = pre::partition_corpus(g, 6, 0);
  for (std::size_t i = 0; i < corpus.size(); ++i)
    CHECK(again.items[i].nodes == corpus.items[i].nodes);
  Graph m = corpus.materialize(0);
  CHECK_NOTHROW(m.validate());
  CHECK(m.num_nodes() == static_cast<int>(corpus.items[0].nodes.size()));

  CHECK_THROWS_AS(pre::partition_corpus(g, 0, 0), ConfigError);
  CHECK_THROWS_AS(pre::partition_corpus(g, g->num_nodes() + 1, 0), ConfigError);
}

TEST_CASE("weight-perturbation contrastive pretraining aligns structural twins") {
  // two structurally identical feature blobs plus a dissimilar dense clump:
  // after pretraining, the twins' readouts should be closer than twin-vs-clump
  auto g = std::make_shared<Graph>(tu::blob_graph(16, 3, 8, 23, 0.15));
  pre::PretrainCorpus corpus = pre::partition_corpus(g, 8, 1);

  Rng rng(3);
  EncoderParams init = EncoderParams::init(Backbone::gcn, g->feat_dim(), 16, rng);
  pre::PretrainCfg cfg;
  cfg.epochs = 40;
  cfg.lr = 5e-3;
  cfg.seed = 4;
  std::vector<double> losses;
  cfg.loss_log = &losses;
  EncoderParams trained = pre::pretrain_simgrace(init, corpus, cfg);

  REQUIRE(losses.size() == 40);
  // optimization made real progress on the contrastive objective
  double head = (losses[0] + losses[1] + losses[2]) / 3.0;
  double tail = (losses[37] + losses[38] + losses[39]) / 3.0;
  CHECK(tail < head);

  // same class blob vs different class blob, measured on fresh subgraphs
  Graph a1 = extract_ego(*g, 0, 1), a2 = extract_ego(*g, 4, 1);
  Graph b1 = extract_ego(*g, 20, 1);
  CHECK(pooled_cos(trained, a1, a2) > pooled_cos(trained, a1, b1));

  CHECK(trained.weights_checksum() != init.weights_checksum());
  EncoderParams repeat = pre::pretrain_simgrace(init, corpus, cfg);
  CHECK(repeat.weights_checksum() == trained.weights_checksum());
}

TEST_CASE("augmentation contrastive pretraining runs and reduces its loss") {
  auto g = std::make_shared<Graph>(tu::blob_graph(16, 2, 8, 29, 0.2));
  pre::PretrainCorpus corpus = pre::partition_corpus(g, 6, 2);
  Rng rng(5);
  EncoderParams init = EncoderParams::init(Backbone::sage, g->feat_dim(), 12, rng);
  pre::PretrainCfg cfg;
  cfg.epochs = 30;
  cfg.lr = 5e-3;
  cfg.seed = 6;
  std::vector<double> losses;
  cfg.loss_log = &losses;
  EncoderParams trained = pre::pretrain_graphcl(init, corpus, cfg);
  REQUIRE(losses.size() == 30);
  double head = (losses[0] + losses[1] + losses[2]) / 3.0;
  double tail = (losses[27] + losses[28] + losses[29 - 1]) / 3.0;
  CHECK(tail < head);
  CHECK(trained.weights_checksum() != init.weights_checksum());
}

TEST_CASE("edge prediction pretraining lifts ranking above chance") {
  Graph g = tu::blob_graph(24, 3, 10, 37, 0.2);
  Rng rng(7);
  EncoderParams init = EncoderParams::init(Backbone::gcn, g.feat_dim(), 16, rng);

  // untrained inner products rank true edges near chance
  double auc0 = pre::edge_auc(init, g, 400, 11);
  CHECK(auc0 > 0.25);
  CHECK(auc0 < 0.95);

  pre::PretrainCfg cfg;
  cfg.epochs = 60;
  cfg.lr = 5e-3;
  cfg.seed = 8;
  std::vector<double> losses;
  cfg.loss_log = &losses;
  EncoderParams trained = pre::pretrain_edgepred(init, g, cfg);
  double auc1 = pre::edge_auc(trained, g, 400, 11);
  CHECK(auc1 > 0.7);
  CHECK(auc1 > auc0 - 0.05);
  CHECK(losses.front() > losses.back());
}

TEST_CASE("random-feature null keeps edge ranking weak") {
  // Features carry no signal and the wiring is uniform, yet message passing
  // alone correlates adjacent embeddings (neighbors aggregate each other), so
  // the untrained ranking sits above one half. It must stay well below the
  // separation a trained encoder reaches on structured data, and above the
  // inverted-ranking floor.
  Graph g;
  Rng rng(41);
  g.x = gaussian(60, 12, rng);
  std::set<std::pair<int, int>> es;
  std::uniform_int_distribution<int> pick(0, 59);
  while (es.size() < 120) {
    int u = pick(rng), v = pick(rng);
    if (u == v) continue;
    es.emplace(std::min(u, v), std::max(u, v));
  }
  g.edges.assign(es.begin(), es.end());
  g.name = "null";
  double auc = pre::edge_auc(EncoderParams::init(Backbone::gcn, 12, 16, rng), g, 2000, 13);
  CHECK(auc > 0.4);
  CHECK(auc < 0.85);
}

TEST_CASE("pretraining rejects bad configuration") {
  auto g = std::make_shared<Graph>(tu::blob_graph(8, 2, 6, 43));
  pre::PretrainCorpus corpus = pre::partition_corpus(g, 3, 0);
  Rng rng(9);
  EncoderParams p = EncoderParams::init(Backbone::gcn, g->feat_dim(), 8, rng);
  pre::PretrainCfg bad;
  bad.epochs = 0;
  CHECK_THROWS_AS(pre::pretrain_simgrace(p, corpus, bad), ConfigError);
  pre::PretrainCfg neg;
  neg.lr = -1.0;
  CHECK_THROWS_AS(pre::pretrain_graphcl(p, corpus, neg), ConfigError);
}
