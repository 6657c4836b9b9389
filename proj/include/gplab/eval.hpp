#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gplab/attack.hpp"
#include "gplab/common.hpp"
#include "gplab/graph.hpp"
#include "gplab/pretrain.hpp"
#include "gplab/prompts.hpp"

namespace gplab::ev {

struct Metrics {
  std::string scenario = "direct";
  double asr = 0.0;  // hits / targets, exact fraction
  double ca = 0.0;   // correct / clean, exact fraction
  int targets = 0;
  int hits = 0;
  int clean = 0;
  int correct = 0;

  json to_json() const;
};

// Throws when any training partition overlaps the test sets or poison leaves
// the unlabeled pool.
void audit_no_leakage(const NodeSplit& split);

// ASR over test targets (trigger attached, prompted, classified as the
// attack's target class) and CA over clean test nodes. Triggers come fresh
// from the run's generator (or its fixed trigger). An optional pruning
// threshold applies the edge-similarity defense to every assembled ego
// before encoding.
Metrics evaluate(const atk::AttackRun& run, std::shared_ptr<const Graph> graph,
                 const NodeSplit& split,
                 std::optional<double> prune_threshold = std::nullopt);

// Header fine-tuned on clean labeled egos (prompt fixed), then re-evaluated.
Metrics scenario_finetune_header(const atk::AttackRun& run,
                                 std::shared_ptr<const Graph> graph,
                                 const NodeSplit& split, const prompt::TrainCfg& cfg);

// Prompt (and optionally the header afterwards) fine-tuned on clean labeled
// egos, then re-evaluated.
Metrics scenario_finetune_prompt(const atk::AttackRun& run,
                                 std::shared_ptr<const Graph> graph,
                                 const NodeSplit& split, const prompt::TrainCfg& cfg,
                                 bool also_header);

// The attacked header is discarded; a fresh one is trained from scratch on
// clean labeled egos with the trojan prompt fixed.
Metrics scenario_user_header(const atk::AttackRun& run,
                             std::shared_ptr<const Graph> graph, const NodeSplit& split,
                             const prompt::TrainCfg& cfg);

struct CrossDatasetCfg {
  std::string pretrainer = "simgrace";  // simgrace | graphcl | edgepred
  enc::Backbone backbone = enc::Backbone::gcn;
  int hidden = 128;
  int svd_dim = 100;  // both graphs are projected to this width
  int shots = 100;
  int partition_k = 100;
  pre::PretrainCfg pretrain;
  atk::AttackConfig attack;
};

// Pretrain + freeze on one graph, attack + evaluate on another; feature
// widths are equalized by SVD projection first.
Metrics scenario_cross_dataset(const Graph& pretrain_graph,
                               const Graph& downstream_graph,
                               const CrossDatasetCfg& cfg);

// Edge-similarity defense: drops every edge whose endpoint-feature cosine
// similarity is below the threshold (zero-norm endpoints score 0). Never
// adds edges; idempotent at a fixed threshold.
Graph defense_prune(const Graph& g, double threshold);

enum class SweepKind { trigger_size, poison_ratio, lambda, epsilon };

SweepKind sweep_kind_from_string(const std::string& s);
std::string to_string(SweepKind k);

struct SweepPoint {
  double value = 0.0;
  Metrics metrics;
};

// One full attack + evaluation per value of the swept knob. Poison nodes are
// re-selected per point from the unlabeled pool (the ratio knob changes the
// selection; the others keep it fixed via the shared seed).
std::vector<SweepPoint> sweep(SweepKind kind, const std::vector<double>& values,
                              atk::Variant variant, const enc::EncoderParams& encoder,
                              std::shared_ptr<const Graph> graph, const NodeSplit& split,
                              const atk::AttackConfig& base);

// JSON-lines result row. Aggregate rows carry the seed-mean of a scenario and
// are skipped when tables recompute averages from per-seed rows.
struct ResultRow {
  std::string scenario;
  std::string dataset;
  std::string gpl;
  std::string backbone;
  std::string method;
  double asr = 0.0;
  double ca = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool aggregate = false;

  json to_json() const;
};

void append_result(const std::string& path, const ResultRow& row);

}  // namespace gplab::ev
